//! Command layer: persistence, stage re-runs, reports and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pmq::allocator::total_weights;
use pmq::cli::report::{cmd_report, PLOT_FRONTIER, PLOT_SENSITIVITY};
use pmq::cli::store::{sha256_hex, DirLock};
use pmq::cli::{
    self, load_checkpoint, Budget, PipelineConfig, RunInputs, SelectedArtifact, Stage, FRONTIER_JSON, SELECTED_FILE,
};
use pmq::vit::{accuracy, predict, ComponentId, ViTParams};
use pmq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.train_samples = 96;
    cfg.data.test_samples = 64;
    cfg.train.epochs = 15;
    cfg
}

struct Prepared {
    dir: tempfile::TempDir,
    cfg: PipelineConfig,
}

impl Prepared {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn ck(&self) -> PathBuf {
        self.dir.path().join("ck")
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn inputs(&self) -> RunInputs {
        RunInputs::load(&self.ck(), &self.data()).unwrap()
    }
}

fn prepare(cfg: PipelineConfig) -> Prepared {
    let dir = tempfile::tempdir().unwrap();
    let p = Prepared { dir, cfg };
    cli::cmd_gen_data(&p.cfg, &p.data()).unwrap();
    cli::cmd_train(&p.cfg, &p.data(), &p.ck()).unwrap();
    p
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cli::cmd_gen_data(&cfg, a.path()).unwrap();
    cli::cmd_gen_data(&cfg, b.path()).unwrap();
    let (da, db) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    assert_eq!(da.len(), 4);
    assert_eq!(da, db);
    let back = cli::load_dataset(&a.path().join("train")).unwrap();
    let (train, _) = pmq::data::generate(&cfg.model, &cfg.data).unwrap();
    assert_eq!(back, train);
}

/// Multinomial logistic regression on flattened inputs, full-batch GD.
fn linear_probe_accuracy(train: &pmq::data::Dataset, test: &pmq::data::Dataset) -> f64 {
    let dim = train.patches * train.patch_dim;
    let c = train.num_classes;
    let mut w = vec![0.0f64; dim * c];
    let feats = |d: &pmq::data::Dataset, i: usize| -> Vec<f64> { d.samples[i].data().iter().map(|&v| f64::from(v)).collect() };
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c).map(|k| (0..dim).map(|j| w[j * c + k] * x[j]).sum()).collect()
    };
    for _ in 0..200 {
        let mut grad = vec![0.0; dim * c];
        for i in 0..train.len() {
            let x = feats(train, i);
            let z = logits(&w, &x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - f64::from(u8::from(train.labels[i] == k));
                for j in 0..dim {
                    grad[j * c + k] += g * x[j];
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= 0.05 * g / train.len() as f64;
        }
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let z = logits(&w, &feats(test, i));
            let best = (0..c).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == test.labels[i]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn separation_controls_difficulty() {
    let mut cfg = small_config();
    cfg.data.separation = 3.0;
    let (train, test) = pmq::data::generate(&cfg.model, &cfg.data).unwrap();
    let probe = linear_probe_accuracy(&train, &test);
    assert!(probe >= 0.95, "linear probe accuracy {probe}");

    cfg.data.separation = 0.0;
    cfg.data.test_samples = 400;
    let p = prepare(cfg);
    let inputs = p.inputs();
    let logits = predict(&inputs.checkpoint.params, &inputs.test.samples, None).unwrap();
    let acc = accuracy(&logits, &inputs.test.labels);
    // chance is 0.25 for 4 classes; 400 samples give a standard error of ~0.022
    assert!((acc - 0.25).abs() < 0.1, "test accuracy {acc} at zero separation");
}

#[test]
fn training_checkpoints() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let p = prepare(cfg.clone());
    let ck = load_checkpoint(&p.ck().join("checkpoint")).unwrap();
    let init = ViTParams::<f32>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed)).unwrap();
    assert_eq!(ck.params.tensors(), init.tensors());
    assert_eq!(ck.meta.report.epochs, 0);

    cfg.train.epochs = 3;
    let a = prepare(cfg.clone());
    cli::cmd_train(&cfg, &a.data(), &a.path("again")).unwrap();
    let hash = |d: &Path| sha256_hex(&fs::read(d.join("checkpoint.bin")).unwrap());
    assert_eq!(hash(&a.ck()), hash(&a.path("again")));
    assert_eq!(
        fs::read(a.ck().join("checkpoint.json")).unwrap(),
        fs::read(a.path("again").join("checkpoint.json")).unwrap()
    );
}

#[test]
fn loss_curve_decreases_on_easy_data() {
    let mut cfg = small_config();
    cfg.data.separation = 3.0;
    cfg.train.epochs = 10;
    let p = prepare(cfg);
    let losses = load_checkpoint(&p.ck().join("checkpoint")).unwrap().meta.report.step_losses;
    let means: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(means.len() >= 5);
    for (i, w) in means.windows(2).enumerate() {
        assert!(w[1] <= w[0], "10-step mean rose at window {i}: {means:?}");
    }
}

#[test]
fn checkpoint_tampering_is_rejected() {
    let p = prepare(small_config());
    let bin = p.ck().join("checkpoint.bin");
    let mut blob = fs::read(&bin).unwrap();
    blob[17] ^= 0x40;
    fs::write(&bin, blob).unwrap();
    let err = RunInputs::load(&p.ck(), &p.data()).err().unwrap();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");
    assert_eq!(cli::exit_code(&err), 3);
}

#[test]
fn pipeline_examples() {
    let p = prepare(small_config());
    let inputs = p.inputs();
    let start = std::time::Instant::now();

    // a budget at the all-8-bit size selects all-8-bit
    let mut cfg = p.cfg.clone();
    cfg.allocation.budget = Budget::Uniform(8);
    let out = p.path("run8");
    let report = cli::cmd_run(&cfg, &inputs, &out, Stage::All).unwrap().unwrap();
    let sel: SelectedArtifact = pmq::cli::store::read_json(&out.join(SELECTED_FILE)).unwrap();
    assert!(sel.point.config.entries.iter().all(|e| e.weight_bits == 8 && e.activation_bits == 8));
    assert_eq!(report.size_bits, total_weights(&cfg.model) * 8);
    assert_eq!(report.size_bits, pmq::allocator::model_size(&cfg.model, &sel.point.config).unwrap());
    assert!((0.0..=1.0).contains(&report.accuracy) && (0.0..=1.0).contains(&report.agreement));
    assert!(start.elapsed().as_secs() < 60);

    // quantisation disabled is the float model exactly
    let mut cfg = p.cfg.clone();
    cfg.allocation.disabled = true;
    let r = cli::cmd_run(&cfg, &inputs, &p.path("float"), Stage::All).unwrap().unwrap();
    assert_eq!(r.accuracy, r.float_accuracy);
    assert_eq!(r.agreement, 1.0);
    assert_eq!(r.logit_mse, 0.0);

    // per-sample patch scoring and literal mode run through
    let mut cfg = p.cfg.clone();
    cfg.aas.per_sample = true;
    let r = cli::cmd_run(&cfg, &inputs, &p.path("per_sample"), Stage::All).unwrap().unwrap();
    assert_eq!(r.patch_bits.len(), cfg.model.depth);
    let mut cfg = p.cfg.clone();
    cfg.aas.mode = pmq::aas::ScoreMode::LiteralRowSum;
    cli::cmd_run(&cfg, &inputs, &p.path("literal"), Stage::All).unwrap();
    let patches: Vec<pmq::aas::PatchBitAssignment> =
        pmq::cli::store::read_json(&p.path("literal").join(cli::PATCH_BITS_FILE)).unwrap();
    assert!(patches.iter().all(|a| a.bits.iter().all(|&b| b == a.base_bits)));
}

#[test]
fn infeasible_budget_and_model_mismatch() {
    let p = prepare(small_config());
    let inputs = p.inputs();
    let mut cfg = p.cfg.clone();
    cfg.allocation.budget = Budget::Bits(10);
    let err = cli::cmd_run(&cfg, &inputs, &p.path("run"), Stage::All).unwrap_err();
    match &err {
        Error::InfeasibleBudget { budget_bits, min_size_bits } => {
            assert_eq!(*budget_bits, 10);
            assert!(*min_size_bits >= total_weights(&cfg.model) * 2);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(cli::exit_code(&err), 2);

    let mut cfg = p.cfg.clone();
    cfg.model.mlp_dim = 8;
    assert!(matches!(cli::cmd_run(&cfg, &inputs, &p.path("run2"), Stage::All), Err(Error::Config(_))));
}

#[test]
fn stages_rerun_identically() {
    let p = prepare(small_config());
    let inputs = p.inputs();
    let out = p.path("run");
    cli::cmd_run(&p.cfg, &inputs, &out, Stage::All).unwrap();
    let before = read_dir_bytes(&out);
    for stage in [Stage::Sensitivity, Stage::Allocate, Stage::Aas, Stage::Eval] {
        cli::cmd_run(&p.cfg, &inputs, &out, stage).unwrap();
        assert_eq!(read_dir_bytes(&out), before, "{stage:?} re-run changed artifacts");
    }
    // stages read their inputs from disk
    let fresh = p.path("fresh");
    assert!(matches!(cli::cmd_run(&p.cfg, &inputs, &fresh, Stage::Allocate), Err(Error::NotFound { .. })));
    cli::cmd_run(&p.cfg, &inputs, &fresh, Stage::Sensitivity).unwrap();
    cli::cmd_run(&p.cfg, &inputs, &fresh, Stage::Allocate).unwrap();
    cli::cmd_run(&p.cfg, &inputs, &fresh, Stage::Aas).unwrap();
    cli::cmd_run(&p.cfg, &inputs, &fresh, Stage::Eval).unwrap();
    assert_eq!(read_dir_bytes(&fresh), before);
}

#[test]
fn unconverged_checkpoint_only_warns() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    cfg.train.grad_norm_threshold = 1e-12;
    let p = prepare(cfg);
    let inputs = p.inputs();
    assert!(!inputs.checkpoint.meta.report.converged);
    let r = cli::cmd_run(&p.cfg, &inputs, &p.path("run"), Stage::All).unwrap().unwrap();
    assert!(!r.checkpoint_converged);
}

#[test]
fn locked_directory_is_refused() {
    let p = prepare(small_config());
    let out = p.path("run");
    let _lock = DirLock::acquire(&out).unwrap();
    let err = cli::cmd_run(&p.cfg, &p.inputs(), &out, Stage::All).unwrap_err();
    assert_eq!(cli::exit_code(&err), 3);
}

#[test]
fn report_outputs() {
    let p = prepare(small_config());
    let out = p.path("run");
    cli::cmd_run(&p.cfg, &p.inputs(), &out, Stage::All).unwrap();
    let plots = p.path("plots");
    let summary = cmd_report(&out, &plots).unwrap();
    assert!(summary.contains("accuracy"));

    let frontier = fs::read_to_string(plots.join(PLOT_FRONTIER)).unwrap();
    let sizes: Vec<u64> = frontier.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(!sizes.is_empty());
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
    let sens = fs::read_to_string(plots.join(PLOT_SENSITIVITY)).unwrap();
    assert_eq!(sens.lines().count() - 1, ComponentId::all(&p.cfg.model).len());

    // an empty frontier is an error naming the file
    let json = out.join(FRONTIER_JSON);
    fs::write(&json, "{\"points\": []}").unwrap();
    let err = cmd_report(&out, &plots).unwrap_err();
    assert!(err.to_string().contains(FRONTIER_JSON), "{err}");

    // a missing artifact is reported by name
    fs::remove_file(out.join(cli::EVAL_FILE)).unwrap();
    match cmd_report(&out, &plots).unwrap_err() {
        Error::NotFound { path } => assert!(path.ends_with(cli::EVAL_FILE)),
        e => panic!("unexpected {e}"),
    }
}

fn pmq_bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pmq"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("pmq.toml");
    fs::write(
        &config,
        "[data]\ntrain_samples = 64\ntest_samples = 32\n\n[train]\nepochs = 5\n\n[allocation]\nbudget = { uniform = 6 }\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        pmq_bin()
            .arg("--config")
            .arg(&config)
            .args(args)
            .output()
            .unwrap()
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, ck, out) = (s(&d.join("data")), s(&d.join("ck")), s(&d.join("run")));
    assert_eq!(run(&["gen-data", "--out", &data]).status.code(), Some(0));
    assert_eq!(run(&["train", "--data", &data, "--out", &ck]).status.code(), Some(0));
    let ok = run(&["run", "--data", &data, "--checkpoint", &ck, "--out", &out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: pmq::cli::EvalReport = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report.size_bits <= total_weights(&pmq::vit::ViTConfig::default()) * 6);
    let rep = run(&["report", "--artifacts", &out]);
    assert_eq!(rep.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("frontier"));

    let infeasible = run(&[
        "--set",
        "allocation.budget={bits=1}",
        "run",
        "--data",
        &data,
        "--checkpoint",
        &ck,
        "--out",
        &s(&d.join("r2")),
    ]);
    assert_eq!(infeasible.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&infeasible.stderr).contains("minimum achievable size"));

    assert_eq!(run(&["run", "--data", &data]).status.code(), Some(1));
    assert_eq!(run(&["--set", "model.bogus=1", "show-config"]).status.code(), Some(1));
    assert_eq!(
        run(&["run", "--data", &s(&d.join("nope")), "--checkpoint", &ck, "--out", &out]).status.code(),
        Some(3)
    );
    assert_eq!(run(&["report", "--artifacts", &s(&d.join("nope"))]).status.code(), Some(3));
    assert_eq!(pmq_bin().arg("--help").output().unwrap().status.code(), Some(0));

    let shown = run(&["--set", "model.depth=3", "show-config"]);
    let cfg = PipelineConfig::from_toml(&String::from_utf8_lossy(&shown.stdout)).unwrap();
    assert_eq!(cfg.model.depth, 3);
    assert_eq!(cfg.data.train_samples, 64);
}
