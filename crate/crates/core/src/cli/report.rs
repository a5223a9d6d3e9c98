//! Human-readable summary and plot CSVs of a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::store::{read_json, write_atomic};
use super::{
    FrontierArtifact, SelectedArtifact, SensitivityArtifact, EVAL_FILE, FRONTIER_JSON, PATCH_BITS_FILE,
    SELECTED_FILE, SENSITIVITY_FILE,
};
use crate::aas::PatchBitAssignment;
use crate::error::{Error, Result};

use super::pipeline::EvalReport;

pub const PLOT_FRONTIER: &str = "frontier_plot.csv";
pub const PLOT_SENSITIVITY: &str = "sensitivity.csv";
pub const PLOT_PATCH_HIST: &str = "patch_bits_hist.csv";

/// Reads the artifacts of `dir`, writes plot CSVs into `out` and returns
/// the summary text.
pub fn cmd_report(dir: &Path, out: &Path) -> Result<String> {
    let sens: SensitivityArtifact = read_json(&dir.join(SENSITIVITY_FILE))?;
    let frontier: FrontierArtifact = read_json(&dir.join(FRONTIER_JSON))?;
    let selected: SelectedArtifact = read_json(&dir.join(SELECTED_FILE))?;
    let patches: Vec<PatchBitAssignment> = read_json(&dir.join(PATCH_BITS_FILE))?;
    let eval: EvalReport = read_json(&dir.join(EVAL_FILE))?;
    if frontier.points.is_empty() {
        return Err(Error::format(dir.join(FRONTIER_JSON), "frontier is empty"));
    }

    // Exact (size, omega) ties are one point on a plot.
    let mut points: Vec<(u64, f64)> = frontier.points.iter().map(|p| (p.size_bits, p.omega)).collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup_by_key(|p| p.0);
    let mut csv = String::from("size_bits,omega\n");
    for (s, o) in &points {
        writeln!(csv, "{s},{o}").unwrap();
    }
    write_atomic(&out.join(PLOT_FRONTIER), csv.as_bytes())?;

    let mut csv = String::from("component,score\n");
    for s in &sens.scores {
        writeln!(csv, "{},{}", s.component, s.score).unwrap();
    }
    write_atomic(&out.join(PLOT_SENSITIVITY), csv.as_bytes())?;

    let mut csv = String::from("layer,bits,count\n");
    for a in &patches {
        let mut hist: BTreeMap<u8, usize> = BTreeMap::new();
        for &b in &a.bits {
            *hist.entry(b).or_default() += 1;
        }
        for (b, c) in hist {
            writeln!(csv, "{},{b},{c}", a.layer).unwrap();
        }
    }
    write_atomic(&out.join(PLOT_PATCH_HIST), csv.as_bytes())?;

    let mut s = String::new();
    writeln!(s, "sensitivity ({:?}, {} samples)", sens.aggregation, sens.num_samples).unwrap();
    for r in &sens.scores {
        writeln!(s, "  {:<16} {:>12.6e}", r.component, r.score).unwrap();
    }
    let total = eval.size_bits;
    writeln!(
        s,
        "frontier: {} points, {}..{} bits",
        frontier.points.len(),
        points[0].0,
        points[points.len() - 1].0
    )
    .unwrap();
    writeln!(s, "selected (budget {} bits):", selected.budget_bits).unwrap();
    for e in &selected.point.config.entries {
        writeln!(s, "  {:<16} w{} a{}", e.component.to_string(), e.weight_bits, e.activation_bits).unwrap();
    }
    for a in &patches {
        writeln!(s, "  block {} patches (base {}): {:?}", a.layer, a.base_bits, a.bits).unwrap();
    }
    writeln!(
        s,
        "eval on {} samples: accuracy {:.4} (float {:.4}), agreement {:.4}, logit mse {:.3e}",
        eval.num_samples, eval.accuracy, eval.float_accuracy, eval.agreement, eval.logit_mse
    )
    .unwrap();
    writeln!(s, "size {} bits ({:.1} bytes), omega {:.6e}", total, total as f64 / 8.0, eval.omega).unwrap();
    for p in &eval.patch_bits {
        writeln!(s, "  block {} average patch bits {:.3}", p.layer, p.average_bits).unwrap();
    }
    Ok(s)
}
