//! Per-cell results and the comparison table.

use std::fmt::Write;
use std::path::PathBuf;

use super::spec::ArmKind;
use super::split::Percent;
use crate::taxonomy::Variant;

/// Outcome of one (arm, percent, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub arm: String,
    pub kind: ArmKind,
    pub percent: Percent,
    pub seed: u64,
    pub test_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    /// Finetune validation mIoU per epoch.
    pub validation_curve: Vec<f64>,
    /// Pre-training validation mIoU per epoch; empty for scratch.
    pub pretrain_curve: Vec<f64>,
    pub pretrain_majority_baseline: Option<f64>,
    /// Digest of everything that configures finetuning except the arm.
    pub config_digest: String,
    pub checkpoint_sha256: String,
    pub checkpoint_path: Option<PathBuf>,
    /// Whether the backbone after the head swap equals the checkpoint's
    /// bit for bit; `None` for scratch.
    pub backbone_matches_checkpoint: Option<bool>,
    /// Parameter tensors left bit-identical by finetuning.
    pub frozen_tensors: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub target: String,
    pub variant: Variant,
    /// Arm labels in spec order.
    pub arms: Vec<String>,
    pub percents: Vec<Percent>,
    pub seeds: Vec<u64>,
    /// Sorted by arm order, percent, seed.
    pub entries: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn cell(&self, arm: &str, percent: Percent, seed: u64) -> Option<&CellResult> {
        self.entries
            .iter()
            .find(|c| c.arm == arm && c.percent == percent && c.seed == seed)
    }

    fn scratch_label(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|c| c.kind == ArmKind::Scratch)
            .map(|c| c.arm.as_str())
    }

    /// Test mIoU per seed, in seed order.
    pub fn values(&self, arm: &str, percent: Percent) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter(|c| c.arm == arm && c.percent == percent)
            .map(|c| (c.seed, c.test_miou))
            .collect()
    }

    pub fn median_miou(&self, arm: &str, percent: Percent) -> Option<f64> {
        median(&self.values(arm, percent).iter().map(|v| v.1).collect::<Vec<_>>())
    }

    /// Arm minus scratch for each seed both ran.
    pub fn deltas(&self, arm: &str, percent: Percent) -> Vec<(u64, f64)> {
        let Some(scratch) = self.scratch_label() else {
            return Vec::new();
        };
        self.values(arm, percent)
            .into_iter()
            .filter_map(|(seed, v)| self.cell(scratch, percent, seed).map(|s| (seed, v - s.test_miou)))
            .collect()
    }

    pub fn median_delta(&self, arm: &str, percent: Percent) -> Option<f64> {
        median(&self.deltas(arm, percent).iter().map(|v| v.1).collect::<Vec<_>>())
    }

    /// Arms as rows, target fractions as columns; each cell is the median
    /// test mIoU in percent with the median change against scratch.
    pub fn render_table(&self) -> String {
        let scratch = self.scratch_label().map(str::to_string);
        let width = self.arms.iter().map(String::len).max().unwrap_or(0).max(3);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Test mIoU on {} ({} coarse pre-training), median over {} seed(s)",
            self.target,
            self.variant,
            self.seeds.len()
        );
        let _ = write!(out, "{:<width$}", "arm");
        for p in &self.percents {
            let _ = write!(out, "  {:>16}", p.to_string());
        }
        out.push('\n');
        for arm in &self.arms {
            let _ = write!(out, "{arm:<width$}");
            for &p in &self.percents {
                let cell = match self.median_miou(arm, p) {
                    None => "-".to_string(),
                    Some(m) if Some(arm) == scratch.as_ref() => format!("{:.2}", m * 100.0),
                    Some(m) => match self.median_delta(arm, p) {
                        Some(d) => format!("{:.2} ({:+.2})", m * 100.0, d * 100.0),
                        None => format!("{:.2}", m * 100.0),
                    },
                };
                let _ = write!(out, "  {cell:>16}");
            }
            out.push('\n');
        }
        out
    }

    /// One row per cell.
    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "arm,kind,percent,seed,test_miou,delta_vs_scratch,final_validation_miou,final_pretrain_miou,pretrain_majority_baseline,frozen_tensors,config_digest,checkpoint_sha256,checkpoint_path\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for c in &self.entries {
            let delta = self
                .deltas(&c.arm, c.percent)
                .into_iter()
                .find(|d| d.0 == c.seed)
                .map(|d| d.1);
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{},{},{},{},{}",
                c.arm,
                c.kind,
                c.percent.value(),
                c.seed,
                c.test_miou,
                opt(delta),
                opt(c.validation_curve.last().copied()),
                opt(c.pretrain_curve.last().copied()),
                opt(c.pretrain_majority_baseline),
                c.frozen_tensors,
                c.config_digest,
                c.checkpoint_sha256,
                c.checkpoint_path.as_ref().map_or_else(String::new, |p| p.display().to_string()),
            );
        }
        out
    }

    /// `arm,percent,seed,class,iou` rows; absent classes leave `iou` empty.
    pub fn render_class_csv(&self) -> String {
        let mut out = String::from("arm,percent,seed,class,iou\n");
        for c in &self.entries {
            for (name, iou) in c.class_names.iter().zip(&c.per_class_iou) {
                let _ = writeln!(
                    out,
                    "{},{},{},{name},{}",
                    c.arm,
                    c.percent.value(),
                    c.seed,
                    iou.map_or_else(String::new, |v| format!("{v:.6}"))
                );
            }
        }
        out
    }

    /// `arm,percent,seed,phase,epoch,miou` rows for both training phases.
    pub fn render_curves_csv(&self) -> String {
        let mut out = String::from("arm,percent,seed,phase,epoch,miou\n");
        for c in &self.entries {
            for (phase, curve) in [("pretrain", &c.pretrain_curve), ("finetune", &c.validation_curve)] {
                for (e, v) in curve.iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{phase},{e},{v:.6}", c.arm, c.percent.value(), c.seed);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(arm: &str, kind: ArmKind, percent: Percent, seed: u64, miou: f64) -> CellResult {
        CellResult {
            arm: arm.into(),
            kind,
            percent,
            seed,
            test_miou: miou,
            per_class_iou: vec![Some(miou), None],
            class_names: vec!["a".into(), "b".into()],
            validation_curve: vec![0.1, 0.2],
            pretrain_curve: vec![],
            pretrain_majority_baseline: None,
            config_digest: "d".into(),
            checkpoint_sha256: "c".into(),
            checkpoint_path: None,
            backbone_matches_checkpoint: None,
            frozen_tensors: 0,
        }
    }

    fn report() -> ExperimentReport {
        let mut entries = Vec::new();
        for (seed, s, c) in [(0, 0.40, 0.45), (1, 0.50, 0.52), (2, 0.30, 0.41)] {
            entries.push(cell("scratch", ArmKind::Scratch, Percent::P10, seed, s));
            entries.push(cell("cola", ArmKind::Cola, Percent::P10, seed, c));
        }
        ExperimentReport {
            target: "t".into(),
            variant: Variant::Eight,
            arms: vec!["scratch".into(), "cola".into()],
            percents: vec![Percent::P10],
            seeds: vec![0, 1, 2],
            entries,
        }
    }

    #[test]
    fn medians_and_deltas() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let r = report();
        assert_eq!(r.entries.len(), 6);
        assert_eq!(r.median_miou("cola", Percent::P10), Some(0.45));
        let d = r.median_delta("cola", Percent::P10).unwrap();
        // per-seed deltas 0.05, 0.02, 0.11
        assert!((d - 0.05).abs() < 1e-12);
        assert_eq!(r.median_delta("scratch", Percent::P10), Some(0.0));
    }

    #[test]
    fn table_layout() {
        let table = report().render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].contains("10%"));
        assert!(lines[2].starts_with("scratch") && lines[2].trim_end().ends_with("40.00"));
        assert!(lines[3].starts_with("cola") && lines[3].contains("45.00 (+5.00)"));
        let csv = report().render_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(2).unwrap().starts_with("cola,cola,10,0,0.450000,0.050000,"));
        assert_eq!(report().render_class_csv().lines().nth(2).unwrap(), "scratch,10,0,b,");
        assert_eq!(report().render_curves_csv().lines().count(), 13);
    }
}
