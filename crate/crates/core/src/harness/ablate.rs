//! The seven-variant ablation lattice and its comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::MetricsRecord;
use super::train::{train_on, train_to_dir, Dataset};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub test: MetricsRecord,
    pub seconds: f64,
}

impl AblationRow {
    /// Test accuracy on action-order and repetition-count questions.
    pub fn temporal(&self) -> f64 {
        self.test.temporal_accuracy.unwrap_or(f64::NAN)
    }
}

/// Order checked on temporal test accuracy; `true` marks a strict step.
pub const ORDERING: [(Variant, Variant, bool); 4] = [
    (Variant::LinguisticOnly, Variant::SframeMac, true),
    (Variant::SframeMac, Variant::AvgpoolMac, true),
    (Variant::AvgpoolMac, Variant::TrnMac, false),
    (Variant::TrnMac, Variant::CrnMac, false),
];

/// Trains every variant with the shared seed and corpus. Checkpoints go under `base.out/<variant>` when set.
pub fn ablate(base: &RunConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = RunConfig {
            variant,
            out: base.out.as_ref().map(|o| o.join(variant.name())),
            ..base.clone()
        };
        let start = Instant::now();
        let (best_epoch, test) = match (&cfg.out, cfg.precision) {
            (Some(_), _) => {
                let s = train_to_dir(&cfg, data)?;
                (s.best_epoch, s.test)
            }
            (None, Precision::F32) => {
                let o = train_on::<f32>(&cfg, data, |_| Ok(()))?;
                (o.best_epoch, o.test)
            }
            (None, Precision::F64) => {
                let o = train_on::<f64>(&cfg, data, |_| Ok(()))?;
                (o.best_epoch, o.test)
            }
        };
        rows.push(AblationRow {
            variant,
            best_epoch,
            test,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn row(rows: &[AblationRow], v: Variant) -> Result<&AblationRow> {
    rows.iter()
        .find(|r| r.variant == v)
        .ok_or_else(|| Error::contract(format!("no ablation row for {v}")))
}

/// Pairs of the expected ordering that do not hold.
pub fn ordering_violations(rows: &[AblationRow]) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (lo, hi, strict) in ORDERING {
        let (a, b) = (row(rows, lo)?.temporal(), row(rows, hi)?.temporal());
        let ok = if strict { a < b } else { a <= b };
        if !ok {
            let op = if strict { "<" } else { "<=" };
            bad.push(format!("{lo} {a:.4} {op} {hi} {b:.4} fails"));
        }
    }
    Ok(bad)
}

/// Temporal accuracy gap between the full model and the question-only baseline.
pub fn margin(rows: &[AblationRow]) -> Result<f64> {
    Ok(row(rows, Variant::CrnMac)?.temporal() - row(rows, Variant::LinguisticOnly)?.temporal())
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Markdown table keyed by variant.
pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | temporal acc | overall acc | count mse | best epoch | seconds |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.0} |",
            r.variant,
            pct(r.test.temporal_accuracy),
            pct(Some(r.test.accuracy)),
            r.test.count_mse.map_or("-".into(), |m| format!("{m:.3}")),
            r.best_epoch,
            r.seconds
        );
    }
    s
}

/// Writes `ablation.md` and `ablation.jsonl` into `dir`.
pub fn write_report(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.md"), table(rows))?;
    let mut lines = String::new();
    for r in rows {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("ablation.jsonl"), lines)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Split, Task, Template};
    use std::collections::BTreeMap;

    fn fake(variant: Variant, acc: f64) -> AblationRow {
        AblationRow {
            variant,
            best_epoch: 1,
            test: MetricsRecord {
                epoch: 1,
                split: Split::Test,
                items: 10,
                loss: 0.0,
                accuracy: acc,
                temporal_accuracy: Some(acc),
                per_task: BTreeMap::from([(Task::ActionOrder, acc)]),
                per_template: BTreeMap::from([(Template::ActionAfter, acc)]),
                count_mse: None,
                wall_clock_s: 0.0,
            },
            seconds: 0.0,
        }
    }

    #[test]
    fn ordering_checks() {
        let accs = [0.3, 0.4, 0.5, 0.6, 0.6, 0.4, 0.7];
        let rows: Vec<_> = Variant::ALL.iter().zip(accs).map(|(&v, a)| fake(v, a)).collect();
        assert!(ordering_violations(&rows).unwrap().is_empty());
        assert!((margin(&rows).unwrap() - 0.4).abs() < 1e-12);
        let t = table(&rows);
        assert_eq!(t.lines().count(), 9);
        assert!(t.contains("| crn_mac | 70.0 |"));

        let mut broken = rows.clone();
        broken[3].test.temporal_accuracy = Some(0.45);
        let v = ordering_violations(&broken).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("sframe_mac"));
    }
}
