//! Per-split accuracy, count error and loss records.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Split, Task, Template};

/// Outcome for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub item: usize,
    pub task: Task,
    pub template: Template,
    pub correct: bool,
    /// Squared error of the rounded count, for regression tasks.
    pub squared_error: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub items: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy over action-order and repetition-count questions.
    pub temporal_accuracy: Option<f64>,
    pub per_task: BTreeMap<Task, f64>,
    pub per_template: BTreeMap<Template, f64>,
    pub count_mse: Option<f64>,
    pub wall_clock_s: f64,
}

fn rate(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

impl MetricsRecord {
    pub fn from_predictions(epoch: usize, split: Split, preds: &[Prediction], wall_clock_s: f64) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let n = preds.len();
        let hits = preds.iter().filter(|p| p.correct).count();
        let mut task: BTreeMap<Task, (usize, usize)> = BTreeMap::new();
        let mut tmpl: BTreeMap<Template, (usize, usize)> = BTreeMap::new();
        for p in preds {
            let e = task.entry(p.task).or_default();
            e.0 += p.correct as usize;
            e.1 += 1;
            let e = tmpl.entry(p.template).or_default();
            e.0 += p.correct as usize;
            e.1 += 1;
        }
        let temporal: Vec<&Prediction> = preds.iter().filter(|p| p.task.is_temporal()).collect();
        let sq: Vec<f64> = preds.iter().filter_map(|p| p.squared_error).collect();
        Ok(MetricsRecord {
            epoch,
            split,
            items: n,
            loss: preds.iter().map(|p| p.loss).sum::<f64>() / n as f64,
            accuracy: rate(hits, n),
            temporal_accuracy: (!temporal.is_empty())
                .then(|| rate(temporal.iter().filter(|p| p.correct).count(), temporal.len())),
            per_task: task.into_iter().map(|(k, (h, c))| (k, rate(h, c))).collect(),
            per_template: tmpl.into_iter().map(|(k, (h, c))| (k, rate(h, c))).collect(),
            count_mse: (!sq.is_empty()).then(|| sq.iter().sum::<f64>() / sq.len() as f64),
            wall_clock_s,
        })
    }

    /// Copy with the timing field cleared, for reproducibility comparisons.
    pub fn without_time(&self) -> Self {
        MetricsRecord {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
