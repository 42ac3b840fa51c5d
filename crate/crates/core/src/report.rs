//! Aggregated result tables for the ablation grid, plus plot-ready CSV
//! emitters (accuracy curves, decision-boundary grids).

use crate::objectives::argmax;
use crate::train::{Ablations, RunMetrics, TrainScheme, TrainSession};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Fixed row vocabulary of the ablation grid, in emission order.
pub const ROW_LABELS: [&str; 7] = [
    "Attack",
    "Mix-then-Attack",
    "Attack-then-Mix",
    "Ours, Frozen λ, Shared δ",
    "Ours, Frozen λ",
    "Ours, Shared δ",
    "Ours",
];

/// Scheme and toggles behind each row label.
pub fn row_config(label: &str) -> Option<(TrainScheme, Ablations)> {
    let ours = |frozen: bool, shared: bool| Ablations {
        frozen_lambda: frozen,
        shared_delta: shared,
        geometric_labels: true,
        optimize_ratio: !frozen,
    };
    Some(match label {
        "Attack" => (TrainScheme::Attack, Ablations::default()),
        "Mix-then-Attack" => (TrainScheme::MixThenAttack, Ablations::default()),
        "Attack-then-Mix" => (TrainScheme::AttackThenMix, Ablations::default()),
        "Ours, Frozen λ, Shared δ" => (TrainScheme::AdvMixup, ours(true, true)),
        "Ours, Frozen λ" => (TrainScheme::AdvMixup, ours(true, false)),
        "Ours, Shared δ" => (TrainScheme::AdvMixup, ours(false, true)),
        "Ours" => (TrainScheme::AdvMixup, ours(false, false)),
        _ => return None,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CellStat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl CellStat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        CellStat {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub name: String,
    /// None marks a failed grid cell; the grid keeps going.
    pub cells: BTreeMap<String, Option<CellStat>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportTable {
    /// Column order; "pristine" first, then one per attacker.
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(attacker_names: &[String]) -> Self {
        let mut columns = vec!["pristine".to_string()];
        columns.extend(attacker_names.iter().cloned());
        ReportTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, name: &str, cells: BTreeMap<String, Option<CellStat>>) {
        self.rows.push(ReportRow {
            name: name.to_string(),
            cells,
        });
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&CellStat> {
        self.rows
            .iter()
            .find(|r| r.name == row)
            .and_then(|r| r.cells.get(column))
            .and_then(|c| c.as_ref())
    }

    /// Stable schema: row, then mean/std column pair per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.columns {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:?}", row.name);
            for c in &self.columns {
                match row.cells.get(c).and_then(|v| v.as_ref()) {
                    Some(s) => {
                        let _ = write!(out, ",{:.6},{:.6}", s.mean, s.std);
                    }
                    None => out.push_str(",failed,failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Epoch curves for plotting: epoch, lr, train_loss, train_acc.
pub fn curves_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc\n");
    for e in &metrics.epochs {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.train_acc);
    }
    out
}

/// Predicted class over a regular grid, for 2-D inputs only.
/// Header: x0,x1,class.
pub fn decision_boundary_csv(
    session: &mut TrainSession,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> String {
    let n = resolution.max(2);
    let mut points = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / (n - 1) as f64;
            let y = y_range.0 + (y_range.1 - y_range.0) * j as f64 / (n - 1) as f64;
            points.push(x);
            points.push(y);
        }
    }
    let g = &mut session.graph;
    let wm = g.leaf_watermark();
    let xt = g.leaf(vec![n * n, 2], points.clone(), false);
    let logits = session.model.forward(g, xt).expect("2-d forward");
    let k = g.shape(logits)[1];
    let preds: Vec<usize> = g.values(logits).chunks(k).map(argmax).collect();
    g.reset();
    g.truncate_leaves(wm);
    let mut out = String::from("x0,x1,class\n");
    for (p, cls) in points.chunks(2).zip(preds) {
        let _ = writeln!(out, "{},{},{cls}", p[0], p[1]);
    }
    out
}
