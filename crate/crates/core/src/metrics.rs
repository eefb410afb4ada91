//! Average precision, mean AP and grouped mean recall.
//!
//! AP here is computed on per-class classification scores, not on matched
//! detection boxes: for each class every test sample is ranked by its score
//! for that class and the positives are the samples labeled with it.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{ClassGroups, Group, SampleBatch};
use crate::error::{Error, Result};
use crate::loss::{sigmoid, DEFAULT_PROB_CLAMP_EPS};
use crate::model::Model;

pub const DEFAULT_RECALL_THRESHOLD: f64 = 0.5;

/// Column order of [`EvalReport::table_row`].
pub const TABLE_COLUMNS: [&str; 7] = ["mR_f", "AP_f", "mR_c", "AP_c", "mR_r", "AP_r", "mAP"];

/// All-points interpolated average precision.
///
/// Samples are sorted by descending score, ties kept in index order. Samples
/// sharing a score are admitted together, so each distinct score is one
/// operating point and the result does not depend on the order inside a tie.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedAp("no positive labels".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // (recall, precision) after each distinct score.
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let score = scores[order[k]];
        while k < order.len() && scores[order[k]] == score {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    for j in (0..points.len()).rev() {
        envelope = envelope.max(points[j].1);
        let prev_recall = if j == 0 { 0.0 } else { points[j - 1].0 };
        ap += (points[j].0 - prev_recall) * envelope;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct GroupedMetrics {
    pub mR_f: Option<f64>,
    pub AP_f: Option<f64>,
    pub mR_c: Option<f64>,
    pub AP_c: Option<f64>,
    pub mR_r: Option<f64>,
    pub AP_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes with no positives in the test set.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over the classes with a defined AP.
    pub map: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    pub grouped: GroupedMetrics,
    pub excluded_classes: Vec<usize>,
    pub recall_threshold: f64,
    pub ap_basis: String,
}

impl EvalReport {
    /// `mR_f, AP_f, mR_c, AP_c, mR_r, AP_r, mAP`.
    pub fn table_row(&self) -> [Option<f64>; 7] {
        let g = &self.grouped;
        [g.mR_f, g.AP_f, g.mR_c, g.AP_c, g.mR_r, g.AP_r, self.map]
    }

    pub fn csv_header() -> String {
        TABLE_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format_row(&self.table_row())
    }
}

/// Formats metric cells; undefined values become empty cells.
pub fn format_row(cells: &[Option<f64>]) -> String {
    cells
        .iter()
        .map(|c| c.map(|v| v.to_string()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(",")
}

fn mean_of(values: &[Option<f64>], classes: &[usize]) -> Option<f64> {
    let defined: Vec<f64> = classes.iter().filter_map(|&i| values[i]).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

pub fn evaluate(model: &Model, test: &SampleBatch, groups: &ClassGroups) -> Result<EvalReport> {
    evaluate_with_threshold(model, test, groups, DEFAULT_RECALL_THRESHOLD)
}

pub fn evaluate_with_threshold(
    model: &Model,
    test: &SampleBatch,
    groups: &ClassGroups,
    threshold: f64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let c = model.spec.num_classes;
    if test.num_classes() != c || groups.num_classes() != c {
        return Err(Error::Dimension(format!(
            "model has {c} classes, test set {}, groups {}",
            test.num_classes(),
            groups.num_classes()
        )));
    }
    let logits = model.forward(test.features.view())?;
    let probs = sigmoid(logits.view(), DEFAULT_PROB_CLAMP_EPS)?.into_inner();
    let labels = test.labels.view();

    let mut per_class_ap = Vec::with_capacity(c);
    let mut per_class_recall = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for i in 0..c {
        let is_pos: Vec<bool> = labels.column(i).iter().map(|&v| v == 1.0).collect();
        // The sigmoid is monotone, so ranking on logits gives the same AP
        // without saturation ties.
        let scores = logits.index_axis(Axis(1), i).to_vec();
        match average_precision(&scores, &is_pos) {
            Ok(ap) => {
                per_class_ap.push(Some(ap));
                let pos = is_pos.iter().filter(|&&b| b).count();
                let hits = probs
                    .column(i)
                    .iter()
                    .zip(&is_pos)
                    .filter(|(&p, &b)| b && p >= threshold)
                    .count();
                per_class_recall.push(Some(hits as f64 / pos as f64));
            }
            Err(Error::UndefinedAp(_)) => {
                log::warn!("class {i} has no positives in the test set; excluded from mAP");
                excluded.push(i);
                per_class_ap.push(None);
                per_class_recall.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let all: Vec<usize> = (0..c).collect();
    let f = groups.classes_in(Group::Frequent);
    let cm = groups.classes_in(Group::Common);
    let r = groups.classes_in(Group::Rare);
    let grouped = GroupedMetrics {
        mR_f: mean_of(&per_class_recall, &f),
        AP_f: mean_of(&per_class_ap, &f),
        mR_c: mean_of(&per_class_recall, &cm),
        AP_c: mean_of(&per_class_ap, &cm),
        mR_r: mean_of(&per_class_recall, &r),
        AP_r: mean_of(&per_class_ap, &r),
    };
    Ok(EvalReport {
        map: mean_of(&per_class_ap, &all),
        per_class_ap,
        per_class_recall,
        grouped,
        excluded_classes: excluded,
        recall_threshold: threshold,
        ap_basis: "classification scores (no box matching)".into(),
    })
}
