//! One-vs-rest evaluation: confusion matrix, per-class sensitivity and
//! specificity, macro precision/recall, overall accuracy and macro AUC.
//!
//! Rates with a zero denominator are `None` and are left out of macro means;
//! the affected grades are listed alongside each mean. The macro recall is
//! the mean per-class sensitivity.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundus::{DatasetManifest, GradeLabel};
use crate::model::{Grader, NUM_CLASSES};

/// Counts indexed `[true grade][predicted grade]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// One-vs-rest tallies for a single grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_counts(&self, class: GradeLabel) -> ClassCounts {
        let c = class.index();
        let tp = self.counts[c][c];
        let fn_ = self.counts[c].iter().sum::<u64>() - tp;
        let fp = (0..NUM_CLASSES).map(|t| self.counts[t][c]).sum::<u64>() - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fn_ - fp,
        }
    }
}

/// Tallies `(true, predicted)` pairs.
pub fn confusion(pairs: &[(GradeLabel, GradeLabel)]) -> Result<ConfusionMatrix> {
    if pairs.is_empty() {
        return Err(Error::Metrics("confusion matrix of zero samples".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for &(t, p) in pairs {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `TP / (TP + FN)`, or `None` when the grade never occurs.
pub fn sensitivity(cm: &ConfusionMatrix, class: GradeLabel) -> Option<f64> {
    let c = cm.class_counts(class);
    ratio(c.tp, c.tp + c.fn_)
}

/// `TN / (TN + FP)`, or `None` when every sample has this grade.
pub fn specificity(cm: &ConfusionMatrix, class: GradeLabel) -> Option<f64> {
    let c = cm.class_counts(class);
    ratio(c.tn, c.tn + c.fp)
}

/// `TP / (TP + FP)`, or `None` when the grade is never predicted.
pub fn precision(cm: &ConfusionMatrix, class: GradeLabel) -> Option<f64> {
    let c = cm.class_counts(class);
    ratio(c.tp, c.tp + c.fp)
}

/// Overall accuracy `trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.trace(), cm.total()).ok_or_else(|| Error::Metrics("accuracy of an empty matrix".into()))
}

/// Unweighted mean over the grades where the rate is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: Option<f64>,
    pub undefined: Vec<GradeLabel>,
}

fn macro_mean(rate: impl Fn(GradeLabel) -> Option<f64>) -> MacroAverage {
    let mut sum = 0.0;
    let mut n = 0;
    let mut undefined = Vec::new();
    for g in GradeLabel::all() {
        match rate(g) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => undefined.push(g),
        }
    }
    MacroAverage {
        value: (n > 0).then(|| sum / n as f64),
        undefined,
    }
}

/// Macro precision and macro recall (mean sensitivity).
pub fn macro_precision_recall(cm: &ConfusionMatrix) -> (MacroAverage, MacroAverage) {
    (macro_mean(|g| precision(cm, g)), macro_mean(|g| sensitivity(cm, g)))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from mid-ranks. `None` unless both groups
/// are non-empty.
pub fn binary_auc(scores: &[(bool, f64)]) -> Option<f64> {
    let n_pos = scores.iter().filter(|(p, _)| *p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].1.total_cmp(&scores[b].1));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].1 == scores[order[i]].1 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| scores[k].0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over the grades with both positives and negatives.
    pub macro_auc: Option<f64>,
    pub excluded: Vec<GradeLabel>,
}

/// Macro one-vs-rest AUC using each grade's probability as its score.
pub fn auc_ovr(samples: &[(GradeLabel, [f64; NUM_CLASSES])]) -> Result<AucSummary> {
    let mut present = [false; NUM_CLASSES];
    for (t, _) in samples {
        present[t.index()] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Metrics("AUC needs at least two distinct true grades".into()));
    }
    let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
        let scores: Vec<(bool, f64)> = samples.iter().map(|(t, p)| (t.index() == c, p[c])).collect();
        binary_auc(&scores)
    });
    let avg = macro_mean(|g| per_class[g.index()]);
    Ok(AucSummary {
        per_class,
        macro_auc: avg.value,
        excluded: avg.undefined,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: GradeLabel,
    #[serde(flatten)]
    pub counts: ClassCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub auc: Option<f64>,
}

/// Everything [`report`] computes; `None` marks an undefined rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub samples: u64,
    pub averaging: String,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub precision: MacroAverage,
    pub recall: MacroAverage,
    pub auc: MacroAverage,
    pub accuracy: f64,
}

impl MetricReport {
    /// Assembles a report from `(true grade, predicted probabilities)` pairs,
    /// where the predicted grade is the probability argmax.
    pub fn from_predictions(model_id: &str, preds: &[(GradeLabel, GradeLabel, [f64; NUM_CLASSES])]) -> Result<Self> {
        let pairs: Vec<_> = preds.iter().map(|&(t, p, _)| (t, p)).collect();
        let cm = confusion(&pairs)?;
        let scored: Vec<_> = preds.iter().map(|&(t, _, probs)| (t, probs)).collect();
        let auc = match auc_ovr(&scored) {
            Ok(a) => a,
            Err(_) => AucSummary {
                per_class: [None; NUM_CLASSES],
                macro_auc: None,
                excluded: GradeLabel::all().collect(),
            },
        };
        let (precision, recall) = macro_precision_recall(&cm);
        let per_class = GradeLabel::all()
            .map(|g| ClassMetrics {
                grade: g,
                counts: cm.class_counts(g),
                sensitivity: sensitivity(&cm, g),
                specificity: specificity(&cm, g),
                precision: self::precision(&cm, g),
                auc: auc.per_class[g.index()],
            })
            .collect();
        Ok(MetricReport {
            model_id: model_id.to_string(),
            samples: cm.total(),
            averaging: "macro one-vs-rest".into(),
            confusion: cm,
            per_class,
            precision,
            recall,
            auc: MacroAverage {
                value: auc.macro_auc,
                undefined: auc.excluded,
            },
            accuracy: accuracy(&cm)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text rendering: the summary row (Precision, Recall,
    /// AUC, Overall Accuracy), a per-grade breakdown and any undefined-rate
    /// flags. Rates print with 4 decimals, undefined ones as `undefined`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let summary = vec![
            vec!["Model".to_string(), "Precision".into(), "Recall".into(), "AUC".into(), "Overall Accuracy".into()],
            vec![
                self.model_id.clone(),
                rate(self.precision.value),
                rate(self.recall.value),
                rate(self.auc.value),
                rate(Some(self.accuracy)),
            ],
        ];
        out.push_str(&align(&summary));
        out.push('\n');
        let mut detail = vec![["Grade", "TP", "FP", "FN", "TN", "Sensitivity", "Specificity", "Precision", "AUC"]
            .map(String::from)
            .to_vec()];
        for c in &self.per_class {
            detail.push(vec![
                c.grade.value().to_string(),
                c.counts.tp.to_string(),
                c.counts.fp.to_string(),
                c.counts.fn_.to_string(),
                c.counts.tn.to_string(),
                rate(c.sensitivity),
                rate(c.specificity),
                rate(c.precision),
                rate(c.auc),
            ]);
        }
        out.push_str(&align(&detail));
        let _ = writeln!(out, "\nsamples: {}; averaging: {}", self.samples, self.averaging);
        for (name, avg) in [("precision", &self.precision), ("recall", &self.recall), ("AUC", &self.auc)] {
            if !avg.undefined.is_empty() {
                let grades: Vec<String> = avg.undefined.iter().map(|g| g.value().to_string()).collect();
                let _ = writeln!(out, "{name} undefined for grades: {}", grades.join(", "));
            }
        }
        out
    }
}

fn rate(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn align(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(cell, &w)| format!("{cell:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Grades every manifest entry and assembles a [`MetricReport`]. Failures
/// name the offending sample.
pub fn report(grader: &impl Grader, manifest: &DatasetManifest) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let preds: Vec<_> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let wrap = |err: Error| Error::Sample {
                sample: manifest.resolve(e).display().to_string(),
                source: Box::new(err),
            };
            let img = manifest.load_image(e).map_err(wrap)?;
            let p = grader.predict(&img).map_err(wrap)?;
            Ok((e.label, p.grade, p.probabilities))
        })
        .collect::<Result<_>>()?;
    MetricReport::from_predictions(grader.model_id(), &preds)
}
