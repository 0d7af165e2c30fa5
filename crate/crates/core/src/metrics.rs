//! Classification metrics: confusion matrix, one-vs-rest rates with macro
//! averages, a normal-approximation confidence interval, ROC and PR curves
//! with trapezoidal areas, and a PCA projection of penultimate features.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Adds the counts of `other`, which must have the same class count.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Metrics(format!(
                "cannot merge a {0}×{0} matrix into a {1}×{1} one",
                other.num_classes(),
                self.num_classes()
            )));
        }
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
        Ok(())
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Metrics(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Metrics(format!(
                "sample {i}: label pair ({t}, {p}) outside 0..{k}"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: default_names(k),
    })
}

/// One-vs-rest counts and rates for a single class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `(TP + TN) / (TP + TN + FP + FN)`
    pub accuracy: f64,
    /// `TP / (TP + FN)`
    pub sensitivity: f64,
    /// `TP / (TP + FP)`
    pub precision: f64,
    /// `TN / (TN + FP)`
    pub specificity: f64,
    pub f1: f64,
    /// Names of rates whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasicMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Fraction of samples on the diagonal.
    pub overall_accuracy: f64,
    pub macro_accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_precision: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<BasicMetrics> {
    let k = cm.num_classes();
    let n = cm.total();
    if k == 0 || n == 0 {
        return Err(Error::Metrics("metrics need a non-empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
            let fp = (0..k).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
            let tn = n - tp - fn_ - fp;
            let mut flags = Vec::new();
            let accuracy = ratio(tp + tn, n, "accuracy", &mut flags);
            let sensitivity = ratio(tp, tp + fn_, "sensitivity", &mut flags);
            let precision = ratio(tp, tp + fp, "precision", &mut flags);
            let specificity = ratio(tn, tn + fp, "specificity", &mut flags);
            let f1 = if precision + sensitivity > 0.0 {
                2.0 * precision * sensitivity / (precision + sensitivity)
            } else {
                flags.push("f1".to_string());
                0.0
            };
            ClassMetrics {
                name: cm.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                tp,
                tn,
                fp,
                fn_,
                accuracy,
                sensitivity,
                precision,
                specificity,
                f1,
                degenerate: flags,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(BasicMetrics {
        overall_accuracy: cm.correct() as f64 / n as f64,
        macro_accuracy: mean(|m| m.accuracy),
        macro_sensitivity: mean(|m| m.sensitivity),
        macro_precision: mean(|m| m.precision),
        macro_specificity: mean(|m| m.specificity),
        macro_f1: mean(|m| m.f1),
        per_class,
    })
}

/// Half-width `1.96 · sqrt(e (1 − e) / n)` of the 95% interval around an
/// error rate measured on `n` samples.
pub fn confidence_interval(error_rate: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Metrics("confidence interval needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(Error::Metrics(format!("error rate {error_rate} outside [0, 1]")));
    }
    Ok(1.96 * (error_rate * (1.0 - error_rate) / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// One-vs-rest curve for a class; `auc` is absent when the class is missing
/// from, or the only class in, the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub class: usize,
    pub points: Vec<CurvePoint>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveSet {
    pub roc: Vec<Curve>,
    pub pr: Vec<Curve>,
    pub macro_roc_auc: Option<f64>,
    pub macro_pr_auc: Option<f64>,
}

fn trapezoid(points: &[CurvePoint]) -> f64 {
    points.windows(2).map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0).sum()
}

/// ROC and PR curves for one binary split. `positive[i]` marks samples of
/// the class, `score[i]` is its predicted probability.
pub fn binary_curves(positive: &[bool], score: &[f64]) -> (Vec<CurvePoint>, Vec<CurvePoint>, bool) {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut roc = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let mut pr = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = score[order[i]];
        while i < order.len() && score[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        roc.push(CurvePoint {
            threshold: t,
            x: rate(fp, neg),
            y: rate(tp, pos),
        });
        pr.push(CurvePoint {
            threshold: t,
            x: rate(tp, pos),
            y: rate(tp, tp + fp),
        });
    }
    (roc, pr, pos > 0 && neg > 0)
}

/// Per-class one-vs-rest curves over row-major `[n, k]` scores.
pub fn curves_auc(truth: &[usize], scores: &[f64], k: usize) -> Result<CurveSet> {
    if k == 0 || scores.len() != truth.len() * k {
        return Err(Error::Metrics(format!(
            "{} scores do not form {} rows of {k} classes",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= k) {
        return Err(Error::Metrics(format!("label {bad} outside 0..{k}")));
    }
    let mut roc = Vec::with_capacity(k);
    let mut pr = Vec::with_capacity(k);
    for c in 0..k {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let score: Vec<f64> = (0..truth.len()).map(|i| scores[i * k + c]).collect();
        let (r, p, defined) = binary_curves(&positive, &score);
        roc.push(Curve {
            class: c,
            auc: defined.then(|| trapezoid(&r)),
            points: r,
        });
        pr.push(Curve {
            class: c,
            auc: defined.then(|| trapezoid(&p)),
            points: p,
        });
    }
    let macro_of = |curves: &[Curve]| {
        let defined: Vec<f64> = curves.iter().filter_map(|c| c.auc).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(CurveSet {
        macro_roc_auc: macro_of(&roc),
        macro_pr_auc: macro_of(&pr),
        roc,
        pr,
    })
}

/// Everything `eval` reports for one labelled set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: BasicMetrics,
    pub error_rate: f64,
    pub ci_half_width: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub per_class_roc_auc: Vec<Option<f64>>,
    pub per_class_pr_auc: Vec<Option<f64>>,
    #[serde(skip)]
    pub curves: CurveSet,
}

/// Index of the largest score in each row; ties go to the lower index.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn evaluate(truth: &[usize], scores: &[f64], class_names: &[String]) -> Result<MetricsReport> {
    let k = class_names.len();
    let predicted = argmax_rows(scores, k);
    let mut confusion = confusion_matrix(truth, &predicted, k)?;
    confusion.class_names = class_names.to_vec();
    let metrics = basic_metrics(&confusion)?;
    let error_rate = 1.0 - metrics.overall_accuracy;
    let curves = curves_auc(truth, scores, k)?;
    Ok(MetricsReport {
        samples: truth.len(),
        ci_half_width: confidence_interval(error_rate.clamp(0.0, 1.0), truth.len())?,
        error_rate,
        roc_auc: curves.macro_roc_auc,
        pr_auc: curves.macro_pr_auc,
        per_class_roc_auc: curves.roc.iter().map(|c| c.auc).collect(),
        per_class_pr_auc: curves.pr.iter().map(|c| c.auc).collect(),
        confusion,
        metrics,
        curves,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `kind,class,threshold,x,y` rows for both curve families.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("kind,class,threshold,x,y\n");
        for (kind, curves) in [("roc", &self.curves.roc), ("pr", &self.curves.pr)] {
            for c in curves {
                for p in &c.points {
                    let _ = writeln!(s, "{kind},{},{},{},{}", c.class, p.threshold, p.x, p.y);
                }
            }
        }
        s
    }
}

/// Two-dimensional PCA coordinates of a feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pc1,pc2,label\n");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let _ = writeln!(s, "{},{},{l}", c[0], c[1]);
        }
        s
    }
}

/// Projects row-major `[n, d]` features onto their top two principal axes.
///
/// Each axis is signed so its largest-magnitude loading is positive.
pub fn feature_projection(features: &[f64], d: usize, labels: &[usize]) -> Result<Projection> {
    let n = labels.len();
    if n < 3 || d < 2 || features.len() != n * d {
        return Err(Error::Metrics(format!(
            "projection needs at least 3 samples of dimension ≥ 2, got {n} samples and {} values for d = {d}",
            features.len()
        )));
    }
    let x = DMatrix::from_row_slice(n, d, features);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axis = |idx: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[idx]);
        let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * sign).collect()
    };
    let components = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    let frac = |idx: usize| {
        if total > 0.0 {
            eig.eigenvalues[order[idx]].max(0.0) / total
        } else {
            0.0
        }
    };
    Ok(Projection {
        coords,
        labels: labels.to_vec(),
        explained: [frac(0), frac(1)],
        components,
    })
}
