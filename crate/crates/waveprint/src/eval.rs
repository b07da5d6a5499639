//! Evaluation: confusion matrices, precision/recall/F1 with macro
//! averaging, exact t-SNE for fingerprint visualization, and report
//! emission (JSON metrics, CSV confusion, SVG scatter, text summary).
//!
//! Conventions: metrics with a zero denominator are defined as 0 and
//! flagged in the report rather than dropped; macro averages are
//! unweighted means over classes. t-SNE is the exact O(N²) algorithm
//! with perplexity-matched conditional distributions, early
//! exaggeration, and momentum descent, deterministic in its seed.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::util;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {0:?} not in class list")]
    UnknownLabel(String),
    #[error("length mismatch: {true_len} true labels vs {pred_len} predictions")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("bad evaluation configuration: {0}")]
    BadConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(
        y_true: &[String],
        y_pred: &[String],
        classes: &[String],
    ) -> Result<Self, EvalError> {
        if y_true.len() != y_pred.len() {
            return Err(EvalError::LengthMismatch { true_len: y_true.len(), pred_len: y_pred.len() });
        }
        let index = |label: &String| {
            classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| EvalError::UnknownLabel(label.clone()))
        };
        let c = classes.len();
        let mut counts = vec![0u64; c * c];
        for (t, p) in y_true.iter().zip(y_pred) {
            counts[index(t)? * c + index(p)?] += 1;
        }
        Ok(Self { classes: classes.to_vec(), counts })
    }

    pub fn from_indices(y_true: &[usize], y_pred: &[usize], classes: &[String]) -> Result<Self, EvalError> {
        if y_true.len() != y_pred.len() {
            return Err(EvalError::LengthMismatch { true_len: y_true.len(), pred_len: y_pred.len() });
        }
        let c = classes.len();
        let mut counts = vec![0u64; c * c];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= c {
                return Err(EvalError::UnknownLabel(format!("index {t}")));
            }
            if p >= c {
                return Err(EvalError::UnknownLabel(format!("index {p}")));
            }
            counts[t * c + p] += 1;
        }
        Ok(Self { classes: classes.to_vec(), counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, true_idx: usize, pred_idx: usize) -> u64 {
        self.counts[true_idx * self.classes.len() + pred_idx]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: number of items whose true class is `idx`.
    pub fn support(&self, idx: usize) -> u64 {
        let c = self.classes.len();
        self.counts[idx * c..(idx + 1) * c].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class and macro-averaged metrics, plus flags describing any
/// zero-denominator conventions that fired.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: MacroMetrics,
    pub flags: Vec<String>,
}

/// Computes precision, recall, and F1 per class and macro-averaged.
/// Zero-denominator cases are defined as 0 and flagged.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let c = cm.classes().len();
    if cm.total() == 0 {
        return Err(EvalError::BadConfig("empty confusion matrix".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut flags = Vec::new();
    for i in 0..c {
        let tp = cm.count(i, i) as f64;
        let fp: f64 = (0..c).filter(|&j| j != i).map(|j| cm.count(j, i) as f64).sum();
        let fn_: f64 = (0..c).filter(|&j| j != i).map(|j| cm.count(i, j) as f64).sum();
        let precision = if tp + fp > 0.0 {
            tp / (tp + fp)
        } else {
            flags.push(format!("class {}: precision undefined (no predictions), defined as 0", cm.classes()[i]));
            0.0
        };
        let recall = if tp + fn_ > 0.0 {
            tp / (tp + fn_)
        } else {
            flags.push(format!("class {}: recall undefined (no true items), defined as 0", cm.classes()[i]));
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flags.push(format!("class {}: F1 undefined (precision and recall both 0), defined as 0", cm.classes()[i]));
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1, support: cm.support(i) });
    }
    let macro_avg = MacroMetrics {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64,
    };
    Ok(MetricsReport { classes: cm.classes().to_vec(), per_class, macro_avg, flags })
}

impl MetricsReport {
    /// Ordered JSON value: {classes, per_class (object in class order),
    /// macro, flags}.
    pub fn to_json(&self) -> Value {
        let mut per_class = Map::new();
        for (name, m) in self.classes.iter().zip(&self.per_class) {
            per_class.insert(
                name.clone(),
                json!({
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }),
            );
        }
        json!({
            "classes": self.classes,
            "per_class": per_class,
            "macro": {
                "precision": self.macro_avg.precision,
                "recall": self.macro_avg.recall,
                "f1": self.macro_avg.f1,
            },
            "flags": self.flags,
        })
    }
}

/// 2-d projection of a set of embeddings.
#[derive(Debug, Clone)]
pub struct Embedding2D {
    pub coords: Vec<(f64, f64)>,
    pub final_kl: f64,
    /// KL divergence per iteration (against the unexaggerated P).
    pub kl_history: Vec<f64>,
}

/// Exact t-SNE.
///
/// Per-point bandwidths are binary-searched (50 iterations) so each
/// conditional distribution's entropy equals ln(perplexity). The joint P
/// is symmetrized and floored at 1e-12. Optimization: early exaggeration
/// x12 for the first 250 iterations, momentum 0.5 switching to 0.8 at
/// iteration 250, learning rate 200, per-coordinate gains, and
/// recentering each step. After the exaggeration phase each step is
/// accepted only if it does not raise the objective; a rising step has
/// its velocity halved and is retried, so the recorded KL trace is
/// monotone once exaggeration ends.
pub fn tsne(x: &[Vec<f64>], perplexity: f64, iters: usize, seed: u64) -> Result<Embedding2D, EvalError> {
    let n = x.len();
    if n > 5000 {
        return Err(EvalError::BadConfig(format!("N={n} exceeds the 5000-point exact-t-SNE limit")));
    }
    if perplexity < 2.0 {
        return Err(EvalError::BadConfig(format!("perplexity {perplexity} too small")));
    }
    if (n as f64) < 3.0 * perplexity {
        return Err(EvalError::BadConfig(format!(
            "N={n} too small for perplexity {perplexity} (need N >= 3*perplexity)"
        )));
    }
    if iters == 0 {
        return Err(EvalError::BadConfig("iters must be positive".into()));
    }

    // Pairwise squared distances in the input space.
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }

    // Conditional distributions matched to the target entropy.
    let target_h = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let (mut beta, mut beta_lo, mut beta_hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let mut probs = vec![0.0f64; n];
        for _ in 0..50 {
            let mut sum = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-beta * row[j]).exp() };
                sum += probs[j];
            }
            let mut h = 0.0;
            if sum > 0.0 {
                for pj in probs.iter_mut() {
                    *pj /= sum;
                    if *pj > 1e-300 {
                        h -= *pj * pj.ln();
                    }
                }
            }
            if (h - target_h).abs() < 1e-7 {
                break;
            }
            if h > target_h {
                beta_lo = beta;
                beta = if beta_hi.is_finite() { (beta + beta_hi) / 2.0 } else { beta * 2.0 };
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&probs);
    }

    // Symmetrize and floor.
    let mut pj = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        pj[i * n + i] = 1e-12;
    }

    let mut rng = util::rng_for(seed, "tsne-init");
    let mut y: Vec<(f64, f64)> = (0..n)
        .map(|_| (1e-4 * util::normal(&mut rng), 1e-4 * util::normal(&mut rng)))
        .collect();
    let mut vel = vec![(0.0f64, 0.0f64); n];
    let mut gains = vec![(1.0f64, 1.0f64); n];

    let exaggeration_end = 250.min(iters);
    let momentum_switch = 250.min(iters);
    let lr = 200.0;
    let mut kl_history = Vec::with_capacity(iters);
    let mut q = vec![0.0f64; n * n];

    // KL(P || Q) for a candidate layout, against the unexaggerated P.
    let kl_of = |y: &[(f64, f64)]| -> f64 {
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                qsum += 2.0 / (1.0 + dx * dx + dy * dy);
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let qij = (1.0 / ((1.0 + dx * dx + dy * dy) * qsum)).max(1e-12);
                let pij = pj[i * n + j];
                kl += pij * (pij / qij).ln();
            }
        }
        kl / 2.0 // each pair visited twice
    };

    let mut last_kl = f64::INFINITY;
    for it in 0..iters {
        let exag = if it < exaggeration_end { 12.0 } else { 1.0 };
        // Student-t affinities for the gradient.
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
            q[i * n + i] = 0.0;
        }

        let momentum = if it < momentum_switch { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let qij = (w / qsum).max(1e-12);
                let coef = 4.0 * (exag * pj[i * n + j] - qij) * w;
                gx += coef * (y[i].0 - y[j].0);
                gy += coef * (y[i].1 - y[j].1);
            }
            // Gains grow when gradient and velocity disagree in sign.
            let (ref mut gainx, ref mut gainy) = gains[i];
            *gainx = if gx * vel[i].0 < 0.0 { *gainx + 0.2 } else { (*gainx * 0.8).max(0.01) };
            *gainy = if gy * vel[i].1 < 0.0 { *gainy + 0.2 } else { (*gainy * 0.8).max(0.01) };
            vel[i].0 = momentum * vel[i].0 - lr * *gainx * gx;
            vel[i].1 = momentum * vel[i].1 - lr * *gainy * gy;
        }

        // Apply the step; after exaggeration, halve the velocity until the
        // objective stops rising.
        let prev = y.clone();
        let mut kl = loop {
            for ((yi, p), v) in y.iter_mut().zip(&prev).zip(&vel) {
                yi.0 = p.0 + v.0;
                yi.1 = p.1 + v.1;
            }
            let kl = kl_of(&y);
            if it < exaggeration_end || kl <= last_kl {
                break kl;
            }
            let shrunk = vel.iter().all(|v| v.0.abs() < 1e-12 && v.1.abs() < 1e-12);
            if shrunk {
                y.copy_from_slice(&prev);
                break last_kl;
            }
            for v in &mut vel {
                v.0 *= 0.5;
                v.1 *= 0.5;
            }
        };
        if !kl.is_finite() {
            kl = f64::INFINITY;
        }
        last_kl = kl;
        kl_history.push(kl);

        let mut mean = (0.0, 0.0);
        for yi in &y {
            mean.0 += yi.0;
            mean.1 += yi.1;
        }
        mean.0 /= n as f64;
        mean.1 /= n as f64;
        for yi in &mut y {
            yi.0 -= mean.0;
            yi.1 -= mean.1;
        }
    }

    let final_kl = *kl_history.last().unwrap();
    if y.iter().any(|&(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(EvalError::BadConfig("t-SNE diverged to non-finite coordinates".into()));
    }
    Ok(Embedding2D { coords: y, final_kl, kl_history })
}

/// Mean silhouette score of a labeled 2-d embedding: for each point,
/// (b − a)/max(a, b) with a = mean intra-cluster distance and b = the
/// smallest mean distance to another cluster.
pub fn silhouette(coords: &[(f64, f64)], labels: &[usize]) -> f64 {
    let n = coords.len();
    assert_eq!(n, labels.len());
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut score = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        let mut sums = vec![0.0f64; n_classes];
        let mut counts = vec![0usize; n_classes];
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            sums[labels[j]] += (dx * dx + dy * dy).sqrt();
            counts[labels[j]] += 1;
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue; // singleton cluster: silhouette undefined, skipped
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_classes)
            .filter(|&k| k != own && counts[k] > 0)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            score += (b - a) / a.max(b);
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        score / counted as f64
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Renders an 800x800 SVG scatter of a labeled embedding with one
/// legend entry per class.
pub fn scatter_svg(emb: &Embedding2D, labels: &[String], title: &str) -> String {
    assert_eq!(emb.coords.len(), labels.len());
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();

    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &emb.coords {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let map_x = |x: f64| 50.0 + 700.0 * (x - min_x) / span_x;
    let map_y = |y: f64| 770.0 - 700.0 * (y - min_y) / span_y;

    let mut svg = String::new();
    svg.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n");
    svg.push_str("<rect width=\"800\" height=\"800\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">{title}</text>\n"
    ));
    for (&(x, y), label) in emb.coords.iter().zip(labels) {
        let idx = classes.iter().position(|c| c == label).unwrap();
        let color = PALETTE[idx % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.75\"/>\n",
            map_x(x),
            map_y(y)
        ));
    }
    for (idx, class) in classes.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let ly = 50.0 + 22.0 * idx as f64;
        svg.push_str(&format!(
            "<g class=\"legend-entry\"><circle cx=\"700\" cy=\"{ly:.1}\" r=\"5\" fill=\"{color}\"/><text x=\"712\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"14\">{class}</text></g>\n",
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes a confusion matrix as CSV with class names on both axes.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred");
    for c in cm.classes() {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, c) in cm.classes().iter().enumerate() {
        out.push_str(c);
        for j in 0..cm.classes().len() {
            out.push(',');
            out.push_str(&cm.count(i, j).to_string());
        }
        out.push('\n');
    }
    out
}

/// One row of a summary table: experiment id plus macro percentages.
pub fn summary_row(id: &str, m: &MetricsReport) -> String {
    format!(
        "{:<6} {:>9.2} {:>9.2} {:>9.2}",
        id,
        100.0 * m.macro_avg.precision,
        100.0 * m.macro_avg.recall,
        100.0 * m.macro_avg.f1
    )
}

pub const SUMMARY_HEADER: &str = "exp    precision    recall        f1";

/// Writes the standard per-run artifact set: metrics.json,
/// confusion.csv, optional tsne.svg, and a one-row summary.txt.
pub fn emit_report(
    run_id: &str,
    report: &MetricsReport,
    cm: &ConfusionMatrix,
    tsne_plot: Option<(&Embedding2D, &[String])>,
    out_dir: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let json = serde_json::to_string_pretty(&report.to_json())?;
    let mut f = fs::File::create(out_dir.join("metrics.json"))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;

    fs::write(out_dir.join("confusion.csv"), confusion_csv(cm))?;

    if let Some((emb, labels)) = tsne_plot {
        fs::write(out_dir.join("tsne.svg"), scatter_svg(emb, labels, run_id))?;
    }

    let summary = format!("{SUMMARY_HEADER}\n{}\n", summary_row(run_id, report));
    fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn confusion_hand_example() {
        let cls = classes(&["A", "B"]);
        let y_true = classes(&["A", "A", "B", "B"]);
        let y_pred = classes(&["A", "B", "B", "B"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn confusion_rejects_unknown_label() {
        let cls = classes(&["A", "B"]);
        let err = ConfusionMatrix::from_labels(&classes(&["C"]), &classes(&["A"]), &cls);
        assert!(matches!(err, Err(EvalError::UnknownLabel(_))));
    }

    #[test]
    fn perfect_predictions_are_diagonal_and_score_one() {
        let cls = classes(&["A", "B", "C"]);
        let y = classes(&["A", "B", "C", "B", "A"]);
        let cm = ConfusionMatrix::from_labels(&y, &y, &cls).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.count(i, j), 0);
                }
            }
        }
        let m = metrics(&cm).unwrap();
        for c in &m.per_class {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
        }
        assert_eq!(m.macro_avg.f1, 1.0);
    }

    #[test]
    fn metrics_hand_example_exact() {
        // cm [[1,1],[0,2]]: A precision 1, recall 1/2, F1 2/3;
        // B precision 2/3, recall 1, F1 4/5; macro-F1 = 11/15.
        let cls = classes(&["A", "B"]);
        let y_true = classes(&["A", "A", "B", "B"]);
        let y_pred = classes(&["A", "B", "B", "B"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.per_class[0].precision - 1.0).abs() < 1e-12);
        assert!((m.per_class[0].recall - 0.5).abs() < 1e-12);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[1].recall - 1.0).abs() < 1e-12);
        assert!((m.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((m.macro_avg.f1 - 11.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn all_one_column_flags_zero_denominators() {
        let cls = classes(&["A", "B"]);
        let y_true = classes(&["A", "B", "B"]);
        let y_pred = classes(&["A", "A", "A"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        assert_eq!(cm.count(0, 0) + cm.count(1, 0), 3);
        let m = metrics(&cm).unwrap();
        // Class B never predicted: precision 0-by-convention, flagged.
        assert_eq!(m.per_class[1].precision, 0.0);
        assert!(!m.flags.is_empty());
    }

    #[test]
    fn macro_f1_invariant_under_relabeling() {
        let cls = classes(&["A", "B", "C"]);
        let y_true = classes(&["A", "B", "C", "A", "B", "C", "A"]);
        let y_pred = classes(&["A", "C", "C", "B", "B", "A", "A"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        let m1 = metrics(&cm).unwrap();

        // Swap labels A<->C everywhere.
        let swap = |v: &[String]| -> Vec<String> {
            v.iter()
                .map(|s| match s.as_str() {
                    "A" => "C".to_string(),
                    "C" => "A".to_string(),
                    other => other.to_string(),
                })
                .collect()
        };
        let cm2 = ConfusionMatrix::from_labels(&swap(&y_true), &swap(&y_pred), &cls).unwrap();
        let m2 = metrics(&cm2).unwrap();
        assert!((m1.macro_avg.f1 - m2.macro_avg.f1).abs() < 1e-12);
        assert!((m1.macro_avg.precision - m2.macro_avg.precision).abs() < 1e-12);
    }

    #[test]
    fn random_uniform_predictions_score_near_quarter() {
        // Monte Carlo oracle: 4 balanced classes, uniform predictions.
        let cls = classes(&["A", "B", "C", "D"]);
        let n = 10_000usize;
        let mut rng = util::rng_for(314, "mc-metrics");
        let mut y_true = Vec::with_capacity(n);
        let mut y_pred = Vec::with_capacity(n);
        for i in 0..n {
            y_true.push(cls[i % 4].clone());
            y_pred.push(cls[util::below(&mut rng, 4)].clone());
        }
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.macro_avg.f1 - 0.25).abs() < 0.05, "macro-F1 {}", m.macro_avg.f1);
    }

    #[test]
    fn csv_row_sums_match_support() {
        let cls = classes(&["A", "B"]);
        let y_true = classes(&["A", "A", "B", "B", "B"]);
        let y_pred = classes(&["A", "B", "B", "A", "B"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        let csv = confusion_csv(&cm);
        let m = metrics(&cm).unwrap();
        for (i, line) in csv.lines().skip(1).enumerate() {
            let sum: u64 = line.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum();
            assert_eq!(sum, m.per_class[i].support);
        }
    }

    #[test]
    fn svg_has_one_legend_entry_per_class() {
        let emb = Embedding2D {
            coords: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.5), (3.0, 2.0)],
            final_kl: 0.1,
            kl_history: vec![0.1],
        };
        let labels = classes(&["P", "H", "M", "S"]);
        let svg = scatter_svg(&emb, &labels, "test");
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 4);
    }

    #[test]
    fn silhouette_separates_obvious_clusters() {
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        let mut rng = util::rng_for(21, "sil");
        for c in 0..3usize {
            let (cx, cy) = (10.0 * c as f64, -5.0 * c as f64);
            for _ in 0..20 {
                coords.push((cx + 0.1 * util::normal(&mut rng), cy + 0.1 * util::normal(&mut rng)));
                labels.push(c);
            }
        }
        assert!(silhouette(&coords, &labels) > 0.9);
    }

    #[test]
    fn metrics_json_round_trips() {
        let cls = classes(&["A", "B"]);
        let y_true = classes(&["A", "A", "B", "B"]);
        let y_pred = classes(&["A", "B", "B", "B"]);
        let cm = ConfusionMatrix::from_labels(&y_true, &y_pred, &cls).unwrap();
        let m = metrics(&cm).unwrap();
        let v = m.to_json();
        let text = serde_json::to_string_pretty(&v).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v, back);
        assert_eq!(back["per_class"]["A"]["support"], json!(2));
        // Serialization must round-trip the stored f64 bit-exactly.
        assert_eq!(back["macro"]["f1"].as_f64().unwrap(), m.macro_avg.f1);
        assert!((m.macro_avg.f1 - 11.0 / 15.0).abs() < 1e-12);
    }
}
