//! Overall accuracy, arithmetic and harmonic mean-per-type, and evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::tensor::Scalar;

/// Micro-averaged accuracy in percent from `(correct, count)` pairs.
pub fn overall_accuracy(counts: &[(usize, usize)]) -> Result<f64> {
    let correct: usize = counts.iter().map(|c| c.0).sum();
    let total: usize = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Unweighted mean of per-category accuracies.
pub fn arithmetic_mpt(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Harmonic mean of per-category accuracies; 0 when any accuracy is 0.
pub fn harmonic_mpt(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if accuracies.iter().any(|&a| a <= 0.0) {
        return Ok(0.0);
    }
    let inv: f64 = accuracies.iter().map(|a| 1.0 / a).sum();
    Ok(accuracies.len() as f64 / inv)
}

/// Rounds a percentage to 2 decimals, ties to even.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round_ties_even() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub name: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryScore>,
    pub overall: f64,
    pub arithmetic_mpt: f64,
    pub harmonic_mpt: f64,
    /// Level-1 accuracy; `None` for the flat baseline.
    pub category_accuracy: Option<f64>,
    /// Fraction of samples routed to a category whose subset lacks the true answer.
    pub routing_miss_rate: Option<f64>,
    /// Ground-truth answers absent from the model's answer set (scored wrong).
    pub unknown_answers: usize,
}

impl EvalReport {
    /// Builds the aggregates from per-category counts. Categories with no
    /// samples are left out of the mean-per-type metrics.
    pub fn from_counts(
        names: &[String],
        counts: &[(usize, usize)],
        category_accuracy: Option<f64>,
        routing_miss_rate: Option<f64>,
        unknown_answers: usize,
    ) -> Result<Self> {
        let overall = overall_accuracy(counts)?;
        let categories: Vec<CategoryScore> = names
            .iter()
            .zip(counts)
            .map(|(name, &(correct, count))| CategoryScore {
                name: name.clone(),
                count,
                correct,
                accuracy: if count == 0 {
                    0.0
                } else {
                    100.0 * correct as f64 / count as f64
                },
            })
            .collect();
        let present: Vec<f64> = categories
            .iter()
            .filter(|c| c.count > 0)
            .map(|c| c.accuracy)
            .collect();
        Ok(EvalReport {
            overall,
            arithmetic_mpt: arithmetic_mpt(&present)?,
            harmonic_mpt: harmonic_mpt(&present)?,
            categories,
            category_accuracy,
            routing_miss_rate,
            unknown_answers,
        })
    }

    /// Copy with every percentage rounded to 2 decimals.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        r.categories
            .iter_mut()
            .for_each(|c| c.accuracy = round2(c.accuracy));
        r.overall = round2(r.overall);
        r.arithmetic_mpt = round2(r.arithmetic_mpt);
        r.harmonic_mpt = round2(r.harmonic_mpt);
        r.category_accuracy = r.category_accuracy.map(round2);
        r.routing_miss_rate = r.routing_miss_rate.map(round2);
        r
    }

    /// Aligned per-category table with the three aggregate metrics as footer.
    pub fn table(&self) -> String {
        let width = self
            .categories
            .iter()
            .map(|c| c.name.len())
            .chain(["Arithmetic-MPT".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}",
            "category", "count", "accuracy"
        );
        let rule = "-".repeat(width + 20);
        let _ = writeln!(out, "{rule}");
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8.2}",
                c.name,
                c.count,
                round2(c.accuracy)
            );
        }
        let _ = writeln!(out, "{rule}");
        for (name, v) in [
            ("Overall", self.overall),
            ("Arithmetic-MPT", self.arithmetic_mpt),
            ("Harmonic-MPT", self.harmonic_mpt),
        ] {
            let _ = writeln!(out, "{name:<width$}  {:>8}  {:>8.2}", "", round2(v));
        }
        out
    }
}

/// Side-by-side comparison of the flat baseline and the hierarchical model.
pub fn ablation_table(baseline: &EvalReport, hierarchical: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16}  {:>9}  {:>9}", "metric", "Baseline", "CQ-VQA");
    let _ = writeln!(out, "{}", "-".repeat(38));
    for (name, b, h) in [
        ("Overall", baseline.overall, hierarchical.overall),
        (
            "Arithmetic-MPT",
            baseline.arithmetic_mpt,
            hierarchical.arithmetic_mpt,
        ),
        (
            "Harmonic-MPT",
            baseline.harmonic_mpt,
            hierarchical.harmonic_mpt,
        ),
    ] {
        let _ = writeln!(out, "{name:<16}  {:>9.2}  {:>9.2}", round2(b), round2(h));
    }
    out
}

/// Scores a model on labelled samples with predicted routing.
///
/// `category_names` are the evaluation set's categories; sample category ids
/// index into them. A sample is correct when the predicted answer string
/// equals the ground truth.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    emb: &EmbeddingTable<T>,
    category_names: &[String],
    samples: &[Sample<T>],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n_c = category_names.len();
    let mut counts = vec![(0usize, 0usize); n_c];
    let (mut category_hits, mut misses, mut unknown) = (0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample<T>> = chunk.iter().collect();
        let predictions = model.predict_batch(emb, &batch)?;
        for (s, p) in chunk.iter().zip(predictions) {
            if s.category >= n_c {
                return Err(Error::InvalidCategory {
                    index: s.category,
                    n_c,
                });
            }
            let entry = &mut counts[s.category];
            entry.1 += 1;
            if model.space.answer(p.answer) == s.answer {
                entry.0 += 1;
            }
            let truth = model.space.answer_id(&s.answer);
            if truth.is_none() {
                unknown += 1;
            }
            if let Some(r) = p.category {
                category_hits += usize::from(r == s.category);
                if truth.and_then(|a| model.space.local_index(r, a)).is_none() {
                    misses += 1;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let hierarchical = model.kind() == ModelKind::Hierarchical;
    EvalReport::from_counts(
        category_names,
        &counts,
        hierarchical.then(|| 100.0 * category_hits as f64 / n),
        hierarchical.then(|| misses as f64 / n),
        unknown,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_2: [f64; 12] = [
        94.05, 95.39, 73.35, 59.24, 61.19, 40.40, 88.13, 100.0, 34.50, 95.41, 56.78, 66.56,
    ];

    #[test]
    fn overall_cases() {
        assert_eq!(overall_accuracy(&[(10, 10), (5, 5)]).unwrap(), 100.0);
        assert_eq!(overall_accuracy(&[(90, 100), (10, 100)]).unwrap(), 50.0);
        assert!(matches!(overall_accuracy(&[]), Err(Error::EmptyEvaluation)));
        assert!(overall_accuracy(&[(0, 0)]).is_err());
    }

    #[test]
    fn mean_per_type_cases() {
        assert_eq!(arithmetic_mpt(&[100.0, 0.0]).unwrap(), 50.0);
        assert_eq!(arithmetic_mpt(&[37.5]).unwrap(), 37.5);
        assert_eq!(harmonic_mpt(&[50.0, 50.0]).unwrap(), 50.0);
        assert_eq!(harmonic_mpt(&[100.0, 0.0]).unwrap(), 0.0);
        assert!(arithmetic_mpt(&[]).is_err());
        assert!(harmonic_mpt(&[]).is_err());
    }

    #[test]
    fn published_category_accuracies() {
        assert!((arithmetic_mpt(&TABLE_2).unwrap() - 72.08).abs() <= 0.01);
        assert!((harmonic_mpt(&TABLE_2).unwrap() - 64.45).abs() <= 0.01);
    }

    #[test]
    fn round_half_even() {
        assert_eq!(round2(72.083333), 72.08);
        assert_eq!(round2(64.455823), 64.46);
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.375), 0.38);
    }

    #[test]
    fn aggregates_recompute_from_table() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r =
            EvalReport::from_counts(&names, &[(3, 7), (11, 13), (2, 2)], None, None, 0).unwrap();
        let counts: Vec<(usize, usize)> =
            r.categories.iter().map(|c| (c.correct, c.count)).collect();
        let again = EvalReport::from_counts(&names, &counts, None, None, 0).unwrap();
        assert_eq!(again, r);
        assert_eq!(again.rounded(), r.rounded());
    }

    #[test]
    fn table_layout() {
        let names: Vec<String> = ["scene", "absurd"].iter().map(|s| s.to_string()).collect();
        let r = EvalReport::from_counts(&names, &[(1, 2), (4, 4)], None, None, 0).unwrap();
        let t = r.table();
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["category", "count", "accuracy"]);
        let footer: Vec<&str> = t
            .lines()
            .rev()
            .take(3)
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(footer, ["Harmonic-MPT", "Arithmetic-MPT", "Overall"]);
        assert!(t.contains("83.33"));
    }
}
