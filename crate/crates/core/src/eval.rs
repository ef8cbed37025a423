//! Evaluation: confusion matrix, macro-averaged metrics, intra-class
//! compactness, and the per-epoch similarity series behind the analysis
//! exports.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidShape {
                op: "confusion",
                detail: alloc::format!("{} counts for {classes} classes", counts.len()),
            });
        }
        Ok(Self { counts, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|t| (0..self.classes).map(|p| self.at(t, p)).sum()).collect()
    }
}

/// Tally predictions against labels (0-based class indices).
pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidShape {
            op: "confusion",
            detail: alloc::format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        });
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= classes {
            return Err(Error::ClassOutOfRange { got: p, classes });
        }
        if t >= classes {
            return Err(Error::ClassOutOfRange { got: t, classes });
        }
        counts[t * classes + p] += 1;
    }
    ConfusionMatrix::from_counts(classes, counts)
}

/// Macro-averaged metrics, all in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub top1_acc: f64,
    pub macro_specificity: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_f2: f64,
}

impl MetricReport {
    pub fn as_rows(&self) -> [(&'static str, f64); 6] {
        [
            ("top1_acc", self.top1_acc),
            ("macro_specificity", self.macro_specificity),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("macro_f2", self.macro_f2),
        ]
    }
}

/// Round a percentage to two decimals, half away from zero.
pub fn round2(v: f64) -> f64 {
    libm::round(v * 100.0) / 100.0
}

fn ratio(num: f64, den: f64) -> f64 {
    // 0/0 counts as zero: undefined per-class metrics are scored
    // pessimistically but still enter the macro mean
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest macro metrics over a confusion matrix.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from("empty confusion matrix")));
    }
    let c = cm.classes();
    let mut sums = [0.0f64; 5]; // specificity, precision, recall, f1, f2
    let mut trace = 0u64;
    for k in 0..c {
        let tp = cm.at(k, k);
        trace += tp;
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.at(k, p)).sum();
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.at(t, k)).sum();
        let tn = total - tp - fn_ - fp;
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let specificity = ratio(tn as f64, (tn + fp) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let f2 = ratio(5.0 * precision * recall, 4.0 * precision + recall);
        sums[0] += specificity;
        sums[1] += precision;
        sums[2] += recall;
        sums[3] += f1;
        sums[4] += f2;
    }
    let m = c as f64;
    Ok(MetricReport {
        top1_acc: trace as f64 / total as f64 * 100.0,
        macro_specificity: sums[0] / m * 100.0,
        macro_precision: sums[1] / m * 100.0,
        macro_recall: sums[2] / m * 100.0,
        macro_f1: sums[3] / m * 100.0,
        macro_f2: sums[4] / m * 100.0,
    })
}

/// Per-class cosine similarities of samples to their class centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCompactness {
    pub similarities: Vec<f64>,
    /// Linear-interpolation quartiles (q1, median, q3); zeros if empty.
    pub quartiles: [f64; 3],
    /// Samples dropped for zero norm (or all, if the centroid degenerates).
    pub excluded: usize,
    /// True when the class centroid had zero norm.
    pub degenerate_centroid: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompactnessStats {
    pub per_class: Vec<ClassCompactness>,
}

fn quartiles(sorted: &[f64]) -> [f64; 3] {
    if sorted.is_empty() {
        return [0.0; 3];
    }
    let pick = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    [pick(0.25), pick(0.5), pick(0.75)]
}

/// Cosine similarity of every sample to its class's arithmetic-mean
/// centroid. Zero-norm embeddings are excluded and counted; a zero-norm
/// centroid marks the whole class degenerate.
pub fn class_compactness(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<CompactnessStats> {
    if embeddings.ndim() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "class_compactness",
            detail: alloc::format!("embeddings {:?} vs {} labels", embeddings.shape(), labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::ClassOutOfRange { got: bad, classes });
    }
    let d = embeddings.shape()[1];
    let mut centroids = Tensor::zeros(&[classes, d]);
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (k, v) in embeddings.row(i).iter().enumerate() {
            centroids.data_mut()[y * d + k] += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for y in 0..classes {
        let n = counts[y] as f64;
        for k in 0..d {
            centroids.data_mut()[y * d + k] /= n;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    for y in 0..classes {
        let centroid = centroids.row(y);
        let cnorm = libm::sqrt(centroid.iter().map(|v| v * v).sum::<f64>());
        if cnorm == 0.0 {
            per_class.push(ClassCompactness {
                similarities: Vec::new(),
                quartiles: [0.0; 3],
                excluded: counts[y],
                degenerate_centroid: true,
            });
            continue;
        }
        let mut sims = Vec::with_capacity(counts[y]);
        let mut excluded = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            if label != y {
                continue;
            }
            let row = embeddings.row(i);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm == 0.0 {
                excluded += 1;
                continue;
            }
            let dot: f64 = row.iter().zip(centroid).map(|(a, b)| a * b).sum();
            sims.push(dot / (norm * cnorm));
        }
        sims.sort_unstable_by(|a, b| a.total_cmp(b));
        let q = quartiles(&sims);
        per_class.push(ClassCompactness { similarities: sims, quartiles: q, excluded, degenerate_centroid: false });
    }
    Ok(CompactnessStats { per_class })
}

/// Per-epoch similarity snapshots in long format: `(epoch, i, j, value)`.
pub fn similarity_series_rows(snapshots: &[(usize, Tensor)]) -> Result<Vec<(usize, usize, usize, f64)>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::InvalidConfig(alloc::string::String::from("no similarity snapshots")));
    };
    let c = first.1.shape()[0];
    let mut rows = Vec::with_capacity(snapshots.len() * c * c);
    for (epoch, s) in snapshots {
        if s.shape() != [c, c] {
            return Err(Error::ShapeMismatch { expected: vec![c, c], got: s.shape().to_vec() });
        }
        for i in 0..c {
            for j in 0..c {
                rows.push((*epoch, i, j, s.at2(i, j)));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn confusion_counts_pairs() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.at(t, p), u64::from(t == p));
            }
        }
        // everything predicted as class 0 -> one nonzero column
        let cm = confusion(&[0, 0, 0, 0], &[0, 1, 2, 1], 3).unwrap();
        for t in 0..3 {
            for p in 1..3 {
                assert_eq!(cm.at(t, p), 0);
            }
        }
        assert_eq!(cm.at(1, 0), 2);
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn confusion_row_sums_match_recount() {
        let mut r = rng::rng_from(3);
        use rand::Rng;
        let labels: Vec<usize> = (0..100).map(|_| r.gen_range(0..5)).collect();
        let preds: Vec<usize> = (0..100).map(|_| r.gen_range(0..5)).collect();
        let cm = confusion(&preds, &labels, 5).unwrap();
        let sums = cm.row_sums();
        for k in 0..5 {
            let expect = labels.iter().filter(|&&t| t == k).count() as u64;
            assert_eq!(sums[k], expect);
        }
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn perfect_predictions_score_hundred() {
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let cm = confusion(&labels, &labels, 6).unwrap();
        let m = macro_metrics(&cm).unwrap();
        for (_, v) in m.as_rows() {
            assert!((v - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_hand_computed_case() {
        // [[8,2],[3,7]]
        let cm = ConfusionMatrix::from_counts(2, alloc::vec![8, 2, 3, 7]).unwrap();
        let m = macro_metrics(&cm).unwrap();
        assert!((m.top1_acc - 75.0).abs() < 1e-12);
        let p = [8.0 / 11.0, 7.0 / 9.0];
        let r = [0.8, 0.7];
        let f1 = [2.0 * p[0] * r[0] / (p[0] + r[0]), 2.0 * p[1] * r[1] / (p[1] + r[1])];
        let expect_f1 = (f1[0] + f1[1]) / 2.0 * 100.0;
        assert!((m.macro_f1 - expect_f1).abs() < 1e-12, "{} vs {expect_f1}", m.macro_f1);
        assert!((round2(m.macro_f1) - 74.94).abs() < 1e-12);
        assert!((m.macro_precision - (p[0] + p[1]) / 2.0 * 100.0).abs() < 1e-12);
        assert!((m.macro_recall - 75.0).abs() < 1e-12);
    }

    #[test]
    fn f2_equals_f1_when_precision_equals_recall() {
        // symmetric confusion: per-class P == R
        let cm = ConfusionMatrix::from_counts(2, alloc::vec![6, 2, 2, 6]).unwrap();
        let m = macro_metrics(&cm).unwrap();
        assert!((m.macro_f1 - m.macro_f2).abs() < 1e-12);
        assert!((m.macro_f1 - m.macro_precision).abs() < 1e-12);
    }

    #[test]
    fn macro_metrics_match_naive_recount_on_random_matrices() {
        let mut r = rng::rng_from(9);
        use rand::Rng;
        for _ in 0..50 {
            let c = r.gen_range(2..=6usize);
            let counts: Vec<u64> = (0..c * c).map(|_| r.gen_range(0..30u64)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let cm = ConfusionMatrix::from_counts(c, counts.clone()).unwrap();
            let m = macro_metrics(&cm).unwrap();
            // independent recount
            let total: u64 = counts.iter().sum();
            let mut acc = [0.0f64; 6];
            for k in 0..c {
                let tp = counts[k * c + k] as f64;
                let fn_: f64 = (0..c).filter(|&p| p != k).map(|p| counts[k * c + p] as f64).sum();
                let fp: f64 = (0..c).filter(|&t| t != k).map(|t| counts[t * c + k] as f64).sum();
                let tn = total as f64 - tp - fn_ - fp;
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let spec = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
                acc[0] += spec;
                acc[1] += p;
                acc[2] += rec;
                acc[3] += if p + rec > 0.0 { 2.0 * p * rec / (p + rec) } else { 0.0 };
                acc[4] += if 4.0 * p + rec > 0.0 { 5.0 * p * rec / (4.0 * p + rec) } else { 0.0 };
                acc[5] += tp;
            }
            assert!((m.macro_specificity - acc[0] / c as f64 * 100.0).abs() < 1e-12);
            assert!((m.macro_precision - acc[1] / c as f64 * 100.0).abs() < 1e-12);
            assert!((m.macro_recall - acc[2] / c as f64 * 100.0).abs() < 1e-12);
            assert!((m.macro_f1 - acc[3] / c as f64 * 100.0).abs() < 1e-12);
            assert!((m.macro_f2 - acc[4] / c as f64 * 100.0).abs() < 1e-12);
            assert!((m.top1_acc - acc[5] / total as f64 * 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_metrics_are_permutation_invariant() {
        let mut r = rng::rng_from(10);
        use rand::Rng;
        let c = 4;
        let counts: Vec<u64> = (0..c * c).map(|_| r.gen_range(0..25u64)).collect();
        let cm = macro_metrics(&ConfusionMatrix::from_counts(c, counts.clone()).unwrap()).unwrap();
        // relabel classes by a fixed permutation
        let perm = [2usize, 0, 3, 1];
        let mut permuted = alloc::vec![0u64; c * c];
        for t in 0..c {
            for p in 0..c {
                permuted[perm[t] * c + perm[p]] = counts[t * c + p];
            }
        }
        let pm = macro_metrics(&ConfusionMatrix::from_counts(c, permuted).unwrap()).unwrap();
        for ((_, a), (_, b)) in cm.as_rows().iter().zip(pm.as_rows().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top1_equals_one_minus_offdiagonal_mass() {
        let counts = alloc::vec![5u64, 1, 2, 0, 7, 1, 3, 0, 6];
        let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
        let m = macro_metrics(&cm).unwrap();
        let total: u64 = counts.iter().sum();
        let off: u64 = total - 5 - 7 - 6;
        assert!((m.top1_acc / 100.0 - (1.0 - off as f64 / total as f64)).abs() < 1e-15);
    }

    #[test]
    fn compactness_identical_and_antipodal_cases() {
        // identical samples: all similarities exactly 1
        let emb = Tensor::new(&[3, 2], alloc::vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0]).unwrap();
        let stats = class_compactness(&emb, &[0, 0, 0], 1).unwrap();
        assert!(stats.per_class[0].similarities.iter().all(|&s| (s - 1.0).abs() < 1e-12));

        // antipodal pair: zero centroid, class flagged, both samples excluded
        let emb = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let stats = class_compactness(&emb, &[0, 0], 1).unwrap();
        assert!(stats.per_class[0].degenerate_centroid);
        assert_eq!(stats.per_class[0].excluded, 2);
    }

    #[test]
    fn compactness_matches_per_sample_recomputation() {
        let mut r = rng::rng_from(12);
        let (n, d) = (50, 8);
        let data: Vec<f64> = (0..n * d).map(|_| rng::standard_normal(&mut r) + 0.5).collect();
        let emb = Tensor::new(&[n, d], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let stats = class_compactness(&emb, &labels, 2).unwrap();
        for y in 0..2 {
            // brute-force centroid and cosines
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == y).collect();
            let mut centroid = alloc::vec![0.0; d];
            for &i in &members {
                for k in 0..d {
                    centroid[k] += emb.at2(i, k);
                }
            }
            centroid.iter_mut().for_each(|v| *v /= members.len() as f64);
            let cn = libm::sqrt(centroid.iter().map(|v| v * v).sum::<f64>());
            let mut expect: Vec<f64> = members
                .iter()
                .map(|&i| {
                    let row = emb.row(i);
                    let dot: f64 = row.iter().zip(&centroid).map(|(a, b)| a * b).sum();
                    let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                    dot / (norm * cn)
                })
                .collect();
            expect.sort_unstable_by(|a, b| a.total_cmp(b));
            for (a, b) in stats.per_class[y].similarities.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(stats.per_class[y].similarities.iter().all(|s| (-1.0..=1.0 + 1e-12).contains(s)));
        }
    }

    #[test]
    fn similarity_series_long_format() {
        let s0 = Tensor::new(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s1 = Tensor::new(&[2, 2], alloc::vec![1.0, 0.3, 0.3, 1.0]).unwrap();
        let rows = similarity_series_rows(&[(0, s0.clone()), (1, s1)]).unwrap();
        assert_eq!(rows.len(), 8);
        // identity snapshot: off-diagonal rows all zero
        for (e, i, j, v) in &rows {
            if *e == 0 && i != j {
                assert_eq!(*v, 0.0);
            }
        }
        // inconsistent class count across snapshots is an error
        let bad = Tensor::zeros(&[3, 3]);
        assert!(similarity_series_rows(&[(0, s0), (1, bad)]).is_err());
    }
}
