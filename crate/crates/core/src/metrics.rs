//! Confusion-matrix evaluation: overall accuracy, Cohen's kappa, per-class
//! precision/recall/F1 with pixel supports, support-weighted averages, and
//! the aligned plain-text report.

use crate::error::{Error, Result};

/// `K x K` counts; rows index the actual class, columns the predicted one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Precision, recall, F1, and pixel support of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn add(&mut self, actual: usize, predicted: usize, n: u64) {
        self.counts[actual * self.k + predicted] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        self.counts[r * self.k..(r + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.count(r, c)).sum()
    }

    /// Count every non-ignored pixel of a prediction/label map pair.
    pub fn accumulate(&mut self, predicted: &[u8], labels: &[u8], ignore: u8) -> Result<()> {
        if predicted.len() != labels.len() {
            return Err(Error::dim(format!(
                "prediction map has {} pixels but labels have {}",
                predicted.len(),
                labels.len()
            )));
        }
        for (&p, &a) in predicted.iter().zip(labels.iter()) {
            if a == ignore {
                continue;
            }
            if p as usize >= self.k {
                return Err(Error::Range(format!(
                    "predicted id {p} out of range for {} classes",
                    self.k
                )));
            }
            if a as usize >= self.k {
                return Err(Error::Range(format!(
                    "actual id {a} out of range for {} classes",
                    self.k
                )));
            }
            self.counts[a as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Add another matrix of the same size (thread-partial merge).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::dim(format!(
                "cannot merge a {}-class matrix into a {}-class one",
                other.k, self.k
            )));
        }
        for (d, s) in self.counts.iter_mut().zip(other.counts.iter()) {
            *d += s;
        }
        Ok(())
    }

    /// Fraction of correctly classified pixels (trace / total).
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Degenerate("overall accuracy of an empty matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Chance-corrected agreement `(p_o - p_e) / (1 - p_e)`.
    pub fn cohen_kappa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Degenerate("kappa of an empty matrix".into()));
        }
        let n = total as f64;
        let p_o = self.trace() as f64 / n;
        let p_e: f64 =
            (0..self.k).map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64 / (n * n)).sum();
        if 1.0 - p_e == 0.0 {
            return Err(Error::Degenerate(
                "kappa undefined: chance agreement equals 1".into(),
            ));
        }
        Ok((p_o - p_e) / (1.0 - p_e))
    }

    /// Per-class precision/recall/F1 with the zero-denominator conventions
    /// (empty column -> precision 0; empty row -> recall 0; p+r = 0 -> F1 0).
    pub fn per_class(&self) -> Result<Vec<ClassMetrics>> {
        if self.total() == 0 {
            return Err(Error::Degenerate("per-class metrics of an empty matrix".into()));
        }
        Ok((0..self.k)
            .map(|i| {
                let tp = self.count(i, i) as f64;
                let col = self.col_sum(i) as f64;
                let row = self.row_sum(i) as f64;
                let precision = if col > 0.0 { tp / col } else { 0.0 };
                let recall = if row > 0.0 { tp / row } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics { precision, recall, f1, support: self.row_sum(i) }
            })
            .collect())
    }

    /// Support-weighted (precision, recall, F1).
    pub fn weighted_average(&self) -> Result<(f64, f64, f64)> {
        weighted_average(&self.per_class()?)
    }
}

/// Support-weighted mean of per-class metrics.
pub fn weighted_average(metrics: &[ClassMetrics]) -> Result<(f64, f64, f64)> {
    let total: u64 = metrics.iter().map(|m| m.support).sum();
    if total == 0 {
        return Err(Error::Degenerate("weighted average with zero total support".into()));
    }
    let n = total as f64;
    let mut p = 0.0;
    let mut r = 0.0;
    let mut f = 0.0;
    for m in metrics {
        let w = m.support as f64;
        p += m.precision * w;
        r += m.recall * w;
        f += m.f1 * w;
    }
    Ok((p / n, r / n, f / n))
}

/// Aligned text report: one row per class, the weighted average, then
/// overall accuracy and kappa as percentages with two decimals.
pub fn report(cm: &ConfusionMatrix, class_names: &[String]) -> Result<String> {
    if class_names.len() != cm.num_classes() {
        return Err(Error::dim(format!(
            "{} class names for a {}-class matrix",
            class_names.len(),
            cm.num_classes()
        )));
    }
    let per = cm.per_class()?;
    let name_w = class_names.iter().map(String::len).max().unwrap_or(5).max(13);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$} {:>7} {:>7} {:>7} {:>10}\n", "class", "P", "R", "F1", "#pix"));
    for (name, m) in class_names.iter().zip(per.iter()) {
        out.push_str(&format!(
            "{:<name_w$} {:>7.2} {:>7.2} {:>7.2} {:>10}\n",
            name, m.precision, m.recall, m.f1, m.support
        ));
    }
    let (wp, wr, wf) = weighted_average(&per)?;
    out.push_str(&format!("{:<name_w$} {:>7.2} {:>7.2} {:>7.2}\n", "weighted avg.", wp, wr, wf));
    out.push_str(&format!("Overall Accuracy {:.2}%\n", cm.overall_accuracy()? * 100.0));
    out.push_str(&format!("Overall Kappa    {:.2}%\n", cm.cohen_kappa()? * 100.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn example_matrix() -> ConfusionMatrix {
        // [[40, 10], [20, 30]]
        let mut cm = ConfusionMatrix::new(2);
        cm.add(0, 0, 40);
        cm.add(0, 1, 10);
        cm.add(1, 0, 20);
        cm.add(1, 1, 30);
        cm
    }

    #[test]
    fn accumulate_cases() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1], 255).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.trace(), 4);
        // all ignored leaves the matrix unchanged
        cm.accumulate(&[0, 1], &[255, 255], 255).unwrap();
        assert_eq!(cm.total(), 4);
        // one mismatch adds exactly one off-diagonal count
        cm.accumulate(&[0, 1, 2, 0], &[0, 1, 2, 1], 255).unwrap();
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.total(), 8);
        // out-of-range prediction is a range error
        assert!(matches!(cm.accumulate(&[3], &[0], 255), Err(Error::Range(_))));
    }

    #[test]
    fn overall_accuracy_cases() {
        let mut diag = ConfusionMatrix::new(2);
        diag.add(0, 0, 7);
        diag.add(1, 1, 3);
        assert_eq!(diag.overall_accuracy().unwrap(), 1.0);

        let mut even = ConfusionMatrix::new(2);
        for a in 0..2 {
            for p in 0..2 {
                even.add(a, p, 25);
            }
        }
        assert_eq!(even.overall_accuracy().unwrap(), 0.5);

        assert!((example_matrix().overall_accuracy().unwrap() - 0.70).abs() < 1e-15);
        assert!(ConfusionMatrix::new(2).overall_accuracy().is_err());
    }

    #[test]
    fn kappa_cases() {
        let mut diag = ConfusionMatrix::new(3);
        for i in 0..3 {
            diag.add(i, i, 5);
        }
        assert_eq!(diag.cohen_kappa().unwrap(), 1.0);

        let mut even = ConfusionMatrix::new(2);
        for a in 0..2 {
            for p in 0..2 {
                even.add(a, p, 25);
            }
        }
        assert!(even.cohen_kappa().unwrap().abs() < 1e-15);

        assert!((example_matrix().cohen_kappa().unwrap() - 0.4).abs() < 1e-12);

        // all mass in one cell: p_e == 1, kappa undefined
        let mut degenerate = ConfusionMatrix::new(2);
        degenerate.add(0, 0, 10);
        assert!(matches!(degenerate.cohen_kappa(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn per_class_cases() {
        let mut diag = ConfusionMatrix::new(2);
        diag.add(0, 0, 4);
        diag.add(1, 1, 6);
        for m in diag.per_class().unwrap() {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }

        // class never predicted -> precision 0 by convention
        let mut c = ConfusionMatrix::new(2);
        c.add(0, 0, 3);
        c.add(1, 0, 2);
        let m = c.per_class().unwrap();
        assert_eq!(m[1].precision, 0.0);
        assert_eq!(m[1].recall, 0.0);
        assert_eq!(m[1].f1, 0.0);

        let m = example_matrix().per_class().unwrap();
        assert!((m[0].precision - 40.0 / 60.0).abs() < 1e-12);
        assert!((m[0].recall - 0.8).abs() < 1e-12);
        assert!((m[0].f1 - 16.0 / 22.0).abs() < 1e-12);
        assert_eq!(m[0].support, 50);
    }

    #[test]
    fn weighted_average_cases() {
        // identical metrics collapse to themselves
        let ms = vec![
            ClassMetrics { precision: 0.6, recall: 0.6, f1: 0.6, support: 10 },
            ClassMetrics { precision: 0.6, recall: 0.6, f1: 0.6, support: 90 },
        ];
        let (p, _, _) = weighted_average(&ms).unwrap();
        assert!((p - 0.6).abs() < 1e-15);

        let ms = vec![
            ClassMetrics { precision: 1.0, recall: 1.0, f1: 1.0, support: 3 },
            ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0, support: 1 },
        ];
        let (p, _, _) = weighted_average(&ms).unwrap();
        assert!((p - 0.75).abs() < 1e-15);

        let (p, _, _) = example_matrix().weighted_average().unwrap();
        assert!((p - (40.0 / 60.0 * 50.0 + 0.75 * 50.0) / 100.0).abs() < 1e-12);

        let zero = vec![ClassMetrics { precision: 1.0, recall: 1.0, f1: 1.0, support: 0 }];
        assert!(weighted_average(&zero).is_err());
    }

    #[test]
    fn random_matrix_properties() {
        let mut rng = SplitMix64::new(1234);
        let mut checked = 0;
        while checked < 1000 {
            let k = 2 + rng.below(6) as usize;
            let mut cm = ConfusionMatrix::new(k);
            for a in 0..k {
                for p in 0..k {
                    cm.add(a, p, rng.below(50));
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let oa = cm.overall_accuracy().unwrap();
            assert!((0.0..=1.0).contains(&oa));
            if let Ok(kappa) = cm.cohen_kappa() {
                assert!(kappa <= oa + 1e-12, "kappa {kappa} > OA {oa}");
                // scaling all counts leaves kappa unchanged
                let mut scaled = ConfusionMatrix::new(k);
                for a in 0..k {
                    for p in 0..k {
                        scaled.add(a, p, cm.count(a, p) * 3);
                    }
                }
                assert!((scaled.cohen_kappa().unwrap() - kappa).abs() < 1e-12);
            }
            // support-weighted recall equals overall accuracy
            let per = cm.per_class().unwrap();
            let (_, wr, _) = weighted_average(&per).unwrap();
            assert!((wr - oa).abs() < 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn accumulate_is_order_independent() {
        let mut rng = SplitMix64::new(5);
        let a: Vec<u8> = (0..200).map(|_| rng.below(4) as u8).collect();
        let b: Vec<u8> = (0..200).map(|_| rng.below(4) as u8).collect();
        let mut one = ConfusionMatrix::new(4);
        one.accumulate(&a, &b, 255).unwrap();
        one.accumulate(&b, &a, 255).unwrap();
        let mut two = ConfusionMatrix::new(4);
        two.accumulate(&b, &a, 255).unwrap();
        two.accumulate(&a, &b, 255).unwrap();
        assert_eq!(one, two);
        // merge matches sequential accumulation
        let mut left = ConfusionMatrix::new(4);
        left.accumulate(&a, &b, 255).unwrap();
        let mut right = ConfusionMatrix::new(4);
        right.accumulate(&b, &a, 255).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left, one);
    }

    #[test]
    fn report_layout() {
        let cm = example_matrix();
        let names = vec!["maize".to_string(), "meadow".to_string()];
        let text = report(&cm, &names).unwrap();
        assert!(text.contains("maize"));
        assert!(text.contains("weighted avg."));
        assert!(text.contains("Overall Accuracy 70.00%"));
        assert!(text.contains("Overall Kappa    40.00%"));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 + 2 + 2); // header, classes, weighted, OA, kappa
    }
}
