//! Model quality on a labeled test set: accuracy, logloss and a confusion
//! matrix, with text and CSV renderings.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{class_probability, Dataset, Sample};
use crate::gbdt::{argmax, sample_logloss};
use crate::model::{CompiledModel, FlatModel, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("model has {model} classes but the test set uses {data}")]
    ClassMismatch { model: usize, data: usize },
}

/// Rows are ground-truth classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
            total: 0,
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.total += other.total;
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    /// Pairs whose classes differ by at most `distance`.
    pub fn within(&self, distance: usize) -> u64 {
        let mut n = 0;
        for (t, row) in self.counts.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                if t.abs_diff(p) <= distance {
                    n += c;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub off_by_one_accuracy: f64,
    /// Agreement of `p > 0.5` between the predicted bin and the true
    /// probability.
    pub direction_accuracy: f64,
    pub logloss: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores `test` with any margin function. Per-sample work runs in
/// parallel; the reduction is sequential in sample order.
pub fn evaluate_margins<F>(test: &Dataset, margins: F) -> Result<EvalReport, EvalError>
where
    F: Fn(&Sample) -> Vec<f32> + Sync,
{
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let k = test.num_classes;
    let scored: Vec<(usize, f64)> = test
        .samples
        .par_iter()
        .map(|s| {
            let m = margins(s);
            (argmax(&m), sample_logloss(&m, s.y))
        })
        .collect();
    let mut confusion = ConfusionMatrix::new(k);
    let mut loss = 0.0;
    let mut direction = 0u64;
    for (s, &(pred, l)) in test.samples.iter().zip(&scored) {
        confusion.add(s.y, pred);
        loss += l;
        if (class_probability(pred, k) > 0.5) == (s.p_taken > 0.5) {
            direction += 1;
        }
    }
    let n = confusion.total as f64;
    Ok(EvalReport {
        accuracy: confusion.trace() as f64 / n,
        off_by_one_accuracy: confusion.within(1) as f64 / n,
        direction_accuracy: direction as f64 / n,
        logloss: loss / n,
        confusion,
    })
}

pub fn evaluate(m: &FlatModel, test: &Dataset) -> Result<EvalReport, EvalError> {
    m.check_schema()?;
    if m.num_classes != test.num_classes {
        return Err(EvalError::ClassMismatch {
            model: m.num_classes,
            data: test.num_classes,
        });
    }
    let cm = CompiledModel::new(m);
    evaluate_margins(test, |s| {
        let mut bucket = vec![0.0; m.num_classes];
        cm.margins_into(s.x.as_slice(), &mut bucket, &mut cm.scratch());
        bucket
    })
}

/// Darkest to brightest.
pub const SHADES: &[u8] = b" .:-=+*#%@";

/// Shade index of a row-normalized density.
pub fn shade_index(count: u64, row_total: u64) -> usize {
    if row_total == 0 {
        return 0;
    }
    let d = count as f64 / row_total as f64;
    (d * (SHADES.len() - 1) as f64).round() as usize
}

/// Text heatmap (rows normalized by ground-truth count) and a CSV of the
/// raw counts.
pub fn render_confusion(cm: &ConfusionMatrix) -> (String, String) {
    let k = cm.num_classes;
    let mut text = String::new();
    let _ = write!(text, "truth\\pred |");
    for p in 0..k {
        let _ = write!(text, "{p:>3}");
    }
    text.push_str(" |      n\n");
    let _ = writeln!(text, "{}", "-".repeat(11 + 3 * k + 9));
    for (t, row) in cm.counts.iter().enumerate() {
        let row_total: u64 = row.iter().sum();
        let _ = write!(text, "{t:>10} |");
        for &c in row {
            let ch = SHADES[shade_index(c, row_total)] as char;
            let _ = write!(text, " {ch}{ch}");
        }
        let _ = writeln!(text, " | {row_total:>6}");
    }

    let mut csv = String::from("truth");
    for p in 0..k {
        let _ = write!(csv, ",pred_{p}");
    }
    csv.push('\n');
    for (t, row) in cm.counts.iter().enumerate() {
        let _ = write!(csv, "{t}");
        for c in row {
            let _ = write!(csv, ",{c}");
        }
        csv.push('\n');
    }
    (text, csv)
}

pub fn render_report(r: &EvalReport) -> String {
    format!(
        "samples: {}\naccuracy: {:.4}\noff_by_one_accuracy: {:.4}\ndirection_accuracy: {:.4}\nlogloss: {:.6}\n",
        r.confusion.total, r.accuracy, r.off_by_one_accuracy, r.direction_accuracy, r.logloss
    )
}

pub fn metrics_csv(r: &EvalReport) -> String {
    format!(
        "metric,value\nsamples,{}\naccuracy,{}\noff_by_one_accuracy,{}\ndirection_accuracy,{}\nlogloss,{}\n",
        r.confusion.total, r.accuracy, r.off_by_one_accuracy, r.direction_accuracy, r.logloss
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use proptest::prelude::*;

    fn dataset(labels: &[usize], k: usize) -> Dataset {
        Dataset {
            num_classes: k,
            samples: labels
                .iter()
                .map(|&y| Sample {
                    x: FeatureVector::zeros(),
                    p_taken: class_probability(y, k),
                    total_count: 100,
                    y,
                })
                .collect(),
        }
    }

    fn one_hot(c: usize, k: usize) -> Vec<f32> {
        (0..k).map(|i| if i == c { 10.0 } else { 0.0 }).collect()
    }

    #[test]
    fn oracle_is_perfect() {
        let d = dataset(&(0..110).map(|i| i % 11).collect::<Vec<_>>(), 11);
        let r = evaluate_margins(&d, |s| one_hot(s.y, 11)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.direction_accuracy, 1.0);
        for t in 0..11 {
            for p in 0..11 {
                assert_eq!(r.confusion.counts[t][p], if t == p { 10 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_model_on_uniform_labels() {
        let d = dataset(&(0..1100).map(|i| i % 11).collect::<Vec<_>>(), 11);
        let r = evaluate_margins(&d, |_| one_hot(4, 11)).unwrap();
        assert!((r.accuracy - 1.0 / 11.0).abs() < 1e-12);
        assert!((r.off_by_one_accuracy - 3.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn zero_margins_give_ln_k() {
        let d = dataset(&[0, 1, 2], 3);
        let r = evaluate_margins(&d, |_| vec![0.0; 3]).unwrap();
        assert!((r.logloss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_test_set() {
        let d = Dataset::new(11);
        assert_eq!(evaluate_margins(&d, |_| vec![0.0; 11]), Err(EvalError::EmptyTestSet));
    }

    #[test]
    fn diagonal_is_brightest() {
        let mut cm = ConfusionMatrix::new(11);
        for c in 0..11 {
            for _ in 0..5 {
                cm.add(c, c);
            }
        }
        let (text, csv) = render_confusion(&cm);
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(rows.len(), 11);
        for (t, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split('|').nth(1).unwrap().split_whitespace().collect();
            assert_eq!(cells, vec!["@@"], "row {t}: {row}");
        }
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.starts_with("truth,pred_0,"));
    }

    #[test]
    fn empty_row_has_minimum_shade() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 1);
        let (text, _) = render_confusion(&cm);
        let empty = text.lines().nth(3).unwrap();
        assert_eq!(empty.split('|').nth(1).unwrap(), " ".repeat(10));
    }

    proptest! {
        #[test]
        fn metrics_are_consistent(pairs in prop::collection::vec((0usize..11, 0usize..11), 1..200)) {
            let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut d = dataset(&labels, 11);
            // The stub model reads its answer from the sample count.
            for (s, p) in d.samples.iter_mut().zip(&pairs) {
                s.total_count = p.1 as u64;
            }
            let r = evaluate_margins(&d, |s| one_hot(s.total_count as usize, 11)).unwrap();
            prop_assert_eq!(r.confusion.total, pairs.len() as u64);
            prop_assert_eq!(r.confusion.counts.iter().flatten().sum::<u64>(), r.confusion.total);
            let hits = pairs.iter().filter(|p| p.0 == p.1).count();
            prop_assert_eq!(r.accuracy, hits as f64 / pairs.len() as f64);
            prop_assert!(r.off_by_one_accuracy >= r.accuracy);
        }
    }
}
