//! Labeled branch datasets: probability binning, the minimum-sample filter,
//! the seeded 10:1 train/test split and the CSV interchange format.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{extract_function, FeatureVector, FEATURE_NAMES, NUM_FEATURES};
use crate::ir::{Block, CfgModule};

pub const DEFAULT_MIN_SAMPLES: u64 = 100;
pub const DEFAULT_NUM_CLASSES: usize = 11;

/// Trailing CSV columns after the feature columns.
pub const LABEL_COLUMNS: [&str; 3] = ["p_taken", "total_count", "label"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dataset has {len} samples; at least {min} are required")]
    TooSmall { len: usize, min: usize },
    #[error("expected {expected} feature columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("column {column}: expected `{expected}`, found `{found}`")]
    HeaderMismatch {
        column: usize,
        expected: String,
        found: String,
    },
    #[error("row {row}, column `{column}`: malformed value `{value}`")]
    MalformedCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps a taken-probability to the nearest of `num_classes` evenly spaced
/// bin centers `k / (num_classes - 1)`; ties round up.
pub fn discretize(p: f64, num_classes: usize) -> Result<usize, DatasetError> {
    if num_classes < 2 {
        return Err(DatasetError::TooFewClasses(num_classes));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(DatasetError::ProbabilityOutOfRange(p));
    }
    let steps = (num_classes - 1) as f64;
    Ok(((p * steps + 0.5).floor() as usize).min(num_classes - 1))
}

/// Taken-probability of a class's bin center.
pub fn class_probability(class: usize, num_classes: usize) -> f64 {
    class as f64 / (num_classes - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: FeatureVector,
    pub p_taken: f64,
    pub total_count: u64,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(num_classes: usize) -> Self {
        Dataset {
            samples: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Recomputes every label for a different class count.
    pub fn relabel(&self, num_classes: usize) -> Result<Dataset, DatasetError> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    y: discretize(s.p_taken, num_classes)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_, DatasetError>>()?;
        Ok(Dataset { samples, num_classes })
    }
}

/// Profile label of a conditional block, if it has weights and at least
/// `min_samples` executions: `(p_taken, total_count)`.
pub fn branch_label(block: &Block, min_samples: u64) -> Option<(f64, u64)> {
    if !block.term.is_cond_br() {
        return None;
    }
    let w = block.weights?;
    let total = w.total();
    if total < min_samples {
        return None;
    }
    w.taken_probability().map(|p| (p, total))
}

pub fn build_dataset(
    corpus: &[CfgModule],
    min_samples: u64,
    num_classes: usize,
) -> Result<Dataset, DatasetError> {
    if num_classes < 2 {
        return Err(DatasetError::TooFewClasses(num_classes));
    }
    let mut d = Dataset::new(num_classes);
    for m in corpus {
        for f in &m.functions {
            if !f.blocks.iter().any(|b| branch_label(b, min_samples).is_some()) {
                continue;
            }
            for (bi, x) in extract_function(f) {
                if let Some((p_taken, total_count)) = branch_label(&f.blocks[bi], min_samples) {
                    d.samples.push(Sample {
                        x,
                        p_taken,
                        total_count,
                        y: discretize(p_taken, num_classes)?,
                    });
                }
            }
        }
    }
    if d.is_empty() {
        log::warn!("no conditional branch has weights with at least {min_samples} samples");
    }
    Ok(d)
}

/// Seeded shuffle, then `ceil(n / 11)` samples to the test set and the rest
/// to training.
pub fn split(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if d.len() < 11 {
        return Err(DatasetError::TooSmall { len: d.len(), min: 11 });
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = d.len().div_ceil(11);
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| d.samples[i].clone()).collect(),
        num_classes: d.num_classes,
    };
    Ok((pick(&order[n_test..]), pick(&order[..n_test])))
}

pub fn write_csv<W: Write>(d: &Dataset, out: W) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(FEATURE_NAMES.iter().chain(LABEL_COLUMNS.iter()))?;
    let mut row: Vec<String> = Vec::with_capacity(NUM_FEATURES + 3);
    for s in &d.samples {
        row.clear();
        row.extend(s.x.0.iter().map(|v| v.to_string()));
        row.push(s.p_taken.to_string());
        row.push(s.total_count.to_string());
        row.push(s.y.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(d: &Dataset) -> String {
    let mut buf = Vec::new();
    write_csv(d, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

fn cell<T: std::str::FromStr>(row: usize, column: &str, value: &str) -> Result<T, DatasetError> {
    value.parse().map_err(|_| DatasetError::MalformedCell {
        row,
        column: column.to_owned(),
        value: value.to_owned(),
    })
}

/// Reads a dataset, checking the header against the feature schema and
/// every label against `num_classes`. Rows are numbered from 1 after the
/// header.
pub fn read_csv<R: Read>(input: R, num_classes: usize) -> Result<Dataset, DatasetError> {
    if num_classes < 2 {
        return Err(DatasetError::TooFewClasses(num_classes));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let found_features = header.len().saturating_sub(LABEL_COLUMNS.len());
    if header.len() < LABEL_COLUMNS.len() || found_features != NUM_FEATURES {
        return Err(DatasetError::DimensionMismatch {
            expected: NUM_FEATURES,
            found: found_features,
        });
    }
    for (i, (expected, found)) in FEATURE_NAMES
        .iter()
        .chain(LABEL_COLUMNS.iter())
        .zip(header.iter())
        .enumerate()
    {
        if *expected != found {
            return Err(DatasetError::HeaderMismatch {
                column: i + 1,
                expected: (*expected).to_owned(),
                found: found.to_owned(),
            });
        }
    }

    let mut d = Dataset::new(num_classes);
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let mut x = [0.0f32; NUM_FEATURES];
        for (j, slot) in x.iter_mut().enumerate() {
            let v: f32 = cell(row, FEATURE_NAMES[j], &rec[j])?;
            if !v.is_finite() {
                return Err(DatasetError::MalformedCell {
                    row,
                    column: FEATURE_NAMES[j].to_owned(),
                    value: rec[j].to_owned(),
                });
            }
            *slot = v;
        }
        let p_taken: f64 = cell(row, "p_taken", &rec[NUM_FEATURES])?;
        let total_count: u64 = cell(row, "total_count", &rec[NUM_FEATURES + 1])?;
        let y: usize = cell(row, "label", &rec[NUM_FEATURES + 2])?;
        if y >= num_classes {
            return Err(DatasetError::InvalidRow {
                row,
                message: format!("label {y} is outside [0, {num_classes})"),
            });
        }
        let expected = discretize(p_taken, num_classes).map_err(|e| DatasetError::InvalidRow {
            row,
            message: e.to_string(),
        })?;
        if expected != y {
            return Err(DatasetError::InvalidRow {
                row,
                message: format!(
                    "label {y} does not match p_taken {p_taken} (expected {expected} with {num_classes} classes)"
                ),
            });
        }
        d.samples.push(Sample {
            x: FeatureVector(x),
            p_taken,
            total_count,
            y,
        });
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_bcfg;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.0, 11).unwrap(), 0);
        assert_eq!(discretize(1.0, 11).unwrap(), 10);
        assert_eq!(discretize(0.34, 11).unwrap(), 3);
        assert_eq!(discretize(0.35, 11).unwrap(), 4);
        assert_eq!(discretize(0.25, 3).unwrap(), 1);
        assert_eq!(discretize(0.24, 3).unwrap(), 0);
        assert!(discretize(1.01, 11).is_err());
        assert!(discretize(-0.1, 11).is_err());
        assert!(discretize(f64::NAN, 11).is_err());
        assert!(discretize(0.5, 1).is_err());
    }

    #[test]
    fn bin_centers_map_exactly() {
        for k in [2usize, 3, 11] {
            for c in 0..k {
                let p = class_probability(c, k);
                assert_eq!(discretize(p, k).unwrap(), c);
            }
        }
    }

    proptest! {
        #[test]
        fn discretize_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, k in 2usize..20) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(discretize(lo, k).unwrap() <= discretize(hi, k).unwrap());
            prop_assert!(discretize(hi, k).unwrap() < k);
        }
    }

    const CORPUS: &str = "\
func f
block e
  instr icmp pred=ne lhs=pointer rhs=null_ptr def=c0
  term cond_br c0 a b
  weights 90 10
block a
  instr icmp pred=eq lhs=var rhs=const def=c1
  term cond_br c1 b x
  weights 3 2
block b
  term cond_br c2 x e
block x
  term ret
";

    #[test]
    fn build_applies_sample_filter() {
        let m = parse_bcfg(CORPUS).unwrap();
        let d = build_dataset(&[m.clone()], 50, 11).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples[0].p_taken, 0.9);
        assert_eq!(d.samples[0].total_count, 100);
        assert_eq!(d.samples[0].y, 9);
        assert_eq!(d.samples[0].x.get("br.is_entry_block"), Some(1.0));

        let all = build_dataset(&[m], 0, 11).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.samples[1].y, 6);
    }

    #[test]
    fn build_with_no_labels_is_empty() {
        let m = parse_bcfg("func f\nblock e\n term ret\n").unwrap();
        assert!(build_dataset(&[m], 100, 11).unwrap().is_empty());
    }

    fn random_dataset(rng: &mut impl Rng, n: usize, k: usize) -> Dataset {
        let mut d = Dataset::new(k);
        for _ in 0..n {
            let mut x = [0.0f32; NUM_FEATURES];
            for v in x.iter_mut() {
                *v = if rng.gen_bool(0.5) {
                    rng.gen_range(0..20) as f32
                } else {
                    rng.gen::<f32>() * 1e3 - 5e2
                };
            }
            let p: f64 = rng.gen();
            d.samples.push(Sample {
                x: FeatureVector(x),
                p_taken: p,
                total_count: rng.gen_range(0..u64::MAX),
                y: discretize(p, k).unwrap(),
            });
        }
        d
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dataset(&mut rng, 1100, 11);
        let (train, test) = split(&d, 1).unwrap();
        assert_eq!((train.len(), test.len()), (1000, 100));
        assert_eq!(split(&d, 1).unwrap(), (train.clone(), test.clone()));
        let (train2, test2) = split(&d, 2).unwrap();
        assert_eq!((train2.len(), test2.len()), (1000, 100));
        assert_ne!(test, test2);
        assert!(matches!(
            split(&random_dataset(&mut rng, 10, 11), 0),
            Err(DatasetError::TooSmall { len: 10, .. })
        ));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 11usize..300, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut d = random_dataset(&mut rng, n, 3);
            // Tag each sample so the partition can be checked by identity.
            for (i, s) in d.samples.iter_mut().enumerate() {
                s.total_count = i as u64;
            }
            let (train, test) = split(&d, seed).unwrap();
            prop_assert_eq!(test.len(), n.div_ceil(11));
            let mut ids: Vec<u64> = train.samples.iter().chain(&test.samples).map(|s| s.total_count).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_dataset(&mut rng, 50, 11);
        let text = to_csv_string(&d);
        assert!(text.starts_with("br.is_entry_block,"));
        assert!(text.lines().next().unwrap().ends_with(",p_taken,total_count,label"));
        assert_eq!(read_csv(text.as_bytes(), 11).unwrap(), d);
    }

    #[test]
    fn csv_dimension_mismatch() {
        let header: Vec<&str> = FEATURE_NAMES[..55].iter().chain(LABEL_COLUMNS.iter()).copied().collect();
        let err = read_csv(format!("{}\n", header.join(",")).as_bytes(), 11).unwrap_err();
        assert!(matches!(err, DatasetError::DimensionMismatch { expected: 56, found: 55 }), "{err}");
    }

    #[test]
    fn csv_row_errors_name_the_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dataset(&mut rng, 3, 11);
        let text = to_csv_string(&d);
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();

        let mut bad_label = lines.clone();
        let row = &mut bad_label[2];
        let cut = row.rfind(',').unwrap();
        row.truncate(cut);
        row.push_str(",11");
        let err = read_csv(bad_label.join("\n").as_bytes(), 11).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidRow { row: 2, .. }), "{err}");

        let first = lines[3].find(',').unwrap();
        lines[3].replace_range(..first, "abc");
        let err = read_csv(lines.join("\n").as_bytes(), 11).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedCell { row: 3, .. }), "{err}");
        assert!(err.to_string().contains("br.is_entry_block"));
    }

    #[test]
    fn relabel_changes_class_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 40, 11);
        let d3 = d.relabel(3).unwrap();
        assert_eq!(d3.num_classes, 3);
        for (a, b) in d.samples.iter().zip(&d3.samples) {
            assert_eq!(b.y, discretize(a.p_taken, 3).unwrap());
        }
    }
}
