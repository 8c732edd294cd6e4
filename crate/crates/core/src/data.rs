//! Paired-logit datasets, labeled points, and synthetic task generation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::textfmt;

/// One input's teacher logits, student logits and optional ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedLogitRecord {
    pub id: String,
    pub teacher_logits: Vec<f64>,
    pub student_logits: Vec<f64>,
    #[serde(default)]
    pub label: Option<usize>,
}

impl PairedLogitRecord {
    pub fn num_classes(&self) -> usize {
        self.teacher_logits.len()
    }

    /// Checks the per-record invariants, without reference to a dataset.
    pub fn validate(&self) -> Result<()> {
        let c = self.teacher_logits.len();
        if c != self.student_logits.len() {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: format!(
                    "teacher_logits has length {c}, student_logits has length {}",
                    self.student_logits.len()
                ),
            });
        }
        if c < 2 {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: format!("need at least 2 classes, got {c}"),
            });
        }
        if !self
            .teacher_logits
            .iter()
            .chain(&self.student_logits)
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                msg: "non-finite logit".into(),
            });
        }
        if let Some(label) = self.label {
            if label >= c {
                return Err(Error::InvalidRecord {
                    id: self.id.clone(),
                    msg: format!("label {label} out of range for {c} classes"),
                });
            }
        }
        Ok(())
    }
}

/// Which split a dataset was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Eval,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Eval => "eval",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "tr" => Ok(SplitTag::Train),
            "eval" | "ev" => Ok(SplitTag::Eval),
            other => Err(Error::Unknown {
                kind: "split",
                name: other.to_string(),
            }),
        }
    }
}

/// A validated, non-empty set of paired records sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    records: Vec<PairedLogitRecord>,
    split: SplitTag,
}

impl PairedDataset {
    pub fn new(records: Vec<PairedLogitRecord>, split: SplitTag) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::invalid("dataset must contain at least one record"));
        };
        let c = first.num_classes();
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate()?;
            if rec.num_classes() != c {
                return Err(Error::DimensionMismatch {
                    line: i + 1,
                    id: rec.id.clone(),
                    msg: format!("expected {c} classes, got {}", rec.num_classes()),
                });
            }
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: rec.id.clone(),
                });
            }
        }
        Ok(Self { records, split })
    }

    pub fn records(&self) -> &[PairedLogitRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PairedLogitRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.records[0].num_classes()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn has_labels(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(&owned, e)))))
}

/// Reads a paired-logits file (one JSON record per line). Blank lines are
/// skipped; unknown fields are ignored. The returned dataset is tagged
/// `train`; use [`PairedDataset::with_split`] to relabel it.
pub fn load_paired(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut classes = None;
    for (line_no, line) in read_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairedLogitRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let (t, s) = (rec.teacher_logits.len(), rec.student_logits.len());
        if t != s {
            return Err(Error::DimensionMismatch {
                line: line_no,
                id: rec.id,
                msg: format!("teacher_logits has length {t}, student_logits has length {s}"),
            });
        }
        match classes {
            None => classes = Some(t),
            Some(c) if c != t => {
                return Err(Error::DimensionMismatch {
                    line: line_no,
                    id: rec.id,
                    msg: format!("expected {c} classes, got {t}"),
                })
            }
            Some(_) => {}
        }
        rec.validate().map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        records.push(rec);
    }
    PairedDataset::new(records, SplitTag::Train)
}

/// Writes one JSON record per line with 17 significant digits per float.
pub fn save_paired(ds: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), ds.records().iter())
}

fn write_lines<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl Iterator<Item = &'a T>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", textfmt::to_line(item)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A feature vector with its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    pub label: usize,
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<LabeledPoint>> {
    let path = path.as_ref();
    let mut points: Vec<LabeledPoint> = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: LabeledPoint = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if let Some(first) = points.first() {
            if first.features.len() != p.features.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "expected {} features, got {}",
                        first.features.len(),
                        p.features.len()
                    ),
                });
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::invalid(format!(
            "{} holds no points",
            path.display()
        )));
    }
    Ok(points)
}

pub fn save_points(points: &[LabeledPoint], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), points.iter())
}

/// Synthetic two-class tasks in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Two Gaussian clusters centred at (-2,-2) and (2,2).
    Blobs,
    /// Two interleaved half circles.
    Moons,
    /// Four clusters at (+-1,+-1) labelled by the sign product.
    Xor,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 3] = [
        SyntheticTask::Blobs,
        SyntheticTask::Moons,
        SyntheticTask::Xor,
    ];
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "moons" => Ok(Self::Moons),
            "xor" => Ok(Self::Xor),
            other => Err(Error::Unknown {
                kind: "task",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::Moons => "moons",
            Self::Xor => "xor",
        })
    }
}

/// Generates `n` labelled 2-D points. Point `i` belongs to class `i % 2`
/// before the final seeded shuffle, so classes are balanced within one.
/// `noise` is the standard deviation of isotropic Gaussian jitter.
pub fn gen_synthetic(
    task: SyntheticTask,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<LabeledPoint>> {
    if n < 4 {
        return Err(Error::invalid(format!("need n >= 4 points, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!(
            "noise must be finite and >= 0, got {noise}"
        )));
    }
    let mut rng = rng::seeded(seed, stream::DATA);
    let n0 = n.div_ceil(2);
    let n1 = n / 2;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let k = i / 2;
        let center = match task {
            SyntheticTask::Blobs => {
                if label == 0 {
                    [-2.0, -2.0]
                } else {
                    [2.0, 2.0]
                }
            }
            SyntheticTask::Moons => {
                let count = if label == 0 { n0 } else { n1 };
                let t = std::f64::consts::PI * k as f64 / (count - 1).max(1) as f64;
                if label == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            SyntheticTask::Xor => match (i / 2) % 2 {
                // class 0 on the (+,+)/(-,-) diagonal, class 1 on the other
                0 if label == 0 => [1.0, 1.0],
                _ if label == 0 => [-1.0, -1.0],
                0 => [1.0, -1.0],
                _ => [-1.0, 1.0],
            },
        };
        let dx: f64 = StandardNormal.sample(&mut rng);
        let dy: f64 = StandardNormal.sample(&mut rng);
        points.push(LabeledPoint {
            features: vec![center[0] + noise * dx, center[1] + noise * dy],
            label,
        });
    }
    points.shuffle(&mut rng);
    Ok(points)
}

/// Seeded shuffle-and-cut into (train, eval). The eval size is
/// `round(n * eval_fraction)` clamped to `[1, n - 1]`.
pub fn split<T: Clone>(points: &[T], eval_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 points to split, got {n}"
        )));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "eval_fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed, stream::SPLIT));
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let pick = |idx: &[usize]| idx.iter().map(|&i| points[i].clone()).collect::<Vec<_>>();
    Ok((pick(train_idx), pick(eval_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, t: Vec<f64>, s: Vec<f64>, label: Option<usize>) -> PairedLogitRecord {
        PairedLogitRecord {
            id: id.into(),
            teacher_logits: t,
            student_logits: s,
            label,
        }
    }

    #[test]
    fn loads_two_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"teacher_logits\":[1,0],\"student_logits\":[0.5,0],\"label\":0}\n\
             {\"id\":\"b\",\"teacher_logits\":[0,1],\"student_logits\":[0,2],\"label\":null,\"extra\":7}\n",
        )
        .unwrap();
        let ds = load_paired(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.records()[0].id, "a");
        assert_eq!(ds.records()[1].label, None);
    }

    #[test]
    fn mismatched_lengths_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"teacher_logits\":[1,0],\"student_logits\":[1,0],\"label\":0}\n\
             {\"id\":\"b\",\"teacher_logits\":[1,0],\"student_logits\":[1,0],\"label\":1}\n\
             {\"id\":\"c\",\"teacher_logits\":[1,0],\"student_logits\":[1,0,3],\"label\":1}\n",
        )
        .unwrap();
        match load_paired(&path) {
            Err(Error::DimensionMismatch { line: 3, id, .. }) => assert_eq!(id, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let line = "{\"id\":\"a\",\"teacher_logits\":[1,0],\"student_logits\":[1,0]}\n";
        fs::write(&path, format!("{line}{line}")).unwrap();
        assert!(matches!(
            load_paired(&path),
            Err(Error::DuplicateId { line: 2, .. })
        ));

        fs::write(&path, format!("{line}not json\n")).unwrap();
        assert!(matches!(
            load_paired(&path),
            Err(Error::Parse { line: 2, .. })
        ));

        fs::write(
            &path,
            "{\"id\":\"a\",\"teacher_logits\":[1,0],\"student_logits\":[1,0],\"label\":2}\n",
        )
        .unwrap();
        assert!(matches!(
            load_paired(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(PairedDataset::new(vec![], SplitTag::Train).is_err());
    }

    #[test]
    fn one_record_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let ds = PairedDataset::new(
            vec![rec("x", vec![0.1, 0.2], vec![0.3, 0.4], Some(1))],
            SplitTag::Eval,
        )
        .unwrap();
        save_paired(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn single_class_is_rejected() {
        let r = rec("x", vec![1.0], vec![1.0], None);
        assert!(PairedDataset::new(vec![r], SplitTag::Train).is_err());
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            c in 2usize..6,
            rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 10), prop::option::of(0usize..100)), 1..20)
        ) {
            let records: Vec<_> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (v, l))| rec(&format!("r{i}"), v[..c].to_vec(), v[5..5 + c].to_vec(), l.map(|l| l % c)))
                .collect();
            let ds = PairedDataset::new(records, SplitTag::Train).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            save_paired(&ds, &path).unwrap();
            let back = load_paired(&path).unwrap();
            prop_assert_eq!(back.len(), ds.len());
            for (a, b) in ds.records().iter().zip(back.records()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(a.label, b.label);
                for (x, y) in a.teacher_logits.iter().chain(&a.student_logits).zip(b.teacher_logits.iter().chain(&b.student_logits)) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }

        #[test]
        fn split_partitions(n in 2usize..200, frac in 0.01f64..0.99, seed: u64) {
            let items: Vec<usize> = (0..n).collect();
            let (tr, ev) = split(&items, frac, seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&ev).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
            prop_assert!(!tr.is_empty() && !ev.is_empty());
        }
    }

    #[test]
    fn split_sizes() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, ev) = split(&items, 0.2, 3).unwrap();
        assert_eq!((tr.len(), ev.len()), (8, 2));
        let (tr, ev) = split(&items, 0.01, 3).unwrap();
        assert_eq!((tr.len(), ev.len()), (9, 1));
        assert_eq!(
            split(&items, 0.2, 3).unwrap(),
            split(&items, 0.2, 3).unwrap()
        );
        assert!(split(&items[..1], 0.5, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for task in SyntheticTask::ALL {
            let a = gen_synthetic(task, 101, 0.2, 42).unwrap();
            let b = gen_synthetic(task, 101, 0.2, 42).unwrap();
            assert_eq!(a, b);
            let ones = a.iter().filter(|p| p.label == 1).count();
            assert!((ones as i64 - 50).abs() <= 1, "{task}: {ones}");
            assert!(a.iter().all(|p| p.features.len() == 2));
        }
        assert!(gen_synthetic(SyntheticTask::Blobs, 3, 0.0, 0).is_err());
        assert!("spirals".parse::<SyntheticTask>().is_err());
    }

    #[test]
    fn zero_noise_blobs_sit_on_centres() {
        let pts = gen_synthetic(SyntheticTask::Blobs, 20, 0.0, 1).unwrap();
        for p in &pts {
            let want = if p.label == 0 {
                [-2.0, -2.0]
            } else {
                [2.0, 2.0]
            };
            assert_eq!(p.features, want);
        }
    }
}
