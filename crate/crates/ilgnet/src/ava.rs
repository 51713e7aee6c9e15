//! Vote-histogram metadata and the two dataset split protocols.
//!
//! Records carry ten score-bucket counts (scores 1 through 10). Protocol 1
//! labels by mean-score threshold, draws a fixed-size random test set first,
//! and then optionally drops ambiguous examples (mean within `delta` of the
//! threshold) from the training side only. Protocol 2 ranks everything by
//! mean score and keeps the top and bottom deciles as the two classes,
//! splitting that pool into equal random halves.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One image's vote histogram: `counts[i]` voters gave score `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub image_id: String,
    pub counts: [u32; 10],
}

impl RatingRecord {
    pub fn total_votes(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Vote-weighted mean score in `[1, 10]`; integer sums, one division.
    pub fn mean_score(&self) -> Result<f64> {
        let votes = self.total_votes();
        if votes == 0 {
            return Err(Error::invalid_arg(format!(
                "record {:?} has zero votes",
                self.image_id
            )));
        }
        let weighted: u64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u64 + 1) * c as u64)
            .sum();
        Ok(weighted as f64 / votes as f64)
    }
}

/// Free-function form of [`RatingRecord::mean_score`].
pub fn mean_score(record: &RatingRecord) -> Result<f64> {
    record.mean_score()
}

/// Parses `image_id,c1,...,c10` lines (no header). Every malformed line is
/// reported with its 1-based line number.
pub fn parse_metadata(reader: impl BufRead) -> Result<Vec<RatingRecord>> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, format!("unreadable line: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::parse(
                lineno,
                format!("expected 11 comma-separated fields, found {}", fields.len()),
            ));
        }
        let image_id = fields[0].trim();
        if image_id.is_empty() {
            return Err(Error::parse(lineno, "empty image id".to_string()));
        }
        if !seen.insert(image_id.to_string()) {
            return Err(Error::parse(
                lineno,
                format!("duplicate image id {image_id:?}"),
            ));
        }
        let mut counts = [0u32; 10];
        for (slot, field) in counts.iter_mut().zip(&fields[1..]) {
            *slot = field.trim().parse().map_err(|_| {
                Error::parse(
                    lineno,
                    format!("vote count {field:?} is not a non-negative integer"),
                )
            })?;
        }
        let record = RatingRecord {
            image_id: image_id.to_string(),
            counts,
        };
        if record.total_votes() == 0 {
            return Err(Error::parse(
                lineno,
                format!("record {image_id:?} has zero votes"),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records in the exact format [`parse_metadata`] reads.
pub fn write_metadata(records: &[RatingRecord], mut writer: impl Write) -> std::io::Result<()> {
    for r in records {
        let counts: Vec<String> = r.counts.iter().map(|c| c.to_string()).collect();
        writeln!(writer, "{},{}", r.image_id, counts.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Bad = 0,
    Good = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Bad),
            1 => Ok(Label::Good),
            _ => Err(Error::invalid_arg(format!("label index {i} is not 0 or 1"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Bad => "bad",
            Label::Good => "good",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            _ => Err(Error::invalid_arg(format!("unknown partition {s:?}"))),
        }
    }
}

/// One image with its resolved class, mean score, and assigned partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image_id: String,
    pub label: Label,
    pub partition: Partition,
    pub mean_score: f64,
}

/// A finished split; both sides are sorted by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Split {
    pub fn count(&self, partition: Partition, label: Label) -> usize {
        let side = match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        };
        side.iter().filter(|e| e.label == label).count()
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(self.test.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Ava1,
    Ava2,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ava1 => "ava1",
            Protocol::Ava2 => "ava2",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ava1" => Ok(Protocol::Ava1),
            "ava2" => Ok(Protocol::Ava2),
            _ => Err(Error::usage(format!(
                "unknown protocol {s:?}; expected ava1 or ava2"
            ))),
        }
    }
}

/// Everything needed to reproduce a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub protocol: Protocol,
    /// Threshold-protocol only: training examples with `|mean - 5| <= delta`
    /// are dropped as ambiguous.
    pub delta: f64,
    pub seed: u64,
    /// Threshold-protocol only: size of the random test set.
    pub test_count: usize,
}

pub fn build_split(records: &[RatingRecord], spec: &SplitSpec) -> Result<Split> {
    match spec.protocol {
        Protocol::Ava1 => ava1_split(records, spec.delta, spec.seed, spec.test_count),
        Protocol::Ava2 => ava2_split(records, spec.seed),
    }
}

fn label_by_threshold(mean: f64) -> Label {
    // Exactly 5 counts as bad: the threshold is strict.
    if mean > 5.0 {
        Label::Good
    } else {
        Label::Bad
    }
}

/// Threshold protocol. The test set is drawn uniformly at random (seeded)
/// from all records *before* the ambiguity filter, so the same seed yields
/// the same test set for every `delta`.
pub fn ava1_split(
    records: &[RatingRecord],
    delta: f64,
    seed: u64,
    test_count: usize,
) -> Result<Split> {
    if delta < 0.0 {
        return Err(Error::invalid_arg(format!(
            "delta {delta} must be non-negative"
        )));
    }
    if records.is_empty() {
        return Err(Error::empty("no records to split".to_string()));
    }
    if test_count == 0 || test_count >= records.len() {
        return Err(Error::invalid_arg(format!(
            "test count {test_count} must be in [1, {})",
            records.len()
        )));
    }
    let means: Vec<f64> = records
        .iter()
        .map(|r| r.mean_score())
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_test = vec![false; records.len()];
    for &idx in &order[..test_count] {
        is_test[idx] = true;
    }

    let mut split = Split::default();
    for (idx, record) in records.iter().enumerate() {
        let example = LabeledExample {
            image_id: record.image_id.clone(),
            label: label_by_threshold(means[idx]),
            partition: if is_test[idx] {
                Partition::Test
            } else {
                Partition::Train
            },
            mean_score: means[idx],
        };
        if is_test[idx] {
            split.test.push(example);
        } else if (means[idx] - 5.0).abs() > delta {
            split.train.push(example);
        }
        // Ambiguous training-side records are dropped entirely.
    }
    if split.train.is_empty() {
        return Err(Error::empty(format!(
            "delta {delta} filtered out every training example"
        )));
    }
    sort_split(&mut split);
    Ok(split)
}

/// Decile protocol: rank by mean score (ties broken by image id), keep the
/// top tenth as good and the bottom tenth as bad, and split that pool into
/// equal random halves.
pub fn ava2_split(records: &[RatingRecord], seed: u64) -> Result<Split> {
    let n = records.len();
    if n < 20 {
        return Err(Error::invalid_arg(format!(
            "decile protocol needs at least 20 records, got {n}"
        )));
    }
    let means: Vec<f64> = records
        .iter()
        .map(|r| r.mean_score())
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        means[b]
            .partial_cmp(&means[a])
            .expect("means are finite")
            .then_with(|| records[a].image_id.cmp(&records[b].image_id))
    });
    let k = n / 10;
    let mut pool: Vec<(usize, Label)> = Vec::with_capacity(2 * k);
    pool.extend(order[..k].iter().map(|&i| (i, Label::Good)));
    pool.extend(order[n - k..].iter().map(|&i| (i, Label::Bad)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let mut split = Split::default();
    for (slot, &(idx, label)) in pool.iter().enumerate() {
        let partition = if slot < k {
            Partition::Train
        } else {
            Partition::Test
        };
        let example = LabeledExample {
            image_id: records[idx].image_id.clone(),
            label,
            partition,
            mean_score: means[idx],
        };
        match partition {
            Partition::Train => split.train.push(example),
            Partition::Test => split.test.push(example),
        }
    }
    sort_split(&mut split);
    Ok(split)
}

fn sort_split(split: &mut Split) {
    split.train.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    split.test.sort_by(|a, b| a.image_id.cmp(&b.image_id));
}

/// Writes `image_id,label,partition,mean_score` rows, mean to six decimals.
pub fn write_split_csv(split: &Split, mut writer: impl Write) -> std::io::Result<()> {
    for e in split.all() {
        writeln!(
            writer,
            "{},{},{},{:.6}",
            e.image_id,
            e.label.index(),
            e.partition.name(),
            e.mean_score
        )?;
    }
    Ok(())
}

/// Reads rows written by [`write_split_csv`].
pub fn read_split_csv(reader: impl BufRead) -> Result<Vec<LabeledExample>> {
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, format!("unreadable line: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                lineno,
                format!("expected 4 comma-separated fields, found {}", fields.len()),
            ));
        }
        let label_idx: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad label {:?}", fields[1])))?;
        let label = Label::from_index(label_idx)
            .map_err(|_| Error::parse(lineno, format!("bad label {:?}", fields[1])))?;
        let partition: Partition = fields[2]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad partition {:?}", fields[2])))?;
        let mean_score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad mean score {:?}", fields[3])))?;
        examples.push(LabeledExample {
            image_id: fields[0].to_string(),
            label,
            partition,
            mean_score,
        });
    }
    Ok(examples)
}
