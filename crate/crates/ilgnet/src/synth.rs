//! Synthetic dataset generator for end-to-end exercises: small PPM images
//! whose class is visually trivial (bright vs. dark, or warm vs. cool) plus
//! a matching vote-histogram metadata file, so the whole
//! split/train/evaluate pipeline can run without any real photographs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ava::{write_metadata, RatingRecord};
use crate::error::{Error, Result};
use crate::image::encode_ppm;
use crate::tensor::Tensor;

pub const SYNTH_SIDE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthRule {
    /// Good images are bright, bad images are dark.
    Brightness,
    /// Good images are warm (red over blue), bad images are cool; overall
    /// luminance is matched so brightness alone gives nothing away.
    Hue,
}

impl SynthRule {
    pub fn name(self) -> &'static str {
        match self {
            SynthRule::Brightness => "brightness",
            SynthRule::Hue => "hue",
        }
    }
}

impl std::str::FromStr for SynthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(SynthRule::Brightness),
            "hue" => Ok(SynthRule::Hue),
            _ => Err(Error::usage(format!(
                "unknown rule {s:?}; expected brightness or hue"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub rule: SynthRule,
    pub count: usize,
    pub good: usize,
    pub bad: usize,
    pub dir: PathBuf,
    pub metadata_path: PathBuf,
}

/// Writes `count` images (`synth_0000.ppm`, ...) and `metadata.csv` into
/// `dir`. Even indices are good, odd are bad; good images carry votes on
/// scores 6-8, bad on 2-4, so the mean-score labels match the pixels.
/// Identical `(count, seed, rule)` runs are byte-identical.
pub fn synth_dataset(dir: &Path, count: usize, seed: u64, rule: SynthRule) -> Result<SynthSummary> {
    if count < 2 || !count.is_multiple_of(2) {
        return Err(Error::invalid_arg(format!(
            "image count {count} must be an even number of at least 2"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let good = i % 2 == 0;
        let image_id = format!("synth_{i:04}");
        let image = render(&mut rng, rule, good);
        let path = dir.join(format!("{image_id}.ppm"));
        fs::write(&path, encode_ppm(&image)?).map_err(|e| Error::io(&path, e))?;
        records.push(RatingRecord {
            image_id,
            counts: vote_histogram(&mut rng, good),
        });
    }

    let metadata_path = dir.join("metadata.csv");
    let mut buf = Vec::new();
    write_metadata(&records, &mut buf).expect("writing to memory cannot fail");
    fs::write(&metadata_path, buf).map_err(|e| Error::io(&metadata_path, e))?;

    Ok(SynthSummary {
        rule,
        count,
        good: count.div_ceil(2),
        bad: count / 2,
        dir: dir.to_path_buf(),
        metadata_path,
    })
}

fn render(rng: &mut ChaCha8Rng, rule: SynthRule, good: bool) -> Tensor<f32> {
    let area = SYNTH_SIDE * SYNTH_SIDE;
    let bases: [f32; 3] = match rule {
        SynthRule::Brightness => {
            let base = if good {
                rng.random_range(150.0..230.0)
            } else {
                rng.random_range(25.0..105.0)
            };
            [base; 3]
        }
        SynthRule::Hue => {
            let warm = rng.random_range(160.0..220.0);
            let mid = rng.random_range(100.0..140.0);
            let cold = rng.random_range(40.0..80.0);
            if good {
                [warm, mid, cold]
            } else {
                [cold, mid, warm]
            }
        }
    };
    let mut data = vec![0.0f32; 3 * area];
    for ch in 0..3 {
        for v in &mut data[ch * area..(ch + 1) * area] {
            *v = (bases[ch] + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0);
        }
    }
    Tensor::new(vec![1, 3, SYNTH_SIDE, SYNTH_SIDE], data).expect("fixed shape")
}

fn vote_histogram(rng: &mut ChaCha8Rng, good: bool) -> [u32; 10] {
    let scores = if good { 6..=8 } else { 2..=4 };
    let total: u32 = rng.random_range(78..=549);
    let mut counts = [0u32; 10];
    for _ in 0..total {
        let score: u32 = rng.random_range(scores.clone());
        counts[(score - 1) as usize] += 1;
    }
    counts
}
