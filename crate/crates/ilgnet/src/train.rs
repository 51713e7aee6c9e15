//! Training loop: momentum SGD with a stepped learning-rate policy, layer
//! freezing for domain adaptation, and periodic evaluation into a metrics
//! log.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ArchConfig, Network, Variant};
use crate::ops::sgd_step;
use crate::tensor::Tensor;

/// Freezing every backbone stage leaves only the three feature projections
/// and the classifier head trainable - the preset for adapting a trained
/// backbone to a new domain.
pub const BACKBONE_FREEZE: [&str; 4] = ["stem.", "inc1.", "inc2.", "inc3."];

/// Optimization and architecture settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub width_multiplier: f32,
    pub input_side: usize,
    pub base_lr: f64,
    pub gamma: f64,
    pub stepsize: u64,
    pub max_iter: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub freeze_prefixes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::IlgnetIncV1Bn,
            width_multiplier: 1.0,
            input_side: 224,
            base_lr: 1e-4,
            gamma: 0.96,
            stepsize: 100_000,
            max_iter: 475_000,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 32,
            seed: 0,
            eval_interval: 1000,
            freeze_prefixes: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Published schedule for the threshold split with no ambiguity filter.
    pub fn preset_ava1_delta0() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            stepsize: 100_000,
            gamma: 0.96,
            max_iter: 475_000,
            ..TrainConfig::default()
        }
    }

    /// Published schedule for the threshold split with `delta = 1`.
    pub fn preset_ava1_delta1() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            stepsize: 19_000,
            gamma: 0.96,
            max_iter: 760_000,
            ..TrainConfig::default()
        }
    }

    /// Published schedule for the decile split.
    pub fn preset_ava2() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            stepsize: 13_325,
            gamma: 0.96,
            max_iter: 533_000,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ava1-delta0" => Ok(Self::preset_ava1_delta0()),
            "ava1-delta1" => Ok(Self::preset_ava1_delta1()),
            "ava2" => Ok(Self::preset_ava2()),
            _ => Err(Error::config(format!(
                "unknown preset {name:?}; expected ava1-delta0, ava1-delta1 or ava2"
            ))),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            variant: self.variant,
            width_multiplier: self.width_multiplier,
            input_side: self.input_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.stepsize == 0 {
            return Err(Error::config("stepsize must be positive".to_string()));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(
                "weight_decay must be non-negative".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive".to_string()));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive".to_string()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. `preset` replays a whole preset,
    /// so later keys can override individual fields.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("{key}: {what} {value:?}"));
        match key {
            "preset" => *self = TrainConfig::preset(value)?,
            "variant" => self.variant = value.parse()?,
            "width_multiplier" => {
                self.width_multiplier = value.parse().map_err(|_| bad("bad number"))?
            }
            "input_side" => self.input_side = value.parse().map_err(|_| bad("bad number"))?,
            "base_lr" => self.base_lr = value.parse().map_err(|_| bad("bad number"))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad("bad number"))?,
            "stepsize" => self.stepsize = value.parse().map_err(|_| bad("bad number"))?,
            "max_iter" => self.max_iter = value.parse().map_err(|_| bad("bad number"))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad("bad number"))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("bad number"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("bad number"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("bad number"))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad("bad number"))?,
            "freeze_prefixes" => {
                self.freeze_prefixes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The full configuration as `key value` pairs, in `apply` order.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("variant".into(), self.variant.cli_name().into()),
            ("width_multiplier".into(), self.width_multiplier.to_string()),
            ("input_side".into(), self.input_side.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("stepsize".into(), self.stepsize.to_string()),
            ("max_iter".into(), self.max_iter.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("freeze_prefixes".into(), self.freeze_prefixes.join(",")),
        ]
    }
}

/// Parses `key = value` lines (one per line; `#` comments and blank lines
/// ignored) on top of the default configuration.
pub fn parse_config(reader: impl BufRead) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, format!("unreadable line: {e}")))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(lineno, format!("expected key = value, got {line:?}")))?;
        cfg.apply(key.trim(), value.trim())
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Learning rate at an iteration under the stepped policy:
/// `base_lr * gamma^floor(iteration / stepsize)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.gamma.powi((iteration / cfg.stepsize) as i32)
}

/// Outcome of applying freeze prefixes to a network.
#[derive(Debug, Clone)]
pub struct FreezeReport {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    /// Prefixes that matched no parameter; almost certainly a typo.
    pub unmatched_prefixes: Vec<String>,
}

/// Marks every parameter whose name starts with one of `prefixes` as frozen.
pub fn freeze(net: &mut Network, prefixes: &[String]) -> FreezeReport {
    let mut matched = vec![false; prefixes.len()];
    let mut report = FreezeReport {
        frozen: Vec::new(),
        trainable: Vec::new(),
        unmatched_prefixes: Vec::new(),
    };
    for param in net.store_mut().iter_mut() {
        let mut hit = false;
        for (i, prefix) in prefixes.iter().enumerate() {
            if param.name.starts_with(prefix.as_str()) {
                matched[i] = true;
                hit = true;
            }
        }
        if hit {
            param.frozen = true;
        }
        if param.frozen {
            report.frozen.push(param.name.clone());
        } else {
            report.trainable.push(param.name.clone());
        }
    }
    report.unmatched_prefixes = prefixes
        .iter()
        .zip(&matched)
        .filter(|&(_, &m)| !m)
        .map(|(p, _)| p.clone())
        .collect();
    report
}

/// One preprocessed training or evaluation example.
#[derive(Debug, Clone)]
pub struct Example {
    pub image_id: String,
    /// `[1, 3, side, side]`, already resized and mean-centered.
    pub input: Tensor<f32>,
    /// 0 = bad, 1 = good.
    pub label: usize,
}

/// Stacks examples into one `[n, 3, side, side]` batch plus labels.
pub fn make_batch(examples: &[&Example]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::empty("batch of zero examples".to_string()))?;
    let mut shape = first.input.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "example {} has shape {:?}, expected [1, c, h, w]",
            first.image_id,
            first.input.shape()
        )));
    }
    shape[0] = examples.len();
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        if e.input.shape() != first.input.shape() {
            return Err(Error::shape(format!(
                "example {} shape {:?} differs from {:?}",
                e.image_id,
                e.input.shape(),
                first.input.shape()
            )));
        }
        data.extend_from_slice(e.input.data());
        labels.push(e.label);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f32,
    pub accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv(&self, mut writer: impl Write) -> std::io::Result<()> {
        writeln!(writer, "iter,lr,loss,accuracy,wall_ms")?;
        for row in &self.rows {
            let accuracy = row.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(
                writer,
                "{},{},{},{},{}",
                row.iteration, row.lr, row.loss, accuracy, row.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Runs `cfg.max_iter` optimizer steps over `train_set`, reshuffling each
/// epoch with a seeded generator. A metrics row is appended every
/// `eval_interval` iterations (and at the last); if `eval_set` is given its
/// accuracy fills the row. A non-finite loss aborts with the iteration
/// number.
pub fn train(
    net: &mut Network,
    train_set: &[Example],
    eval_set: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<MetricsLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::empty("training set is empty".to_string()));
    }
    if !cfg.freeze_prefixes.is_empty() {
        freeze(net, &cfg.freeze_prefixes);
    }

    let started = Instant::now();
    let mut log = MetricsLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration: u64 = 0;

    'epochs: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (batch, labels) = make_batch(&refs)?;
            let lr = lr_at(iteration, cfg);
            let (loss, _) = net.train_batch(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "loss became non-finite ({loss}) at iteration {iteration}"
                )));
            }
            sgd_step(
                net.store_mut(),
                lr as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
            );
            iteration += 1;
            net.iteration = iteration;

            if iteration.is_multiple_of(cfg.eval_interval) || iteration == cfg.max_iter {
                let accuracy = match eval_set {
                    Some(set) => Some(evaluate(net, set)?.accuracy),
                    None => None,
                };
                log.rows.push(MetricsRow {
                    iteration,
                    lr,
                    loss,
                    accuracy,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
            }
            if iteration == cfg.max_iter {
                break 'epochs;
            }
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion[true_label][predicted_label]`.
    pub confusion: [[usize; 2]; 2],
}

const EVAL_BATCH: usize = 16;

/// Accuracy and confusion matrix over a labeled set, in inference mode.
/// Prediction is good only when `p(good) > 0.5`; an exact tie counts as bad.
pub fn evaluate(net: &Network, set: &[Example]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::empty("evaluation set is empty".to_string()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for chunk in set.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, labels) = make_batch(&refs)?;
        let probs = net.classify(&batch)?;
        for (row, &label) in labels.iter().enumerate() {
            let p_good = probs.data()[row * 2 + 1];
            let predicted = usize::from(p_good > 0.5);
            confusion[label][predicted] += 1;
        }
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(EvalReport {
        examples: set.len(),
        correct,
        accuracy: correct as f64 / set.len() as f64,
        confusion,
    })
}
