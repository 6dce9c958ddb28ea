//! Minibatch SGD training loop with momentum, weight decay, and learning
//! rate schedules. Single-threaded and deterministic: equal seeds and equal
//! data give bitwise-equal loss curves.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flgc::HardAssignment;
use crate::model::{stream_seed, LayerState, Model, Tape};
use crate::ops;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` iterations.
    Step { factor: f64, every: usize },
    /// Half-cosine decay from the base rate to 0 over `total` iterations.
    Cosine { total: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, iter: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { factor, every } => {
                assert!(every > 0, "step schedule needs a positive interval");
                assert!(factor >= 0.0, "step factor cannot be negative");
                base * factor.powi((iter / every) as i32)
            }
            LrSchedule::Cosine { total } => {
                assert!(total > 0, "cosine schedule needs a positive horizon");
                let t = (iter as f64 / total as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    /// Seeds the batch-order stream (independent of parameter streams).
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Base rate for the assignment scores; the shared rate applies when
    /// absent.
    #[serde(default)]
    pub meta_lr: Option<f64>,
    /// Schedule for the assignment scores; the shared schedule applies when
    /// absent. A step schedule with factor 0 freezes assignments after the
    /// step point.
    #[serde(default)]
    pub meta_schedule: Option<LrSchedule>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_batch() -> usize {
    80
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_seed() -> u64 {
    1
}

impl TrainConfig {
    pub fn new(iterations: usize, lr: f64) -> Self {
        TrainConfig {
            iterations,
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            schedule: default_schedule(),
            seed: default_seed(),
            meta_lr: None,
            meta_schedule: None,
        }
    }

    /// Learning rate of the assignment scores at `iter`.
    pub fn meta_lr_at(&self, iter: usize) -> f64 {
        let base = self.meta_lr.unwrap_or(self.lr);
        self.meta_schedule.as_ref().unwrap_or(&self.schedule).lr_at(base, iter)
    }
}

/// One training iteration's observable state. `group_sizes` holds, per
/// grouped layer in layer order, the per-group (channels, filters) pair
/// actually used by that forward pass. `assign_changes` counts channel and
/// filter rows whose group differs from the previous iteration (0 at the
/// first).
#[derive(Serialize, Clone, Debug)]
pub struct IterMetrics {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub batch_acc: f64,
    pub group_sizes: Vec<Vec<(usize, usize)>>,
    pub assign_changes: usize,
}

/// Momentum buffers, one per parameter tensor in visit order.
struct SgdState {
    velocities: Vec<Vec<f32>>,
}

impl SgdState {
    fn new() -> Self {
        SgdState { velocities: Vec::new() }
    }

    /// v = momentum * v + grad + weight_decay * value; value -= lr * v.
    /// Weight decay skips tensors marked exempt (assignment scores,
    /// batchnorm scale/shift); assignment scores step with `meta_lr`.
    fn step(&mut self, model: &mut Model<f32>, lr: f64, meta_lr: f64, momentum: f64, weight_decay: f64) {
        let init = self.velocities.is_empty();
        let vs = &mut self.velocities;
        let mut idx = 0;
        let lr = lr as f32;
        let meta_lr = meta_lr as f32;
        let momentum = momentum as f32;
        let weight_decay = weight_decay as f32;
        model.visit_params(|p| {
            if init {
                vs.push(vec![0.0; p.value.len()]);
            }
            let v = &mut vs[idx];
            debug_assert_eq!(v.len(), p.value.len());
            let wd = if p.decay { weight_decay } else { 0.0 };
            let rate = if p.meta { meta_lr } else { lr };
            for ((vi, val), &g) in v.iter_mut().zip(p.value.iter_mut()).zip(p.grad) {
                *vi = momentum * *vi + g + wd * *val;
                *val -= rate * *vi;
            }
            idx += 1;
        });
        model.step += 1;
    }
}

fn collect_assignments(tape: &Tape<f32>) -> Vec<HardAssignment> {
    tape.states
        .iter()
        .filter_map(|s| match s {
            LayerState::Flgc(cache) => Some(cache.hard.clone()),
            _ => None,
        })
        .collect()
}

fn assignment_delta(prev: &[HardAssignment], cur: &[HardAssignment]) -> usize {
    prev.iter()
        .zip(cur)
        .map(|(a, b)| {
            a.channel_group.iter().zip(&b.channel_group).filter(|(x, y)| x != y).count()
                + a.filter_group.iter().zip(&b.filter_group).filter(|(x, y)| x != y).count()
        })
        .sum()
}

/// Runs `cfg.iterations` SGD steps over `data`, calling `on_iter` after each.
/// Batches walk a reshuffled epoch order (partial tail batches are dropped);
/// a non-finite loss aborts with a divergence error.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterMetrics),
) -> Result<Vec<IterMetrics>> {
    if data.classes != model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.classes, model.config.classes
        )));
    }
    if data.sample_shape() != model.config.input {
        return Err(Error::Config(format!(
            "dataset samples {:?}, model input {:?}",
            data.sample_shape(),
            model.config.input
        )));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} for dataset of {}",
            cfg.batch_size,
            data.len()
        )));
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let mut sgd = SgdState::new();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut prev_assign: Option<Vec<HardAssignment>> = None;

    for iter in 0..cfg.iterations {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let indices = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let (images, labels) = data.batch(indices)?;
        let (logits, tape) = model.forward_train(&images)?;
        let (loss, dlogits) = match ops::cross_entropy(&logits, &labels) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged(iter)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged(iter));
        }
        model.backward(&tape, &dlogits)?;

        let lr = cfg.schedule.lr_at(cfg.lr, iter);
        sgd.step(model, lr, cfg.meta_lr_at(iter), cfg.momentum, cfg.weight_decay);

        let assignments = collect_assignments(&tape);
        let assign_changes = match &prev_assign {
            Some(prev) => assignment_delta(prev, &assignments),
            None => 0,
        };
        let group_sizes = assignments
            .iter()
            .map(|a| a.group_sizes().iter().map(|s| (s.channels, s.filters)).collect())
            .collect();
        prev_assign = Some(assignments);

        let correct = ops::accuracy_count(&logits, &labels)?;
        let m = IterMetrics {
            iter,
            loss: loss as f64,
            lr,
            batch_acc: correct as f64 / labels.len() as f64,
            group_sizes,
            assign_changes,
        };
        on_iter(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Accuracy of the frozen model over the whole dataset, evaluated in batches
/// (the tail batch may be smaller).
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("eval batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = data.batch(&indices)?;
        let logits = model.forward_eval(&images)?;
        correct += ops::accuracy_count(&logits, &labels)?;
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}
