//! Wall-clock timing of plan ops and whole plans.
//!
//! Measurements follow a fixed protocol: inputs are generated before the
//! timed region, a calibration pass sizes an inner repetition loop so each
//! sample spans enough time for the clock to resolve, warmup passes are
//! discarded, and the reported statistics are nearest-rank percentiles over
//! the per-call times of the remaining passes. The executor runs serially
//! unless the caller opts into parallel groups.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::analyze::plan_feature_shapes;
use crate::error::{Error, Result};
use crate::exec::{run_plan_with, ExecOptions};
use crate::model::FeatureShape;
use crate::plan::{Plan, PlanOp};
use crate::tensor::Tensor;

/// Target span of one timed sample. Samples this long make timer
/// granularity and interrupt noise small relative to the reading.
const TARGET_SAMPLE_US: f64 = 100.0;

/// Minimum span a calibration measurement must reach before it is trusted
/// to estimate the per-call time.
const CALIBRATION_FLOOR_US: f64 = 10.0;

/// Measurement protocol. `reps` samples are kept after `warmup` discarded
/// passes; each sample times the same number of back-to-back calls.
#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    pub exec: ExecOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { reps: 30, warmup: 5, exec: ExecOptions::default() }
    }
}

/// Per-call wall-clock statistics of one benched subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingStats {
    /// Samples kept.
    pub reps: usize,
    /// Calls per sample, sized by calibration.
    pub inner: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

impl TimingStats {
    /// The (median, p10, p90) triple report rows carry.
    pub fn row(&self) -> (f64, f64, f64) {
        (self.median_us, self.p10_us, self.p90_us)
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted_us: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted_us.is_empty());
    let rank = (q / 100.0 * sorted_us.len() as f64).ceil() as usize;
    sorted_us[rank.max(1) - 1]
}

/// Standard-normal input batch, drawn in f64 and cast so the batch matches
/// the equivalence checker's input distribution.
fn bench_input(shape: [usize; 3], batch: usize, seed: u64) -> Tensor<f32> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..batch * c * h * w)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    Tensor::from_vec(&[batch, c, h, w], data).expect("shape matches draw count")
}

fn timed_calls(plan: &Plan, x: &Tensor<f32>, options: ExecOptions, calls: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..calls {
        let out = run_plan_with(plan, black_box(x), options)?;
        black_box(&out);
    }
    Ok(start.elapsed().as_secs_f64() * 1e6)
}

/// Times `plan` end to end on a pre-generated standard-normal batch.
pub fn bench_plan(
    plan: &Plan,
    batch: usize,
    options: BenchOptions,
    seed: u64,
) -> Result<TimingStats> {
    if options.reps == 0 {
        return Err(Error::Config("bench needs at least one rep".into()));
    }
    if batch == 0 {
        return Err(Error::Config("bench needs a nonempty batch".into()));
    }
    let x = bench_input(plan.input, batch, seed);

    // Calibration: grow the measured span until the clock resolves it, then
    // size the inner loop so one sample spans the target. The first call
    // also surfaces any execution error before timing begins.
    let mut calls = 1usize;
    let mut span_us = timed_calls(plan, &x, options.exec, calls)?;
    while span_us < CALIBRATION_FLOOR_US {
        calls *= 2;
        span_us = timed_calls(plan, &x, options.exec, calls)?;
    }
    let per_call = span_us / calls as f64;
    let inner = (TARGET_SAMPLE_US / per_call).ceil().max(1.0) as usize;

    for _ in 0..options.warmup {
        timed_calls(plan, &x, options.exec, inner)?;
    }
    let mut samples_us = Vec::with_capacity(options.reps);
    for _ in 0..options.reps {
        samples_us.push(timed_calls(plan, &x, options.exec, inner)? / inner as f64);
    }
    samples_us.sort_by(|a, b| a.total_cmp(b));
    Ok(TimingStats {
        reps: options.reps,
        inner,
        median_us: percentile(&samples_us, 50.0),
        p10_us: percentile(&samples_us, 10.0),
        p90_us: percentile(&samples_us, 90.0),
    })
}

/// Times a single op on inputs of shape `input` (spatial `[c, h, w]`; flat
/// features bench as `[f, 1, 1]`).
pub fn bench_op(
    op: &PlanOp,
    input: [usize; 3],
    batch: usize,
    options: BenchOptions,
    seed: u64,
) -> Result<TimingStats> {
    let plan = Plan {
        name: format!("bench-{}", op.kind()),
        input,
        classes: 1,
        ops: vec![op.clone()],
    };
    bench_plan(&plan, batch, options, seed)
}

/// Times every op of `plan` in isolation, each on the input shape it sees
/// inside the plan. Row order matches `plan.ops`.
pub fn bench_plan_ops(
    plan: &Plan,
    batch: usize,
    options: BenchOptions,
    seed: u64,
) -> Result<Vec<TimingStats>> {
    let shapes = plan_feature_shapes(plan)?;
    plan.ops
        .iter()
        .zip(&shapes)
        .map(|(op, shape)| {
            let input = match *shape {
                FeatureShape::Spatial { channels, height, width } => [channels, height, width],
                FeatureShape::Flat { features } => [features, 1, 1],
            };
            bench_op(op, input, batch, options, seed)
        })
        .collect()
}
