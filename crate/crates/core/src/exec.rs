//! Plan execution: runs compiled plans over batched activations.
//!
//! Every kernel fixes its accumulation order, so a plan produces
//! bit-identical outputs across runs, across batch splits, and across the
//! serial and parallel-groups paths. The grouped kernel accumulates each
//! output row bias-first over ascending packed columns, the same chain as
//! the dense 1x1 convolution, so a single-group plan reproduces the dense
//! result bitwise. An instrumented mode literally counts one increment per
//! multiply-add.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{self, MaddCounter, NoCount, Tally};
use crate::plan::{GroupedOp, Permutation, Plan, PlanOp};
use crate::tensor::Tensor;

/// Largest absolute logit difference a compiled plan may show against the
/// model it was compiled from. Folding batchnorm into weights reassociates
/// each channel's arithmetic, so equality is approximate.
pub const EQUIV_TOL: f64 = 1e-5;

/// Execution switches. `parallel_groups` fans each grouped layer's blocks
/// out over the rayon pool; blocks own disjoint output rows, so the result
/// stays bitwise identical to the serial path. Off by default so wall-clock
/// measurements reflect single-threaded cost.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    pub parallel_groups: bool,
}

/// Runs a plan serially over `[batch, channels, h, w]` input.
pub fn run_plan(plan: &Plan, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    run_plan_with(plan, x, ExecOptions::default())
}

/// Runs a plan with explicit execution switches.
pub fn run_plan_with(plan: &Plan, x: &Tensor<f32>, options: ExecOptions) -> Result<Tensor<f32>> {
    Ok(run_impl(plan, x, options, false)?.0)
}

/// Serial run that also returns the literal multiply-add count, one per
/// innermost fused multiply-add actually executed.
pub fn run_plan_counting(plan: &Plan, x: &Tensor<f32>) -> Result<(Tensor<f32>, u64)> {
    run_impl(plan, x, ExecOptions::default(), true)
}

fn run_impl(
    plan: &Plan,
    x: &Tensor<f32>,
    options: ExecOptions,
    counting: bool,
) -> Result<(Tensor<f32>, u64)> {
    let (_, c, h, w) = x.dims4()?;
    let [ec, eh, ew] = plan.input;
    if (c, h, w) != (ec, eh, ew) {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} for plan expecting [{ec}, {eh}, {ew}] per sample",
            x.shape()
        )));
    }
    let mut madds = 0u64;
    let mut cur = x.clone();
    for (i, op) in plan.ops.iter().enumerate() {
        cur = match op {
            PlanOp::Conv { w, b, stride, pad } => {
                if counting {
                    let (out, n) = ops::conv2d_counted(&cur, w, Some(b), *stride, *pad)?;
                    madds += n;
                    out
                } else {
                    ops::conv2d(&cur, w, Some(b), *stride, *pad)?
                }
            }
            PlanOp::DwConv { w, b, stride, pad } => {
                if counting {
                    let (out, n) =
                        ops::depthwise_conv2d_counted(&cur, w, Some(b), *stride, *pad)?;
                    madds += n;
                    out
                } else {
                    ops::depthwise_conv2d(&cur, w, Some(b), *stride, *pad)?
                }
            }
            PlanOp::Grouped(g) => {
                if counting {
                    let mut tally = Tally::default();
                    let out = run_grouped(g, &cur, &mut tally)?;
                    madds += tally.0;
                    out
                } else if options.parallel_groups {
                    run_grouped_parallel(g, &cur)?
                } else {
                    run_grouped(g, &cur, &mut NoCount)?
                }
            }
            PlanOp::Gather { index } => gather_channels(&cur, index)?,
            PlanOp::Relu => ops::relu(&cur),
            PlanOp::AvgPool { window } => match window {
                Some(k) => ops::avg_pool(&cur, *k)?,
                None => ops::global_avg_pool(&cur)?,
            },
            PlanOp::Fc { w, b } => {
                let x2 = if cur.shape().len() == 2 {
                    cur
                } else {
                    let (bn, cc, hh, ww) = cur.dims4()?;
                    cur.reshaped(&[bn, cc * hh * ww])?
                };
                let wt = w.transposed2()?;
                let mut out = if counting {
                    let (out, n) = ops::matmul_counted(&x2, &wt)?;
                    madds += n;
                    out
                } else {
                    ops::matmul(&x2, &wt)?
                };
                let (rows, o) = out.dims2()?;
                let od = out.data_mut();
                for bi in 0..rows {
                    for oi in 0..o {
                        od[bi * o + oi] += b[oi];
                    }
                }
                out
            }
        };
        cur.ensure_finite(&format!("op {i} output"))?;
    }
    Ok((cur, madds))
}

fn check_grouped_input(g: &GroupedOp, x: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != g.merged.len() {
        return Err(Error::ShapeMismatch(format!(
            "grouped layer reads {} channels, activation has {c}",
            g.merged.len()
        )));
    }
    Ok((b, g.bias.len(), h * w))
}

/// One grouped 1x1 layer. Each output row starts at its bias and accumulates
/// over its block's packed columns in ascending order; packed column `j`
/// reads input channel `merged[in_offset + j]`. Rows of groups with no input
/// channels stay at their bias.
fn run_grouped<C: MaddCounter>(
    g: &GroupedOp,
    x: &Tensor<f32>,
    counter: &mut C,
) -> Result<Tensor<f32>> {
    let (b, n, hw) = check_grouped_input(g, x)?;
    let c = g.merged.len();
    let mut out = Tensor::zeros(&[b, n, x.shape()[2], x.shape()[3]]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        let obase = bi * n * hw;
        for (ni, &bv) in g.bias.iter().enumerate() {
            od[obase + ni * hw..obase + (ni + 1) * hw].fill(bv);
        }
        for blk in &g.blocks {
            let wd = blk.w.data();
            for rr in 0..blk.out_len {
                let orow =
                    &mut od[obase + (blk.out_offset + rr) * hw..][..hw];
                for k in 0..blk.in_len {
                    let wv = wd[rr * blk.in_len + k];
                    let src = g.merged.index()[blk.in_offset + k];
                    let xrow = &xd[(bi * c + src) * hw..][..hw];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o = *o + wv * xv;
                        counter.madd();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The same grouped kernel with each (batch, block) pair run as one rayon
/// task. Blocks tile the output rows contiguously, so every task owns a
/// disjoint output slice and the arithmetic per element is unchanged.
fn run_grouped_parallel(g: &GroupedOp, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    use rayon::prelude::*;

    let (b, n, hw) = check_grouped_input(g, x)?;
    let c = g.merged.len();
    let mut out = Tensor::zeros(&[b, n, x.shape()[2], x.shape()[3]]);
    let xd = x.data();

    let mut tasks = Vec::with_capacity(b * g.blocks.len());
    let mut rest = out.data_mut();
    for bi in 0..b {
        for blk in &g.blocks {
            let (rows, tail) = rest.split_at_mut(blk.out_len * hw);
            tasks.push((bi, blk, rows));
            rest = tail;
        }
    }
    debug_assert!(rest.is_empty(), "blocks tile every output row");

    tasks.into_par_iter().for_each(|(bi, blk, rows)| {
        let wd = blk.w.data();
        for rr in 0..blk.out_len {
            let orow = &mut rows[rr * hw..(rr + 1) * hw];
            orow.fill(g.bias[blk.out_offset + rr]);
            for k in 0..blk.in_len {
                let wv = wd[rr * blk.in_len + k];
                let src = g.merged.index()[blk.in_offset + k];
                let xrow = &xd[(bi * c + src) * hw..][..hw];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o = *o + wv * xv;
                }
            }
        }
    });
    Ok(out)
}

/// Channel reorder of the live activation: output channel `i` is input
/// channel `index[i]`.
fn gather_channels(x: &Tensor<f32>, index: &Permutation) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    if index.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "gather of length {} over {c} channels",
            index.len()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for (i, &src) in index.index().iter().enumerate() {
            od[(bi * c + i) * hw..(bi * c + i + 1) * hw]
                .copy_from_slice(&xd[(bi * c + src) * hw..(bi * c + src + 1) * hw]);
        }
    }
    Ok(out)
}

/// Outcome of replaying random inputs through a plan and the model it was
/// compiled from.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// True when `max_abs_diff <= EQUIV_TOL`.
    pub pass: bool,
}

/// Feeds `trials` standard-normal inputs through both the plan and the
/// model's evaluation forward pass and compares logits.
pub fn equivalence_check(
    plan: &Plan,
    model: &Model<f32>,
    trials: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::Config("equivalence check needs at least one trial".into()));
    }
    if plan.input != model.config.input || plan.classes != model.config.classes {
        return Err(Error::ShapeMismatch(format!(
            "plan serves input {:?} -> {} classes, model {:?} -> {}",
            plan.input, plan.classes, model.config.input, model.config.classes
        )));
    }
    let [c, h, w] = plan.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::from_fn(&[1, c, h, w], |_| dist.sample(&mut rng) as f32);
        let got = run_plan(plan, &x)?;
        let want = model.forward_eval(&x)?;
        if got.shape() != want.shape() {
            return Err(Error::ShapeMismatch(format!(
                "plan emits {:?}, model {:?}",
                got.shape(),
                want.shape()
            )));
        }
        for (&g, &m) in got.data().iter().zip(want.data()) {
            let abs = (g as f64 - m as f64).abs();
            max_abs = max_abs.max(abs);
            let scale = (g as f64).abs().max((m as f64).abs());
            if scale > 0.0 {
                max_rel = max_rel.max(abs / scale);
            }
        }
    }
    Ok(EquivalenceReport { trials, max_abs_diff: max_abs, max_rel_diff: max_rel, pass: max_abs <= EQUIV_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flgc::GroupingMode;
    use crate::model::{mini_dsc, LayerConfig, Model, ModelConfig};
    use crate::plan::{compile, GroupBlock, GroupSpan};

    fn toy_two_group_plan() -> Plan {
        // Connectivity [[1,0,0],[0,1,1]]: filter 0 with channel 0 in one
        // group, filter 1 with channels 1 and 2 in the other.
        let grouped = GroupedOp {
            bias: vec![0.0, 0.0],
            merged: Permutation::identity(3),
            channel_spans: vec![GroupSpan { offset: 0, len: 1 }, GroupSpan { offset: 1, len: 2 }],
            filter_spans: vec![GroupSpan { offset: 0, len: 1 }, GroupSpan { offset: 1, len: 1 }],
            blocks: vec![
                GroupBlock {
                    out_offset: 0,
                    out_len: 1,
                    in_offset: 0,
                    in_len: 1,
                    w: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
                },
                GroupBlock {
                    out_offset: 1,
                    out_len: 1,
                    in_offset: 1,
                    in_len: 2,
                    w: Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
                },
            ],
        };
        Plan {
            name: "toy".into(),
            input: [3, 1, 1],
            classes: 2,
            ops: vec![PlanOp::Grouped(grouped)],
        }
    }

    #[test]
    fn toy_two_group_plan_sums_within_groups() {
        let plan = toy_two_group_plan();
        let x = Tensor::filled(&[1, 3, 1, 1], 1.0f32);
        let out = run_plan(&plan, &x).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert_eq!(out.data(), &[1.0, 2.0]);

        let (_, madds) = run_plan_counting(&plan, &x).unwrap();
        assert_eq!(madds, 3, "one active connection in group 0, two in group 1");
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f64, 1.0).unwrap();
        Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
    }

    #[test]
    fn single_group_plans_match_the_dense_convolution_bitwise() {
        let model = Model::<f32>::build(&mini_dsc(1, GroupingMode::Learned, 9)).unwrap();
        let dense = model.to_masked_dense().unwrap();
        let grouped_plan = compile(&model).unwrap();
        let dense_plan = compile(&dense).unwrap();
        assert!(grouped_plan.ops.iter().any(|o| matches!(o, PlanOp::Grouped(_))));
        assert!(dense_plan.ops.iter().all(|o| !matches!(o, PlanOp::Grouped(_))));

        let x = random_input(&[3, 1, 28, 28], 17);
        let a = run_plan(&grouped_plan, &x).unwrap();
        let b = run_plan(&dense_plan, &x).unwrap();
        assert_eq!(a, b, "one full-width block accumulates exactly like the dense kernel");
    }

    #[test]
    fn batch_runs_equal_per_sample_runs_bitwise() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 5)).unwrap();
        let plan = compile(&model).unwrap();
        let x = random_input(&[2, 1, 28, 28], 23);
        let both = run_plan(&plan, &x).unwrap();

        let hw = 28 * 28;
        for bi in 0..2 {
            let one = Tensor::from_vec(&[1, 1, 28, 28], x.data()[bi * hw..(bi + 1) * hw].to_vec())
                .unwrap();
            let out = run_plan(&plan, &one).unwrap();
            assert_eq!(out.data(), &both.data()[bi * 10..(bi + 1) * 10]);
        }
    }

    #[test]
    fn parallel_groups_match_the_serial_path_bitwise() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 2)).unwrap();
        let plan = compile(&model).unwrap();
        let x = random_input(&[3, 1, 28, 28], 31);
        let serial = run_plan(&plan, &x).unwrap();
        let parallel =
            run_plan_with(&plan, &x, ExecOptions { parallel_groups: true }).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn compiled_plans_reproduce_the_model() {
        for groups in [1, 2, 4, 8] {
            let model =
                Model::<f32>::build(&mini_dsc(groups, GroupingMode::Learned, groups as u64)).unwrap();
            let plan = compile(&model).unwrap();
            let report = equivalence_check(&plan, &model, 5, 41).unwrap();
            assert!(
                report.pass,
                "groups={groups}: max abs diff {}",
                report.max_abs_diff
            );
        }
    }

    #[test]
    fn corrupted_weights_fail_the_equivalence_check() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 13)).unwrap();
        let mut plan = compile(&model).unwrap();
        let grouped = plan
            .ops
            .iter_mut()
            .filter_map(|o| match o {
                PlanOp::Grouped(g) => Some(g),
                _ => None,
            })
            .next_back()
            .unwrap();
        grouped.blocks[0].w.data_mut()[0] += 1.0;

        let report = equivalence_check(&plan, &model, 5, 41).unwrap();
        assert!(!report.pass);
        assert!(report.max_abs_diff > 1e-2, "got {}", report.max_abs_diff);
    }

    #[test]
    fn output_channels_depend_only_on_their_groups_inputs() {
        let config = ModelConfig {
            name: "isolation".into(),
            input: [6, 4, 4],
            classes: 3,
            seed: 1,
            layers: vec![
                LayerConfig::Flgc {
                    in_channels: 6,
                    out_channels: 6,
                    groups: 3,
                    grouping: GroupingMode::Learned,
                },
                LayerConfig::Relu,
                LayerConfig::AvgPool { window: None },
                LayerConfig::Fc { in_features: 6, out_features: 3 },
            ],
        };
        let model = Model::<f32>::build(&config).unwrap();
        let hard = &model.hard_assignments().unwrap()[0];
        let plan = compile(&model).unwrap();
        // Compare at the grouped layer's output: drop everything after it.
        let mut probe = plan.clone();
        probe.ops.truncate(probe.ops.iter().position(|o| matches!(o, PlanOp::Grouped(_))).unwrap() + 1);

        let x = random_input(&[1, 6, 4, 4], 3);
        let base = run_plan(&probe, &x).unwrap();
        let (fperm, _) = crate::plan::filter_permutation(hard);
        for ch in 0..6 {
            let mut bumped = x.clone();
            for v in &mut bumped.data_mut()[ch * 16..(ch + 1) * 16] {
                *v += 0.7;
            }
            let got = run_plan(&probe, &bumped).unwrap();
            for row in 0..6 {
                let filter = fperm.index()[row];
                let same_group = hard.filter_group[filter] == hard.channel_group[ch];
                let changed = base.data()[row * 16..(row + 1) * 16]
                    != got.data()[row * 16..(row + 1) * 16];
                if same_group {
                    assert!(changed, "channel {ch} feeds filter {filter}");
                } else {
                    assert!(!changed, "channel {ch} must not reach filter {filter}");
                }
            }
        }
    }

    #[test]
    fn counting_is_the_sum_over_active_connections() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 11)).unwrap();
        let plan = compile(&model).unwrap();
        let x = random_input(&[2, 1, 28, 28], 7);
        let (_, counted) = run_plan_counting(&plan, &x).unwrap();

        // Per-sample analytic cost: conv and depthwise at 28x28 and 14x14,
        // grouped stages at their active connections, fc at out x in.
        let hard = model.hard_assignments().unwrap();
        let expected_per_sample = (16 * 9 * 28 * 28)
            + (16 * 9 * 28 * 28)
            + hard[0].active_connections() as usize * 28 * 28
            + (32 * 9 * 14 * 14)
            + hard[1].active_connections() as usize * 14 * 14
            + (10 * 64);
        assert_eq!(counted, 2 * expected_per_sample as u64);
    }
}
