//! Group convolution with learnable channel and filter assignments.
//!
//! The layer is a 1x1 convolution whose weight matrix is masked by a binary
//! connectivity pattern derived from two small "meta" matrices: one assigns
//! each input channel to a group, one assigns each filter. Row-wise softmax
//! relaxes the assignments; row argmax binarizes them. During training the
//! binary mask is used in the forward pass while gradients flow to the meta
//! matrices through the softmax as if the binarization were the identity
//! (straight-through estimator).

use crate::error::{Error, Result};
use crate::ops::{conv1x1_grads, conv2d, matmul, softmax_rows, softmax_rows_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether the forward mask is the binarized assignment (normal operation)
/// or the softmax product itself (a differentiable surrogate used for
/// finite-difference verification).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    Hard,
    Relaxed,
}

/// Weight gradient convention. `Effective` returns the gradient of the
/// effective (masked) weight, leaving masked-out entries free to keep
/// training signal; `Masked` zeroes them, which makes the hard forward an
/// exact function of the stored weights and is what finite differences
/// reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightGradMode {
    #[default]
    Effective,
    Masked,
}

/// Learned grouping reads the meta matrices; fixed grouping uses the
/// balanced contiguous partition (the standard group convolution baseline)
/// and keeps the meta matrices frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    #[default]
    Learned,
    Fixed,
}

/// Row-softmaxed assignment scores: `s` is channels x groups, `t` is
/// filters x groups. Every row sums to 1.
#[derive(Debug, Clone)]
pub struct SoftAssignment<T> {
    pub s: Tensor<T>,
    pub t: Tensor<T>,
}

/// Binary group assignment: one group index per channel and per filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAssignment {
    pub groups: usize,
    pub channel_group: Vec<usize>,
    pub filter_group: Vec<usize>,
}

/// (input channels, filters) claimed by one group. Groups may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSize {
    pub channels: usize,
    pub filters: usize,
}

fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let (r, c) = m.dims2().expect("assignment scores are rank 2");
    let d = m.data();
    (0..r).map(|i| crate::ops::argmax_row(&d[i * c..(i + 1) * c])).collect()
}

/// Binarizes a soft assignment by row argmax; ties resolve to the lowest
/// group index.
pub fn harden<T: Scalar>(soft: &SoftAssignment<T>) -> HardAssignment {
    let groups = soft.s.shape()[1];
    HardAssignment {
        groups,
        channel_group: argmax_rows(&soft.s),
        filter_group: argmax_rows(&soft.t),
    }
}

impl HardAssignment {
    /// Contiguous balanced partition: channel `i` joins group
    /// `i / (channels/groups)`, and likewise for filters. Requires both
    /// counts to be divisible by the group count.
    pub fn balanced(channels: usize, filters: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 || filters % groups != 0 {
            return Err(Error::Config(format!(
                "balanced grouping needs groups to divide channels and filters: \
                 {channels} channels, {filters} filters, {groups} groups"
            )));
        }
        let cg = channels / groups;
        let fg = filters / groups;
        Ok(HardAssignment {
            groups,
            channel_group: (0..channels).map(|i| i / cg).collect(),
            filter_group: (0..filters).map(|i| i / fg).collect(),
        })
    }

    /// Binary connectivity mask, filters x channels: 1 where filter and
    /// channel share a group.
    pub fn mask<T: Scalar>(&self) -> Tensor<T> {
        let n = self.filter_group.len();
        let c = self.channel_group.len();
        let mut m = Tensor::zeros(&[n, c]);
        let md = m.data_mut();
        for (i, &fg) in self.filter_group.iter().enumerate() {
            for (j, &cg) in self.channel_group.iter().enumerate() {
                if fg == cg {
                    md[i * c + j] = T::one();
                }
            }
        }
        m
    }

    /// One-hot channel assignment, channels x groups.
    pub fn s_one_hot<T: Scalar>(&self) -> Tensor<T> {
        let c = self.channel_group.len();
        let mut m = Tensor::zeros(&[c, self.groups]);
        for (j, &g) in self.channel_group.iter().enumerate() {
            m.data_mut()[j * self.groups + g] = T::one();
        }
        m
    }

    /// One-hot filter assignment, filters x groups.
    pub fn t_one_hot<T: Scalar>(&self) -> Tensor<T> {
        let n = self.filter_group.len();
        let mut m = Tensor::zeros(&[n, self.groups]);
        for (i, &g) in self.filter_group.iter().enumerate() {
            m.data_mut()[i * self.groups + g] = T::one();
        }
        m
    }

    /// Per-group (channel count, filter count), indexed by group.
    pub fn group_sizes(&self) -> Vec<GroupSize> {
        let mut sizes = vec![GroupSize { channels: 0, filters: 0 }; self.groups];
        for &g in &self.channel_group {
            sizes[g].channels += 1;
        }
        for &g in &self.filter_group {
            sizes[g].filters += 1;
        }
        sizes
    }

    /// Multiply-adds of one masked 1x1 application per spatial position:
    /// the sum over groups of |channels| * |filters|.
    pub fn active_connections(&self) -> u64 {
        self.group_sizes().iter().map(|s| s.channels as u64 * s.filters as u64).sum()
    }
}

/// State cached by a forward pass for the matching backward pass.
pub struct FlgcCache<T> {
    pub mode: AssignMode,
    pub soft: SoftAssignment<T>,
    pub hard: HardAssignment,
    /// The mask actually applied: binary in hard mode, `t_soft . s_soft^T`
    /// in relaxed mode.
    pub mask: Tensor<T>,
    pub effective_weight: Tensor<T>,
}

pub struct FlgcGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub s_meta: Tensor<T>,
    pub t_meta: Tensor<T>,
    pub dx: Option<Tensor<T>>,
}

/// 1x1 convolution with learnable group structure.
#[derive(Debug, Clone)]
pub struct FlgcLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub grouping: GroupingMode,
    /// Full weight matrix, filters x channels.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// Channel assignment scores, channels x groups.
    pub s_meta: Tensor<T>,
    /// Filter assignment scores, filters x groups.
    pub t_meta: Tensor<T>,
}

impl<T: Scalar> FlgcLayer<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        grouping: GroupingMode,
        weight: Tensor<T>,
        bias: Vec<T>,
        s_meta: Tensor<T>,
        t_meta: Tensor<T>,
    ) -> Result<Self> {
        if groups == 0 || groups > in_channels.min(out_channels) {
            return Err(Error::Config(format!(
                "groups must satisfy 1 <= groups <= min(in, out): \
                 got {groups} for {in_channels} in, {out_channels} out"
            )));
        }
        if weight.shape() != [out_channels, in_channels] {
            return Err(Error::ShapeMismatch(format!(
                "flgc weight {:?}, want [{out_channels}, {in_channels}]",
                weight.shape()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "flgc bias length {}, want {out_channels}",
                bias.len()
            )));
        }
        if s_meta.shape() != [in_channels, groups] || t_meta.shape() != [out_channels, groups] {
            return Err(Error::ShapeMismatch(format!(
                "flgc meta shapes {:?}/{:?}, want [{in_channels}, {groups}]/[{out_channels}, {groups}]",
                s_meta.shape(),
                t_meta.shape()
            )));
        }
        if grouping == GroupingMode::Fixed {
            HardAssignment::balanced(in_channels, out_channels, groups)?;
        }
        Ok(FlgcLayer {
            in_channels,
            out_channels,
            groups,
            grouping,
            weight,
            bias,
            s_meta,
            t_meta,
        })
    }

    /// Row-softmax of both meta matrices.
    pub fn soften(&self) -> Result<SoftAssignment<T>> {
        Ok(SoftAssignment { s: softmax_rows(&self.s_meta)?, t: softmax_rows(&self.t_meta)? })
    }

    /// The binary assignment this layer currently encodes.
    pub fn hard_assignment(&self) -> Result<HardAssignment> {
        match self.grouping {
            GroupingMode::Learned => Ok(harden(&self.soften()?)),
            GroupingMode::Fixed => {
                HardAssignment::balanced(self.in_channels, self.out_channels, self.groups)
            }
        }
    }

    fn build_cache(&self, mode: AssignMode) -> Result<FlgcCache<T>> {
        let soft = self.soften()?;
        let hard = match self.grouping {
            GroupingMode::Learned => harden(&soft),
            GroupingMode::Fixed => {
                if mode == AssignMode::Relaxed {
                    return Err(Error::Unsupported(
                        "relaxed assignment with fixed grouping".into(),
                    ));
                }
                HardAssignment::balanced(self.in_channels, self.out_channels, self.groups)?
            }
        };
        let mask = match mode {
            AssignMode::Hard => hard.mask::<T>(),
            AssignMode::Relaxed => matmul(&soft.t, &soft.s.transposed2()?)?,
        };
        let effective_weight = self.weight.zip_map(&mask, |w, m| w * m)?;
        Ok(FlgcCache { mode, soft, hard, mask, effective_weight })
    }

    /// Forward pass. Recomputes the assignment from the current meta scores,
    /// masks the weight, and applies the resulting 1x1 convolution. Returns
    /// the output and the cache the backward pass needs.
    pub fn forward(&self, x: &Tensor<T>, mode: AssignMode) -> Result<(Tensor<T>, FlgcCache<T>)> {
        let cache = self.build_cache(mode)?;
        let w4 = cache
            .effective_weight
            .clone()
            .reshaped(&[self.out_channels, self.in_channels, 1, 1])?;
        let out = conv2d(x, &w4, Some(&self.bias), 1, 0)?;
        Ok((out, cache))
    }

    /// Pure eval forward: hard assignment, no cache.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = self.forward(x, AssignMode::Hard)?;
        Ok(out)
    }

    /// Backward pass for the forward that produced `cache`.
    ///
    /// The effective-weight gradient is the ordinary 1x1 convolution weight
    /// gradient. Meta gradients chain through the mask
    /// (`dmask = dweight_eff * weight`), the assignment product, the
    /// straight-through identity, and the row-softmax Jacobian. With fixed
    /// grouping the meta gradients are zero.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &FlgcCache<T>,
        upstream: &Tensor<T>,
        weight_grad_mode: WeightGradMode,
        need_dx: bool,
    ) -> Result<FlgcGrads<T>> {
        let grads = conv1x1_grads(x, &cache.effective_weight, upstream, need_dx)?;
        let g_eff = grads.dw;

        let weight = match weight_grad_mode {
            WeightGradMode::Effective => g_eff.clone(),
            WeightGradMode::Masked => g_eff.zip_map(&cache.mask, |g, m| g * m)?,
        };

        let (s_meta, t_meta) = if self.grouping == GroupingMode::Fixed {
            (Tensor::zeros(self.s_meta.shape()), Tensor::zeros(self.t_meta.shape()))
        } else {
            let grad_mask = g_eff.zip_map(&self.weight, |g, w| g * w)?;
            let (a_s, a_t) = match cache.mode {
                AssignMode::Hard => (cache.hard.s_one_hot::<T>(), cache.hard.t_one_hot::<T>()),
                AssignMode::Relaxed => (cache.soft.s.clone(), cache.soft.t.clone()),
            };
            let grad_s_soft = matmul(&grad_mask.transposed2()?, &a_t)?;
            let grad_t_soft = matmul(&grad_mask, &a_s)?;
            (
                softmax_rows_backward(&cache.soft.s, &grad_s_soft)?,
                softmax_rows_backward(&cache.soft.t, &grad_t_soft)?,
            )
        };

        Ok(FlgcGrads { weight, bias: grads.db, s_meta, t_meta, dx: grads.dx })
    }
}
