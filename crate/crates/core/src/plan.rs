//! Inference compilation: freezes a trained model's group assignments into a
//! reordered grouped execution plan.
//!
//! Compilation stable-sorts every grouped layer's filters and channels by
//! group so each group occupies one contiguous block, folds evaluation-mode
//! batchnorm into the producing layer's weights, and pushes the resulting
//! channel orders into neighbouring layers so almost no reshuffling survives
//! to run time: an ordinary convolution absorbs an order into its weight
//! rows or columns offline, a depthwise convolution rides along by
//! reordering its per-channel kernels, and a grouped layer fed by another
//! grouped layer reads through per-column merged indices. The one case that
//! cannot fold away, a grouped layer fed directly by the network input, costs
//! a single explicit gather. The terminal fully connected layer re-absorbs
//! the last order, so compiled logits keep the model's class order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flgc::HardAssignment;
use crate::model::{Layer, Model};
use crate::ops::BN_EPS;
use crate::tensor::Tensor;

const FORMAT: &str = "flgc-plan";
const VERSION: u32 = 1;
pub const PLAN_MANIFEST_FILE: &str = "plan.json";
pub const PLAN_WEIGHTS_FILE: &str = "plan.bin";

/// A reordering of positions. `index[i]` names the source position that
/// lands at position `i`, so applying a permutation to a vector computes
/// `reordered[i] = original[index[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    index: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { index: (0..n).collect() }
    }

    /// Validates that `index` is a bijection on `0..index.len()`.
    pub fn from_vec(index: Vec<usize>) -> Result<Self> {
        let n = index.len();
        let mut seen = vec![false; n];
        for &i in &index {
            if i >= n {
                return Err(Error::Config(format!(
                    "permutation entry {i} out of range for length {n}"
                )));
            }
            if seen[i] {
                return Err(Error::Config(format!("permutation repeats entry {i}")));
            }
            seen[i] = true;
        }
        Ok(Permutation { index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.index.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.index.len()];
        for (i, &v) in self.index.iter().enumerate() {
            inv[v] = i;
        }
        Permutation { index: inv }
    }

    /// Merged read-through indices: with this permutation as a producer's
    /// output order and `wanted` as a consumer's input order, the merged
    /// permutation `m` satisfies
    /// `gather(gather(x, self), m) == gather(x, wanted)`,
    /// replacing two gathers with one. `m[j] = inverse(self)[wanted[j]]`.
    pub fn merge(&self, wanted: &Permutation) -> Result<Permutation> {
        if self.len() != wanted.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge permutations of lengths {} and {}",
                self.len(),
                wanted.len()
            )));
        }
        let inv = self.inverse();
        Ok(Permutation { index: wanted.index.iter().map(|&j| inv.index[j]).collect() })
    }

    /// Applies the permutation: `out[i] = x[index[i]]`.
    pub fn gather<T: Copy>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "gather of {} elements through a length-{} permutation",
                x.len(),
                self.len()
            )));
        }
        Ok(self.index.iter().map(|&i| x[i]).collect())
    }
}

/// Contiguous range one group occupies after sorting: `offset` is its first
/// position, `len` its member count. Empty groups occupy zero positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpan {
    pub offset: usize,
    pub len: usize,
}

/// Stable sort by group id: the permutation listing members of group 0
/// first, then group 1, and so on, original order preserved within each
/// group, together with every group's span in the sorted layout.
pub fn group_sort(assignment: &[usize], groups: usize) -> (Permutation, Vec<GroupSpan>) {
    let mut counts = vec![0usize; groups];
    for &g in assignment {
        counts[g] += 1;
    }
    let mut spans = Vec::with_capacity(groups);
    let mut acc = 0;
    for &c in &counts {
        spans.push(GroupSpan { offset: acc, len: c });
        acc += c;
    }
    let mut cursor: Vec<usize> = spans.iter().map(|s| s.offset).collect();
    let mut index = vec![0usize; assignment.len()];
    for (i, &g) in assignment.iter().enumerate() {
        index[cursor[g]] = i;
        cursor[g] += 1;
    }
    (Permutation { index }, spans)
}

/// Filter (output channel) sort of a hard assignment.
pub fn filter_permutation(hard: &HardAssignment) -> (Permutation, Vec<GroupSpan>) {
    group_sort(&hard.filter_group, hard.groups)
}

/// Input channel sort of a hard assignment.
pub fn channel_permutation(hard: &HardAssignment) -> (Permutation, Vec<GroupSpan>) {
    group_sort(&hard.channel_group, hard.groups)
}

/// One group's packed weights: the active submatrix of the masked 1x1
/// weight, rows in sorted filter order and columns in sorted channel order.
/// Packing is what enforces the mask; only same-group entries are copied in.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    pub out_offset: usize,
    pub out_len: usize,
    /// Offset into the layer's packed column space (and into `merged`).
    pub in_offset: usize,
    pub in_len: usize,
    /// `[out_len, in_len]`.
    pub w: Tensor<f32>,
}

/// A grouped 1x1 layer in execution form.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedOp {
    /// Output-ordered bias, one entry per output row. Rows whose group owns
    /// no input channels still carry theirs; such outputs are bias-only.
    pub bias: Vec<f32>,
    /// Packed column `j` reads input stream position `merged[j]`. Identity
    /// when the wanted order was folded into the producer.
    pub merged: Permutation,
    /// Sorted layout of all groups, empty ones included. Channel span
    /// lengths sum to the input channel count, filter spans to the output
    /// channel count.
    pub channel_spans: Vec<GroupSpan>,
    pub filter_spans: Vec<GroupSpan>,
    /// Executable blocks, ascending by `out_offset`. Groups with no filters
    /// produce no rows and are omitted.
    pub blocks: Vec<GroupBlock>,
}

/// One executable step. Activations flow as `[batch, channels, h, w]` until
/// global pooling flattens them to `[batch, features]`.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanOp {
    Conv { w: Tensor<f32>, b: Vec<f32>, stride: usize, pad: usize },
    DwConv { w: Tensor<f32>, b: Vec<f32>, stride: usize, pad: usize },
    Grouped(GroupedOp),
    /// Explicit channel reorder of the live activation. Emitted only when a
    /// wanted order dead-ends at the network input.
    Gather { index: Permutation },
    Relu,
    /// `window: None` pools globally and flattens.
    AvgPool { window: Option<usize> },
    Fc { w: Tensor<f32>, b: Vec<f32> },
}

impl PlanOp {
    pub fn kind(&self) -> &'static str {
        match self {
            PlanOp::Conv { .. } => "conv",
            PlanOp::DwConv { .. } => "dwconv",
            PlanOp::Grouped(_) => "grouped",
            PlanOp::Gather { .. } => "gather",
            PlanOp::Relu => "relu",
            PlanOp::AvgPool { .. } => "avgpool",
            PlanOp::Fc { .. } => "fc",
        }
    }
}

/// A compiled model: the op chain plus the input/output contract it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub name: String,
    /// Input shape per sample: [channels, height, width].
    pub input: [usize; 3],
    pub classes: usize,
    pub ops: Vec<PlanOp>,
}

/// Gathers fixed-size chunks: chunk `j` of the result is chunk `order[j]`
/// of `data`.
fn gather_chunks(data: &[f32], chunk: usize, order: &Permutation) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for &src in order.index() {
        out.extend_from_slice(&data[src * chunk..(src + 1) * chunk]);
    }
    out
}

/// Reorders convolution weight columns: output column block `j` reads input
/// channel `order[j]`.
fn gather_conv_columns(w: &Tensor<f32>, order: &Permutation) -> Result<Tensor<f32>> {
    let (n, c, kh, kw) = w.dims4()?;
    if order.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "column order of length {} for {c} input channels",
            order.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, c, kh, kw]);
    let k = kh * kw;
    let src = w.data();
    let dst = out.data_mut();
    for f in 0..n {
        let row = f * c * k;
        for (j, &cj) in order.index().iter().enumerate() {
            dst[row + j * k..row + (j + 1) * k]
                .copy_from_slice(&src[row + cj * k..row + (cj + 1) * k]);
        }
    }
    Ok(out)
}

/// Reorders fully connected weight columns in blocks of `block` (the
/// flattened spatial extent behind each channel): column block `j` reads
/// source block `order[j]`.
fn gather_fc_columns(w: &Tensor<f32>, order: &Permutation, block: usize) -> Result<Tensor<f32>> {
    let (o, f) = w.dims2()?;
    if order.len() * block != f {
        return Err(Error::ShapeMismatch(format!(
            "column order of length {} x {block} for {f} features",
            order.len()
        )));
    }
    let mut out = Tensor::zeros(&[o, f]);
    let src = w.data();
    let dst = out.data_mut();
    for r in 0..o {
        let row = r * f;
        for (j, &cj) in order.index().iter().enumerate() {
            dst[row + j * block..row + (j + 1) * block]
                .copy_from_slice(&src[row + cj * block..row + (cj + 1) * block]);
        }
    }
    Ok(out)
}

enum FoldOutcome {
    /// A producer absorbed the reorder; the stream now arrives pre-sorted.
    Absorbed,
    /// An upstream grouped layer (or existing gather) owns the stream order;
    /// the consumer must read through merged indices.
    Blocked,
    /// The walk reached the network input; only an explicit gather is left.
    InputBoundary,
}

/// Rewrites already-lowered ops so the live stream arrives reordered by
/// `rho` (positions relative to the current stream). Walks upstream over
/// order-transparent ops to the nearest ordinary convolution, which absorbs
/// the reorder into its filter rows; depthwise convolutions along the way
/// ride along by reordering their per-channel kernels.
fn fold_into_producer(ops: &mut [PlanOp], rho: &Permutation) -> Result<FoldOutcome> {
    let mut riders: Vec<usize> = Vec::new();
    for idx in (0..ops.len()).rev() {
        match &ops[idx] {
            PlanOp::Relu | PlanOp::AvgPool { .. } => continue,
            PlanOp::DwConv { .. } => {
                riders.push(idx);
                continue;
            }
            PlanOp::Conv { .. } => {
                if let PlanOp::Conv { w, b, .. } = &mut ops[idx] {
                    let (_, c, kh, kw) = w.dims4()?;
                    let shape = w.shape().to_vec();
                    *w = Tensor::from_vec(&shape, gather_chunks(w.data(), c * kh * kw, rho))?;
                    *b = rho.gather(b)?;
                }
                for &r in &riders {
                    if let PlanOp::DwConv { w, b, .. } = &mut ops[r] {
                        let (_, _, kh, kw) = w.dims4()?;
                        let shape = w.shape().to_vec();
                        *w = Tensor::from_vec(&shape, gather_chunks(w.data(), kh * kw, rho))?;
                        *b = rho.gather(b)?;
                    }
                }
                return Ok(FoldOutcome::Absorbed);
            }
            PlanOp::Grouped(_) | PlanOp::Gather { .. } | PlanOp::Fc { .. } => {
                return Ok(FoldOutcome::Blocked)
            }
        }
    }
    Ok(FoldOutcome::InputBoundary)
}

/// Folds evaluation-mode batchnorm into the op producing the live stream.
/// Row `r` of that op emits the model's channel `emitted[r]`; its weights
/// scale by `gamma / sqrt(var + eps)` and its bias absorbs the shift.
fn fold_batchnorm(
    op: &mut PlanOp,
    emitted: &Permutation,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
) -> Result<()> {
    let eps = BN_EPS as f32;
    let scale = |r: usize| {
        let c = emitted.index()[r];
        gamma[c] / (var[c] + eps).sqrt()
    };
    let shift = |r: usize, b: f32| {
        let c = emitted.index()[r];
        scale(r) * (b - mean[c]) + beta[c]
    };
    match op {
        PlanOp::Conv { w, b, .. } | PlanOp::DwConv { w, b, .. } => {
            let dims = w.dims4()?;
            let chunk = w.len() / dims.0;
            let data = w.data_mut();
            for r in 0..dims.0 {
                let a = scale(r);
                for v in &mut data[r * chunk..(r + 1) * chunk] {
                    *v *= a;
                }
                b[r] = shift(r, b[r]);
            }
        }
        PlanOp::Grouped(g) => {
            for block in &mut g.blocks {
                let data = block.w.data_mut();
                for rr in 0..block.out_len {
                    let a = scale(block.out_offset + rr);
                    for v in &mut data[rr * block.in_len..(rr + 1) * block.in_len] {
                        *v *= a;
                    }
                }
            }
            for (r, b) in g.bias.iter_mut().enumerate() {
                *b = shift(r, *b);
            }
        }
        _ => {
            return Err(Error::Unsupported(
                "batchnorm has no producing convolution to fold into".into(),
            ))
        }
    }
    Ok(())
}

/// Compiles a model into an execution plan using evaluation-mode parameters
/// and the current hard group assignments.
///
/// The compiled plan computes the same function as [`Model::forward_eval`].
/// With a single group everywhere the plan degenerates to the dense layout:
/// identity orders, one full-width block per grouped layer.
pub fn compile(model: &Model<f32>) -> Result<Plan> {
    model.config.feature_shapes()?;
    let mut ops: Vec<PlanOp> = Vec::new();
    // Channel order the live activation carries: position i holds the
    // model's channel emitted[i]. Starts canonical at the network input.
    let mut emitted = Permutation::identity(model.config.input[0]);
    for layer in &model.layers {
        match layer {
            Layer::Conv(l) => {
                let w = if emitted.is_identity() {
                    l.w.clone()
                } else {
                    gather_conv_columns(&l.w, &emitted)?
                };
                ops.push(PlanOp::Conv { w, b: l.b.clone(), stride: l.stride, pad: l.pad });
                emitted = Permutation::identity(l.b.len());
            }
            Layer::DwConv(l) => {
                let (w, b) = if emitted.is_identity() {
                    (l.w.clone(), l.b.clone())
                } else {
                    let (_, _, kh, kw) = l.w.dims4()?;
                    let data = gather_chunks(l.w.data(), kh * kw, &emitted);
                    (Tensor::from_vec(l.w.shape(), data)?, emitted.gather(&l.b)?)
                };
                ops.push(PlanOp::DwConv { w, b, stride: l.stride, pad: l.pad });
            }
            Layer::Flgc(h) => {
                let hard = h.layer.hard_assignment()?;
                let (cperm, channel_spans) = channel_permutation(&hard);
                let (fperm, filter_spans) = filter_permutation(&hard);
                // After this match the stream reaches the grouped layer in
                // cperm order, either physically (absorbed or gathered) or
                // virtually through the merged read-through indices.
                let merged = if emitted == cperm {
                    Permutation::identity(cperm.len())
                } else {
                    let rho = emitted.merge(&cperm)?;
                    match fold_into_producer(&mut ops, &rho)? {
                        FoldOutcome::Absorbed => Permutation::identity(cperm.len()),
                        FoldOutcome::InputBoundary => {
                            ops.push(PlanOp::Gather { index: rho });
                            Permutation::identity(cperm.len())
                        }
                        FoldOutcome::Blocked => rho,
                    }
                };
                let wd = h.layer.weight.data();
                let c = h.layer.in_channels;
                let mut blocks = Vec::new();
                for g in 0..hard.groups {
                    let fs = filter_spans[g];
                    let cs = channel_spans[g];
                    if fs.len == 0 {
                        continue;
                    }
                    let mut w = Tensor::zeros(&[fs.len, cs.len]);
                    let data = w.data_mut();
                    for r in 0..fs.len {
                        let filter = fperm.index()[fs.offset + r];
                        for k in 0..cs.len {
                            let channel = cperm.index()[cs.offset + k];
                            data[r * cs.len + k] = wd[filter * c + channel];
                        }
                    }
                    w.ensure_finite("grouped weights")?;
                    blocks.push(GroupBlock {
                        out_offset: fs.offset,
                        out_len: fs.len,
                        in_offset: cs.offset,
                        in_len: cs.len,
                        w,
                    });
                }
                ops.push(PlanOp::Grouped(GroupedOp {
                    bias: fperm.gather(&h.layer.bias)?,
                    merged,
                    channel_spans,
                    filter_spans,
                    blocks,
                }));
                emitted = fperm;
            }
            Layer::BatchNorm(l) => {
                let Some(op) = ops.last_mut() else {
                    return Err(Error::Unsupported(
                        "batchnorm has no producing convolution to fold into".into(),
                    ));
                };
                fold_batchnorm(op, &emitted, &l.gamma, &l.beta, &l.running_mean, &l.running_var)?;
            }
            Layer::Relu => ops.push(PlanOp::Relu),
            Layer::AvgPool { window } => ops.push(PlanOp::AvgPool { window: *window }),
            Layer::Fc(l) => {
                let (_, f) = l.w.dims2()?;
                let w = if emitted.is_identity() {
                    l.w.clone()
                } else {
                    gather_fc_columns(&l.w, &emitted, f / emitted.len())?
                };
                ops.push(PlanOp::Fc { w, b: l.b.clone() });
                emitted = Permutation::identity(l.b.len());
            }
        }
    }
    Ok(Plan {
        name: model.config.name.clone(),
        input: model.config.input,
        classes: model.config.classes,
        ops,
    })
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into plan.bin; the blob spans 4 x product(shape) bytes.
    offset: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct VecEntry {
    len: u64,
    offset: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    out_offset: usize,
    out_len: usize,
    in_offset: usize,
    in_len: usize,
    w: TensorEntry,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
enum OpEntry {
    Conv { stride: usize, pad: usize, w: TensorEntry, b: VecEntry },
    DwConv { stride: usize, pad: usize, w: TensorEntry, b: VecEntry },
    Grouped {
        merged: Vec<usize>,
        channel_spans: Vec<GroupSpan>,
        filter_spans: Vec<GroupSpan>,
        blocks: Vec<BlockEntry>,
        bias: VecEntry,
    },
    Gather { index: Vec<usize> },
    Relu,
    AvgPool { window: Option<usize> },
    Fc { w: TensorEntry, b: VecEntry },
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct PlanManifest {
    format: String,
    version: u32,
    name: String,
    input: [usize; 3],
    classes: usize,
    weights_len: u64,
    weights_sha256: String,
    ops: Vec<OpEntry>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, data: &[f32], what: &str) -> Result<u64> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(offset)
    }

    fn tensor(&mut self, t: &Tensor<f32>, what: &str) -> Result<TensorEntry> {
        Ok(TensorEntry { shape: t.shape().to_vec(), offset: self.push(t.data(), what)? })
    }

    fn vec(&mut self, v: &[f32], what: &str) -> Result<VecEntry> {
        Ok(VecEntry { len: v.len() as u64, offset: self.push(v, what)? })
    }
}

/// Writes `plan.json` and `plan.bin` under `dir`, creating it if needed.
pub fn save_plan(plan: &Plan, dir: &Path) -> Result<()> {
    let mut blobs = BlobWriter { bytes: Vec::new() };
    let mut entries = Vec::with_capacity(plan.ops.len());
    for (i, op) in plan.ops.iter().enumerate() {
        let what = |role: &str| format!("op {i} {role}");
        entries.push(match op {
            PlanOp::Conv { w, b, stride, pad } => OpEntry::Conv {
                stride: *stride,
                pad: *pad,
                w: blobs.tensor(w, &what("weight"))?,
                b: blobs.vec(b, &what("bias"))?,
            },
            PlanOp::DwConv { w, b, stride, pad } => OpEntry::DwConv {
                stride: *stride,
                pad: *pad,
                w: blobs.tensor(w, &what("weight"))?,
                b: blobs.vec(b, &what("bias"))?,
            },
            PlanOp::Grouped(g) => OpEntry::Grouped {
                merged: g.merged.index().to_vec(),
                channel_spans: g.channel_spans.clone(),
                filter_spans: g.filter_spans.clone(),
                blocks: g
                    .blocks
                    .iter()
                    .map(|blk| {
                        Ok(BlockEntry {
                            out_offset: blk.out_offset,
                            out_len: blk.out_len,
                            in_offset: blk.in_offset,
                            in_len: blk.in_len,
                            w: blobs.tensor(&blk.w, &what("block weight"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                bias: blobs.vec(&g.bias, &what("bias"))?,
            },
            PlanOp::Gather { index } => OpEntry::Gather { index: index.index().to_vec() },
            PlanOp::Relu => OpEntry::Relu,
            PlanOp::AvgPool { window } => OpEntry::AvgPool { window: *window },
            PlanOp::Fc { w, b } => OpEntry::Fc {
                w: blobs.tensor(w, &what("weight"))?,
                b: blobs.vec(b, &what("bias"))?,
            },
        });
    }
    let manifest = PlanManifest {
        format: FORMAT.to_string(),
        version: VERSION,
        name: plan.name.clone(),
        input: plan.input,
        classes: plan.classes,
        weights_len: blobs.bytes.len() as u64,
        weights_sha256: hex(&Sha256::digest(&blobs.bytes)),
        ops: entries,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PLAN_WEIGHTS_FILE), &blobs.bytes)?;
    fs::write(dir.join(PLAN_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl BlobReader<'_> {
    fn read(&self, offset: u64, len: u64, what: &str) -> Result<Vec<f32>> {
        let start = offset as usize;
        let bytes = (len as usize).checked_mul(4).ok_or_else(|| {
            Error::format(self.path, format!("{what}: blob length {len} overflows"))
        })?;
        let end = start.checked_add(bytes).filter(|&e| e <= self.bytes.len()).ok_or_else(
            || Error::format(self.path, format!("{what}: blob [{offset}, +{bytes}) out of bounds")),
        )?;
        let out: Vec<f32> = self.bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(out)
    }

    fn tensor(&self, e: &TensorEntry, what: &str) -> Result<Tensor<f32>> {
        let len: usize = e.shape.iter().product();
        Tensor::from_vec(&e.shape, self.read(e.offset, len as u64, what)?)
    }

    fn vec(&self, e: &VecEntry, what: &str) -> Result<Vec<f32>> {
        self.read(e.offset, e.len, what)
    }
}

/// Loads a plan directory, verifying the format tag, version, checksum, blob
/// bounds, permutation bijections, and block shape consistency.
pub fn load_plan(dir: &Path) -> Result<Plan> {
    let manifest_path = dir.join(PLAN_MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: PlanManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&manifest_path, format!("format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("version {} (supported: {VERSION})", manifest.version),
        ));
    }
    let weights_path = dir.join(PLAN_WEIGHTS_FILE);
    let bytes = fs::read(&weights_path)?;
    if bytes.len() as u64 != manifest.weights_len {
        return Err(Error::format(
            &weights_path,
            format!("{} bytes on disk, manifest says {}", bytes.len(), manifest.weights_len),
        ));
    }
    let digest = hex(&Sha256::digest(&bytes));
    if digest != manifest.weights_sha256 {
        return Err(Error::format(
            &weights_path,
            format!("sha256 {digest} does not match manifest {}", manifest.weights_sha256),
        ));
    }
    let reader = BlobReader { bytes: &bytes, path: &weights_path };
    let mut ops = Vec::with_capacity(manifest.ops.len());
    for (i, entry) in manifest.ops.iter().enumerate() {
        let what = |role: &str| format!("op {i} {role}");
        ops.push(match entry {
            OpEntry::Conv { stride, pad, w, b } => PlanOp::Conv {
                w: reader.tensor(w, &what("weight"))?,
                b: reader.vec(b, &what("bias"))?,
                stride: *stride,
                pad: *pad,
            },
            OpEntry::DwConv { stride, pad, w, b } => PlanOp::DwConv {
                w: reader.tensor(w, &what("weight"))?,
                b: reader.vec(b, &what("bias"))?,
                stride: *stride,
                pad: *pad,
            },
            OpEntry::Grouped { merged, channel_spans, filter_spans, blocks, bias } => {
                let bias = reader.vec(bias, &what("bias"))?;
                let merged = Permutation::from_vec(merged.clone())?;
                let channel_total: usize = channel_spans.iter().map(|s| s.len).sum();
                let filter_total: usize = filter_spans.iter().map(|s| s.len).sum();
                if channel_total != merged.len() || filter_total != bias.len() {
                    return Err(Error::format(
                        &manifest_path,
                        what(&format!(
                            "spans cover {channel_total} channels / {filter_total} filters, \
                             expected {} / {}",
                            merged.len(),
                            bias.len()
                        )),
                    ));
                }
                let mut out = Vec::with_capacity(blocks.len());
                for blk in blocks {
                    let w = reader.tensor(&blk.w, &what("block weight"))?;
                    if w.shape() != [blk.out_len, blk.in_len]
                        || blk.out_offset + blk.out_len > bias.len()
                        || blk.in_offset + blk.in_len > merged.len()
                    {
                        return Err(Error::format(
                            &manifest_path,
                            what("block layout does not fit the layer"),
                        ));
                    }
                    out.push(GroupBlock {
                        out_offset: blk.out_offset,
                        out_len: blk.out_len,
                        in_offset: blk.in_offset,
                        in_len: blk.in_len,
                        w,
                    });
                }
                PlanOp::Grouped(GroupedOp {
                    bias,
                    merged,
                    channel_spans: channel_spans.clone(),
                    filter_spans: filter_spans.clone(),
                    blocks: out,
                })
            }
            OpEntry::Gather { index } => {
                PlanOp::Gather { index: Permutation::from_vec(index.clone())? }
            }
            OpEntry::Relu => PlanOp::Relu,
            OpEntry::AvgPool { window } => PlanOp::AvgPool { window: *window },
            OpEntry::Fc { w, b } => PlanOp::Fc {
                w: reader.tensor(w, &what("weight"))?,
                b: reader.vec(b, &what("bias"))?,
            },
        });
    }
    Ok(Plan { name: manifest.name, input: manifest.input, classes: manifest.classes, ops })
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flgc::GroupingMode;
    use crate::model::{mini_dsc, LayerConfig, Model, ModelConfig};
    use proptest::prelude::*;

    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == used.len() {
                out.push(cur.clone());
                return;
            }
            for v in 0..used.len() {
                if !used[v] {
                    used[v] = true;
                    cur.push(v);
                    go(cur, used, out);
                    cur.pop();
                    used[v] = false;
                }
            }
        }
        let mut out = Vec::new();
        go(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("flgc-plan-{}-{name}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        dir
    }

    #[test]
    fn permutation_validates_and_inverts() {
        assert!(Permutation::from_vec(vec![1, 0, 2]).is_ok());
        assert!(Permutation::from_vec(vec![0, 0, 2]).is_err());
        assert!(Permutation::from_vec(vec![0, 3, 1]).is_err());
        assert!(Permutation::identity(4).is_identity());

        let p = Permutation::from_vec(vec![2, 0, 3, 1]).unwrap();
        let x = [10, 20, 30, 40];
        let gathered = p.gather(&x).unwrap();
        assert_eq!(gathered, vec![30, 10, 40, 20]);
        assert_eq!(p.inverse().gather(&gathered).unwrap(), x.to_vec());
        assert!(p.gather(&[1, 2, 3]).is_err());
    }

    #[test]
    fn merge_collapses_two_gathers_into_one() {
        for n in 1..=5 {
            let x: Vec<i32> = (0..n as i32).map(|v| 100 + v).collect();
            for p in all_perms(n) {
                let p = Permutation::from_vec(p).unwrap();
                let stream = p.gather(&x).unwrap();
                for q in all_perms(n) {
                    let q = Permutation::from_vec(q).unwrap();
                    let merged = p.merge(&q).unwrap();
                    assert_eq!(
                        merged.gather(&stream).unwrap(),
                        q.gather(&x).unwrap(),
                        "p={:?} q={:?}",
                        p.index(),
                        q.index()
                    );
                }
            }
        }
        let p = Permutation::from_vec(vec![2, 0, 1]).unwrap();
        let q = Permutation::from_vec(vec![1, 2, 0]).unwrap();
        assert_eq!(p.merge(&q).unwrap().index(), &[2, 0, 1]);
        assert!(p.merge(&Permutation::identity(4)).is_err());
    }

    #[test]
    fn group_sort_is_stable_and_tracks_empty_groups() {
        let (perm, spans) = group_sort(&[1, 0, 1], 2);
        assert_eq!(perm.index(), &[1, 0, 2]);
        assert_eq!(spans, vec![GroupSpan { offset: 0, len: 1 }, GroupSpan { offset: 1, len: 2 }]);

        let (perm, spans) = group_sort(&[2, 0, 2], 3);
        assert_eq!(perm.index(), &[1, 0, 2]);
        assert_eq!(
            spans,
            vec![
                GroupSpan { offset: 0, len: 1 },
                GroupSpan { offset: 1, len: 0 },
                GroupSpan { offset: 1, len: 2 },
            ]
        );
    }

    /// Chain without batchnorm, so grouped weights survive compilation
    /// untouched and can be compared against the model bitwise.
    fn bare_config(groups: usize) -> ModelConfig {
        ModelConfig {
            name: format!("bare-g{groups}"),
            input: [1, 6, 6],
            classes: 4,
            seed: 11,
            layers: vec![
                LayerConfig::Conv { in_channels: 1, out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                LayerConfig::Relu,
                LayerConfig::Flgc {
                    in_channels: 8,
                    out_channels: 8,
                    groups,
                    grouping: GroupingMode::Learned,
                },
                LayerConfig::Relu,
                LayerConfig::AvgPool { window: None },
                LayerConfig::Fc { in_features: 8, out_features: 4 },
            ],
        }
    }

    #[test]
    fn single_group_compiles_to_the_dense_layout() {
        let model = Model::<f32>::build(&bare_config(1)).unwrap();
        let plan = compile(&model).unwrap();
        let kinds: Vec<_> = plan.ops.iter().map(|o| o.kind()).collect();
        assert_eq!(kinds, ["conv", "relu", "grouped", "relu", "avgpool", "fc"]);

        let Layer::Flgc(h) = &model.layers[2] else { panic!("layer 2 is grouped") };
        let PlanOp::Grouped(g) = &plan.ops[2] else { panic!("op 2 is grouped") };
        assert!(g.merged.is_identity());
        assert_eq!(g.blocks.len(), 1);
        let block = &g.blocks[0];
        assert_eq!((block.out_offset, block.out_len, block.in_offset, block.in_len), (0, 8, 0, 8));
        assert_eq!(block.w, h.layer.weight);
        assert_eq!(g.bias, h.layer.bias);

        let Layer::Fc(fc) = &model.layers[5] else { panic!("layer 5 is fc") };
        let PlanOp::Fc { w, b } = &plan.ops[5] else { panic!("op 5 is fc") };
        assert_eq!(*w, fc.w);
        assert_eq!(*b, fc.b);
    }

    #[test]
    fn batchnorm_folds_into_the_producer() {
        let config = ModelConfig {
            name: "bn-fold".into(),
            input: [2, 4, 4],
            classes: 3,
            seed: 5,
            layers: vec![
                LayerConfig::Conv { in_channels: 2, out_channels: 3, kernel: 1, stride: 1, pad: 0 },
                LayerConfig::BatchNorm { channels: 3 },
                LayerConfig::Relu,
                LayerConfig::AvgPool { window: None },
                LayerConfig::Fc { in_features: 3, out_features: 3 },
            ],
        };
        let mut model = Model::<f32>::build(&config).unwrap();
        let (gamma, beta, mean, var) = (
            vec![1.5f32, -0.5, 2.0],
            vec![0.1f32, 0.2, -0.3],
            vec![0.4f32, -0.1, 0.0],
            vec![0.9f32, 1.4, 0.25],
        );
        let Layer::BatchNorm(bn) = &mut model.layers[1] else { panic!("layer 1 is batchnorm") };
        bn.gamma = gamma.clone();
        bn.beta = beta.clone();
        bn.running_mean = mean.clone();
        bn.running_var = var.clone();

        let plan = compile(&model).unwrap();
        assert_eq!(plan.ops.len(), 4, "the batchnorm op itself disappears");
        let Layer::Conv(conv) = &model.layers[0] else { panic!("layer 0 is conv") };
        let PlanOp::Conv { w, b, .. } = &plan.ops[0] else { panic!("op 0 is conv") };
        for r in 0..3 {
            let a = gamma[r] / (var[r] + BN_EPS as f32).sqrt();
            for c in 0..2 {
                assert_eq!(w.data()[r * 2 + c], a * conv.w.data()[r * 2 + c]);
            }
            assert_eq!(b[r], a * (conv.b[r] - mean[r]) + beta[r]);
        }
    }

    #[test]
    fn leading_batchnorm_is_unsupported() {
        let config = ModelConfig {
            name: "bn-first".into(),
            input: [2, 4, 4],
            classes: 2,
            seed: 1,
            layers: vec![
                LayerConfig::BatchNorm { channels: 2 },
                LayerConfig::AvgPool { window: None },
                LayerConfig::Fc { in_features: 2, out_features: 2 },
            ],
        };
        let model = Model::<f32>::build(&config).unwrap();
        match compile(&model) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected unsupported, got {:?}", other.map(|p| p.name)),
        }
    }

    #[test]
    fn orders_fold_into_neighbours_without_gathers() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 7)).unwrap();
        let plan = compile(&model).unwrap();
        assert!(
            plan.ops.iter().all(|o| !matches!(o, PlanOp::Gather { .. })),
            "orders fold into the convolutions, no runtime gather survives"
        );

        let grouped: Vec<&GroupedOp> = plan
            .ops
            .iter()
            .filter_map(|o| match o {
                PlanOp::Grouped(g) => Some(g),
                _ => None,
            })
            .collect();
        assert_eq!(grouped.len(), 2);
        assert!(
            grouped[0].merged.is_identity(),
            "the leading convolution absorbs the first grouped layer's order"
        );

        // The second depthwise stage rides between the two grouped layers,
        // so its kernels follow the first grouped layer's output order.
        let hard = model.hard_assignments().unwrap();
        let (fperm1, _) = filter_permutation(&hard[0]);
        let Layer::DwConv(dw) = &model.layers[8] else { panic!("layer 8 is dwconv") };
        let PlanOp::DwConv { b, .. } = &plan.ops[6] else {
            panic!("op 6 is dwconv, got {}", plan.ops[6].kind())
        };
        assert_eq!(*b, fperm1.gather(&dw.b).unwrap());

        // The second grouped layer reads through merged indices that chain
        // the first layer's output order to its own channel order.
        let (cperm2, _) = channel_permutation(&hard[1]);
        assert_eq!(grouped[1].merged, fperm1.merge(&cperm2).unwrap());
    }

    #[test]
    fn input_fed_grouped_layer_gathers_once() {
        let config = ModelConfig {
            name: "input-grouped".into(),
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
        let (cperm, _) = channel_permutation(&model.hard_assignments().unwrap()[0]);
        assert!(!cperm.is_identity(), "seed 1 scatters the channels");

        let plan = compile(&model).unwrap();
        let PlanOp::Gather { index } = &plan.ops[0] else {
            panic!("op 0 is a gather, got {}", plan.ops[0].kind())
        };
        assert_eq!(*index, cperm, "the input stream is canonical, so the gather is the sort");
        let PlanOp::Grouped(g) = &plan.ops[1] else { panic!("op 1 is grouped") };
        assert!(g.merged.is_identity());
    }

    #[test]
    fn empty_groups_shape_the_block_list() {
        let config = ModelConfig {
            name: "empty-groups".into(),
            input: [4, 4, 4],
            classes: 2,
            seed: 3,
            layers: vec![
                LayerConfig::Flgc {
                    in_channels: 4,
                    out_channels: 4,
                    groups: 3,
                    grouping: GroupingMode::Learned,
                },
                LayerConfig::AvgPool { window: None },
                LayerConfig::Fc { in_features: 4, out_features: 2 },
            ],
        };
        let mut model = Model::<f32>::build(&config).unwrap();
        let Layer::Flgc(h) = &mut model.layers[0] else { panic!("layer 0 is grouped") };
        // Group 1 gets channels but no filters; group 2 filters but no
        // channels. Scores of 8 dominate the softmax, so argmax is forced.
        let one_hot = |rows: &[usize], groups: usize| {
            Tensor::from_fn(&[rows.len(), groups], |i| {
                if i % groups == rows[i / groups] {
                    8.0f32
                } else {
                    0.0
                }
            })
        };
        h.layer.s_meta = one_hot(&[0, 0, 1, 1], 3);
        h.layer.t_meta = one_hot(&[2, 0, 2, 2], 3);

        let plan = compile(&model).unwrap();
        // The forced channel order is already sorted, so no gather appears
        // and the grouped op leads the plan.
        let PlanOp::Grouped(g) = &plan.ops[0] else {
            panic!("op 0 is grouped, got {}", plan.ops[0].kind())
        };
        assert_eq!(
            g.channel_spans,
            vec![
                GroupSpan { offset: 0, len: 2 },
                GroupSpan { offset: 2, len: 2 },
                GroupSpan { offset: 4, len: 0 },
            ]
        );
        assert_eq!(
            g.filter_spans,
            vec![
                GroupSpan { offset: 0, len: 1 },
                GroupSpan { offset: 1, len: 0 },
                GroupSpan { offset: 1, len: 3 },
            ]
        );
        // Group 1 has no filters, so no block; group 2 has no channels, so
        // its block is bias-only.
        assert_eq!(g.blocks.len(), 2);
        assert_eq!((g.blocks[0].out_len, g.blocks[0].in_len), (1, 2));
        assert_eq!((g.blocks[1].out_len, g.blocks[1].in_len), (3, 0));
        assert_eq!(g.bias.len(), 4);

        let packed: u64 = g.blocks.iter().map(|b| (b.out_len * b.in_len) as u64).sum();
        let hard = model.hard_assignments().unwrap();
        assert_eq!(packed, hard[0].active_connections());
    }

    #[test]
    fn plans_round_trip_bit_exactly() {
        let model = Model::<f32>::build(&mini_dsc(4, GroupingMode::Learned, 3)).unwrap();
        let plan = compile(&model).unwrap();
        let dir = temp_dir("round-trip");
        save_plan(&plan, &dir).unwrap();
        let back = load_plan(&dir).unwrap();
        assert_eq!(plan, back);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tampered_plans_are_rejected() {
        let model = Model::<f32>::build(&bare_config(4)).unwrap();
        let plan = compile(&model).unwrap();
        let dir = temp_dir("tampered");
        save_plan(&plan, &dir).unwrap();

        let bin = dir.join(PLAN_WEIGHTS_FILE);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&bin, &bytes).unwrap();
        match load_plan(&dir) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("sha256"), "{reason}"),
            other => panic!("expected checksum failure, got {:?}", other.map(|p| p.name)),
        }

        save_plan(&plan, &dir).unwrap();
        bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&bin, &bytes).unwrap();
        match load_plan(&dir) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected length failure, got {:?}", other.map(|p| p.name)),
        }

        save_plan(&plan, &dir).unwrap();
        let manifest = dir.join(PLAN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
        match load_plan(&dir) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("version"), "{reason}"),
            other => panic!("expected version failure, got {:?}", other.map(|p| p.name)),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn permutation_pairs() -> impl Strategy<Value = (Permutation, Permutation)> {
        (1usize..=12)
            .prop_flat_map(|n| {
                let base: Vec<usize> = (0..n).collect();
                (Just(base.clone()).prop_shuffle(), Just(base).prop_shuffle())
            })
            .prop_map(|(p, q)| {
                (Permutation::from_vec(p).unwrap(), Permutation::from_vec(q).unwrap())
            })
    }

    proptest! {
        #[test]
        fn inversion_is_an_involution_that_undoes_gathers((p, _) in permutation_pairs()) {
            let x: Vec<usize> = (100..100 + p.len()).collect();
            let inv = p.inverse();
            prop_assert_eq!(inv.gather(&p.gather(&x).unwrap()).unwrap(), x);
            prop_assert_eq!(inv.inverse(), p);
        }

        #[test]
        fn merging_collapses_chained_gathers((p, q) in permutation_pairs()) {
            let x: Vec<usize> = (0..p.len()).map(|i| 7 * i + 3).collect();
            let merged = p.merge(&q).unwrap();
            let chained = merged.gather(&p.gather(&x).unwrap()).unwrap();
            prop_assert_eq!(chained, q.gather(&x).unwrap());
            prop_assert_eq!(p.merge(&p).unwrap(), Permutation::identity(p.len()));
        }

        #[test]
        fn group_sort_is_a_stable_partition(
            (groups, assignment) in (1usize..=6)
                .prop_flat_map(|g| (Just(g), proptest::collection::vec(0..g, 0..=24))),
        ) {
            let (perm, spans) = group_sort(&assignment, groups);
            prop_assert_eq!(spans.len(), groups);
            let mut cursor = 0;
            for (g, span) in spans.iter().enumerate() {
                prop_assert_eq!(span.offset, cursor);
                cursor += span.len;
                let members = &perm.index()[span.offset..span.offset + span.len];
                prop_assert!(members.iter().all(|&i| assignment[i] == g));
                // Stable: original positions ascend within each span.
                prop_assert!(members.windows(2).all(|w| w[0] < w[1]));
            }
            prop_assert_eq!(cursor, assignment.len());
        }
    }
}
