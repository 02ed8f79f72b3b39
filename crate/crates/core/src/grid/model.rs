use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{stream_dims, ColumnKind, ConnectionMask, Fusion, GridSpec, Topology};
use super::GridError;
use crate::regularization::DropMask;
use crate::tensor::{
    BatchNormConfig, BatchNormState, ConvGeometry, NormMode, Scalar, Shape, Tape, Tensor, Var,
};

/// `(stream, column)`.
pub type BlockKey = (usize, usize);

/// One learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<T>,
    /// Not reachable under the connection mask: kept in storage, never
    /// updated.
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct ResUnit {
    bn1: BnRef,
    conv1: ConvRef,
    bn2: BnRef,
    conv2: ConvRef,
}

#[derive(Clone, Copy, Debug)]
struct VerticalUnit {
    bn: BnRef,
    conv: ConvRef,
}

#[derive(Clone, Copy, Debug, Default)]
struct Block {
    res: Option<ResUnit>,
    vertical: Option<VerticalUnit>,
    proj: Option<ConvRef>,
}

/// The addends fused into one block, each `None` when absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockAddends {
    pub identity: Option<Var>,
    pub residual: Option<Var>,
    pub vertical: Option<Var>,
}

/// Result of [`GridModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Tape handle of every parameter, aligned with [`GridModel::params`].
    pub params: Vec<Var>,
    pub stem: Var,
    pub blocks: BTreeMap<BlockKey, Var>,
    pub addends: BTreeMap<BlockKey, BlockAddends>,
}

/// Fuses the terms of a block. With sum fusion every present term is added.
/// With a projection `(weight, optional bias)` the horizontal terms are summed, the
/// result is concatenated with the vertical term on channels and mapped back
/// through the 1x1 convolution; both sides must then be present.
pub fn fuse_block<T: Scalar>(
    tape: &mut Tape<T>,
    addends: &BlockAddends,
    projection: Option<(Var, Option<Var>)>,
) -> Result<Var, GridError> {
    let horizontal: Vec<Var> = addends.identity.into_iter().chain(addends.residual).collect();
    match projection {
        None => {
            let terms: Vec<Var> = horizontal.into_iter().chain(addends.vertical).collect();
            match terms.as_slice() {
                [] => Err(GridError::NoInput),
                [single] => Ok(*single),
                _ => Ok(tape.add(&terms)?),
            }
        }
        Some((w, b)) => {
            let h = match horizontal.as_slice() {
                [] => return Err(GridError::NoInput),
                [single] => *single,
                _ => tape.add(&horizontal)?,
            };
            let v = addends.vertical.ok_or(GridError::NoInput)?;
            let cat = tape.concat_channels(&[h, v])?;
            Ok(tape.conv2d(cat, w, b, ConvGeometry::same(1))?)
        }
    }
}

/// A grid with its parameters, batch-normalization buffers and the
/// structure derived from its spec and connection mask.
#[derive(Clone, Debug)]
pub struct GridModel<T> {
    spec: GridSpec,
    mask: ConnectionMask,
    input_hw: (usize, usize),
    structure: Topology,
    active: Topology,
    live: Vec<Vec<bool>>,
    params: Vec<Param<T>>,
    buffers: Vec<(String, BatchNormState<T>)>,
    stem_bn: BnRef,
    stem_conv: ConvRef,
    blocks: BTreeMap<BlockKey, Block>,
    head: ConvRef,
    eval_order: Vec<BlockKey>,
    bn_cfg: BatchNormConfig,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, BatchNormState<T>)>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, shape: Shape, value: Vec<T>) -> usize {
        self.params.push(Param {
            name,
            shape,
            value,
            frozen: false,
        });
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnRef {
        let shape = Shape::new(1, c, 1, 1);
        let gamma = self.push(format!("{prefix}.gamma"), shape, vec![T::one(); c]);
        let beta = self.push(format!("{prefix}.beta"), shape, vec![T::zero(); c]);
        self.buffers.push((prefix.to_string(), BatchNormState::new(c)));
        BnRef {
            gamma,
            beta,
            state: self.buffers.len() - 1,
        }
    }

    /// Weight `(d0, d1, k, k)` drawn from `N(0, 2 / fan_in)`, optional zero
    /// bias of `bias` channels.
    fn conv(&mut self, prefix: &str, (d0, d1, k): (usize, usize, usize), fan_in: usize, bias: Option<usize>) -> ConvRef {
        let shape = Shape::new(d0, d1, k, k);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
        let value = (0..shape.numel())
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        let weight = self.push(format!("{prefix}.weight"), shape, value);
        let bias = bias.map(|c| self.push(format!("{prefix}.bias"), Shape::new(1, c, 1, 1), vec![T::zero(); c]));
        ConvRef { weight, bias }
    }
}

impl<T: Scalar> GridModel<T> {
    /// Allocates and initializes every parameter. `input_hw` is the
    /// training resolution used to record stream shapes; other sizes are
    /// accepted by [`forward`](Self::forward) as long as they are large
    /// enough.
    pub fn build(spec: &GridSpec, input_hw: (usize, usize), seed: u64) -> Result<Self, GridError> {
        spec.validate()?;
        check_input(spec, input_hw)?;
        let mask = spec.connection_mask()?;
        let structure = Topology::of(spec);
        let active = structure.propagate(spec, &mask);
        let nc = spec.n_columns();
        if nc > 0 && !active.exists[0][nc - 1] {
            return Err(GridError::OutputUnreachable);
        }
        let eval_order = eval_order(spec);
        let live = co_reachable(spec, &active, &eval_order);

        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let f0 = spec.base_features;
        let stem_bn = b.bn("stem.bn", spec.in_channels);
        let stem_conv = b.conv("stem.conv", (f0, spec.in_channels, 3), spec.in_channels * 9, Some(f0));
        let mut blocks = BTreeMap::new();
        let mut keys: Vec<BlockKey> = eval_order.clone();
        keys.sort_unstable();
        for (i, j) in keys {
            if !structure.exists[i][j] {
                continue;
            }
            let f = spec.features(i);
            // Below stream 0 every path to the head runs through a batch
            // normalization, which cancels any per-channel constant.
            let bias = (i == 0).then_some(f);
            let mut block = Block::default();
            if structure.has_horizontal[i][j] {
                let p = format!("block.{i}.{j}.res");
                block.res = Some(ResUnit {
                    bn1: b.bn(&format!("{p}.bn1"), f),
                    conv1: b.conv(&format!("{p}.conv1"), (f, f, 3), 9 * f, None),
                    bn2: b.bn(&format!("{p}.bn2"), f),
                    conv2: b.conv(&format!("{p}.conv2"), (f, f, 3), 9 * f, bias),
                });
            }
            if structure.has_vertical[i][j] {
                block.vertical = Some(match spec.columns[j] {
                    ColumnKind::Sub => {
                        let src = spec.features(i - 1);
                        let p = format!("block.{i}.{j}.sub");
                        VerticalUnit {
                            bn: b.bn(&format!("{p}.bn"), src),
                            conv: b.conv(&format!("{p}.conv"), (f, src, 3), 9 * src, bias),
                        }
                    }
                    ColumnKind::Up => {
                        let src = spec.features(i + 1);
                        let p = format!("block.{i}.{j}.up");
                        VerticalUnit {
                            bn: b.bn(&format!("{p}.bn"), src),
                            // Each output pixel sees about a quarter of the
                            // kernel taps of a stride-2 transposed conv.
                            conv: b.conv(&format!("{p}.deconv"), (src, f, 3), (9 * src).div_ceil(4), bias),
                        }
                    }
                });
            }
            if spec.fusion == Fusion::Concat && block.res.is_some() && block.vertical.is_some() {
                block.proj = Some(b.conv(&format!("block.{i}.{j}.proj"), (f, 2 * f, 1), 2 * f, bias));
            }
            blocks.insert((i, j), block);
        }
        let head = b.conv("head.conv", (spec.num_classes, f0, 1), f0, Some(spec.num_classes));

        let mut model = GridModel {
            spec: spec.clone(),
            mask,
            input_hw,
            structure,
            active,
            live,
            params: b.params,
            buffers: b.buffers,
            stem_bn,
            stem_conv,
            blocks,
            head,
            eval_order,
            bn_cfg: BatchNormConfig::default(),
        };
        model.mark_frozen();
        Ok(model)
    }

    fn mark_frozen(&mut self) {
        let mut used = vec![false; self.params.len()];
        let mark_bn = |u: &mut Vec<bool>, r: BnRef| {
            u[r.gamma] = true;
            u[r.beta] = true;
        };
        let mark_conv = |u: &mut Vec<bool>, r: ConvRef| {
            u[r.weight] = true;
            if let Some(b) = r.bias {
                u[b] = true;
            }
        };
        mark_bn(&mut used, self.stem_bn);
        mark_conv(&mut used, self.stem_conv);
        mark_conv(&mut used, self.head);
        for (&(i, j), block) in &self.blocks {
            if !self.live[i][j] {
                continue;
            }
            let horizontal = self.active.has_horizontal[i][j];
            if let Some(r) = block.res.filter(|_| horizontal && self.mask.residual_on[i][j]) {
                mark_bn(&mut used, r.bn1);
                mark_conv(&mut used, r.conv1);
                mark_bn(&mut used, r.bn2);
                mark_conv(&mut used, r.conv2);
            }
            if let Some(v) = block.vertical.filter(|_| self.active.has_vertical[i][j]) {
                mark_bn(&mut used, v.bn);
                mark_conv(&mut used, v.conv);
            }
            if let Some(p) = block.proj {
                mark_conv(&mut used, p);
            }
        }
        for (p, u) in self.params.iter_mut().zip(used) {
            p.frozen = !u;
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mask(&self) -> &ConnectionMask {
        &self.mask
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    /// Blocks in evaluation order: columns left to right, top to bottom in
    /// subsampling columns and bottom to top in upsampling columns. Includes
    /// blocks that are switched off by the mask.
    pub fn eval_order(&self) -> &[BlockKey] {
        &self.eval_order
    }

    /// `(F_i, H_i, W_i)` of every stream at the build resolution.
    pub fn stream_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.spec.n_streams)
            .map(|i| stream_dims(&self.spec, i, self.input_hw))
            .collect()
    }

    /// Structurally present blocks.
    pub fn structure(&self) -> &Topology {
        &self.structure
    }

    /// Blocks reachable from the input under the mask.
    pub fn active(&self) -> &Topology {
        &self.active
    }

    /// Blocks that are active and feed the output.
    pub fn is_live(&self, i: usize, j: usize) -> bool {
        self.live[i][j]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Batch-normalization running statistics with their layer names.
    pub fn buffers(&self) -> &[(String, BatchNormState<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.buffers
    }

    pub fn bn_config(&self) -> BatchNormConfig {
        self.bn_cfg
    }

    /// Copies the model into another precision.
    pub fn cast<U: Scalar>(&self) -> GridModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        GridModel {
            spec: self.spec.clone(),
            mask: self.mask.clone(),
            input_hw: self.input_hw,
            structure: self.structure.clone(),
            active: self.active.clone(),
            live: self.live.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    value: conv(&p.value),
                    frozen: p.frozen,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: conv(&s.running_mean),
                            running_var: conv(&s.running_var),
                        },
                    )
                })
                .collect(),
            stem_bn: self.stem_bn,
            stem_conv: self.stem_conv,
            blocks: self.blocks.clone(),
            head: self.head,
            eval_order: self.eval_order.clone(),
            bn_cfg: self.bn_cfg,
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Runs the grid on `input` (`[n, in_channels, h, w]`), recording every
    /// operation on `tape`. In train mode the batch-normalization running
    /// statistics are updated and `drop` (if any) switches residual mappings
    /// off.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mode: NormMode,
        drop: Option<&DropMask>,
    ) -> Result<ForwardOutput, GridError> {
        let xs = input.shape();
        if xs.c != self.spec.in_channels {
            return Err(GridError::InputChannels {
                expected: self.spec.in_channels,
                actual: xs.c,
            });
        }
        check_input(&self.spec, (xs.h, xs.w))?;
        let (ns, nc) = (self.spec.n_streams, self.spec.n_columns());
        if let Some(d) = drop {
            if d.keep.len() != ns || d.keep.iter().any(|r| r.len() != nc) {
                return Err(GridError::DropMaskShape {
                    mask_streams: d.keep.len(),
                    mask_columns: d.keep.first().map_or(0, Vec::len),
                    streams: ns,
                    columns: nc,
                });
            }
        }
        let drop = if mode == NormMode::Train { drop } else { None };
        let dims: Vec<(usize, usize, usize)> = (0..ns)
            .map(|i| stream_dims(&self.spec, i, (xs.h, xs.w)))
            .collect();
        let expected = |i: usize| Shape::new(xs.n, dims[i].0, dims[i].1, dims[i].2);

        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::from_vec(p.shape, p.value.clone()).expect("param sized by shape");
                if p.frozen {
                    tape.constant(t)
                } else {
                    tape.leaf(t.requiring_grad())
                }
            })
            .collect();
        let x = tape.constant(input.clone());
        let h = self.bn(tape, &params, self.stem_bn, x, mode)?;
        let stem = self.conv(tape, &params, self.stem_conv, h, ConvGeometry::same(3))?;

        let mut values: BTreeMap<BlockKey, Var> = BTreeMap::new();
        let mut addends_out = BTreeMap::new();
        let eval_scale = (mode == NormMode::Eval && self.spec.rescale_eval)
            .then(|| T::from_f64_lossy(self.spec.keep_prob));
        for k in 0..self.eval_order.len() {
            let (i, j) = self.eval_order[k];
            if !self.live[i][j] {
                continue;
            }
            let block = self.blocks[&(i, j)];
            let mut terms = BlockAddends::default();
            if self.active.has_horizontal[i][j] {
                let src = if j == 0 { stem } else { values[&(i, j - 1)] };
                if self.mask.identity_on[i][j] {
                    terms.identity = Some(src);
                }
                let kept = drop.is_none_or(|d| d.keeps(i, j));
                if let Some(res) = block.res.filter(|_| self.mask.residual_on[i][j] && kept) {
                    let mut r = self.residual(tape, &params, res, src, mode)?;
                    if let Some(s) = eval_scale {
                        r = tape.scale(r, s);
                    }
                    terms.residual = Some(r);
                }
            }
            if self.active.has_vertical[i][j] {
                let unit = block.vertical.expect("active vertical term is allocated");
                let target = (dims[i].1, dims[i].2);
                let (src, v) = match self.spec.columns[j] {
                    ColumnKind::Sub => {
                        let src = values[&(i - 1, j)];
                        let a = self.bn(tape, &params, unit.bn, src, mode)?;
                        let a = tape.relu(a);
                        let w = params[unit.conv.weight];
                        let b = unit.conv.bias.map(|b| params[b]);
                        (src, tape.conv2d_down(a, w, b, ConvGeometry::down(3))?)
                    }
                    ColumnKind::Up => {
                        let src = values[&(i + 1, j)];
                        let a = self.bn(tape, &params, unit.bn, src, mode)?;
                        let a = tape.relu(a);
                        let w = params[unit.conv.weight];
                        let b = unit.conv.bias.map(|b| params[b]);
                        (src, tape.deconv2d_up(a, w, b, ConvGeometry::down(3), target)?)
                    }
                };
                let v = if self.spec.vertical_residual {
                    let shortcut = match self.spec.columns[j] {
                        ColumnKind::Sub => tape.shortcut_down(src),
                        ColumnKind::Up => tape.shortcut_up(src, target)?,
                    };
                    tape.add(&[v, shortcut])?
                } else {
                    v
                };
                terms.vertical = Some(v);
            }
            let want = expected(i);
            let out = match block.proj {
                Some(p) => {
                    // Masked or dropped sides enter the concatenation as zeros.
                    let mut full = terms;
                    if full.identity.is_none() && full.residual.is_none() {
                        full.residual = Some(tape.constant(Tensor::zeros(want)));
                    }
                    if full.vertical.is_none() {
                        full.vertical = Some(tape.constant(Tensor::zeros(want)));
                    }
                    fuse_block(tape, &full, Some((params[p.weight], p.bias.map(|b| params[b]))))?
                }
                None => {
                    if terms == BlockAddends::default() {
                        // Only term was a dropped residual mapping.
                        tape.constant(Tensor::zeros(want))
                    } else {
                        fuse_block(tape, &terms, None)?
                    }
                }
            };
            let got = tape.shape(out);
            if got != want {
                return Err(GridError::ShapeDrift {
                    i,
                    j,
                    expected: want,
                    actual: got,
                });
            }
            values.insert((i, j), out);
            addends_out.insert((i, j), terms);
        }
        let last = if nc == 0 { stem } else { values[&(0, nc - 1)] };
        let logits = self.conv(tape, &params, self.head, last, ConvGeometry::same(1))?;
        Ok(ForwardOutput {
            logits,
            params,
            stem,
            blocks: values,
            addends: addends_out,
        })
    }

    /// Forward in eval mode on a fresh tape, returning the logits.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, GridError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, NormMode::Eval, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Gradient of every parameter after `tape.backward`, aligned with
    /// [`params`](Self::params). Frozen parameters get zeros.
    pub fn gradients(&self, tape: &Tape<T>, out: &ForwardOutput) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&out.params)
            .map(|(p, v)| match tape.grad(*v) {
                Some(g) if !p.frozen => g.to_vec(),
                _ => vec![T::zero(); p.value.len()],
            })
            .collect()
    }

    fn bn(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        r: BnRef,
        x: Var,
        mode: NormMode,
    ) -> Result<Var, GridError> {
        let cfg = self.bn_cfg;
        let state = &mut self.buffers[r.state].1;
        Ok(tape.batch_norm(x, params[r.gamma], params[r.beta], state, mode, &cfg)?)
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        r: ConvRef,
        x: Var,
        geom: ConvGeometry,
    ) -> Result<Var, GridError> {
        Ok(tape.conv2d(x, params[r.weight], r.bias.map(|b| params[b]), geom)?)
    }

    fn residual(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        r: ResUnit,
        x: Var,
        mode: NormMode,
    ) -> Result<Var, GridError> {
        let a = self.bn(tape, params, r.bn1, x, mode)?;
        let a = tape.relu(a);
        let a = self.conv(tape, params, r.conv1, a, ConvGeometry::same(3))?;
        let a = self.bn(tape, params, r.bn2, a, mode)?;
        let a = tape.relu(a);
        self.conv(tape, params, r.conv2, a, ConvGeometry::same(3))
    }
}

fn check_input(spec: &GridSpec, (h, w): (usize, usize)) -> Result<(), GridError> {
    let min = spec.min_input_side();
    if h < min || w < min {
        return Err(GridError::InputTooSmall {
            h,
            w,
            n_streams: spec.n_streams,
            min,
        });
    }
    Ok(())
}

pub(super) fn eval_order(spec: &GridSpec) -> Vec<BlockKey> {
    let ns = spec.n_streams;
    let mut order = Vec::with_capacity(ns * spec.n_columns());
    for (j, kind) in spec.columns.iter().enumerate() {
        match kind {
            ColumnKind::Sub => order.extend((0..ns).map(|i| (i, j))),
            ColumnKind::Up => order.extend((0..ns).rev().map(|i| (i, j))),
        }
    }
    order
}

/// Active blocks from which the output block is reachable.
fn co_reachable(spec: &GridSpec, active: &Topology, order: &[BlockKey]) -> Vec<Vec<bool>> {
    let (ns, nc) = (spec.n_streams, spec.n_columns());
    let mut live = vec![vec![false; nc]; ns];
    if nc == 0 {
        return live;
    }
    live[0][nc - 1] = active.exists[0][nc - 1];
    for &(i, j) in order.iter().rev() {
        if !live[i][j] {
            continue;
        }
        if active.has_horizontal[i][j] && j > 0 {
            live[i][j - 1] = true;
        }
        if active.has_vertical[i][j] {
            match spec.columns[j] {
                ColumnKind::Sub => live[i - 1][j] = true,
                ColumnKind::Up => live[i + 1][j] = true,
            }
        }
    }
    live
}

/// Serializable snapshot of where each parameter lives, used in reports and
/// checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
}

impl<T: Scalar> GridModel<T> {
    pub fn param_table(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: [p.shape.n, p.shape.c, p.shape.h, p.shape.w],
            })
            .collect()
    }
}

impl<T: Scalar> GridModel<T> {
    /// `(all_intermediates, block_outputs)` element counts of one train-mode
    /// forward of a single `input_hw` image without dropout. The first
    /// matches [`Tape::activation_count`] for that forward.
    pub fn activation_tally(&self, input_hw: (usize, usize)) -> (usize, usize) {
        let ns = self.spec.n_streams;
        let size: Vec<usize> = (0..ns)
            .map(|i| {
                let (f, h, w) = stream_dims(&self.spec, i, input_hw);
                f * h * w
            })
            .collect();
        let plane0 = input_hw.0 * input_hw.1;
        let mut all = (self.spec.in_channels + self.spec.base_features) * plane0;
        let mut blocks = 0;
        for &(i, j) in &self.eval_order {
            if !self.live[i][j] {
                continue;
            }
            let block = &self.blocks[&(i, j)];
            let out = size[i];
            let horizontal = self.active.has_horizontal[i][j];
            let identity = horizontal && self.mask.identity_on[i][j];
            let residual = horizontal && self.mask.residual_on[i][j] && block.res.is_some();
            let vertical = self.active.has_vertical[i][j];
            if residual {
                all += 6 * out;
            }
            if vertical {
                let src = match self.spec.columns[j] {
                    ColumnKind::Sub => i - 1,
                    ColumnKind::Up => i + 1,
                };
                all += 2 * size[src] + out;
                if self.spec.vertical_residual {
                    all += 2 * out;
                }
            }
            if block.proj.is_some() {
                if identity && residual {
                    all += out;
                }
                all += 3 * out;
            } else if usize::from(identity) + usize::from(residual) + usize::from(vertical) >= 2 {
                all += out;
            }
            blocks += out;
        }
        all += self.spec.num_classes * plane0;
        (all, blocks)
    }
}
