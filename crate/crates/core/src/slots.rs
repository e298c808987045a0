//! Single-level slot attention with a spatial-broadcast decoder.
//!
//! Slots are refined by attention over the token features followed by a GRU
//! update. The decoder broadcasts every slot over the token grid, appends a
//! fixed positional ramp and emits `d` reconstruction channels plus one mask
//! logit; masks compete across slots per token.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{init_matrix, GruCell, Linear, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Token features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `N x d`.
    pub tokens: Tensor,
    /// `(rows, cols)` of the token grid, `rows * cols = N`.
    pub grid: (usize, usize),
}

impl FeatureMap {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != tokens.rows() || tokens.rows() == 0 {
            return Err(shape_err("feature_map", format!("grid {grid:?} vs {} tokens", tokens.rows())));
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotSet {
    /// `K x d`.
    pub slots: Tensor,
    pub level: u8,
    pub iters: usize,
}

/// Competition masks, column-stochastic across slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    /// `K x N`.
    pub masks: Tensor,
    /// `K x N` pre-softmax logits.
    pub logits: Tensor,
}

/// Axis along which attention logits are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionAxis {
    /// Softmax over tokens for each slot, as the slot update rule is printed.
    #[default]
    Tokens,
    /// Softmax over slots for each token, then a weighted mean over tokens.
    Slots,
}

/// Four linear ramps (left, right, top, bottom) over a `rows x cols` grid.
pub fn position_ramps(grid: (usize, usize)) -> Tensor {
    let (rows, cols) = grid;
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let mut data = Vec::with_capacity(rows * cols * 4);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (coord(c, cols), coord(r, rows));
            data.extend_from_slice(&[x, 1.0 - x, y, 1.0 - y]);
        }
    }
    Tensor::from_parts(vec![rows * cols, 4], data)
}

/// Slot attention module. Parameters live under `prefix` in a [`ParamSet`]:
/// `wq`, `wk`, `wv` projections, a GRU, and the Gaussian slot prior
/// `init_mu`, `init_logvar`.
#[derive(Debug, Clone)]
pub struct SlotAttention {
    pub prefix: String,
    pub dim: usize,
    pub iters: usize,
    pub axis: AttentionAxis,
    /// When false the slot prior enters the tape as a constant.
    pub learn_init: bool,
}

impl SlotAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, iters: usize) -> Self {
        Self { prefix: prefix.into(), dim, iters, axis: AttentionAxis::Tokens, learn_init: true }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn proj(&self, part: &str) -> Linear {
        Linear::new(self.name(part), self.dim, self.dim).without_bias()
    }

    fn gru(&self) -> GruCell {
        GruCell::new(self.name("gru"), self.dim)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        for part in ["wq", "wk", "wv"] {
            self.proj(part).init(params, rng, 1.0);
        }
        self.gru().init(params, rng);
        params.insert(&self.name("init_mu"), init_matrix(rng, 1, self.dim, 0.5));
        params.insert(&self.name("init_logvar"), Tensor::filled(&[1, self.dim], (0.25f64).ln()));
    }

    fn prior(&self, g: &mut Graph, params: &ParamSet, part: &str) -> Result<NodeId> {
        if self.learn_init {
            g.param(params, &self.name(part))
        } else {
            Ok(g.constant(params.get(&self.name(part))?.clone()))
        }
    }

    /// Samples `k` slots as `mu + exp(logvar / 2) * eps`.
    pub fn init_slots_node(&self, g: &mut Graph, params: &ParamSet, k: usize, rng: &mut Rng) -> Result<NodeId> {
        let eps = g.constant(Tensor::from_parts(vec![k, self.dim], rng.normals(k * self.dim)));
        let mu = self.prior(g, params, "init_mu")?;
        let logvar = self.prior(g, params, "init_logvar")?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let ones = g.constant(Tensor::filled(&[k, 1], 1.0));
        let std_k = g.matmul(ones, std)?;
        let noise = g.mul(eps, std_k)?;
        g.add_row(noise, mu)
    }

    /// Key/value projections of the features, computed once per run.
    pub fn project_inputs(&self, g: &mut Graph, params: &ParamSet, features: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(features).cols() != self.dim {
            return Err(shape_err("slot_attention", format!("features have {} columns, slots {}", g.value(features).cols(), self.dim)));
        }
        let k = self.proj("wk").forward(g, params, features)?;
        let v = self.proj("wv").forward(g, params, features)?;
        Ok((k, v))
    }

    /// One refinement of `slots` given projected keys and values.
    pub fn step_node(&self, g: &mut Graph, params: &ParamSet, slots: NodeId, keys: NodeId, values: NodeId) -> Result<NodeId> {
        if g.value(slots).cols() != self.dim {
            return Err(shape_err("slot_attention_step", format!("slot dim {} vs {}", g.value(slots).cols(), self.dim)));
        }
        let q = self.proj("wq").forward(g, params, slots)?;
        let logits = g.matmul_nt(q, keys)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let attn = match self.axis {
            AttentionAxis::Tokens => g.softmax_rows(logits),
            AttentionAxis::Slots => {
                let per_token = g.softmax_cols(logits);
                let eps = g.offset(per_token, 1e-8);
                g.normalize_rows_sum(eps)?
            }
        };
        let updates = g.matmul(attn, values)?;
        self.gru().forward(g, params, updates, slots)
    }

    /// Samples `k` slots and refines them `self.iters` times.
    pub fn run_node(&self, g: &mut Graph, params: &ParamSet, features: NodeId, k: usize, rng: &mut Rng) -> Result<NodeId> {
        let (keys, values) = self.project_inputs(g, params, features)?;
        let mut slots = self.init_slots_node(g, params, k, rng)?;
        for _ in 0..self.iters {
            slots = self.step_node(g, params, slots, keys, values)?;
        }
        Ok(slots)
    }
}

/// Spatial-broadcast MLP: `[slot ; ramp] -> tanh(2d) -> tanh(2d) -> d + 1`.
#[derive(Debug, Clone)]
pub struct BroadcastDecoder {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
}

/// Decoder outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DecodedNodes {
    /// `(K*N) x d`, row `k*N + i`.
    pub recon: NodeId,
    /// `K x N`.
    pub logits: NodeId,
    /// `K x N`, softmax across slots per token.
    pub masks: NodeId,
    /// `N x d` mask-weighted reconstruction.
    pub combined: NodeId,
}

impl BroadcastDecoder {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim, hidden: 2 * dim }
    }

    fn layers(&self) -> [Linear; 4] {
        let p = |s: &str| format!("{}.{s}", self.prefix);
        [
            Linear::new(p("in_slot"), self.dim, self.hidden).without_bias(),
            Linear::new(p("in_pos"), 4, self.hidden),
            Linear::new(p("hidden"), self.hidden, self.hidden),
            Linear::new(p("out"), self.hidden, self.dim + 1),
        ]
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let [a, b, c, d] = self.layers();
        a.init(params, rng, 1.0);
        b.init(params, rng, 1.0);
        c.init(params, rng, 1.0);
        d.init(params, rng, 0.5);
    }

    /// Decodes `slots [K,d]` over a token grid. The first layer is split into
    /// its slot and position parts so the broadcast sum is formed once.
    pub fn decode_node(&self, g: &mut Graph, params: &ParamSet, slots: NodeId, grid: (usize, usize)) -> Result<DecodedNodes> {
        let [l_slot, l_pos, l_hidden, l_out] = self.layers();
        let k = g.value(slots).rows();
        let n = grid.0 * grid.1;
        let ramps = g.constant(position_ramps(grid));
        let a = l_slot.forward(g, params, slots)?;
        let b = l_pos.forward(g, params, ramps)?;
        let pre = g.outer_add(a, b)?;
        let h1 = g.tanh(pre);
        let h2 = l_hidden.forward(g, params, h1)?;
        let h2 = g.tanh(h2);
        let out = l_out.forward(g, params, h2)?;
        let recon = g.slice_cols(out, 0, self.dim)?;
        let logit_col = g.slice_cols(out, self.dim, 1)?;
        let logits = g.reshape(logit_col, &[k, n])?;
        let masks = g.softmax_cols(logits);
        let combined = g.mix_slots(recon, masks)?;
        Ok(DecodedNodes { recon, logits, masks, combined })
    }
}

/// `||recon - target||^2` summed over every entry.
pub fn sum_squared_error(g: &mut Graph, recon: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = g.sub(recon, target)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

pub fn init_slots(rng: &mut Rng, k: usize, module: &SlotAttention, params: &ParamSet) -> Result<SlotSet> {
    let mut g = Graph::new();
    let node = module.init_slots_node(&mut g, params, k, rng)?;
    Ok(SlotSet { slots: g.value(node).clone(), level: 1, iters: 0 })
}

pub fn slot_attention_step(slots: &SlotSet, features: &FeatureMap, module: &SlotAttention, params: &ParamSet) -> Result<SlotSet> {
    let mut g = Graph::new();
    let h = g.constant(features.tokens.clone());
    let z = g.constant(slots.slots.clone());
    let (keys, values) = module.project_inputs(&mut g, params, h)?;
    let next = module.step_node(&mut g, params, z, keys, values)?;
    Ok(SlotSet { slots: g.value(next).clone(), level: slots.level, iters: slots.iters + 1 })
}

pub fn run_slot_attention(features: &FeatureMap, k: usize, module: &SlotAttention, rng: &mut Rng, params: &ParamSet) -> Result<SlotSet> {
    let mut g = Graph::new();
    let h = g.constant(features.tokens.clone());
    let node = module.run_node(&mut g, params, h, k, rng)?;
    Ok(SlotSet { slots: g.value(node).clone(), level: 1, iters: module.iters })
}

/// Per-slot reconstructions as `K x N x d` and the competition masks.
pub fn decode_slots(slots: &SlotSet, grid: (usize, usize), decoder: &BroadcastDecoder, params: &ParamSet) -> Result<(Tensor, MaskStack)> {
    let mut g = Graph::new();
    let z = g.constant(slots.slots.clone());
    let out = decoder.decode_node(&mut g, params, z, grid)?;
    let k = slots.slots.rows();
    let n = grid.0 * grid.1;
    let recon = g.value(out.recon).clone().reshaped(&[k, n, decoder.dim])?;
    let masks = MaskStack { masks: g.value(out.masks).clone(), logits: g.value(out.logits).clone() };
    Ok((recon, masks))
}

/// Mask-weighted reconstruction and its summed squared error against `features`.
pub fn reconstruct_and_loss(recon: &Tensor, masks: &MaskStack, features: &FeatureMap) -> Result<(Tensor, f64)> {
    let (k, n) = (masks.masks.rows(), masks.masks.cols());
    let d = features.dim();
    if recon.len() != k * n * d || n != features.len() {
        return Err(shape_err("reconstruct_and_loss", format!("recon {:?}, masks {k}x{n}", recon.shape())));
    }
    let mut g = Graph::new();
    let r = g.constant(recon.clone().reshaped(&[k * n, d])?);
    let m = g.constant(masks.masks.clone());
    let h = g.constant(features.tokens.clone());
    let combined = g.mix_slots(r, m)?;
    let loss = sum_squared_error(&mut g, combined, h)?;
    Ok((g.value(combined).clone(), g.scalar(loss)))
}
