//! Hierarchical slot awareness: coarse slots, per-slot refinement into fine
//! slots, two reconstruction terms, and fusion of fine slots into the
//! detector's object queries.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, ParamSet};
use crate::rng::Rng;
use crate::slots::{sum_squared_error, AttentionAxis, BroadcastDecoder, DecodedNodes, FeatureMap, SlotAttention};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsaConfig {
    /// 1 (plain slot attention) or 2.
    pub depth: usize,
    /// Slots per level.
    pub n: usize,
    pub iters: usize,
    pub dim: usize,
    pub axis: AttentionAxis,
    pub learn_init: bool,
}

impl Default for HsaConfig {
    fn default() -> Self {
        Self { depth: 2, n: 5, iters: 3, dim: 16, axis: AttentionAxis::Tokens, learn_init: true }
    }
}

impl HsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.depth) {
            return Err(Error::Config { key: "depth".into(), reason: format!("must be 1 or 2, got {}", self.depth) });
        }
        if self.n < 2 {
            return Err(Error::Config { key: "n".into(), reason: format!("must be >= 2, got {}", self.n) });
        }
        if self.iters == 0 {
            return Err(Error::Config { key: "iters".into(), reason: "must be >= 1".into() });
        }
        Ok(())
    }

    /// `n^depth`.
    pub fn fine_slots(&self) -> usize {
        self.n.pow(self.depth as u32)
    }
}

/// Plain-value result of a hierarchical decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct HsaOutput {
    pub coarse_slots: Tensor,
    pub fine_slots: Tensor,
    pub coarse_masks: Tensor,
    pub fine_masks: Tensor,
    pub coarse_recon: Tensor,
    pub fine_recon: Tensor,
    /// Fine masks renormalized across tokens; rows sum to one.
    pub weights: Tensor,
}

/// Tape handles for one decomposition.
#[derive(Debug, Clone, Copy)]
pub struct HsaNodes {
    pub coarse_slots: NodeId,
    pub fine_slots: NodeId,
    pub coarse: DecodedNodes,
    pub fine: DecodedNodes,
    pub weights: NodeId,
    pub rec_coarse: NodeId,
    pub rec_fine: Option<NodeId>,
    /// Sum of the per-level reconstruction errors.
    pub rec_loss: NodeId,
}

#[derive(Debug, Clone)]
pub struct Hsa {
    pub config: HsaConfig,
    pub attention: SlotAttention,
    pub coarse_decoder: BroadcastDecoder,
    pub fine_decoder: BroadcastDecoder,
}

impl Hsa {
    pub fn new(config: HsaConfig) -> Self {
        let mut attention = SlotAttention::new("hsa.sa", config.dim, config.iters);
        attention.axis = config.axis;
        attention.learn_init = config.learn_init;
        Self {
            config,
            attention,
            coarse_decoder: BroadcastDecoder::new("hsa.dec1", config.dim),
            fine_decoder: BroadcastDecoder::new("hsa.dec2", config.dim),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.attention.init(params, rng);
        self.coarse_decoder.init(params, rng);
        if self.config.depth == 2 {
            self.fine_decoder.init(params, rng);
        }
    }

    /// Decomposes `features [N,d]`. Level two refines each coarse slot's own
    /// reconstruction map with freshly sampled slots.
    pub fn forward_node(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        features: NodeId,
        grid: (usize, usize),
        rng: &mut Rng,
    ) -> Result<HsaNodes> {
        let n_tokens = grid.0 * grid.1;
        if g.value(features).cols() != self.config.dim || g.value(features).rows() != n_tokens {
            return Err(shape_err(
                "hsa_decompose",
                format!("features {:?}, expected {n_tokens}x{}", g.value(features).shape(), self.config.dim),
            ));
        }
        let n = self.config.n;
        let coarse_slots = self.attention.run_node(g, params, features, n, rng)?;
        let coarse = self.coarse_decoder.decode_node(g, params, coarse_slots, grid)?;
        let rec_coarse = sum_squared_error(g, coarse.combined, features)?;
        if self.config.depth == 1 {
            let weights = token_weights(g, coarse.masks)?;
            return Ok(HsaNodes {
                coarse_slots,
                fine_slots: coarse_slots,
                coarse,
                fine: coarse,
                weights,
                rec_coarse,
                rec_fine: None,
                rec_loss: rec_coarse,
            });
        }
        let mut fine_parts = Vec::with_capacity(n);
        for k in 0..n {
            let region = g.slice_rows(coarse.recon, k * n_tokens, n_tokens)?;
            fine_parts.push(self.attention.run_node(g, params, region, n, rng)?);
        }
        let fine_slots = g.concat_rows(&fine_parts)?;
        let fine = self.fine_decoder.decode_node(g, params, fine_slots, grid)?;
        let rec_fine = sum_squared_error(g, fine.combined, features)?;
        let weights = token_weights(g, fine.masks)?;
        let rec_loss = g.add(rec_coarse, rec_fine)?;
        Ok(HsaNodes { coarse_slots, fine_slots, coarse, fine, weights, rec_coarse, rec_fine: Some(rec_fine), rec_loss })
    }

    pub fn output(&self, g: &Graph, nodes: &HsaNodes) -> HsaOutput {
        HsaOutput {
            coarse_slots: g.value(nodes.coarse_slots).clone(),
            fine_slots: g.value(nodes.fine_slots).clone(),
            coarse_masks: g.value(nodes.coarse.masks).clone(),
            fine_masks: g.value(nodes.fine.masks).clone(),
            coarse_recon: g.value(nodes.coarse.combined).clone(),
            fine_recon: g.value(nodes.fine.combined).clone(),
            weights: g.value(nodes.weights).clone(),
        }
    }
}

/// Masks renormalized over tokens. The floor keeps a slot whose mask has
/// underflowed everywhere at uniform weights instead of dividing by zero.
fn token_weights(g: &mut Graph, masks: NodeId) -> Result<NodeId> {
    let floored = g.offset(masks, MASK_FLOOR);
    g.normalize_rows_sum(floored)
}

pub const MASK_FLOOR: f64 = 1e-12;

pub fn hsa_decompose(features: &FeatureMap, config: &HsaConfig, rng: &mut Rng, params: &ParamSet) -> Result<HsaOutput> {
    config.validate()?;
    let hsa = Hsa::new(*config);
    let mut g = Graph::new();
    let h = g.constant(features.tokens.clone());
    let nodes = hsa.forward_node(&mut g, params, h, features.grid, rng)?;
    Ok(hsa.output(&g, &nodes))
}

/// `||h1 - h||^2 + ||h2 - h||^2`; a depth-1 output carries one term.
pub fn hsa_rec_loss(output: &HsaOutput, features: &FeatureMap, depth: usize) -> Result<f64> {
    let err = |r: &Tensor| -> Result<f64> { Ok(r.zip_map(&features.tokens, |a, b| (a - b) * (a - b))?.sum()) };
    let coarse = err(&output.coarse_recon)?;
    if depth == 1 {
        Ok(coarse)
    } else {
        Ok(coarse + err(&output.fine_recon)?)
    }
}

/// Linear map from one slot to a segment of `segment` query rows.
#[derive(Debug, Clone)]
pub struct SlotMapper {
    pub linear: Linear,
    pub segment: usize,
    pub query_dim: usize,
}

impl SlotMapper {
    pub fn new(slot_dim: usize, query_dim: usize, segment: usize) -> Self {
        Self { linear: Linear::new("fuse.map", slot_dim, segment * query_dim), segment, query_dim }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        self.linear.init(params, rng, 0.5);
    }

    /// `Q_obj + f_map(z)` with segment `i` of the queries receiving slot `i`.
    pub fn fuse_node(&self, g: &mut Graph, params: &ParamSet, queries: NodeId, slots: NodeId) -> Result<NodeId> {
        let (m, k) = (g.value(queries).rows(), g.value(slots).rows());
        if k == 0 || m != k * self.segment {
            return Err(Error::Config {
                key: "queries".into(),
                reason: format!("{m} queries cannot be split into {k} segments of {}", self.segment),
            });
        }
        let mapped = self.linear.forward(g, params, slots)?;
        let mapped = g.reshape(mapped, &[m, self.query_dim])?;
        g.add(queries, mapped)
    }
}

pub fn fuse_slot_queries(queries: &Tensor, slots: &Tensor, mapper: &SlotMapper, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let z = g.constant(slots.clone());
    let out = mapper.fuse_node(&mut g, params, q, z)?;
    Ok(g.value(out).clone())
}
