//! Full forward pass: patch encoder, hierarchical slots, slot-aware queries
//! and the query decoder.

use crate::detector::{Detector, DetectorConfig, DetectorNodes, QuerySet};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hsa::{Hsa, HsaConfig, HsaNodes, HsaOutput, SlotMapper};
use crate::image::Image;
use crate::nn::ParamSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub hsa: HsaConfig,
    /// Without slots the decoder sees the plain query embeddings.
    pub use_hsa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { detector: DetectorConfig::default(), hsa: HsaConfig::default(), use_hsa: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if !self.use_hsa {
            return Ok(());
        }
        self.hsa.validate()?;
        let fine = self.hsa.fine_slots();
        if !self.detector.queries.is_multiple_of(fine) {
            return Err(Error::Config {
                key: "queries".into(),
                reason: format!("{} queries not divisible by n^depth = {fine}", self.detector.queries),
            });
        }
        if self.hsa.dim != self.detector.dim {
            return Err(Error::Config {
                key: "dim".into(),
                reason: format!("slot dim {} differs from token dim {}", self.hsa.dim, self.detector.dim),
            });
        }
        Ok(())
    }

    /// Query rows fed by each fine slot.
    pub fn segment(&self) -> usize {
        self.detector.queries / self.hsa.fine_slots()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub detector: Detector,
    pub hsa: Hsa,
    pub mapper: SlotMapper,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub tokens: NodeId,
    pub grid: (usize, usize),
    pub hsa: Option<HsaNodes>,
    /// Queries entering the decoder.
    pub queries: NodeId,
    pub det: DetectorNodes,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let segment = if config.use_hsa { config.segment() } else { 1 };
        Ok(Self {
            config,
            detector: Detector::new(config.detector),
            hsa: Hsa::new(config.hsa),
            mapper: SlotMapper::new(config.hsa.dim, config.detector.query_dim, segment),
        })
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut params = ParamSet::new();
        self.detector.init(&mut params, &mut rng.fork(0));
        if self.config.use_hsa {
            self.hsa.init(&mut params, &mut rng.fork(1));
            self.mapper.init(&mut params, &mut rng.fork(2));
        }
        params
    }

    /// Slots read a detached copy of the tokens, so reconstruction trains the
    /// slot modules only.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, image: &Image, rng: &mut Rng) -> Result<ForwardNodes> {
        let (tokens, grid) = self.detector.encode_node(g, params, image)?;
        let q_obj = self.detector.query_node(g, params)?;
        let (hsa, queries) = if self.config.use_hsa {
            let h = g.detach(tokens);
            let nodes = self.hsa.forward_node(g, params, h, grid, rng)?;
            let fused = self.mapper.fuse_node(g, params, q_obj, nodes.fine_slots)?;
            (Some(nodes), fused)
        } else {
            (None, q_obj)
        };
        let det = self.detector.detect_node(g, params, tokens, queries)?;
        Ok(ForwardNodes { tokens, grid, hsa, queries, det })
    }

    /// Reconstruction loss averaged over tokens.
    pub fn rec_loss_node(&self, g: &mut Graph, nodes: &ForwardNodes) -> Option<NodeId> {
        let h = nodes.hsa?;
        let n = (nodes.grid.0 * nodes.grid.1) as f64;
        Some(g.scale(h.rec_loss, 1.0 / n))
    }

    /// Weighted slots `w h` over the live tokens.
    pub fn weighted_slots_node(&self, g: &mut Graph, nodes: &ForwardNodes) -> Result<Option<NodeId>> {
        match nodes.hsa {
            Some(h) => Ok(Some(g.matmul(h.weights, nodes.tokens)?)),
            None => Ok(None),
        }
    }

    pub fn predict(&self, params: &ParamSet, image: &Image, rng: &mut Rng) -> Result<(QuerySet, Option<HsaOutput>)> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, params, image, rng)?;
        let qs = self.detector.query_set(&g, &nodes.det)?;
        let hsa = nodes.hsa.map(|h| self.hsa.output(&g, &h));
        Ok((qs, hsa))
    }
}
