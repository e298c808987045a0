//! Class-guided slot contrast.
//!
//! Decoder queries of the same predicted class are averaged into class
//! prototypes kept in an EMA memory. Mask-weighted slots are matched to queries
//! with the Hungarian solver, inherit their classes, and are averaged per class
//! into slot prototypes that an InfoNCE objective pulls toward the memory.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hungarian::{hungarian_assign, Sense};
use crate::math::cosine_similarity;
use crate::tensor::Tensor;

/// Row sums must match one within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    /// `C x d`, row `c - 1` holds class `c`.
    pub prototypes: Tensor,
    pub initialized: Vec<bool>,
    pub beta: f64,
    pub tau: f64,
}

impl PrototypeMemory {
    pub fn new(classes: usize, dim: usize, beta: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config { key: "beta".into(), reason: format!("must lie in [0,1), got {beta}") });
        }
        if !(tau > 0.0) {
            return Err(Error::Config { key: "tau_con".into(), reason: format!("must be positive, got {tau}") });
        }
        Ok(Self { prototypes: Tensor::zeros(&[classes, dim]), initialized: vec![false; classes], beta, tau })
    }

    pub fn classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        if class == 0 || class > self.classes() || !self.initialized[class - 1] {
            None
        } else {
            Some(self.prototypes.row_slice(class - 1))
        }
    }

    /// Class means of `queries` rows; background (0) rows are skipped.
    pub fn class_means(queries: &Tensor, classes: &[usize]) -> BTreeMap<usize, Vec<f64>> {
        let d = queries.cols();
        let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let entry = acc.entry(c).or_insert_with(|| (vec![0.0; d], 0));
            for (a, v) in entry.0.iter_mut().zip(queries.row_slice(i)) {
                *a += v;
            }
            entry.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect())).collect()
    }

    /// EMA update from one batch of classified queries.
    pub fn update(&mut self, queries: &Tensor, classes: &[usize]) -> Result<()> {
        if queries.rows() != classes.len() || queries.cols() != self.prototypes.cols() {
            return Err(crate::error::shape_err(
                "update_prototype_memory",
                format!("queries {:?} with {} classes, memory dim {}", queries.shape(), classes.len(), self.prototypes.cols()),
            ));
        }
        for (c, mean) in Self::class_means(queries, classes) {
            if c > self.classes() {
                return Err(Error::Config { key: "class".into(), reason: format!("class {c} exceeds {}", self.classes()) });
            }
            let row = &mut self.prototypes.data_mut()[(c - 1) * mean.len()..c * mean.len()];
            if self.initialized[c - 1] {
                for (p, m) in row.iter_mut().zip(&mean) {
                    *p = self.beta * *p + (1.0 - self.beta) * m;
                }
            } else {
                row.copy_from_slice(&mean);
                self.initialized[c - 1] = true;
            }
        }
        Ok(())
    }
}

pub fn update_prototype_memory(memory: &PrototypeMemory, queries: &crate::detector::QuerySet) -> Result<PrototypeMemory> {
    let mut next = memory.clone();
    next.update(&queries.queries, &queries.classes)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSlotSet {
    pub slots: Tensor,
    /// Pseudo-class per slot; `None` until matched or when matched to background.
    pub labels: Vec<Option<usize>>,
    /// Matched query per slot.
    pub matched: Vec<Option<usize>>,
}

impl WeightedSlotSet {
    pub fn unlabeled(slots: Tensor) -> Self {
        let k = slots.rows();
        Self { slots, labels: vec![None; k], matched: vec![None; k] }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }
}

pub fn check_row_stochastic(weights: &Tensor) -> Result<()> {
    for r in 0..weights.rows() {
        let row = weights.row_slice(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

/// `z_k = sum_i w[k,i] h_i`.
pub fn weighted_slots(weights: &Tensor, features: &Tensor) -> Result<WeightedSlotSet> {
    check_row_stochastic(weights)?;
    Ok(WeightedSlotSet::unlabeled(weights.matmul(features)?))
}

/// Cosine similarity with zero-norm pairs mapped to 0.
pub fn safe_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    match cosine_similarity(a, b) {
        Ok(v) => Ok(v),
        Err(Error::ZeroNorm) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn similarity_matrix(slots: &Tensor, queries: &Tensor) -> Result<Tensor> {
    if slots.cols() != queries.cols() {
        return Err(crate::error::shape_err("assign_slot_labels", format!("slot dim {} vs query dim {}", slots.cols(), queries.cols())));
    }
    let mut s = Tensor::zeros(&[slots.rows(), queries.rows()]);
    for k in 0..slots.rows() {
        for i in 0..queries.rows() {
            s.set(k, i, safe_cosine(slots.row_slice(k), queries.row_slice(i))?);
        }
    }
    Ok(s)
}

/// Matches slots to queries by maximal total cosine similarity and copies
/// each matched query's class; background matches stay unlabeled.
pub fn assign_slot_labels(slots: &WeightedSlotSet, queries: &Tensor, classes: &[usize]) -> Result<WeightedSlotSet> {
    let sim = similarity_matrix(&slots.slots, queries)?;
    let assignment = hungarian_assign(&sim, Sense::Maximize)?;
    let mut out = WeightedSlotSet::unlabeled(slots.slots.clone());
    for (k, i) in assignment.pairs {
        out.matched[k] = Some(i);
        out.labels[k] = (classes[i] != 0).then_some(classes[i]);
    }
    Ok(out)
}

/// Slot indices grouped by pseudo-class.
pub fn class_groups(labels: &[Option<usize>]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            groups.entry(*c).or_default().push(k);
        }
    }
    groups
}

/// Per-class mean of labeled slots; empty when nothing is labeled.
pub fn slot_class_prototypes(slots: &WeightedSlotSet) -> BTreeMap<usize, Vec<f64>> {
    let d = slots.slots.cols();
    class_groups(&slots.labels)
        .into_iter()
        .map(|(c, ks)| {
            let mut mean = vec![0.0; d];
            for &k in &ks {
                for (m, v) in mean.iter_mut().zip(slots.slots.row_slice(k)) {
                    *m += v;
                }
            }
            (c, mean.into_iter().map(|v| v / ks.len() as f64).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastMode {
    MultiClass,
    SingleClass,
    /// No class had both a prototype and a slot prototype.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastOutcome {
    pub loss: f64,
    pub mode: ContrastMode,
    pub active: Vec<usize>,
}

/// Records the contrast loss over slot prototype nodes `(class, [1,d])`.
/// Returns `None` when no class is active.
pub fn slot_contrast_node(
    g: &mut Graph,
    memory: &PrototypeMemory,
    slot_protos: &[(usize, NodeId)],
) -> Result<Option<(NodeId, ContrastMode, Vec<usize>)>> {
    let active: Vec<(usize, NodeId)> = slot_protos.iter().copied().filter(|(c, _)| memory.prototype(*c).is_some()).collect();
    let classes: Vec<usize> = active.iter().map(|(c, _)| *c).collect();
    match active.len() {
        0 => Ok(None),
        1 => {
            let (c, z) = active[0];
            let p = g.constant(Tensor::matrix(1, memory.prototypes.cols(), memory.prototype(c).unwrap_or_default().to_vec())?);
            let cos = g.cosine_rows(p, z)?;
            let s = g.sum(cos);
            Ok(Some((g.scale(s, -1.0), ContrastMode::SingleClass, classes)))
        }
        a => {
            // Row c holds phi(P_c, z_c') over c'; the positive sits on the diagonal.
            let p_rows: Vec<Vec<f64>> = active.iter().map(|&(c, _)| memory.prototype(c).unwrap_or_default().to_vec()).collect();
            let p = g.constant(Tensor::from_rows(&p_rows)?);
            let z_nodes: Vec<NodeId> = active.iter().map(|&(_, z)| z).collect();
            let z = g.concat_rows(&z_nodes)?;
            let logits = g.cosine_rows(p, z)?;
            let logits = g.scale(logits, 1.0 / memory.tau);
            let logp = g.log_softmax_rows(logits);
            let diag: Vec<(usize, usize)> = (0..a).map(|i| (i, i)).collect();
            let pos = g.gather_elems(logp, &diag)?;
            let s = g.sum(pos);
            Ok(Some((g.scale(s, -1.0 / a as f64), ContrastMode::MultiClass, classes)))
        }
    }
}

pub fn slot_contrast_loss(memory: &PrototypeMemory, slot_protos: &BTreeMap<usize, Vec<f64>>) -> Result<ContrastOutcome> {
    let mut g = Graph::new();
    let mut nodes = Vec::with_capacity(slot_protos.len());
    for (&c, v) in slot_protos {
        nodes.push((c, g.constant(Tensor::row(v.clone()))));
    }
    Ok(match slot_contrast_node(&mut g, memory, &nodes)? {
        Some((loss, mode, active)) => ContrastOutcome { loss: g.scalar(loss), mode, active },
        None => ContrastOutcome { loss: 0.0, mode: ContrastMode::Skipped, active: Vec::new() },
    })
}
