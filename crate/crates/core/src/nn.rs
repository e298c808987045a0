//! Named parameter storage and the small layers shared by every model part.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Zero-valued set with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self { map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// `self += scale * other` over the names present in `other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        for (name, g) in &other.map {
            self.get_mut(name)?.axpy(scale, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.map.values().map(Tensor::sum_squares).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(shape_err("params", format!("{} vs {} entries", self.len(), other.len())));
        }
        for ((ka, va), (kb, vb)) in self.map.iter().zip(&other.map) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(shape_err("params", format!("{ka}{:?} vs {kb}{:?}", va.shape(), vb.shape())));
            }
        }
        Ok(())
    }
}

/// Plain first-order descent: `p <- p - lr * g` for every gradient present.
pub fn sgd_update(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config { key: "lr".into(), reason: format!("must be > 0, got {lr}") });
    }
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(shape_err("sgd_update", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        p.axpy(-lr, g)?;
    }
    Ok(())
}

/// Rescales `grads` in place so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.sum_squares().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Gaussian init with standard deviation `scale / sqrt(fan_in)`.
pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let std = scale / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Affine map `x W + b` over row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self { name: name.into(), input, output, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng, scale: f64) {
        params.insert(&self.weight_name(), init_matrix(rng, self.input, self.output, scale));
        if self.bias {
            params.insert(&self.bias_name(), Tensor::zeros(&[1, self.output]));
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, &self.weight_name())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(params, &self.bias_name())?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Gated recurrent unit acting on row-stacked states.
///
/// `r = σ(x W_ir + h W_hr + b_r)`, `u = σ(x W_iu + h W_hu + b_u)`,
/// `c = tanh(x W_ic + r ⊙ (h W_hc) + b_c)`, `h' = (1 − u) ⊙ c + u ⊙ h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub dim: usize,
}

pub const GRU_PARTS: [&str; 9] = ["w_ir", "w_hr", "b_r", "w_iu", "w_hu", "b_u", "w_ic", "w_hc", "b_c"];

impl GruCell {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn part(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let d = self.dim;
        for part in GRU_PARTS {
            let value = if part.starts_with("b_") { Tensor::zeros(&[1, d]) } else { init_matrix(rng, d, d, 1.0) };
            params.insert(&self.part(part), value);
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId, h: NodeId) -> Result<NodeId> {
        let d = self.dim;
        for (id, what) in [(x, "input"), (h, "hidden")] {
            if g.value(id).cols() != d {
                return Err(shape_err("gru_cell", format!("{what} has {} columns, expected {d}", g.value(id).cols())));
            }
        }
        let gate = |g: &mut Graph, wi: &str, wh: &str, b: &str| -> Result<(NodeId, NodeId, NodeId)> {
            let wi = g.param(params, &self.part(wi))?;
            let wh = g.param(params, &self.part(wh))?;
            let b = g.param(params, &self.part(b))?;
            let xi = g.matmul(x, wi)?;
            let hh = g.matmul(h, wh)?;
            Ok((xi, hh, b))
        };
        let (xr, hr, br) = gate(g, "w_ir", "w_hr", "b_r")?;
        let r = g.add(xr, hr)?;
        let r = g.add_row(r, br)?;
        let r = g.sigmoid(r);
        let (xu, hu, bu) = gate(g, "w_iu", "w_hu", "b_u")?;
        let u = g.add(xu, hu)?;
        let u = g.add_row(u, bu)?;
        let u = g.sigmoid(u);
        let (xc, hc, bc) = gate(g, "w_ic", "w_hc", "b_c")?;
        let rh = g.mul(r, hc)?;
        let c = g.add(xc, rh)?;
        let c = g.add_row(c, bc)?;
        let c = g.tanh(c);
        // h' = c + u ⊙ (h − c)
        let diff = g.sub(h, c)?;
        let keep = g.mul(u, diff)?;
        g.add(c, keep)
    }
}

/// Weights of a single GRU cell as plain matrices, row-vector convention.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub w_ir: Tensor,
    pub w_hr: Tensor,
    pub b_r: Tensor,
    pub w_iu: Tensor,
    pub w_hu: Tensor,
    pub b_u: Tensor,
    pub w_ic: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
}

impl GruWeights {
    pub fn zeros(d: usize) -> Self {
        let m = || Tensor::zeros(&[d, d]);
        let b = || Tensor::zeros(&[1, d]);
        Self { w_ir: m(), w_hr: m(), b_r: b(), w_iu: m(), w_hu: m(), b_u: b(), w_ic: m(), w_hc: m(), b_c: b() }
    }

    fn to_params(&self, cell: &GruCell) -> ParamSet {
        let mut p = ParamSet::new();
        let parts = [&self.w_ir, &self.w_hr, &self.b_r, &self.w_iu, &self.w_hu, &self.b_u, &self.w_ic, &self.w_hc, &self.b_c];
        for (name, t) in GRU_PARTS.iter().zip(parts) {
            p.insert(&cell.part(name), t.clone());
        }
        p
    }
}

/// One GRU update of a single hidden vector.
pub fn gru_cell(input: &[f64], hidden: &[f64], weights: &GruWeights) -> Result<Vec<f64>> {
    let d = hidden.len();
    if input.len() != d || weights.w_ir.shape() != [d, d] {
        return Err(shape_err("gru_cell", format!("input {} hidden {d}", input.len())));
    }
    let cell = GruCell::new("gru", d);
    let params = weights.to_params(&cell);
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(input.to_vec()));
    let h = g.constant(Tensor::row(hidden.to_vec()));
    let out = cell.forward(&mut g, &params, x, h)?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_scalar_and_zero_grad() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0));
        p.insert("b", Tensor::row(vec![1.0, 2.0]));
        let mut g = ParamSet::new();
        g.insert("a", Tensor::scalar(1.0));
        g.insert("b", Tensor::row(vec![0.0, 0.0]));
        sgd_update(&mut p, &g, 0.1).unwrap();
        assert!((p.get("a").unwrap().item() - 0.9).abs() < 1e-15);
        assert_eq!(p.get("b").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_vector_elementwise() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![1.0, -1.0, 0.5]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::row(vec![2.0, -4.0, 1.0]));
        sgd_update(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sgd_rejects_shape_mismatch_and_bad_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![1.0, 2.0]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::row(vec![1.0]));
        assert!(sgd_update(&mut p, &g, 0.1).is_err());
        assert!(sgd_update(&mut p, &ParamSet::new(), 0.0).is_err());
    }

    #[test]
    fn gru_zero_everything_gives_zero() {
        let out = gru_cell(&[0.0; 4], &[0.0; 4], &GruWeights::zeros(4)).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn gru_fixed_point_when_candidate_equals_hidden() {
        // Zero weights with b_c = atanh(h) force the candidate to equal h.
        let h = [0.3, -0.5, 0.1];
        let mut w = GruWeights::zeros(3);
        w.b_c = Tensor::row(h.iter().map(|v: &f64| v.atanh()).collect());
        w.b_u = Tensor::row(vec![0.7, -1.2, 2.0]);
        let out = gru_cell(&[0.9, -0.4, 0.2], &h, &w).unwrap();
        for (o, e) in out.iter().zip(h) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_shape_mismatch() {
        assert!(gru_cell(&[0.0; 3], &[0.0; 4], &GruWeights::zeros(4)).is_err());
    }
}
