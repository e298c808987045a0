#![allow(dead_code)]

use slotadapt::{Graph, NodeId, Rng, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const RTOL: f64 = 1e-4;
/// Floor for entries whose true gradient is near zero, where a relative
/// error is meaningless; far above the central-difference truncation error.
pub const ATOL: f64 = 1e-7;

pub type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Scalar probe `sum(out * w)` for fixed random `w`, so every output entry
/// contributes to the checked gradient.
fn probe(inputs: &[Tensor], weights: Option<&Tensor>, build: &Build) -> (f64, Graph, Vec<NodeId>, NodeId, Tensor) {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let shape = g.value(out).shape().to_vec();
            let n = g.value(out).len();
            let mut r = Rng::new(n as u64 + 17);
            Tensor::new(shape, (0..n).map(|_| r.uniform_range(-1.0, 1.0)).collect()).unwrap()
        }
    };
    let wn = g.constant(w.clone());
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod);
    (g.scalar(loss), g, leaves, loss, w)
}

/// Largest tolerance-normalized discrepancy between tape gradients and
/// central differences; a value at most 1 passes.
pub fn grad_check(inputs: &[Tensor], build: &Build) -> f64 {
    let (_, g, leaves, loss, w) = probe(inputs, None, build);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).cloned().unwrap_or_else(|| Tensor::zeros(inputs[li].shape()));
        for e in 0..inputs[li].len() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[li].data_mut()[e] += delta;
                probe(&xs, Some(&w), build).0
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let tol = RTOL * a.abs().max(fd.abs()) + ATOL;
            worst = worst.max((a - fd).abs() / tol);
        }
    }
    worst
}

pub fn random(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero, either sign.
pub fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.uniform_range(0.1, 2.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut Rng) -> Vec<Tensor>,
    pub build: Box<Build>,
}

fn case(name: &'static str, inputs: fn(&mut Rng) -> Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId + 'static) -> OpCase {
    OpCase { name, inputs, build: Box::new(build) }
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.int_range(1, 4), rng.int_range(1, 4))
}

fn one(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, -2.0, 2.0)]
}

fn two(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, -2.0, 2.0)]
}

fn positive(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, 0.2, 3.0)]
}

fn nonzero(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![away_from_zero(rng, r, c)]
}

/// Pairs separated by at least 0.1 so min/max never sit on a tie.
fn separated(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    let a = random(rng, r, c, -2.0, 2.0);
    let gap = away_from_zero(rng, r, c);
    let b = a.zip_map(&gap, |x, d| x + d).unwrap();
    vec![a, b]
}

fn mat_pair(rng: &mut Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.int_range(1, 4), rng.int_range(1, 4), rng.int_range(1, 4));
    vec![random(rng, m, k, -2.0, 2.0), random(rng, k, n, -2.0, 2.0)]
}

fn mat_pair_nt(rng: &mut Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.int_range(1, 4), rng.int_range(1, 4), rng.int_range(1, 4));
    vec![random(rng, m, k, -2.0, 2.0), random(rng, n, k, -2.0, 2.0)]
}

fn with_row(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, -2.0, 2.0), random(rng, 1, c, -2.0, 2.0)]
}

fn with_col(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, -2.0, 2.0), random(rng, r, 1, -2.0, 2.0)]
}

fn tall(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = (rng.int_range(3, 5), rng.int_range(3, 5));
    vec![random(rng, r, c, -2.0, 2.0)]
}

fn same_cols(rng: &mut Rng) -> Vec<Tensor> {
    let (a, b, h) = (rng.int_range(1, 3), rng.int_range(1, 3), rng.int_range(1, 3));
    vec![random(rng, a, h, -2.0, 2.0), random(rng, b, h, -2.0, 2.0)]
}

fn slots_and_masks(rng: &mut Rng) -> Vec<Tensor> {
    let (k, n, d) = (rng.int_range(1, 3), rng.int_range(1, 3), rng.int_range(1, 3));
    vec![random(rng, k * n, d, -2.0, 2.0), random(rng, k, n, 0.0, 1.0)]
}

fn nonzero_pair(rng: &mut Rng) -> Vec<Tensor> {
    let (a, b, h) = (rng.int_range(1, 3), rng.int_range(1, 3), rng.int_range(1, 4));
    vec![away_from_zero(rng, a, h), away_from_zero(rng, b, h)]
}

fn divisor(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, r, c, -2.0, 2.0), away_from_zero(rng, r, c)]
}

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", mat_pair, |g, x| g.matmul(x[0], x[1]).unwrap()),
        case("matmul_nt", mat_pair_nt, |g, x| g.matmul_nt(x[0], x[1]).unwrap()),
        case("transpose", one, |g, x| g.transpose(x[0])),
        case("add", two, |g, x| g.add(x[0], x[1]).unwrap()),
        case("sub", two, |g, x| g.sub(x[0], x[1]).unwrap()),
        case("mul", two, |g, x| g.mul(x[0], x[1]).unwrap()),
        case("div", divisor, |g, x| g.div(x[0], x[1]).unwrap()),
        case("min", separated, |g, x| g.min(x[0], x[1]).unwrap()),
        case("max", separated, |g, x| g.max(x[0], x[1]).unwrap()),
        case("add_row", with_row, |g, x| g.add_row(x[0], x[1]).unwrap()),
        case("mul_col", with_col, |g, x| g.mul_col(x[0], x[1]).unwrap()),
        case("scale", one, |g, x| g.scale(x[0], -1.7)),
        case("offset", one, |g, x| g.offset(x[0], 0.3)),
        case("tanh", one, |g, x| g.tanh(x[0])),
        case("sigmoid", one, |g, x| g.sigmoid(x[0])),
        case("exp", one, |g, x| g.exp(x[0])),
        case("ln", positive, |g, x| g.ln(x[0])),
        case("abs", nonzero, |g, x| g.abs(x[0])),
        case("relu", nonzero, |g, x| g.relu(x[0])),
        case("square", one, |g, x| g.square(x[0])),
        case("pow", positive, |g, x| g.pow(x[0], 2.5)),
        case("softmax_rows", one, |g, x| g.softmax_rows(x[0])),
        case("softmax_cols", one, |g, x| g.softmax_cols(x[0])),
        case("log_softmax_rows", one, |g, x| g.log_softmax_rows(x[0])),
        case("sum", one, |g, x| g.sum(x[0])),
        case("mean_rows", one, |g, x| g.mean_rows(x[0]).unwrap()),
        case("slice_rows", tall, |g, x| g.slice_rows(x[0], 1, 2).unwrap()),
        case("slice_cols", tall, |g, x| g.slice_cols(x[0], 1, 2).unwrap()),
        case("concat_rows", same_cols, |g, x| g.concat_rows(&[x[0], x[1], x[0]]).unwrap()),
        case("gather_rows", tall, |g, x| g.gather_rows(x[0], &[2, 0, 2]).unwrap()),
        case("gather_elems", tall, |g, x| g.gather_elems(x[0], &[(0, 1), (2, 2), (0, 1)]).unwrap()),
        case("reshape", tall, |g, x| {
            let n = g.value(x[0]).len();
            g.reshape(x[0], &[1, n]).unwrap()
        }),
        case("outer_add", same_cols, |g, x| g.outer_add(x[0], x[1]).unwrap()),
        case("mix_slots", slots_and_masks, |g, x| g.mix_slots(x[0], x[1]).unwrap()),
        case("normalize_rows_sum", positive, |g, x| g.normalize_rows_sum(x[0]).unwrap()),
        case("cosine_rows", nonzero_pair, |g, x| g.cosine_rows(x[0], x[1]).unwrap()),
    ]
}

/// Worst normalized discrepancy of `case` over `seeds` random inputs.
pub fn check_case(c: &OpCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|s| {
            let mut rng = Rng::new(0x9e37 + s);
            grad_check(&(c.inputs)(&mut rng), &*c.build)
        })
        .fold(0.0, f64::max)
}

/// Best total over every injective row-to-column map.
pub fn brute_force_max(score: &Tensor) -> f64 {
    fn go(score: &Tensor, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == score.rows() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..score.cols() {
            if !used[j] {
                used[j] = true;
                best = best.max(score.get(row, j) + go(score, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(score, 0, &mut vec![false; score.cols()])
}
