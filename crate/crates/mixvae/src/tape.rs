//! Reverse-mode autodiff on `ndarray` matrices.
//!
//! A `Tape` is a per-minibatch arena of nodes. Ops cover exactly what the
//! training objectives need: dense affine layers, pointwise nonlinearities,
//! chunked reductions over per-sample rows, and composite probability ops
//! whose vector-Jacobian products live in [`crate::kernels`]. Sampling nodes
//! carry externally drawn values; stratified draws backpropagate by explicit
//! reparametrization, ancestral draws by the implicit-reparametrization
//! triangular solve.
//!
//! Layout convention: batches are rows; `S` latent samples of data row `b`
//! occupy rows `b*S .. (b+1)*S`. Scalars are 1x1 matrices.

use ndarray::Array2;

use crate::error::Result;
use crate::kernels;
use crate::math::{logsumexp, sigmoid, softmax, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// m x n plus a 1 x n row vector broadcast over rows.
    AddRow(Var, Var),
    Relu(Var),
    /// softplus(x) + shift; the shift is constant under differentiation.
    SoftplusShift(Var, #[allow(dead_code)] f64),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    MeanAll(Var),
    RepeatRows(Var, usize),
    ChunkMean(Var, usize),
    ChunkLogMeanExp(Var, usize),
    ChunkLogSumExp(Var, usize),
    LogSoftmax(Var),
    Reshape(Var),
    RowSum(Var),
    GaussLoglik {
        mean: Var,
        std: Var,
        x: usize,
        mask: usize,
    },
    BernoulliLoglik {
        raw: Var,
        x: usize,
        mask: usize,
    },
    StdNormalLoglik(Var),
    MixtureLogPdf {
        logits: Var,
        means: Var,
        stds: Var,
        z: Var,
        spr: usize,
    },
    /// z = mu_k + sigma_k * eps with the component index implied by layout.
    StratifiedSample {
        means: Var,
        stds: Var,
        per_comp: usize,
    },
    /// Ancestral mixture draw; backward applies the implicit solve.
    AncestralSample {
        logits: Var,
        means: Var,
        stds: Var,
        spr: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consts: Vec<Array2<f64>>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    /// Gradient of a leaf, zeros if the leaf never received one.
    pub fn of(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn constant(&mut self, value: Array2<f64>) -> usize {
        self.consts.push(value);
        self.consts.len() - 1
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Value-identical copy with no gradient path (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softplus_shift(&mut self, a: Var, shift: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| softplus(x) + shift);
        self.push(value, Op::SoftplusShift(a, shift))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a, c))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.mean().unwrap();
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.nrows(), v.ncols());
        let mut out = Array2::zeros((r * times, c));
        for i in 0..r {
            for t in 0..times {
                out.row_mut(i * times + t).assign(&v.row(i));
            }
        }
        self.push(out, Op::RepeatRows(a, times))
    }

    pub fn chunk_mean(&mut self, a: Var, chunk: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.nrows() % chunk, 0);
        let rows = v.nrows() / chunk;
        let mut out = Array2::zeros((rows, v.ncols()));
        for i in 0..rows {
            for s in 0..chunk {
                let src = v.row(i * chunk + s).to_owned();
                let mut dst = out.row_mut(i);
                dst += &src;
            }
        }
        out /= chunk as f64;
        self.push(out, Op::ChunkMean(a, chunk))
    }

    pub fn chunk_logmeanexp(&mut self, a: Var, chunk: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ncols(), 1);
        assert_eq!(v.nrows() % chunk, 0);
        let rows = v.nrows() / chunk;
        let mut out = Array2::zeros((rows, 1));
        for i in 0..rows {
            let vals: Vec<f64> = (0..chunk).map(|s| v[[i * chunk + s, 0]]).collect();
            out[[i, 0]] = logsumexp(&vals) - (chunk as f64).ln();
        }
        self.push(out, Op::ChunkLogMeanExp(a, chunk))
    }

    pub fn chunk_logsumexp(&mut self, a: Var, chunk: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ncols(), 1);
        assert_eq!(v.nrows() % chunk, 0);
        let rows = v.nrows() / chunk;
        let mut out = Array2::zeros((rows, 1));
        for i in 0..rows {
            let vals: Vec<f64> = (0..chunk).map(|s| v[[i * chunk + s, 0]]).collect();
            out[[i, 0]] = logsumexp(&vals);
        }
        self.push(out, Op::ChunkLogSumExp(a, chunk))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let lse = logsumexp(row.as_slice().unwrap());
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.len(), rows * cols);
        let flat: Vec<f64> = v.iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(out, Op::Reshape(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            out[[i, 0]] = row.sum();
        }
        self.push(out, Op::RowSum(a))
    }

    pub fn gauss_loglik(&mut self, mean: Var, std: Var, x: Array2<f64>, mask: Array2<f64>) -> Var {
        let value =
            kernels::gauss_loglik_masked_fwd(&self.nodes[mean.0].value, &self.nodes[std.0].value, &x, &mask);
        let xi = self.constant(x);
        let mi = self.constant(mask);
        self.push(value, Op::GaussLoglik { mean, std, x: xi, mask: mi })
    }

    pub fn bernoulli_loglik(&mut self, raw: Var, x: Array2<f64>, mask: Array2<f64>) -> Var {
        let value = kernels::bernoulli_loglik_masked_fwd(&self.nodes[raw.0].value, &x, &mask);
        let xi = self.constant(x);
        let mi = self.constant(mask);
        self.push(value, Op::BernoulliLoglik { raw, x: xi, mask: mi })
    }

    pub fn std_normal_loglik(&mut self, z: Var) -> Var {
        let value = kernels::std_normal_loglik_fwd(&self.nodes[z.0].value);
        self.push(value, Op::StdNormalLoglik(z))
    }

    pub fn mixture_logpdf(&mut self, logits: Var, means: Var, stds: Var, z: Var, spr: usize) -> Var {
        let value = kernels::mixture_logpdf_fwd(
            &self.nodes[logits.0].value,
            &self.nodes[means.0].value,
            &self.nodes[stds.0].value,
            &self.nodes[z.0].value,
            spr,
        );
        self.push(value, Op::MixtureLogPdf { logits, means, stds, z, spr })
    }

    /// Insert an externally drawn stratified sample with explicit
    /// reparametrization gradients. `z` holds `K*per_comp` samples per row
    /// in component-major order.
    pub fn stratified_sample(&mut self, means: Var, stds: Var, z: Array2<f64>, per_comp: usize) -> Var {
        self.push(z, Op::StratifiedSample { means, stds, per_comp })
    }

    /// Insert an externally drawn ancestral sample with implicit
    /// reparametrization gradients.
    pub fn ancestral_sample(
        &mut self,
        logits: Var,
        means: Var,
        stds: Var,
        z: Array2<f64>,
        spr: usize,
    ) -> Var {
        self.push(z, Op::AncestralSample { logits, means, stds, spr })
    }

    fn accumulate(g: &mut Vec<Option<Array2<f64>>>, v: Var, delta: Array2<f64>) {
        match &mut g[v.0] {
            Some(existing) => *existing += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar node; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    g[i] = Some(gi);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gi.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&gi);
                    Self::accumulate(&mut g, *a, ga);
                    Self::accumulate(&mut g, *b, gb);
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut g, *a, gi.clone());
                    Self::accumulate(&mut g, *b, gi);
                }
                Op::Sub(a, b) => {
                    Self::accumulate(&mut g, *a, gi.clone());
                    Self::accumulate(&mut g, *b, -gi);
                }
                Op::Mul(a, b) => {
                    let ga = &gi * &self.nodes[b.0].value;
                    let gb = &gi * &self.nodes[a.0].value;
                    Self::accumulate(&mut g, *a, ga);
                    Self::accumulate(&mut g, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut grow = Array2::zeros((1, gi.ncols()));
                    for r in gi.rows() {
                        let mut dst = grow.row_mut(0);
                        dst += &r;
                    }
                    Self::accumulate(&mut g, *a, gi);
                    Self::accumulate(&mut g, *row, grow);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(&mut g, *a, &gi * &mask);
                }
                Op::SoftplusShift(a, _) => {
                    let d = self.nodes[a.0].value.mapv(sigmoid);
                    Self::accumulate(&mut g, *a, &gi * &d);
                }
                Op::Exp(a) => {
                    Self::accumulate(&mut g, *a, &gi * &node.value);
                }
                Op::Scale(a, c) => {
                    Self::accumulate(&mut g, *a, gi.mapv(|x| x * c));
                }
                Op::AddScalar(a, _) => {
                    Self::accumulate(&mut g, *a, gi);
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[a.0].value;
                    let c = gi[[0, 0]] / src.len() as f64;
                    Self::accumulate(&mut g, *a, Array2::from_elem(src.raw_dim(), c));
                }
                Op::RepeatRows(a, times) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    for i2 in 0..src.nrows() {
                        for t in 0..*times {
                            let row = gi.row(i2 * times + t).to_owned();
                            let mut dst = ga.row_mut(i2);
                            dst += &row;
                        }
                    }
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::ChunkMean(a, chunk) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    let c = *chunk as f64;
                    for i2 in 0..gi.nrows() {
                        for s in 0..*chunk {
                            let row = gi.row(i2).mapv(|x| x / c);
                            let mut dst = ga.row_mut(i2 * chunk + s);
                            dst += &row;
                        }
                    }
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::ChunkLogMeanExp(a, chunk) | Op::ChunkLogSumExp(a, chunk) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    for i2 in 0..gi.nrows() {
                        let vals: Vec<f64> = (0..*chunk).map(|s| src[[i2 * chunk + s, 0]]).collect();
                        let w = softmax(&vals);
                        for s in 0..*chunk {
                            ga[[i2 * chunk + s, 0]] = gi[[i2, 0]] * w[s];
                        }
                    }
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    for i2 in 0..src.nrows() {
                        let w = softmax(src.row(i2).as_slice().unwrap());
                        let gsum: f64 = gi.row(i2).sum();
                        for j in 0..src.ncols() {
                            ga[[i2, j]] = gi[[i2, j]] - w[j] * gsum;
                        }
                    }
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::Reshape(a) => {
                    let src = &self.nodes[a.0].value;
                    let flat: Vec<f64> = gi.iter().cloned().collect();
                    let ga = Array2::from_shape_vec(src.raw_dim(), flat).unwrap();
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::RowSum(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    for i2 in 0..src.nrows() {
                        let gv = gi[[i2, 0]];
                        ga.row_mut(i2).fill(gv);
                    }
                    Self::accumulate(&mut g, *a, ga);
                }
                Op::GaussLoglik { mean, std, x, mask } => {
                    let (gm, gs) = kernels::gauss_loglik_masked_vjp(
                        &self.nodes[mean.0].value,
                        &self.nodes[std.0].value,
                        &self.consts[*x],
                        &self.consts[*mask],
                        &gi,
                    );
                    Self::accumulate(&mut g, *mean, gm);
                    Self::accumulate(&mut g, *std, gs);
                }
                Op::BernoulliLoglik { raw, x, mask } => {
                    let gr = kernels::bernoulli_loglik_masked_vjp(
                        &self.nodes[raw.0].value,
                        &self.consts[*x],
                        &self.consts[*mask],
                        &gi,
                    );
                    Self::accumulate(&mut g, *raw, gr);
                }
                Op::StdNormalLoglik(z) => {
                    let gz = kernels::std_normal_loglik_vjp(&self.nodes[z.0].value, &gi);
                    Self::accumulate(&mut g, *z, gz);
                }
                Op::MixtureLogPdf { logits, means, stds, z, spr } => {
                    let (gl, gm, gs, gz) = kernels::mixture_logpdf_vjp(
                        &self.nodes[logits.0].value,
                        &self.nodes[means.0].value,
                        &self.nodes[stds.0].value,
                        &self.nodes[z.0].value,
                        *spr,
                        &gi,
                    );
                    Self::accumulate(&mut g, *logits, gl);
                    Self::accumulate(&mut g, *means, gm);
                    Self::accumulate(&mut g, *stds, gs);
                    Self::accumulate(&mut g, *z, gz);
                }
                Op::StratifiedSample { means, stds, per_comp } => {
                    let mvals = &self.nodes[means.0].value;
                    let svals = &self.nodes[stds.0].value;
                    let zvals = &node.value;
                    let b = mvals.nrows();
                    let l = zvals.ncols();
                    let k = mvals.ncols() / l;
                    let spr = k * per_comp;
                    let mut gm = Array2::zeros(mvals.raw_dim());
                    let mut gs = Array2::zeros(svals.raw_dim());
                    for row in 0..b {
                        for kk in 0..k {
                            for i2 in 0..*per_comp {
                                let zi = row * spr + kk * per_comp + i2;
                                for d in 0..l {
                                    let idx = kk * l + d;
                                    let eps = (zvals[[zi, d]] - mvals[[row, idx]]) / svals[[row, idx]];
                                    gm[[row, idx]] += gi[[zi, d]];
                                    gs[[row, idx]] += gi[[zi, d]] * eps;
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut g, *means, gm);
                    Self::accumulate(&mut g, *stds, gs);
                }
                Op::AncestralSample { logits, means, stds, spr } => {
                    let (gl, gm, gs) = kernels::implicit_ancestral_vjp(
                        &self.nodes[logits.0].value,
                        &self.nodes[means.0].value,
                        &self.nodes[stds.0].value,
                        &node.value,
                        *spr,
                        &gi,
                    )?;
                    Self::accumulate(&mut g, *logits, gl);
                    Self::accumulate(&mut g, *means, gm);
                    Self::accumulate(&mut g, *stds, gs);
                }
            }
        }
        Ok(Grads { g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar-valued rebuild function.
    fn fd_check(
        build: impl Fn(&[Array2<f64>]) -> f64,
        inputs: &[Array2<f64>],
        grads: &[Array2<f64>],
        tol: f64,
    ) {
        let h = 1e-5;
        for (pi, p) in inputs.iter().enumerate() {
            for r in 0..p.nrows() {
                for c in 0..p.ncols() {
                    let mut plus = inputs.to_vec();
                    plus[pi][[r, c]] += h;
                    let mut minus = inputs.to_vec();
                    minus[pi][[r, c]] -= h;
                    let fd = (build(&plus) - build(&minus)) / (2.0 * h);
                    let an = grads[pi][[r, c]];
                    assert!(
                        (fd - an).abs() < tol * (1.0 + an.abs()),
                        "input {pi} [{r},{c}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn mlp_like_graph_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rnd = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
        };
        let x = rnd(3, 2);
        let w1 = rnd(2, 4);
        let b1 = rnd(1, 4);
        let w2 = rnd(4, 1);
        let inputs = vec![w1, b1, w2];

        let build = |ps: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let h = t.matmul(xv, vars[0]);
            let h = t.add_row(h, vars[1]);
            let h = t.relu(h);
            let h = t.softplus_shift(h, 1e-5);
            let o = t.matmul(h, vars[2]);
            let o = t.mean_all(o);
            (t, o, vars)
        };
        let (t, o, vars) = build(&inputs);
        let grads = t.backward(o).unwrap();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.of(&t, *v)).collect();
        fd_check(|ps| { let (t, o, _) = build(ps); t.scalar(o) }, &inputs, &gs, 1e-5);
    }

    #[test]
    fn reduction_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((6, 1), |_| rng.random_range(-2.0..2.0));
        let logits = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let inputs = vec![x, logits];
        let build = |ps: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let lme = t.chunk_logmeanexp(vars[0], 3); // 2x1
            let lsm = t.log_softmax(vars[1]); // 2x3
            let w = t.exp(lsm);
            let wi = t.row_sum(w); // 2x1, = 1
            let dot = t.mul(lme, wi);
            let cm = t.chunk_mean(vars[0], 2); // 3x1
            let cm2 = t.reshape(cm, 1, 3);
            let cm3 = t.row_sum(cm2); // 1x1
            let rep = t.repeat_rows(cm3, 2); // 2x1
            let s = t.add(dot, rep);
            let s = t.scale(s, 0.5);
            let s = t.add_scalar(s, 1.0);
            let o = t.mean_all(s);
            (t, o, vars)
        };
        let (t, o, vars) = build(&inputs);
        let grads = t.backward(o).unwrap();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.of(&t, *v)).collect();
        fd_check(|ps| { let (t, o, _) = build(ps); t.scalar(o) }, &inputs, &gs, 1e-5);
    }

    #[test]
    fn composite_prob_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 2 rows, K=2 components, L=2 latent dims, 2 samples per row.
        let logits = Array2::from_shape_fn((2, 2), |_| rng.random_range(-0.5..0.5));
        let means = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let raw_stds = Array2::from_shape_fn((2, 4), |_| rng.random_range(-0.5..0.5));
        let z = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.5..1.5));
        let xdata = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mask = arr2(&[[1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]]);
        let dec_mean = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let dec_raw = Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.5..0.5));
        let inputs = vec![logits, means, raw_stds, z, dec_mean, dec_raw];
        let build = |ps: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let stds = t.softplus_shift(vars[2], 1e-5);
            let logq = t.mixture_logpdf(vars[0], vars[1], stds, vars[3], 2);
            let prior = t.std_normal_loglik(vars[3]);
            let dstd = t.softplus_shift(vars[5], 1e-5);
            let ll = t.gauss_loglik(vars[4], dstd, xdata.clone(), mask.clone());
            let a = t.sub(ll, logq);
            let a = t.add(a, prior);
            let o = t.mean_all(a);
            (t, o, vars)
        };
        let (t, o, vars) = build(&inputs);
        let grads = t.backward(o).unwrap();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.of(&t, *v)).collect();
        fd_check(|ps| { let (t, o, _) = build(ps); t.scalar(o) }, &inputs, &gs, 1e-5);
    }

    #[test]
    fn bernoulli_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((3, 2), |_| rng.random_range(-2.0..2.0));
        let x = Array2::from_shape_fn((3, 2), |_| f64::from(rng.random_range(0..2)));
        let mask = arr2(&[[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        let inputs = vec![raw];
        let build = |ps: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let ll = t.bernoulli_loglik(vars[0], x.clone(), mask.clone());
            let o = t.mean_all(ll);
            (t, o, vars)
        };
        let (t, o, vars) = build(&inputs);
        let grads = t.backward(o).unwrap();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.of(&t, *v)).collect();
        fd_check(|ps| { let (t, o, _) = build(ps); t.scalar(o) }, &inputs, &gs, 1e-5);
    }

    #[test]
    fn stratified_sample_gradcheck() {
        // z = mu + sigma*eps; FD over (means, stds) with eps held fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let means = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let stds = Array2::from_shape_fn((2, 4), |_| rng.random_range(0.5..1.5));
        let eps = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let inputs = vec![means, stds];
        // per_comp = 2, K = 2, L = 2 -> spr = 4 samples per row.
        let build = |ps: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let mut z = Array2::zeros((8, 2));
            for row in 0..2 {
                for kk in 0..2 {
                    for i in 0..2 {
                        let zi = row * 4 + kk * 2 + i;
                        for d in 0..2 {
                            z[[zi, d]] =
                                ps[0][[row, kk * 2 + d]] + ps[1][[row, kk * 2 + d]] * eps[[zi, d]];
                        }
                    }
                }
            }
            let zv = t.stratified_sample(vars[0], vars[1], z, 2);
            let sq = t.mul(zv, zv);
            let s = t.row_sum(sq);
            let o = t.mean_all(s);
            (t, o, vars)
        };
        let (t, o, vars) = build(&inputs);
        let grads = t.backward(o).unwrap();
        let gs: Vec<Array2<f64>> = vars.iter().map(|v| grads.of(&t, *v)).collect();
        fd_check(|ps| { let (t, o, _) = build(ps); t.scalar(o) }, &inputs, &gs, 1e-5);
    }
}
