//! Minimal reverse-mode tape over `ndarray` matrices.
//!
//! Every value is a dense `[rows, cols]` f64 matrix; scalars are `[1, 1]`.
//! Ops evaluate eagerly, so node values are always available, and
//! `backward` walks the tape in reverse creation order. The op set is
//! exactly what the training objectives need — nothing speculative.
//!
//! Accumulation order is fixed by node indices, which keeps backward
//! passes bitwise deterministic.

use ndarray::{Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[B,N] + [1,N]`, rhs broadcast over rows.
    AddRow(Var, Var),
    /// `[B,N] * [1,N]`, rhs broadcast over rows.
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    /// `[B,N] -> [B,1]` row sums.
    SumRows(Var),
    /// `[R,C] -> [1,1]` mean over all entries.
    MeanAll(Var),
    /// Summed-over-dims, mean-over-batch binary cross-entropy computed
    /// from logits (first var); targets (second var) are treated as
    /// constants.
    BceFromLogits(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every grad-requiring node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf whose gradient will be tracked.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.dim(row).0, 1, "add_row rhs must be [1,N]");
        assert_eq!(self.dim(a).1, self.dim(row).1, "add_row width mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rg = self.requires(a) || self.requires(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.dim(row).0, 1, "mul_row rhs must be [1,N]");
        assert_eq!(self.dim(a).1, self.dim(row).1, "mul_row width mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        let rg = self.requires(a) || self.requires(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a).1, self.dim(b).0, "matmul inner dim mismatch");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let rg = self.requires(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a).0, self.dim(b).0, "concat_cols row mismatch");
        let v = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat_cols");
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.dim(a).0, "slice_rows out of range");
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let rg = self.requires(a);
        self.push(v, Op::SliceRows(a, start, end), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.requires(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let rg = self.requires(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.requires(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.requires(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.requires(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.requires(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.requires(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        let rg = self.requires(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        let rg = self.requires(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        let rg = self.requires(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let rg = self.requires(a);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().expect("mean of empty array");
        let rg = self.requires(a);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), rg)
    }

    /// Per-dim BCE from logits, summed over dims and averaged over the
    /// batch. Numerically stable via softplus; targets are constants.
    pub fn bce_from_logits(&mut self, logits: Var, targets: Var) -> Var {
        assert_eq!(self.dim(logits), self.dim(targets), "bce shape mismatch");
        let l = &self.nodes[logits.0].value;
        let t = &self.nodes[targets.0].value;
        let b = l.nrows() as f64;
        let mut total = 0.0;
        for (&li, &ti) in l.iter().zip(t.iter()) {
            total += ti * softplus(-li) + (1.0 - ti) * softplus(li);
        }
        let rg = self.requires(logits);
        self.push(
            Array2::from_elem((1, 1), total / b),
            Op::BceFromLogits(logits, targets),
            rg,
        )
    }

    /// Backpropagate from a `[1,1]` root through the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.dim(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, a, g.clone());
                    self.accum(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, a, g.clone());
                    self.accum(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    self.accum(&mut grads, a, &g * &self.nodes[b.0].value);
                    self.accum(&mut grads, b, &g * &self.nodes[a.0].value);
                }
                Op::AddRow(a, row) => {
                    self.accum(&mut grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    self.accum(&mut grads, a, g);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accum(&mut grads, a, ga);
                    self.accum(&mut grads, row, grow);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    self.accum(&mut grads, a, ga);
                    self.accum(&mut grads, b, gb);
                }
                Op::Transpose(a) => self.accum(&mut grads, a, g.t().to_owned()),
                Op::ConcatCols(a, b) => {
                    let na = self.dim(a).1;
                    let ga = g.slice(ndarray::s![.., ..na]).to_owned();
                    let gb = g.slice(ndarray::s![.., na..]).to_owned();
                    self.accum(&mut grads, a, ga);
                    self.accum(&mut grads, b, gb);
                }
                Op::SliceRows(a, start, _end) => {
                    let mut ga = Array2::zeros(self.dim(a));
                    ga.slice_mut(ndarray::s![start..start + g.nrows(), ..])
                        .assign(&g);
                    self.accum(&mut grads, a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    self.accum(&mut grads, a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, a, &g * &(y * &(1.0 - y)));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, a, &g * y);
                }
                Op::Ln(a) => {
                    self.accum(&mut grads, a, &g / &self.nodes[a.0].value);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, a, &g / &(2.0 * y));
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, a, &g * &sign);
                }
                Op::Square(a) => {
                    self.accum(&mut grads, a, &g * &(2.0 * &self.nodes[a.0].value));
                }
                Op::Scale(a, c) => self.accum(&mut grads, a, &g * c),
                Op::AddScalar(a) => self.accum(&mut grads, a, g),
                Op::Neg(a) => self.accum(&mut grads, a, -g),
                Op::SumRows(a) => {
                    let (r, c) = self.dim(a);
                    let ga = g.broadcast((r, c)).expect("sum_rows backward").to_owned();
                    self.accum(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.dim(a);
                    let ga = Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64);
                    self.accum(&mut grads, a, ga);
                }
                Op::BceFromLogits(l, t) => {
                    let b = self.dim(l).0 as f64;
                    let p = self.nodes[l.0].value.mapv(sigmoid);
                    let gl = (&p - &self.nodes[t.0].value) * (g[[0, 0]] / b);
                    self.accum(&mut grads, l, gl);
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_mat(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences of `f` w.r.t. one leaf, compared
    /// entrywise against the tape gradient.
    fn check_grad<F>(leaf_value: &Array2<f64>, analytic: &Array2<f64>, f: F)
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let h = 1e-5;
        for idx in 0..leaf_value.len() {
            let (r, c) = (idx / leaf_value.ncols(), idx % leaf_value.ncols());
            let mut plus = leaf_value.clone();
            plus[[r, c]] += h;
            let mut minus = leaf_value.clone();
            minus[[r, c]] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = analytic[[r, c]];
            let err = (an - fd).abs() / f64::max(1.0, f64::max(an.abs(), fd.abs()));
            assert!(err < 1e-6, "grad mismatch at {:?}: an={an} fd={fd}", (r, c));
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = rand_mat(&mut rng, 3, 4);
        let x = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 1, 4);

        let f = |wv: &Array2<f64>| {
            let mut g = Graph::new();
            let wp = g.param(wv.clone());
            let xc = g.constant(x.clone());
            let bc = g.constant(b.clone());
            let y = g.matmul(xc, wp);
            let y = g.add_row(y, bc);
            let y = g.leaky_relu(y, 0.2);
            let y = g.square(y);
            let loss = g.mean_all(y);
            g.scalar(loss)
        };

        let mut g = Graph::new();
        let wp = g.param(w.clone());
        let xc = g.constant(x.clone());
        let bc = g.constant(b.clone());
        let y = g.matmul(xc, wp);
        let y = g.add_row(y, bc);
        let y = g.leaky_relu(y, 0.2);
        let y = g.square(y);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        check_grad(&w, grads.get(wp).unwrap(), f);
    }

    #[test]
    fn pointwise_ops_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        // keep values positive so ln/sqrt stay in-domain under FD nudges
        let x = rand_mat(&mut rng, 3, 3).mapv(|v| v.abs() + 0.5);

        let build = |g: &mut Graph, xp: Var| {
            let s = g.sigmoid(xp);
            let e = g.exp(xp);
            let l = g.ln(xp);
            let q = g.sqrt(xp);
            let t1 = g.add(s, e);
            let t2 = g.sub(l, q);
            let t3 = g.mul(t1, t2);
            let t4 = g.abs(t3);
            let t5 = g.scale(t4, 0.7);
            let t6 = g.add_scalar(t5, 0.3);
            let t7 = g.neg(t6);
            let rows = g.sum_rows(t7);
            g.mean_all(rows)
        };

        let mut g = Graph::new();
        let xp = g.param(x.clone());
        let loss = build(&mut g, xp);
        let grads = g.backward(loss);
        check_grad(&x, grads.get(xp).unwrap(), |xv| {
            let mut g = Graph::new();
            let xp = g.param(xv.clone());
            let loss = build(&mut g, xp);
            g.scalar(loss)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 2);
        let row = rand_mat(&mut rng, 1, 5);

        let build = |g: &mut Graph, ap: Var| {
            let bc = g.constant(b.clone());
            let rc = g.constant(row.clone());
            let cat = g.concat_cols(ap, bc);
            let m = g.mul_row(cat, rc);
            let t = g.transpose(m);
            let sl = g.slice_rows(t, 1, 4);
            let sq = g.square(sl);
            g.mean_all(sq)
        };

        let mut g = Graph::new();
        let ap = g.param(a.clone());
        let loss = build(&mut g, ap);
        let grads = g.backward(loss);
        check_grad(&a, grads.get(ap).unwrap(), |av| {
            let mut g = Graph::new();
            let ap = g.param(av.clone());
            let loss = build(&mut g, ap);
            g.scalar(loss)
        });
    }

    #[test]
    fn bce_from_logits_matches_direct_form() {
        let logits = array![[0.3, -1.2], [2.0, 0.1]];
        let targets = array![[1.0, 0.0], [0.5, 1.0]];
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let t = g.constant(targets.clone());
        let loss = g.bce_from_logits(l, t);

        let mut direct = 0.0;
        for (&li, &ti) in logits.iter().zip(targets.iter()) {
            let p = sigmoid(li);
            direct += -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln());
        }
        direct /= 2.0;
        assert!((g.scalar(loss) - direct).abs() < 1e-12);

        let grads = g.backward(loss);
        check_grad(&logits, grads.get(l).unwrap(), |lv| {
            let mut g = Graph::new();
            let l = g.param(lv.clone());
            let t = g.constant(targets.clone());
            let loss = g.bce_from_logits(l, t);
            g.scalar(loss)
        });
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // x used twice: loss = mean(x*x) + mean(x) has grad 2x/N + 1/N
        let x = array![[1.0, -2.0], [3.0, 0.5]];
        let mut g = Graph::new();
        let xp = g.param(x.clone());
        let sq = g.mul(xp, xp);
        let m1 = g.mean_all(sq);
        let m2 = g.mean_all(xp);
        let loss = g.add(m1, m2);
        let grads = g.backward(loss);
        let expect = x.mapv(|v| 2.0 * v / 4.0 + 0.25);
        let got = grads.get(xp).unwrap();
        for (e, gv) in expect.iter().zip(got.iter()) {
            assert!((e - gv).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(array![[1.0, 2.0]]);
        let c = g.constant(array![[3.0, 4.0]]);
        let y = g.mul(x, c);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
