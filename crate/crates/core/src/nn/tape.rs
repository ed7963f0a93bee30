//! Operation tape for reverse-mode differentiation.
//!
//! Every operation pushes one node and one value; `Var` is an index into
//! both. Backward walks the nodes in reverse creation order, so gradients
//! reach each input exactly once per use and accumulate across uses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::tensor::{shape_err, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Node {
    Leaf,
    Matmul(Var, Var),
    Transpose2(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    Relu(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cache: ops::LayerNormCache },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    ConcatCols { xs: Vec<Var>, widths: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    Reshape(Var),
    SumAll(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Per-variable gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, val: Tensor, node: Node) -> Var {
        self.vals.push(val);
        self.nodes.push(node);
        Var(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Node::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Matmul(a, b)))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var, NnError> {
        let v = ops::transpose2(self.value(x))?;
        Ok(self.push(v, Node::Transpose2(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = ops::scale(self.value(x), c);
        self.push(v, Node::Scale(x, c))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let v = ops::add_row(self.value(x), self.value(bias))?;
        Ok(self.push(v, Node::AddRow { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.push(v, Node::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = ops::tanh(self.value(x));
        self.push(v, Node::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(v, Node::Softmax { x, axis }))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let (v, cache) = ops::layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(v, Node::LayerNorm { x, gain, bias, cache }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(v, Node::Conv2d { x, w, b, stride, pad }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (v, argmax) = ops::maxpool2(self.value(x))?;
        Ok(self.push(v, Node::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Node::GlobalAvgPool(x)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let tensors: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_cols(&tensors)?;
        let widths = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(out, Node::ConcatCols { xs: xs.to_vec(), widths }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let v = ops::slice_cols(self.value(x), start, len)?;
        Ok(self.push(v, Node::SliceCols { x, start, len }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Node::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = ops::sum_all(self.value(x));
        self.push(v, Node::SumAll(x))
    }

    /// Inverted dropout: in training mode each element survives with
    /// probability `1 - rate` and is scaled by `1 / (1 - rate)`, so the
    /// expectation matches evaluation mode, where this is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen_range(0.0..1.0) < keep { inv } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, Node::Dropout { x, mask }))
    }

    /// Accumulates gradients from `out` back to every contributing variable.
    /// `seed` is the upstream gradient at `out`; `None` uses 1 and requires a
    /// single-element output.
    pub fn backward(&self, out: Var, seed: Option<Tensor>) -> Result<Gradients, NnError> {
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.value(out).shape() {
                    return Err(shape_err(
                        "backward",
                        format!("seed {:?} vs output {:?}", s.shape(), self.value(out).shape()),
                    ));
                }
                s
            }
            None => {
                if self.value(out).numel() != 1 {
                    return Err(shape_err(
                        "backward",
                        "default seed needs a single-element output".to_string(),
                    ));
                }
                Tensor::full(self.value(out).shape(), 1.0)
            }
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i] {
                Node::Leaf => {}
                Node::Matmul(a, b) => {
                    let bt = ops::transpose2(self.value(*b))?;
                    let at = ops::transpose2(self.value(*a))?;
                    acc(&mut grads, *a, ops::matmul(&g, &bt)?);
                    acc(&mut grads, *b, ops::matmul(&at, &g)?);
                }
                Node::Transpose2(x) => {
                    acc(&mut grads, *x, ops::transpose2(&g)?);
                }
                Node::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Node::Mul(a, b) => {
                    acc(&mut grads, *a, ops::mul(&g, self.value(*b))?);
                    acc(&mut grads, *b, ops::mul(&g, self.value(*a))?);
                }
                Node::Scale(x, c) => {
                    acc(&mut grads, *x, ops::scale(&g, *c));
                }
                Node::AddRow { x, bias } => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let gd = g.data();
                    let mut db = vec![0.0f64; c];
                    for row in 0..r {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += gd[row * c + j];
                        }
                    }
                    acc(&mut grads, *bias, Tensor::new(vec![c], db)?);
                    acc(&mut grads, *x, g);
                }
                Node::Relu(x) => {
                    let mask: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), mask)?);
                }
                Node::Tanh(x) => {
                    let y = self.value(Var(i));
                    let dx: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &d)| d * (1.0 - yv * yv))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Node::Softmax { x, axis } => {
                    acc(&mut grads, *x, ops::softmax_backward(self.value(Var(i)), &g, *axis));
                }
                Node::LayerNorm { x, gain, bias, cache } => {
                    let (dx, dgain, dbias) =
                        ops::layer_norm_rows_backward(cache, self.value(*gain), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Node::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Node::MaxPool2 { x, argmax } => {
                    acc(&mut grads, *x, ops::maxpool2_backward(self.value(*x).shape(), argmax, &g));
                }
                Node::GlobalAvgPool(x) => {
                    acc(&mut grads, *x, ops::global_avg_pool_backward(self.value(*x).shape(), &g));
                }
                Node::ConcatCols { xs, widths } => {
                    let mut offset = 0;
                    for (&xv, &w) in xs.iter().zip(widths) {
                        acc(&mut grads, xv, ops::slice_cols(&g, offset, w)?);
                        offset += w;
                    }
                }
                Node::SliceCols { x, start, len } => {
                    let xt = self.value(*x);
                    let (r, c) = (xt.shape()[0], xt.shape()[1]);
                    let mut dx = Tensor::zeros(&[r, c]);
                    let dxd = dx.data_mut();
                    let gd = g.data();
                    for row in 0..r {
                        dxd[row * c + start..row * c + start + len]
                            .copy_from_slice(&gd[row * len..(row + 1) * len]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Node::Reshape(x) => {
                    acc(&mut grads, *x, g.reshape(self.value(*x).shape().to_vec())?);
                }
                Node::SumAll(x) => {
                    let v = g.item()?;
                    acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), v));
                }
                Node::Dropout { x, mask } => {
                    let dx: Vec<f64> =
                        g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, n) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += n;
            }
        }
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central-difference gradient of `f` at `x`, one coordinate at a time.
    fn fd_grad(
        mut f: impl FnMut(&Tensor) -> f64,
        x: &Tensor,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            out.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        out
    }

    fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
        ad.iter()
            .zip(fd)
            .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Scalar loss `sum(op(x) * probe)` with a fixed probe so gradients of
    /// every output element are exercised.
    fn check_unary_op(
        build: impl Fn(&mut Tape, Var) -> Var,
        x: Tensor,
        probe: Tensor,
        tol: f64,
    ) {
        let eval = |xt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let y = build(&mut tape, xv);
            let p = tape.leaf(probe.clone());
            let yp = tape.reshape(y, vec![probe.numel(), 1]).unwrap();
            let pp = tape.reshape(p, vec![probe.numel(), 1]).unwrap();
            let prod = tape.mul(yp, pp).unwrap();
            let loss = tape.sum_all(prod);
            tape.value(loss).item().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&mut tape, xv);
        let p = tape.leaf(probe.clone());
        let yp = tape.reshape(y, vec![probe.numel(), 1]).unwrap();
        let pp = tape.reshape(p, vec![probe.numel(), 1]).unwrap();
        let prod = tape.mul(yp, pp).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, None).unwrap();
        let ad = grads.get(xv).expect("input must receive a gradient");
        let fd = fd_grad(eval, &x, 1e-5);
        let err = max_rel_err(ad.data(), &fd);
        assert!(err < tol, "rel err {err}");
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn square_gradient_hand_case() {
        // d/dw sum(w * w) = 2w; at w = 3 the gradient is 6.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss, None).unwrap();
        assert!((grads.get(w).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_chain_matches_fd_exactly() {
        // Linear ops: central differences are exact up to rounding.
        let mut r = rng(1);
        let x = Tensor::rand_uniform(&mut r, &[3, 4], -1.0, 1.0);
        let probe = Tensor::rand_uniform(&mut r, &[3, 2], -1.0, 1.0);
        let w = Tensor::rand_uniform(&mut r, &[4, 2], -1.0, 1.0);
        let eval = |xt: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(y, p).unwrap();
            let l = tape.sum_all(prod);
            tape.value(l).item().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = tape.matmul(xv, wv).unwrap();
        let p = tape.leaf(probe.clone());
        let prod = tape.mul(y, p).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, None).unwrap();
        let fd = fd_grad(eval, &x, 1e-4);
        assert!(max_rel_err(grads.get(xv).unwrap().data(), &fd) < 1e-6);
    }

    #[test]
    fn matmul_both_sides_match_fd() {
        for seed in 0..5 {
            let mut r = rng(seed);
            let a = Tensor::rand_uniform(&mut r, &[4, 3], -2.0, 2.0);
            let b = Tensor::rand_uniform(&mut r, &[3, 5], -2.0, 2.0);
            let probe = Tensor::rand_uniform(&mut r, &[4, 5], -1.0, 1.0);
            let eval_b = |bt: &Tensor| {
                let mut tape = Tape::new();
                let av = tape.leaf(a.clone());
                let bv = tape.leaf(bt.clone());
                let y = tape.matmul(av, bv).unwrap();
                let p = tape.leaf(probe.clone());
                let prod = tape.mul(y, p).unwrap();
                let l = tape.sum_all(prod);
                tape.value(l).item().unwrap()
            };
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let y = tape.matmul(av, bv).unwrap();
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(y, p).unwrap();
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss, None).unwrap();
            let fd_b = fd_grad(eval_b, &b, 1e-5);
            assert!(max_rel_err(grads.get(bv).unwrap().data(), &fd_b) < 1e-7);
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            // Shift draws away from zero so finite differences never cross it.
            let mut x = Tensor::rand_uniform(&mut r, &[3, 3], 0.05, 1.0);
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = -*v;
                }
            }
            let probe = Tensor::rand_uniform(&mut r, &[3, 3], -1.0, 1.0);
            check_unary_op(|t, v| t.relu(v), x, probe, 1e-6);
        }
    }

    #[test]
    fn tanh_gradient_matches_fd() {
        for seed in 0..10 {
            let mut r = rng(200 + seed);
            let x = Tensor::rand_uniform(&mut r, &[2, 4], -2.0, 2.0);
            let probe = Tensor::rand_uniform(&mut r, &[2, 4], -1.0, 1.0);
            check_unary_op(|t, v| t.tanh(v), x, probe, 1e-6);
        }
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        for seed in 0..10 {
            let mut r = rng(300 + seed);
            let x = Tensor::rand_uniform(&mut r, &[3, 5], -3.0, 3.0);
            let probe = Tensor::rand_uniform(&mut r, &[3, 5], -1.0, 1.0);
            check_unary_op(|t, v| t.softmax(v, 1).unwrap(), x, probe, 1e-5);
        }
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        for seed in 0..10 {
            let mut r = rng(400 + seed);
            let x = Tensor::rand_uniform(&mut r, &[3, 6], -2.0, 2.0);
            let gain = Tensor::rand_uniform(&mut r, &[6], 0.5, 1.5);
            let bias = Tensor::rand_uniform(&mut r, &[6], -0.5, 0.5);
            let probe = Tensor::rand_uniform(&mut r, &[3, 6], -1.0, 1.0);
            let eval = |xt: &Tensor, gt: &Tensor, bt: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.leaf(xt.clone());
                let gv = tape.leaf(gt.clone());
                let bv = tape.leaf(bt.clone());
                let y = tape.layer_norm_rows(xv, gv, bv).unwrap();
                let p = tape.leaf(probe.clone());
                let prod = tape.mul(y, p).unwrap();
                let l = tape.sum_all(prod);
                tape.value(l).item().unwrap()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let gv = tape.leaf(gain.clone());
            let bv = tape.leaf(bias.clone());
            let y = tape.layer_norm_rows(xv, gv, bv).unwrap();
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(y, p).unwrap();
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss, None).unwrap();
            let fdx = fd_grad(|t| eval(t, &gain, &bias), &x, 1e-5);
            let fdg = fd_grad(|t| eval(&x, t, &bias), &gain, 1e-5);
            let fdb = fd_grad(|t| eval(&x, &gain, t), &bias, 1e-5);
            assert!(max_rel_err(grads.get(xv).unwrap().data(), &fdx) < 1e-5);
            assert!(max_rel_err(grads.get(gv).unwrap().data(), &fdg) < 1e-6);
            assert!(max_rel_err(grads.get(bv).unwrap().data(), &fdb) < 1e-6);
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        for seed in 0..5 {
            let mut r = rng(500 + seed);
            let x = Tensor::rand_uniform(&mut r, &[2, 2, 5, 4], -1.0, 1.0);
            let w = Tensor::rand_uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
            let b = Tensor::rand_uniform(&mut r, &[3], -0.2, 0.2);
            let probe = Tensor::rand_uniform(&mut r, &[2, 3, 5, 4], -1.0, 1.0);
            let eval = |xt: &Tensor, wt: &Tensor, bt: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.leaf(xt.clone());
                let wv = tape.leaf(wt.clone());
                let bv = tape.leaf(bt.clone());
                let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                let p = tape.leaf(probe.clone());
                let n = probe.numel();
                let yf = tape.reshape(y, vec![n, 1]).unwrap();
                let pf = tape.reshape(p, vec![n, 1]).unwrap();
                let prod = tape.mul(yf, pf).unwrap();
                let l = tape.sum_all(prod);
                tape.value(l).item().unwrap()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let p = tape.leaf(probe.clone());
            let n = probe.numel();
            let yf = tape.reshape(y, vec![n, 1]).unwrap();
            let pf = tape.reshape(p, vec![n, 1]).unwrap();
            let prod = tape.mul(yf, pf).unwrap();
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss, None).unwrap();
            let fdx = fd_grad(|t| eval(t, &w, &b), &x, 1e-5);
            let fdw = fd_grad(|t| eval(&x, t, &b), &w, 1e-5);
            let fdb = fd_grad(|t| eval(&x, &w, t), &b, 1e-5);
            assert!(max_rel_err(grads.get(xv).unwrap().data(), &fdx) < 1e-6);
            assert!(max_rel_err(grads.get(wv).unwrap().data(), &fdw) < 1e-6);
            assert!(max_rel_err(grads.get(bv).unwrap().data(), &fdb) < 1e-6);
        }
    }

    #[test]
    fn pool_and_gap_gradients_match_fd() {
        for seed in 0..5 {
            let mut r = rng(600 + seed);
            let x = Tensor::rand_uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
            let probe4 = Tensor::rand_uniform(&mut r, &[1, 2, 2, 2], -1.0, 1.0);
            check_unary_op(
                |t, v| t.maxpool2(v).unwrap(),
                x.clone(),
                probe4,
                1e-6,
            );
            let probe2 = Tensor::rand_uniform(&mut r, &[1, 2], -1.0, 1.0);
            check_unary_op(|t, v| t.global_avg_pool(v).unwrap(), x, probe2, 1e-6);
        }
    }

    #[test]
    fn concat_slice_transpose_gradients_match_fd() {
        let mut r = rng(700);
        let x = Tensor::rand_uniform(&mut r, &[3, 4], -1.0, 1.0);
        let probe = Tensor::rand_uniform(&mut r, &[3, 4], -1.0, 1.0);
        // Round trip: split into halves, swap, concat, transpose twice.
        check_unary_op(
            |t, v| {
                let left = t.slice_cols(v, 0, 2).unwrap();
                let right = t.slice_cols(v, 2, 2).unwrap();
                let cat = t.concat_cols(&[right, left]).unwrap();
                let tt = t.transpose2(cat).unwrap();
                t.transpose2(tt).unwrap()
            },
            x,
            probe,
            1e-6,
        );
    }

    #[test]
    fn add_row_and_scale_gradients_match_fd() {
        let mut r = rng(800);
        let x = Tensor::rand_uniform(&mut r, &[4, 3], -1.0, 1.0);
        let bias = Tensor::rand_uniform(&mut r, &[3], -1.0, 1.0);
        let probe = Tensor::rand_uniform(&mut r, &[4, 3], -1.0, 1.0);
        let eval = |xt: &Tensor, bt: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let bv = tape.leaf(bt.clone());
            let y0 = tape.add_row(xv, bv).unwrap();
            let y = tape.scale(y0, 2.5);
            let p = tape.leaf(probe.clone());
            let prod = tape.mul(y, p).unwrap();
            let l = tape.sum_all(prod);
            tape.value(l).item().unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = tape.leaf(bias.clone());
        let y0 = tape.add_row(xv, bv).unwrap();
        let y = tape.scale(y0, 2.5);
        let p = tape.leaf(probe.clone());
        let prod = tape.mul(y, p).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, None).unwrap();
        let fdx = fd_grad(|t| eval(t, &bias), &x, 1e-5);
        let fdb = fd_grad(|t| eval(&x, t), &bias, 1e-5);
        assert!(max_rel_err(grads.get(xv).unwrap().data(), &fdx) < 1e-7);
        assert!(max_rel_err(grads.get(bv).unwrap().data(), &fdb) < 1e-7);
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        // Gradient of a sum of two losses equals the sum of gradients.
        let mut r = rng(900);
        let x = Tensor::rand_uniform(&mut r, &[2, 3], -1.0, 1.0);
        let build = |tape: &mut Tape, xv: Var| -> (Var, Var) {
            let t = tape.tanh(xv);
            let s = tape.softmax(t, 1).unwrap();
            let l1 = tape.sum_all(t);
            let l2 = tape.sum_all(s);
            (l1, l2)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (l1, l2) = build(&mut tape, xv);
        let sum = tape.add(l1, l2).unwrap();
        let g_sum = tape.backward(sum, None).unwrap();
        let g1 = tape.backward(l1, None).unwrap();
        let g2 = tape.backward(l2, None).unwrap();
        let combined: Vec<f64> = g1
            .get(xv)
            .unwrap()
            .data()
            .iter()
            .zip(g2.get(xv).unwrap().data())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in g_sum.get(xv).unwrap().data().iter().zip(&combined) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        // loss = sum(x) + sum(x): gradient is 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.5));
        let l1 = tape.sum_all(x);
        let l2 = tape.sum_all(x);
        let sum = tape.add(l1, l2).unwrap();
        let grads = tape.backward(sum, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut r = rng(1000);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[50, 20], 1.0));
        let eval = tape.dropout(x, 0.3, false, &mut r).unwrap();
        assert_eq!(eval, x); // identity: no node appended

        let trained = tape.dropout(x, 0.3, true, &mut r).unwrap();
        let v = tape.value(trained).clone();
        let kept = v.data().iter().filter(|&&x| x != 0.0).count();
        let total = v.numel();
        // Survivors carry 1/0.7; empirical keep rate near 70%.
        for &val in v.data() {
            assert!(val == 0.0 || (val - 1.0 / 0.7).abs() < 1e-12);
        }
        let rate = kept as f64 / total as f64;
        assert!((rate - 0.7).abs() < 0.05, "keep rate {rate}");
        // Backward routes through the same mask.
        let loss = tape.sum_all(trained);
        let grads = tape.backward(loss, None).unwrap();
        for (&gv, &xv_val) in grads.get(x).unwrap().data().iter().zip(v.data()) {
            assert_eq!(gv, xv_val); // since x was all ones
        }
        assert!(tape.dropout(x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn backward_seed_validation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.0));
        assert!(tape.backward(x, None).is_err()); // non-scalar needs a seed
        let bad = Tensor::zeros(&[3]);
        assert!(tape.backward(x, Some(bad)).is_err());
        let ok = Tensor::full(&[2, 2], 1.0);
        assert!(tape.backward(x, Some(ok)).is_ok());
    }

    #[test]
    fn gradients_stay_finite_on_extreme_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![700.0, -700.0, 0.0]).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let l = tape.sum_all(s);
        let grads = tape.backward(l, None).unwrap();
        assert!(grads.get(x).unwrap().is_finite());

        // Constant rows would divide by zero without the variance epsilon.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 4], 5.0));
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm_rows(x, g, b).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l, None).unwrap();
        assert!(grads.get(x).unwrap().is_finite());
        assert!(tape.value(y).is_finite());
    }
}
