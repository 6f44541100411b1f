//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every tensor in the model is a 2-D array (row vectors are `1 x n`).
//! Operations append nodes to a [`Tape`]; calling [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients. All arithmetic is `f64` so the
//! analytic gradients can be compared against central finite differences.

use ndarray::{s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Broadcast-add a `1 x n` row to every row of an `m x n` matrix.
    AddRow(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    /// Row-wise softmax with an optional key mask over columns. Masked columns
    /// get exactly zero output.
    SoftmaxRows(usize, Option<Vec<bool>>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    Transpose(usize),
    SumAll(usize),
    /// Elementwise product with a constant (dropout masks, loss masks).
    MulConst(usize, Array2<f64>),
    /// Row gather (embedding lookup).
    SelectRows(usize, Vec<usize>),
    /// Unfold a `T x C` sequence into `T x (k*C)` windows with zero padding,
    /// for 1-D convolution along the row (time) axis. `k` must be odd.
    Im2col(usize, usize),
    /// Row-major reshape; element count must match.
    Reshape(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradient tape. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant or parameter as a leaf node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a.0, c))
    }

    /// `a` is `m x n`, `row` is `1 x n`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a.0))
    }

    /// Row-wise softmax. With a mask, masked columns receive exactly zero
    /// weight; each row must have at least one unmasked column.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = &self.nodes[a.0].value;
        if let Some(m) = mask {
            assert_eq!(m.len(), x.ncols(), "mask length must equal column count");
            assert!(m.iter().any(|&b| b), "softmax over fully masked row");
        }
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.map_or(true, |m| m[j]) && v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask.map_or(true, |m| m[j]) {
                    let e = (v - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..row.len() {
                out[[i, j]] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a.0, mask.map(|m| m.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a.0, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, start, end))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    /// Sum of all elements, as a `1 x 1` matrix.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a.0))
    }

    pub fn mul_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulConst(a.0, c.clone()))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::SelectRows(a.0, idx.to_vec()))
    }

    /// Zero-padded unfold for 1-D convolution: input `T x C`, output
    /// `T x (k*C)` where window `w` of row `t` is row `t + w - k/2` (or zeros
    /// outside the sequence).
    pub fn im2col(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "im2col kernel must be odd");
        let x = &self.nodes[a.0].value;
        let (t_len, c) = x.dim();
        let half = k / 2;
        let mut v = Array2::zeros((t_len, k * c));
        for t in 0..t_len {
            for w in 0..k {
                let src = t as isize + w as isize - half as isize;
                if src >= 0 && (src as usize) < t_len {
                    v.slice_mut(s![t, w * c..(w + 1) * c]).assign(&x.row(src as usize));
                }
            }
        }
        self.push(v, Op::Im2col(a.0, k))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.len(), rows * cols, "reshape element count mismatch");
        let v = Array2::from_shape_vec((rows, cols), x.iter().cloned().collect())
            .expect("reshape");
        self.push(v, Op::Reshape(a.0))
    }

    /// Run reverse accumulation from `loss` (must be `1 x 1`). Returns one
    /// gradient slot per node; leaves hold `dloss/dleaf`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *r, dr);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, &g * &x.mapv(|v| 1.0 / (1.0 + (-v).exp())));
                }
                Op::SoftmaxRows(a, _mask) => {
                    // dx = y * (g - sum_j g_j y_j); masked columns have y == 0.
                    let y = &self.nodes[i].value;
                    let gy = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = y * &(&g - &gy);
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.nodes[p].value.nrows();
                        let gp = g.slice(s![off..off + h, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    da.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[*a].value.raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::SelectRows(a, idx) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    for (i_out, &r) in idx.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i_out);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Im2col(a, k) => {
                    let (t_len, c) = self.nodes[*a].value.dim();
                    let half = k / 2;
                    let mut da = Array2::zeros((t_len, c));
                    for t in 0..t_len {
                        for w in 0..*k {
                            let src = t as isize + w as isize - half as isize;
                            if src >= 0 && (src as usize) < t_len {
                                let mut dst = da.row_mut(src as usize);
                                dst += &g.slice(s![t, w * c..(w + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[*a].value.raw_dim();
                    let da = Array2::from_shape_vec(dim, g.iter().cloned().collect())
                        .expect("reshape grad");
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences on a scalar function of one leaf.
    fn fd_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        eps: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_chain_gradient_matches_finite_differences() {
        let x0 = array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]];
        let w0 = array![[0.5, -0.2], [0.1, 0.8], [-0.3, 0.6]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let w = t.leaf(w0.clone());
            let h = t.matmul(a, w);
            let h = t.tanh(h);
            let l = t.sum_all(h);
            t.value(l)[[0, 0]]
        };
        let mut t = Tape::new();
        let a = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let h = t.matmul(a, w);
        let h = t.tanh(h);
        let l = t.sum_all(h);
        let grads = t.backward(l);
        let ga = grads[a.0].as_ref().unwrap();
        assert!(max_rel_err(ga, &fd_grad(&f, &x0, 1e-5)) < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns_and_backprops() {
        let x0 = array![[0.4, -1.2, 2.0, 0.1]];
        let mask = vec![true, false, true, true];
        let target = array![[1.0, 0.0, -1.0, 0.5]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let y = t.softmax_rows(a, Some(&mask));
            let tv = t.leaf(target.clone());
            let d = t.sub(y, tv);
            let d2 = t.mul(d, d);
            let l = t.sum_all(d2);
            t.value(l)[[0, 0]]
        };
        let mut t = Tape::new();
        let a = t.leaf(x0.clone());
        let y = t.softmax_rows(a, Some(&mask));
        assert_eq!(t.value(y)[[0, 1]], 0.0);
        let row_sum: f64 = t.value(y).row(0).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        let tv = t.leaf(target.clone());
        let d = t.sub(y, tv);
        let d2 = t.mul(d, d);
        let l = t.sum_all(d2);
        let grads = t.backward(l);
        let ga = grads[a.0].as_ref().unwrap();
        assert!(max_rel_err(ga, &fd_grad(&f, &x0, 1e-5)) < 1e-6);
        // masked logit gets zero gradient
        assert_eq!(ga[[0, 1]], 0.0);
    }

    #[test]
    fn im2col_gradient_matches_finite_differences() {
        let x0 = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8]];
        let w0 = Array2::from_shape_fn((6, 3), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64) + 0.05);
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(x.clone());
            let cols = t.im2col(a, 3);
            let w = t.leaf(w0.clone());
            let y = t.matmul(cols, w);
            let y = t.sigmoid(y);
            let l = t.sum_all(y);
            t.value(l)[[0, 0]]
        };
        let mut t = Tape::new();
        let a = t.leaf(x0.clone());
        let cols = t.im2col(a, 3);
        let w = t.leaf(w0.clone());
        let y = t.matmul(cols, w);
        let y = t.sigmoid(y);
        let l = t.sum_all(y);
        let grads = t.backward(l);
        let ga = grads[a.0].as_ref().unwrap();
        assert!(max_rel_err(ga, &fd_grad(&f, &x0, 1e-5)) < 1e-6);
    }

    #[test]
    fn select_rows_accumulates_repeated_indices() {
        let emb = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut t = Tape::new();
        let e = t.leaf(emb);
        let sel = t.select_rows(e, &[1, 1, 0]);
        let l = t.sum_all(sel);
        let grads = t.backward(l);
        let ge = grads[e.0].as_ref().unwrap();
        assert_eq!(ge, &array![[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let a0 = array![[1.0, 2.0]];
        let b0 = array![[3.0]];
        let mut t = Tape::new();
        let a = t.leaf(a0);
        let b = t.leaf(b0);
        let c = t.concat_cols(&[a, b]);
        let sl = t.slice_cols(c, 1, 3);
        let l = t.sum_all(sl);
        let grads = t.backward(l);
        assert_eq!(grads[a.0].as_ref().unwrap(), &array![[0.0, 1.0]]);
        assert_eq!(grads[b.0].as_ref().unwrap(), &array![[1.0]]);
    }
}
