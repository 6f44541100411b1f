//! Parameter storage, initializers, the Adam optimizer and small layer
//! helpers (LSTM cell, 1-D convolution, dropout masks) built on the tape.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};

/// Named parameter tensors. `BTreeMap` keeps iteration order deterministic,
/// which the seeded-training and checkpoint tests rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Zero-mean Gaussian init with the given sigma (Box-Muller).
pub fn gaussian_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

/// Binds parameters into a tape for one forward pass and remembers the node
/// ids so gradients can be read back per name after `backward`.
pub struct Binding {
    bound: Vec<(String, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Self { bound: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let v = tape.leaf(store.get(name).clone());
        self.bound.push((name.to_string(), v));
        v
    }

    /// Collect per-parameter gradients after `tape.backward`.
    pub fn gradients(
        &self,
        grads: &[Option<Array2<f64>>],
    ) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = &grads[var.0] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl Default for Binding {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*m / b1t;
            let vhat = &*v / b2t;
            *p -= &(mhat / (vhat.mapv(f64::sqrt) + self.eps) * self.lr);
        }
    }

    pub fn state(&self) -> (u64, &BTreeMap<String, Array2<f64>>, &BTreeMap<String, Array2<f64>>) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(
        lr: f64,
        step: u64,
        m: BTreeMap<String, Array2<f64>>,
        v: BTreeMap<String, Array2<f64>>,
    ) -> Self {
        Self {
            step,
            m,
            v,
            ..Self::new(lr)
        }
    }
}

/// One LSTM step. `x` is `1 x in_dim`, `h`/`c` are `1 x hidden`. The packed
/// weight `w` is `(in_dim + hidden) x 4*hidden` with gate order i, f, g, o;
/// `b` is `1 x 4*hidden`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
    hidden: usize,
) -> (Var, Var) {
    let xh = tape.concat_cols(&[x, h]);
    let gates = tape.matmul(xh, w);
    let gates = tape.add_row(gates, b);
    let i = tape.slice_cols(gates, 0, hidden);
    let f = tape.slice_cols(gates, hidden, 2 * hidden);
    let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
    let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o, ct);
    (h_new, c_new)
}

/// Same-padded 1-D convolution along rows: input `T x c_in`, kernel stored as
/// `(k*c_in) x c_out`, bias `1 x c_out`.
pub fn conv1d(tape: &mut Tape, x: Var, kernel: Var, bias: Var, k: usize) -> Var {
    let cols = tape.im2col(x, k);
    let y = tape.matmul(cols, kernel);
    tape.add_row(y, bias)
}

/// Inverted dropout mask: entries are `1/keep` with probability `keep`, else 0.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, drop: f64) -> Array2<f64> {
    let keep = 1.0 - drop;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen_range(0.0..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_parameters_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Array2::from_elem((2, 2), 1.0));
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array2::from_elem((2, 2), 1.0));
        opt.apply(&mut store, &grads);
        assert!(store.get("w").iter().all(|&x| x < 1.0));
    }

    #[test]
    fn lstm_step_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (in_dim, hidden) = (3, 4);
        let w0 = uniform_init(&mut rng, in_dim + hidden, 4 * hidden);
        let b0 = zeros(1, 4 * hidden);
        let x0 = uniform_init(&mut rng, 1, in_dim);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let h = t.leaf(zeros(1, hidden));
            let c = t.leaf(zeros(1, hidden));
            let w = t.leaf(w0.clone());
            let b = t.leaf(b0.clone());
            let (h1, c1) = lstm_step(&mut t, x, h, c, w, b, hidden);
            (t.value(h1).clone(), t.value(c1).clone())
        };
        let (h_a, c_a) = run();
        let (h_b, c_b) = run();
        assert_eq!(h_a.dim(), (1, hidden));
        assert_eq!(c_a.dim(), (1, hidden));
        assert_eq!(h_a, h_b);
        assert_eq!(c_a, c_b);
    }

    #[test]
    fn dropout_mask_is_seeded_and_inverted() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let ma = dropout_mask(&mut a, 4, 8, 0.5);
        let mb = dropout_mask(&mut b, 4, 8, 0.5);
        assert_eq!(ma, mb);
        assert!(ma.iter().all(|&x| x == 0.0 || (x - 2.0).abs() < 1e-12));
    }
}
