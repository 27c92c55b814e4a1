//! Neural network building blocks on top of the autodiff tape: a named
//! parameter store, Glorot initialization, linear layers, small MLPs,
//! and an LSTM cell.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShivaeError};
use crate::tape::{Gradients, Tape, Var};

/// All trainable weights, keyed by hierarchical names such as
/// `"enc.mu.w"`. A `BTreeMap` keeps iteration order deterministic, which
/// the optimizer and the serialized checkpoint format both rely on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter matrix. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name '{name}'");
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array2::len).sum()
    }

    /// Zero every parameter in place (test hook for symmetry anchors).
    pub fn zero_all(&mut self) {
        for v in self.params.values_mut() {
            v.fill(0.0);
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in &self.params {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ShivaeError::numeric(format!(
                    "parameter '{name}' contains a non-finite value"
                )));
            }
        }
        Ok(())
    }

    /// Enter every parameter on a tape, returning name -> node handles.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.input(v.clone())))
            .collect();
        Binding { vars }
    }
}

/// Tape handles of one bound parameter set.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' was not bound"))
    }

    /// Pull gradients for every bound parameter out of a backward pass.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(tape, v)))
            .collect()
    }
}

/// Glorot (Xavier) uniform initialization: U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Affine layer x . W + b with W of shape in x out and bias 1 x out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.insert(&w, glorot_uniform(in_dim, out_dim, rng));
        store.insert(&b, Array2::zeros((1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let wx = tape.matmul(x, bind.var(&self.w));
        tape.add_row_vec(wx, bind.var(&self.b))
    }
}

/// Multilayer perceptron: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[in, hidden, out]`.
    pub fn init(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp '{prefix}' needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Standard LSTM cell. One fused weight matrix maps `[x, h]` to the four
/// gate pre-activations in order `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: String,
    pub b: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wx = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.insert(&wx, glorot_uniform(input_dim + hidden_dim, 4 * hidden_dim, rng));
        store.insert(&b, Array2::zeros((1, 4 * hidden_dim)));
        LstmCell { wx, b, input_dim, hidden_dim }
    }

    /// Zero initial hidden and cell state for a batch.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> (Var, Var) {
        let h = tape.input(Array2::zeros((batch, self.hidden_dim)));
        let c = tape.input(Array2::zeros((batch, self.hidden_dim)));
        (h, c)
    }

    pub fn step(&self, tape: &mut Tape, bind: &Binding, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden_dim;
        let xi = tape.concat_cols(&[x, h]);
        let pre = tape.matmul(xi, bind.var(&self.wx));
        let pre = tape.add_row_vec(pre, bind.var(&self.b));
        let i_gate = tape.slice_cols(pre, 0, hd);
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(pre, hd, 2 * hd);
        let f_gate = tape.sigmoid(f_gate);
        let g_cell = tape.slice_cols(pre, 2 * hd, 3 * hd);
        let g_cell = tape.tanh(g_cell);
        let o_gate = tape.slice_cols(pre, 3 * hd, 4 * hd);
        let o_gate = tape.sigmoid(o_gate);
        let keep = tape.mul(f_gate, c);
        let write = tape.mul(i_gate, g_cell);
        let c_new = tape.add(keep, write);
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_gate, c_act);
        (h_new, c_new)
    }
}
