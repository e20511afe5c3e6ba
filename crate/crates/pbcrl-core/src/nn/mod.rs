//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Hidden layers share one activation; the output layer is always linear.
//! Parameters live in plain `Vec<f64>` (row-major weights), which keeps
//! finite-difference checks and flat optimizer state trivial.

mod adam;
mod checkpoint;

pub use adam::{adam_step, adam_step_slice, AdamState};
pub use checkpoint::{load_checkpoint, read_sidecar, save_checkpoint, sidecar_path};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::all_finite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// Row-major `(out_dim, in_dim)`.
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Layer {
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Post-activation values for every layer of one forward pass, `a_0 = input`
/// through `a_L = output`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds >= 2 layers")
    }
}

/// Parameter gradients with the same shape as [`Network`].
#[derive(Clone, Debug)]
pub struct Gradients {
    layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug)]
struct LayerGrad {
    dw: Vec<f64>,
    db: Vec<f64>,
}

impl Network {
    /// Xavier-uniform weights (`limit = sqrt(6 / (fan_in + fan_out))`), zero
    /// biases, drawn from a ChaCha stream seeded with `seed`.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    w,
                    b: vec![0.0; fan_out],
                    in_dim: fan_in,
                    out_dim: fan_out,
                }
            })
            .collect();
        Ok(Network {
            sizes: sizes.to_vec(),
            activation,
            layers,
        })
    }

    /// All-zero parameters; used by tests that need a blank slate.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|pair| Layer {
                w: vec![0.0; pair[0] * pair[1]],
                b: vec![0.0; pair[1]],
                in_dim: pair[0],
                out_dim: pair[1],
            })
            .collect();
        Ok(Network {
            sizes: sizes.to_vec(),
            activation,
            layers,
        })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 {
            return Err(Error::Shape(format!(
                "network needs input and output layers, got sizes {sizes:?}"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("zero-width layer in {sizes:?}")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match input dim {}",
                input.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        let mut buf = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(activations.last().expect("non-empty"), &mut buf);
            if i < last {
                for v in buf.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            activations.push(std::mem::take(&mut buf));
        }
        Ok(ForwardTrace { activations })
    }

    /// Backpropagates `upstream = dL/d(output)` through a stored trace.
    /// Returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_into(trace, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Network::backward`] but accumulates into an existing gradient
    /// buffer; the hot path for per-step trajectory training.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} does not match output dim {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        if trace.activations.len() != self.layers.len() + 1
            || trace.activations[0].len() != self.in_dim()
        {
            return Err(Error::Shape("trace does not match network".into()));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }

        let mut delta = upstream.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            // Output layer is linear; hidden layers need the activation
            // derivative folded in.
            if l < last {
                let a = &trace.activations[l + 1];
                for (d, &ai) in delta.iter_mut().zip(a) {
                    *d *= self.activation.derivative_from_output(ai);
                }
            }
            let a_prev = &trace.activations[l];
            let lg = &mut grads.layers[l];
            for o in 0..layer.out_dim {
                let d = delta[o];
                lg.db[o] += d;
                let row = &mut lg.dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &x) in row.iter_mut().zip(a_prev) {
                    *g += d * x;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Flattened parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if !all_finite(flat) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.len();
            l.w.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            if !all_finite(&l.w) || !all_finite(&l.b) {
                return Err(Error::NonFinite("network parameters".into()));
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: vec![0.0; l.w.len()],
                    db: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    /// `self += other * scale`; shapes must match.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.dw.len() != b.dw.len() || a.db.len() != b.db.len() {
                return Err(Error::Shape("gradient layer size mismatch".into()));
            }
            for (x, y) in a.dw.iter_mut().zip(&b.dw) {
                *x += scale * y;
            }
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.dw.iter_mut().chain(l.db.iter_mut()) {
                *x *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.dw);
            out.extend_from_slice(&l.db);
        }
        out
    }

    pub(crate) fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.dw.iter().chain(l.db.iter()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.flat_iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.flat_iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, abs_tol: f64, rel_tol: f64) {
        let diff = (a - b).abs();
        let scale = a.abs().max(b.abs()).max(1e-12);
        assert!(
            diff <= abs_tol || diff / scale <= rel_tol,
            "{a} vs {b} (diff {diff})"
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Network::new(&[4], Activation::Tanh, 0).is_err());
        assert!(Network::new(&[4, 0, 1], Activation::Tanh, 0).is_err());
        let net = Network::new(&[3, 5, 2], Activation::Tanh, 0).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn xavier_init_within_limits_and_seeded() {
        let a = Network::new(&[4, 8, 1], Activation::Tanh, 9).unwrap();
        let b = Network::new(&[4, 8, 1], Activation::Tanh, 9).unwrap();
        let c = Network::new(&[4, 8, 1], Activation::Tanh, 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let limit0 = (6.0f64 / 12.0).sqrt();
        for &w in &a.layers[0].w {
            assert!(w.abs() <= limit0);
        }
        assert!(a.layers[0].b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_network_is_linear_map() {
        let mut net = Network::zeros(&[2, 2], Activation::Identity).unwrap();
        net.set_params(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let y = net.forward(&[1.0, 1.0]).unwrap();
        assert_close(y[0], 3.5, 1e-15, 0.0);
        assert_close(y[1], 6.5, 1e-15, 0.0);
    }

    #[test]
    fn forward_matches_trace_output() {
        let net = Network::new(&[3, 7, 4, 2], Activation::Tanh, 1).unwrap();
        let x = [0.3, -1.2, 0.7];
        let y = net.forward(&x).unwrap();
        let t = net.forward_trace(&x).unwrap();
        assert_eq!(y, t.output());
    }

    /// Central finite differences over every parameter and input coordinate,
    /// with loss L = sum of outputs.
    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5u64 {
            for activation in [Activation::Tanh, Activation::Identity] {
                let mut net = Network::new(&[4, 6, 5, 2], activation, seed).unwrap();
                let x: Vec<f64> = (0..4).map(|i| 0.3 * (i as f64) - 0.5).collect();
                let upstream = vec![1.0; 2];
                let trace = net.forward_trace(&x).unwrap();
                let (grads, dx) = net.backward(&trace, &upstream).unwrap();
                let flat = grads.flat();

                let h = 1e-6;
                let mut params = net.params();
                for i in 0..params.len() {
                    let orig = params[i];
                    params[i] = orig + h;
                    net.set_params(&params).unwrap();
                    let lp: f64 = net.forward(&x).unwrap().iter().sum();
                    params[i] = orig - h;
                    net.set_params(&params).unwrap();
                    let lm: f64 = net.forward(&x).unwrap().iter().sum();
                    params[i] = orig;
                    net.set_params(&params).unwrap();
                    assert_close(flat[i], (lp - lm) / (2.0 * h), 1e-7, 1e-6);
                }
                for i in 0..x.len() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let lp: f64 = net.forward(&xp).unwrap().iter().sum();
                    let lm: f64 = net.forward(&xm).unwrap().iter().sum();
                    assert_close(dx[i], (lp - lm) / (2.0 * h), 1e-7, 1e-6);
                }
            }
        }
    }

    #[test]
    fn relu_backward_away_from_kinks() {
        let net = Network::new(&[3, 8, 1], Activation::Relu, 3).unwrap();
        let x = [0.9, -0.4, 1.3];
        let trace = net.forward_trace(&x).unwrap();
        // Skip if any hidden pre-activation sits near the kink.
        if trace.activations[1].iter().any(|a| a.abs() < 1e-4) {
            return;
        }
        let (grads, _) = net.backward(&trace, &[1.0]).unwrap();
        let flat = grads.flat();
        let mut net2 = net.clone();
        let mut params = net2.params();
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            net2.set_params(&params).unwrap();
            let lp = net2.forward(&x).unwrap()[0];
            params[i] = orig - h;
            net2.set_params(&params).unwrap();
            let lm = net2.forward(&x).unwrap()[0];
            params[i] = orig;
            net2.set_params(&params).unwrap();
            assert_close(flat[i], (lp - lm) / (2.0 * h), 1e-6, 1e-5);
        }
    }

    #[test]
    fn params_roundtrip() {
        let net = Network::new(&[5, 9, 3], Activation::Tanh, 17).unwrap();
        let mut other = Network::zeros(&[5, 9, 3], Activation::Tanh).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(net.params(), other.params());
        assert!(other.set_params(&[0.0; 3]).is_err());
        assert!(other.set_params(&vec![f64::NAN; net.param_count()]).is_err());
    }

    #[test]
    fn gradient_accumulation_scales() {
        let net = Network::new(&[2, 3, 1], Activation::Tanh, 5).unwrap();
        let t = net.forward_trace(&[0.1, 0.2]).unwrap();
        let (g, _) = net.backward(&t, &[1.0]).unwrap();
        let mut acc = Gradients::zeros_like(&net);
        acc.add_scaled(&g, 2.0).unwrap();
        acc.add_scaled(&g, -1.0).unwrap();
        for (a, b) in acc.flat().iter().zip(g.flat().iter()) {
            assert_close(*a, *b, 1e-15, 1e-12);
        }
    }
}
