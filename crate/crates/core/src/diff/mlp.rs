//! Fully connected networks with hand-derived reverse-mode and R-operator passes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// First derivative, written in terms of the pre-activation `z` and output `a`.
    #[inline]
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu => 0.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            activation: Activation::Tanh,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!("all MLP dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` for every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Segment table: `layer{k}.weight` (row-major `out × in`) then `layer{k}.bias`.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (k, (i, o)) in self.layer_dims().into_iter().enumerate() {
            out.push((format!("layer{k}.weight"), i * o));
            out.push((format!("layer{k}.bias"), o));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

/// Runtime view of an [`MlpSpec`] with precomputed parameter offsets.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    n_params: usize,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`acts[0]` is the network input).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Directional derivatives of a forward pass along a parameter direction.
#[derive(Debug, Clone)]
pub struct TangentCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl TangentCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for (n_in, n_out) in spec.layer_dims() {
            let w = offset;
            let b = w + n_in * n_out;
            offset = b + n_out;
            layers.push(Layer { n_in, n_out, w, b });
        }
        Ok(Self {
            spec,
            layers,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Orthogonal initialization: `hidden_gain` on hidden layers, `output_gain` on the last
    /// layer, zero biases.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        hidden_gain: f64,
        output_gain: f64,
    ) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let gain = if k == last { output_gain } else { hidden_gain };
            let w = orthogonal(layer.n_out, layer.n_in, gain, rng);
            params[layer.w..layer.w + w.len()].copy_from_slice(&w);
        }
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() < self.n_params {
            return Err(Error::config(format!(
                "network needs {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        if input.len() != self.spec.input_dim {
            return Err(Error::config(format!(
                "network input has dim {}, expected {}",
                input.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Output of the network. `params` may be longer than the network; extra entries are
    /// ignored.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut a = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine(params, layer, &a);
            if k != last {
                for v in &mut z {
                    *v = act.apply(*v);
                }
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, params: &[f64], input: &[f64]) -> Result<ForwardCache> {
        self.check(params, input)?;
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(params, layer, &acts[k]);
            if k != last {
                acts.push(z.iter().map(|&v| act.apply(v)).collect());
            }
            pre.push(z);
        }
        Ok(ForwardCache { acts, pre })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let act = self.spec.activation;
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a_in = &cache.acts[k];
            for o in 0..layer.n_out {
                let d = delta[o];
                grad[layer.b + o] += d;
                if d != 0.0 {
                    let row = layer.w + o * layer.n_in;
                    for (g, &x) in grad[row..row + layer.n_in].iter_mut().zip(a_in) {
                        *g += d * x;
                    }
                }
            }
            if k > 0 {
                let mut d_in = vec![0.0; layer.n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &params[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
                        for (di, &w) in d_in.iter_mut().zip(row) {
                            *di += d * w;
                        }
                    }
                }
                let z_prev = &cache.pre[k - 1];
                for ((di, &z), &a) in d_in.iter_mut().zip(z_prev).zip(a_in) {
                    *di *= act.d1(z, a);
                }
                delta = d_in;
            }
        }
    }

    /// Forward-mode pass: derivative of every activation along parameter direction `v`.
    pub fn forward_tangent(&self, params: &[f64], v: &[f64], cache: &ForwardCache) -> TangentCache {
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(vec![0.0; self.spec.input_dim]);
        for (k, layer) in self.layers.iter().enumerate() {
            // R{z} = V a + W R{a} + R{b}
            let mut rz = affine(v, layer, &cache.acts[k]);
            let wra = affine_no_bias(params, layer, &acts[k]);
            for (r, x) in rz.iter_mut().zip(wra) {
                *r += x;
            }
            if k != last {
                let z = &cache.pre[k];
                let a = &cache.acts[k + 1];
                acts.push(
                    rz.iter()
                        .zip(z)
                        .zip(a)
                        .map(|((&r, &zz), &aa)| act.d1(zz, aa) * r)
                        .collect(),
                );
            }
            pre.push(rz);
        }
        TangentCache { acts, pre }
    }

    /// Pearlmutter R-operator on the backward pass: accumulates the directional derivative
    /// of the parameter gradient along `v` into `hv`.
    ///
    /// `d_out` is `d loss / d output`; `r_d_out` is its directional derivative along `v`
    /// (i.e. the output-space Hessian applied to the output tangent, plus any cross terms).
    #[allow(clippy::too_many_arguments)]
    pub fn backward_rop(
        &self,
        params: &[f64],
        v: &[f64],
        cache: &ForwardCache,
        tangent: &TangentCache,
        d_out: &[f64],
        r_d_out: &[f64],
        hv: &mut [f64],
    ) {
        let act = self.spec.activation;
        let mut delta = d_out.to_vec();
        let mut r_delta = r_d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let a_in = &cache.acts[k];
            let ra_in = &tangent.acts[k];
            for o in 0..layer.n_out {
                let d = delta[o];
                let rd = r_delta[o];
                hv[layer.b + o] += rd;
                let row = layer.w + o * layer.n_in;
                for ((h, &x), &rx) in hv[row..row + layer.n_in].iter_mut().zip(a_in).zip(ra_in) {
                    *h += rd * x + d * rx;
                }
            }
            if k > 0 {
                let mut d_in = vec![0.0; layer.n_in];
                let mut rd_in = vec![0.0; layer.n_in];
                for o in 0..layer.n_out {
                    let d = delta[o];
                    let rd = r_delta[o];
                    let span = layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in;
                    for (((di, rdi), &w), &vw) in d_in
                        .iter_mut()
                        .zip(rd_in.iter_mut())
                        .zip(&params[span.clone()])
                        .zip(&v[span])
                    {
                        *di += d * w;
                        *rdi += rd * w + d * vw;
                    }
                }
                let z_prev = &cache.pre[k - 1];
                let rz_prev = &tangent.pre[k - 1];
                let mut next = vec![0.0; layer.n_in];
                let mut r_next = vec![0.0; layer.n_in];
                for j in 0..layer.n_in {
                    let a = a_in[j];
                    let f1 = act.d1(z_prev[j], a);
                    let f2 = act.d2(a);
                    next[j] = f1 * d_in[j];
                    r_next[j] = f2 * rz_prev[j] * d_in[j] + f1 * rd_in[j];
                }
                delta = next;
                r_delta = r_next;
            }
        }
    }
}

fn affine(params: &[f64], layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut z = params[layer.b..layer.b + layer.n_out].to_vec();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &params[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
        *zo += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
    z
}

fn affine_no_bias(params: &[f64], layer: &Layer, x: &[f64]) -> Vec<f64> {
    (0..layer.n_out)
        .map(|o| {
            let row = &params[layer.w + o * layer.n_in..layer.w + (o + 1) * layer.n_in];
            row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        })
        .collect()
}

/// Row-major `rows × cols` matrix with orthonormal rows or columns (whichever is fewer),
/// scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gaussian =
        nalgebra::DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = gaussian.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            for i in 0..tall {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

/// Network output for `input` using the leading parameters of `params`.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::new(spec.clone())?;
    if params.len() != mlp.param_count() {
        return Err(Error::config(format!(
            "parameter vector has {} entries, network needs {}",
            params.len(),
            mlp.param_count()
        )));
    }
    mlp.forward(params.values(), input)
}
