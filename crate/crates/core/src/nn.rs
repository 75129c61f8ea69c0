//! Parameterized layers built on the autodiff tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Result, TdaError};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `y = x W + b` on `(n, d_in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), group, uniform(rng, &[d_in, d_out], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[1, d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weights (and bias) to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Row-wise layer normalization with optional learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize, affine: bool) -> Self {
        if !affine {
            return Self {
                gamma: None,
                beta: None,
            };
        }
        Self {
            gamma: Some(store.add(format!("{name}.gamma"), group, Tensor::full(&[1, dim], 1.0))),
            beta: Some(store.add(format!("{name}.beta"), group, Tensor::zeros(&[1, dim]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = g.layer_norm_rows(x, LN_EPS)?;
        if let Some(gamma) = self.gamma {
            let p = g.param(gamma);
            y = g.mul_row(y, p)?;
        }
        if let Some(beta) = self.beta {
            let p = g.param(beta);
            y = g.add_row(y, p)?;
        }
        Ok(y)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_query: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TdaError::Config(format!(
                "{name}: model width {d_model} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), group, d_query, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d_kv, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d_kv, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d_model, d_model, true, rng),
            heads,
            d_model,
        })
    }

    /// `(n_q, d_query) x (n_kv, d_kv) -> (n_q, d_model)`.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, cat)
    }
}

/// Strided 2-D convolution with a square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            group,
            uniform(rng, &[c_out, c_in, kernel, kernel], bound),
        );
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::GroupSet;
    use crate::gradcheck::{check_param_gradients, worst};

    #[test]
    fn attention_parameters_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", ParamGroup::Temporal, 3, 2, 4, 2, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", ParamGroup::Temporal, 4, true);
        let q_in = uniform(&mut rng, &[3, 3], 1.0);
        let kv_in = uniform(&mut rng, &[2, 2], 1.0);
        let build = |g: &mut Graph| {
            let q = g.constant(q_in.clone());
            let kv = g.constant(kv_in.clone());
            let a = mha.forward(g, q, kv)?;
            let n = ln.forward(g, a)?;
            let s = g.sigmoid(n);
            Ok(g.mean(s))
        };
        let checks = check_param_gradients(&store, GroupSet::all(), build, 1e-6).unwrap();
        assert!(worst(&checks) < 1e-6, "{checks:?}");
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, "x", ParamGroup::Temporal, 4, 4, 6, 4, &mut rng).is_err());
    }
}
