//! Small layer zoo on top of the tensor engine: linear, conv, norms and
//! multi-head self-attention. Initialization is truncated normal
//! (sigma = 0.02, clipped at two sigma) for projections and zeros for
//! biases, seeded explicitly.

use crate::tensor::{Data, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Truncated normal draws: resample anything beyond two standard
/// deviations.
pub fn trunc_normal(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Data {
    Data::from_shape_fn(IxDyn(shape), |_| loop {
        // Box-Muller keeps us independent of distribution crates.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * sigma;
        if z.abs() <= 2.0 * sigma {
            break z;
        }
    })
}

pub fn zeros(shape: &[usize]) -> Data {
    Data::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Data {
    Data::from_elem(IxDyn(shape), 1.0)
}

/// Named trainable tensors, the unit the optimizer and checkpoints work
/// with. Names are stable across runs.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
    }

    pub fn extend(&mut self, prefix: &str, other: ParamSet) {
        for (name, t) in other.entries {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

pub struct Linear {
    pub weight: Tensor, // (in, out)
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::param(trunc_normal(&[in_dim, out_dim], 0.02, rng)),
            bias: bias.then(|| Tensor::param(zeros(&[out_dim]))),
        }
    }

    /// Square weight initialized to the identity (used by tests and the
    /// identity-projection configuration).
    pub fn identity(dim: usize, bias: bool) -> Self {
        let mut w = zeros(&[dim, dim]);
        for i in 0..dim {
            w[[i, i]] = 1.0;
        }
        Linear {
            weight: Tensor::param(w),
            bias: bias.then(|| Tensor::param(zeros(&[dim]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_bias_rows(b),
            None => y,
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("weight", self.weight.clone());
        if let Some(b) = &self.bias {
            p.push("bias", b.clone());
        }
        p
    }
}

pub struct Conv2dLayer {
    pub weight: Tensor, // (out, in, kh, kw)
    pub bias: Tensor,
}

impl Conv2dLayer {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2dLayer {
            weight: Tensor::param(trunc_normal(&[out_ch, in_ch, k, k], 0.02, rng)),
            bias: Tensor::param(zeros(&[out_ch])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, &self.bias)
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("weight", self.weight.clone());
        p.push("bias", self.bias.clone());
        p
    }
}

pub struct GroupNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

/// Largest divisor of `channels` that is at most `preferred`, so small
/// desk-scale channel counts still get a valid grouping.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNormLayer {
    pub fn new(channels: usize, preferred_groups: usize) -> Self {
        GroupNormLayer {
            gamma: Tensor::param(ones(&[channels])),
            beta: Tensor::param(zeros(&[channels])),
            groups: groups_for(channels, preferred_groups),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(self.groups, &self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("gamma", self.gamma.clone());
        p.push("beta", self.beta.clone());
        p
    }
}

pub struct LayerNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(dim: usize) -> Self {
        LayerNormLayer {
            gamma: Tensor::param(ones(&[dim])),
            beta: Tensor::param(zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("gamma", self.gamma.clone());
        p.push("beta", self.beta.clone());
        p
    }
}

pub struct MultiHeadSelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "heads must divide dim");
        MultiHeadSelfAttention {
            wq: Linear::new(dim, dim, true, rng),
            wk: Linear::new(dim, dim, true, rng),
            wv: Linear::new(dim, dim, true, rng),
            wo: Linear::new(dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// x: (T, dim) -> (T, dim)
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs: Option<Tensor> = None;
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let attn = qh
                .matmul(&kh.permute_axes(&[1, 0]))
                .scale(scale)
                .softmax_axis(1);
            let oh = attn.matmul(&vh);
            head_outs = Some(match head_outs {
                None => oh,
                Some(acc) => acc.concat_cols(&oh),
            });
        }
        self.wo.forward(&head_outs.unwrap())
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend("wq", self.wq.params());
        p.extend("wk", self.wk.params());
        p.extend("wv", self.wv.params());
        p.extend("wo", self.wo.params());
        p
    }
}

pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: MultiHeadSelfAttention,
    pub ln2: LayerNormLayer,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        TransformerBlock {
            ln1: LayerNormLayer::new(dim),
            attn: MultiHeadSelfAttention::new(dim, heads, rng),
            ln2: LayerNormLayer::new(dim),
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let a = self.attn.forward(&self.ln1.forward(x));
        let x = x.add(&a);
        let m = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)).gelu());
        x.add(&m)
    }

    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend("ln1", self.ln1.params());
        p.extend("attn", self.attn.params());
        p.extend("ln2", self.ln2.params());
        p.extend("fc1", self.fc1.params());
        p.extend("fc2", self.fc2.params());
        p
    }
}
