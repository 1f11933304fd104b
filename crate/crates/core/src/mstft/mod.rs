//! Multi-scale temporal-frequency transformer: dual temporal/frequency
//! convolution paths fused by cross-attention, a gated self-attention block
//! and an attention-weighted residual classifier head.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, ParamStore, Tensor};

pub use checkpoint::{
    decode, encode, load_checkpoint, model_checksum, read_manifest, save_checkpoint, CheckpointError, Manifest, FORMAT_VERSION,
};
pub use forward::{positional_encoding, stochastic_skip, AttentionRecord, Bound, ForwardTrace, GraphTrace, Mode};

/// Kernel size of every temporal, embedding and depthwise convolution.
pub const KERNEL: usize = 3;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ALPHA_INIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Variance of the Gaussian input noise.
    pub lambda_sq: f64,
    /// Positional-encoding wavelength base.
    pub tau: f64,
    pub d: usize,
    pub n_t: usize,
    pub p_s: f64,
    pub n_f: usize,
    pub d_p: usize,
    /// Total query/key/value width, split evenly across heads.
    pub d_k: usize,
    pub heads: usize,
    /// Probability of applying input noise to a training window.
    pub aug_strength: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub t: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub norm_groups: usize,
    /// Width of the classifier head's dense layers.
    pub head_hidden: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_sq: 0.1,
            tau: 1e4,
            d: 64,
            n_t: 2,
            p_s: 0.8,
            n_f: 2,
            d_p: 1024,
            d_k: 512,
            heads: 16,
            aug_strength: 0.3,
            lr: 1e-5,
            weight_decay: 1e-5,
            t: 300,
            ffn_expansion: 4,
            dropout: 0.1,
            norm_groups: 4,
            head_hidden: 64,
        }
    }
}

impl Hyperparams {
    /// Small configuration for finite-difference checks. A single norm group
    /// keeps every group at 4+ channels; narrower groups behave like a sign
    /// function and bury upstream gradients.
    pub fn reduced() -> Self {
        Self {
            d: 8,
            d_p: 16,
            d_k: 8,
            heads: 2,
            t: 32,
            head_hidden: 8,
            norm_groups: 1,
            ..Self::default()
        }
    }

    /// Configuration sized for single-core CPU training runs.
    pub fn desk() -> Self {
        Self {
            d: 16,
            d_p: 16,
            d_k: 16,
            heads: 2,
            head_hidden: 16,
            norm_groups: 2,
            lr: 2e-3,
            ..Self::default()
        }
    }

    /// Channel count of temporal block `i` (halved per block).
    pub fn temporal_channels(&self, i: usize) -> usize {
        self.d >> i
    }

    /// Channel count of the temporal path output.
    pub fn temporal_out(&self) -> usize {
        self.temporal_channels(self.n_t.saturating_sub(1))
    }

    pub fn fused(&self) -> usize {
        3 * self.d_p
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let cfg = |m: String| Err(NnError::Config(m));
        let sizes = [
            ("d", self.d),
            ("n_t", self.n_t),
            ("n_f", self.n_f),
            ("d_p", self.d_p),
            ("d_k", self.d_k),
            ("heads", self.heads),
            ("t", self.t),
            ("ffn_expansion", self.ffn_expansion),
            ("norm_groups", self.norm_groups),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return cfg(format!("{name} must be positive"));
        }
        if !self.d.is_multiple_of(2) {
            return cfg(format!("embedding dim d={} must be even", self.d));
        }
        if !self.d_p.is_multiple_of(self.heads) || !self.d_k.is_multiple_of(self.heads) {
            return cfg(format!("d_p={} and d_k={} must be divisible by heads={}", self.d_p, self.d_k, self.heads));
        }
        if !self.fused().is_multiple_of(self.heads) {
            return cfg("fused width must be divisible by heads".into());
        }
        for i in 0..self.n_t {
            let c = self.temporal_channels(i);
            if c == 0 || !c.is_multiple_of(self.norm_groups) {
                return cfg(format!("temporal block {i} width {c} not divisible by {} groups", self.norm_groups));
            }
        }
        for (what, c) in [("d", self.d), ("head_hidden", self.head_hidden)] {
            if c % self.norm_groups != 0 {
                return cfg(format!("{what}={c} not divisible by {} groups", self.norm_groups));
            }
        }
        for (name, p) in [("p_s", self.p_s), ("aug_strength", self.aug_strength)] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("{name}={p} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout={} must lie in [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("lambda_sq", self.lambda_sq),
            ("tau", self.tau),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return cfg(format!("{name}={v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Learnable parameters, batch-norm running statistics and the model RNG.
#[derive(Clone, Debug)]
pub struct MstftModel {
    pub hyper: Hyperparams,
    pub params: ParamStore,
    /// Non-learnable state (batch-norm running mean and variance).
    pub buffers: ParamStore,
    pub rng: ChaCha8Rng,
}

struct Init<'a> {
    params: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<(), NnError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.params.insert(name, t)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<(), NnError> {
        self.params.insert(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<(), NnError> {
        self.uniform(&format!("{prefix}.w"), &[cin, cout], cin)?;
        if bias {
            self.fill(&format!("{prefix}.b"), &[cout], 0.0)?;
        }
        Ok(())
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<(), NnError> {
        self.uniform(&format!("{prefix}.w"), &[KERNEL, cin, cout], KERNEL * cin)?;
        self.fill(&format!("{prefix}.b"), &[cout], 0.0)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<(), NnError> {
        self.fill(&format!("{prefix}.gamma"), &[c], 1.0)?;
        self.fill(&format!("{prefix}.beta"), &[c], 0.0)
    }

    fn attention(&mut self, prefix: &str, cq: usize, ckv: usize, d_k: usize, out: usize) -> Result<(), NnError> {
        self.linear(&format!("{prefix}.w_q"), cq, d_k, false)?;
        self.linear(&format!("{prefix}.w_k"), ckv, d_k, false)?;
        self.linear(&format!("{prefix}.w_v"), ckv, d_k, false)?;
        self.linear(&format!("{prefix}.w_o"), d_k, out, false)
    }
}

impl MstftModel {
    /// Fresh model: fan-in uniform weights, zero biases, unit norm gains.
    pub fn new(hyper: Hyperparams, seed: u64) -> Result<Self, NnError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: ParamStore::new(),
            rng: &mut rng,
        };
        let h = &hyper;
        init.conv("embed.conv", 1, h.d)?;
        let mut cin = h.d;
        for i in 0..h.n_t {
            let c = h.temporal_channels(i);
            init.conv(&format!("temporal.{i}.conv"), cin, c)?;
            init.norm(&format!("temporal.{i}.norm"), c)?;
            if c != cin {
                init.linear(&format!("temporal.{i}.skip"), cin, c, false)?;
            }
            cin = c;
        }
        init.conv("freq.embed", h.d, h.d)?;
        for j in 0..h.n_f {
            init.uniform(&format!("freq.{j}.depthwise.w"), &[KERNEL, h.d], KERNEL)?;
            init.fill(&format!("freq.{j}.depthwise.b"), &[h.d], 0.0)?;
            init.linear(&format!("freq.{j}.pointwise"), h.d, h.d, true)?;
            init.norm(&format!("freq.{j}.norm"), h.d)?;
        }
        let ct = h.temporal_out();
        init.linear("freq.proj", h.d, ct, true)?;
        init.linear("fusion.w_t", ct, h.d_p, false)?;
        init.linear("fusion.w_f", ct, h.d_p, false)?;
        init.attention("fusion.attn", h.d_p, h.d_p, h.d_k, h.d_p)?;
        let f = h.fused();
        init.norm("fusion.norm", f)?;
        init.attention("self_attn.attn", f, f, h.d_k, f)?;
        init.linear("self_attn.gate", f, f, true)?;
        init.fill("self_attn.alpha", &[f], ALPHA_INIT)?;
        init.linear("self_attn.ffn1", f, h.ffn_expansion * f, true)?;
        init.linear("self_attn.ffn2", h.ffn_expansion * f, f, true)?;
        init.norm("self_attn.norm", f)?;
        let pooled = 2 * f;
        init.norm("head.bn", pooled)?;
        init.linear("head.w1", pooled, h.head_hidden, true)?;
        init.linear("head.w_a", h.head_hidden, h.head_hidden, true)?;
        init.linear("head.w_r", pooled, h.head_hidden, true)?;
        init.norm("head.norm", h.head_hidden)?;
        init.linear("head.w_o", h.head_hidden, 1, true)?;
        let params = init.params;

        let mut buffers = ParamStore::new();
        buffers.insert("head.bn.running_mean", Tensor::zeros(&[pooled]))?;
        buffers.insert("head.bn.running_var", Tensor::full(&[pooled], 1.0))?;
        Ok(Self {
            hyper,
            params,
            buffers,
            rng,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Fold batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64]) {
        for (name, batch) in [("head.bn.running_mean", mean), ("head.bn.running_var", var)] {
            if let Some(t) = self.buffers.get_mut(name) {
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}
