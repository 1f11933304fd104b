use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Hyperparams, MstftModel, NORM_EPS};
use crate::nn::{Activation, BatchStats, Graph, NnError, ParamStore, Pool, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter name to graph leaf.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind(params: &ParamStore, g: &mut Graph, requires_grad: bool) -> Result<Self, NnError> {
        let mut vars = HashMap::with_capacity(params.len());
        for name in params.names() {
            vars.insert(name.to_string(), params.bind(g, name, requires_grad)?);
        }
        Ok(Self { vars })
    }

    /// Pair names with already created leaves, in order.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NnError::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph nodes of one forward pass.
pub struct GraphTrace {
    pub input: Var,
    pub embedded: Var,
    pub temporal_blocks: Vec<Var>,
    pub temporal_out: Var,
    pub freq_out: Var,
    /// Attention nodes carrying their weights.
    pub fusion_attention: Var,
    pub self_attention: Var,
    /// Fusion block output `F` and self-attention block output `F''`.
    pub fusion_out: Var,
    /// Gated, scaled attention residual `F'` before the feed-forward step.
    pub attn_residual: Var,
    pub self_out: Var,
    pub logit: Var,
    pub prob: Var,
    pub batch_stats: Option<BatchStats>,
    pub skips_taken: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: &'static str,
    /// `[batch, heads, lq, lk]`.
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Values extracted from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub attention: Vec<AttentionRecord>,
    pub l_int: usize,
    pub fusion_channels: usize,
    pub temporal_blocks: Vec<Tensor>,
    pub fusion_out: Tensor,
}

/// Sinusoidal encoding `[l, d]` with wavelength base `tau`.
pub fn positional_encoding(l: usize, d: usize, tau: f64) -> Result<Tensor, NnError> {
    if !d.is_multiple_of(2) {
        return Err(NnError::Config(format!("positional encoding needs an even width, got {d}")));
    }
    let mut p = Tensor::zeros(&[l, d]);
    let data = p.data_mut();
    for t in 0..l {
        for k in 0..d / 2 {
            let angle = t as f64 / tau.powf(2.0 * k as f64 / d as f64);
            data[t * d + 2 * k] = angle.sin();
            data[t * d + 2 * k + 1] = angle.cos();
        }
    }
    Ok(p)
}

fn survives(p_s: f64, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < p_s
}

/// Residual path kept with probability `p_s` in training, expectation form in eval.
/// Returns the output and whether the residual branch was used.
pub fn stochastic_skip(
    g: &mut Graph,
    x: Var,
    fx: Var,
    p_s: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Var, bool), NnError> {
    if g.shape(x) != g.shape(fx) {
        return Err(NnError::Shape(format!("skip: {:?} vs {:?}", g.shape(x), g.shape(fx))));
    }
    match mode {
        Mode::Train => {
            if survives(p_s, rng) {
                Ok((g.add(fx, x)?, true))
            } else {
                Ok((x, false))
            }
        }
        Mode::Eval => {
            let scaled = g.scale(fx, p_s)?;
            Ok((g.add(scaled, x)?, true))
        }
    }
}

struct Builder<'a, R: Rng> {
    g: &'a mut Graph,
    p: &'a Bound,
    h: &'a Hyperparams,
    buffers: &'a ParamStore,
    mode: Mode,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var, NnError> {
        let w = self.p.get(&format!("{prefix}.w"))?;
        let b = if bias { Some(self.p.get(&format!("{prefix}.b"))?) } else { None };
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str, groups: usize) -> Result<Var, NnError> {
        let gamma = self.p.get(&format!("{prefix}.gamma"))?;
        let beta = self.p.get(&format!("{prefix}.beta"))?;
        self.g.group_norm(x, gamma, beta, groups, NORM_EPS)
    }

    fn conv(&mut self, x: Var, prefix: &str, dilation: usize, causal: bool) -> Result<Var, NnError> {
        let w = self.p.get(&format!("{prefix}.w"))?;
        let b = self.p.get(&format!("{prefix}.b"))?;
        self.g.conv1d(x, w, Some(b), dilation, causal)
    }

    fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        self.g.activation(Activation::Gelu, x)
    }

    /// Multi-head attention; returns (projected output, attention node).
    fn mha(&mut self, q_in: Var, kv_in: Var, prefix: &str) -> Result<(Var, Var), NnError> {
        let q = self.linear(q_in, &format!("{prefix}.w_q"), false)?;
        let k = self.linear(kv_in, &format!("{prefix}.w_k"), false)?;
        let v = self.linear(kv_in, &format!("{prefix}.w_v"), false)?;
        let att = self.g.attention(q, k, v, self.h.heads)?;
        let out = self.linear(att, &format!("{prefix}.w_o"), false)?;
        Ok((out, att))
    }

    fn embed(&mut self, x: Var) -> Result<Var, NnError> {
        let (b, t) = (self.g.shape(x)[0], self.g.shape(x)[1]);
        let mut x_in = x;
        if self.mode == Mode::Train && self.h.aug_strength > 0.0 {
            let normal = Normal::new(0.0, self.h.lambda_sq.sqrt()).map_err(|e| NnError::Config(e.to_string()))?;
            let mut noise = Tensor::zeros(&[b, t, 1]);
            for row in noise.data_mut().chunks_mut(t) {
                if self.rng.random::<f64>() < self.h.aug_strength {
                    row.iter_mut().for_each(|v| *v = normal.sample(self.rng));
                }
            }
            let noise = self.g.constant(noise);
            x_in = self.g.add(x, noise)?;
        }
        let c = self.conv(x_in, "embed.conv", 1, true)?;
        let pe = positional_encoding(t, self.h.d, self.h.tau)?;
        let mut tiled = Vec::with_capacity(b * pe.len());
        for _ in 0..b {
            tiled.extend_from_slice(pe.data());
        }
        let pe = self.g.constant(Tensor::new(&[b, t, self.h.d], tiled)?);
        self.g.add(c, pe)
    }

    fn temporal(&mut self, x: Var, skips: &mut Vec<bool>) -> Result<(Var, Vec<Var>), NnError> {
        let mut z = x;
        let mut blocks = Vec::with_capacity(self.h.n_t);
        for i in 0..self.h.n_t {
            let prefix = format!("temporal.{i}");
            let cout = self.h.temporal_channels(i);
            let residual = if self.g.shape(z)[2] != cout {
                self.linear(z, &format!("{prefix}.skip"), false)?
            } else {
                z
            };
            // Drawing before computing the branch lets a dropped branch be skipped entirely.
            let keep = match self.mode {
                Mode::Train => survives(self.h.p_s, self.rng),
                Mode::Eval => true,
            };
            z = if keep {
                let c = self.conv(z, &format!("{prefix}.conv"), 1 << i, true)?;
                let a = self.gelu(c)?;
                let f = self.norm(a, &format!("{prefix}.norm"), self.h.norm_groups)?;
                let f = if self.mode == Mode::Eval { self.g.scale(f, self.h.p_s)? } else { f };
                self.g.add(f, residual)?
            } else {
                residual
            };
            skips.push(keep);
            blocks.push(z);
        }
        Ok((z, blocks))
    }

    fn frequency(&mut self, x: Var, target_len: usize) -> Result<Var, NnError> {
        let mut z = self.conv(x, "freq.embed", 1, false)?;
        for j in 0..self.h.n_f {
            let prefix = format!("freq.{j}");
            let w = self.p.get(&format!("{prefix}.depthwise.w"))?;
            let b = self.p.get(&format!("{prefix}.depthwise.b"))?;
            let dw = self.g.depthwise_conv1d(z, w, Some(b), 1, false)?;
            let pw = self.linear(dw, &format!("{prefix}.pointwise"), true)?;
            let a = self.gelu(pw)?;
            z = self.norm(a, &format!("{prefix}.norm"), self.h.norm_groups)?;
        }
        let pooled = self.g.pool(Pool::AdaptiveAvg(target_len), z)?;
        self.linear(pooled, "freq.proj", true)
    }

    fn head(&mut self, f2: Var) -> Result<(Var, Option<BatchStats>), NnError> {
        let avg = self.g.pool(Pool::GlobalAvg, f2)?;
        let max = self.g.pool(Pool::GlobalMax, f2)?;
        let h = self.g.concat(&[avg, max])?;
        let gamma = self.p.get("head.bn.gamma")?;
        let beta = self.p.get("head.bn.beta")?;
        let (h_norm, stats) = match self.mode {
            Mode::Train => {
                let (v, s) = self.g.batch_norm_train(h, gamma, beta, NORM_EPS)?;
                (v, Some(s))
            }
            Mode::Eval => {
                let mean = self.buffers.get("head.bn.running_mean").ok_or_else(|| NnError::Contract("missing running mean".into()))?;
                let var = self.buffers.get("head.bn.running_var").ok_or_else(|| NnError::Contract("missing running variance".into()))?;
                (self.g.batch_norm_eval(h, gamma, beta, mean.data(), var.data(), NORM_EPS)?, None)
            }
        };
        let z1 = self.linear(h_norm, "head.w1", true)?;
        let h1 = self.gelu(z1)?;
        let za = self.linear(h1, "head.w_a", true)?;
        let a = self.g.activation(Activation::Sigmoid, za)?;
        let h_att = self.g.mul(h1, a)?;
        let h_res = self.linear(h_norm, "head.w_r", true)?;
        let sum = self.g.add(h_att, h_res)?;
        let h_out = self.norm(sum, "head.norm", self.h.norm_groups)?;
        Ok((self.linear(h_out, "head.w_o", true)?, stats))
    }
}

impl MstftModel {
    /// Record a forward pass over `x: [batch, T, 1]` using bound parameters.
    pub fn build(
        &self,
        g: &mut Graph,
        params: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<GraphTrace, NnError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.hyper.t || shape[2] != 1 {
            return Err(NnError::Shape(format!("input must be [batch, {}, 1], got {shape:?}", self.hyper.t)));
        }
        let mut b = Builder {
            g,
            p: params,
            h: &self.hyper,
            buffers: &self.buffers,
            mode,
            rng,
        };
        let embedded = b.embed(x)?;
        let mut skips_taken = Vec::new();
        let (z_t, temporal_blocks) = b.temporal(embedded, &mut skips_taken)?;
        let l_int = b.g.shape(z_t)[1];
        let z_f = b.frequency(embedded, l_int)?;

        let h_t = b.linear(z_t, "fusion.w_t", false)?;
        let h_f = b.linear(z_f, "fusion.w_f", false)?;
        let (f_multi, fusion_attention) = b.mha(h_t, h_f, "fusion.attn")?;
        let cat = b.g.concat(&[f_multi, h_t, h_f])?;
        let fusion_out = b.norm(cat, "fusion.norm", 1)?;

        let (a, self_attention) = b.mha(fusion_out, fusion_out, "self_attn.attn")?;
        let gz = b.linear(a, "self_attn.gate", true)?;
        let gate = b.g.activation(Activation::Sigmoid, gz)?;
        let a_g = b.g.mul(a, gate)?;
        let alpha = b.p.get("self_attn.alpha")?;
        let scaled = b.g.mul_channel(a_g, alpha)?;
        let f1 = b.g.add(fusion_out, scaled)?;
        let inner = b.linear(f1, "self_attn.ffn1", true)?;
        let inner = b.gelu(inner)?;
        let mut ffn = b.linear(inner, "self_attn.ffn2", true)?;
        if mode == Mode::Train && b.h.dropout > 0.0 {
            let keep = 1.0 - b.h.dropout;
            let shape = b.g.shape(ffn).to_vec();
            let rng = &mut *b.rng;
            let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let mask = b.g.constant(mask);
            ffn = b.g.mul(ffn, mask)?;
        }
        let res = b.g.add(f1, ffn)?;
        let self_out = b.norm(res, "self_attn.norm", 1)?;

        let (logit, batch_stats) = b.head(self_out)?;
        let prob = b.g.activation(Activation::Sigmoid, logit)?;
        Ok(GraphTrace {
            input: x,
            embedded,
            temporal_blocks,
            temporal_out: z_t,
            freq_out: z_f,
            fusion_attention,
            self_attention,
            fusion_out,
            attn_residual: f1,
            self_out,
            logit,
            prob,
            batch_stats,
            skips_taken,
        })
    }

    /// Stack windows into a `[batch, T, 1]` tensor.
    pub fn input_tensor(&self, windows: &[&[f64]]) -> Result<Tensor, NnError> {
        let t = self.hyper.t;
        let mut data = Vec::with_capacity(windows.len() * t);
        for w in windows {
            if w.len() != t {
                return Err(NnError::Shape(format!("window length {} != {t}", w.len())));
            }
            data.extend_from_slice(w);
        }
        Tensor::new(&[windows.len(), t, 1], data)
    }

    /// Full forward pass with recorded attention weights and marked activations.
    pub fn forward(&self, windows: &[&[f64]], mode: Mode, rng: &mut impl Rng) -> Result<ForwardTrace, NnError> {
        let mut g = Graph::new();
        let x = g.constant(self.input_tensor(windows)?);
        let bound = Bound::bind(&self.params, &mut g, false)?;
        let tr = self.build(&mut g, &bound, x, mode, rng)?;
        let mut attention = Vec::new();
        for (layer, node) in [("fusion", tr.fusion_attention), ("self_attention", tr.self_attention)] {
            let (shape, w) = g
                .attention_weights(node)
                .ok_or_else(|| NnError::Contract("attention node without weights".into()))?;
            attention.push(AttentionRecord {
                layer,
                shape,
                weights: w.to_vec(),
            });
        }
        Ok(ForwardTrace {
            probs: g.value(tr.prob).data().to_vec(),
            logits: g.value(tr.logit).data().to_vec(),
            attention,
            l_int: g.shape(tr.temporal_out)[1],
            fusion_channels: g.shape(tr.fusion_out)[2],
            temporal_blocks: tr.temporal_blocks.iter().map(|&v| g.value(v).clone()).collect(),
            fusion_out: g.value(tr.fusion_out).clone(),
        })
    }

    /// Eval-mode probabilities, computed in batches.
    pub fn predict(&self, windows: &[&[f64]]) -> Result<Vec<f64>, NnError> {
        const BATCH: usize = 32;
        let mut out = Vec::with_capacity(windows.len());
        // Eval mode draws nothing from the generator.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for chunk in windows.chunks(BATCH) {
            let mut g = Graph::new();
            let x = g.constant(self.input_tensor(chunk)?);
            let bound = Bound::bind(&self.params, &mut g, false)?;
            let tr = self.build(&mut g, &bound, x, Mode::Eval, &mut rng)?;
            out.extend_from_slice(g.value(tr.prob).data());
        }
        Ok(out)
    }
}
