//! Compact autoregressive reference policy.
//!
//! At target position `t` the model sees the embeddings of the previous
//! `context_window` target tokens plus a learned position vector, forms a
//! query from that state and attends over the whole prompt (multi-head).
//! Each head adds a fixed linear penalty on a prompt token's distance from
//! the end of the prompt, with slopes `2^-2, 2^-4, ..` and a last head that
//! has none, so the input text at the tail is visible from the first step.
//! The attended prompt summary and the state feed a second hidden layer that
//! produces next-token logits:
//!
//! ```text
//! h1     = tanh([e(s_{t-1}) .. e(s_{t-K})] W_in + b_in + P[t])
//! s_hj   = q_h . k_hj / sqrt(d_h) - m_h (|x| - 1 - j)
//! ctx    = MultiHeadAttn(q = h1 W_q, K = e(x) W_k, V = e(x) W_v, scores s)
//! h2     = tanh([h1, ctx] W_2 + b_2)
//! logits = h2 W_out + b_out
//! ```
//!
//! Parameters are stored as `f64` holding `f32`-representable values so the
//! 32-bit checkpoint blob round-trips exactly; all arithmetic runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, BOS, EOS};
use super::{Gradient, PolicyError, SampledCompletion, WeightedTarget};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_target_len: usize,
    pub max_seq_len: usize,
}

impl PolicyConfig {
    /// Default size for synthetic desk-scale corpora.
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            context_window: 4,
            hidden_dim: 96,
            heads: 4,
            max_target_len: 128,
            max_seq_len: 512,
        }
    }

    /// A few thousand parameters; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            context_window: 2,
            hidden_dim: 12,
            heads: 2,
            max_target_len: 24,
            max_seq_len: 96,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let ok = self.embed_dim > 0
            && self.context_window > 0
            && self.hidden_dim > 0
            && self.heads > 0
            && self.embed_dim.is_multiple_of(self.heads)
            && self.max_target_len > 0
            && self.max_seq_len > self.max_target_len;
        if ok {
            Ok(())
        } else {
            Err(PolicyError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Named parameter tensors in blob order.
pub fn tensor_shapes(cfg: &PolicyConfig, vocab_size: usize) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h, k) = (cfg.embed_dim, cfg.hidden_dim, cfg.context_window);
    vec![
        ("embedding", vec![vocab_size, d]),
        ("position", vec![cfg.max_target_len, h]),
        ("w_in", vec![k * d, h]),
        ("b_in", vec![h]),
        ("w_query", vec![h, d]),
        ("w_key", vec![d, d]),
        ("w_value", vec![d, d]),
        ("w_mix", vec![h + d, h]),
        ("b_mix", vec![h]),
        ("w_out", vec![h, vocab_size]),
        ("b_out", vec![vocab_size]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    emb: usize,
    pos: usize,
    w_in: usize,
    b_in: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_2: usize,
    b_2: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig, vocab_size: usize) -> Self {
        let mut offsets = Vec::new();
        let mut acc = 0;
        for (_, shape) in tensor_shapes(cfg, vocab_size) {
            offsets.push(acc);
            acc += shape.iter().product::<usize>();
        }
        Self {
            emb: offsets[0],
            pos: offsets[1],
            w_in: offsets[2],
            b_in: offsets[3],
            w_q: offsets[4],
            w_k: offsets[5],
            w_v: offsets[6],
            w_2: offsets[7],
            b_2: offsets[8],
            w_out: offsets[9],
            b_out: offsets[10],
            total: acc,
        }
    }
}

/// Round to the nearest `f32`.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

// y = b + x W, W row-major [x.len() x y.len()]
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, y: &mut [f64]) {
    match b {
        Some(b) => y.copy_from_slice(b),
        None => y.iter_mut().for_each(|v| *v = 0.0),
    }
    let n = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (yo, &wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
}

// Accumulate dW += x^T dy and, if requested, dx += W dy.
fn affine_backward(x: &[f64], w: &[f64], dy: &[f64], dw: &mut [f64], dx: Option<&mut [f64]>) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * n..(i + 1) * n];
            *dxi += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Distance penalty of attention head `head`; the last head has none.
fn recency_slope(head: usize, heads: usize) -> f64 {
    if head + 1 == heads {
        0.0
    } else {
        0.25f64.powi(head as i32 + 1)
    }
}

/// Prompt keys and values, shared by every target scored against the prompt.
pub(crate) struct PromptEncoding {
    ids: Vec<TokenId>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Default)]
struct PositionCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    z: Vec<f64>,
    h2: Vec<f64>,
    logp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    config: PolicyConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<f64>,
}

impl ReferencePolicy {
    /// Random initialization: uniform in `±1/sqrt(fan_in)` for weight
    /// matrices, `±1` for token embeddings, `±0.1` for positions, zero biases.
    pub fn new(config: PolicyConfig, vocab: Vocabulary, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut offset = 0;
        for (name, shape) in tensor_shapes(&config, vocab.len()) {
            let n: usize = shape.iter().product();
            let scale = match name {
                "embedding" => 1.0,
                "position" => 0.1,
                _ if shape.len() == 2 => 1.0 / (shape[0] as f64).sqrt(),
                _ => 0.0,
            };
            for p in &mut params[offset..offset + n] {
                *p = quantize(rng.gen_range(-scale..=scale));
            }
            offset += n;
        }
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Random body with a zeroed output layer: every next-token distribution
    /// is uniform over the vocabulary.
    pub fn new_uniform(
        config: PolicyConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::new(config, vocab, seed)?;
        let start = p.layout.w_out;
        p.params[start..].iter_mut().for_each(|x| *x = 0.0);
        Ok(p)
    }

    pub(crate) fn from_parts(
        config: PolicyConfig,
        vocab: Vocabulary,
        params: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total {
            return Err(PolicyError::ShapeMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replace the parameter vector verbatim (no quantization).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), PolicyError> {
        if params.len() != self.layout.total {
            return Err(PolicyError::ShapeMismatch {
                expected: self.layout.total,
                found: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), PolicyError> {
        match ids.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(&t) => Err(PolicyError::TokenOutOfVocabulary(t)),
            None => Ok(()),
        }
    }

    fn check_lengths(&self, prompt_len: usize, target_len: usize) -> Result<(), PolicyError> {
        if target_len > self.config.max_target_len
            || prompt_len + target_len > self.config.max_seq_len
        {
            return Err(PolicyError::SequenceTooLong {
                prompt: prompt_len,
                target: target_len,
                max_target: self.config.max_target_len,
                max_total: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    pub(crate) fn encode_prompt(&self, prompt: &[TokenId]) -> Result<PromptEncoding, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        self.check_tokens(prompt)?;
        let d = self.config.embed_dim;
        let l = &self.layout;
        let w_k = &self.params[l.w_k..l.w_k + d * d];
        let w_v = &self.params[l.w_v..l.w_v + d * d];
        let mut keys = vec![0.0; prompt.len() * d];
        let mut values = vec![0.0; prompt.len() * d];
        for (j, &tok) in prompt.iter().enumerate() {
            let e = self.embedding(tok);
            affine(e, w_k, None, &mut keys[j * d..(j + 1) * d]);
            affine(e, w_v, None, &mut values[j * d..(j + 1) * d]);
        }
        Ok(PromptEncoding {
            ids: prompt.to_vec(),
            keys,
            values,
        })
    }

    fn embedding(&self, tok: TokenId) -> &[f64] {
        let d = self.config.embed_dim;
        let start = self.layout.emb + tok as usize * d;
        &self.params[start..start + d]
    }

    fn context_ids<'a>(
        &self,
        prefix: &'a [TokenId],
        t: usize,
    ) -> impl Iterator<Item = TokenId> + 'a {
        let prefix = &prefix[..t];
        (0..self.config.context_window).map(move |m| {
            if m < t {
                prefix[t - 1 - m]
            } else {
                BOS
            }
        })
    }

    /// Forward one position; `prefix[..t]` are the preceding target tokens.
    fn position_forward(
        &self,
        enc: &PromptEncoding,
        prefix: &[TokenId],
        t: usize,
        cache: &mut PositionCache,
    ) {
        let cfg = &self.config;
        let (d, h, k, nh) = (cfg.embed_dim, cfg.hidden_dim, cfg.context_window, cfg.heads);
        let dh = d / nh;
        let p_len = enc.ids.len();
        let l = &self.layout;
        let v = self.vocab.len();
        let prm = &self.params;

        cache.x.clear();
        for tok in self.context_ids(prefix, t) {
            cache.x.extend_from_slice(self.embedding(tok));
        }

        cache.h1.resize(h, 0.0);
        let mut bias: Vec<f64> = prm[l.b_in..l.b_in + h].to_vec();
        for (b, p) in bias.iter_mut().zip(&prm[l.pos + t * h..l.pos + (t + 1) * h]) {
            *b += p;
        }
        affine(&cache.x, &prm[l.w_in..l.w_in + k * d * h], Some(&bias), &mut cache.h1);
        cache.h1.iter_mut().for_each(|x| *x = x.tanh());

        cache.q.resize(d, 0.0);
        affine(&cache.h1, &prm[l.w_q..l.w_q + h * d], None, &mut cache.q);

        let scale = 1.0 / (dh as f64).sqrt();
        cache.alpha.resize(nh * p_len, 0.0);
        cache.z.resize(h + d, 0.0);
        cache.z[..h].copy_from_slice(&cache.h1);
        for head in 0..nh {
            let slope = recency_slope(head, nh);
            let qh = &cache.q[head * dh..(head + 1) * dh];
            let alpha = &mut cache.alpha[head * p_len..(head + 1) * p_len];
            for (j, a) in alpha.iter_mut().enumerate() {
                let kj = &enc.keys[j * d + head * dh..j * d + (head + 1) * dh];
                *a = qh.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                    - slope * (p_len - 1 - j) as f64;
            }
            let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in alpha.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            alpha.iter_mut().for_each(|a| *a /= sum);
            let ctx = &mut cache.z[h + head * dh..h + (head + 1) * dh];
            ctx.iter_mut().for_each(|c| *c = 0.0);
            for (j, &a) in alpha.iter().enumerate() {
                let vj = &enc.values[j * d + head * dh..j * d + (head + 1) * dh];
                for (c, &x) in ctx.iter_mut().zip(vj) {
                    *c += a * x;
                }
            }
        }

        cache.h2.resize(h, 0.0);
        affine(
            &cache.z,
            &prm[l.w_2..l.w_2 + (h + d) * h],
            Some(&prm[l.b_2..l.b_2 + h]),
            &mut cache.h2,
        );
        cache.h2.iter_mut().for_each(|x| *x = x.tanh());

        cache.logp.resize(v, 0.0);
        affine(
            &cache.h2,
            &prm[l.w_out..l.w_out + h * v],
            Some(&prm[l.b_out..l.b_out + v]),
            &mut cache.logp,
        );
        log_softmax_in_place(&mut cache.logp);
    }

    /// Backward through one position for a loss whose gradient w.r.t. the
    /// logits is `dlogits`. Prompt key/value gradients go to `dkeys`/`dvalues`.
    #[allow(clippy::too_many_arguments)]
    fn position_backward(
        &self,
        enc: &PromptEncoding,
        prefix: &[TokenId],
        t: usize,
        cache: &PositionCache,
        dlogits: &[f64],
        grad: &mut [f64],
        dkeys: &mut [f64],
        dvalues: &mut [f64],
    ) {
        let cfg = &self.config;
        let (d, h, k, nh) = (cfg.embed_dim, cfg.hidden_dim, cfg.context_window, cfg.heads);
        let dh = d / nh;
        let p_len = enc.ids.len();
        let l = &self.layout;
        let v = self.vocab.len();
        let prm = &self.params;

        // output layer
        for (g, &dl) in grad[l.b_out..l.b_out + v].iter_mut().zip(dlogits) {
            *g += dl;
        }
        let mut dh2 = vec![0.0; h];
        affine_backward(
            &cache.h2,
            &prm[l.w_out..l.w_out + h * v],
            dlogits,
            &mut grad[l.w_out..l.w_out + h * v],
            Some(&mut dh2),
        );
        let da2: Vec<f64> = dh2
            .iter()
            .zip(&cache.h2)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        for (g, &x) in grad[l.b_2..l.b_2 + h].iter_mut().zip(&da2) {
            *g += x;
        }
        let mut dz = vec![0.0; h + d];
        affine_backward(
            &cache.z,
            &prm[l.w_2..l.w_2 + (h + d) * h],
            &da2,
            &mut grad[l.w_2..l.w_2 + (h + d) * h],
            Some(&mut dz),
        );
        let (dh1_part, dctx) = dz.split_at(h);
        let mut dh1 = dh1_part.to_vec();

        // attention
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; d];
        for head in 0..nh {
            let alpha = &cache.alpha[head * p_len..(head + 1) * p_len];
            let dctx_h = &dctx[head * dh..(head + 1) * dh];
            let mut dalpha = vec![0.0; p_len];
            for j in 0..p_len {
                let off = j * d + head * dh;
                let vj = &enc.values[off..off + dh];
                dalpha[j] = vj.iter().zip(dctx_h).map(|(a, b)| a * b).sum();
                for (g, &dc) in dvalues[off..off + dh].iter_mut().zip(dctx_h) {
                    *g += alpha[j] * dc;
                }
            }
            let inner: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            let qh = &cache.q[head * dh..(head + 1) * dh];
            for j in 0..p_len {
                let ds = alpha[j] * (dalpha[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let off = j * d + head * dh;
                let kj = &enc.keys[off..off + dh];
                for (g, &x) in dq[head * dh..(head + 1) * dh].iter_mut().zip(kj) {
                    *g += ds * x;
                }
                for (g, &x) in dkeys[off..off + dh].iter_mut().zip(qh) {
                    *g += ds * x;
                }
            }
        }
        affine_backward(
            &cache.h1,
            &prm[l.w_q..l.w_q + h * d],
            &dq,
            &mut grad[l.w_q..l.w_q + h * d],
            Some(&mut dh1),
        );

        // first hidden layer
        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.h1)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        for (g, &x) in grad[l.b_in..l.b_in + h].iter_mut().zip(&da1) {
            *g += x;
        }
        for (g, &x) in grad[l.pos + t * h..l.pos + (t + 1) * h]
            .iter_mut()
            .zip(&da1)
        {
            *g += x;
        }
        let mut dx = vec![0.0; k * d];
        affine_backward(
            &cache.x,
            &prm[l.w_in..l.w_in + k * d * h],
            &da1,
            &mut grad[l.w_in..l.w_in + k * d * h],
            Some(&mut dx),
        );
        for (m, tok) in self.context_ids(prefix, t).enumerate() {
            let start = l.emb + tok as usize * d;
            for (g, &x) in grad[start..start + d]
                .iter_mut()
                .zip(&dx[m * d..(m + 1) * d])
            {
                *g += x;
            }
        }
    }

    /// Push prompt key/value gradients back into the embeddings and
    /// projection matrices.
    fn prompt_backward(&self, enc: &PromptEncoding, dkeys: &[f64], dvalues: &[f64], grad: &mut [f64]) {
        let d = self.config.embed_dim;
        let l = &self.layout;
        for (j, &tok) in enc.ids.iter().enumerate() {
            let dk = &dkeys[j * d..(j + 1) * d];
            let dv = &dvalues[j * d..(j + 1) * d];
            if dk.iter().all(|&x| x == 0.0) && dv.iter().all(|&x| x == 0.0) {
                continue;
            }
            let e = self.embedding(tok);
            let mut de = vec![0.0; d];
            affine_backward(e, &self.params[l.w_k..l.w_k + d * d], dk, &mut grad[l.w_k..l.w_k + d * d], Some(&mut de));
            affine_backward(e, &self.params[l.w_v..l.w_v + d * d], dv, &mut grad[l.w_v..l.w_v + d * d], Some(&mut de));
            let start = l.emb + tok as usize * d;
            for (g, &x) in grad[start..start + d].iter_mut().zip(&de) {
                *g += x;
            }
        }
    }

    /// Teacher-forced log-probability of each target token.
    pub fn token_logprobs(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_lengths(prompt.len(), target.len())?;
        self.check_tokens(target)?;
        let enc = self.encode_prompt(prompt)?;
        Ok(self.scored_logprobs(&enc, target))
    }

    pub(crate) fn scored_logprobs(&self, enc: &PromptEncoding, target: &[TokenId]) -> Vec<f64> {
        let mut cache = PositionCache::default();
        (0..target.len())
            .map(|t| {
                self.position_forward(enc, target, t, &mut cache);
                cache.logp[target[t] as usize]
            })
            .collect()
    }

    /// Full next-token log-distribution after `prefix`.
    pub fn next_token_logprobs(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_lengths(prompt.len(), prefix.len() + 1)?;
        self.check_tokens(prefix)?;
        let enc = self.encode_prompt(prompt)?;
        let mut cache = PositionCache::default();
        self.position_forward(&enc, prefix, prefix.len(), &mut cache);
        Ok(cache.logp)
    }

    /// Objective `-sum_t w_t log p(s_t)` summed over `targets`, which all share
    /// `prompt`. The gradient is added into `grad`; the objective is returned.
    pub fn objective_gradient(
        &self,
        prompt: &[TokenId],
        targets: &[WeightedTarget<'_>],
        grad: &mut Gradient,
    ) -> Result<f64, PolicyError> {
        if grad.0.len() != self.layout.total {
            return Err(PolicyError::ShapeMismatch {
                expected: self.layout.total,
                found: grad.0.len(),
            });
        }
        for tg in targets {
            if tg.tokens.len() != tg.weights.len() {
                return Err(PolicyError::ShapeMismatch {
                    expected: tg.tokens.len(),
                    found: tg.weights.len(),
                });
            }
            self.check_lengths(prompt.len(), tg.tokens.len())?;
            self.check_tokens(tg.tokens)?;
        }
        let enc = self.encode_prompt(prompt)?;
        let d = self.config.embed_dim;
        let mut dkeys = vec![0.0; enc.ids.len() * d];
        let mut dvalues = vec![0.0; enc.ids.len() * d];
        let mut cache = PositionCache::default();
        let mut dlogits = vec![0.0; self.vocab.len()];
        let mut objective = 0.0;
        for tg in targets {
            for t in 0..tg.tokens.len() {
                let w = tg.weights[t];
                if w == 0.0 {
                    continue;
                }
                self.position_forward(&enc, tg.tokens, t, &mut cache);
                let tok = tg.tokens[t] as usize;
                objective -= w * cache.logp[tok];
                for (dl, &lp) in dlogits.iter_mut().zip(&cache.logp) {
                    *dl = w * lp.exp();
                }
                dlogits[tok] -= w;
                self.position_backward(
                    &enc,
                    tg.tokens,
                    t,
                    &cache,
                    &dlogits,
                    &mut grad.0,
                    &mut dkeys,
                    &mut dvalues,
                );
            }
        }
        self.prompt_backward(&enc, &dkeys, &dvalues, &mut grad.0);
        Ok(objective)
    }

    /// Ancestral sampling of `group` completions. Sampling uses
    /// `softmax(log p / temperature)`; the recorded log-probabilities are the
    /// untempered policy values.
    pub fn sample_group(
        &self,
        prompt: &[TokenId],
        group: usize,
        temperature: f64,
        seed: u64,
        max_new_tokens: usize,
    ) -> Result<Vec<SampledCompletion>, PolicyError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        if group < 2 {
            return Err(PolicyError::GroupTooSmall(group));
        }
        let enc = self.encode_prompt(prompt)?;
        let cap = self.generation_cap(prompt.len(), max_new_tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = PositionCache::default();
        let mut probs = vec![0.0; self.vocab.len()];
        let mut out = Vec::with_capacity(group);
        for _ in 0..group {
            let mut tokens = Vec::new();
            let mut logprobs = Vec::new();
            let mut terminated = false;
            while tokens.len() < cap {
                self.position_forward(&enc, &tokens, tokens.len(), &mut cache);
                let tok = sample_index(&cache.logp, temperature, &mut rng, &mut probs);
                tokens.push(tok as TokenId);
                logprobs.push(cache.logp[tok]);
                if tok as TokenId == EOS {
                    terminated = true;
                    break;
                }
            }
            out.push(SampledCompletion {
                text: self.vocab.decode(&tokens),
                tokens,
                logprobs,
                terminated,
            });
        }
        Ok(out)
    }

    /// Argmax decoding.
    pub fn greedy_decode(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<SampledCompletion, PolicyError> {
        let enc = self.encode_prompt(prompt)?;
        let cap = self.generation_cap(prompt.len(), max_new_tokens);
        let mut cache = PositionCache::default();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut terminated = false;
        while tokens.len() < cap {
            self.position_forward(&enc, &tokens, tokens.len(), &mut cache);
            let tok = argmax(&cache.logp);
            tokens.push(tok as TokenId);
            logprobs.push(cache.logp[tok]);
            if tok as TokenId == EOS {
                terminated = true;
                break;
            }
        }
        Ok(SampledCompletion {
            text: self.vocab.decode(&tokens),
            tokens,
            logprobs,
            terminated,
        })
    }

    fn generation_cap(&self, prompt_len: usize, max_new_tokens: usize) -> usize {
        max_new_tokens
            .min(self.config.max_target_len)
            .min(self.config.max_seq_len.saturating_sub(prompt_len))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw an index from `softmax(logp / temperature)`.
fn sample_index(logp: &[f64], temperature: f64, rng: &mut ChaCha8Rng, probs: &mut [f64]) -> usize {
    let best = argmax(logp);
    let top = logp[best];
    let mut total = 0.0;
    for (p, &lp) in probs.iter_mut().zip(logp) {
        *p = ((lp - top) / temperature).exp();
        total += *p;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    best
}
