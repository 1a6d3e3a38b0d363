//! Tiny trainable autoregressive language model.
//!
//! The policy is a gated MLP over a fixed context window: the last `context`
//! token embeddings are concatenated and passed through a sigmoid-gated tanh
//! layer, then projected to vocabulary logits. Small enough that forward and
//! backward passes are exact and cheap, while still expressive enough for
//! preference losses to be non-degenerate.
//!
//! All probability work happens in log space. Prompt tokens are conditioned
//! on but never scored; a response's log-probability is the sum of its own
//! per-token log-probabilities.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{cast, to_f64, Scalar};

pub type TokenId = u32;

/// Dense token id space `[0, size)` with three distinguished special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub size: u32,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: 32, pad: 0, bos: 1, eos: 2 }
    }
}

impl Vocabulary {
    /// Vocabulary of `size` ids with the conventional special layout
    /// (pad=0, bos=1, eos=2).
    pub fn new(size: u32) -> Result<Self> {
        let v = Self { size, ..Self::default() };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad, self.bos, self.eos];
        if specials.iter().any(|&t| t >= self.size) {
            return Err(Error::Validation("vocabulary: special id out of range".into()));
        }
        if self.pad == self.bos || self.pad == self.eos || self.bos == self.eos {
            return Err(Error::Validation("vocabulary: special ids must be distinct".into()));
        }
        if self.content_size() == 0 {
            return Err(Error::Validation("vocabulary: no content tokens".into()));
        }
        Ok(())
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t < self.size
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t == self.pad || t == self.bos || t == self.eos
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size).filter(|&t| !self.is_special(t))
    }

    pub fn content_size(&self) -> usize {
        (0..self.size).filter(|&t| !self.is_special(t)).count()
    }

    /// Reversible plain-text rendering of a sequence (`t5 t7 ...`, specials
    /// spelled out).
    pub fn render(&self, seq: &Sequence) -> String {
        seq.tokens()
            .iter()
            .map(|&t| {
                if t == self.pad {
                    "<pad>".to_string()
                } else if t == self.bos {
                    "<bos>".to_string()
                } else if t == self.eos {
                    "<eos>".to_string()
                } else {
                    format!("t{t}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A token sequence. Responses are stored as content tokens only; the model
/// layer supplies BOS conditioning and strips EOS during sampling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(Vec<TokenId>);

impl Sequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Response length |y|: the number of non-special tokens.
    pub fn content_len(&self, vocab: &Vocabulary) -> usize {
        self.0.iter().filter(|&&t| !vocab.is_special(t)).count()
    }

    pub fn validate_in(&self, vocab: &Vocabulary) -> Result<()> {
        for &t in &self.0 {
            if !vocab.contains(t) {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of range for vocabulary of size {}",
                    vocab.size
                )));
            }
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }
}

/// Model shape. `context` is the fixed window length; positions before the
/// stream start are padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub vocab: Vocabulary,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { vocab: Vocabulary::default(), context: 8, embed_dim: 16, hidden_dim: 32 }
    }
}

impl ArchConfig {
    /// A ~200-parameter shape for gradient identity checks.
    pub fn micro() -> Self {
        Self {
            vocab: Vocabulary::new(8).expect("static vocab"),
            context: 2,
            embed_dim: 4,
            hidden_dim: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Validation("arch: dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let v = self.vocab.size as usize;
        let e = self.embed_dim;
        let h = self.hidden_dim;
        let ke = self.context * e;
        v * e + 2 * (h * ke + h) + v * h + v
    }

    fn layout(&self) -> Layout {
        let v = self.vocab.size as usize;
        let e = self.embed_dim;
        let h = self.hidden_dim;
        let ke = self.context * e;
        let embed = 0..v * e;
        let w_gate = embed.end..embed.end + h * ke;
        let b_gate = w_gate.end..w_gate.end + h;
        let w_cell = b_gate.end..b_gate.end + h * ke;
        let b_cell = w_cell.end..w_cell.end + h;
        let w_out = b_cell.end..b_cell.end + v * h;
        let b_out = w_out.end..w_out.end + v;
        Layout { embed, w_gate, b_gate, w_cell, b_cell, w_out, b_out }
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("arch serializes")
    }
}

struct Layout {
    embed: std::ops::Range<usize>,
    w_gate: std::ops::Range<usize>,
    b_gate: std::ops::Range<usize>,
    w_cell: std::ops::Range<usize>,
    b_cell: std::ops::Range<usize>,
    w_out: std::ops::Range<usize>,
    b_out: std::ops::Range<usize>,
}

/// SHA-256 digest over architecture and parameter bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentHash([u8; 32]);

impl ContentHash {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 64 {
            return Err(Error::InvalidInput("content hash must be 64 hex chars".into()));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16);
            let lo = (chunk[1] as char).to_digit(16);
            match (hi, lo) {
                (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
                _ => return Err(Error::InvalidInput("content hash is not hex".into())),
            }
        }
        Ok(Self(out))
    }
}

impl From<[u8; 32]> for ContentHash {
    fn from(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }
}

impl std::fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl std::fmt::Display for ContentHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        ContentHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

fn hash_params<T: Scalar>(arch: &ArchConfig, params: &[T]) -> ContentHash {
    let mut hasher = Sha256::new();
    hasher.update(b"PREFLAB-MODEL-V1");
    hasher.update(arch.canonical_bytes());
    let mut bytes = Vec::with_capacity(params.len() * T::WIDTH);
    for &p in params {
        p.write_le(&mut bytes);
    }
    hasher.update(&bytes);
    ContentHash(hasher.finalize().into())
}

/// Read-only view of (architecture, parameters); implemented by both the
/// mutable policy and immutable snapshots so scoring works on either.
pub trait ParamView<T: Scalar> {
    fn arch(&self) -> &ArchConfig;
    fn params(&self) -> &[T];
}

/// Mutable policy model: a flat parameter vector plus its shape.
#[derive(Debug, Clone)]
pub struct PolicyModel<T: Scalar> {
    arch: ArchConfig,
    params: Vec<T>,
}

/// Immutable, content-addressed copy of model parameters. Cheap to clone and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct ModelSnapshot<T: Scalar> {
    arch: ArchConfig,
    params: Arc<[T]>,
    hash: ContentHash,
}

impl<T: Scalar> ParamView<T> for PolicyModel<T> {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn params(&self) -> &[T] {
        &self.params
    }
}

impl<T: Scalar> ParamView<T> for ModelSnapshot<T> {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn params(&self) -> &[T] {
        &self.params
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl<T: Scalar> PolicyModel<T> {
    /// Deterministic seeded initialization: weights N(0, 0.05), biases zero.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![T::zero(); arch.param_count()];
        let layout = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for range in [layout.embed, layout.w_gate, layout.w_cell, layout.w_out] {
            for p in &mut params[range] {
                *p = cast(0.05 * gauss(&mut rng));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn restore(snapshot: &ModelSnapshot<T>) -> Self {
        Self { arch: snapshot.arch.clone(), params: snapshot.params.to_vec() }
    }

    pub fn snapshot(&self) -> ModelSnapshot<T> {
        let hash = hash_params(&self.arch, &self.params);
        ModelSnapshot { arch: self.arch.clone(), params: self.params.clone().into(), hash }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn content_hash(&self) -> ContentHash {
        hash_params(&self.arch, &self.params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Test/setup hook: overwrite the parameter vector.
    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.arch.param_count() {
            return Err(Error::InvalidInput("parameter vector length mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Index range of the output-bias block, for hand-set logits in tests.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        self.arch.layout().b_out
    }
}

impl<T: Scalar> ModelSnapshot<T> {
    pub fn content_hash(&self) -> ContentHash {
        self.hash
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

// ---------------------------------------------------------------------------
// Forward pass and log-probabilities
// ---------------------------------------------------------------------------

struct Activations<T> {
    inputs: Vec<T>,
    gate: Vec<T>,
    cell: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

fn window(arch: &ArchConfig, stream: &[TokenId], t: usize, ctx: &mut Vec<TokenId>) {
    let k = arch.context;
    ctx.clear();
    for j in 0..k {
        let idx = t as i64 - k as i64 + j as i64;
        if idx < 0 {
            ctx.push(arch.vocab.pad);
        } else {
            ctx.push(stream[idx as usize]);
        }
    }
}

fn forward<T: Scalar>(arch: &ArchConfig, params: &[T], ctx: &[TokenId]) -> Activations<T> {
    let layout = arch.layout();
    let e = arch.embed_dim;
    let h = arch.hidden_dim;
    let v = arch.vocab.size as usize;
    let ke = arch.context * e;

    let mut inputs = Vec::with_capacity(ke);
    for &tok in ctx {
        let base = layout.embed.start + tok as usize * e;
        inputs.extend_from_slice(&params[base..base + e]);
    }

    let mut gate = Vec::with_capacity(h);
    let mut cell = Vec::with_capacity(h);
    let mut hidden = Vec::with_capacity(h);
    for j in 0..h {
        let wg = &params[layout.w_gate.start + j * ke..layout.w_gate.start + (j + 1) * ke];
        let wc = &params[layout.w_cell.start + j * ke..layout.w_cell.start + (j + 1) * ke];
        let mut g_pre = params[layout.b_gate.start + j];
        let mut c_pre = params[layout.b_cell.start + j];
        for i in 0..ke {
            g_pre = g_pre + wg[i] * inputs[i];
            c_pre = c_pre + wc[i] * inputs[i];
        }
        let g = crate::scalar::sigmoid(g_pre);
        let c = c_pre.tanh();
        gate.push(g);
        cell.push(c);
        hidden.push(g * c);
    }

    let mut logits = Vec::with_capacity(v);
    for o in 0..v {
        let wo = &params[layout.w_out.start + o * h..layout.w_out.start + (o + 1) * h];
        let mut l = params[layout.b_out.start + o];
        for j in 0..h {
            l = l + wo[j] * hidden[j];
        }
        logits.push(l);
    }

    Activations { inputs, gate, cell, hidden, logits }
}

/// Stable log-softmax over a logit vector.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &l in logits {
        sum = sum + (l - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn validated_stream<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    response: &Sequence,
) -> Result<Vec<TokenId>> {
    if response.is_empty() {
        return Err(Error::InvalidInput("response must be nonempty".into()));
    }
    let vocab = &model.arch().vocab;
    prompt.validate_in(vocab)?;
    response.validate_in(vocab)?;
    let mut stream = Vec::with_capacity(1 + prompt.len() + response.len());
    stream.push(vocab.bos);
    stream.extend_from_slice(prompt.tokens());
    stream.extend_from_slice(response.tokens());
    Ok(stream)
}

/// Natural-log probability the model assigns to each response token given the
/// prompt and preceding response tokens. List length equals the response
/// token count.
pub fn per_token_log_probs<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    response: &Sequence,
) -> Result<Vec<T>> {
    let stream = validated_stream(model, prompt, response)?;
    let start = 1 + prompt.len();
    let arch = model.arch();
    let params = model.params();
    let mut ctx = Vec::with_capacity(arch.context);
    let mut out = Vec::with_capacity(response.len());
    for t in start..stream.len() {
        window(arch, &stream, t, &mut ctx);
        let acts = forward(arch, params, &ctx);
        let log_probs = log_softmax(&acts.logits);
        out.push(log_probs[stream[t] as usize]);
    }
    Ok(out)
}

/// Sum of per-token log-probabilities: ln pi(y | x). Always <= 0 up to
/// rounding, and deterministic for a fixed parameter vector.
pub fn sequence_log_prob<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    response: &Sequence,
) -> Result<T> {
    let per_token = per_token_log_probs(model, prompt, response)?;
    let mut total = T::zero();
    for lp in per_token {
        total = total + lp;
    }
    Ok(total)
}

/// Next-token log-distribution after a raw context stream (caller includes
/// BOS/prompt tokens as appropriate).
pub fn next_token_log_probs<T: Scalar, M: ParamView<T>>(
    model: &M,
    context: &[TokenId],
) -> Result<Vec<T>> {
    let arch = model.arch();
    for &t in context {
        if !arch.vocab.contains(t) {
            return Err(Error::InvalidInput(format!("token id {t} out of range")));
        }
    }
    let mut ctx = Vec::with_capacity(arch.context);
    window(arch, context, context.len(), &mut ctx);
    let acts = forward(arch, model.params(), &ctx);
    Ok(log_softmax(&acts.logits))
}

pub fn next_token_probs<T: Scalar, M: ParamView<T>>(
    model: &M,
    context: &[TokenId],
) -> Result<Vec<T>> {
    Ok(next_token_log_probs(model, context)?.iter().map(|&lp| lp.exp()).collect())
}

/// ln pi(y | x) together with its gradient with respect to the parameters.
/// The log-probability is accumulated exactly as in [`sequence_log_prob`].
pub fn grad_log_prob<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    response: &Sequence,
) -> Result<(T, Vec<T>)> {
    let stream = validated_stream(model, prompt, response)?;
    let start = 1 + prompt.len();
    let arch = model.arch();
    let params = model.params();
    let layout = arch.layout();
    let e = arch.embed_dim;
    let h = arch.hidden_dim;
    let v = arch.vocab.size as usize;
    let ke = arch.context * e;

    let mut grad = vec![T::zero(); params.len()];
    let mut total = T::zero();
    let mut ctx = Vec::with_capacity(arch.context);
    let mut d_hidden = vec![T::zero(); h];
    let mut d_inputs = vec![T::zero(); ke];

    for t in start..stream.len() {
        window(arch, &stream, t, &mut ctx);
        let acts = forward(arch, params, &ctx);
        let log_probs = log_softmax(&acts.logits);
        let target = stream[t] as usize;
        total = total + log_probs[target];

        // d log p(target) / d logit_o = 1[o == target] - softmax_o
        for x in d_hidden.iter_mut() {
            *x = T::zero();
        }
        for o in 0..v {
            let p = log_probs[o].exp();
            let mut d_logit = -p;
            if o == target {
                d_logit = d_logit + T::one();
            }
            grad[layout.b_out.start + o] = grad[layout.b_out.start + o] + d_logit;
            let wo_base = layout.w_out.start + o * h;
            for j in 0..h {
                grad[wo_base + j] = grad[wo_base + j] + d_logit * acts.hidden[j];
                d_hidden[j] = d_hidden[j] + d_logit * params[wo_base + j];
            }
        }

        for x in d_inputs.iter_mut() {
            *x = T::zero();
        }
        for j in 0..h {
            let g = acts.gate[j];
            let c = acts.cell[j];
            let d_gate_pre = d_hidden[j] * c * g * (T::one() - g);
            let d_cell_pre = d_hidden[j] * g * (T::one() - c * c);
            grad[layout.b_gate.start + j] = grad[layout.b_gate.start + j] + d_gate_pre;
            grad[layout.b_cell.start + j] = grad[layout.b_cell.start + j] + d_cell_pre;
            let wg_base = layout.w_gate.start + j * ke;
            let wc_base = layout.w_cell.start + j * ke;
            for i in 0..ke {
                grad[wg_base + i] = grad[wg_base + i] + d_gate_pre * acts.inputs[i];
                grad[wc_base + i] = grad[wc_base + i] + d_cell_pre * acts.inputs[i];
                d_inputs[i] =
                    d_inputs[i] + d_gate_pre * params[wg_base + i] + d_cell_pre * params[wc_base + i];
            }
        }

        for (k, &tok) in ctx.iter().enumerate() {
            let base = layout.embed.start + tok as usize * e;
            for i in 0..e {
                grad[base + i] = grad[base + i] + d_inputs[k * e + i];
            }
        }
    }

    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Smallest prefix of the probability-sorted entries whose cumulative mass
/// reaches `top_p`, renormalized. Ties in probability break toward lower ids.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

/// Autoregressive sampling: temperature scaling, then nucleus truncation.
/// Stops at EOS (not emitted) or `max_len`. `temperature == 0` is greedy
/// decoding with ties broken toward the lowest token id. PAD and BOS are
/// never emitted, and EOS is suppressed at the first position so a sampled
/// response is always nonempty.
pub fn sample_response<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    rng_seed: u64,
) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_response_with_rng(model, prompt, temperature, top_p, max_len, &mut rng)
}

pub fn sample_response_with_rng<T: Scalar, M: ParamView<T>>(
    model: &M,
    prompt: &Sequence,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sequence> {
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be >= 1".into()));
    }
    if !(0.0..=f64::INFINITY).contains(&temperature) {
        return Err(Error::InvalidInput("temperature must be >= 0".into()));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidInput("top_p must be in (0, 1]".into()));
    }
    let arch = model.arch();
    prompt.validate_in(&arch.vocab)?;

    let vocab = arch.vocab;
    let mut stream = Vec::with_capacity(1 + prompt.len() + max_len);
    stream.push(vocab.bos);
    stream.extend_from_slice(prompt.tokens());

    let mut out = Vec::new();
    for pos in 0..max_len {
        let log_probs = next_token_log_probs(model, &stream)?;
        let allowed: Vec<usize> = (0..vocab.size as usize)
            .filter(|&i| {
                let t = i as TokenId;
                t != vocab.pad && t != vocab.bos && !(pos == 0 && t == vocab.eos)
            })
            .collect();

        let choice = if temperature == 0.0 {
            // greedy over allowed ids, lowest id wins ties
            let mut best = allowed[0];
            for &i in &allowed[1..] {
                if to_f64(log_probs[i]) > to_f64(log_probs[best]) {
                    best = i;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = allowed.iter().map(|&i| to_f64(log_probs[i]) / temperature).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&x| x / z).collect();
            let kept = nucleus_filter(&probs, top_p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut picked = kept[kept.len() - 1].0;
            for &(local, p) in &kept {
                acc += p;
                if u < acc {
                    picked = local;
                    break;
                }
            }
            allowed[picked]
        };

        if choice as TokenId == vocab.eos {
            break;
        }
        out.push(choice as TokenId);
        stream.push(choice as TokenId);
    }
    Ok(Sequence::new(out))
}

// ---------------------------------------------------------------------------
// Snapshot file format (f32 instantiation)
// ---------------------------------------------------------------------------

const SNAP_MAGIC: &[u8; 8] = b"PFSNAP01";

impl ModelSnapshot<f32> {
    /// Write the snapshot: magic, arch config, content hash, then the
    /// little-endian 32-bit float parameter block. Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let arch_bytes = self.arch.canonical_bytes();
        let mut buf = Vec::with_capacity(8 + 4 + arch_bytes.len() + 32 + 8 + self.params.len() * 4);
        buf.extend_from_slice(SNAP_MAGIC);
        buf.extend_from_slice(&(arch_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&arch_bytes);
        buf.extend_from_slice(self.hash.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in self.params.iter() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let need = |n: usize, at: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(Error::InvalidInput(format!("{}: truncated snapshot file", path.display())))
            } else {
                Ok(())
            }
        };
        need(8, 0)?;
        if &bytes[..8] != SNAP_MAGIC {
            return Err(Error::InvalidInput(format!("{}: not a snapshot file", path.display())));
        }
        need(4, 8)?;
        let arch_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        need(arch_len, 12)?;
        let arch: ArchConfig = serde_json::from_slice(&bytes[12..12 + arch_len])?;
        arch.validate()?;
        let mut off = 12 + arch_len;
        need(32, off)?;
        let mut stored = [0u8; 32];
        stored.copy_from_slice(&bytes[off..off + 32]);
        off += 32;
        need(8, off)?;
        let count = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if count != arch.param_count() {
            return Err(Error::IncompatibleSnapshot(format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        need(count * 4, off)?;
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            let b = &bytes[off + i * 4..off + i * 4 + 4];
            params.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        let hash = hash_params(&arch, &params);
        if hash.as_bytes() != &stored {
            return Err(Error::IncompatibleSnapshot(format!(
                "{}: stored content hash does not match parameters",
                path.display()
            )));
        }
        Ok(Self { arch, params: params.into(), hash })
    }
}

/// `restore` as a free function, mirroring `snapshot`.
pub fn restore<T: Scalar>(snapshot: &ModelSnapshot<T>) -> PolicyModel<T> {
    PolicyModel::restore(snapshot)
}
