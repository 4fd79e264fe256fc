//! Feature-conditioned LSTM caption generator.
//!
//! The projected image feature is fed once, at the step before BOS, into a
//! zero-initialized single-layer LSTM. After that each step consumes the
//! embedding of the previous token and predicts the next one through a
//! linear output layer. Gate order in `w_x`, `w_h` and `b` is
//! `[input | forget | output | candidate]`.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::funny_score::{BatchLossReport, FunnyScorePolicy};
use crate::nn::{
    log_softmax, mat_vec_acc, outer_acc, sigmoid, sigmoid_backward, softmax_cross_entropy, tanh_backward, vec_mat,
    vec_mat_acc, Matrix,
};

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.08;

pub const PARAM_NAMES: [&str; 7] = ["w_img", "embed", "w_x", "w_h", "b", "w_out", "b_out"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn new(feature_dim: usize, embed_dim: usize, hidden_dim: usize, vocab_size: usize) -> Self {
        Self { feature_dim, embed_dim, hidden_dim, vocab_size }
    }

    fn shapes(&self) -> [(usize, usize); 7] {
        let Self { feature_dim: f, embed_dim: d, hidden_dim: h, vocab_size: v } = *self;
        [(f, d), (v, d), (d, 4 * h), (h, 4 * h), (1, 4 * h), (h, v), (1, v)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.vocab_size <= EOS as usize + 1 {
            return Err(Error::InvalidArgument("vocabulary has no regular tokens".into()));
        }
        Ok(())
    }
}

/// All learnable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `feature_dim x embed_dim`
    pub w_img: Matrix,
    /// `vocab_size x embed_dim`
    pub embed: Matrix,
    /// `embed_dim x 4·hidden_dim`
    pub w_x: Matrix,
    /// `hidden_dim x 4·hidden_dim`
    pub w_h: Matrix,
    /// `1 x 4·hidden_dim`
    pub b: Matrix,
    /// `hidden_dim x vocab_size`
    pub w_out: Matrix,
    /// `1 x vocab_size`
    pub b_out: Matrix,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let [w_img, embed, w_x, w_h, b, w_out, b_out] = dims.shapes().map(|(r, c)| Matrix::zeros(r, c));
        Self { dims, w_img, embed, w_x, w_h, b, w_out, b_out }
    }

    /// Weights uniform in `[-INIT_SCALE, INIT_SCALE]`, biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self::init_with_scale(dims, seed, INIT_SCALE)
    }

    pub fn init_with_scale(dims: ModelDims, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        for (name, m) in PARAM_NAMES.iter().zip(p.tensors_mut()) {
            if !name.starts_with('b') {
                *m = Matrix::uniform(m.rows(), m.cols(), scale, &mut rng);
            }
        }
        p
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [&self.w_img, &self.embed, &self.w_x, &self.w_h, &self.b, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [&mut self.w_img, &mut self.embed, &mut self.w_x, &mut self.w_h, &mut self.b, &mut self.w_out, &mut self.b_out]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Matrix)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Concatenation of all tensors in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dims);
        if flat.len() != p.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), p.num_params())));
        }
        let mut at = 0;
        for m in p.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    /// Checks every tensor against `dims` and for finiteness.
    pub fn validate(&self) -> Result<()> {
        for ((name, m), shape) in self.named().zip(self.dims.shapes()) {
            if m.shape() != shape {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::Malformed(format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|m| m.sum_sq()).sum::<f64>().sqrt()
    }
}

/// Activations of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation `[i | f | o | g]`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn lstm_step(p: &ModelParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let hd = p.dims.hidden_dim;
    let mut gates = p.b.as_slice().to_vec();
    vec_mat_acc(x, &p.w_x, &mut gates);
    vec_mat_acc(h_prev, &p.w_h, &mut gates);
    for (k, a) in gates.iter_mut().enumerate() {
        *a = if k < 3 * hd { sigmoid(*a) } else { a.tanh() };
    }
    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, o, g) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), gates, c, tanh_c, h }
}

/// Backpropagates through one step. On entry `dh`/`dc` hold the gradient
/// w.r.t. this step's outputs; on exit, w.r.t. its `h_prev`/`c_prev`.
/// Returns the gradient w.r.t. the step input `x`.
fn lstm_step_backward(
    p: &ModelParams,
    s: &StepCache,
    dh: &mut [f64],
    dc: &mut [f64],
    grads: &mut ModelParams,
) -> Vec<f64> {
    let hd = p.dims.hidden_dim;
    let mut da = vec![0.0; 4 * hd];
    for j in 0..hd {
        let (i, f, o, g) = (s.gates[j], s.gates[hd + j], s.gates[2 * hd + j], s.gates[3 * hd + j]);
        let tc = s.tanh_c[j];
        let d_o = dh[j] * tc;
        let dcj = dc[j] + tanh_backward(tc, dh[j] * o);
        da[j] = sigmoid_backward(i, dcj * g);
        da[hd + j] = sigmoid_backward(f, dcj * s.c_prev[j]);
        da[2 * hd + j] = sigmoid_backward(o, d_o);
        da[3 * hd + j] = tanh_backward(g, dcj * i);
        dc[j] = dcj * f;
    }
    outer_acc(&mut grads.w_x, &s.x, &da);
    outer_acc(&mut grads.w_h, &s.h_prev, &da);
    for (b, d) in grads.b.as_mut_slice().iter_mut().zip(&da) {
        *b += d;
    }
    let mut dx = vec![0.0; p.dims.embed_dim];
    mat_vec_acc(&p.w_x, &da, &mut dx);
    dh.iter_mut().for_each(|v| *v = 0.0);
    mat_vec_acc(&p.w_h, &da, dh);
    dx
}

/// One LSTM cell application: `(h', c')`.
pub fn lstm_cell(x: &[f64], h: &[f64], c: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.dims;
    if x.len() != d.embed_dim || h.len() != d.hidden_dim || c.len() != d.hidden_dim {
        return Err(Error::Shape(format!("lstm_cell: x {}, h {}, c {} for dims {d:?}", x.len(), h.len(), c.len())));
    }
    let s = lstm_step(params, x, h, c);
    Ok((s.h, s.c))
}

fn project_image(p: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != p.dims.feature_dim {
        return Err(Error::DimensionMismatch { expected: p.dims.feature_dim, found: features.len() });
    }
    let mut x = vec![0.0; p.dims.embed_dim];
    vec_mat(features, &p.w_img, &mut x);
    Ok(x)
}

fn output_logits(p: &ModelParams, h: &[f64]) -> Vec<f64> {
    let mut logits = p.b_out.as_slice().to_vec();
    vec_mat_acc(h, &p.w_out, &mut logits);
    logits
}

/// Length of the caption once trailing batch padding is dropped; checks the
/// remaining ids form a valid `BOS .. EOS` caption for this vocabulary.
fn unpadded_len(caption: &[u32], vocab_size: usize) -> Result<usize> {
    let len = caption.iter().position(|&t| t == PAD).unwrap_or(caption.len());
    if caption[len..].iter().any(|&t| t != PAD) {
        return Err(Error::InvalidCaption("PAD inside caption".into()));
    }
    let c = &caption[..len];
    if c.len() < 2 {
        return Err(Error::InvalidCaption(format!("caption has {} ids, need at least BOS and EOS", c.len())));
    }
    if c[0] != BOS || c[len - 1] != EOS {
        return Err(Error::InvalidCaption("caption must start with BOS and end with EOS".into()));
    }
    if let Some(&bad) = c.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::UnknownId(bad));
    }
    Ok(len)
}

struct Trace {
    image: StepCache,
    steps: Vec<StepCache>,
    logits: Vec<Vec<f64>>,
    /// `softmax - onehot(target)` per predicted position.
    dlogits: Vec<Vec<f64>>,
    loss: f64,
}

fn run(p: &ModelParams, features: &[f64], caption: &[u32]) -> Result<Trace> {
    let len = unpadded_len(caption, p.dims.vocab_size)?;
    let hd = p.dims.hidden_dim;
    let x_img = project_image(p, features)?;
    let zeros = vec![0.0; hd];
    let image = lstm_step(p, &x_img, &zeros, &zeros);

    let n = len - 1;
    let mut steps: Vec<StepCache> = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut dlogits = Vec::with_capacity(n);
    let mut total = 0.0;
    for t in 0..n {
        let (h, c) = match steps.last() {
            Some(s) => (&s.h, &s.c),
            None => (&image.h, &image.c),
        };
        let step = lstm_step(p, p.embed.row(caption[t] as usize), h, c);
        let z = output_logits(p, &step.h);
        let (ce, g) = softmax_cross_entropy(&z, caption[t + 1] as usize)?;
        total += ce;
        steps.push(step);
        logits.push(z);
        dlogits.push(g);
    }
    Ok(Trace { image, steps, logits, dlogits, loss: total / n as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row per predicted position (`|caption| - 1` of them, padding excluded).
    pub logits: Vec<Vec<f64>>,
    /// Mean cross-entropy over predicted positions.
    pub loss: f64,
}

/// Teacher-forced forward pass over one caption. Trailing PAD is ignored.
pub fn forward(features: &[f64], caption: &[u32], params: &ModelParams) -> Result<ForwardOutput> {
    let t = run(params, features, caption)?;
    Ok(ForwardOutput { logits: t.logits, loss: t.loss })
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub caption: Vec<u32>,
    pub stars: u32,
}

/// Examples with captions right-padded with PAD to a common length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<u32>>,
    pub stars: Vec<u32>,
}

impl Batch {
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let max_len = examples.iter().map(|e| e.caption.len()).max().unwrap_or(0);
        let mut batch = Batch::default();
        for mut e in examples {
            e.caption.resize(max_len, PAD);
            batch.features.push(e.features);
            batch.tokens.push(e.caption);
            batch.stars.push(e.stars);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub report: BatchLossReport,
    pub grads: ModelParams,
}

/// Loss report and exact gradients of the policy's batch objective.
///
/// Examples are processed and accumulated in batch index order.
pub fn backward(params: &ModelParams, batch: &Batch, policy: &FunnyScorePolicy) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.features.len() != batch.len() || batch.stars.len() != batch.len() {
        return Err(Error::Shape("batch columns have different lengths".into()));
    }
    let traces =
        batch.features.iter().zip(&batch.tokens).map(|(f, c)| run(params, f, c)).collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = traces.iter().map(|t| t.loss).collect();
    let report = policy.batch_loss(&losses, &batch.stars)?;
    let coefs = policy.coefficients(&batch.stars)?;

    let hd = params.dims.hidden_dim;
    let mut grads = ModelParams::zeros(params.dims);
    for ((trace, caption), (features, coef)) in traces.iter().zip(&batch.tokens).zip(batch.features.iter().zip(&coefs))
    {
        let scale = coef / trace.steps.len() as f64;
        let mut dh = vec![0.0; hd];
        let mut dc = vec![0.0; hd];
        for t in (0..trace.steps.len()).rev() {
            let step = &trace.steps[t];
            let dz: Vec<f64> = trace.dlogits[t].iter().map(|g| g * scale).collect();
            outer_acc(&mut grads.w_out, &step.h, &dz);
            for (b, d) in grads.b_out.as_mut_slice().iter_mut().zip(&dz) {
                *b += d;
            }
            mat_vec_acc(&params.w_out, &dz, &mut dh);
            let dx = lstm_step_backward(params, step, &mut dh, &mut dc, &mut grads);
            for (e, d) in grads.embed.row_mut(caption[t] as usize).iter_mut().zip(&dx) {
                *e += d;
            }
        }
        let dx = lstm_step_backward(params, &trace.image, &mut dh, &mut dc, &mut grads);
        outer_acc(&mut grads.w_img, features, &dx);
    }
    Ok(BatchGradients { report, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Emitted tokens, EOS-terminated unless cut off at `max_len`.
    pub tokens: Vec<u32>,
    /// Sum of the log-probabilities of the emitted tokens.
    pub log_prob: f64,
}

impl DecodeResult {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Whether decoding may emit `id` at output position `pos`. PAD, BOS and UNK
/// are never emitted, and EOS is not allowed as the first token.
pub fn can_emit(id: u32, pos: usize) -> bool {
    match id {
        PAD | BOS | UNK => false,
        EOS => pos > 0,
        _ => true,
    }
}

/// Decoder state after the image step.
fn start_state(p: &ModelParams, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = project_image(p, features)?;
    let zeros = vec![0.0; p.dims.hidden_dim];
    let s = lstm_step(p, &x, &zeros, &zeros);
    Ok((s.h, s.c))
}

/// Feeds `token` and returns next-token log-probabilities and the new state.
fn advance(p: &ModelParams, token: u32, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = lstm_step(p, p.embed.row(token as usize), h, c);
    let lp = log_softmax(&output_logits(p, &s.h));
    (lp, s.h, s.c)
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Argmax decoding; ties go to the lowest id.
pub fn decode_greedy(features: &[f64], params: &ModelParams, max_len: usize) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    let (mut h, mut c) = start_state(params, features)?;
    let mut token = BOS;
    let mut out = DecodeResult { tokens: Vec::new(), log_prob: 0.0 };
    for pos in 0..max_len {
        let (lp, h2, c2) = advance(params, token, &h, &c);
        let mut best: Option<u32> = None;
        for id in 0..lp.len() as u32 {
            if can_emit(id, pos) && best.is_none_or(|b| lp[id as usize] > lp[b as usize]) {
                best = Some(id);
            }
        }
        let best = best.expect("vocabulary has an emittable token");
        out.log_prob += lp[best as usize];
        out.tokens.push(best);
        if best == EOS {
            break;
        }
        (token, h, c) = (best, h2, c2);
    }
    Ok(out)
}

/// Score descending, then token sequence ascending.
fn rank_order(a_lp: f64, a_toks: &[u32], b_lp: f64, b_toks: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_toks.cmp(b_toks))
}

struct Hyp {
    tokens: Vec<u32>,
    log_prob: f64,
    h: Vec<f64>,
    c: Vec<f64>,
}

/// Beam search over summed log-probabilities.
///
/// Each step expands every live hypothesis by every emittable token and keeps
/// the best `width` expansions; those ending in EOS, or reaching `max_len`,
/// retire. Returns up to `width` results sorted by log-probability
/// descending, ties by token sequence.
pub fn decode_beam(features: &[f64], params: &ModelParams, width: usize, max_len: usize) -> Result<Vec<DecodeResult>> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    check_max_len(max_len)?;
    let (h0, c0) = start_state(params, features)?;
    let mut live = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, h: h0, c: c0 }];
    let mut finished: Vec<DecodeResult> = Vec::new();

    for pos in 0..max_len {
        let mut cands: Vec<(f64, Vec<u32>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (pi, hyp) in live.iter().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(BOS);
            let (lp, h, c) = advance(params, last, &hyp.h, &hyp.c);
            for id in 0..lp.len() as u32 {
                if can_emit(id, pos) {
                    let mut toks = hyp.tokens.clone();
                    toks.push(id);
                    cands.push((hyp.log_prob + lp[id as usize], toks, pi));
                }
            }
            states.push((h, c));
        }
        cands.sort_by(|a, b| rank_order(a.0, &a.1, b.0, &b.1));
        cands.truncate(width);

        let mut next = Vec::new();
        for (log_prob, tokens, pi) in cands {
            if tokens.last() == Some(&EOS) || pos + 1 == max_len {
                finished.push(DecodeResult { tokens, log_prob });
            } else {
                let (h, c) = states[pi].clone();
                next.push(Hyp { tokens, log_prob, h, c });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Extensions only lower scores, so stop once `width` finished results
        // all beat the best live hypothesis.
        if finished.len() >= width {
            finished.sort_by(|a, b| rank_order(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
            if finished[width - 1].log_prob > live[0].log_prob {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank_order(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
    finished.truncate(width);
    Ok(finished)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    /// `-(|caption| - 1) · loss`
    pub log_prob: f64,
    /// `exp(loss)`
    pub perplexity: f64,
    /// Mean per-token cross-entropy.
    pub loss: f64,
    pub predicted: usize,
}

pub fn caption_score(features: &[f64], caption: &[u32], params: &ModelParams) -> Result<CaptionScore> {
    let out = forward(features, caption, params)?;
    let predicted = out.logits.len();
    Ok(CaptionScore { log_prob: -(predicted as f64) * out.loss, perplexity: out.loss.exp(), loss: out.loss, predicted })
}

/// Max relative error between [`backward`] and central differences of the
/// batch objective, over every parameter.
pub fn check_gradients(params: &ModelParams, batch: &Batch, policy: &FunnyScorePolicy, eps: f64) -> Result<f64> {
    let analytic = backward(params, batch, policy)?.grads.flatten();
    let dims = params.dims;
    let mut failure = None;
    let err = crate::nn::grad_check(
        |flat| {
            let q = ModelParams::from_flat(dims, flat).expect("same dims");
            match backward(&q, batch, policy) {
                Ok(b) => b.report.batch_loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &params.flatten(),
        &analytic,
        eps,
        None,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}
