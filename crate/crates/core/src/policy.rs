//! Desk-scale conditional autoregressive policy over a tiny SVG grammar.
//!
//! Token layout (53 ids):
//!
//! | ids     | meaning                                   |
//! |---------|-------------------------------------------|
//! | 0       | BOS                                       |
//! | 1       | EOS                                       |
//! | 2, 3, 4 | `rect`, `circle`, `line` opcodes          |
//! | 5..37   | coordinate bins 0..31                     |
//! | 37..53  | palette colors 0..15                      |
//!
//! A sequence is `BOS (primitive)* EOS` with
//! `rect x y w h color`, `circle cx cy r color` and `line x1 y1 x2 y2 color`,
//! drawn on a 64-unit viewBox. BOS is forced and carries log-probability 0.
//!
//! Logits are linear in the parameters. With `c` the grammar slot (15 slots,
//! crossed with the primitive index capped at 3), `h_1..h_4` the previous four
//! tokens and `x` the 192 residual image features:
//!
//! ```text
//! z[v] = bias[v] + W_ctx[c][v] + sum_k W_hist[k][h_k][v] + W_img[c][v] . x
//! ```
//!
//! `x` is the condition features of the target minus those of a coarse
//! raster of the primitives completed so far, so it changes after every color
//! token. It never depends on the parameters.

use crate::grpo::{LogProbModel, Policy};
use crate::raster::{render_svg, resample_bilinear, RasterImage, RenderSpec};
use crate::svg::{SvgSource, TokenSequence, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const VOCAB_SIZE: usize = 53;
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const COORD_BASE: u32 = 5;
pub const COORD_BINS: u32 = 32;
pub const COLOR_BASE: u32 = COORD_BASE + COORD_BINS;
pub const CANVAS_UNITS: u32 = 64;
/// Stroke width of `line`, in canvas units.
pub const LINE_WIDTH: u32 = 4;

pub const FEATURE_SIDE: usize = 8;
pub const FEATURE_LEN: usize = FEATURE_SIDE * FEATURE_SIDE * 3;
pub const HISTORY: usize = 4;
const SLOTS: usize = 15;
const PRIM_BUCKETS: usize = 4;
pub const CONTEXTS: usize = SLOTS * PRIM_BUCKETS;

const IMG_OFFSET: usize = 0;
const HIST_OFFSET: usize = IMG_OFFSET + CONTEXTS * VOCAB_SIZE * FEATURE_LEN;
const CTX_OFFSET: usize = HIST_OFFSET + HISTORY * VOCAB_SIZE * VOCAB_SIZE;
const BIAS_OFFSET: usize = CTX_OFFSET + CONTEXTS * VOCAB_SIZE;
pub const PARAM_COUNT: usize = BIAS_OFFSET + VOCAB_SIZE;

pub const PALETTE: [(&str, [u8; 3]); 16] = [
    ("black", [0x00, 0x00, 0x00]),
    ("white", [0xff, 0xff, 0xff]),
    ("red", [0xe6, 0x19, 0x4b]),
    ("green", [0x3c, 0xb4, 0x4b]),
    ("blue", [0x43, 0x63, 0xd8]),
    ("yellow", [0xff, 0xe1, 0x19]),
    ("cyan", [0x42, 0xd4, 0xf4]),
    ("magenta", [0xf0, 0x32, 0xe6]),
    ("orange", [0xf5, 0x82, 0x31]),
    ("purple", [0x91, 0x1e, 0xb4]),
    ("brown", [0x9a, 0x63, 0x24]),
    ("pink", [0xfa, 0xbe, 0xd4]),
    ("gray", [0xa9, 0xa9, 0xa9]),
    ("navy", [0x00, 0x00, 0x75]),
    ("teal", [0x46, 0x99, 0x90]),
    ("olive", [0x80, 0x80, 0x00]),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid prefix at position {position}: {reason}")]
    InvalidPrefix { position: usize, reason: String },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid sample config: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Rect,
    Circle,
    Line,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Rect, Primitive::Circle, Primitive::Line];

    pub fn opcode(self) -> u32 {
        match self {
            Primitive::Rect => 2,
            Primitive::Circle => 3,
            Primitive::Line => 4,
        }
    }

    pub fn from_opcode(t: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.opcode() == t)
    }

    /// Arguments after the opcode, the color included.
    pub fn arity(self) -> usize {
        match self {
            Primitive::Rect | Primitive::Line => 5,
            Primitive::Circle => 4,
        }
    }

    /// Tokens used by one primitive, the opcode included.
    pub fn token_len(self) -> usize {
        1 + self.arity()
    }

    fn first_slot(self) -> usize {
        match self {
            Primitive::Rect => 1,
            Primitive::Circle => 6,
            Primitive::Line => 10,
        }
    }
}

pub fn coord_token(bin: u32) -> u32 {
    assert!(bin < COORD_BINS, "coordinate bin out of range");
    COORD_BASE + bin
}

pub fn color_token(index: usize) -> u32 {
    assert!(index < PALETTE.len(), "palette index out of range");
    COLOR_BASE + index as u32
}

/// Where the grammar is after a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    /// Tokens consumed so far, BOS included.
    pub len: usize,
    /// Completed primitives.
    pub primitives: usize,
    current: Option<(Primitive, usize)>,
    done: bool,
}

impl GrammarState {
    pub fn start() -> Self {
        Self {
            len: 0,
            primitives: 0,
            current: None,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Grammar slot in `0..15` and primitive bucket, or `None` before BOS and after EOS.
    fn context(&self) -> Option<usize> {
        if self.len == 0 || self.done {
            return None;
        }
        let slot = match self.current {
            None => 0,
            Some((p, arg)) => p.first_slot() + arg,
        };
        Some(slot * PRIM_BUCKETS + self.primitives.min(PRIM_BUCKETS - 1))
    }

    /// Allowed next tokens, ascending. `max_len` bounds the finished sequence
    /// length (BOS and EOS included); primitives that would not fit are masked.
    pub fn allowed(&self, max_len: Option<usize>) -> Vec<u32> {
        if self.done {
            return Vec::new();
        }
        if self.len == 0 {
            return vec![BOS];
        }
        match self.current {
            None => {
                let mut out = vec![EOS];
                for p in Primitive::ALL {
                    if max_len.map_or(true, |m| self.len + p.token_len() < m) {
                        out.push(p.opcode());
                    }
                }
                out
            }
            Some((p, arg)) if arg + 1 == p.arity() => {
                (COLOR_BASE..COLOR_BASE + PALETTE.len() as u32).collect()
            }
            Some(_) => (COORD_BASE..COORD_BASE + COORD_BINS).collect(),
        }
    }

    pub fn advance(&self, token: u32, max_len: Option<usize>) -> Result<Self, PolicyError> {
        if !self.allowed(max_len).contains(&token) {
            return Err(PolicyError::InvalidPrefix {
                position: self.len,
                reason: format!("token {token} not allowed here"),
            });
        }
        let mut next = *self;
        next.len += 1;
        if self.len == 0 {
            return Ok(next);
        }
        match self.current {
            None if token == EOS => next.done = true,
            None => {
                next.current = Some((Primitive::from_opcode(token).expect("allowed opcode"), 0))
            }
            Some((p, arg)) if arg + 1 == p.arity() => {
                next.current = None;
                next.primitives += 1;
            }
            Some((p, arg)) => next.current = Some((p, arg + 1)),
        }
        Ok(next)
    }

    pub fn after(prefix: &[u32], max_len: Option<usize>) -> Result<Self, PolicyError> {
        prefix
            .iter()
            .try_fold(Self::start(), |s, &t| s.advance(t, max_len))
    }
}

/// Flattened 8x8 RGB downsample of the condition image, mean-centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionFeatures(Vec<f64>);

impl ConditionFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn featurize(img: &RasterImage) -> ConditionFeatures {
    let small = resample_bilinear(&img.to_rgb(), FEATURE_SIDE, FEATURE_SIDE);
    let mean = small.data().iter().sum::<f64>() / FEATURE_LEN as f64;
    ConditionFeatures(small.data().iter().map(|v| v - mean).collect())
}

/// Side of the coverage raster a prefix is drawn into.
const CANVAS_SIDE: usize = 32;
/// Coverage samples per raster pixel side.
const SUPERSAMPLE: usize = 2;

/// Coarse picture of the primitives drawn so far.
#[derive(Debug, Clone)]
struct Canvas {
    pixels: Vec<f64>,
    /// Index of the opcode of the primitive being read.
    start: usize,
}

impl Canvas {
    fn blank() -> Self {
        Self {
            pixels: vec![1.0; CANVAS_SIDE * CANVAS_SIDE * 3],
            start: 0,
        }
    }

    fn residual(&self, target: &ConditionFeatures) -> Vec<f64> {
        let img = RasterImage::new(CANVAS_SIDE, CANVAS_SIDE, 3, self.pixels.clone())
            .expect("canvas shape");
        target
            .0
            .iter()
            .zip(&featurize(&img).0)
            .map(|(t, c)| t - c)
            .collect()
    }

    /// Records `tokens[pos]`; returns true when it completed a primitive and the canvas changed.
    fn observe(&mut self, tokens: &[u32], pos: usize) -> bool {
        let t = tokens[pos];
        if pos > 0 && Primitive::from_opcode(t).is_some() {
            self.start = pos;
            false
        } else if t >= COLOR_BASE {
            self.paint(&tokens[self.start..=pos]);
            true
        } else {
            false
        }
    }

    /// Paints one `opcode args.. color` chunk with per-pixel coverage.
    fn paint(&mut self, chunk: &[u32]) {
        let prim = Primitive::from_opcode(chunk[0]).expect("chunk starts with an opcode");
        let b = |k: usize| coord_units(chunk[1 + k]) as f64;
        let color = PALETTE[(chunk[chunk.len() - 1] - COLOR_BASE) as usize].1;
        let inside: Box<dyn Fn(f64, f64) -> bool> = match prim {
            Primitive::Rect => {
                let (x0, y0, w, h) = (
                    2.0 * b(0),
                    2.0 * b(1),
                    2.0 * (b(2) + 1.0),
                    2.0 * (b(3) + 1.0),
                );
                Box::new(move |px, py| px >= x0 && px < x0 + w && py >= y0 && py < y0 + h)
            }
            Primitive::Circle => {
                let (cx, cy, r) = (2.0 * b(0) + 1.0, 2.0 * b(1) + 1.0, b(2) + 1.0);
                Box::new(move |px, py| (px - cx).powi(2) + (py - cy).powi(2) <= r * r)
            }
            Primitive::Line => {
                let (x1, y1, x2, y2) = (
                    2.0 * b(0) + 1.0,
                    2.0 * b(1) + 1.0,
                    2.0 * b(2) + 1.0,
                    2.0 * b(3) + 1.0,
                );
                Box::new(move |px, py| {
                    let (dx, dy) = (x2 - x1, y2 - y1);
                    let len2 = dx * dx + dy * dy;
                    let t = if len2 == 0.0 {
                        0.0
                    } else {
                        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
                    };
                    (px - x1 - t * dx).powi(2) + (py - y1 - t * dy).powi(2)
                        <= (LINE_WIDTH as f64 / 2.0).powi(2)
                })
            }
        };
        let px_units = CANVAS_UNITS as f64 / CANVAS_SIDE as f64;
        let step = px_units / SUPERSAMPLE as f64;
        for y in 0..CANVAS_SIDE {
            for x in 0..CANVAS_SIDE {
                let mut hit = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        hit += inside(
                            x as f64 * px_units + (sx as f64 + 0.5) * step,
                            y as f64 * px_units + (sy as f64 + 0.5) * step,
                        ) as usize;
                    }
                }
                if hit > 0 {
                    let cov = hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let px = (y * CANVAS_SIDE + x) * 3;
                    for c in 0..3 {
                        self.pixels[px + c] =
                            self.pixels[px + c] * (1.0 - cov) + color[c] as f64 / 255.0 * cov;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::InvalidConfig(format!(
                "top_p {} must lie in (0, 1]",
                self.top_p
            )));
        }
        if self.max_len < 2 {
            return Err(PolicyError::InvalidConfig(
                "max_len must leave room for BOS and EOS".into(),
            ));
        }
        Ok(())
    }
}

/// A sampled sequence with the log-probability of each token under the
/// distribution it was drawn from (0 for the forced BOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    values: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    /// All-zero parameters: uniform over the allowed tokens everywhere.
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; PARAM_COUNT],
        }
    }

    /// Independent `N(0, scale^2)` entries.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..PARAM_COUNT)
            .map(|_| {
                // Box-Muller; one normal per pair is plenty here.
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Self { values }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self, PolicyError> {
        if values.len() != PARAM_COUNT {
            return Err(PolicyError::ParamLength {
                got: values.len(),
                expected: PARAM_COUNT,
            });
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn logit(&self, ctx: usize, hist: &[u32; HISTORY], x: &[f64], v: usize) -> f64 {
        let w = &self.values;
        let img = IMG_OFFSET + (ctx * VOCAB_SIZE + v) * FEATURE_LEN;
        let mut z = w[BIAS_OFFSET + v] + w[CTX_OFFSET + ctx * VOCAB_SIZE + v];
        for (k, &h) in hist.iter().enumerate() {
            z += w[HIST_OFFSET + (k * VOCAB_SIZE + h as usize) * VOCAB_SIZE + v];
        }
        z + w[img..img + FEATURE_LEN]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }

    /// Raw logits for the next token, with disallowed tokens at `-inf`.
    pub fn logits(
        &self,
        features: &ConditionFeatures,
        prefix: &[u32],
        max_len: Option<usize>,
    ) -> Result<Vec<f64>, PolicyError> {
        let state = GrammarState::after(prefix, max_len)?;
        let mut out = vec![f64::NEG_INFINITY; VOCAB_SIZE];
        let allowed = state.allowed(max_len);
        match state.context() {
            None => allowed.iter().for_each(|&t| out[t as usize] = 0.0),
            Some(ctx) => {
                let hist = history(prefix);
                let x = residual_after(features, prefix);
                for &t in &allowed {
                    out[t as usize] = self.logit(ctx, &hist, &x, t as usize);
                }
            }
        }
        Ok(out)
    }

    /// Teacher-forced pass over `tokens`, recording what the backward pass needs.
    fn forward(
        &self,
        features: &ConditionFeatures,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
    ) -> Result<Trace, PolicyError> {
        let mut canvas = Canvas::blank();
        let mut xs = vec![canvas.residual(features)];
        let mut state = GrammarState::start();
        let mut steps = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            let allowed = state.allowed(max_len);
            if !allowed.contains(&tok) {
                return Err(PolicyError::InvalidPrefix {
                    position: pos,
                    reason: format!("token {tok} not allowed here"),
                });
            }
            let step = match state.context() {
                None => Step {
                    ctx: None,
                    x: 0,
                    hist: [BOS; HISTORY],
                    allowed: Vec::new(),
                    probs: Vec::new(),
                    token: tok,
                    logprob: 0.0,
                },
                Some(ctx) => {
                    let hist = history(&tokens[..pos]);
                    let x = xs.len() - 1;
                    let z: Vec<f64> = allowed
                        .iter()
                        .map(|&t| self.logit(ctx, &hist, &xs[x], t as usize) / temperature)
                        .collect();
                    let probs = softmax(&z);
                    let k = allowed
                        .iter()
                        .position(|&t| t == tok)
                        .expect("checked above");
                    let logprob = z[k] - log_sum_exp(&z);
                    Step {
                        ctx: Some(ctx),
                        x,
                        hist,
                        allowed,
                        probs,
                        token: tok,
                        logprob,
                    }
                }
            };
            steps.push(step);
            state = state.advance(tok, max_len)?;
            if canvas.observe(tokens, pos) {
                xs.push(canvas.residual(features));
            }
        }
        Ok(Trace { steps, xs })
    }

    /// Adds `sum_t weights[t] * d logprob_t / d params` into `grad`.
    fn backward(&self, trace: &Trace, temperature: f64, weights: &[f64], grad: &mut [f64]) {
        for (step, &wt) in trace.steps.iter().zip(weights) {
            let Some(ctx) = step.ctx else { continue };
            let x = &trace.xs[step.x];
            if wt == 0.0 {
                continue;
            }
            for (&t, &p) in step.allowed.iter().zip(&step.probs) {
                let v = t as usize;
                let indicator = if t == step.token { 1.0 } else { 0.0 };
                let g = wt * (indicator - p) / temperature;
                grad[BIAS_OFFSET + v] += g;
                grad[CTX_OFFSET + ctx * VOCAB_SIZE + v] += g;
                for (k, &h) in step.hist.iter().enumerate() {
                    grad[HIST_OFFSET + (k * VOCAB_SIZE + h as usize) * VOCAB_SIZE + v] += g;
                }
                let img = IMG_OFFSET + (ctx * VOCAB_SIZE + v) * FEATURE_LEN;
                for (gi, xi) in grad[img..img + FEATURE_LEN].iter_mut().zip(x) {
                    *gi += g * xi;
                }
            }
        }
    }

    /// Per-token log-probabilities at `temperature`; the BOS entry is 0.
    pub fn token_logprobs_at(
        &self,
        features: &ConditionFeatures,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
    ) -> Result<Vec<f64>, PolicyError> {
        Ok(self
            .forward(features, tokens, temperature, max_len)?
            .steps
            .iter()
            .map(|s| s.logprob)
            .collect())
    }
}

struct Trace {
    steps: Vec<Step>,
    /// Residual features, one per number of completed primitives.
    xs: Vec<Vec<f64>>,
}

struct Step {
    ctx: Option<usize>,
    /// Index into [`Trace::xs`].
    x: usize,
    hist: [u32; HISTORY],
    allowed: Vec<u32>,
    probs: Vec<f64>,
    token: u32,
    logprob: f64,
}

fn residual_after(features: &ConditionFeatures, prefix: &[u32]) -> Vec<f64> {
    let mut canvas = Canvas::blank();
    (0..prefix.len()).for_each(|pos| {
        canvas.observe(prefix, pos);
    });
    canvas.residual(features)
}

fn history(prefix: &[u32]) -> [u32; HISTORY] {
    let mut h = [BOS; HISTORY];
    for (k, &t) in prefix.iter().rev().take(HISTORY).enumerate() {
        h[k] = t;
    }
    h
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Masked logits for the next token after `prefix`.
pub fn logits(
    params: &PolicyParams,
    features: &ConditionFeatures,
    prefix: &TokenSequence,
) -> Result<Vec<f64>, PolicyError> {
    params.logits(features, prefix.tokens(), None)
}

/// Samples one sequence. Sampling uses `softmax(z / temperature)` restricted
/// to the smallest top-probability set whose mass reaches `top_p`; the
/// recorded log-probabilities are those of that renormalized distribution.
pub fn sample_sequence(
    params: &PolicyParams,
    features: &ConditionFeatures,
    cfg: &SampleConfig,
) -> Result<Sample, PolicyError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut canvas = Canvas::blank();
    let mut x = canvas.residual(features);
    let max_len = Some(cfg.max_len);
    let mut state = GrammarState::start().advance(BOS, max_len)?;
    let mut tokens = vec![BOS];
    let mut logprobs = vec![0.0];
    while !state.is_done() {
        let ctx = state.context().expect("live state has a context");
        let allowed = state.allowed(max_len);
        let hist = history(&tokens);
        let z: Vec<f64> = allowed
            .iter()
            .map(|&t| params.logit(ctx, &hist, &x, t as usize) / cfg.temperature)
            .collect();
        let probs = softmax(&z);
        let mut order: Vec<usize> = (0..allowed.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut kept = Vec::new();
        let mut mass = 0.0;
        for &k in &order {
            kept.push(k);
            mass += probs[k];
            if mass >= cfg.top_p {
                break;
            }
        }
        let u = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = *kept.last().expect("at least one allowed token");
        for &k in &kept {
            acc += probs[k];
            if u < acc {
                pick = k;
                break;
            }
        }
        let tok = allowed[pick];
        tokens.push(tok);
        logprobs.push((probs[pick] / mass).ln());
        state = state.advance(tok, max_len)?;
        if canvas.observe(&tokens, tokens.len() - 1) {
            x = canvas.residual(features);
        }
    }
    let tokens =
        TokenSequence::new(tokens, Vocab::MiniGrammar).expect("grammar tokens are in range");
    Ok(Sample { tokens, logprobs })
}

/// Teacher-forced `sum_l log p(token_l | prefix, features)` at temperature 1.
pub fn sequence_logprob(
    params: &PolicyParams,
    features: &ConditionFeatures,
    tokens: &TokenSequence,
) -> Result<f64, PolicyError> {
    Ok(params
        .token_logprobs_at(features, tokens.tokens(), 1.0, None)?
        .iter()
        .sum())
}

/// Mean negative log-likelihood over the batch and its gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    batch: &[(&ConditionFeatures, &TokenSequence)],
) -> Result<(f64, Vec<f64>), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::InvalidSequence("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let (nll, grad) = batch
        .par_iter()
        .try_fold(
            || (0.0, vec![0.0; PARAM_COUNT]),
            |(nll, mut grad), (feat, seq)| {
                let trace = params.forward(feat, seq.tokens(), 1.0, None)?;
                let lp: f64 = trace.steps.iter().map(|s| s.logprob).sum();
                params.backward(&trace, 1.0, &vec![-scale; trace.steps.len()], &mut grad);
                Ok::<_, PolicyError>((nll - lp * scale, grad))
            },
        )
        .try_reduce(
            || (0.0, vec![0.0; PARAM_COUNT]),
            |(a, mut ga), (b, gb)| {
                ga.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                Ok((a + b, ga))
            },
        )?;
    Ok((nll, grad))
}

impl LogProbModel for PolicyParams {
    type Condition = ConditionFeatures;

    fn token_logprobs(
        &self,
        cond: &ConditionFeatures,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
    ) -> Result<Vec<f64>, PolicyError> {
        self.token_logprobs_at(cond, tokens, temperature, max_len)
    }
}

impl Policy for PolicyParams {
    fn params(&self) -> &[f64] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn add_logprob_grad(
        &self,
        cond: &ConditionFeatures,
        tokens: &[u32],
        temperature: f64,
        max_len: Option<usize>,
        weights: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError> {
        let trace = self.forward(cond, tokens, temperature, max_len)?;
        let lp: Vec<f64> = trace.steps.iter().map(|s| s.logprob).collect();
        let w = weights(&lp);
        self.backward(&trace, temperature, &w, grad);
        Ok(lp)
    }
}

/// Analytic gradient of the clipped group objective on this policy; see
/// [`crate::grpo::objective_and_grad`].
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    conditions: &[&ConditionFeatures],
    groups: &[crate::grpo::RolloutGroup],
    cfg: &crate::grpo::ObjectiveConfig,
    reference: Option<&dyn LogProbModel<Condition = ConditionFeatures>>,
) -> Result<(f64, Vec<f64>), crate::grpo::GrpoError> {
    let out = crate::grpo::objective_and_grad(params, conditions, groups, cfg, reference)?;
    Ok((out.loss, out.grad))
}

fn coord_units(t: u32) -> u32 {
    t - COORD_BASE
}

fn hex(color: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", color[0], color[1], color[2])
}

/// Renders a complete `BOS ... EOS` sequence as SVG markup.
///
/// Positions map bin `b` to `2b` (rect corner) or `2b + 1` (circle centers, line
/// ends); sizes map to `2(b + 1)` and radii to `b + 1`.
pub fn decode_tokens(tokens: &[u32]) -> Result<SvgSource, PolicyError> {
    let state = GrammarState::after(tokens, None)
        .map_err(|e| PolicyError::InvalidSequence(e.to_string()))?;
    if !state.is_done() {
        return Err(PolicyError::InvalidSequence(
            "sequence does not end with EOS".into(),
        ));
    }
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {u} {u}" width="{u}" height="{u}">"#,
        u = CANVAS_UNITS
    );
    let mut i = 1;
    while tokens[i] != EOS {
        let prim = Primitive::from_opcode(tokens[i]).expect("grammar-checked");
        let a: Vec<u32> = tokens[i + 1..i + prim.token_len()].to_vec();
        let color = hex(PALETTE[(a[a.len() - 1] - COLOR_BASE) as usize].1);
        let b = |k: usize| coord_units(a[k]);
        match prim {
            Primitive::Rect => write!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}"/>"#,
                2 * b(0),
                2 * b(1),
                2 * (b(2) + 1),
                2 * (b(3) + 1)
            ),
            Primitive::Circle => write!(out, r#"<circle cx="{}" cy="{}" r="{}" fill="{color}"/>"#, 2 * b(0) + 1, 2 * b(1) + 1, b(2) + 1),
            Primitive::Line => write!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="{LINE_WIDTH}"/>"#,
                2 * b(0) + 1,
                2 * b(1) + 1,
                2 * b(2) + 1,
                2 * b(3) + 1
            ),
        }
        .expect("writing to a String");
        i += prim.token_len();
    }
    out.push_str("</svg>");
    Ok(SvgSource::new(out))
}

/// Inverse of [`decode_tokens`]: accepts only markup it could have produced.
pub fn encode_svg(src: &SvgSource) -> Result<TokenSequence, PolicyError> {
    let bad = |m: String| PolicyError::InvalidSequence(m);
    let doc = roxmltree::Document::parse(src.as_str()).map_err(|e| bad(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(bad("root element is not <svg>".into()));
    }
    let mut tokens = vec![BOS];
    for node in root.children().filter(|n| n.is_element()) {
        let num = |name: &str| -> Result<u32, PolicyError> {
            node.attribute(name)
                .ok_or_else(|| bad(format!("missing {name}")))?
                .parse::<u32>()
                .map_err(|_| bad(format!("{name} is not a grid value")))
        };
        let bin = |v: u32, scale: u32, offset: u32| -> Result<u32, PolicyError> {
            if v < offset || (v - offset) % scale != 0 || (v - offset) / scale >= COORD_BINS {
                return Err(bad(format!("value {v} is off the grid")));
            }
            Ok(coord_token((v - offset) / scale))
        };
        let color = |name: &str| -> Result<u32, PolicyError> {
            let v = node
                .attribute(name)
                .ok_or_else(|| bad(format!("missing {name}")))?;
            PALETTE
                .iter()
                .position(|(_, c)| hex(*c) == v)
                .map(color_token)
                .ok_or_else(|| bad(format!("{v} is not a palette color")))
        };
        match node.tag_name().name() {
            "rect" => tokens.extend([
                Primitive::Rect.opcode(),
                bin(num("x")?, 2, 0)?,
                bin(num("y")?, 2, 0)?,
                bin(num("width")?, 2, 2)?,
                bin(num("height")?, 2, 2)?,
                color("fill")?,
            ]),
            "circle" => tokens.extend([
                Primitive::Circle.opcode(),
                bin(num("cx")?, 2, 1)?,
                bin(num("cy")?, 2, 1)?,
                bin(num("r")?, 1, 1)?,
                color("fill")?,
            ]),
            "line" => tokens.extend([
                Primitive::Line.opcode(),
                bin(num("x1")?, 2, 1)?,
                bin(num("y1")?, 2, 1)?,
                bin(num("x2")?, 2, 1)?,
                bin(num("y2")?, 2, 1)?,
                color("stroke")?,
            ]),
            other => return Err(bad(format!("unsupported element <{other}>"))),
        }
    }
    tokens.push(EOS);
    Ok(TokenSequence::new(tokens, Vocab::MiniGrammar).expect("grammar tokens are in range"))
}

/// A synthetic reconstruction target.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub svg: SvgSource,
    pub tokens: TokenSequence,
    pub image: RasterImage,
}

/// 1 to 5 random primitives on a white canvas, rendered at 64x64, largest first.
pub fn random_target(seed: u64) -> Target {
    random_target_with(seed, &RenderSpec::default())
}

pub fn random_target_with(seed: u64, spec: &RenderSpec) -> Target {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=5);
    let mut prims: Vec<(f64, Vec<u32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let prim = Primitive::ALL[rng.gen_range(0..3)];
        let mut chunk = vec![prim.opcode()];
        // Area in coordinate bins squared.
        let area = match prim {
            Primitive::Rect => {
                let (w, h) = (rng.gen_range(3..16), rng.gen_range(3..16));
                chunk.extend(
                    [
                        rng.gen_range(0..COORD_BINS - w),
                        rng.gen_range(0..COORD_BINS - h),
                        w,
                        h,
                    ]
                    .map(coord_token),
                );
                ((w + 1) * (h + 1)) as f64
            }
            Primitive::Circle => {
                let r = rng.gen_range(3..10);
                chunk.extend(
                    [
                        rng.gen_range(r / 2..COORD_BINS - r / 2),
                        rng.gen_range(r / 2..COORD_BINS - r / 2),
                        r,
                    ]
                    .map(coord_token),
                );
                std::f64::consts::PI * ((r + 1) * (r + 1)) as f64
            }
            Primitive::Line => {
                let p: [u32; 4] = std::array::from_fn(|_| rng.gen_range(0..COORD_BINS));
                chunk.extend(p.map(coord_token));
                (p[0] as f64 - p[2] as f64).hypot(p[1] as f64 - p[3] as f64) * LINE_WIDTH as f64
                    / 2.0
            }
        };
        // Skip white so every primitive is visible on the background.
        let mut color = rng.gen_range(0..PALETTE.len() - 1);
        if color >= 1 {
            color += 1;
        }
        chunk.push(color_token(color));
        prims.push((area, chunk));
    }
    // Largest first, so the paint order runs from background to detail.
    prims.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tokens = vec![BOS];
    prims.into_iter().for_each(|(_, c)| tokens.extend(c));
    tokens.push(EOS);
    let svg = decode_tokens(&tokens).expect("generated tokens follow the grammar");
    let image = render_svg(&svg, spec).expect("generated svg renders");
    Target {
        svg,
        tokens: TokenSequence::new(tokens, Vocab::MiniGrammar).expect("in range"),
        image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RenderError;
    use proptest::prelude::*;
    use rand::Rng;

    fn feats(seed: u64) -> ConditionFeatures {
        featurize(&random_target(seed).image)
    }

    #[test]
    fn layout_is_consistent() {
        assert_eq!(PARAM_COUNT, 60 * 53 * 192 + 4 * 53 * 53 + 60 * 53 + 53);
        assert!(PARAM_COUNT < 1_000_000);
        assert_eq!(COLOR_BASE as usize + PALETTE.len(), VOCAB_SIZE);
        assert_eq!(crate::svg::Vocab::MiniGrammar.size(), VOCAB_SIZE);
    }

    #[test]
    fn featurize_constant_and_determinism() {
        let f = featurize(&RasterImage::filled_rgb(40, 30, [0.2, 0.5, 0.9]));
        assert_eq!(f.as_slice().len(), FEATURE_LEN);
        // Channels differ, so after centering the constant image is three constant blocks.
        let mut g = featurize(&RasterImage::filled(40, 30, 3, 0.6))
            .as_slice()
            .to_vec();
        g.retain(|v| v.abs() > 1e-12);
        assert!(g.is_empty());
        assert!(f.as_slice().iter().all(|v| v.is_finite()));
        let img = random_target(3).image;
        assert_eq!(featurize(&img), featurize(&img));
    }

    #[test]
    fn canvas_replay_explains_the_target() {
        for seed in 0..40 {
            let t = random_target(seed);
            let f = featurize(&t.image);
            let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
            let before = mean_abs(&Canvas::blank().residual(&f));
            let after = mean_abs(&residual_after(&f, t.tokens.tokens()));
            assert!(after < 0.02, "seed {seed}: {after}");
            assert!(after < before);
        }
        let white = featurize(&RasterImage::filled(64, 64, 3, 1.0));
        assert!(Canvas::blank()
            .residual(&white)
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn residual_changes_only_after_color_tokens() {
        let t = random_target(5);
        let f = featurize(&t.image);
        let trace = PolicyParams::zeros()
            .forward(&f, t.tokens.tokens(), 1.0, None)
            .unwrap();
        let prims = t
            .tokens
            .tokens()
            .iter()
            .filter(|&&v| Primitive::from_opcode(v).is_some())
            .count();
        assert_eq!(trace.xs.len(), prims + 1);
        for (pos, step) in trace.steps.iter().enumerate().skip(1) {
            let done = t.tokens.tokens()[..pos]
                .iter()
                .filter(|&&v| v >= COLOR_BASE)
                .count();
            assert_eq!(step.x, done);
        }
    }

    #[test]
    fn featurize_separates_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let img = RasterImage::new(
                    16,
                    16,
                    3,
                    (0..16 * 16 * 3).map(|_| rng.gen::<f64>()).collect(),
                )
                .unwrap();
                featurize(&img).0
            })
            .collect();
        let mut keys: Vec<Vec<u64>> = fs
            .iter()
            .map(|f| f.iter().map(|v| v.to_bits()).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn zero_params_are_uniform_over_allowed() {
        let p = PolicyParams::zeros();
        let f = feats(1);
        let z = p.logits(&f, &[BOS, 2, 5], None).unwrap();
        let probs = softmax(
            &z.iter()
                .filter(|v| v.is_finite())
                .cloned()
                .collect::<Vec<_>>(),
        );
        assert_eq!(probs.len(), 32);
        assert!(probs.iter().all(|&q| (q - 1.0 / 32.0).abs() < 1e-15));
        // Masked entries stay at -inf.
        assert_eq!(z[EOS as usize], f64::NEG_INFINITY);
        assert_eq!(z[COLOR_BASE as usize], f64::NEG_INFINITY);
    }

    #[test]
    fn invalid_prefix_is_rejected() {
        let p = PolicyParams::zeros();
        let f = feats(1);
        assert!(matches!(
            p.logits(&f, &[2], None),
            Err(PolicyError::InvalidPrefix { position: 0, .. })
        ));
        assert!(matches!(
            p.logits(&f, &[BOS, COLOR_BASE], None),
            Err(PolicyError::InvalidPrefix { position: 1, .. })
        ));
        assert!(p
            .logits(&f, &[BOS, EOS], None)
            .unwrap()
            .iter()
            .all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn budget_masks_primitives_that_do_not_fit() {
        let s = GrammarState::after(&[BOS], Some(7)).unwrap();
        assert_eq!(s.allowed(Some(7)), vec![EOS, 3]);
        assert_eq!(s.allowed(Some(8)), vec![EOS, 2, 3, 4]);
        assert_eq!(s.allowed(Some(2)), vec![EOS]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.4).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn peaked_params(token: u32) -> PolicyParams {
        let mut p = PolicyParams::zeros();
        p.values[BIAS_OFFSET + token as usize] = 8.0;
        p.values[BIAS_OFFSET + Primitive::Rect.opcode() as usize] = 5.0;
        p
    }

    #[test]
    fn low_temperature_is_greedy() {
        let p = peaked_params(coord_token(7));
        let cfg = SampleConfig {
            temperature: 0.01,
            top_p: 1.0,
            max_len: 8,
            seed: 4,
        };
        let s = sample_sequence(&p, &feats(2), &cfg).unwrap();
        // One rect fits in 8 tokens; EOS has no bias so the rect opcode wins first.
        assert_eq!(
            s.tokens.tokens()[..6],
            [
                BOS,
                2,
                coord_token(7),
                coord_token(7),
                coord_token(7),
                coord_token(7)
            ]
        );
        assert_eq!(*s.tokens.tokens().last().unwrap(), EOS);
        assert!(s.logprobs.iter().all(|&lp| lp > -1e-9 || lp.is_finite()));
    }

    #[test]
    fn sampling_is_seeded_and_respects_max_len() {
        let p = PolicyParams::random(5, 0.3);
        let f = feats(5);
        for seed in 0..50 {
            let cfg = SampleConfig {
                temperature: 1.1,
                top_p: 1.0,
                max_len: 9 + seed as usize % 20,
                seed,
            };
            let a = sample_sequence(&p, &f, &cfg).unwrap();
            assert_eq!(a, sample_sequence(&p, &f, &cfg).unwrap());
            assert!(a.tokens.len() <= cfg.max_len);
            assert_eq!(a.logprobs.len(), a.tokens.len());
            decode_tokens(a.tokens.tokens()).unwrap();
        }
    }

    #[test]
    fn sampled_logprobs_match_teacher_forcing() {
        let p = PolicyParams::random(6, 0.2);
        let f = feats(6);
        for seed in 0..20 {
            for temperature in [1.0, 1.1] {
                let cfg = SampleConfig {
                    temperature,
                    top_p: 1.0,
                    max_len: 30,
                    seed,
                };
                let s = sample_sequence(&p, &f, &cfg).unwrap();
                let tf = p
                    .token_logprobs_at(&f, s.tokens.tokens(), temperature, Some(30))
                    .unwrap();
                for (a, b) in s.logprobs.iter().zip(&tf) {
                    assert!((a - b).abs() < 1e-12);
                }
                if temperature == 1.0 {
                    // Without a binding length cap the teacher-forced mask is the sampling mask.
                    let cfg = SampleConfig {
                        max_len: 10_000,
                        ..cfg
                    };
                    let s = sample_sequence(&p, &f, &cfg).unwrap();
                    let total = sequence_logprob(&p, &f, &s.tokens).unwrap();
                    assert!((total - s.logprobs.iter().sum::<f64>()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn top_p_truncates_the_tail() {
        let mut p = PolicyParams::zeros();
        p.values[BIAS_OFFSET + EOS as usize] = 10.0;
        let f = feats(7);
        for seed in 0..30 {
            let s = sample_sequence(
                &p,
                &f,
                &SampleConfig {
                    temperature: 1.0,
                    top_p: 0.9,
                    max_len: 30,
                    seed,
                },
            )
            .unwrap();
            assert_eq!(s.tokens.tokens(), &[BOS, EOS]);
            assert_eq!(s.logprobs[1], 0.0);
        }
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        // First decision after BOS: EOS or one of three opcodes.
        let mut p = PolicyParams::zeros();
        for (t, b) in [(EOS, 0.4), (2, -0.3), (3, 0.9), (4, 0.0)] {
            p.values[BIAS_OFFSET + t as usize] = b;
        }
        let f = feats(8);
        let z = p.logits(&f, &[BOS], None).unwrap();
        let expected = softmax(&[z[1], z[2], z[3], z[4]]);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let s = sample_sequence(
                &p,
                &f,
                &SampleConfig {
                    temperature: 1.0,
                    top_p: 1.0,
                    max_len: 8,
                    seed: seed as u64,
                },
            )
            .unwrap();
            counts[(s.tokens.tokens()[1] - 1) as usize] += 1;
        }
        for (c, &q) in counts.iter().zip(&expected) {
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            assert!(
                ((*c as f64 / n as f64) - q).abs() < 3.0 * sigma + 1e-12,
                "{counts:?} vs {expected:?}"
            );
        }
    }

    #[test]
    fn uniform_sequence_logprob_closed_form() {
        let t = random_target(11);
        let p = PolicyParams::zeros();
        let mut expected = 0.0;
        let mut state = GrammarState::start();
        for &tok in t.tokens.tokens() {
            let n = state.allowed(None).len() as f64;
            expected -= n.ln();
            state = state.advance(tok, None).unwrap();
        }
        let lp = sequence_logprob(&p, &featurize(&t.image), &t.tokens).unwrap();
        assert!((lp - expected).abs() < 1e-12);
        // Coordinate and color steps dominate: a single rect is -(ln 4 + 4 ln 32 + ln 16 + ln 4).
        let rect = TokenSequence::new(
            vec![BOS, 2, 5, 5, 5, 5, COLOR_BASE, EOS],
            Vocab::MiniGrammar,
        )
        .unwrap();
        let lp = sequence_logprob(&p, &featurize(&t.image), &rect).unwrap();
        assert!((lp + (4f64.ln() + 4.0 * 32f64.ln() + 16f64.ln() + 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sft_uniform_nll_and_descent() {
        let targets: Vec<Target> = (0..6).map(random_target).collect();
        let fs: Vec<ConditionFeatures> = targets.iter().map(|t| featurize(&t.image)).collect();
        let batch: Vec<_> = fs
            .iter()
            .zip(&targets)
            .map(|(f, t)| (f, &t.tokens))
            .collect();
        let p = PolicyParams::zeros();
        let (nll, grad) = sft_loss_and_grad(&p, &batch).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|(f, s)| -sequence_logprob(&p, f, s).unwrap())
            .sum::<f64>()
            / 6.0;
        assert!((nll - expected).abs() < 1e-9);
        let mut q = p.clone();
        q.values
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= 1e-2 * g);
        assert!(sft_loss_and_grad(&q, &batch).unwrap().0 < nll);
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let targets: Vec<Target> = (20..23).map(random_target).collect();
        let fs: Vec<ConditionFeatures> = targets.iter().map(|t| featurize(&t.image)).collect();
        let batch: Vec<_> = fs
            .iter()
            .zip(&targets)
            .map(|(f, t)| (f, &t.tokens))
            .collect();
        let p = PolicyParams::random(1, 0.05);
        let (_, grad) = sft_loss_and_grad(&p, &batch).unwrap();
        let dir = PolicyParams::random(2, 1.0).values;
        let h = 1e-5;
        let at = |s: f64| {
            let q = PolicyParams {
                values: p.values.iter().zip(&dir).map(|(a, d)| a + s * d).collect(),
            };
            sft_loss_and_grad(&q, &batch).unwrap().0
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        assert!(
            (numeric - analytic).abs() / analytic.abs().max(1e-8) < 1e-5,
            "{numeric} vs {analytic}"
        );
    }

    #[test]
    fn full_canvas_red_rect() {
        let red = PALETTE.iter().position(|(n, _)| *n == "red").unwrap();
        let tokens = [
            BOS,
            2,
            coord_token(0),
            coord_token(0),
            coord_token(31),
            coord_token(31),
            color_token(red),
            EOS,
        ];
        let svg = decode_tokens(&tokens).unwrap();
        assert!(svg
            .as_str()
            .contains(r##"<rect x="0" y="0" width="64" height="64" fill="#e6194b"/>"##));
        let img = render_svg(&svg, &RenderSpec::default()).unwrap();
        let [r, g, b] = PALETTE[red].1.map(|c| c as f64 / 255.0);
        for px in img.data().chunks_exact(3) {
            assert!(
                (px[0] - r).abs() < 1e-9 && (px[1] - g).abs() < 1e-9 && (px[2] - b).abs() < 1e-9
            );
        }
    }

    #[test]
    fn decode_rejects_incomplete() {
        assert!(decode_tokens(&[BOS, 2, 5]).is_err());
        assert!(decode_tokens(&[2, EOS]).is_err());
        assert!(encode_svg(&SvgSource::from(
            r##"<svg><rect x="1" y="0" width="2" height="2" fill="#000000"/></svg>"##
        ))
        .is_err());
    }

    #[test]
    fn random_targets_are_deterministic_and_valid() {
        assert_eq!(random_target(42), random_target(42));
        let lens: Vec<usize> = (0..1000).map(|s| random_target(s).tokens.len()).collect();
        assert_eq!(*lens.iter().min().unwrap(), 7);
        assert_eq!(*lens.iter().max().unwrap(), 32);
        for s in 0..200 {
            let t = random_target(s);
            assert!(t.tokens.tokens()[1..]
                .iter()
                .all(|&tok| tok != color_token(1)));
            assert_eq!(encode_svg(&t.svg).unwrap(), t.tokens);
        }
    }

    fn valid_sequence() -> impl Strategy<Value = Vec<u32>> {
        let prim = (
            0usize..3,
            proptest::collection::vec(0u32..COORD_BINS, 4),
            0usize..PALETTE.len(),
        )
            .prop_map(|(k, c, col)| {
                let p = Primitive::ALL[k];
                let mut t = vec![p.opcode()];
                t.extend(c[..p.arity() - 1].iter().map(|&b| coord_token(b)));
                t.push(color_token(col));
                t
            });
        proptest::collection::vec(prim, 0..8).prop_map(|ps| {
            let mut t = vec![BOS];
            ps.into_iter().for_each(|p| t.extend(p));
            t.push(EOS);
            t
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn encode_decode_round_trip(t in valid_sequence()) {
            let svg = decode_tokens(&t).unwrap();
            let enc = encode_svg(&svg).unwrap();
            prop_assert_eq!(enc.tokens(), &t[..]);
            let r: Result<RasterImage, RenderError> = render_svg(&svg, &RenderSpec::default());
            prop_assert!(r.is_ok());
        }
    }
}
