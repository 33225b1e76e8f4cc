//! Training loops for the toy policy: supervised fine-tuning, then GRPO on
//! rendering rewards, plus the evaluation harnesses.

use crate::config::{RunConfig, Stream};
use crate::grpo::{
    dynamic_max_length, length_weight_schedule, lr_schedule, train_step, GrpoError, LogProbModel,
    Rollout, RolloutGroup, TrainConfig,
};
use crate::metrics::{best_of_n, code_efficiency, mse, ssim, MetricError};
use crate::optim::{AdamConfig, AdamW};
use crate::policy::{
    decode_tokens, featurize, random_target_with, sample_sequence, sft_loss_and_grad,
    ConditionFeatures, PolicyError, PolicyParams, SampleConfig, Target,
};
use crate::raster::{render_svg, resample_bilinear, RasterImage, RenderSpec};
use crate::reward::{reward_l2, RewardContext, RewardError, RewardKind, RewardSpec, RolloutInput};
use crate::runlog::{GrpoRecord, SftRecord, GRPO_SCHEMA, SFT_SCHEMA};
use crate::semantic::SemanticClient;
use crate::svg::{lex_svg, token_length};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite loss or gradient at step {0}")]
    NonFinite(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SplitMix64 over a list of words; derives independent per-item seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub dataset_size: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-2,
            lr_decay_factor: 0.7,
            lr_decay_every: 100,
            dataset_size: 500,
            weight_decay: 1e-2,
            max_grad_norm: 1.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.dataset_size == 0 || self.lr_decay_every == 0 {
            return Err(TrainError::Config(
                "batch_size, dataset_size and lr_decay_every must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.max_grad_norm > 0.0) {
            return Err(TrainError::Config(
                "lr must be finite and max_grad_norm positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr
            * self
                .lr_decay_factor
                .powi((step / self.lr_decay_every) as i32)
    }
}

/// A target with everything the loops need precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub target: Target,
    pub features: ConditionFeatures,
    /// Ground-truth length in policy tokens.
    pub gt_tokens: usize,
    /// Ground-truth length in lexer tokens of the SVG text, the unit of the length reward.
    pub gt_lex: usize,
}

impl Prepared {
    pub fn new(target: Target) -> Self {
        let features = featurize(&target.image);
        let gt_tokens = target.tokens.len();
        let gt_lex = token_length(&lex_svg(&target.svg));
        Self {
            target,
            features,
            gt_tokens,
            gt_lex,
        }
    }
}

/// `n` synthetic targets derived from `seed`.
pub fn synthetic_targets(n: usize, seed: u64, render: &RenderSpec) -> Vec<Prepared> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| Prepared::new(random_target_with(mix_seed(&[seed, i]), render)))
        .collect()
}

/// Runs SFT steps `start..cfg.steps`, calling `on_step` after each.
pub fn run_sft(
    params: &mut PolicyParams,
    opt: &mut AdamW,
    data: &[Prepared],
    cfg: &SftConfig,
    seed: u64,
    start: usize,
    on_step: &mut dyn FnMut(&SftRecord) -> std::io::Result<()>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("empty SFT dataset".into()));
    }
    for step in start..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5f7, step as u64]));
        let batch: Vec<(&ConditionFeatures, &crate::svg::TokenSequence)> = (0..cfg.batch_size)
            .map(|_| {
                let p = &data[rng.gen_range(0..data.len())];
                (&p.features, &p.target.tokens)
            })
            .collect();
        let (nll, mut grad) = sft_loss_and_grad(params, &batch)?;
        if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite(step));
        }
        let lr = cfg.lr_at(step);
        let grad_norm = opt.step(params.as_mut_slice(), &mut grad, lr);
        on_step(&SftRecord {
            schema: SFT_SCHEMA.into(),
            step,
            nll,
            lr,
            grad_norm,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoRunConfig {
    pub train: TrainConfig,
    pub rewards: RewardSpec,
    pub render: RenderSpec,
}

impl Default for GrpoRunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            rewards: RewardSpec::new(vec![
                crate::reward::RewardComponent {
                    kind: RewardKind::L2,
                    weight: 1.0,
                },
                crate::reward::RewardComponent {
                    kind: RewardKind::Length,
                    weight: 0.1,
                },
            ])
            .expect("valid spec"),
            render: RenderSpec::default(),
        }
    }
}

/// Samples one group per chosen condition and scores every rollout.
/// Returns the groups and the mean l2 component, if the spec has one.
#[allow(clippy::too_many_arguments)]
pub fn collect_groups(
    params: &PolicyParams,
    targets: &[Prepared],
    chosen: &[usize],
    cfg: &GrpoRunConfig,
    spec: &RewardSpec,
    ctx: &RewardContext,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<RolloutGroup>, Option<f64>), TrainError> {
    let g = cfg.train.group_size;
    let jobs: Vec<(usize, usize)> = (0..chosen.len())
        .flat_map(|c| (0..g).map(move |i| (c, i)))
        .collect();
    let scored: Vec<(Rollout, Option<f64>)> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let t = &targets[chosen[c]];
            let sc = SampleConfig {
                temperature: cfg.train.temperature,
                top_p: 1.0,
                max_len,
                seed: mix_seed(&[seed, c as u64, i as u64]),
            };
            let s = sample_sequence(params, &t.features, &sc)?;
            let svg = decode_tokens(s.tokens.tokens())?;
            let b = ctx.reward_rollout(
                RolloutInput::image(&t.target.image),
                &svg,
                Some(t.gt_lex),
                spec,
                &cfg.render,
            )?;
            let l2 = b.value(RewardKind::L2);
            Ok((
                Rollout::new(s.tokens, s.logprobs, b.total, Some(max_len))?,
                l2,
            ))
        })
        .collect::<Result<_, TrainError>>()?;
    let l2: Vec<f64> = scored.iter().filter_map(|s| s.1).collect();
    let mean_l2 = (!l2.is_empty()).then(|| l2.iter().sum::<f64>() / l2.len() as f64);
    let mut it = scored.into_iter().map(|s| s.0);
    let groups = chosen
        .iter()
        .map(|&id| RolloutGroup::new(id, it.by_ref().take(g).collect()))
        .collect::<Result<_, _>>()?;
    Ok((groups, mean_l2))
}

/// Runs GRPO steps `start..cfg.train.steps`, calling `on_step` after each.
/// `reference` is only consulted when `kl_beta > 0`.
#[allow(clippy::too_many_arguments)]
pub fn run_grpo(
    params: &mut PolicyParams,
    opt: &mut AdamW,
    targets: &[Prepared],
    cfg: &GrpoRunConfig,
    ctx: &RewardContext,
    seed: u64,
    start: usize,
    reference: Option<&PolicyParams>,
    on_step: &mut dyn FnMut(&GrpoRecord) -> std::io::Result<()>,
) -> Result<(), TrainError> {
    cfg.train.validate()?;
    if targets.is_empty() {
        return Err(TrainError::Config("no GRPO targets".into()));
    }
    let reference: Option<&dyn LogProbModel<Condition = ConditionFeatures>> =
        reference.map(|r| r as _);
    let k = cfg.train.conditions_per_step;
    for step in start..cfg.train.steps {
        let step_seed = mix_seed(&[seed, 0x6790, step as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let chosen: Vec<usize> = if k <= targets.len() {
            rand::seq::index::sample(&mut rng, targets.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..targets.len())).collect()
        };
        let gt: Vec<usize> = chosen.iter().map(|&i| targets[i].gt_tokens).collect();
        let max_len = dynamic_max_length(&gt, cfg.train.dyn_len_threshold);
        let length_weight = length_weight_schedule(step, &cfg.train);
        let mut spec = cfg.rewards.clone();
        spec.set_weight(RewardKind::Length, length_weight);

        let (groups, mean_l2) = collect_groups(
            params, targets, &chosen, cfg, &spec, ctx, max_len, step_seed,
        )?;
        let conds: Vec<&ConditionFeatures> = chosen.iter().map(|&i| &targets[i].features).collect();
        let mut stats = None;
        for _ in 0..cfg.train.inner_updates {
            stats = Some(train_step(
                params, &conds, &groups, &cfg.train, opt, step, reference,
            )?);
        }
        let stats = stats.expect("at least one inner update");
        let max_rollout_length = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.tokens.len())
            .max()
            .unwrap_or(0);
        on_step(&GrpoRecord {
            schema: GRPO_SCHEMA.into(),
            step,
            mean_reward: stats.mean_reward,
            reward_std: stats.reward_std,
            mean_kl: stats.mean_kl,
            mean_seq_length: stats.mean_seq_length,
            lr: lr_schedule(step, &cfg.train),
            length_weight,
            surrogate_value: stats.surrogate_value,
            grad_norm: stats.grad_norm,
            max_len,
            max_gt_length: *gt.iter().max().expect("non-empty"),
            mean_gt_length: gt.iter().sum::<usize>() as f64 / gt.len() as f64,
            max_rollout_length,
            mean_l2,
        })?;
    }
    Ok(())
}

fn fit_to(img: &RasterImage, spec: &RenderSpec) -> RasterImage {
    if img.width() == spec.ref_width && img.height() == spec.ref_height {
        img.clone()
    } else {
        resample_bilinear(img, spec.ref_width, spec.ref_height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean pixel reward over every sample of every target.
    pub mean_l2: f64,
    pub per_target: Vec<f64>,
    pub mean_length: f64,
    pub mean_gt_length: f64,
}

/// Mean pixel reward of `samples` draws per target, each capped at the
/// target's ground-truth length plus `threshold`. `sample.max_len` is ignored.
pub fn evaluate_l2(
    params: &PolicyParams,
    targets: &[Prepared],
    samples: usize,
    sample: &SampleConfig,
    threshold: usize,
    render: &RenderSpec,
) -> Result<EvalSummary, TrainError> {
    let jobs: Vec<(usize, usize)> = (0..targets.len())
        .flat_map(|t| (0..samples).map(move |i| (t, i)))
        .collect();
    let scored: Vec<(f64, usize)> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let p = &targets[t];
            let sc = SampleConfig {
                max_len: p.gt_tokens + threshold,
                seed: mix_seed(&[sample.seed, t as u64, i as u64]),
                ..*sample
            };
            let s = sample_sequence(params, &p.features, &sc)?;
            let svg = decode_tokens(s.tokens.tokens())?;
            let r = match render_svg(&svg, render) {
                Ok(img) => reward_l2(&fit_to(&p.target.image, render).to_rgb(), &img)?,
                Err(_) => -1.0,
            };
            Ok((r, s.tokens.len()))
        })
        .collect::<Result<_, TrainError>>()?;
    let per_target: Vec<f64> = scored
        .chunks(samples.max(1))
        .map(|c| c.iter().map(|s| s.0).sum::<f64>() / c.len() as f64)
        .collect();
    let n = scored.len().max(1) as f64;
    Ok(EvalSummary {
        mean_l2: scored.iter().map(|s| s.0).sum::<f64>() / n,
        per_target,
        mean_length: scored.iter().map(|s| s.1 as f64).sum::<f64>() / n,
        mean_gt_length: targets.iter().map(|t| t.gt_tokens as f64).sum::<f64>()
            / targets.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNReport {
    pub mse: f64,
    pub ssim: f64,
    pub code_efficiency: f64,
    pub n: usize,
    pub targets: usize,
}

/// Samples `n` candidates per target and keeps the one with the lowest MSE.
/// Candidate `i` uses the same seed for every `n`, so a larger `n` only adds candidates.
pub fn evaluate_best_of_n(
    params: &PolicyParams,
    targets: &[Prepared],
    n: usize,
    sample: &SampleConfig,
    threshold: usize,
    render: &RenderSpec,
) -> Result<BestOfNReport, TrainError> {
    if n == 0 || targets.is_empty() {
        return Err(TrainError::Config(
            "best-of-n needs n >= 1 and at least one target".into(),
        ));
    }
    let per_target: Vec<(f64, f64, usize)> = targets
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            let reference = fit_to(&p.target.image, render).to_rgb();
            let mut images = Vec::with_capacity(n);
            let mut lens = Vec::with_capacity(n);
            for i in 0..n {
                let sc = SampleConfig {
                    max_len: p.gt_tokens + threshold,
                    seed: mix_seed(&[sample.seed, t as u64, i as u64]),
                    ..*sample
                };
                let s = sample_sequence(params, &p.features, &sc)?;
                let svg = decode_tokens(s.tokens.tokens())?;
                images.push(render_svg(&svg, render).unwrap_or_else(|_| {
                    RasterImage::filled_rgb(render.ref_width, render.ref_height, render.background)
                }));
                lens.push(token_length(&lex_svg(&svg)));
            }
            let best = best_of_n(&images, &reference)?;
            Ok((
                mse(&images[best], &reference)?,
                ssim(&images[best], &reference)?,
                lens[best],
            ))
        })
        .collect::<Result<_, TrainError>>()?;
    let m = per_target.len() as f64;
    let gt: Vec<usize> = targets.iter().map(|t| t.gt_lex).collect();
    let pred: Vec<usize> = per_target.iter().map(|r| r.2).collect();
    Ok(BestOfNReport {
        mse: per_target.iter().map(|r| r.0).sum::<f64>() / m,
        ssim: per_target.iter().map(|r| r.1).sum::<f64>() / m,
        code_efficiency: code_efficiency(&gt, &pred)?,
        n,
        targets: targets.len(),
    })
}

/// A configured run: the fixed targets plus the scoring context, with every
/// random stream derived from the config seed.
pub struct Experiment {
    pub cfg: RunConfig,
    pub targets: Vec<Prepared>,
    pub ctx: RewardContext,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let semantic = SemanticClient::new(cfg.semantic.clone())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let ctx = RewardContext {
            semantic,
            ..RewardContext::default()
        };
        let targets = synthetic_targets(
            cfg.policy.targets,
            cfg.seed_for(Stream::Targets),
            &cfg.render,
        );
        Ok(Self { cfg, targets, ctx })
    }

    pub fn init_params(&self) -> PolicyParams {
        PolicyParams::random(self.cfg.seed_for(Stream::Init), self.cfg.policy.init_scale)
    }

    pub fn sft_data(&self) -> Vec<Prepared> {
        synthetic_targets(
            self.cfg.policy.sft.dataset_size,
            self.cfg.seed_for(Stream::SftData),
            &self.cfg.render,
        )
    }

    pub fn sft(
        &self,
        params: &mut PolicyParams,
        opt: &mut AdamW,
        data: &[Prepared],
        start: usize,
        on_step: &mut dyn FnMut(&SftRecord) -> std::io::Result<()>,
    ) -> Result<(), TrainError> {
        run_sft(
            params,
            opt,
            data,
            &self.cfg.policy.sft,
            self.cfg.seed_for(Stream::Sft),
            start,
            on_step,
        )
    }

    pub fn grpo(
        &self,
        params: &mut PolicyParams,
        opt: &mut AdamW,
        start: usize,
        reference: Option<&PolicyParams>,
        on_step: &mut dyn FnMut(&GrpoRecord) -> std::io::Result<()>,
    ) -> Result<(), TrainError> {
        let cfg = GrpoRunConfig {
            train: self.cfg.grpo.clone(),
            rewards: self.cfg.rewards.clone(),
            render: self.cfg.render,
        };
        run_grpo(
            params,
            opt,
            &self.targets,
            &cfg,
            &self.ctx,
            self.cfg.seed_for(Stream::Grpo),
            start,
            reference,
            on_step,
        )
    }

    fn eval_sampling(&self) -> SampleConfig {
        let e = &self.cfg.policy.eval;
        SampleConfig {
            temperature: e.temperature,
            top_p: e.top_p,
            max_len: 0,
            seed: self.cfg.seed_for(Stream::Eval),
        }
    }

    /// Mean pixel reward on the fixed targets under the eval sampling settings.
    pub fn evaluate(&self, params: &PolicyParams) -> Result<EvalSummary, TrainError> {
        evaluate_l2(
            params,
            &self.targets,
            self.cfg.policy.eval.samples,
            &self.eval_sampling(),
            self.cfg.grpo.dyn_len_threshold,
            &self.cfg.render,
        )
    }

    pub fn best_of_n(&self, params: &PolicyParams, n: usize) -> Result<BestOfNReport, TrainError> {
        evaluate_best_of_n(
            params,
            &self.targets,
            n,
            &self.eval_sampling(),
            self.cfg.grpo.dyn_len_threshold,
            &self.cfg.render,
        )
    }
}
