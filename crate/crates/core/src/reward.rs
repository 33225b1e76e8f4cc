//! Rendering-based rewards and their weighted aggregation.
//!
//! Pixel rewards compare z-scored images:
//!
//! ```text
//! R_img = clip(1 - mean((z_in - z_pred)^2), -1, 1),   z = (I - mean(I)) / max(std(I), eps)
//! ```
//!
//! The mean runs over every element (width x height x channels). For two
//! non-constant images this is `2 * corr - 1`; a constant render maps to the
//! zero image and scores exactly 0.
//!
//! The length reward penalizes outputs longer than half the reference:
//!
//! ```text
//! R_len = clip(1 - (max(0, L_pred - L_gt / 2) / L_gt)^2, -1, 1)
//! ```

use crate::raster::{
    canny_pipeline, resample_bilinear, EdgeParams, RasterImage, Rasterizer, RenderError,
    RenderSpec, ResvgRasterizer,
};
use crate::semantic::{SemanticClient, SemanticError, SemanticMetric};
use crate::svg::{lex_svg, sanitize_svg, token_length, SvgSource};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Floor on the per-image standard deviation.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    L2,
    L2Canny,
    Dreamsim,
    DreamsimCanny,
    ClipText,
    Judge,
    Length,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::L2 => "l2",
            RewardKind::L2Canny => "l2_canny",
            RewardKind::Dreamsim => "dreamsim",
            RewardKind::DreamsimCanny => "dreamsim_canny",
            RewardKind::ClipText => "clip_text",
            RewardKind::Judge => "judge",
            RewardKind::Length => "length",
        }
    }

    /// Value assigned when the rollout could not be rendered.
    fn worst(self) -> f64 {
        match self {
            RewardKind::Judge => 0.0,
            _ => -1.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    DimensionMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("length reward needs a ground-truth length of at least one token")]
    MissingGroundTruth,
    #[error("reward components do not match the spec: {0}")]
    ComponentMismatch(String),
    #[error("component {0} needs an input the rollout does not have")]
    MissingInput(&'static str),
    #[error("invalid reward spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

fn shape(img: &RasterImage) -> (usize, usize, usize) {
    (img.width(), img.height(), img.channels())
}

fn check_same_shape(a: &RasterImage, b: &RasterImage) -> Result<(), RewardError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(RewardError::DimensionMismatch {
            a: shape(a),
            b: shape(b),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponent {
    pub kind: RewardKind,
    pub weight: f64,
}

/// Ordered `(kind, weight)` pairs. Serialized as a `kind = weight` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<RewardKind, f64>",
    into = "BTreeMap<RewardKind, f64>"
)]
pub struct RewardSpec {
    components: Vec<RewardComponent>,
}

impl TryFrom<BTreeMap<RewardKind, f64>> for RewardSpec {
    type Error = RewardError;

    fn try_from(map: BTreeMap<RewardKind, f64>) -> Result<Self, Self::Error> {
        RewardSpec::new(
            map.into_iter()
                .map(|(kind, weight)| RewardComponent { kind, weight })
                .collect(),
        )
    }
}

impl From<RewardSpec> for BTreeMap<RewardKind, f64> {
    fn from(spec: RewardSpec) -> Self {
        spec.components
            .into_iter()
            .map(|c| (c.kind, c.weight))
            .collect()
    }
}

impl Default for RewardSpec {
    /// Image fidelity, edges and semantics at full weight, length at 0.1.
    fn default() -> Self {
        RewardSpec::new(vec![
            RewardComponent {
                kind: RewardKind::L2,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::L2Canny,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::Dreamsim,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::Length,
                weight: 0.1,
            },
        ])
        .expect("default spec is valid")
    }
}

impl RewardSpec {
    pub fn new(components: Vec<RewardComponent>) -> Result<Self, RewardError> {
        if components.is_empty() {
            return Err(RewardError::InvalidSpec(
                "at least one component is required".into(),
            ));
        }
        for (i, c) in components.iter().enumerate() {
            if !c.weight.is_finite() {
                return Err(RewardError::InvalidSpec(format!(
                    "weight of {} is not finite",
                    c.kind.as_str()
                )));
            }
            if components[..i].iter().any(|o| o.kind == c.kind) {
                return Err(RewardError::InvalidSpec(format!(
                    "{} listed twice",
                    c.kind.as_str()
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn single(kind: RewardKind) -> Self {
        Self::new(vec![RewardComponent { kind, weight: 1.0 }])
            .expect("single component spec is valid")
    }

    pub fn components(&self) -> &[RewardComponent] {
        &self.components
    }

    pub fn weight(&self, kind: RewardKind) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.kind == kind)
            .map(|c| c.weight)
    }

    /// Sets the weight of an existing component; unknown kinds are ignored.
    pub fn set_weight(&mut self, kind: RewardKind, weight: f64) {
        if let Some(c) = self.components.iter_mut().find(|c| c.kind == kind) {
            c.weight = weight;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub kind: RewardKind,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub per_component: Vec<ComponentScore>,
    pub total: f64,
}

impl RewardBreakdown {
    /// Builds a breakdown whose total is the weighted sum of its parts.
    pub fn from_scores(per_component: Vec<ComponentScore>) -> Self {
        let total = per_component.iter().map(|c| c.weight * c.value).sum();
        Self {
            per_component,
            total,
        }
    }

    pub fn value(&self, kind: RewardKind) -> Option<f64> {
        self.per_component
            .iter()
            .find(|c| c.kind == kind)
            .map(|c| c.value)
    }
}

/// Image z-scored with a single mean and standard deviation over all elements.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn normalize_image(img: &RasterImage, eps: f64) -> NormalizedImage {
    assert!(eps > 0.0, "eps must be positive");
    let n = img.len() as f64;
    let mean = img.data().iter().sum::<f64>() / n;
    let var = img
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let denom = std.max(eps);
    NormalizedImage {
        width: img.width(),
        height: img.height(),
        channels: img.channels(),
        values: img.data().iter().map(|v| (v - mean) / denom).collect(),
        mean,
        std,
    }
}

/// Pixel reward on z-scored images, in `[-1, 1]`.
pub fn reward_l2(input: &RasterImage, pred: &RasterImage) -> Result<f64, RewardError> {
    check_same_shape(input, pred)?;
    let a = normalize_image(input, NORM_EPS);
    let b = normalize_image(pred, NORM_EPS);
    let msd = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.values.len() as f64;
    Ok((1.0 - msd).clamp(-1.0, 1.0))
}

/// [`reward_l2`] on the edge maps of both images.
pub fn reward_l2_canny(
    input: &RasterImage,
    pred: &RasterImage,
    p: &EdgeParams,
) -> Result<f64, RewardError> {
    if input.width() != pred.width() || input.height() != pred.height() {
        return Err(RewardError::DimensionMismatch {
            a: shape(input),
            b: shape(pred),
        });
    }
    reward_l2(&canny_pipeline(input, p), &canny_pipeline(pred, p))
}

/// Quadratic penalty for outputs longer than half the ground truth.
pub fn reward_length(pred_len: usize, gt_len: Option<usize>) -> Result<f64, RewardError> {
    let gt = match gt_len {
        Some(g) if g >= 1 => g as f64,
        _ => return Err(RewardError::MissingGroundTruth),
    };
    let excess = (pred_len as f64 - gt / 2.0).max(0.0) / gt;
    Ok((1.0 - excess * excess).clamp(-1.0, 1.0))
}

/// `1 - sim` for an image-pair semantic metric.
pub fn reward_semantic(
    input: &RasterImage,
    pred: &RasterImage,
    client: &SemanticClient,
    metric: SemanticMetric,
) -> Result<f64, RewardError> {
    let sim = client.score_pair(input, pred, metric)?;
    Ok((1.0 - sim).clamp(-1.0, 1.0))
}

/// Weighted sum of `parts` under `spec`. The parts must list exactly the
/// spec's components, in order.
pub fn aggregate(spec: &RewardSpec, parts: &RewardBreakdown) -> Result<f64, RewardError> {
    if spec.components.len() != parts.per_component.len() {
        return Err(RewardError::ComponentMismatch(format!(
            "spec has {} components, breakdown has {}",
            spec.components.len(),
            parts.per_component.len()
        )));
    }
    let mut total = 0.0;
    for (c, p) in spec.components.iter().zip(&parts.per_component) {
        if c.kind != p.kind {
            return Err(RewardError::ComponentMismatch(format!(
                "expected {}, found {}",
                c.kind.as_str(),
                p.kind.as_str()
            )));
        }
        total += c.weight * p.value;
    }
    Ok(total)
}

/// What to do when the semantic backend cannot be reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorPolicy {
    #[default]
    Fail,
    /// Leave the component out of the breakdown. Weights are not redistributed.
    Drop,
}

/// The conditioning input a rollout is scored against.
#[derive(Debug, Clone, Copy)]
pub struct RolloutInput<'a> {
    pub image: Option<&'a RasterImage>,
    pub prompt: Option<&'a str>,
}

impl<'a> RolloutInput<'a> {
    pub fn image(img: &'a RasterImage) -> Self {
        Self {
            image: Some(img),
            prompt: None,
        }
    }

    pub fn text(prompt: &'a str) -> Self {
        Self {
            image: None,
            prompt: Some(prompt),
        }
    }
}

/// Everything reward scoring needs besides the rollout itself.
#[derive(Clone)]
pub struct RewardContext {
    pub rasterizer: Arc<dyn Rasterizer>,
    pub semantic: SemanticClient,
    pub edge: EdgeParams,
    pub on_backend_error: BackendErrorPolicy,
    pub judge_metric: SemanticMetric,
}

impl Default for RewardContext {
    fn default() -> Self {
        Self {
            rasterizer: Arc::new(ResvgRasterizer),
            semantic: SemanticClient::local_proxy(),
            edge: EdgeParams::default(),
            on_backend_error: BackendErrorPolicy::Fail,
            judge_metric: SemanticMetric::JudgeEasy,
        }
    }
}

impl RewardContext {
    /// Scores one rollout.
    ///
    /// The SVG is sanitized (dropping `<text>` when the condition is a
    /// prompt) and rendered on `render`'s canvas; the input image is resized
    /// to that canvas if needed. An unrenderable SVG scores the worst value on
    /// every image-based component. The length component uses the raw text
    /// and is skipped when `gt_len` is unknown.
    pub fn reward_rollout(
        &self,
        input: RolloutInput<'_>,
        svg: &SvgSource,
        gt_len: Option<usize>,
        spec: &RewardSpec,
        render: &RenderSpec,
    ) -> Result<RewardBreakdown, RewardError> {
        render.validate()?;
        let (clean, _) = sanitize_svg(svg, input.prompt.is_some());
        let rendered = match self.rasterizer.render(&clean, render) {
            Ok(img) => Some(img),
            Err(RenderError::InvalidSpec(msg)) => return Err(RenderError::InvalidSpec(msg).into()),
            Err(_) => None,
        };
        let target = input.image.map(|img| {
            if img.width() == render.ref_width && img.height() == render.ref_height {
                std::borrow::Cow::Borrowed(img)
            } else {
                std::borrow::Cow::Owned(resample_bilinear(img, render.ref_width, render.ref_height))
            }
        });
        let need_image = || target.as_deref().ok_or(RewardError::MissingInput("image"));
        let need_prompt = || input.prompt.ok_or(RewardError::MissingInput("prompt"));

        let mut scores = Vec::with_capacity(spec.components.len());
        for c in &spec.components {
            let value = match c.kind {
                RewardKind::Length => match gt_len {
                    Some(_) => Some(reward_length(token_length(&lex_svg(svg)), gt_len)?),
                    None => None,
                },
                kind => {
                    let semantic =
                        |r: Result<f64, SemanticError>| -> Result<Option<f64>, RewardError> {
                            match r {
                                Ok(v) => Ok(Some(v)),
                                Err(SemanticError::BackendUnavailable { .. })
                                    if self.on_backend_error == BackendErrorPolicy::Drop =>
                                {
                                    Ok(None)
                                }
                                Err(e) => Err(e.into()),
                            }
                        };
                    match (kind, rendered.as_ref()) {
                        (RewardKind::L2, Some(pred)) => {
                            Some(reward_l2(&need_image()?.to_rgb(), &pred.to_rgb())?)
                        }
                        (RewardKind::L2Canny, Some(pred)) => {
                            Some(reward_l2_canny(need_image()?, pred, &self.edge)?)
                        }
                        (RewardKind::Dreamsim, Some(pred)) => semantic(
                            self.semantic
                                .score_pair(need_image()?, pred, SemanticMetric::Dreamsim)
                                .map(|s| (1.0 - s).clamp(-1.0, 1.0)),
                        )?,
                        (RewardKind::DreamsimCanny, Some(pred)) => semantic(
                            self.semantic
                                .score_pair(need_image()?, pred, SemanticMetric::DreamsimCanny)
                                .map(|s| (1.0 - s).clamp(-1.0, 1.0)),
                        )?,
                        (RewardKind::ClipText, Some(pred)) => {
                            semantic(self.semantic.score_text_image(
                                need_prompt()?,
                                pred,
                                SemanticMetric::ClipText,
                            ))?
                        }
                        (RewardKind::Judge, Some(pred)) => semantic(
                            self.semantic
                                .score_text_image(need_prompt()?, pred, self.judge_metric),
                        )?,
                        (kind, None) => {
                            match kind {
                                RewardKind::L2
                                | RewardKind::L2Canny
                                | RewardKind::Dreamsim
                                | RewardKind::DreamsimCanny => {
                                    need_image()?;
                                }
                                _ => {
                                    need_prompt()?;
                                }
                            }
                            Some(kind.worst())
                        }
                        (RewardKind::Length, _) => unreachable!(),
                    }
                }
            };
            if let Some(value) = value {
                scores.push(ComponentScore {
                    kind: c.kind,
                    weight: c.weight,
                    value,
                });
            }
        }
        Ok(RewardBreakdown::from_scores(scores))
    }
}

/// [`RewardContext::reward_rollout`] with the default context.
pub fn reward_rollout(
    input: &RasterImage,
    svg: &SvgSource,
    gt_len: Option<usize>,
    spec: &RewardSpec,
    render: &RenderSpec,
) -> Result<RewardBreakdown, RewardError> {
    RewardContext::default().reward_rollout(RolloutInput::image(input), svg, gt_len, spec, render)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_svg;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, 3, |x, y, c| {
            (x + 2 * y + c) as f64 / (w + 2 * h + 2) as f64
        })
    }

    #[test]
    fn normalize_fixed_point_and_constant() {
        // Zero-mean, unit-variance values cannot live in [0, 1], so check the
        // fixed point on the normalized output instead: normalizing twice is a no-op.
        let z = normalize_image(&ramp(9, 7), NORM_EPS);
        let img2 =
            RasterImage::new(9, 7, 3, z.values.iter().map(|v| (v + 4.0) / 8.0).collect()).unwrap();
        let z2 = normalize_image(&img2, NORM_EPS);
        for (a, b) in z.values.iter().zip(&z2.values) {
            assert!((a - b).abs() < 1e-9);
        }

        let c = normalize_image(&RasterImage::filled(5, 5, 1, 0.7), NORM_EPS);
        assert!(c.values.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn normalize_ramp_has_unit_moments() {
        let n = 101;
        let img =
            RasterImage::new(n, 1, 1, (0..n).map(|i| i as f64 / (n - 1) as f64).collect()).unwrap();
        let z = normalize_image(&img, NORM_EPS);
        let mean = z.values.iter().sum::<f64>() / n as f64;
        let var = z.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_closed_forms() {
        let img = ramp(16, 16);
        assert!((reward_l2(&img, &img).unwrap() - 1.0).abs() < 1e-9);

        // Reflect about the mean: pred_norm = -in_norm, mean square diff 4.
        let mean = img.data().iter().sum::<f64>() / img.len() as f64;
        let neg = RasterImage::new(
            16,
            16,
            3,
            img.data()
                .iter()
                .map(|v| (2.0 * mean - v).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        assert_eq!(reward_l2(&img, &neg).unwrap(), -1.0);

        let flat = RasterImage::filled(16, 16, 3, 0.3);
        assert!(reward_l2(&img, &flat).unwrap().abs() < 1e-9);
    }

    #[test]
    fn l2_rejects_mismatched_shapes() {
        assert!(matches!(
            reward_l2(&ramp(4, 4), &ramp(4, 5)),
            Err(RewardError::DimensionMismatch { .. })
        ));
        assert!(reward_l2_canny(&ramp(4, 4), &ramp(5, 4), &EdgeParams::default()).is_err());
    }

    #[test]
    fn l2_canny_cases() {
        let p = EdgeParams::default();
        let img = RasterImage::from_fn(32, 32, 3, |x, y, _| {
            if (8..24).contains(&x) && (8..24).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        assert!((reward_l2_canny(&img, &img, &p).unwrap() - 1.0).abs() < 1e-9);
        let red = RasterImage::filled_rgb(32, 32, [1.0, 0.0, 0.0]);
        let blue = RasterImage::filled_rgb(32, 32, [0.0, 0.0, 1.0]);
        assert_eq!(reward_l2_canny(&red, &blue, &p).unwrap(), 1.0);
        assert_eq!(
            reward_l2_canny(&img, &red, &p).unwrap(),
            reward_l2_canny(&img, &red, &p).unwrap()
        );
    }

    #[test]
    fn length_closed_forms() {
        assert_eq!(reward_length(50, Some(100)).unwrap(), 1.0);
        assert_eq!(reward_length(100, Some(100)).unwrap(), 0.75);
        assert_eq!(reward_length(300, Some(100)).unwrap(), -1.0);
        assert_eq!(reward_length(0, Some(100)).unwrap(), 1.0);
        assert!(matches!(
            reward_length(10, None),
            Err(RewardError::MissingGroundTruth)
        ));
        assert!(matches!(
            reward_length(10, Some(0)),
            Err(RewardError::MissingGroundTruth)
        ));
    }

    #[test]
    fn aggregate_examples() {
        let spec = RewardSpec::single(RewardKind::L2);
        let parts = RewardBreakdown::from_scores(vec![ComponentScore {
            kind: RewardKind::L2,
            weight: 1.0,
            value: 0.4,
        }]);
        assert_eq!(aggregate(&spec, &parts).unwrap(), 0.4);

        let two = |w: (f64, f64), v: (f64, f64)| {
            let spec = RewardSpec::new(vec![
                RewardComponent {
                    kind: RewardKind::L2,
                    weight: w.0,
                },
                RewardComponent {
                    kind: RewardKind::Length,
                    weight: w.1,
                },
            ])
            .unwrap();
            let parts = RewardBreakdown::from_scores(vec![
                ComponentScore {
                    kind: RewardKind::L2,
                    weight: w.0,
                    value: v.0,
                },
                ComponentScore {
                    kind: RewardKind::Length,
                    weight: w.1,
                    value: v.1,
                },
            ]);
            aggregate(&spec, &parts).unwrap()
        };
        assert_eq!(two((0.5, 0.5), (1.0, -1.0)), 0.0);
        assert!((two((1.0, 0.1), (0.8, -1.0)) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let spec = RewardSpec::single(RewardKind::L2);
        let parts = RewardBreakdown::from_scores(vec![ComponentScore {
            kind: RewardKind::Length,
            weight: 1.0,
            value: 0.4,
        }]);
        assert!(matches!(
            aggregate(&spec, &parts),
            Err(RewardError::ComponentMismatch(_))
        ));
        assert!(matches!(
            aggregate(&spec, &RewardBreakdown::from_scores(vec![])),
            Err(RewardError::ComponentMismatch(_))
        ));
    }

    #[test]
    fn spec_validation_and_toml() {
        assert!(RewardSpec::new(vec![]).is_err());
        assert!(RewardSpec::new(vec![RewardComponent {
            kind: RewardKind::L2,
            weight: f64::NAN
        }])
        .is_err());
        #[derive(Deserialize)]
        struct Wrap {
            rewards: RewardSpec,
        }
        let w: Wrap = toml::from_str("[rewards]\nl2 = 1.0\nlength = 0.1\n").unwrap();
        assert_eq!(w.rewards.weight(RewardKind::Length), Some(0.1));
        assert_eq!(w.rewards.components().len(), 2);
        assert!(toml::from_str::<Wrap>("[rewards]\n").is_err());
    }

    const TARGET: &str = r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 64 64"><rect x="8" y="8" width="30" height="20" fill="red"/><circle cx="44" cy="44" r="12" fill="blue"/></svg>"#;

    #[test]
    fn perfect_reconstruction_scores_one() {
        let spec = RenderSpec::default();
        let target = render_svg(&SvgSource::from(TARGET), &spec).unwrap();
        let b = reward_rollout(
            &target,
            &SvgSource::from(TARGET),
            None,
            &RewardSpec::single(RewardKind::L2),
            &spec,
        )
        .unwrap();
        assert!((b.total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn malformed_svg_scores_worst() {
        let spec = RenderSpec::default();
        let target = render_svg(&SvgSource::from(TARGET), &spec).unwrap();
        let b = reward_rollout(
            &target,
            &SvgSource::from("<svg><rect"),
            None,
            &RewardSpec::single(RewardKind::L2),
            &spec,
        )
        .unwrap();
        assert_eq!(b.total, -1.0);
        let rs = RewardSpec::new(vec![
            RewardComponent {
                kind: RewardKind::L2,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::Length,
                weight: 0.5,
            },
        ])
        .unwrap();
        let b = reward_rollout(
            &target,
            &SvgSource::from("<svg><rect"),
            Some(40),
            &rs,
            &spec,
        )
        .unwrap();
        assert_eq!(b.value(RewardKind::L2), Some(-1.0));
        assert_eq!(b.value(RewardKind::Length), Some(1.0));
        assert!((b.total - (-1.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn tiny_viewbox_blank_loses_to_reconstruction() {
        let spec = RenderSpec::default();
        let target = render_svg(&SvgSource::from(TARGET), &spec).unwrap();
        let l2 = RewardSpec::single(RewardKind::L2);
        let hack = reward_rollout(
            &target,
            &SvgSource::from(r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1 1"/>"#),
            None,
            &l2,
            &spec,
        )
        .unwrap();
        let good = reward_rollout(&target, &SvgSource::from(TARGET), None, &l2, &spec).unwrap();
        assert!(hack.total < good.total);
    }

    #[test]
    fn length_skipped_without_ground_truth() {
        let spec = RenderSpec::default();
        let target = render_svg(&SvgSource::from(TARGET), &spec).unwrap();
        let b = reward_rollout(
            &target,
            &SvgSource::from(TARGET),
            None,
            &RewardSpec::default(),
            &spec,
        )
        .unwrap();
        assert_eq!(b.per_component.len(), 3);
        assert!(b.value(RewardKind::Length).is_none());
        assert!((b.total - 3.0).abs() < 1e-9);
    }

    #[test]
    fn text_condition_strips_text() {
        let ctx = RewardContext::default();
        let svg = SvgSource::from(
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 4 4"><text>cat</text></svg>"#,
        );
        let err = ctx
            .reward_rollout(
                RolloutInput::text("cat"),
                &svg,
                None,
                &RewardSpec::single(RewardKind::ClipText),
                &RenderSpec::default(),
            )
            .unwrap_err();
        // Local proxy cannot score text; the point is we got past rendering.
        assert!(matches!(
            err,
            RewardError::Semantic(SemanticError::UnsupportedLocally(_))
        ));
        let err = ctx
            .reward_rollout(
                RolloutInput::text("cat"),
                &svg,
                None,
                &RewardSpec::single(RewardKind::L2),
                &RenderSpec::default(),
            )
            .unwrap_err();
        assert!(matches!(err, RewardError::MissingInput("image")));
    }

    #[test]
    fn whitespace_edits_do_not_change_rewards() {
        let spec = RenderSpec::default();
        let target = render_svg(&SvgSource::from(TARGET), &spec).unwrap();
        let spaced = TARGET.replace("><", ">\n   <").replace(" x=", "   x=");
        let rs = RewardSpec::new(vec![
            RewardComponent {
                kind: RewardKind::L2,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::L2Canny,
                weight: 1.0,
            },
            RewardComponent {
                kind: RewardKind::Length,
                weight: 0.1,
            },
        ])
        .unwrap();
        let a = reward_rollout(&target, &SvgSource::from(TARGET), Some(30), &rs, &spec).unwrap();
        let b = reward_rollout(&target, &SvgSource::new(spaced), Some(30), &rs, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_is_resized_to_render_canvas() {
        let big = render_svg(&SvgSource::from(TARGET), &RenderSpec::new(128, 128)).unwrap();
        let b = reward_rollout(
            &big,
            &SvgSource::from(TARGET),
            None,
            &RewardSpec::single(RewardKind::L2),
            &RenderSpec::default(),
        )
        .unwrap();
        assert!(b.total > 0.95);
    }

    fn any_image(w: usize, h: usize) -> impl Strategy<Value = RasterImage> {
        prop_oneof![
            proptest::collection::vec(0.0f64..=1.0, w * h * 3)
                .prop_map(move |d| RasterImage::new(w, h, 3, d).unwrap()),
            (0.0f64..=1.0).prop_map(move |v| RasterImage::filled(w, h, 3, v)),
        ]
    }

    proptest! {
        #[test]
        fn image_rewards_are_bounded(a in any_image(12, 10), b in any_image(12, 10)) {
            let l2 = reward_l2(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&l2));
            let edge = reward_l2_canny(&a, &b, &EdgeParams::default()).unwrap();
            prop_assert!((-1.0..=1.0).contains(&edge));
            let sem = reward_semantic(&a, &b, &SemanticClient::local_proxy(), SemanticMetric::Dreamsim).unwrap();
            prop_assert!((-1.0..=1.0).contains(&sem));
        }

        #[test]
        fn l2_self_similarity(a in proptest::collection::vec(0.0f64..=1.0, 48)) {
            let img = RasterImage::new(4, 4, 3, a).unwrap();
            let z = normalize_image(&img, NORM_EPS);
            prop_assume!(z.std > NORM_EPS);
            prop_assert!((reward_l2(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn length_is_non_increasing(gt in 1usize..500, a in 0usize..2000, b in 0usize..2000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(reward_length(lo, Some(gt)).unwrap() >= reward_length(hi, Some(gt)).unwrap());
            prop_assert!((-1.0..=1.0).contains(&reward_length(hi, Some(gt)).unwrap()));
        }

        #[test]
        fn aggregate_is_linear(
            w in proptest::collection::vec(-2.0f64..2.0, 3),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            y in proptest::collection::vec(-1.0f64..1.0, 3),
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
        ) {
            let kinds = [RewardKind::L2, RewardKind::Dreamsim, RewardKind::Length];
            let spec = RewardSpec::new(kinds.iter().zip(&w).map(|(&kind, &weight)| RewardComponent { kind, weight }).collect()).unwrap();
            let parts = |v: &[f64]| RewardBreakdown::from_scores(
                kinds.iter().zip(&w).zip(v).map(|((&kind, &weight), &value)| ComponentScore { kind, weight, value }).collect());
            let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = aggregate(&spec, &parts(&mixed)).unwrap();
            let rhs = alpha * aggregate(&spec, &parts(&x)).unwrap() + beta * aggregate(&spec, &parts(&y)).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
