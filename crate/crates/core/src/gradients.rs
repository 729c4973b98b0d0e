//! Combined objective `lambda_sem L_sem + lambda_geo L_geo` and its reverse-mode gradient.
//!
//! Gradients are taken with respect to the pyramid features and the token
//! embeddings. Conventions for the non-smooth or detached parts:
//!
//! * top-K membership is locally constant;
//! * the GACO advantage (and so its clip) is a constant;
//! * the peak `|x|` location used for rescaling is locally constant, but the
//!   divisor itself is differentiated;
//! * the token posterior is differentiated.
//!
//! [`objective_frozen`] evaluates the surrogate whose exact gradient the
//! backward pass returns, which is what finite differences are compared with.

use serde::{Deserialize, Serialize};

use crate::eah::{expectation_alignment, AlignmentMap, FeatureMap, SimilarityTensor, TokenBatch, TokenPosterior};
use crate::error::{dim, domain, Result};
use crate::fusion::{check_pyramid_dims, fuse_down, fuse_down_backward, fuse_up, fuse_up_backward, ScalePyramid};
use crate::geo_loss::{
    gaco_logit_gradient, gaco_loss, geometry_forward, normalize_sim_backward, AdvantageField, GacoConfig, GacoImage,
    GeometryForward, InstanceMaskSet,
};
use crate::scalar::Real;
use crate::sem_loss::{infonce_gradient, semantic_loss, topk_margin, PromptLabels, SemanticOutcome};

/// One image: features at P3/P4/P5, one token batch per prompt, masks and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample<T> {
    features: [FeatureMap<T>; 3],
    tokens: Vec<TokenBatch<T>>,
    masks: InstanceMaskSet,
    labels: PromptLabels,
}

impl<T: Real> AlignmentSample<T> {
    pub fn new(
        features: [FeatureMap<T>; 3],
        tokens: Vec<TokenBatch<T>>,
        masks: InstanceMaskSet,
        labels: PromptLabels,
    ) -> Result<Self> {
        for (f, s) in features.iter().zip(3u8..) {
            if f.scale() != s {
                return domain(format!("feature level {s} carries scale tag {}", f.scale()));
            }
        }
        let [p3, p4, p5] = &features;
        check_pyramid_dims((p3.height(), p3.width()), (p4.height(), p4.width()), (p5.height(), p5.width()))?;
        let c = p3.channels();
        if p4.channels() != c || p5.channels() != c {
            return dim("pyramid levels disagree on channel count");
        }
        if tokens.is_empty() {
            return dim("a sample needs at least one prompt");
        }
        if let Some(t) = tokens.iter().find(|t| t.channels() != c) {
            return dim(format!("tokens have {} channels, features have {c}", t.channels()));
        }
        let p = tokens.len();
        if masks.prompts() != p || labels.total() != p {
            return dim(format!(
                "{p} token batches, {} mask prompts, {} labelled prompts",
                masks.prompts(),
                labels.total()
            ));
        }
        if masks.height() != p3.height() || masks.width() != p3.width() {
            return dim("masks must be at P3 resolution");
        }
        Ok(Self { features, tokens, masks, labels })
    }

    pub fn features(&self) -> &[FeatureMap<T>; 3] {
        &self.features
    }
    pub fn features_mut(&mut self) -> &mut [FeatureMap<T>; 3] {
        &mut self.features
    }
    pub fn tokens(&self) -> &[TokenBatch<T>] {
        &self.tokens
    }
    pub fn tokens_mut(&mut self) -> &mut [TokenBatch<T>] {
        &mut self.tokens
    }
    pub fn masks(&self) -> &InstanceMaskSet {
        &self.masks
    }
    pub fn labels(&self) -> &PromptLabels {
        &self.labels
    }
    pub fn prompts(&self) -> usize {
        self.tokens.len()
    }
    pub fn p3_dims(&self) -> (usize, usize) {
        (self.features[0].height(), self.features[0].width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig<T> {
    pub lambda_sem: T,
    pub lambda_geo: T,
    /// Token posterior temperature.
    pub tau_t: T,
    /// Contrastive temperature.
    pub tau: T,
    /// Top-K budget as a percentage of the P3 cell count.
    pub topk_percent: f64,
    pub gaco: GacoConfig<T>,
}

impl<T: Real> Default for ObjectiveConfig<T> {
    fn default() -> Self {
        Self {
            lambda_sem: T::lit(0.5),
            lambda_geo: T::one(),
            tau_t: T::one(),
            tau: T::lit(0.25),
            topk_percent: 1.0,
            gaco: GacoConfig::default(),
        }
    }
}

impl<T: Real> ObjectiveConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_sem", self.lambda_sem), ("lambda_geo", self.lambda_geo)] {
            if !(w >= T::zero()) || !w.is_finite() {
                return domain(format!("{name} must be finite and nonnegative, got {w}"));
            }
        }
        for (name, t) in [("tau_t", self.tau_t), ("tau", self.tau)] {
            if !(t > T::zero()) || !t.is_finite() {
                return domain(format!("{name} must be positive and finite, got {t}"));
            }
        }
        if !(self.topk_percent > 0.0) || !self.topk_percent.is_finite() {
            return domain(format!("top-k percent must be positive, got {}", self.topk_percent));
        }
        self.gaco.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub sem: T,
    pub geo: T,
    pub total: T,
}

/// Intermediate values of one image's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageForward<T> {
    /// `[prompt][level]` similarity tensors.
    pub similarities: Vec<[SimilarityTensor<T>; 3]>,
    pub posteriors: Vec<[TokenPosterior<T>; 3]>,
    pub pyramid: ScalePyramid<T>,
    pub fused_down: AlignmentMap<T>,
    pub fused_up: AlignmentMap<T>,
    pub semantic: SemanticOutcome<T>,
    pub geometry: GeometryForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    pub images: Vec<ImageForward<T>>,
    pub losses: LossBreakdown<T>,
    /// Masked pairs over the whole batch (the geometry loss denominator).
    pub mask_count: usize,
}

impl<T: Real> Forward<T> {
    /// Advantage fields, for freezing in a surrogate evaluation.
    pub fn advantages(&self) -> Vec<AdvantageField<T>> {
        self.images.iter().map(|im| im.geometry.advantage.clone()).collect()
    }
}

fn image_forward<T: Real>(
    sample: &AlignmentSample<T>,
    cfg: &ObjectiveConfig<T>,
    frozen: Option<&AdvantageField<T>>,
) -> Result<ImageForward<T>> {
    let mut similarities = Vec::with_capacity(sample.prompts());
    let mut posteriors = Vec::with_capacity(sample.prompts());
    let mut levels: [Vec<AlignmentMap<T>>; 3] = Default::default();
    for tokens in &sample.tokens {
        let mut sims = Vec::with_capacity(3);
        let mut pis = Vec::with_capacity(3);
        for (lvl, f) in sample.features.iter().enumerate() {
            let (s, pi, m) = expectation_alignment(f, tokens, cfg.tau_t)?;
            sims.push(s);
            pis.push(pi);
            levels[lvl].push(m);
        }
        similarities.push(<[_; 3]>::try_from(sims).expect("three levels"));
        posteriors.push(<[_; 3]>::try_from(pis).expect("three levels"));
    }
    let [l3, l4, l5] = levels;
    let pyramid = ScalePyramid::new(AlignmentMap::stack(&l3)?, AlignmentMap::stack(&l4)?, AlignmentMap::stack(&l5)?)?;
    let fused_down = fuse_down(&pyramid)?;
    let fused_up = fuse_up(&pyramid);
    let semantic = semantic_loss(&fused_down, &sample.labels, sample.p3_dims(), cfg.topk_percent, cfg.tau)?;
    let geometry = geometry_forward(&fused_up, &sample.masks, &cfg.gaco, frozen)?;
    Ok(ImageForward { similarities, posteriors, pyramid, fused_down, fused_up, semantic, geometry })
}

/// Forward pass over a batch. `frozen` substitutes per-image advantage fields.
pub fn forward<T: Real>(
    batch: &[AlignmentSample<T>],
    cfg: &ObjectiveConfig<T>,
    frozen: Option<&[AdvantageField<T>]>,
) -> Result<Forward<T>> {
    cfg.validate()?;
    if batch.is_empty() {
        return dim("empty batch");
    }
    if let Some(f) = frozen {
        if f.len() != batch.len() {
            return dim("one frozen advantage field per image is required");
        }
    }
    let images = batch
        .iter()
        .enumerate()
        .map(|(b, s)| image_forward(s, cfg, frozen.map(|f| &f[b])))
        .collect::<Result<Vec<_>>>()?;
    let sem = images.iter().map(|im| im.semantic.loss).sum::<T>() / T::from_usize_lossy(images.len());
    let terms: Vec<GacoImage<'_, T>> = images
        .iter()
        .zip(batch)
        .map(|(im, s)| GacoImage { probs: &im.geometry.probs, advantage: &im.geometry.advantage, masks: &s.masks })
        .collect();
    let geo = gaco_loss(&terms, cfg.gaco.beta);
    let mask_count = batch.iter().map(|s| s.masks.total_area()).sum();
    let total = cfg.lambda_sem * sem + cfg.lambda_geo * geo;
    Ok(Forward { images, losses: LossBreakdown { sem, geo, total }, mask_count })
}

pub fn objective<T: Real>(batch: &[AlignmentSample<T>], cfg: &ObjectiveConfig<T>) -> Result<LossBreakdown<T>> {
    Ok(forward(batch, cfg, None)?.losses)
}

/// Objective with the advantage held at `advantages`.
pub fn objective_frozen<T: Real>(
    batch: &[AlignmentSample<T>],
    cfg: &ObjectiveConfig<T>,
    advantages: &[AdvantageField<T>],
) -> Result<LossBreakdown<T>> {
    Ok(forward(batch, cfg, Some(advantages))?.losses)
}

/// Gradients for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient<T> {
    /// `dL/dF` per level, same layout as the feature values.
    pub features: [Vec<T>; 3],
    /// `dL/dT` per prompt, same layout as the embeddings.
    pub tokens: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T> {
    pub samples: Vec<SampleGradient<T>>,
    pub losses: LossBreakdown<T>,
}

impl<T: Real> GradientBundle<T> {
    /// Flattened in the order of [`pack_parameters`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for s in &self.samples {
            for f in &s.features {
                out.extend_from_slice(f);
            }
            for t in &s.tokens {
                out.extend_from_slice(t);
            }
        }
        out
    }
}

/// Backward through one head evaluation (similarity, posterior, expectation).
#[allow(clippy::too_many_arguments)]
fn head_backward<T: Real>(
    features: &FeatureMap<T>,
    tokens: &TokenBatch<T>,
    s: &SimilarityTensor<T>,
    pi: &TokenPosterior<T>,
    grad_map: &[T],
    tau_t: T,
    grad_f: &mut [T],
    grad_t: &mut [T],
) {
    let n = s.cells();
    let l_count = s.tokens();
    let c_count = features.channels();
    let weights = pi.weights();

    let mut grad_pi = vec![T::zero(); l_count];
    for (i, &g) in grad_map.iter().enumerate() {
        for (l, gp) in grad_pi.iter_mut().enumerate() {
            *gp = *gp + g * s.location(i)[l];
        }
    }
    let inner: T = weights.iter().zip(&grad_pi).map(|(&w, &g)| w * g).sum();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let grad_mean: Vec<T> = tokens
        .valid()
        .iter()
        .zip(weights.iter().zip(&grad_pi))
        .map(|(&ok, (&w, &g))| if ok { w * (g - inner) / tau_t * inv_n } else { T::zero() })
        .collect();

    // dL/dS, token-major
    let mut grad_s = vec![T::zero(); l_count * n];
    for (l, row) in grad_s.chunks_mut(n).enumerate() {
        for (gs, &g) in row.iter_mut().zip(grad_map) {
            *gs = weights[l] * g + grad_mean[l];
        }
    }

    let values = features.values();
    let embeddings = tokens.embeddings();
    for c in 0..c_count {
        let f_row = &values[c * n..(c + 1) * n];
        let gf_row = &mut grad_f[c * n..(c + 1) * n];
        for (l, gs_row) in grad_s.chunks(n).enumerate() {
            let t = embeddings[l * c_count + c];
            let mut acc = T::zero();
            for ((gf, &f), &gs) in gf_row.iter_mut().zip(f_row).zip(gs_row) {
                *gf = *gf + gs * t;
                acc = acc + gs * f;
            }
            grad_t[l * c_count + c] = grad_t[l * c_count + c] + acc;
        }
    }
}

/// Objective and its gradient with respect to features and tokens.
pub fn objective_with_gradients<T: Real>(
    batch: &[AlignmentSample<T>],
    cfg: &ObjectiveConfig<T>,
) -> Result<GradientBundle<T>> {
    let fwd = forward(batch, cfg, None)?;
    let b = T::from_usize_lossy(batch.len());
    let geo_scale = if fwd.mask_count > 0 {
        cfg.lambda_geo * cfg.gaco.beta / T::from_usize_lossy(fwd.mask_count)
    } else {
        T::zero()
    };

    let mut samples = Vec::with_capacity(batch.len());
    for (sample, im) in batch.iter().zip(&fwd.images) {
        let p_count = sample.prompts();

        // semantic branch: d total / d fused_down
        let mut g_down = vec![T::zero(); im.fused_down.values().len()];
        if cfg.lambda_sem > T::zero() {
            let dl = infonce_gradient(&im.semantic.logits, &sample.labels);
            let cells = im.fused_down.cells();
            for (p, sel) in im.semantic.selections.iter().enumerate() {
                let g = cfg.lambda_sem / b * dl[p] / T::from_usize_lossy(sel.k());
                for &i in sel.indices() {
                    g_down[p * cells + i] = g_down[p * cells + i] + g;
                }
            }
        }

        // geometry branch: d total / d fused_up
        let mut g_up = vec![T::zero(); im.fused_up.values().len()];
        if geo_scale > T::zero() {
            let g_logits: Vec<T> = gaco_logit_gradient(&im.geometry.probs, &im.geometry.advantage, &sample.masks)
                .into_iter()
                .map(|g| g * geo_scale)
                .collect();
            g_up = match &im.geometry.normalization {
                Some(norm) => normalize_sim_backward(&im.fused_up, norm, &g_logits),
                None => g_logits,
            };
        }

        let down = AlignmentMap::new(p_count, im.fused_down.height(), im.fused_down.width(), g_down)?;
        let up = AlignmentMap::new(p_count, im.fused_up.height(), im.fused_up.width(), g_up)?;
        let (d3, d4, d5) = fuse_down_backward(&down);
        let (u3, u4, u5) = fuse_up_backward(&up)?;
        let level_grads = [(d3, u3), (d4, u4), (d5, u5)];

        let mut grad_features: [Vec<T>; 3] =
            std::array::from_fn(|lvl| vec![T::zero(); sample.features[lvl].values().len()]);
        let mut grad_tokens: Vec<Vec<T>> =
            sample.tokens.iter().map(|t| vec![T::zero(); t.embeddings().len()]).collect();
        for (p, tokens) in sample.tokens.iter().enumerate() {
            for (lvl, (gd, gu)) in level_grads.iter().enumerate() {
                let grad_map: Vec<T> = gd.slice(p).iter().zip(gu.slice(p)).map(|(&a, &c)| a + c).collect();
                if grad_map.iter().all(|g| g.is_zero()) {
                    continue;
                }
                head_backward(
                    &sample.features[lvl],
                    tokens,
                    &im.similarities[p][lvl],
                    &im.posteriors[p][lvl],
                    &grad_map,
                    cfg.tau_t,
                    &mut grad_features[lvl],
                    &mut grad_tokens[p],
                );
            }
        }
        samples.push(SampleGradient { features: grad_features, tokens: grad_tokens });
    }
    Ok(GradientBundle { samples, losses: fwd.losses })
}

/// Features (P3, P4, P5) then tokens (prompt order) of every image, concatenated.
pub fn pack_parameters<T: Real>(batch: &[AlignmentSample<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for s in batch {
        for f in &s.features {
            out.extend_from_slice(f.values());
        }
        for t in &s.tokens {
            out.extend_from_slice(t.embeddings());
        }
    }
    out
}

/// Writes a vector produced by [`pack_parameters`] back into a batch.
pub fn unpack_parameters<T: Real>(batch: &mut [AlignmentSample<T>], params: &[T]) -> Result<()> {
    let expected: usize = batch
        .iter()
        .map(|s| {
            s.features.iter().map(|f| f.values().len()).sum::<usize>()
                + s.tokens.iter().map(|t| t.embeddings().len()).sum::<usize>()
        })
        .sum();
    if params.len() != expected {
        return dim(format!("parameter vector of length {} for {expected} parameters", params.len()));
    }
    let mut at = 0;
    for s in batch.iter_mut() {
        for f in s.features.iter_mut() {
            let n = f.values().len();
            f.values_mut().copy_from_slice(&params[at..at + n]);
            at += n;
        }
        for t in s.tokens.iter_mut() {
            let n = t.embeddings().len();
            t.embeddings_mut().copy_from_slice(&params[at..at + n]);
            at += n;
        }
    }
    Ok(())
}

/// Default central-difference step for `f64`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h` for every coordinate.
pub fn finite_difference_gradient<T: Real>(mut f: impl FnMut(&[T]) -> T, point: &[T], h: T) -> Vec<T> {
    let mut x = point.to_vec();
    let two_h = h + h;
    (0..point.len())
        .map(|j| {
            let orig = x[j];
            x[j] = orig + h;
            let up = f(&x);
            x[j] = orig - h;
            let down = f(&x);
            x[j] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Distances of a forward pass from the non-smooth boundaries of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularity<T> {
    /// Smallest gap between the k-th and (k+1)-th value of any prompt's coarse map.
    pub topk_margin: T,
    /// Smallest distance of a masked standardized score from `±c`.
    pub clip_distance: T,
    /// Smallest gap between the top two valid-token mean similarities.
    pub token_margin: T,
    /// Gap between the largest and second largest `|x|` of the fine map (rescaling only).
    pub peak_margin: T,
}

impl<T: Real> Regularity<T> {
    /// Every margin at least `margin`.
    pub fn is_regular(&self, margin: T) -> bool {
        self.topk_margin >= margin && self.clip_distance >= margin && self.token_margin >= margin && self.peak_margin >= margin
    }
}

pub fn regularity<T: Real>(fwd: &Forward<T>, batch: &[AlignmentSample<T>], cfg: &ObjectiveConfig<T>) -> Regularity<T> {
    let inf = T::infinity();
    let mut r = Regularity { topk_margin: inf, clip_distance: inf, token_margin: inf, peak_margin: inf };
    for (im, sample) in fwd.images.iter().zip(batch) {
        for (p, sel) in im.semantic.selections.iter().enumerate() {
            if let Some(m) = topk_margin(im.fused_down.slice(p), sel.k()) {
                r.topk_margin = r.topk_margin.min(m);
            }
        }
        for (j, &on) in sample.masks.values().iter().enumerate() {
            if on {
                let z = im.geometry.advantage.standardized()[j].abs();
                r.clip_distance = r.clip_distance.min((z - cfg.gaco.clip).abs());
            }
        }
        for (p, tokens) in sample.tokens.iter().enumerate() {
            for s in &im.similarities[p] {
                let mut means: Vec<T> = s
                    .spatial_means()
                    .into_iter()
                    .zip(tokens.valid())
                    .filter(|(_, &ok)| ok)
                    .map(|(m, _)| m)
                    .collect();
                if means.len() >= 2 {
                    means.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
                    r.token_margin = r.token_margin.min(means[0] - means[1]);
                }
            }
        }
        if im.geometry.normalization.is_some() {
            let mut mags: Vec<T> = im.fused_up.values().iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            if mags.len() >= 2 {
                r.peak_margin = r.peak_margin.min(mags[0] - mags[1]);
            }
        }
    }
    r
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T, floor: T) -> T {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst coordinate of an analytic-vs-central-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck<T> {
    pub coordinates: usize,
    pub max_relative_error: T,
    pub worst_coordinate: usize,
    pub analytic: T,
    pub numeric: T,
}

/// Compares [`objective_with_gradients`] with central differences of
/// [`objective_frozen`] (advantage held at the base point) on every parameter.
pub fn gradient_check<T: Real>(
    batch: &[AlignmentSample<T>],
    cfg: &ObjectiveConfig<T>,
    h: T,
    floor: T,
) -> Result<GradientCheck<T>> {
    gradient_check_with(batch, cfg, h, floor, |l| l.total)
}

/// [`gradient_check`] with the differenced scalar read from the loss breakdown by `value`.
pub fn gradient_check_with<T: Real>(
    batch: &[AlignmentSample<T>],
    cfg: &ObjectiveConfig<T>,
    h: T,
    floor: T,
    value: impl Fn(&LossBreakdown<T>) -> T,
) -> Result<GradientCheck<T>> {
    let fwd = forward(batch, cfg, None)?;
    let frozen = fwd.advantages();
    let analytic = objective_with_gradients(batch, cfg)?.flatten();
    let point = pack_parameters(batch);
    let mut scratch = batch.to_vec();
    let mut failure = None;
    let numeric = finite_difference_gradient(
        |x| {
            unpack_parameters(&mut scratch, x).expect("same layout");
            match objective_frozen(&scratch, cfg, &frozen) {
                Ok(l) => value(&l),
                Err(e) => {
                    failure.get_or_insert(e);
                    T::nan()
                }
            }
        },
        &point,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut out = GradientCheck {
        coordinates: point.len(),
        max_relative_error: T::zero(),
        worst_coordinate: 0,
        analytic: T::zero(),
        numeric: T::zero(),
    };
    for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n, floor);
        if !(e <= out.max_relative_error) {
            out = GradientCheck { max_relative_error: e, worst_coordinate: j, analytic: a, numeric: n, ..out };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad(x: &[f64]) -> f64 {
        x[0] * x[0]
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(quad, &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-7);
        let lin = |x: &[f64]| 2.5 * x[0] - 4.0 * x[1] + 1.0;
        let g = finite_difference_gradient(lin, &[0.3, -7.0], 1e-4);
        assert!((g[0] - 2.5).abs() < 1e-10);
        assert!((g[1] + 4.0).abs() < 1e-10);
    }

    fn tiny_sample(rng: &mut ChaCha8Rng, masked: bool) -> AlignmentSample<f64> {
        let c = 3;
        let mut feat = |s: u8, h: usize| {
            FeatureMap::new(s, c, h, h, (0..c * h * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let features = [feat(3, 4), feat(4, 2), feat(5, 1)];
        let tokens = (0..2)
            .map(|_| {
                TokenBatch::new(2, c, (0..2 * c).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![true, false])
                    .unwrap()
            })
            .collect();
        let mut masks = InstanceMaskSet::empty(2, 4, 4);
        if masked {
            for i in [0, 1, 4, 5] {
                masks.set(0, i, true);
            }
        }
        AlignmentSample::new(features, tokens, masks, PromptLabels::new(2, vec![0]).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_objective_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = vec![tiny_sample(&mut rng, true)];
        let cfg = ObjectiveConfig { lambda_sem: 0.0, lambda_geo: 0.0, ..ObjectiveConfig::default() };
        let out = objective_with_gradients(&batch, &cfg).unwrap();
        assert_eq!(out.losses.total, 0.0);
        assert!(out.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn default_weights_combine_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = vec![tiny_sample(&mut rng, true)];
        let l = objective(&batch, &ObjectiveConfig::default()).unwrap();
        assert_eq!(l.total, 0.5 * l.sem + 1.0 * l.geo);
    }

    #[test]
    fn pad_tokens_receive_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = vec![tiny_sample(&mut rng, true)];
        let out = objective_with_gradients(&batch, &ObjectiveConfig::default()).unwrap();
        for t in &out.samples[0].tokens {
            // token 1 is the pad
            assert!(t[3..].iter().all(|&g| g == 0.0));
            assert!(t[..3].iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn analytic_gradient_matches_frozen_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = vec![tiny_sample(&mut rng, true), tiny_sample(&mut rng, false)];
        let cfg = ObjectiveConfig::default();
        let fwd = forward(&batch, &cfg, None).unwrap();
        let frozen = fwd.advantages();
        let analytic = objective_with_gradients(&batch, &cfg).unwrap().flatten();
        let point = pack_parameters(&batch);
        let numeric = finite_difference_gradient(
            |x| {
                let mut b = batch.clone();
                unpack_parameters(&mut b, x).unwrap();
                objective_frozen(&b, &cfg, &frozen).unwrap().total
            },
            &point,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn sample_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = tiny_sample(&mut rng, false);
        let [a, b, c] = s.features().clone();
        let bad = AlignmentSample::new([a.clone(), c.clone(), b.clone()], s.tokens().to_vec(), s.masks().clone(), s.labels().clone());
        assert!(bad.is_err());
        let bad = AlignmentSample::new([a, b, c], s.tokens()[..1].to_vec(), s.masks().clone(), s.labels().clone());
        assert!(matches!(bad, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert!((relative_error(1.0_f64, 1.0 + 1e-6, 1e-8) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 1e-10, 1e-8), 1e-2);
    }
}
