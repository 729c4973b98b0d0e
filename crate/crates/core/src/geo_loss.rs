//! Geometry-aware consistency objective (GACO).
//!
//! The fine fused map is optionally rescaled into (-1, 1), turned into a joint
//! softmax over every (prompt, location) pair and into a sigmoid confidence.
//! Confidence is standardized inside each prompt's mask and clipped to give an
//! advantage, and the loss is the advantage-weighted negative log-likelihood
//! over masked pairs. The advantage is a constant with respect to gradients.

use serde::{Deserialize, Serialize};

use crate::eah::AlignmentMap;
use crate::error::{dim, domain, Result};
use crate::scalar::{log_sum_exp, sigmoid, Real};

/// Binary masks per prompt at P3 resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMaskSet {
    prompts: usize,
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl InstanceMaskSet {
    pub fn new(prompts: usize, height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != prompts * height * width {
            return dim(format!(
                "mask set expects {} entries for {prompts}x{height}x{width}, got {}",
                prompts * height * width,
                values.len()
            ));
        }
        Ok(Self { prompts, height, width, values })
    }

    /// Parses 0/1 integers; anything else is rejected.
    pub fn from_binary(prompts: usize, height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if let Some(bad) = raw.iter().find(|&&v| v > 1) {
            return domain(format!("mask values must be 0 or 1, found {bad}"));
        }
        Self::new(prompts, height, width, raw.iter().map(|&v| v == 1).collect())
    }

    pub fn empty(prompts: usize, height: usize, width: usize) -> Self {
        Self { prompts, height, width, values: vec![false; prompts * height * width] }
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn contains(&self, p: usize, i: usize) -> bool {
        self.values[p * self.cells() + i]
    }

    pub fn set(&mut self, p: usize, i: usize, on: bool) {
        let n = self.cells();
        self.values[p * n + i] = on;
    }

    /// Flat indices of prompt `p`'s positive region, ascending.
    pub fn region(&self, p: usize) -> Vec<usize> {
        let n = self.cells();
        (0..n).filter(|&i| self.values[p * n + i]).collect()
    }

    pub fn area(&self, p: usize) -> usize {
        let n = self.cells();
        self.values[p * n..(p + 1) * n].iter().filter(|&&v| v).count()
    }

    pub fn total_area(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Spread estimator used for the intra-mask standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdVariant {
    /// `sqrt(population variance + eps)`.
    #[default]
    Population,
    /// `sample std + eps`, the reference pseudocode's form. A single-element
    /// region has sample std 0.
    SampleStdPlusEps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GacoConfig<T> {
    /// Advantage clip bound `c`.
    pub clip: T,
    pub eps: T,
    /// Rescale the fused map by `1 / (max |x| + eps)` before softmax and sigmoid.
    pub normalize: bool,
    pub std_variant: StdVariant,
    /// Final multiplier. The full objective keeps this at 1 and applies its own weight.
    pub beta: T,
}

impl<T: Real> Default for GacoConfig<T> {
    fn default() -> Self {
        Self {
            clip: T::lit(3.0),
            eps: T::lit(1e-6),
            normalize: true,
            std_variant: StdVariant::Population,
            beta: T::one(),
        }
    }
}

impl<T: Real> GacoConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > T::zero()) || !self.clip.is_finite() {
            return domain(format!("advantage clip must be positive and finite, got {}", self.clip));
        }
        if !(self.eps > T::zero()) || !self.eps.is_finite() {
            return domain(format!("stabilizer eps must be positive and finite, got {}", self.eps));
        }
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return domain(format!("beta must be nonnegative, got {}", self.beta));
        }
        Ok(())
    }
}

/// Result of [`normalize_sim`]: the rescaled map plus what is needed to differentiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSim<T> {
    pub map: AlignmentMap<T>,
    /// `max |x| + eps`.
    pub divisor: T,
    /// Flat index of the largest `|x|` (first on ties).
    pub argmax: usize,
}

/// `x / (max |x| + eps)` over every prompt and location of one image.
pub fn normalize_sim<T: Real>(m: &AlignmentMap<T>, eps: T) -> Result<NormalizedSim<T>> {
    if !(eps >= T::zero()) {
        return domain("eps must be nonnegative");
    }
    let (argmax, peak) = m
        .values()
        .iter()
        .enumerate()
        .fold((0, T::zero()), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    let divisor = peak + eps;
    let map = if divisor > T::zero() {
        m.map(|v| v / divisor)?
    } else {
        m.clone()
    };
    Ok(NormalizedSim { map, divisor, argmax })
}

/// Joint distribution over every (prompt, location) pair of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistribution<T> {
    prompts: usize,
    height: usize,
    width: usize,
    log_probs: Vec<T>,
}

impl<T: Real> PairDistribution<T> {
    pub fn prompts(&self) -> usize {
        self.prompts
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }
    pub fn prob(&self, p: usize, i: usize) -> T {
        self.log_probs[p * self.cells() + i].exp()
    }
    pub fn probs(&self) -> Vec<T> {
        self.log_probs.iter().map(|&l| l.exp()).collect()
    }
}

/// `P(p,i) = exp(m(p,i)) / sum exp(m)`, evaluated through a log-sum-exp.
pub fn joint_softmax<T: Real>(m: &AlignmentMap<T>) -> PairDistribution<T> {
    let lse = log_sum_exp(m.values());
    PairDistribution {
        prompts: m.prompts(),
        height: m.height(),
        width: m.width(),
        log_probs: m.values().iter().map(|&v| v - lse).collect(),
    }
}

/// `R = sigmoid(m)` elementwise.
pub fn confidence<T: Real>(m: &AlignmentMap<T>) -> AlignmentMap<T> {
    AlignmentMap::from_raw(m.prompts(), m.height(), m.width(), m.values().iter().map(|&v| sigmoid(v)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats<T> {
    pub mean: T,
    pub std: T,
}

/// Mean and stabilized spread of `values`. `None` for an empty region, which
/// callers treat as "skip this prompt".
pub fn region_stats<T: Real>(values: &[T], eps: T, variant: StdVariant) -> Option<RegionStats<T>> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let std = match variant {
        StdVariant::Population => (ss / T::from_usize_lossy(n) + eps).sqrt(),
        StdVariant::SampleStdPlusEps => {
            let sample = if n > 1 { (ss / T::from_usize_lossy(n - 1)).sqrt() } else { T::zero() };
            sample + eps
        }
    };
    Some(RegionStats { mean, std })
}

/// `clip((R - mu) / sigma, -c, c)` for each value.
pub fn advantage<T: Real>(values: &[T], stats: RegionStats<T>, clip: T) -> Vec<T> {
    values
        .iter()
        .map(|&r| ((r - stats.mean) / stats.std).max(-clip).min(clip))
        .collect()
}

/// Advantage of every (prompt, location); zero outside the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageField<T> {
    prompts: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
    /// Unclipped standardized scores, kept to test distance from the clip boundary.
    standardized: Vec<T>,
}

impl<T: Real> AdvantageField<T> {
    /// Advantages supplied directly (zero where unmasked is the caller's job).
    pub fn from_values(prompts: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != prompts * height * width {
            return dim("advantage field size mismatch");
        }
        Ok(Self { prompts, height, width, standardized: values.clone(), values })
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn standardized(&self) -> &[T] {
        &self.standardized
    }
    pub fn at(&self, p: usize, i: usize) -> T {
        self.values[p * self.height * self.width + i]
    }
}

/// Per-region standardized, clipped confidence.
pub fn advantage_field<T: Real>(
    confidence: &AlignmentMap<T>,
    masks: &InstanceMaskSet,
    cfg: &GacoConfig<T>,
) -> Result<AdvantageField<T>> {
    if confidence.prompts() != masks.prompts()
        || confidence.height() != masks.height()
        || confidence.width() != masks.width()
    {
        return dim(format!(
            "confidence map {}x{}x{} does not match masks {}x{}x{}",
            confidence.prompts(),
            confidence.height(),
            confidence.width(),
            masks.prompts(),
            masks.height(),
            masks.width()
        ));
    }
    let n = confidence.cells();
    let mut values = vec![T::zero(); confidence.values().len()];
    let mut standardized = vec![T::zero(); values.len()];
    for p in 0..masks.prompts() {
        let region = masks.region(p);
        let r: Vec<T> = region.iter().map(|&i| confidence.slice(p)[i]).collect();
        let Some(stats) = region_stats(&r, cfg.eps, cfg.std_variant) else {
            continue;
        };
        for (&i, &ri) in region.iter().zip(&r) {
            let z = (ri - stats.mean) / stats.std;
            standardized[p * n + i] = z;
            values[p * n + i] = z.max(-cfg.clip).min(cfg.clip);
        }
    }
    Ok(AdvantageField {
        prompts: confidence.prompts(),
        height: confidence.height(),
        width: confidence.width(),
        values,
        standardized,
    })
}

/// One image's contribution to the geometry loss.
#[derive(Debug, Clone, Copy)]
pub struct GacoImage<'a, T> {
    pub probs: &'a PairDistribution<T>,
    pub advantage: &'a AdvantageField<T>,
    pub masks: &'a InstanceMaskSet,
}

/// Batch sums behind the loss: `sum A log P` over masked pairs and the masked count.
pub fn gaco_sums<T: Real>(images: &[GacoImage<'_, T>]) -> (T, usize) {
    let mut weighted = T::zero();
    let mut denom = 0usize;
    for img in images {
        for (j, &on) in img.masks.values().iter().enumerate() {
            if on {
                weighted = weighted + img.advantage.values[j] * img.probs.log_probs[j];
                denom += 1;
            }
        }
    }
    (weighted, denom)
}

/// `-(1 / sum |M|) sum A log P` over the batch; zero when nothing is masked.
pub fn gaco_loss<T: Real>(images: &[GacoImage<'_, T>], beta: T) -> T {
    let (weighted, denom) = gaco_sums(images);
    if denom == 0 {
        return T::zero();
    }
    beta * (-weighted / T::from_usize_lossy(denom))
}

/// Everything the geometry branch computes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryForward<T> {
    /// Present when rescaling is enabled.
    pub normalization: Option<NormalizedSim<T>>,
    pub probs: PairDistribution<T>,
    pub confidence: AlignmentMap<T>,
    pub advantage: AdvantageField<T>,
}

impl<T: Real> GeometryForward<T> {
    /// Logits fed to the softmax and sigmoid.
    pub fn logits<'a>(&'a self, fused_up: &'a AlignmentMap<T>) -> &'a AlignmentMap<T> {
        self.normalization.as_ref().map_or(fused_up, |n| &n.map)
    }
}

/// Runs the geometry branch on one image's fine fused map. `frozen_advantage`
/// replaces the computed advantage (used to evaluate the detached surrogate).
pub fn geometry_forward<T: Real>(
    fused_up: &AlignmentMap<T>,
    masks: &InstanceMaskSet,
    cfg: &GacoConfig<T>,
    frozen_advantage: Option<&AdvantageField<T>>,
) -> Result<GeometryForward<T>> {
    cfg.validate()?;
    let normalization = if cfg.normalize { Some(normalize_sim(fused_up, cfg.eps)?) } else { None };
    let logits = normalization.as_ref().map_or(fused_up, |n| &n.map);
    let probs = joint_softmax(logits);
    let conf = confidence(logits);
    let advantage = match frozen_advantage {
        Some(a) => a.clone(),
        None => advantage_field(&conf, masks, cfg)?,
    };
    Ok(GeometryForward { normalization, probs, confidence: conf, advantage })
}

/// Gradient of `-(sum A log P)` for one image with respect to its softmax
/// logits, before division by the batch mask count: `-(A [masked] - P sum A)`.
pub fn gaco_logit_gradient<T: Real>(
    probs: &PairDistribution<T>,
    advantage: &AdvantageField<T>,
    masks: &InstanceMaskSet,
) -> Vec<T> {
    let total_adv: T = masks
        .values()
        .iter()
        .zip(&advantage.values)
        .filter(|(&on, _)| on)
        .map(|(_, &a)| a)
        .sum();
    probs
        .log_probs
        .iter()
        .zip(masks.values())
        .zip(&advantage.values)
        .map(|((&lp, &on), &a)| {
            let direct = if on { a } else { T::zero() };
            lp.exp() * total_adv - direct
        })
        .collect()
}

/// Pulls a gradient on the rescaled map back to the raw map, including the
/// dependence of the divisor on the peak magnitude.
pub fn normalize_sim_backward<T: Real>(raw: &AlignmentMap<T>, norm: &NormalizedSim<T>, grad: &[T]) -> Vec<T> {
    let d = norm.divisor;
    let mut out: Vec<T> = grad.iter().map(|&g| g / d).collect();
    let through_divisor: T = grad
        .iter()
        .zip(raw.values())
        .map(|(&g, &x)| -g * x / (d * d))
        .sum();
    let peak = raw.values()[norm.argmax];
    let sign = if peak > T::zero() {
        T::one()
    } else if peak < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    out[norm.argmax] = out[norm.argmax] + through_divisor * sign;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(p: usize, h: usize, w: usize, v: Vec<f64>) -> AlignmentMap<f64> {
        AlignmentMap::new(p, h, w, v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let z = normalize_sim(&map(1, 1, 2, vec![0.0, 0.0]), 1e-6).unwrap();
        assert_eq!(z.map.values(), &[0.0, 0.0]);

        let n = normalize_sim(&map(1, 1, 2, vec![-2.0, 1.0]), 0.0).unwrap();
        assert_eq!(n.map.values(), &[-1.0, 0.5]);
        let n = normalize_sim(&map(1, 1, 2, vec![-2.0, 1.0]), 1e-6).unwrap();
        assert!((n.map.values()[0] + 1.0).abs() < 1e-6);
        assert!((n.map.values()[1] - 0.5).abs() < 1e-6);
        assert_eq!(n.argmax, 0);

        let v = 0.3;
        let n = normalize_sim(&map(1, 1, 1, vec![v]), 1e-6).unwrap();
        assert!(n.map.values()[0] < 1.0);
        assert!((n.map.values()[0] - v / (v + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn joint_softmax_examples() {
        let p = joint_softmax(&map(2, 2, 2, vec![0.4; 8]));
        for q in p.probs() {
            assert!((q - 0.125).abs() < 1e-15);
        }
        let mut v = vec![0.0; 8];
        v[5] = 50.0;
        let p = joint_softmax(&map(2, 2, 2, v));
        assert!(p.prob(1, 1) > 1.0 - 1e-15);
        let p = joint_softmax(&map(1, 1, 2, vec![0.0, 3f64.ln()]));
        assert!((p.prob(0, 0) - 0.25).abs() < 1e-15);
        assert!((p.prob(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn confidence_examples() {
        let r = confidence(&map(1, 1, 4, vec![0.0, 60.0, -60.0, 3f64.ln()]));
        assert_eq!(r.values()[0], 0.5);
        assert!(r.values()[1] > 1.0 - 1e-15 && r.values()[1] <= 1.0);
        assert!(r.values()[2] < 1e-20 && r.values()[2] >= 0.0);
        assert!((r.values()[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn region_stats_examples() {
        let eps = 1e-6_f64;
        let s = region_stats(&[0.3, 0.3, 0.3], eps, StdVariant::Population).unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert!((s.std - eps.sqrt()).abs() < 1e-12);

        let s = region_stats(&[0.2_f64, 0.4, 0.6], 0.0, StdVariant::Population).unwrap();
        assert!((s.mean - 0.4).abs() < 1e-15);
        assert!((s.std - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std - 0.163299).abs() < 1e-6);

        let s = region_stats(&[0.9], eps, StdVariant::Population).unwrap();
        assert_eq!(s.mean, 0.9);
        assert!((s.std - eps.sqrt()).abs() < 1e-15);

        assert!(region_stats::<f64>(&[], eps, StdVariant::Population).is_none());

        let s = region_stats(&[0.2, 0.4, 0.6], eps, StdVariant::SampleStdPlusEps).unwrap();
        assert!((s.std - (0.2 + eps)).abs() < 1e-12);
        let s = region_stats(&[0.9], eps, StdVariant::SampleStdPlusEps).unwrap();
        assert_eq!(s.std, eps);
    }

    #[test]
    fn advantage_examples() {
        let stats = RegionStats { mean: 0.5, std: 0.1 };
        assert_eq!(advantage(&[0.5, 0.5], stats, 3.0), vec![0.0, 0.0]);
        assert_eq!(advantage(&[1.5], stats, 3.0), vec![3.0]);

        let r = [0.2, 0.4, 0.6];
        let s = region_stats(&r, 0.0, StdVariant::Population).unwrap();
        let a = advantage(&r, s, 3.0);
        let expect = 1.5f64.sqrt();
        assert!((a[0] + expect).abs() < 1e-12);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - expect).abs() < 1e-12);
        assert!((a[2] - 1.224745).abs() < 1e-6);
    }

    #[test]
    fn worked_chain_example() {
        // P = 1, 1x2 grid, mask on both cells, logits [0, ln 3], eps tiny.
        let cfg = GacoConfig { eps: 1e-12, normalize: false, ..GacoConfig::default() };
        let masks = InstanceMaskSet::new(1, 1, 2, vec![true, true]).unwrap();
        let up = map(1, 1, 2, vec![0.0, 3f64.ln()]);
        let g = geometry_forward(&up, &masks, &cfg, None).unwrap();
        assert!((g.probs.prob(0, 1) - 0.75).abs() < 1e-15);
        assert!((g.advantage.values()[0] + 1.0).abs() < 1e-9);
        assert!((g.advantage.values()[1] - 1.0).abs() < 1e-9);
        let img = GacoImage { probs: &g.probs, advantage: &g.advantage, masks: &masks };
        let loss = gaco_loss(&[img], 1.0);
        let expect = -0.5 * (-(0.25f64.ln()) + 0.75f64.ln());
        assert!((loss - expect).abs() < 1e-9);
        assert!((loss + 0.549306).abs() < 1e-5);
    }

    #[test]
    fn degenerate_cases_give_zero() {
        let up = map(2, 2, 2, vec![0.1, -0.4, 0.9, 0.2, 0.0, 0.3, -0.7, 0.5]);
        let empty = InstanceMaskSet::empty(2, 2, 2);
        let cfg = GacoConfig::default();
        let g = geometry_forward(&up, &empty, &cfg, None).unwrap();
        let img = GacoImage { probs: &g.probs, advantage: &g.advantage, masks: &empty };
        assert_eq!(gaco_loss(&[img], 1.0), 0.0);

        let masks = InstanceMaskSet::new(2, 2, 2, vec![true; 8]).unwrap();
        let zero_a = AdvantageField::from_values(2, 2, 2, vec![0.0; 8]).unwrap();
        let img = GacoImage { probs: &g.probs, advantage: &zero_a, masks: &masks };
        assert_eq!(gaco_loss(&[img], 1.0), 0.0);
    }

    #[test]
    fn empty_prompt_region_is_skipped() {
        let up = map(2, 1, 3, vec![0.1, 0.5, -0.2, 0.8, 0.3, 0.0]);
        let mut masks = InstanceMaskSet::empty(2, 1, 3);
        masks.set(1, 0, true);
        masks.set(1, 2, true);
        let g = geometry_forward(&up, &masks, &GacoConfig::default(), None).unwrap();
        assert!(g.advantage.values()[..3].iter().all(|&a| a == 0.0));
        let img = GacoImage { probs: &g.probs, advantage: &g.advantage, masks: &masks };
        let (_, denom) = gaco_sums(&[img]);
        assert_eq!(denom, 2);
    }

    #[test]
    fn mask_values_must_be_binary() {
        assert!(InstanceMaskSet::from_binary(1, 1, 2, &[0, 2]).is_err());
        assert_eq!(InstanceMaskSet::from_binary(1, 1, 2, &[0, 1]).unwrap().region(0), vec![1]);
        assert!(InstanceMaskSet::new(1, 2, 2, vec![true]).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = GacoConfig { clip: 0.0, ..GacoConfig::<f64>::default() };
        assert!(bad.validate().is_err());
        let bad = GacoConfig { eps: -1.0, ..GacoConfig::<f64>::default() };
        assert!(bad.validate().is_err());
        assert!(GacoConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn single_positive_advantage_sign_property() {
        // One nonzero advantage at pair (0, 1); dL/dz there is -A (1 - P) / |M|.
        let up = map(1, 2, 2, vec![0.2, -0.1, 0.4, 0.05]);
        let masks = InstanceMaskSet::new(1, 2, 2, vec![true, true, true, false]).unwrap();
        let adv = AdvantageField::from_values(1, 2, 2, vec![0.0, 1.3, 0.0, 0.0]).unwrap();
        let loss_at = |v: &[f64]| {
            let probs = joint_softmax(&map(1, 2, 2, v.to_vec()));
            gaco_loss(&[GacoImage { probs: &probs, advantage: &adv, masks: &masks }], 1.0)
        };
        let h = 1e-5;
        let mut plus = up.values().to_vec();
        plus[1] += h;
        let mut minus = up.values().to_vec();
        minus[1] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let p = joint_softmax(&up).prob(0, 1);
        let analytic = -1.3 * (1.0 - p) / 3.0;
        assert!(analytic < 0.0);
        assert!((fd - analytic).abs() < 1e-9);
        let grad = gaco_logit_gradient(&joint_softmax(&up), &adv, &masks);
        assert!((grad[1] / 3.0 - analytic).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_matches_difference_quotient() {
        let raw = map(1, 2, 3, vec![0.3, -1.7, 0.9, 1.1, -0.2, 0.6]);
        let w = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let f = |v: &[f64]| -> f64 {
            let n = normalize_sim(&map(1, 2, 3, v.to_vec()), 1e-3).unwrap();
            n.map.values().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let norm = normalize_sim(&raw, 1e-3).unwrap();
        let g = normalize_sim_backward(&raw, &norm, &w);
        for j in 0..6 {
            let h = 1e-6;
            let mut a = raw.values().to_vec();
            a[j] += h;
            let mut b = raw.values().to_vec();
            b[j] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8, "j={j}");
        }
    }
}
