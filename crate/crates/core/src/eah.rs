//! Expectation Alignment Head.
//!
//! For one prompt at one pyramid scale: token/region inner products, a token
//! posterior built from spatially averaged evidence, and the expectation of
//! the similarity field under that posterior (the alignment map).

use crate::error::{dim, domain, Result};
use crate::scalar::{masked_softmax, Real};

/// Dense visual features of one image at one pyramid level, stored
/// channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    scale: u8,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(scale: u8, channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if !(3..=5).contains(&scale) {
            return domain(format!("pyramid scale must be 3, 4 or 5, got {scale}"));
        }
        if channels == 0 || height == 0 || width == 0 {
            return dim("feature map dimensions must be positive");
        }
        if values.len() != channels * height * width {
            return dim(format!(
                "feature map expects {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("feature map contains non-finite values");
        }
        Ok(Self { scale, channels, height, width, values })
    }

    pub fn zeros(scale: u8, channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(scale, channels, height, width, vec![T::zero(); channels * height * width])
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }
    pub fn channels(&self) -> usize {
        self.channels
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
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Mutable access for in-place perturbation. Callers must keep values finite.
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> T {
        self.values[(c * self.height + x) * self.width + y]
    }
}

/// The `L` token embeddings of one prompt plus the pad mask (`true` = real token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    count: usize,
    channels: usize,
    embeddings: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> TokenBatch<T> {
    pub fn new(count: usize, channels: usize, embeddings: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if count == 0 || channels == 0 {
            return dim("token batch dimensions must be positive");
        }
        if embeddings.len() != count * channels {
            return dim(format!(
                "token batch expects {} embedding values, got {}",
                count * channels,
                embeddings.len()
            ));
        }
        if valid.len() != count {
            return dim(format!("validity mask has length {}, expected {count}", valid.len()));
        }
        if !valid.iter().any(|&v| v) {
            return domain("token batch has no valid token");
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return domain("token embeddings contain non-finite values");
        }
        Ok(Self { count, channels, embeddings, valid })
    }

    /// All tokens valid.
    pub fn dense(count: usize, channels: usize, embeddings: Vec<T>) -> Result<Self> {
        Self::new(count, channels, embeddings, vec![true; count])
    }

    pub fn count(&self) -> usize {
        self.count
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn embeddings(&self) -> &[T] {
        &self.embeddings
    }
    pub fn embeddings_mut(&mut self) -> &mut [T] {
        &mut self.embeddings
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
    pub fn token(&self, l: usize) -> &[T] {
        &self.embeddings[l * self.channels..(l + 1) * self.channels]
    }
}

/// Token-wise similarity field, `H x W x L`, token index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor<T> {
    height: usize,
    width: usize,
    tokens: usize,
    values: Vec<T>,
}

impl<T: Real> SimilarityTensor<T> {
    pub fn new(height: usize, width: usize, tokens: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * tokens {
            return dim(format!(
                "similarity tensor expects {} values, got {}",
                height * width * tokens,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("similarity tensor contains non-finite values");
        }
        Ok(Self { height, width, tokens, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, l: usize) -> T {
        self.values[(x * self.width + y) * self.tokens + l]
    }

    /// Token-affinity vector of the flat (row-major) location `i`.
    pub fn location(&self, i: usize) -> &[T] {
        &self.values[i * self.tokens..(i + 1) * self.tokens]
    }

    /// Spatial mean of each token's field, over every location.
    pub fn spatial_means(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.tokens];
        for loc in self.values.chunks_exact(self.tokens) {
            for (a, &v) in acc.iter_mut().zip(loc) {
                *a = *a + v;
            }
        }
        let n = T::from_usize_lossy(self.cells());
        acc.into_iter().map(|a| a / n).collect()
    }
}

/// Simplex weights over a prompt's tokens; pad tokens carry exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPosterior<T> {
    weights: Vec<T>,
    temperature: T,
}

impl<T: Real> TokenPosterior<T> {
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    pub fn temperature(&self) -> T {
        self.temperature
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Builds a posterior from explicit weights (used by the MIL view and tests).
    pub fn from_weights(weights: Vec<T>, temperature: T) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return domain("posterior weights must be finite and nonnegative");
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return domain(format!("posterior weights sum to {total}, expected 1"));
        }
        Ok(Self { weights, temperature })
    }
}

/// Per-prompt spatial score grids at one resolution, `P x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap<T> {
    prompts: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> AlignmentMap<T> {
    pub fn new(prompts: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if prompts == 0 || height == 0 || width == 0 {
            return dim("alignment map dimensions must be positive");
        }
        if values.len() != prompts * height * width {
            return dim(format!(
                "alignment map expects {} values for {prompts}x{height}x{width}, got {}",
                prompts * height * width,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("alignment map contains non-finite values");
        }
        Ok(Self { prompts, height, width, values })
    }

    pub fn constant(prompts: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(prompts, height, width, vec![value; prompts * height * width])
    }

    /// Stacks single-or-multi prompt maps of equal resolution along the prompt axis.
    pub fn stack(maps: &[AlignmentMap<T>]) -> Result<Self> {
        let first = match maps.first() {
            Some(m) => m,
            None => return dim("cannot stack zero alignment maps"),
        };
        let mut values = Vec::with_capacity(maps.iter().map(|m| m.values.len()).sum());
        let mut prompts = 0;
        for m in maps {
            if m.height != first.height || m.width != first.width {
                return dim("stacked alignment maps differ in resolution");
            }
            prompts += m.prompts;
            values.extend_from_slice(&m.values);
        }
        Self::new(prompts, first.height, first.width, values)
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
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Row-major grid of prompt `p`.
    pub fn slice(&self, p: usize) -> &[T] {
        let n = self.cells();
        &self.values[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn at(&self, p: usize, x: usize, y: usize) -> T {
        self.values[(p * self.height + x) * self.width + y]
    }

    pub(crate) fn from_raw(prompts: usize, height: usize, width: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), prompts * height * width);
        Self { prompts, height, width, values }
    }

    /// Elementwise map, shape preserved.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.prompts, self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// `S(x,y,l) = <F(:,x,y), T(l,:)>` for every token, pads included.
pub fn token_similarity<T: Real>(features: &FeatureMap<T>, tokens: &TokenBatch<T>) -> Result<SimilarityTensor<T>> {
    if features.channels != tokens.channels {
        return dim(format!(
            "feature map has {} channels but tokens have {}",
            features.channels, tokens.channels
        ));
    }
    let (h, w, l_count) = (features.height, features.width, tokens.count);
    let plane = h * w;
    let mut row = vec![T::zero(); plane];
    let mut values = vec![T::zero(); plane * l_count];
    for l in 0..l_count {
        row.iter_mut().for_each(|v| *v = T::zero());
        for (c, &t) in tokens.token(l).iter().enumerate() {
            for (acc, &f) in row.iter_mut().zip(&features.values[c * plane..(c + 1) * plane]) {
                *acc = *acc + f * t;
            }
        }
        for (i, &v) in row.iter().enumerate() {
            values[i * l_count + l] = v;
        }
    }
    SimilarityTensor::new(h, w, l_count, values)
}

/// Softmax over valid tokens of the spatially averaged similarity divided by `tau_t`.
pub fn token_posterior<T: Real>(s: &SimilarityTensor<T>, valid: &[bool], tau_t: T) -> Result<TokenPosterior<T>> {
    if valid.len() != s.tokens {
        return dim(format!("validity mask has length {}, tensor has {} tokens", valid.len(), s.tokens));
    }
    if !(tau_t > T::zero()) || !tau_t.is_finite() {
        return domain(format!("token temperature must be positive and finite, got {tau_t}"));
    }
    let means = s.spatial_means();
    match masked_softmax(&means, valid, tau_t) {
        Some(weights) => Ok(TokenPosterior { weights, temperature: tau_t }),
        None => domain("no valid token to build a posterior over"),
    }
}

/// `S~(x,y) = sum_l pi(l) S(x,y,l)`, returned as a one-prompt alignment map.
pub fn expectation_map<T: Real>(s: &SimilarityTensor<T>, posterior: &TokenPosterior<T>) -> Result<AlignmentMap<T>> {
    if posterior.len() != s.tokens {
        return dim(format!("posterior has {} weights, tensor has {} tokens", posterior.len(), s.tokens));
    }
    let values = s
        .values
        .chunks_exact(s.tokens)
        .map(|loc| {
            loc.iter()
                .zip(&posterior.weights)
                .fold(T::zero(), |acc, (&v, &w)| acc + w * v)
        })
        .collect();
    AlignmentMap::new(1, s.height, s.width, values)
}

/// The three head steps for one prompt at one scale.
pub fn expectation_alignment<T: Real>(
    features: &FeatureMap<T>,
    tokens: &TokenBatch<T>,
    tau_t: T,
) -> Result<(SimilarityTensor<T>, TokenPosterior<T>, AlignmentMap<T>)> {
    let s = token_similarity(features, tokens)?;
    let pi = token_posterior(&s, &tokens.valid, tau_t)?;
    let map = expectation_map(&s, &pi)?;
    Ok((s, pi, map))
}
