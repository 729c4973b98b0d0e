//! Multiple-instance view of the alignment head.
//!
//! Each spatial location is an instance carrying its token-affinity vector; a
//! prompt is a bag. Instance scores are one shared linear functional (the
//! token posterior) applied to every instance, and the bag logit is a top-K
//! mean, so the whole map from bag to logit ignores instance order.

use crate::eah::{SimilarityTensor, TokenPosterior};
use crate::error::{dim, domain, Result};
use crate::scalar::{dot, masked_softmax, Real};
use crate::sem_loss::rank_descending;

/// Unordered instances of one bag plus the posterior used to score them.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag<T> {
    tokens: usize,
    instances: Vec<Vec<T>>,
    posterior: Vec<T>,
}

impl<T: Real> InstanceBag<T> {
    pub fn new(instances: Vec<Vec<T>>, posterior: &TokenPosterior<T>) -> Result<Self> {
        let tokens = posterior.len();
        if let Some(bad) = instances.iter().find(|v| v.len() != tokens) {
            return dim(format!("instance of length {} in a bag over {tokens} tokens", bad.len()));
        }
        Ok(Self { tokens, instances, posterior: posterior.weights().to_vec() })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn instances(&self) -> &[Vec<T>] {
        &self.instances
    }
    pub fn posterior(&self) -> &[T] {
        &self.posterior
    }
    pub fn len(&self) -> usize {
        self.instances.len()
    }
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Reorders instances; `order[j]` is the source index of new position `j`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            tokens: self.tokens,
            instances: order.iter().map(|&i| self.instances[i].clone()).collect(),
            posterior: self.posterior.clone(),
        }
    }
}

/// Row-major flattening of the similarity grid into `H * W` instances.
pub fn instance_vectors<T: Real>(s: &SimilarityTensor<T>, posterior: &TokenPosterior<T>) -> Result<InstanceBag<T>> {
    let instances = (0..s.cells()).map(|i| s.location(i).to_vec()).collect();
    InstanceBag::new(instances, posterior)
}

/// Inverse of [`instance_vectors`] for a known grid shape.
pub fn similarity_from_instances<T: Real>(bag: &InstanceBag<T>, height: usize, width: usize) -> Result<SimilarityTensor<T>> {
    if bag.len() != height * width {
        return dim(format!("{} instances cannot fill a {height}x{width} grid", bag.len()));
    }
    let values = bag.instances.iter().flatten().copied().collect();
    SimilarityTensor::new(height, width, bag.tokens, values)
}

/// Posterior computed from the bag alone: softmax of per-token instance means.
pub fn bag_posterior<T: Real>(instances: &[Vec<T>], valid: &[bool], tau_t: T) -> Result<TokenPosterior<T>> {
    if instances.is_empty() {
        return domain("cannot form a posterior from an empty bag");
    }
    if !(tau_t > T::zero()) {
        return domain("token temperature must be positive");
    }
    let l = valid.len();
    let mut means = vec![T::zero(); l];
    for v in instances {
        if v.len() != l {
            return dim("instance length disagrees with the validity mask");
        }
        for (m, &x) in means.iter_mut().zip(v) {
            *m = *m + x;
        }
    }
    let n = T::from_usize_lossy(instances.len());
    let means: Vec<T> = means.into_iter().map(|m| m / n).collect();
    match masked_softmax(&means, valid, tau_t) {
        Some(w) => TokenPosterior::from_weights(w, tau_t),
        None => domain("no valid token"),
    }
}

/// `S~(i) = pi . v_i` for every instance.
pub fn mil_score<T: Real>(bag: &InstanceBag<T>) -> Vec<T> {
    bag.instances.iter().map(|v| dot(&bag.posterior, v)).collect()
}

/// Mean of the `k` largest scores, ties resolved toward lower index.
pub fn bag_logit<T: Real>(scores: &[T], k: usize) -> Result<T> {
    if k == 0 || k > scores.len() {
        return domain(format!("top-k size {k} outside [1, {}]", scores.len()));
    }
    let order = rank_descending(scores);
    // summing in descending-value order keeps the result independent of instance order
    let sum: T = order[..k].iter().map(|&i| scores[i]).sum();
    Ok(sum / T::from_usize_lossy(k))
}
