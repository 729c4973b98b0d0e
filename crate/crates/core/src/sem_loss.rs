//! Top-K pooled prompt logits and the multi-positive InfoNCE objective.

use std::cmp::Ordering;

use crate::eah::AlignmentMap;
use crate::error::{dim, domain, Result};
use crate::scalar::{log_sum_exp, softmax, Real};

/// Which prompts of an image are positives. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLabels {
    total: usize,
    positives: Vec<usize>,
}

impl PromptLabels {
    pub fn new(total: usize, mut positives: Vec<usize>) -> Result<Self> {
        positives.sort_unstable();
        positives.dedup();
        if positives.is_empty() {
            return domain("an image needs at least one positive prompt");
        }
        if let Some(&bad) = positives.iter().find(|&&p| p >= total) {
            return domain(format!("positive prompt {bad} out of range for {total} prompts"));
        }
        Ok(Self { total, positives })
    }

    pub fn total(&self) -> usize {
        self.total
    }
    pub fn positives(&self) -> &[usize] {
        &self.positives
    }
    pub fn is_positive(&self, p: usize) -> bool {
        self.positives.binary_search(&p).is_ok()
    }
}

/// Flat indices of the `k` largest cells of one prompt's map, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSelection {
    indices: Vec<usize>,
}

impl TopKSelection {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Per-prompt pooled logits and the contrastive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLogits<T> {
    values: Vec<T>,
    temperature: T,
}

impl<T: Real> PooledLogits<T> {
    pub fn new(values: Vec<T>, temperature: T) -> Result<Self> {
        if values.is_empty() {
            return dim("pooled logits must be nonempty");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("pooled logits must be finite");
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return domain(format!("contrastive temperature must be positive, got {temperature}"));
        }
        Ok(Self { values, temperature })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn temperature(&self) -> T {
        self.temperature
    }
}

/// `clamp(floor(H3 W3 percent / 100), 1, n_cells)`; the default percent is 1.
pub fn topk_budget_percent(h3: usize, w3: usize, n_cells: usize, percent: f64) -> usize {
    let raw = ((h3 * w3) as f64 * percent / 100.0).floor();
    let raw = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    raw.clamp(1, n_cells.max(1))
}

/// Budget for the top-1% rule, computed in integers.
pub fn topk_budget(h3: usize, w3: usize, n_cells: usize) -> usize {
    (h3 * w3 / 100).clamp(1, n_cells.max(1))
}

/// Row-major indices ordered by value descending, ties by lowest index.
pub fn rank_descending<T: Real>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn topk_select<T: Real>(values: &[T], k: usize) -> Result<TopKSelection> {
    if k == 0 || k > values.len() {
        return domain(format!("top-k size {k} outside [1, {}]", values.len()));
    }
    let mut indices = rank_descending(values);
    indices.truncate(k);
    indices.sort_unstable();
    Ok(TopKSelection { indices })
}

/// Gap between the k-th and (k+1)-th largest values; `None` when k covers everything.
pub fn topk_margin<T: Real>(values: &[T], k: usize) -> Option<T> {
    if k == 0 || k >= values.len() {
        return None;
    }
    let order = rank_descending(values);
    Some(values[order[k - 1]] - values[order[k]])
}

pub fn pooled_logit<T: Real>(values: &[T], sel: &TopKSelection) -> T {
    let sum: T = sel.indices.iter().map(|&i| values[i]).sum();
    sum / T::from_usize_lossy(sel.k())
}

/// `-(1/|P|) sum_{p in P} log softmax(l / tau)_p`, per image.
pub fn infonce_multi_positive<T: Real>(logits: &PooledLogits<T>, labels: &PromptLabels) -> Result<T> {
    if logits.values.len() != labels.total {
        return dim(format!(
            "{} pooled logits for {} labelled prompts",
            logits.values.len(),
            labels.total
        ));
    }
    let scaled: Vec<T> = logits.values.iter().map(|&l| l / logits.temperature).collect();
    let lse = log_sum_exp(&scaled);
    let total: T = labels.positives.iter().map(|&p| lse - scaled[p]).sum();
    Ok(total / T::from_usize_lossy(labels.positives.len()))
}

/// Derivative of [`infonce_multi_positive`] with respect to each pooled logit.
pub fn infonce_gradient<T: Real>(logits: &PooledLogits<T>, labels: &PromptLabels) -> Vec<T> {
    let scaled: Vec<T> = logits.values.iter().map(|&l| l / logits.temperature).collect();
    let probs = softmax(&scaled);
    let share = T::one() / T::from_usize_lossy(labels.positives.len());
    probs
        .iter()
        .enumerate()
        .map(|(p, &q)| {
            let target = if labels.is_positive(p) { share } else { T::zero() };
            (q - target) / logits.temperature
        })
        .collect()
}

/// Selections, pooled logits and loss of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOutcome<T> {
    pub selections: Vec<TopKSelection>,
    pub logits: PooledLogits<T>,
    pub loss: T,
}

/// Semantic loss of one image given its coarse fused map and the P3 dimensions.
pub fn semantic_loss<T: Real>(
    fused_down: &AlignmentMap<T>,
    labels: &PromptLabels,
    p3_dims: (usize, usize),
    topk_percent: f64,
    tau: T,
) -> Result<SemanticOutcome<T>> {
    if fused_down.prompts() != labels.total() {
        return dim(format!(
            "fused map has {} prompts but labels cover {}",
            fused_down.prompts(),
            labels.total()
        ));
    }
    let k = topk_budget_percent(p3_dims.0, p3_dims.1, fused_down.cells(), topk_percent);
    let mut selections = Vec::with_capacity(fused_down.prompts());
    let mut pooled = Vec::with_capacity(fused_down.prompts());
    for p in 0..fused_down.prompts() {
        let slice = fused_down.slice(p);
        let sel = topk_select(slice, k)?;
        pooled.push(pooled_logit(slice, &sel));
        selections.push(sel);
    }
    let logits = PooledLogits::new(pooled, tau)?;
    let loss = infonce_multi_positive(&logits, labels)?;
    Ok(SemanticOutcome { selections, logits, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(total: usize, pos: &[usize]) -> PromptLabels {
        PromptLabels::new(total, pos.to_vec()).unwrap()
    }

    #[test]
    fn budget_examples() {
        assert_eq!(topk_budget(40, 40, 100), 16);
        assert_eq!(topk_budget(8, 8, 4), 1);
        assert_eq!(topk_budget(400, 400, 100), 100);
        assert_eq!(topk_budget_percent(40, 40, 100, 1.0), 16);
        assert_eq!(topk_budget_percent(8, 8, 4, 1.0), 1);
        assert_eq!(topk_budget_percent(400, 400, 100, 1.0), 100);
        assert_eq!(topk_budget_percent(16, 16, 16, 5.0), 12);
    }

    #[test]
    fn select_examples() {
        assert_eq!(topk_select(&[1.0; 5], 3).unwrap().indices(), &[0, 1, 2]);
        assert_eq!(topk_select(&[5.0, 1.0, 4.0, 2.0], 2).unwrap().indices(), &[0, 2]);
        assert_eq!(topk_select(&[5.0, 1.0, 4.0, 2.0], 4).unwrap().indices(), &[0, 1, 2, 3]);
        assert!(matches!(topk_select(&[1.0, 2.0], 0), Err(crate::Error::Domain(_))));
        assert!(matches!(topk_select(&[1.0, 2.0], 3), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn select_agrees_with_sort_oracle() {
        let vals = [0.3, -1.0, 2.5, 2.5, 0.0, 7.0, -3.0, 0.3];
        for k in 1..=vals.len() {
            let mut pairs: Vec<(f64, usize)> = vals.iter().copied().zip(0..).collect();
            // stable sort keeps lower indices first among ties
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            expect.sort();
            assert_eq!(topk_select(&vals, k).unwrap().indices(), expect.as_slice());
        }
    }

    #[test]
    fn pooled_examples() {
        let c = [2.25; 6];
        assert_eq!(pooled_logit(&c, &topk_select(&c, 3).unwrap()), 2.25);
        let v = [5.0, 1.0, 4.0, 2.0];
        assert_eq!(pooled_logit(&v, &topk_select(&v, 2).unwrap()), 4.5);
        assert_eq!(pooled_logit(&v, &topk_select(&v, 1).unwrap()), 5.0);
    }

    #[test]
    fn infonce_examples() {
        let l = PooledLogits::new(vec![0.7], 0.25).unwrap();
        assert_eq!(infonce_multi_positive(&l, &labels(1, &[0])).unwrap(), 0.0);

        let l = PooledLogits::new(vec![1.0, 0.0], 1.0).unwrap();
        let v = infonce_multi_positive(&l, &labels(2, &[0])).unwrap();
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.313262).abs() < 1e-6);

        let l = PooledLogits::new(vec![0.4; 3], 0.25).unwrap();
        let v = infonce_multi_positive(&l, &labels(3, &[0, 1])).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-15);
        assert!((v - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn labels_reject_empty_and_out_of_range() {
        assert!(matches!(PromptLabels::new(3, vec![]), Err(crate::Error::Domain(_))));
        assert!(PromptLabels::new(3, vec![3]).is_err());
        assert_eq!(PromptLabels::new(3, vec![2, 0, 2]).unwrap().positives(), &[0, 2]);
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let lab = labels(4, &[1, 3]);
        let base = vec![0.3, -0.2, 1.1, 0.5];
        let g = infonce_gradient(&PooledLogits::new(base.clone(), 0.25).unwrap(), &lab);
        for p in 0..4 {
            let h = 1e-6;
            let mut up = base.clone();
            up[p] += h;
            let mut dn = base.clone();
            dn[p] -= h;
            let f = |v: Vec<f64>| infonce_multi_positive(&PooledLogits::new(v, 0.25).unwrap(), &lab).unwrap();
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-7, "p={p} fd={fd} g={}", g[p]);
        }
        assert!(g[1] < 0.0);
    }

    proptest! {
        #[test]
        fn infonce_properties(
            logits in prop::collection::vec(-4.0f64..4.0, 3..7),
            shift in -50.0f64..50.0,
            scale in 0.1f64..10.0,
            tau in 0.05f64..2.0,
            bump in 0.01f64..1.0,
        ) {
            let p = logits.len();
            let lab = labels(p, &[0, p - 1]);
            let f = |v: Vec<f64>, t: f64| infonce_multi_positive(&PooledLogits::new(v, t).unwrap(), &lab).unwrap();
            let base = f(logits.clone(), tau);
            prop_assert!(base >= 0.0);
            let shifted = f(logits.iter().map(|l| l + shift).collect(), tau);
            prop_assert!((shifted - base).abs() <= 1e-10);
            let absorbed = f(logits.iter().map(|l| l * scale).collect(), tau * scale);
            prop_assert!((absorbed - base).abs() <= 1e-10);
            let single = labels(p, &[0]);
            let g = |v: Vec<f64>| infonce_multi_positive(&PooledLogits::new(v, tau).unwrap(), &single).unwrap();
            let mut raised = logits.clone();
            raised[0] += bump;
            let (before, after) = (g(logits.clone()), g(raised));
            prop_assert!(after <= before);
            if before > 1e-9 {
                prop_assert!(after < before);
            }
            let pooled = PooledLogits::new(logits.clone(), tau).unwrap();
            let q0 = softmax(&logits.iter().map(|l| l / tau).collect::<Vec<_>>())[0];
            let d0 = infonce_gradient(&pooled, &lab)[0];
            prop_assert!((d0 - (q0 - 0.5) / tau).abs() <= 1e-10);
        }

        #[test]
        fn pooled_logit_ignores_spatial_order(
            vals in prop::collection::vec(-10.0f64..10.0, 4..40),
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let k = 1 + ((vals.len() - 1) as f64 * k_frac) as usize;
            let mut shuffled = vals.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = pooled_logit(&vals, &topk_select(&vals, k).unwrap());
            let b = pooled_logit(&shuffled, &topk_select(&shuffled, k).unwrap());
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
