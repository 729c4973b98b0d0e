//! Free-energy view of the pair distribution.
//!
//! `F[Q] = E_Q[E] - lambda E_Q[A] + tau KL(Q || U)` over the simplex of
//! prompt/location pairs, its closed-form Gibbs minimizer, and an independent
//! numeric minimizer (entropic mirror descent) used to cross-check it.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{dim, domain, Result};
use crate::scalar::{log_sum_exp, Real};

const LOG_FLOOR: f64 = 1e-300;

/// Energy field, geometry score, temperature and geometry weight over a finite pair set.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsProblem<T> {
    energy: Vec<T>,
    geometry: Vec<T>,
    tau: T,
    lambda: T,
}

impl<T: Real> GibbsProblem<T> {
    pub fn new(energy: Vec<T>, geometry: Vec<T>, tau: T, lambda: T) -> Result<Self> {
        if energy.is_empty() {
            return dim("problem needs at least one pair");
        }
        if energy.len() != geometry.len() {
            return dim(format!("{} energies but {} geometry scores", energy.len(), geometry.len()));
        }
        if energy.iter().chain(&geometry).any(|v| !v.is_finite()) {
            return domain("energy and geometry score must be finite");
        }
        if !(tau > T::zero()) || !tau.is_finite() {
            return domain(format!("temperature must be positive and finite, got {tau}"));
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return domain(format!("geometry weight must be nonnegative, got {lambda}"));
        }
        Ok(Self { energy, geometry, tau, lambda })
    }

    /// Energy only; geometry score zero.
    pub fn semantic(energy: Vec<T>, tau: T) -> Result<Self> {
        let n = energy.len();
        Self::new(energy, vec![T::zero(); n], tau, T::zero())
    }

    pub fn len(&self) -> usize {
        self.energy.len()
    }
    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }
    pub fn energy(&self) -> &[T] {
        &self.energy
    }
    pub fn geometry(&self) -> &[T] {
        &self.geometry
    }
    pub fn tau(&self) -> T {
        self.tau
    }
    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn with_tau(&self, tau: T) -> Result<Self> {
        Self::new(self.energy.clone(), self.geometry.clone(), tau, self.lambda)
    }
    pub fn with_lambda(&self, lambda: T) -> Result<Self> {
        Self::new(self.energy.clone(), self.geometry.clone(), self.tau, lambda)
    }
    pub fn map_energy(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.energy.iter().map(|&e| f(e)).collect(), self.geometry.clone(), self.tau, self.lambda)
    }

    /// `E - lambda A` per pair.
    pub fn effective_energy(&self) -> Vec<T> {
        self.energy
            .iter()
            .zip(&self.geometry)
            .map(|(&e, &a)| e - self.lambda * a)
            .collect()
    }
}

/// A point of the probability simplex over the pair set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDistribution<T> {
    mass: Vec<T>,
}

impl<T: Real> SimplexDistribution<T> {
    /// Validates nonnegativity and unit total within `1e-9`.
    pub fn new(mass: Vec<T>) -> Result<Self> {
        if mass.is_empty() {
            return dim("distribution needs at least one entry");
        }
        if mass.iter().any(|m| !m.is_finite() || *m < T::zero()) {
            return domain("mass must be finite and nonnegative");
        }
        let total: T = mass.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return domain(format!("mass sums to {total}, off the simplex"));
        }
        Ok(Self { mass })
    }

    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::from_usize_lossy(n);
        Self { mass: vec![w; n] }
    }

    /// Normalized exponentials of `logits`.
    pub fn from_log_weights(logits: &[T]) -> Self {
        let lse = log_sum_exp(logits);
        Self { mass: logits.iter().map(|&l| (l - lse).exp()).collect() }
    }

    /// Symmetric Dirichlet(1) draw via normalized unit exponentials.
    pub fn sample_dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        Self { mass: draws.into_iter().map(|d| T::lit(d / total)).collect() }
    }

    pub fn mass(&self) -> &[T] {
        &self.mass
    }
    pub fn len(&self) -> usize {
        self.mass.len()
    }
    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

/// `KL(p || q)` with `0 log 0 = 0`; entries of `q` are floored for the log.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> T {
    let floor = T::lit(LOG_FLOOR);
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.max(floor).ln() - qi.max(floor).ln()))
        .sum()
}

/// `KL(Q || U) = sum Q log(n Q)`.
pub fn kl_to_uniform<T: Real>(q: &[T]) -> T {
    let floor = T::lit(LOG_FLOOR);
    let log_n = T::from_usize_lossy(q.len()).ln();
    q.iter()
        .filter(|&&m| m > T::zero())
        .map(|&m| m * (m.max(floor).ln() + log_n))
        .sum()
}

pub fn free_energy<T: Real>(q: &SimplexDistribution<T>, prob: &GibbsProblem<T>) -> Result<T> {
    if q.len() != prob.len() {
        return dim(format!("distribution over {} pairs, problem over {}", q.len(), prob.len()));
    }
    let linear: T = q
        .mass
        .iter()
        .zip(prob.effective_energy())
        .map(|(&m, e)| m * e)
        .sum();
    Ok(linear + prob.tau * kl_to_uniform(&q.mass))
}

/// Gradient of `F` on the open simplex: `E - lambda A + tau (log(n Q) + 1)`.
pub fn free_energy_gradient<T: Real>(q: &SimplexDistribution<T>, prob: &GibbsProblem<T>) -> Vec<T> {
    let floor = T::lit(LOG_FLOOR);
    let log_n = T::from_usize_lossy(q.len()).ln();
    q.mass
        .iter()
        .zip(prob.effective_energy())
        .map(|(&m, e)| e + prob.tau * (m.max(floor).ln() + log_n + T::one()))
        .collect()
}

/// `Q*(p,i) ∝ exp(-(E - lambda A) / tau)`.
pub fn gibbs_closed_form<T: Real>(prob: &GibbsProblem<T>) -> SimplexDistribution<T> {
    let logits: Vec<T> = prob.effective_energy().into_iter().map(|e| -e / prob.tau).collect();
    SimplexDistribution::from_log_weights(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorDescentConfig<T> {
    pub max_iters: usize,
    /// Stop once the max-norm change of an iterate is at most this.
    pub tol: T,
    /// Step as a multiple of `1 / tau`.
    pub step_scale: T,
}

impl<T: Real> Default for MirrorDescentConfig<T> {
    fn default() -> Self {
        Self { max_iters: 10_000, tol: T::lit(1e-13), step_scale: T::lit(0.5) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorDescentOutcome<T> {
    pub distribution: SimplexDistribution<T>,
    pub iterations: usize,
    /// Max-norm change of the final step.
    pub residual: T,
    pub converged: bool,
}

/// Entropic mirror descent from the uniform point:
/// `Q <- normalize(Q exp(-eta dF/dQ))`, backtracking `eta` whenever `F` rises.
///
/// Iterates are carried in log space so that very small temperatures do not
/// underflow. Running out of iterations is reported through `converged`.
pub fn minimize_free_energy_numeric<T: Real>(
    prob: &GibbsProblem<T>,
    cfg: &MirrorDescentConfig<T>,
) -> Result<MirrorDescentOutcome<T>> {
    if !(cfg.step_scale > T::zero()) || !(cfg.tol >= T::zero()) {
        return domain("mirror descent needs a positive step and nonnegative tolerance");
    }
    let n = prob.len();
    let eff = prob.effective_energy();
    let log_n = T::from_usize_lossy(n).ln();
    let mut log_q = vec![-log_n; n];
    let mut current = SimplexDistribution::uniform(n);
    let mut f_current = free_energy(&current, prob)?;
    let mut eta = cfg.step_scale / prob.tau;
    let mut residual = T::infinity();

    for iter in 1..=cfg.max_iters {
        // log-space gradient keeps the step exact even when Q underflows
        let step = |eta: T| -> Vec<T> {
            let raw: Vec<T> = log_q
                .iter()
                .zip(&eff)
                .map(|(&lq, &e)| lq - eta * (e + prob.tau * (lq + log_n + T::one())))
                .collect();
            let lse = log_sum_exp(&raw);
            raw.into_iter().map(|r| r - lse).collect()
        };
        let mut candidate = step(eta);
        let mut next = SimplexDistribution { mass: candidate.iter().map(|&l| l.exp()).collect() };
        let mut f_next = free_energy(&next, prob)?;
        let mut halvings = 0;
        let slack = T::epsilon() * T::lit(64.0) * (T::one() + f_current.abs());
        while f_next > f_current + slack && halvings < 60 {
            eta = eta * T::lit(0.5);
            candidate = step(eta);
            next = SimplexDistribution { mass: candidate.iter().map(|&l| l.exp()).collect() };
            f_next = free_energy(&next, prob)?;
            halvings += 1;
        }
        residual = next
            .mass
            .iter()
            .zip(&current.mass)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max);
        log_q = candidate;
        current = next;
        f_current = f_next;
        if residual <= cfg.tol {
            return Ok(MirrorDescentOutcome { distribution: current, iterations: iter, residual, converged: true });
        }
    }
    Ok(MirrorDescentOutcome { distribution: current, iterations: cfg.max_iters, residual, converged: false })
}
