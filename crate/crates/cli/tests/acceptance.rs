//! Acceptance criteria, one line each. Runs without the libtest harness so the
//! lines always reach the terminal; exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use expalign::eah::{expectation_alignment, expectation_map, token_posterior};
use expalign::geo_loss::{advantage_field, confidence, gaco_loss, joint_softmax, GacoImage};
use expalign::gradients::{gradient_check, objective};
use expalign::mil::{instance_vectors, mil_score};
use expalign::sem_loss::infonce_multi_positive;
use expalign::synth::gradcheck_case;
use expalign::variational::{free_energy, gibbs_closed_form, kl_divergence, minimize_free_energy_numeric, MirrorDescentConfig};
use expalign::{
    AdvantageField, AlignmentMap, AlignmentSample, FeatureMap, GacoConfig, GibbsProblem, InstanceMaskSet, ObjectiveConfig,
    PooledLogits, PromptLabels, SimilarityTensor, SimplexDistribution, TokenBatch,
};
use expalign_cli::commands::{cmd_demo, cmd_verify};
use expalign_cli::config::RunConfig;
use expalign_cli::render::json;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mil_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut dev, mut oracle_dev) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let (p, l) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let (h, w, c) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8));
        let f = FeatureMap::new(3, c, h, w, uniform(&mut rng, c * h * w, -2.0, 2.0)).unwrap();
        let tau_t = rng.random_range(0.05..5.0);
        for _ in 0..p {
            let mut valid: Vec<bool> = (0..l).map(|_| rng.random_bool(0.6)).collect();
            valid[rng.random_range(0..l)] = true;
            let emb = uniform(&mut rng, l * c, -2.0, 2.0);
            let t = TokenBatch::new(l, c, emb.clone(), valid.clone()).unwrap();
            let (s, pi, eam) = expectation_alignment(&f, &t, tau_t).unwrap();
            let scores = mil_score(&instance_vectors(&s, &pi).unwrap());
            dev = dev.max(max_abs_diff(eam.values(), &scores));

            // brute-force oracle straight from the definitions
            let sim = |i: usize, tok: usize| (0..c).map(|ch| f.values()[ch * h * w + i] * emb[tok * c + ch]).sum::<f64>();
            let means: Vec<f64> = (0..l).map(|tok| (0..h * w).map(|i| sim(i, tok)).sum::<f64>() / (h * w) as f64).collect();
            let top = (0..l).filter(|&k| valid[k]).map(|k| means[k] / tau_t).fold(f64::NEG_INFINITY, f64::max);
            let raw: Vec<f64> = (0..l).map(|k| if valid[k] { (means[k] / tau_t - top).exp() } else { 0.0 }).collect();
            let z: f64 = raw.iter().sum();
            let oracle: Vec<f64> = (0..h * w).map(|i| (0..l).map(|k| raw[k] / z * sim(i, k)).sum()).collect();
            oracle_dev = oracle_dev.max(max_abs_diff(&oracle, &scores));
        }
    }
    Outcome {
        passed: dev <= 1e-12 && oracle_dev <= 1e-10,
        detail: format!("max |mil - eam| {dev:.2e} (<= 1e-12), vs brute force {oracle_dev:.2e}"),
    }
}

fn random_gibbs(rng: &mut ChaCha8Rng) -> GibbsProblem {
    let n = rng.random_range(2..=64);
    let e = uniform(rng, n, -3.0, 3.0);
    let a = uniform(rng, n, -3.0, 3.0);
    GibbsProblem::new(e, a, rng.random_range(0.1..4.0), rng.random_range(0.0..2.0)).unwrap()
}

fn gibbs_verification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let md = MirrorDescentConfig::default();
    let (mut kl_max, mut worst_gap, mut unconverged) = (0.0_f64, f64::INFINITY, 0);
    for _ in 0..100 {
        let prob = random_gibbs(&mut rng);
        let closed = gibbs_closed_form(&prob);
        let num = minimize_free_energy_numeric(&prob, &md).unwrap();
        unconverged += usize::from(!num.converged);
        kl_max = kl_max.max(kl_divergence(num.distribution.mass(), closed.mass()));
        let f_star = free_energy(&closed, &prob).unwrap();
        for _ in 0..1000 {
            let q = SimplexDistribution::sample_dirichlet(prob.len(), &mut rng);
            worst_gap = worst_gap.min(free_energy(&q, &prob).unwrap() - f_star);
        }
    }
    Outcome {
        passed: kl_max <= 1e-8 && worst_gap >= -1e-12 && unconverged == 0,
        detail: format!("max KL {kl_max:.2e} (<= 1e-8), min F[Q]-F[Q*] {worst_gap:.2e} (>= -1e-12), unconverged {unconverged}"),
    }
}

fn gibbs_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut shift, mut absorb, mut hot, mut cold) = (0.0_f64, 0.0_f64, 0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let prob = random_gibbs(&mut rng);
        let n = prob.len();
        let q = gibbs_closed_form(&prob);
        let k = rng.random_range(-1e3..1e3);
        shift = shift.max(max_abs_diff(gibbs_closed_form(&prob.map_energy(|e| e + k).unwrap()).mass(), q.mass()));

        let a = rng.random_range(0.01..100.0);
        let e = prob.energy().to_vec();
        let unit = gibbs_closed_form(&GibbsProblem::semantic(e.clone(), 1.0).unwrap());
        let scaled = gibbs_closed_form(&GibbsProblem::semantic(e.iter().map(|x| a * x).collect(), a).unwrap());
        absorb = absorb.max(max_abs_diff(unit.mass(), scaled.mass()));

        let u = gibbs_closed_form(&prob.with_tau(1e8).unwrap());
        hot = hot.max(u.mass().iter().map(|m| (m - 1.0 / n as f64).abs()).fold(0.0, f64::max));

        // effective energy with a unique minimizer
        let eff = prob.effective_energy();
        let mut sorted = eff.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if sorted[1] - sorted[0] < 1e-4 {
            continue;
        }
        let best = eff.iter().position(|&v| v == sorted[0]).unwrap();
        let c = gibbs_closed_form(&prob.with_tau(1e-6).unwrap());
        cold = cold.min(c.mass()[best]);
    }
    Outcome {
        passed: shift <= 1e-12 && absorb <= 1e-12 && hot <= 1e-6 && cold >= 1.0 - 1e-6,
        detail: format!("shift {shift:.2e}, absorption {absorb:.2e} (<= 1e-12), hot sup {hot:.2e} (<= 1e-6), cold mass {cold:.12}"),
    }
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst, mut draws, mut ok) = (0.0_f64, 0usize, true);
    for _ in 0..20 {
        let case = gradcheck_case::<f64>(rng.random(), 1e-2, 10_000).unwrap();
        draws += case.draws;
        let check = gradient_check(&case.batch, &case.config, 1e-4, 1e-8).unwrap();
        ok &= check.max_relative_error <= 1e-5;
        worst = worst.max(check.max_relative_error);
    }
    Outcome { passed: ok, detail: format!("max relative error {worst:.2e} (<= 1e-5) over 20 configurations, {draws} draws") }
}

fn one_prompt_sample(rng: &mut ChaCha8Rng, masked: bool) -> AlignmentSample {
    let c = 3;
    let mut feat = |s: u8, h: usize| FeatureMap::new(s, c, h, h, uniform(rng, c * h * h, -1.0, 1.0)).unwrap();
    let features = [feat(3, 8), feat(4, 4), feat(5, 2)];
    let tokens = vec![TokenBatch::dense(2, c, uniform(rng, 2 * c, -1.0, 1.0)).unwrap()];
    let mut masks = InstanceMaskSet::empty(1, 8, 8);
    if masked {
        for i in [0, 1, 8, 9, 10] {
            masks.set(0, i, true);
        }
    }
    AlignmentSample::new(features, tokens, masks, PromptLabels::new(1, vec![0]).unwrap()).unwrap()
}

fn exact_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = ObjectiveConfig::default();
    let mut single = 0.0_f64;
    let mut empty_geo = 0.0_f64;
    for _ in 0..20 {
        single = single.max(objective(&[one_prompt_sample(&mut rng, true)], &cfg).unwrap().sem.abs());
        empty_geo = empty_geo.max(objective(&[one_prompt_sample(&mut rng, false)], &cfg).unwrap().geo.abs());
    }

    let map = AlignmentMap::new(2, 3, 3, uniform(&mut rng, 18, -2.0, 2.0)).unwrap();
    let probs = joint_softmax(&map);
    let masks = InstanceMaskSet::new(2, 3, 3, (0..18).map(|i| i % 3 != 0).collect()).unwrap();
    let zero = AdvantageField::from_values(2, 3, 3, vec![0.0; 18]).unwrap();
    let zero_adv = gaco_loss(&[GacoImage { probs: &probs, advantage: &zero, masks: &masks }], 1.0).abs();

    let (mut shift, mut temp) = (0.0_f64, 0.0_f64);
    for _ in 0..500 {
        let p = rng.random_range(2..10);
        let l = uniform(&mut rng, p, -4.0, 4.0);
        let mut idx: Vec<usize> = (0..p).collect();
        idx.shuffle(&mut rng);
        let labels = PromptLabels::new(p, idx[..rng.random_range(1..=p)].to_vec()).unwrap();
        let tau = rng.random_range(0.05..3.0);
        let eval = |v: Vec<f64>, t: f64| infonce_multi_positive(&PooledLogits::new(v, t).unwrap(), &labels).unwrap();
        let base = eval(l.clone(), tau);
        let k = rng.random_range(-100.0..100.0);
        shift = shift.max((eval(l.iter().map(|x| x + k).collect(), tau) - base).abs());
        let a = rng.random_range(0.01..100.0);
        temp = temp.max((eval(l.iter().map(|x| a * x).collect(), a * tau) - base).abs());
    }

    let no_clip = GacoConfig { clip: 1e9, eps: 1e-14, ..GacoConfig::default() };
    let mut zero_mean = 0.0_f64;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
        let m = AlignmentMap::new(1, h, w, uniform(&mut rng, h * w, -3.0, 3.0)).unwrap();
        let mut mk = InstanceMaskSet::empty(1, h, w);
        for i in 0..h * w {
            mk.set(0, i, rng.random_bool(0.5));
        }
        let adv = advantage_field(&confidence(&m), &mk, &no_clip).unwrap();
        zero_mean = zero_mean.max(mk.region(0).iter().map(|&i| adv.at(0, i)).sum::<f64>().abs());
    }

    let (mut hot, mut cold) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let (h, w, l) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(2..6));
        let s = SimilarityTensor::new(h, w, l, uniform(&mut rng, h * w * l, -2.0, 2.0)).unwrap();
        let mut valid: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let n_valid = valid.iter().filter(|&&v| v).count() as f64;
        let pi = token_posterior(&s, &valid, 1e6).unwrap();
        let eam = expectation_map(&s, &pi).unwrap();
        for i in 0..h * w {
            let mean = (0..l).filter(|&k| valid[k]).map(|k| s.location(i)[k]).sum::<f64>() / n_valid;
            hot = hot.max((eam.values()[i] - mean).abs());
        }
        for (k, &wgt) in pi.weights().iter().enumerate() {
            let expect = if valid[k] { 1.0 / n_valid } else { 0.0 };
            hot = hot.max((wgt - expect).abs());
        }

        let means = s.spatial_means();
        let mut order: Vec<usize> = (0..l).filter(|&k| valid[k]).collect();
        order.sort_by(|&a, &b| means[b].partial_cmp(&means[a]).unwrap());
        if order.len() > 1 && means[order[0]] - means[order[1]] < 1e-3 {
            continue;
        }
        let pi = token_posterior(&s, &valid, 1e-6).unwrap();
        let eam = expectation_map(&s, &pi).unwrap();
        for i in 0..h * w {
            cold = cold.max((eam.values()[i] - s.location(i)[order[0]]).abs());
        }
    }

    let passed = single == 0.0
        && empty_geo == 0.0
        && zero_adv == 0.0
        && shift <= 1e-10
        && temp <= 1e-10
        && zero_mean <= 1e-8
        && hot <= 1e-5
        && cold <= 1e-5;
    Outcome {
        passed,
        detail: format!(
            "L_sem(P=1) {single:.1e}, L_geo empty {empty_geo:.1e} zero-A {zero_adv:.1e}, InfoNCE shift {shift:.2e} temp {temp:.2e}, \
             zero-mean A {zero_mean:.2e}, EAM limits {hot:.2e}/{cold:.2e}"
        ),
    }
}

fn worked_examples() -> Outcome {
    let map = AlignmentMap::new(1, 1, 2, vec![0.0, 3f64.ln()]).unwrap();
    let masks = InstanceMaskSet::new(1, 1, 2, vec![true, true]).unwrap();
    let cfg = GacoConfig { eps: 1e-12, ..GacoConfig::default() };
    let probs = joint_softmax(&map);
    let adv = advantage_field(&confidence(&map), &masks, &cfg).unwrap();
    let geo = gaco_loss(&[GacoImage { probs: &probs, advantage: &adv, masks: &masks }], 1.0);

    let two = infonce_multi_positive(&PooledLogits::new(vec![1.0, 0.0], 1.0).unwrap(), &PromptLabels::new(2, vec![0]).unwrap())
        .unwrap();
    let three =
        infonce_multi_positive(&PooledLogits::new(vec![0.3; 3], 1.0).unwrap(), &PromptLabels::new(3, vec![0, 1]).unwrap()).unwrap();
    Outcome {
        passed: (geo + 0.549306).abs() <= 1e-5 && (two - 0.313262).abs() <= 1e-6 && (three - 1.098612).abs() <= 1e-6,
        detail: format!("L_geo {geo:.6}, L_sem {two:.6} and {three:.6}"),
    }
}

fn benchmark_demo(cache: &mut Option<String>) -> Outcome {
    let cfg = RunConfig { command: "demo".into(), ..RunConfig::default() };
    let trained = cmd_demo(&cfg).unwrap();
    *cache = Some(json(&trained).unwrap());
    let frozen = cmd_demo(&RunConfig { lambda_sem: 0.0, lambda_geo: 0.0, ..cfg }).unwrap();
    let drift = (frozen.mean_accuracy_after - frozen.mean_accuracy_before).abs();
    let n = trained.runs.len();
    let passed = trained.mean_accuracy_before < 0.5
        && trained.mean_accuracy_after >= 0.9
        && drift <= 0.02
        && trained.sem_decreased == n
        && trained.diverged == 0;
    Outcome {
        passed,
        detail: format!(
            "accuracy {:.3} -> {:.3} (< 0.5 -> >= 0.9), zero-weight drift {drift:.3} (<= 0.02), L_sem down on {}/{n} seeds",
            trained.mean_accuracy_before, trained.mean_accuracy_after, trained.sem_decreased
        ),
    }
}

fn determinism(demo_first: Option<&str>) -> Outcome {
    let cfg = RunConfig { command: "verify".into(), ..RunConfig::default() };
    let a = json(&cmd_verify(&cfg).unwrap()).unwrap();
    let b = json(&cmd_verify(&cfg).unwrap()).unwrap();
    let demo_cfg = RunConfig { command: "demo".into(), ..RunConfig::default() };
    let first = match demo_first {
        Some(s) => s.to_string(),
        None => json(&cmd_demo(&demo_cfg).unwrap()).unwrap(),
    };
    let second = json(&cmd_demo(&demo_cfg).unwrap()).unwrap();
    Outcome {
        passed: a == b && first == second,
        detail: format!("verify {} bytes identical: {}, demo {} bytes identical: {}", a.len(), a == b, first.len(), first == second),
    }
}

fn main() {
    let mut demo_json = None;
    let mut rows: Vec<(usize, &str, Duration, Duration, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, budget: u64, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let verdict = if out.passed && took <= Duration::from_secs(budget) { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {verdict} [{:.2}s / {budget}s] {}", took.as_secs_f64(), out.detail);
        rows.push((id, name, took, Duration::from_secs(budget), out));
    };
    run(1, "mil-equivalence", 5, &mut mil_equivalence);
    run(2, "gibbs-verification", 30, &mut gibbs_verification);
    run(3, "gibbs-invariances", 5, &mut gibbs_invariances);
    run(4, "gradient-checks", 60, &mut gradient_checks);
    run(5, "exact-identities", 5, &mut exact_identities);
    run(6, "worked-examples", 5, &mut worked_examples);
    run(7, "desk-scale-demo", 60, &mut || benchmark_demo(&mut demo_json));
    let cached = demo_json.clone();
    run(8, "determinism", 120, &mut || determinism(cached.as_deref()));
    let failed = rows.iter().filter(|(_, _, took, budget, o)| !o.passed || took > budget).count();
    println!("acceptance: {} of {} criteria passed", rows.len() - failed, rows.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
