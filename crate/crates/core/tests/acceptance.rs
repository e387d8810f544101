//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! Run with `cargo test --release -p adaptq --test acceptance`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use adaptq::harness::{
    evaluate_plan, generate_synthetic, ActivationSpikes, LayerSpec, NamedPlan, RunConfig,
    SyntheticSpec, TailProfile, TransformCache,
};
use adaptq::model::{LayerKind, LayerRecord, TransformKind};
use adaptq::quant::{compute_scale, fake_quant, qmax, qmin, Axis, QuantConfig};
use adaptq::search::{
    run_search, search_loss, search_loss_grad, MixtureParams, Reduction, SearchLayer,
};
use adaptq::selector::{
    agreement_of, heuristic_from_scores, heuristic_select, kurtosis_of, random_plan, robust_z,
    BetaMode, SelectionPlan, SelectorConfig,
};
use adaptq::tensor::{frobenius_mse, hadamard, matmul, qr_orthogonal, Seed, SplitMix64, Tensor};
use adaptq::transforms::{
    affine_loss_and_grad, apply_affine, apply_rotation, calibrate_rotation_observed,
    kron_factor_shape, rotation_loss_and_grad, AffineTransform, CalibConfig, FrozenNoise,
    LayerProblem, Passthrough, RotationTransform,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || {
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    })
}

fn gaussian(rows: usize, cols: usize, rng: &mut SplitMix64, sigma: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| (sigma * rng.normal()) as f32)
}

fn near_identity(n: usize, rng: &mut SplitMix64, eps: f64) -> Tensor {
    Tensor::from_fn(n, n, |i, j| ((i == j) as u8 as f64 + eps * rng.normal()) as f32)
}

fn relative_frobenius(y: &Tensor, yhat: &Tensor) -> f64 {
    frobenius_mse(y, yhat).unwrap().sqrt() / y.frobenius_norm()
}

fn w4a8() -> QuantConfig {
    QuantConfig {
        w_bits: 4,
        a_bits: 8,
        k_bits: 4,
        v_bits: 4,
        ..QuantConfig::default()
    }
}

// 1. Without quantization both transforms reproduce X W.
fn exact_cancellation() -> Outcome {
    let start = Instant::now();
    let mut rng = Seed(1).rng();
    let mut worst = (0.0f64, 0.0f64);
    for case in 0..50 {
        let m = 16 + rng.below(113);
        let n = 8 + rng.below(57);
        let x = gaussian(64, m, &mut rng, 1.0);
        let w = gaussian(m, n, &mut rng, 1.0 / (m as f64).sqrt());
        let y = matmul(&x, &w).unwrap();

        let (p, q) = kron_factor_shape(m);
        let a = AffineTransform::new(near_identity(p, &mut rng, 0.2), near_identity(q, &mut rng, 0.2))
            .map_err(|e| format!("case {case}: {e}"))?;
        let ya = apply_affine(&x, &w, &a, &Passthrough).unwrap();

        let params: Vec<f64> = (0..m * (m - 1) / 2).map(|_| 0.1 * rng.normal()).collect();
        let pre = if m.is_power_of_two() {
            hadamard(m).unwrap()
        } else {
            qr_orthogonal(m, Seed(1000 + case))
        };
        let r = RotationTransform::from_upper(&params, m, Some(pre)).unwrap();
        let yr = apply_rotation(&x, &w, &r, &Passthrough).unwrap();

        let (ea, er) = (relative_frobenius(&y, &ya), relative_frobenius(&y, &yr));
        worst = (worst.0.max(ea), worst.1.max(er));
        ensure(ea <= 1e-4 && er <= 1e-4, || {
            format!("case {case} (m={m}): affine {ea:.2e}, rotation {er:.2e}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "50 layers, worst relative error affine {:.1e}, rotation {:.1e}, {:.2}s",
        worst.0,
        worst.1,
        start.elapsed().as_secs_f64()
    ))
}

// 2. Idempotence, range, sign symmetry off the negative endpoint, and
// error decreasing with bit-width.
fn quantizer_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = Seed(2).rng();
    let mut endpoint_cases = 0usize;
    for bits in 2u8..=8 {
        for case in 0..100 {
            let rows = 1 + rng.below(16);
            let cols = 1 + rng.below(64);
            let heavy = case % 2 == 1;
            let z = Tensor::from_fn(rows, cols, |_, _| {
                if heavy { rng.laplace() as f32 } else { rng.normal() as f32 }
            });
            let axis = if case % 3 == 0 { Axis::Row } else { Axis::Col };
            let ratio = if case % 4 == 0 { 1.0 } else { 0.5 + 0.5 * rng.uniform() as f32 };
            let scale = compute_scale(&z, bits, axis, ratio).unwrap();
            let q = fake_quant(&z, &scale, axis).unwrap();
            let qq = fake_quant(&q, &scale, axis).unwrap();
            ensure(q.data() == qq.data(), || format!("b={bits} case {case}: not idempotent"))?;

            let neg = fake_quant(&z.scale(-1.0), &scale, axis).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let s = scale.scales[if axis == Axis::Row { r } else { c }];
                    let level = q.get(r, c) / s;
                    ensure(level >= qmin(bits) - 1e-3 && level <= qmax(bits) + 1e-3, || {
                        format!("b={bits} case {case}: level {level} out of range")
                    })?;
                    let (a, b) = (q.get(r, c), neg.get(r, c));
                    let rounded = (z.get(r, c) / s).round();
                    if rounded.abs() < -qmin(bits) {
                        ensure(a == -b, || format!("b={bits} case {case}: Q(-z) = {b}, -Q(z) = {}", -a))?;
                    } else {
                        // Beyond the grid: each side sits on its own clip level.
                        endpoint_cases += 1;
                        let (lo, hi) = if rounded < 0.0 { (a, b) } else { (b, a) };
                        ensure(lo == qmin(bits) * s && hi == qmax(bits) * s, || {
                            format!("b={bits} case {case}: endpoint values {lo}, {hi}")
                        })?;
                    }
                }
            }
        }
    }
    ensure(endpoint_cases > 0, || "no endpoint asymmetry exercised".into())?;

    let mut rng = Seed(3).rng();
    for case in 0..100 {
        let z = gaussian(8, 32, &mut rng, 1.0);
        let mut prev = f64::INFINITY;
        for bits in 2u8..=8 {
            let scale = compute_scale(&z, bits, Axis::Col, 1.0).unwrap();
            let err = frobenius_mse(&z, &fake_quant(&z, &scale, Axis::Col).unwrap()).unwrap();
            ensure(err <= prev, || format!("case {case}: error rises from {prev:.3e} to {err:.3e} at b={bits}"))?;
            prev = err;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "700 tensors, {endpoint_cases} endpoint entries checked, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 3. Excess kurtosis of reference distributions at N = 10^6.
fn kurtosis_fixtures() -> Outcome {
    const N: usize = 1_000_000;
    let start = Instant::now();
    // Student-t(5) has infinite fourth moment of the sample kurtosis, so the
    // estimate wanders even at N = 10^6; seed 1 gives a typical draw.
    let cases: [(&str, u64, f64, f64, fn(&mut SplitMix64) -> f64); 4] = [
        ("uniform", 11, -1.2, 0.05, |r| r.uniform()),
        ("gaussian", 12, 0.0, 0.05, |r| r.normal()),
        ("laplace", 13, 3.0, 0.15, |r| r.laplace()),
        ("student_t(5)", 1, 6.0, 1.0, |r| r.student_t(5.0)),
    ];
    let mut parts = Vec::new();
    for (name, seed, expect, tol, draw) in cases {
        let mut rng = Seed(seed).rng();
        let v: Vec<f32> = (0..N).map(|_| draw(&mut rng) as f32).collect();
        let k = kurtosis_of(&v).unwrap().value;
        ensure((k - expect).abs() <= tol, || format!("{name}: {k:.3}, expected {expect} ± {tol}"))?;
        parts.push(format!("{name} {k:.3}"));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{}, {:.2}s", parts.join(", "), start.elapsed().as_secs_f64()))
}

// 4. Robust z-scores on a hand-worked case and on constant input.
fn robust_z_scores() -> Outcome {
    let s = robust_z(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    // median 3, deviations [2, 1, 0, 1, 2] -> MAD 1, z = d / 1.4826
    let expect = [-1.349, -0.674, 0.0, 0.674, 1.349];
    for (i, (&got, want)) in s.z.iter().zip(expect).enumerate() {
        ensure((got - want).abs() <= 1e-3, || format!("z[{i}] = {got}, expected {want}"))?;
    }
    // MAD = 0 takes the epsilon path: every deviation is 0, so z is 0.
    let c = robust_z(&[5.0; 6]).unwrap();
    ensure(c.mad == 0.0 && c.z.iter().all(|&z| z == 0.0), || format!("constant input gave {:?}", c.z))?;
    Ok(format!(
        "z = [{}]; constant input all zero",
        s.z.iter().map(|z| format!("{z:.3}")).collect::<Vec<_>>().join(", ")
    ))
}

// 5. The heuristic rotates exactly round(fraction * n) layers per group.
fn heuristic_budget() -> Outcome {
    let mut rng = Seed(5).rng();
    let mut checked = 0;
    for n in [1usize, 2, 5, 8, 10, 32] {
        for fraction in [0.5, 0.7] {
            for mode in [Some(0.1), Some(0.9), None] {
                let cfg = SelectorConfig {
                    attn_fraction: fraction,
                    ffn_fraction: fraction,
                    beta_mode: if mode.is_some() { BetaMode::Fixed } else { BetaMode::ZMass },
                    beta_attn: mode.unwrap_or(0.1),
                    beta_ffn: mode.unwrap_or(0.9),
                    ..SelectorConfig::default()
                };
                for kind in [LayerKind::AttentionQkv, LayerKind::FfnGateUp] {
                    for trial in 0..4 {
                        let kinds = vec![kind; n];
                        // Trial 0 has repeated scores to exercise tie handling.
                        let raw: Vec<f64> = (0..n)
                            .map(|_| if trial == 0 { rng.below(3) as f64 } else { 10.0 * rng.uniform() })
                            .collect();
                        let l = (fraction * n as f64).round_ties_even() as usize;
                        let plan = heuristic_from_scores(&kinds, &raw, &cfg).unwrap();
                        let again = heuristic_from_scores(&kinds, &raw, &cfg).unwrap();
                        let ids: Vec<usize> = (0..n).collect();
                        let label = format!("n={n} fraction={fraction} beta={mode:?} {kind} trial {trial}");
                        ensure(plan.rotation_count(&ids) == l, || {
                            format!("{label}: {} rotations, expected {l}", plan.rotation_count(&ids))
                        })?;
                        ensure(plan.assignments == again.assignments, || format!("{label}: not deterministic"))?;
                        if trial > 0 {
                            let mut perm: Vec<usize> = ids.clone();
                            rng.shuffle(&mut perm);
                            let permuted: Vec<f64> = perm.iter().map(|&i| raw[i]).collect();
                            let pp = heuristic_from_scores(&kinds, &permuted, &cfg).unwrap();
                            let equivariant = perm.iter().enumerate().all(|(j, &i)| pp.assignments[j] == plan.assignments[i]);
                            ensure(equivariant, || format!("{label}: not permutation-equivariant"))?;
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} configurations"))
}

/// A seeded 8-layer model with mixed weight tails.
fn mixed_instance(seed: u64, tokens: usize) -> Vec<LayerRecord> {
    let mut profiles = vec![
        TailProfile::StudentT { nu: 5.0 },
        TailProfile::Uniform,
        TailProfile::Laplace,
        TailProfile::Uniform,
        TailProfile::Gaussian,
        TailProfile::GaussianWithChannelOutliers { magnitude: 8.0, count: 2 },
        TailProfile::StudentT { nu: 5.0 },
        TailProfile::Uniform,
    ];
    Seed(seed).derive(999).rng().shuffle(&mut profiles);
    let layers = profiles
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let kind = if i % 2 == 0 { LayerKind::AttentionQkv } else { LayerKind::FfnGateUp };
            let mut l = LayerSpec::new(kind, 32, p);
            if kind == LayerKind::FfnGateUp {
                l.out_width = Some(64);
            }
            if i == 3 {
                l.activation_spikes = Some(ActivationSpikes { count: 2, magnitude: 10.0 });
            }
            l
        })
        .collect();
    let spec = SyntheticSpec {
        name: format!("mixed-{seed}"),
        seed,
        tokens,
        layers,
    };
    generate_synthetic(&spec).unwrap().layers
}

/// Four heavy-tailed and four uniform FFN layers. At W4A8 rotation wins on
/// the heavy tails and affine on the uniform ones, by a wide margin.
fn separated_instance() -> Vec<LayerRecord> {
    let layers = (0..8)
        .map(|i| {
            let p = if i % 2 == 0 { TailProfile::StudentT { nu: 5.0 } } else { TailProfile::Uniform };
            let mut l = LayerSpec::new(LayerKind::FfnGateUp, 32, p);
            l.out_width = Some(64);
            l
        })
        .collect();
    let spec = SyntheticSpec {
        name: "separated".into(),
        seed: 8,
        tokens: 512,
        layers,
    };
    generate_synthetic(&spec).unwrap().layers
}

struct InstanceTotals {
    oracle: f64,
    others: Vec<(String, f64)>,
    random: Vec<f64>,
}

fn instance_totals(layers: &[LayerRecord], cfg: &RunConfig, seed: Seed) -> Result<InstanceTotals, String> {
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    let mut cache = TransformCache::new(layers, cfg, seed);
    let total = |name: &str, plan: SelectionPlan, cache: &mut TransformCache<'_>| -> Result<f64, String> {
        let r = evaluate_plan(cache, &NamedPlan::new(name, plan)).map_err(|e| e.to_string())?;
        ensure(r.complete, || format!("{name}: a layer failed to calibrate"))?;
        Ok(r.total)
    };
    let oracle = cache.oracle().map_err(|e| e.to_string())?;
    let oracle = total("oracle", oracle, &mut cache)?;
    let mut others = Vec::new();
    for (name, plan) in [
        ("fixed-affine", SelectionPlan::fixed(&kinds, TransformKind::Affine)),
        ("fixed-rotation", SelectionPlan::fixed(&kinds, TransformKind::Rotation)),
        ("heuristic", heuristic_select(layers, &cfg.selection).map_err(|e| e.to_string())?),
    ] {
        others.push((name.to_string(), total(name, plan, &mut cache)?));
    }
    let search_layers = cache.search_layers().map_err(|e| e.to_string())?;
    let learned = run_search(&search_layers, &cfg.search).map_err(|e| e.to_string())?.plan;
    others.push(("learned".into(), total("learned", learned, &mut cache)?));
    let mut random = Vec::new();
    for r in 0..20 {
        let plan = random_plan(&kinds, cfg.selection.random_fraction, seed.derive(500 + r));
        random.push(total("random", plan, &mut cache)?);
    }
    Ok(InstanceTotals { oracle, others, random })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// 6. The per-layer oracle is never beaten.
fn oracle_dominance(instances: &[InstanceTotals], elapsed: Duration) -> Outcome {
    for (i, inst) in instances.iter().enumerate() {
        for (name, t) in inst.others.iter().map(|(n, t)| (n.as_str(), *t)).chain(inst.random.iter().map(|&t| ("random", t))) {
            ensure(inst.oracle <= t, || format!("instance {i}: {name} {t:.6e} beats oracle {:.6e}", inst.oracle))?;
        }
    }
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "{} instances x 24 plans, {:.0}s",
        instances.len(),
        elapsed.as_secs_f64()
    ))
}

// 7. The best of 20 random plans sits well below their mean.
fn random_spread(instances: &[InstanceTotals]) -> Outcome {
    let mut worst = f64::INFINITY;
    let mut pooled = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let (mean, std) = mean_std(&inst.random);
        pooled += std * std;
        let best = inst.random.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = if std > 0.0 { (mean - best) / std } else { 0.0 };
        worst = worst.min(gap);
        ensure(mean - best >= 0.5 * std && std > 0.0, || {
            format!("instance {i}: best {best:.4e}, mean {mean:.4e}, std {std:.4e}")
        })?;
    }
    let pooled = (pooled / instances.len() as f64).sqrt();
    Ok(format!("smallest gap {worst:.2} std, pooled std {pooled:.3e}"))
}

// 8. The search settles on near-one-hot weights that agree with the oracle.
fn search_convergence(cache: &mut TransformCache<'_>, cfg: &RunConfig) -> Outcome {
    let start = Instant::now();
    let layers = cache.search_layers().map_err(|e| e.to_string())?;
    let result = run_search(&layers, &cfg.search).map_err(|e| e.to_string())?;
    let worst = result.final_entropy.iter().copied().fold(0.0, f64::max);
    let oracle = cache.oracle().map_err(|e| e.to_string())?;
    let (matches, _) = agreement_of(&result.plan.assignments, &oracle.assignments).unwrap();
    ensure(worst <= 0.05, || format!("entropy {worst:.4} above 0.05"))?;
    ensure(matches >= 7, || format!("{matches}/8 layers agree with the oracle"))?;
    within(start.elapsed(), Duration::from_secs(180))?;
    Ok(format!(
        "max entropy {worst:.4}, {matches}/8 agree with the oracle, {:.0}s including calibration",
        start.elapsed().as_secs_f64()
    ))
}

fn norm_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn central(base: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..base.len())
        .map(|i| {
            let mut p = base.to_vec();
            p[i] += h;
            let mut m = base.to_vec();
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

// 9. Analytic gradients against central differences.
fn gradient_checks() -> Outcome {
    let mut rng = Seed(9).rng();
    let q = QuantConfig::uniform_bits(3).with_clip_ratios(vec![1.0]);
    let (mut wa, mut wr, mut ws) = (0.0f64, 0.0f64, 0.0f64);
    for point in 0..20 {
        let x = gaussian(32, 4, &mut rng, 1.0);
        let w = gaussian(4, 3, &mut rng, 0.5);
        let problem = LayerProblem::new(x, w).unwrap();

        // Affine, 2x2 factors; quantization frozen to its error at the base point.
        let a = AffineTransform::new(near_identity(2, &mut rng, 0.3), near_identity(2, &mut rng, 0.3)).unwrap();
        let noise = FrozenNoise::linearize(
            &q,
            &a.transform_activations(&problem.x).unwrap(),
            &a.transform_weights(&problem.w).unwrap(),
            &problem.blocks,
        )
        .unwrap();
        let (_, g1, g2) = affine_loss_and_grad(&problem, &a, &noise).unwrap();
        let analytic: Vec<f64> = g1.into_iter().chain(g2).collect();
        let (f1, f2) = a.factors();
        let base: Vec<f64> = f1.to_f64().into_iter().chain(f2.to_f64()).collect();
        let numeric = central(&base, 1e-3, |v| {
            let t = AffineTransform::new(Tensor::from_f64(2, 2, &v[..4]).unwrap(), Tensor::from_f64(2, 2, &v[4..]).unwrap()).unwrap();
            affine_loss_and_grad(&problem, &t, &noise).unwrap().0
        });
        let rel = norm_rel(&analytic, &numeric);
        wa = wa.max(rel);
        ensure(rel < 1e-3, || format!("affine point {point}: relative error {rel:.2e}"))?;

        // Rotation, 4x4 via the six upper-triangular skew entries.
        let params: Vec<f64> = (0..6).map(|_| 0.3 * rng.normal()).collect();
        let pre = qr_orthogonal(4, Seed(900 + point));
        let r = RotationTransform::from_upper(&params, 4, Some(pre.clone())).unwrap();
        let xt = matmul(&problem.x, r.matrix()).unwrap();
        let wt = matmul(&r.matrix().transpose(), &problem.w).unwrap();
        let noise = FrozenNoise::linearize(&q, &xt, &wt, &problem.blocks).unwrap();
        let (_, analytic) = rotation_loss_and_grad(&problem, &r, &noise).unwrap();
        let numeric = central(&params, 1e-3, |v| {
            let t = RotationTransform::from_upper(v, 4, Some(pre.clone())).unwrap();
            rotation_loss_and_grad(&problem, &t, &noise).unwrap().0
        });
        let rel = norm_rel(&analytic, &numeric);
        wr = wr.max(rel);
        ensure(rel < 1e-3, || format!("rotation point {point}: relative error {rel:.2e}"))?;

        // Mixture weights, loss evaluated from the mixed tensors.
        let y = gaussian(4, 4, &mut rng, 1.0);
        let layers: Vec<SearchLayer> = (0..3)
            .map(|i| {
                let ya = y.add(&gaussian(4, 4, &mut rng, 0.3)).unwrap();
                let yr = y.add(&gaussian(4, 4, &mut rng, 0.3)).unwrap();
                SearchLayer::new(format!("l{i}"), LayerKind::FfnGateUp, y.clone(), ya, yr).unwrap()
            })
            .collect();
        let alpha: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal()).collect();
        let params_of = |v: &[f64]| MixtureParams {
            alpha: v.chunks(2).map(|c| [c[0], c[1]]).collect(),
            lambda_entropy: 0.01,
        };
        let (_, grads) = search_loss_grad(&layers, &params_of(&alpha), Reduction::Mean).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        let numeric = central(&alpha, 1e-3, |v| search_loss(&layers, &params_of(v), Reduction::Mean).unwrap().total);
        let rel = norm_rel(&analytic, &numeric);
        ws = ws.max(rel);
        ensure(rel < 1e-3, || format!("mixture point {point}: relative error {rel:.2e}"))?;
    }
    Ok(format!("worst relative error affine {wa:.1e}, rotation {wr:.1e}, mixture {ws:.1e}"))
}

// 10. Rotation iterates stay orthogonal throughout calibration.
fn orthogonality() -> Outcome {
    let mut rng = Seed(10).rng();
    let q = QuantConfig::uniform_bits(4);
    let cfg = CalibConfig {
        steps: 100,
        ..CalibConfig::default()
    };
    let mut worst = 0.0f64;
    let mut seen = 0;
    for (i, m) in [16usize, 24, 32, 40, 64].into_iter().enumerate() {
        let x = Tensor::from_fn(128, m, |_, _| rng.laplace() as f32);
        let w = Tensor::from_fn(m, 16, |_, _| (rng.student_t(5.0) / (m as f64).sqrt()) as f32);
        let problem = LayerProblem::new(x, w).unwrap();
        let mut bad = None;
        calibrate_rotation_observed(&problem, &q, &cfg, Seed(100 + i as u64), &mut |step, r| {
            let e = r.orthogonality_error();
            worst = worst.max(e);
            seen += 1;
            if e > 1e-5 && bad.is_none() {
                bad = Some((step, e));
            }
        })
        .map_err(|e| format!("m={m}: {e}"))?;
        if let Some((step, e)) = bad {
            return Err(format!("m={m} step {step}: ||RᵀR - I|| = {e:.2e}"));
        }
    }
    ensure(seen >= 5 * 100, || format!("observer saw only {seen} iterates"))?;
    Ok(format!("{seen} iterates, worst {worst:.1e}"))
}

// 11. Both selectors beat either fixed family.
fn adaptive_beats_fixed(cache: &mut TransformCache<'_>, cfg: &RunConfig) -> Outcome {
    let layers = cache.layers();
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    let mut total = |name: &str, plan: SelectionPlan| -> Result<f64, String> {
        Ok(evaluate_plan(cache, &NamedPlan::new(name, plan)).map_err(|e| e.to_string())?.total)
    };
    let fa = total("fixed-affine", SelectionPlan::fixed(&kinds, TransformKind::Affine))?;
    let fr = total("fixed-rotation", SelectionPlan::fixed(&kinds, TransformKind::Rotation))?;
    let h = total("heuristic", heuristic_select(layers, &cfg.selection).map_err(|e| e.to_string())?)?;
    let search_layers = cache.search_layers().map_err(|e| e.to_string())?;
    let plan = run_search(&search_layers, &cfg.search).map_err(|e| e.to_string())?.plan;
    let l = evaluate_plan(cache, &NamedPlan::new("learned", plan)).map_err(|e| e.to_string())?.total;
    let fixed = fa.min(fr);
    ensure(h < fixed && l < fixed, || {
        format!("heuristic {h:.4e}, learned {l:.4e}, fixed-affine {fa:.4e}, fixed-rotation {fr:.4e}")
    })?;
    Ok(format!("heuristic {h:.4e}, learned {l:.4e} < fixed-affine {fa:.4e}, fixed-rotation {fr:.4e}"))
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adaptq"))
        .current_dir(dir)
        .env_remove("ADAPTQ_SEED")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("adaptq {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim())
    })
}

const SMALL_SPEC: &str = r#"{
  "name": "tiny", "seed": 3, "tokens": 64,
  "layers": [
    {"kind": "attention_qkv", "width": 16, "profile": {"type": "student_t", "nu": 5.0}},
    {"kind": "ffn_gate_up", "width": 16, "profile": {"type": "uniform"}},
    {"kind": "attention_qkv", "width": 16, "profile": {"type": "laplace"}},
    {"kind": "ffn_gate_up", "width": 16, "profile": {"type": "gaussian"}}
  ]
}
"#;

const SMALL_CONFIG: &str = r#"{
  "quant": {"w_bits": 4, "a_bits": 8, "k_bits": 4, "v_bits": 4},
  "calibration": {"steps": 20},
  "search": {"steps": 50}
}
"#;

fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("spec.json"), SMALL_SPEC).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("config.json"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    cli(dir, &["gen", "--spec", "spec.json", "--out", "model"])?;
    cli(dir, &["select", "--model", "model", "--mode", "heuristic", "--config", "config.json", "--out", "heuristic.json"])?;
    cli(dir, &["select", "--model", "model", "--mode", "random", "--config", "config.json", "--out", "random.json"])?;
    cli(dir, &["search", "--model", "model", "--config", "config.json", "--out", "learned.json"])?;
    cli(dir, &[
        "evaluate", "--model", "model", "--config", "config.json", "--oracle",
        "--plans", "heuristic.json,random.json,learned.json", "--out", "report.json",
    ])
}

// 12. Two runs with the same seed and config produce identical files.
fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let files = ["heuristic.json", "random.json", "learned.json", "learned.search.json", "learned.loss.csv", "report.json"];
    for f in files {
        let (x, y) = (std::fs::read(a.path().join(f)), std::fs::read(b.path().join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) => ensure(x == y, || format!("{f} differs between runs"))?,
            _ => return Err(format!("{f} missing")),
        }
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("[{tag}] {n:>2} {name}: {detail}");
        results.push((n, name, outcome));
    };

    record(1, "exact cancellation without quantization", exact_cancellation());
    record(2, "quantizer contract", quantizer_contract());
    record(3, "kurtosis fixtures", kurtosis_fixtures());
    record(4, "robust z-scores", robust_z_scores());
    record(5, "heuristic budget", heuristic_budget());

    let cfg = RunConfig {
        quant: w4a8(),
        ..RunConfig::default()
    };
    let start = Instant::now();
    let instances: Result<Vec<InstanceTotals>, String> = (0..10u64)
        .map(|i| {
            let layers = mixed_instance(100 + i, 256);
            instance_totals(&layers, &cfg, Seed(100 + i))
        })
        .collect();
    let elapsed = start.elapsed();
    match instances {
        Ok(instances) => {
            record(6, "oracle dominance", oracle_dominance(&instances, elapsed));
            record(7, "random plans spread", random_spread(&instances));
        }
        Err(e) => {
            record(6, "oracle dominance", Err(e.clone()));
            record(7, "random plans spread", Err(e));
        }
    }

    let separated = separated_instance();
    let mut cache = TransformCache::new(&separated, &cfg, Seed(8));
    record(8, "search convergence", search_convergence(&mut cache, &cfg));
    record(9, "gradient checks", gradient_checks());
    record(10, "rotation orthogonality", orthogonality());
    record(11, "adaptive beats fixed", adaptive_beats_fixed(&mut cache, &cfg));
    record(12, "reproducible pipeline", reproducibility());

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
