//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use sbpu::attacks::ir::IrExperiment;
use sbpu::attacks::lia::{
    estimate_mean_predictions, final_bias_grad, l1_distance, label_histogram, lia_infer_counts,
};
use sbpu::attacks::mia::{MiaSetting, MiaTestbed};
use sbpu::attacks::{AttackOutcome, AttackReport};
use sbpu::convergence::{gap_bound, run_convergence_experiment};
use sbpu::federation::run_round;
use sbpu::objectives::{
    constants_for, Activation, Architecture, AssumptionConstants, LrSchedule, Objective,
    QuadraticObjective, Sample, StepSize,
};
use sbpu::params::LayerKind;
use sbpu::rng::domain;
use sbpu::sbpu::{
    build_stochastic_list, check_neighborhood_bound, distinct_permutations, layer_lists,
    mutate_with_lists, sbpu_mutate, StochasticList,
};
use sbpu::{
    ClientState, DefensePolicy, DiversityRates, Execution, FederationConfig, GlobalHistory,
    LagMode, LayeredParams, ObjectiveSpec, RoundSettings, Shape, Stream,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

fn random_params(shape: &Shape, rng: &mut ChaCha8Rng) -> LayeredParams {
    let flat: Vec<f64> = (0..shape.num_scalars())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    LayeredParams::from_flat(shape, &flat).unwrap()
}

fn c1_sbpu_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for instance in 0..1000u64 {
        let layers = rng.random_range(1..=3);
        let shape = Shape {
            layers: (0..layers)
                .map(|_| {
                    let f = rng.random_range(1..=8);
                    (LayerKind::Weight, vec![rng.random_range(1..=6); f])
                })
                .collect(),
        };
        let w = random_params(&shape, &mut rng);
        let g = random_params(&shape, &mut rng);
        let gp = random_params(&shape, &mut rng);
        let (b1, b2) = (rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
        let stream = Stream::new(instance);
        let got = sbpu_mutate(&w, &g, &gp, DiversityRates::new(b1, b2).unwrap(), stream).unwrap();
        let lists = layer_lists(&w, stream).unwrap();
        for (i, layer) in got.layers().iter().enumerate() {
            for (j, filter) in layer.filters().iter().enumerate() {
                let s = lists[i].entries()[j];
                let base = w.layers()[i].filters()[j].values();
                let (beta, dir) = match s {
                    -1 | 1 => (b1, g.layers()[i].filters()[j].values()),
                    -2 | 2 => (b2, gp.layers()[i].filters()[j].values()),
                    _ => return Err(format!("bad selector {s}")),
                };
                for (k, v) in filter.values().iter().enumerate() {
                    let expect = base[k] + beta * f64::from(s) * dir[k];
                    ensure(v.to_bits() == expect.to_bits(), || {
                        format!("instance {instance} layer {i} filter {j}: {v} vs {expect}")
                    })?;
                }
            }
        }
    }
    within(Duration::from_secs(1), started)?;
    Ok(format!(
        "1000 instances bit-identical in {:.2?}",
        started.elapsed()
    ))
}

fn c2_list_law() -> Outcome {
    let started = Instant::now();
    for f in 1..=64usize {
        let mut expect = Vec::new();
        for e in [-1i8, 1, -2, 2] {
            expect.extend(std::iter::repeat_n(e, f / 4));
        }
        expect.extend([-1i8, 1, -2, 2].iter().take(f % 4));
        expect.sort();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + f as u64);
            let list = build_stochastic_list(f, &mut rng).unwrap();
            ensure(list.sorted() == expect, || {
                format!("f = {f}, seed = {seed}: {:?}", list.entries())
            })?;
        }
    }
    let perms: Vec<Vec<i8>> = distinct_permutations(&StochasticList::canonical(4))
        .into_iter()
        .map(|l| l.entries().to_vec())
        .collect();
    ensure(perms.len() == 24, || {
        format!("{} permutations", perms.len())
    })?;
    let mut counts = [0u64; 24];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 100_000;
    for _ in 0..draws {
        let l = build_stochastic_list(4, &mut rng).unwrap();
        let idx = perms
            .iter()
            .position(|p| p.as_slice() == l.entries())
            .unwrap();
        counts[idx] += 1;
    }
    let expected = draws as f64 / 24.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(23.0).unwrap().cdf(chi2);
    ensure(p > 0.001, || format!("chi2 = {chi2:.2}, p = {p:.2e}"))?;
    within(Duration::from_secs(10), started)?;
    Ok(format!(
        "multisets exact for f in 1..=64; chi2 = {chi2:.2} (df 23), p = {p:.3}"
    ))
}

fn quadratic_clients(
    shape: &Shape,
    k: usize,
    sigma: f64,
    radius: f64,
    e: usize,
    seed: u64,
) -> Vec<ClientState> {
    (0..k)
        .map(|i| {
            let q = QuadraticObjective::random(
                shape.clone(),
                0.5,
                3.0,
                1.0,
                sigma,
                radius,
                Stream::new(seed).derive(&[domain::DATA, i as u64]),
            )
            .unwrap();
            ClientState::new(
                i,
                10 + i as u64,
                Objective::Quadratic(q),
                e,
                1,
                Stream::new(seed).derive(&[domain::LOCAL_TRAIN, i as u64]),
            )
            .unwrap()
        })
        .collect()
}

fn schedule_for(
    clients: &[ClientState],
    e: usize,
    radius: f64,
) -> (AssumptionConstants, LrSchedule) {
    let qs: Vec<QuadraticObjective> = clients
        .iter()
        .map(|c| match &c.objective {
            Objective::Quadratic(q) => q.clone(),
            _ => unreachable!(),
        })
        .collect();
    let c = constants_for(&qs, e, radius).unwrap();
    let s = LrSchedule::new(c.mu, c.gamma).unwrap();
    (c, s)
}

/// Cartesian product of per-layer permutation lists.
fn for_each_combo(
    per_layer: &[Vec<StochasticList>],
    f: &mut dyn FnMut(&[StochasticList]) -> Result<(), String>,
) -> Result<(), String> {
    let mut idx = vec![0usize; per_layer.len()];
    loop {
        let lists: Vec<StochasticList> = idx
            .iter()
            .zip(per_layer)
            .map(|(&i, l)| l[i].clone())
            .collect();
        f(&lists)?;
        let mut d = 0;
        loop {
            if d == idx.len() {
                return Ok(());
            }
            idx[d] += 1;
            if idx[d] < per_layer[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

fn c3_neighbourhood() -> Outcome {
    let shapes = [
        Shape {
            layers: vec![
                (LayerKind::Weight, vec![3; 4]),
                (LayerKind::Bias, vec![2; 3]),
                (LayerKind::Weight, vec![2; 5]),
            ],
        },
        Shape {
            layers: vec![
                (LayerKind::Weight, vec![2; 8]),
                (LayerKind::Bias, vec![3; 2]),
            ],
        },
    ];
    let mut checks = 0u64;
    for (si, shape) in shapes.iter().enumerate() {
        let per_layer: Vec<Vec<StochasticList>> = shape
            .layers
            .iter()
            .map(|(_, f)| distinct_permutations(&StochasticList::canonical(f.len())))
            .collect();
        for alpha in [0.1, 0.2, 0.4] {
            for beta2 in [alpha / 2.0, 0.75 * alpha, alpha] {
                let rates = DiversityRates::new(alpha, beta2).unwrap();
                let clients = quadratic_clients(shape, 10, 0.5, 50.0, 3, 7 + si as u64);
                let (_, sched) = schedule_for(&clients, 3, 50.0);
                let mut rng = ChaCha8Rng::seed_from_u64(si as u64);
                let settings = RoundSettings {
                    rates,
                    lag: LagMode::Tied,
                    step: StepSize::Decaying(sched),
                    policy: DefensePolicy::None,
                    alpha: Some(alpha),
                    stream: Stream::new(99),
                    exec: Execution::default(),
                };
                let mut h = GlobalHistory::bootstrap(random_params(shape, &mut rng));
                for round in 0..50 {
                    let (g, _) = h.lag_gradients().unwrap();
                    for_each_combo(&per_layer, &mut |lists| {
                        let w = mutate_with_lists(&h.w_glb, &g, &g, rates, lists).unwrap();
                        let r = check_neighborhood_bound(&w, &h, alpha).unwrap();
                        checks += 1;
                        ensure(r.holds, || {
                            format!("shape {si} alpha {alpha} beta2 {beta2} round {round}: {r:?}")
                        })
                    })?;
                    let (next, rec) =
                        run_round(h, &clients, &settings).map_err(|e| e.to_string())?;
                    ensure(rec.bound_reports.len() == 10, || {
                        "missing bound reports".into()
                    })?;
                    for (k, r) in rec.bound_reports.iter().enumerate() {
                        checks += 1;
                        ensure(r.holds, || format!("client {k} round {round}: {r:?}"))?;
                    }
                    h = next;
                }
            }
        }
    }
    Ok(format!("{checks} bound checks, zero violations"))
}

/// Plain FedAvg written against the objective and stream interfaces only.
fn fedavg_reference(cfg: &FederationConfig, rounds: u64) -> Vec<Vec<f64>> {
    let fed = cfg.build().unwrap();
    let quads = cfg.quadratics().unwrap().unwrap();
    let StepSize::Decaying(sched) = cfg.step_size().unwrap() else {
        unreachable!()
    };
    let shape = fed.history.w_glb.shape();
    let n: Vec<f64> = fed.clients.iter().map(|c| c.n_k as f64).collect();
    let total: f64 = n.iter().sum();
    let mut w = fed.history.w_glb.to_flat();
    let mut out = Vec::new();
    for round in 0..rounds {
        let mut uploads = Vec::new();
        for (k, c) in fed.clients.iter().enumerate() {
            let q = &quads[k];
            let center = q.center().to_flat();
            let project = |x: &mut Vec<f64>| {
                let d2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(
                    d2.sqrt() <= q.radius(),
                    "projection never triggers in this setup"
                );
            };
            let mut x = w.clone();
            project(&mut x);
            let mut rng = c.stream.derive(&[domain::LOCAL_TRAIN, round]).rng();
            for step in 0..c.e {
                let t = round * c.e as u64 + step as u64;
                let eta = 2.0 / (sched.mu * (t as f64 + sched.gamma));
                let xp = LayeredParams::from_flat(&shape, &x).unwrap();
                let g = q.stochastic_grad(&xp, &mut rng).unwrap().to_flat();
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= eta * gi;
                }
                project(&mut x);
            }
            uploads.push(x);
        }
        // u_0 + sum_k p_k (u_k - u_0), Neumaier-compensated per coordinate
        w = (0..w.len())
            .map(|i| {
                let (mut s, mut comp) = (0.0f64, 0.0f64);
                for (u, nk) in uploads.iter().zip(&n) {
                    let term = nk / total * (u[i] - uploads[0][i]);
                    let t = s + term;
                    comp += if s.abs() >= term.abs() {
                        (s - t) + term
                    } else {
                        (term - t) + s
                    };
                    s = t;
                }
                uploads[0][i] + (s + comp)
            })
            .collect();
        out.push(w.clone());
    }
    out
}

fn c4_fedavg() -> Outcome {
    let cfg = FederationConfig {
        clients: 10,
        n_k: Some((1..=10).map(|k| 10 * k).collect()),
        beta: Some(0.0),
        e: 5,
        rounds: 50,
        seed: 11,
        objective: ObjectiveSpec::Quadratic {
            filters: 4,
            filter_len: 4,
            min_eig: 0.5,
            max_eig: 4.0,
            center_scale: 1.0,
            sigma: 0.5,
            radius: 100.0,
            init_scale: 1.0,
        },
        ..FederationConfig::default()
    };
    let reference = fedavg_reference(&cfg, 50);
    let mut fed = cfg.build().map_err(|e| e.to_string())?;
    for (r, expect) in reference.iter().enumerate() {
        fed.run_rounds(1).map_err(|e| e.to_string())?;
        let got = fed.history.w_glb.to_flat();
        ensure(
            got.iter()
                .zip(expect)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("round {r} differs: {got:?} vs {expect:?}"),
        )?;
    }
    Ok("50 rounds, K = 10, bit-identical".into())
}

fn convergence_cfg(sigma: f64, clients: usize, rounds: u64, seeds: u64) -> FederationConfig {
    FederationConfig {
        clients,
        e: 5,
        rounds,
        seeds,
        seed: 5,
        alpha: Some(0.1),
        beta1: Some(0.1),
        beta2: Some(0.1),
        lag: LagMode::Tied,
        objective: ObjectiveSpec::Quadratic {
            filters: 4,
            filter_len: 4,
            min_eig: 1.0,
            max_eig: 4.0,
            center_scale: 1.0,
            sigma,
            radius: 10.0,
            init_scale: 1.0,
        },
        ..FederationConfig::default()
    }
}

fn c5_divergence() -> Outcome {
    let started = Instant::now();
    let cfg = convergence_cfg(0.5, 10, 400, 4);
    let setup = cfg.convergence_setup().map_err(|e| e.to_string())?;
    let report = run_convergence_experiment(&setup).map_err(|e| e.to_string())?;
    let worst = report.worst_divergence_ratio();
    ensure(report.divergence_within_bound(1e-6), || {
        format!("worst measured/bound ratio {worst:.3e}")
    })?;
    within(Duration::from_secs(30), started)?;
    Ok(format!(
        "{} steps checked, worst measured/bound ratio {worst:.3e}",
        report.divergence_series.len()
    ))
}

fn c6_convergence_bound() -> Outcome {
    let started = Instant::now();
    let cfg = convergence_cfg(1.0, 4, 1000, 32);
    let setup = cfg.convergence_setup().map_err(|e| e.to_string())?;
    let report = run_convergence_experiment(&setup).map_err(|e| e.to_string())?;
    ensure(report.gap_series.last().map(|p| p.t) == Some(5000), || {
        "T does not reach 5000".into()
    })?;
    if let Some(p) = report.gap_series.iter().find(|p| p.gap > p.bound) {
        return Err(format!(
            "gap {:.3e} exceeds bound {:.3e} at T = {}",
            p.gap, p.bound, p.t
        ));
    }
    let slope = report.final_decade_slope().ok_or("no slope")?;
    ensure((-1.3..=-0.7).contains(&slope), || {
        format!("final-decade slope {slope:.3}")
    })?;
    within(Duration::from_secs(300), started)?;
    let last = report.gap_series.last().unwrap();
    Ok(format!(
        "gap <= bound at all {} points (final gap {:.3e}, bound {:.3e}); slope {slope:.3}",
        report.gap_series.len(),
        last.gap,
        last.bound
    ))
}

fn c7_spot_value() -> Outcome {
    let c = AssumptionConstants {
        l: 2.0,
        mu: 1.0,
        sigma: vec![1.0, 1.0],
        g: 2.0,
        kappa: 2.0,
        gamma: 16.0,
    };
    let v = gap_bound(&c, 0.1, 2, 2, 1.0, 100).map_err(|e| e.to_string())?;
    let oracle = 35.0 / 174.0;
    let rel = ((v - oracle) / oracle).abs();
    ensure(rel <= 1e-12, || format!("{v} vs {oracle} (rel {rel:.2e})"))?;
    Ok(format!("{v:.12} (rel err {rel:.1e})"))
}

fn c8_lia() -> Outcome {
    let mut exhaustive = 0;
    for classes in 1..=3usize {
        if classes < 2 {
            continue;
        }
        let arch = Architecture::mlp(4, 5, classes, Activation::Sigmoid).unwrap();
        let w = arch.init(1.0, Stream::new(classes as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        for bs in 1..=4usize {
            for code in 0..classes.pow(bs as u32) {
                let mut c = code;
                let batch: Vec<Sample> = (0..bs)
                    .map(|i| {
                        let label = c % classes;
                        c /= classes;
                        Sample {
                            x: xs[i].clone(),
                            label,
                        }
                    })
                    .collect();
                let grad = final_bias_grad(&arch, &w, &batch).unwrap();
                let mut mean = vec![0.0; classes];
                for s in &batch {
                    for (m, p) in mean.iter_mut().zip(arch.predict_checked(&w, &s.x).unwrap()) {
                        *m += p / bs as f64;
                    }
                }
                let got = lia_infer_counts(&grad, &mean, bs).unwrap();
                ensure(got == label_histogram(&batch, classes), || {
                    format!("n_c {classes} bs {bs} code {code}")
                })?;
                exhaustive += 1;
            }
        }
    }
    let (bs, classes, dim) = (10usize, 10usize, 64usize);
    let arch = Architecture::mlp(dim, 32, classes, Activation::Sigmoid).unwrap();
    let mut worst = 0;
    for trial in 0..100u64 {
        let s = Stream::new(1000 + trial);
        let w = arch.init(1.0, s.child(0));
        let mut rng = s.child(1).rng();
        let batch: Vec<Sample> = (0..bs)
            .map(|_| Sample {
                x: (0..dim).map(|_| rng.random::<f64>()).collect(),
                label: rng.random_range(0..classes),
            })
            .collect();
        let grad = final_bias_grad(&arch, &w, &batch).unwrap();
        let mean = estimate_mean_predictions(&arch, &w, 1000, &mut s.child(2).rng()).unwrap();
        let err = l1_distance(
            &lia_infer_counts(&grad, &mean, bs).unwrap(),
            &label_histogram(&batch, classes),
        );
        worst = worst.max(err);
        ensure(err as f64 <= 0.1 * bs as f64, || {
            format!("trial {trial}: L1 error {err} > {}", 0.1 * bs as f64)
        })?;
    }
    Ok(format!(
        "{exhaustive} exhaustive batches exact; 100 probe trials, worst L1 error {worst} (bs {bs})"
    ))
}

fn reconstruction(r: &AttackReport) -> (f64, f64, f64) {
    match r.outcome {
        AttackOutcome::Reconstruction {
            psnr,
            objective,
            max_error,
        } => (psnr.db(), objective, max_error),
        _ => unreachable!(),
    }
}

fn c9_ir() -> Outcome {
    let started = Instant::now();
    let exp = IrExperiment::default();
    let stream = Stream::new(2025);
    let shared = exp.run(false, stream).map_err(|e| e.to_string())?;
    let mutated = exp.run(true, stream).map_err(|e| e.to_string())?;
    let (p_shared, obj_shared, err_shared) = reconstruction(&shared.report);
    let (p_mut, obj_mut, _) = reconstruction(&mutated.report);
    ensure(err_shared <= 1e-3 && p_shared > 40.0, || {
        format!("shared: max error {err_shared:.3e}, PSNR {p_shared:.1} dB")
    })?;
    ensure(obj_mut > 10.0 * obj_shared, || {
        format!("objectives: mismatched {obj_mut:.3e} vs matched {obj_shared:.3e}")
    })?;
    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "shared: max error {err_shared:.2e}, PSNR {p_shared:.1} dB, objective {obj_shared:.2e}; mismatched: objective {obj_mut:.2e}, PSNR {p_mut:.1} dB"
    ))
}

fn membership(r: &AttackReport) -> (f64, f64) {
    match r.outcome {
        AttackOutcome::Membership {
            member, accuracy, ..
        } => (member.f1, accuracy),
        _ => unreachable!(),
    }
}

fn c10_mia() -> Outcome {
    let started = Instant::now();
    let bed = MiaTestbed::default();
    let runs: Vec<(f64, f64, f64)> = Execution::default()
        .try_map(10, |seed| {
            let s = Stream::new(seed as u64);
            let shared = membership(&bed.run(MiaSetting::SharedClassifier, s)?).0;
            let blind = membership(&bed.run(MiaSetting::NoClassifierSharing, s)?).0;
            let chance = membership(&bed.run(MiaSetting::ChanceControl, s)?).1;
            Ok::<_, sbpu::Error>((shared, blind, chance))
        })
        .map_err(|e| e.to_string())?;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (shared, blind, chance) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    ensure(shared - blind >= 0.1, || {
        format!("member F1 shared {shared:.3} vs no sharing {blind:.3}")
    })?;
    ensure((0.4..=0.6).contains(&chance), || {
        format!("chance-control accuracy {chance:.3}")
    })?;
    within(Duration::from_secs(120), started)?;
    Ok(format!(
        "member F1 shared {shared:.3} vs no sharing {blind:.3}; chance-control accuracy {chance:.3} (10 seeds)"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 mutation oracle equivalence", c1_sbpu_oracle),
        ("2 stochastic list law", c2_list_law),
        ("3 neighbourhood bound", c3_neighbourhood),
        ("4 FedAvg reduction", c4_fedavg),
        ("5 client-divergence bound", c5_divergence),
        ("6 convergence bound", c6_convergence_bound),
        ("7 bound spot value", c7_spot_value),
        ("8 label inference", c8_lia),
        ("9 reconstruction contrast", c9_ir),
        ("10 membership inference ordering", c10_mia),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} [{took:.2?}]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name} [{took:.2?}]: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
