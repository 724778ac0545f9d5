//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! A failing criterion is reported, not asserted, so the rest still run and
//! `cargo test` stays usable. Set `ACCEPTANCE_STRICT=1` to exit non-zero on
//! any FAIL.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use edac::attack::{fgsm_batch, pgd_batch, AttackConfig, Norm};
use edac::data::{batches, make_gaussian_mixture, Dataset, GaussianMixture};
use edac::diagnostics::{
    certainty_gap, compute_heatmap, count_increases, mean_label_variance, overfitting_gap, peak_index, Heatmap,
    MetricsRecord,
};
use edac::netcore::{forward_logits, init_model, Activation, ModelSpec, ModelState, Tensor};
use edac::objective::{adversarial_certainty, cross_entropy, var_functional, ObjectiveKind};
use edac::runner::{cmd_sweep, cmd_train, run_gradcheck, ExperimentConfig, GradcheckSettings, Overrides};
use edac::train::{certainty_half_step, resume_run, train_run, Checkpoint, Method, TrainOutcome, TrainRng};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn benchmark_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml")
}

fn benchmark() -> ExperimentConfig {
    ExperimentConfig::load(benchmark_path()).expect("benchmark config")
}

fn err(e: impl Display) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Everything in a metrics row except wall time and the method tag.
fn numbers(h: &[MetricsRecord]) -> Vec<[f64; 8]> {
    h.iter()
        .map(|r| {
            [
                r.epoch as f64,
                r.lr,
                r.clean_acc_train,
                r.clean_acc_test,
                r.robust_acc_train,
                r.robust_acc_test,
                r.ac_train,
                r.ac_test,
            ]
        })
        .collect()
}

fn same_state(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.model == b.model && a.optimizer_momentum == b.optimizer_momentum && a.rng_state == b.rng_state && a.epoch == b.epoch
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let data = make_gaussian_mixture(&GaussianMixture::benchmark(0)).map_err(err)?;
    let groups = [
        (Activation::Relu, AttackConfig::pgd(Norm::Linf, 0.1, 0.025, 5), ObjectiveKind::at_ce()),
        (Activation::Tanh, AttackConfig::pgd(Norm::L2, 0.5, 0.1, 5), ObjectiveKind::trades(6.0)),
        (Activation::Relu, AttackConfig::pgd(Norm::L2, 0.5, 0.1, 5).with_random_start(true), ObjectiveKind::trades(1.0)),
        (Activation::Tanh, AttackConfig::pgd(Norm::Linf, 0.2, 0.05, 3).with_random_start(true), ObjectiveKind::at_ce()),
    ];
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for (i, (activation, attack, objective)) in groups.iter().enumerate() {
        let spec = ModelSpec {
            input_dim: 16,
            layer_widths: vec![8, 8, 4],
            activation: *activation,
            init_seed: 0,
        };
        let report = run_gradcheck(&GradcheckSettings {
            spec: &spec,
            data: &data,
            attack,
            objective,
            cases: 25,
            batch_size: 4,
            steps: &[1e-4, 1e-5, 1e-6],
            seed: i as u64,
            corrupt: false,
        })
        .map_err(err)?;
        cases += report.cases;
        worst = worst.max(report.max_error());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        cases >= 100 && worst < 1e-4 && secs < 60.0,
        format!("{cases} cases (params, input, certainty; h in 1e-4..1e-6), max relative error {worst:.2e}, {secs:.1} s"),
    ))
}

fn random_model(rng: &mut ChaCha8Rng, n: usize, hidden: bool) -> Result<ModelState, String> {
    let k = rng.random_range(2..6);
    let mut widths = if hidden { vec![rng.random_range(2..9)] } else { vec![] };
    widths.push(k);
    init_model(&ModelSpec {
        input_dim: n,
        layer_widths: widths,
        activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh },
        init_seed: rng.random(),
    })
    .map_err(err)
}

fn random_inputs(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Result<Tensor, String> {
    Tensor::new(vec![rows, n], (0..rows * n).map(|_| rng.random::<f64>()).collect()).map_err(err)
}

fn feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let m = random_model(&mut rng, n, true)?;
        let rows = rng.random_range(1..5);
        let x = random_inputs(&mut rng, rows, n)?;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..m.num_classes())).collect();
        let norm = if rng.random_bool(0.5) { Norm::Linf } else { Norm::L2 };
        let eps = rng.random_range(0.0..1.0);
        let alpha = rng.random_range(0.001..1.5);
        let cfg = AttackConfig::pgd(norm, eps, alpha, rng.random_range(1..11))
            .with_random_start(rng.random_bool(0.5))
            .with_clamp(0.0, 1.0);
        let adv = pgd_batch(&m, &x, &labels, &cfg, &mut rng).map_err(err)?;
        for i in 0..rows {
            let inside = cfg.distance(adv.row(i), x.row(i)) <= eps + 1e-9;
            let boxed = adv.row(i).iter().all(|v| (0.0..=1.0).contains(v));
            if !(inside && boxed) {
                violations += 1;
            }
        }
    }
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.random_range(1..9);
        let m = random_model(&mut rng, n, true)?;
        let x = random_inputs(&mut rng, 3, n)?;
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..m.num_classes())).collect();
        let eps = rng.random_range(0.01..0.5);
        let mut fg = AttackConfig::fgsm(eps);
        let mut pg = AttackConfig::pgd(Norm::Linf, eps, eps, 1);
        if case % 2 == 0 {
            fg = fg.with_clamp(0.0, 1.0);
            pg = pg.with_clamp(0.0, 1.0);
        }
        let a = fgsm_batch(&m, &x, &labels, &fg).map_err(err)?;
        let b = pgd_batch(&m, &x, &labels, &pg, &mut rng).map_err(err)?;
        if a.data().iter().zip(b.data()).any(|(u, v)| u.to_bits() != v.to_bits()) {
            mismatches += 1;
        }
    }
    Ok((
        violations == 0 && mismatches == 0,
        format!(
            "1000 PGD invocations, {violations} rows outside ball or box; FGSM vs PGD(S=1, alpha=eps): {mismatches}/200 bitwise mismatches"
        ),
    ))
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    let mut worst_drop: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..9);
        let m = random_model(&mut rng, n, false)?;
        let x = random_inputs(&mut rng, 1, n)?;
        let y = rng.random_range(0..m.num_classes());
        let eps = rng.random_range(0.01..1.0);
        let steps = rng.random_range(1..11);
        let mut cfg = AttackConfig::pgd(Norm::Linf, eps, eps * rng.random_range(0.05..1.0), steps);
        if rng.random_bool(0.5) {
            cfg = cfg.with_clamp(0.0, 1.0);
        }
        let ce = |t: &Tensor| -> Result<f64, String> {
            cross_entropy(forward_logits(&m, t).map_err(err)?.row(0), y).map_err(err)
        };
        let mut prev = ce(&x)?;
        let mut ok = true;
        for s in 1..=steps {
            let mut c = cfg.clone();
            c.steps = s;
            let cur = ce(&pgd_batch(&m, &x, &[y], &c, &mut rng).map_err(err)?)?;
            worst_drop = worst_drop.max(prev - cur);
            if cur < prev - 1e-12 * (1.0 + prev.abs()) {
                ok = false;
            }
            prev = cur;
        }
        if !ok {
            bad += 1;
        }
    }
    Ok((
        bad == 0,
        format!("100 linear models, {bad} with a per-step loss decrease (largest drop {worst_drop:.1e})"),
    ))
}

fn reductions(train: &Dataset, test: &Dataset) -> Outcome {
    let cfg = benchmark();
    let mut at = cfg.train.clone();
    at.epochs = 3;
    at.method = Method::At;
    let mut edac = at.clone();
    edac.method = Method::Edac;
    edac.edac_eta = 0.0;
    let mut reg = at.clone();
    reg.method = Method::EdacReg;
    reg.edac_reg_lambda = 0.0;
    let run = |c| train_run(c, &cfg.model, train, test).map_err(err);
    let (a, e, r) = (run(&at)?, run(&edac)?, run(&reg)?);
    let same = |x: &TrainOutcome| {
        same_state(&a.last, &x.last) && same_state(&a.best, &x.best) && numbers(&a.history) == numbers(&x.history)
    };
    Ok((
        same(&e) && same(&r),
        format!(
            "3 epochs on the benchmark: edac(eta=0) {}, edac_reg(lambda=0) {}",
            if same(&e) { "identical to AT" } else { "differs from AT" },
            if same(&r) { "identical to AT" } else { "differs from AT" }
        ),
    ))
}

fn certainty_descent(train: &Dataset, test: &Dataset) -> Outcome {
    let cfg = benchmark();
    let mut at = cfg.train.clone();
    at.method = Method::At;
    at.epochs = 10;
    let model = train_run(&at, &cfg.model, train, test).map_err(err)?.last.model;
    let mut sampled = batches(train, at.batch_size, 100).map_err(err)?;
    sampled.extend(batches(train, at.batch_size, 101).map_err(err)?);
    sampled.truncate(50);
    let mut decreased = 0;
    let mut max_halvings = 0;
    for (i, batch) in sampled.iter().enumerate() {
        let h = certainty_half_step(&model, batch, &at.train_attack, 0.1, true, &mut TrainRng::seed_from_u64(i as u64))
            .map_err(err)?;
        max_halvings = max_halvings.max(h.halvings);
        if h.ac_after < h.ac_before {
            decreased += 1;
        }
    }
    let frac = decreased as f64 / sampled.len() as f64;
    Ok((
        sampled.len() == 50 && frac >= 0.95,
        format!("AT checkpoint at epoch 10: certainty fell on {decreased}/50 batches, at most {max_halvings} halvings from eta=0.1"),
    ))
}

fn algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..10);
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let a = rng.random_range(-5.0..5.0);
        let base = var_functional(&u).map_err(err)?;
        let shifted = var_functional(&u.iter().map(|v| v + c).collect::<Vec<_>>()).map_err(err)?;
        let scaled = var_functional(&u.iter().map(|v| v * a).collect::<Vec<_>>()).map_err(err)?;
        worst = worst.max((shifted - base).abs()).max((scaled - a.abs() * base).abs());
    }

    let m = init_model(&ModelSpec {
        input_dim: 5,
        layer_widths: vec![6, 4],
        activation: Activation::Relu,
        init_seed: 1,
    })
    .map_err(err)?;
    let mut p = m.params().clone();
    // Zero output weights and a shared output bias: every logit equals 0.25.
    p.get_mut("w1").ok_or("no w1")?.data_mut().iter_mut().for_each(|v| *v = 0.0);
    p.get_mut("b1").ok_or("no b1")?.data_mut().iter_mut().for_each(|v| *v = 0.25);
    let constant = m.with_params(p).map_err(err)?;
    let x = random_inputs(&mut rng, 8, 5)?;
    let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let ac = adversarial_certainty(
        &constant,
        &x,
        &y,
        &AttackConfig::pgd(Norm::Linf, 0.3, 0.1, 5),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(err)?
    .mean;

    let mut row_err: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..8);
        let pairs: Vec<(usize, usize)> =
            (0..rng.random_range(1..300)).map(|_| (rng.random_range(0..k), rng.random_range(0..k))).collect();
        let hm = Heatmap::from_pairs(k, pairs).map_err(err)?;
        for (row, &count) in hm.matrix.iter().zip(&hm.counts) {
            if count > 0 {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((
        worst <= 1e-12 && ac == 0.0 && row_err <= 1e-12,
        format!("var shift/scale error {worst:.1e}, AC(constant logits) = {ac}, heatmap row-sum error {row_err:.1e}"),
    ))
}

struct SeedRuns {
    at: Vec<TrainOutcome>,
    edac: Vec<TrainOutcome>,
    secs: f64,
}

fn seed_runs(train: &Dataset, test: &Dataset) -> Result<SeedRuns, String> {
    let start = Instant::now();
    let (mut at, mut edac) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let mut cfg = benchmark();
        cfg.override_seed(seed);
        for method in [Method::At, Method::Edac] {
            cfg.train.method = method;
            let out = train_run(&cfg.train, &cfg.model, train, test).map_err(err)?;
            if method == Method::At { &mut at } else { &mut edac }.push(out);
        }
    }
    Ok(SeedRuns {
        at,
        edac,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn directional(runs: &SeedRuns) -> Outcome {
    let stats = |outs: &[TrainOutcome]| -> Result<(Vec<f64>, Vec<f64>), String> {
        let gaps = outs.iter().map(|o| overfitting_gap(&o.history).map_err(err)).collect::<Result<Vec<_>, _>>()?;
        Ok((gaps.iter().map(|g| g.last_robust).collect(), gaps.iter().map(|g| g.gap).collect()))
    };
    let (at_last, at_gap) = stats(&runs.at)?;
    let (ed_last, ed_gap) = stats(&runs.edac)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let (ma, me, ga, ge) = (median(at_last.clone()), median(ed_last.clone()), median(at_gap.clone()), median(ed_gap.clone()));
    Ok((
        me >= ma && ge <= ga && runs.secs < 900.0,
        format!(
            "median last robust EDAC {me:.3} vs AT {ma:.3}; median gap EDAC {ge:.3} vs AT {ga:.3}; \
             last AT [{}] EDAC [{}]; gaps AT [{}] EDAC [{}]; {:.0} s",
            fmt(&at_last),
            fmt(&ed_last),
            fmt(&at_gap),
            fmt(&ed_gap),
            runs.secs
        ),
    ))
}

fn heatmap_direction(runs: &SeedRuns, train: &Dataset) -> Outcome {
    let cfg = benchmark();
    let Some((seed, run)) = runs
        .at
        .iter()
        .enumerate()
        .find(|(_, o)| overfitting_gap(&o.history).map(|g| g.gap > 0.0).unwrap_or(false))
    else {
        return Ok((false, "no AT run with a positive overfitting gap".into()));
    };
    let attack = &cfg.train.train_attack;
    let variance = |m: &ModelState| -> Result<f64, String> {
        let hm = compute_heatmap(m, train, attack, &mut ChaCha8Rng::seed_from_u64(8)).map_err(err)?;
        Ok(mean_label_variance(&hm))
    };
    let (vb, vl) = (variance(&run.best.model)?, variance(&run.last.model)?);
    let gap = certainty_gap(&run.best, &run.last, train, attack, 8).map_err(err)?;
    Ok((
        vl > vb && gap > 0.0,
        format!(
            "AT seed {seed} (best epoch {}): train label variance best {vb:.4} last {vl:.4}; certainty_gap {gap:.4}",
            run.best.epoch
        ),
    ))
}

fn sweep_shape(runs: &SeedRuns) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let ckpt = dir.path().join("at_last.ckpt");
    runs.at[0].last.save(&ckpt).map_err(err)?;
    let etas: Vec<f64> = (0..=20).map(|i| i as f64 / 10.0).collect();
    let overrides = Overrides {
        seed: None,
        out: Some(dir.path().to_path_buf()),
    };
    let rows = cmd_sweep(&benchmark_path(), &ckpt, &etas, &overrides).map_err(err)?;
    let ac: Vec<f64> = rows.iter().map(|r| r.ac_train).collect();
    let robust: Vec<f64> = rows.iter().map(|r| r.robust_acc_test).collect();
    let inversions = count_increases(&ac);
    let peak = peak_index(&robust).unwrap_or(0);
    let failed = rows.iter().filter(|r| r.failed).count();
    let interior = peak > 0 && peak + 1 < rows.len();
    Ok((
        failed == 0 && inversions <= 1 && interior,
        format!(
            "from the AT seed-0 last checkpoint: ac_train {:.3} -> {:.3} with {inversions} inversions; \
             robust peak {:.3} at eta={} ({}); robust at eta=0 {:.3}, eta=2 {:.3}",
            ac[0],
            ac[ac.len() - 1],
            robust[peak],
            etas[peak],
            if interior { "interior" } else { "at an end of the sweep" },
            robust[0],
            robust[robust.len() - 1]
        ),
    ))
}

fn determinism(train: &Dataset, test: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let text = std::fs::read_to_string(benchmark_path()).map_err(err)?;
    let short = text.replacen("epochs = 30", "epochs = 4", 1).replacen("method = \"at\"", "method = \"edac\"", 1);
    let cfg_path = dir.path().join("short.toml");
    std::fs::write(&cfg_path, short).map_err(err)?;
    let mut identical = true;
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for out in &outs {
        cmd_train(
            &cfg_path,
            &Overrides {
                seed: None,
                out: Some(out.clone()),
            },
        )
        .map_err(err)?;
    }
    for f in ["history.csv", "summary.json", "best.ckpt", "last.ckpt"] {
        identical &= std::fs::read(outs[0].join(f)).map_err(err)? == std::fs::read(outs[1].join(f)).map_err(err)?;
    }

    let cfg = ExperimentConfig::load(&cfg_path).map_err(err)?;
    let mut resumed = true;
    for method in [Method::At, Method::Edac, Method::EdacReg] {
        let mut full_cfg = cfg.train.clone();
        full_cfg.method = method;
        let full = train_run(&full_cfg, &cfg.model, train, test).map_err(err)?;
        let mut head_cfg = full_cfg.clone();
        head_cfg.epochs = 2;
        let head = train_run(&head_cfg, &cfg.model, train, test).map_err(err)?;
        let (lp, bp) = (dir.path().join("l.ckpt"), dir.path().join("b.ckpt"));
        head.last.save(&lp).map_err(err)?;
        head.best.save(&bp).map_err(err)?;
        let (last, best) = (Checkpoint::load(&lp).map_err(err)?, Checkpoint::load(&bp).map_err(err)?);
        let tail = resume_run(&full_cfg, train, test, &last, &best).map_err(err)?;
        let mut joined = head.history.clone();
        joined.extend(tail.history.iter().cloned());
        resumed &= tail.last.to_bytes() == full.last.to_bytes()
            && tail.best.to_bytes() == full.best.to_bytes()
            && numbers(&joined) == numbers(&full.history);
    }
    Ok((
        identical && resumed,
        format!(
            "repeated 4-epoch runs {}; save/load/resume at epoch 2 {} for at, edac, edac_reg",
            if identical { "byte-identical" } else { "differ" },
            if resumed { "matches the uninterrupted run bitwise" } else { "diverges" }
        ),
    ))
}

fn main() -> ExitCode {
    let total = Instant::now();
    let (train, test) = benchmark().datasets().expect("benchmark data");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failures += 1;
        }
        println!("{} [{n}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, "gradient correctness", gradients());
    report(2, "attack feasibility", feasibility());
    report(3, "PGD monotonicity", monotonicity());
    report(4, "reductions", reductions(&train, &test));
    report(5, "certainty descent", certainty_descent(&train, &test));
    report(6, "var/AC algebra", algebra());
    match seed_runs(&train, &test) {
        Ok(runs) => {
            report(7, "directional experiment", directional(&runs));
            report(8, "heatmap/variance direction", heatmap_direction(&runs, &train));
            report(9, "sweep shape", sweep_shape(&runs));
        }
        Err(e) => {
            for (n, name) in [(7, "directional experiment"), (8, "heatmap/variance direction"), (9, "sweep shape")] {
                report(n, name, Err(e.clone()));
            }
        }
    }
    report(10, "determinism and persistence", determinism(&train, &test));
    println!("{} of 10 criteria failed ({:.0} s)", failures, total.elapsed().as_secs_f64());
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
