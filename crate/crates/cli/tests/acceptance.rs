//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use qse_cli::commands::cmd_train;
use qse_cli::config::{bundled, RunConfig};
use qse_core::agent::{evaluate_policy, Evaluation};
use qse_core::env::{decode_state, encode_state, Action, EnvConfig, QseEnv, StartMode};
use qse_core::linalg::{hermitian_eig, ComplexMatrix, C64};
use qse_core::model::{
    self, fidelity, Axis, Bell, CentralProjector, DensityMatrix, ModelParams, Sign, SpinConvention,
};
use qse_core::nn::{load_params, Activation, Mlp, MlpSpec};
use qse_core::sequence::{
    combination_histogram, exhaustive_search, parse_sequence, replay_sequence, unique_successful,
    verify_steady_state, SearchOptions, SequenceRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FIDELITY_TOL: f64 = 5e-3;
const RATE_TOL_PP: f64 = 0.1;

struct Row {
    target: Bell,
    sequence: &'static str,
    fidelity: f64,
    rate_percent: f64,
}

const REFERENCE_SEQUENCES: [Row; 6] = [
    Row { target: Bell::PhiPlus, sequence: "U2 Px+ U Px+ U Px- U2 Px+ U Px+", fidelity: 0.99673, rate_percent: 2.811 },
    Row { target: Bell::PhiMinus, sequence: "U2 Px+ U Px+ U Px- U Py- U Px- U Px-", fidelity: 0.99803, rate_percent: 0.998 },
    Row { target: Bell::PsiPlus, sequence: "U Px+ U2 Px+ U Px+ U Px-", fidelity: 1.00000, rate_percent: 20.313 },
    Row { target: Bell::PsiMinus, sequence: "U2 Px+ U Px+ U Px+ U Px+ U Px+", fidelity: 0.99454, rate_percent: 25.275 },
    Row { target: Bell::PsiMinus, sequence: "U2 Py- U Py- U Py- U Py- U Py-", fidelity: 0.99160, rate_percent: 12.713 },
    Row { target: Bell::PsiMinus, sequence: "U Px+ U Py- U Py- U Py- U Py-", fidelity: 0.99184, rate_percent: 12.707 },
];

/// Random-start copies, (start, sequence, success rate in percent); all reach
/// fidelity 0.99227.
const RANDOM_START_SEQUENCES: [(&str, &str, f64); 6] = [
    ("x+", "U Px+ U Px+ U Px+ U Px+", 25.391),
    ("x+", "U Py- U Py- U Py- U Py- U Py-", 12.695),
    ("x+", "U Py- U Py- U Py- U Px+ U Px+", 6.348),
    ("x-", "U Px- U Px- U Px- U Px-", 25.391),
    ("x-", "U Py- U Py- U Py- U Py- U Py-", 12.695),
    ("x-", "U Py- U Py- U Py- U Px+ U Px+", 6.348),
];
const RANDOM_START_FIDELITY: f64 = 0.99227;

type Outcome = Result<String, String>;

fn fixed_env(target: Bell) -> QseEnv {
    QseEnv::new(EnvConfig::fixed_start(target, 50)).unwrap()
}

fn replay(env: &QseEnv, start: StartMode, text: &str) -> SequenceRecord {
    replay_sequence(env, start, &parse_sequence(text).unwrap()).unwrap()
}

fn within(rec: &SequenceRecord, fidelity: f64, rate_percent: f64) -> bool {
    (rec.final_fidelity - fidelity).abs() <= FIDELITY_TOL
        && (rec.success_rate_percent() - rate_percent).abs() <= RATE_TOL_PP
}

fn convention_sweep() -> Outcome {
    let row = &REFERENCE_SEQUENCES[3];
    let mut matches = Vec::new();
    let mut report = Vec::new();
    for central_scale in [1.0, 0.5] {
        for bath_scale in [0.5, 1.0] {
            let mut cfg = EnvConfig::fixed_start(row.target, 50);
            cfg.model.convention = SpinConvention { central_scale, bath_scale };
            let env = QseEnv::new(cfg).unwrap();
            let rec = replay(&env, StartMode::FixedXplus, row.sequence);
            report.push(format!(
                "S={central_scale}σz I={bath_scale}σ: F={:.5} rate={:.3}%",
                rec.final_fidelity,
                rec.success_rate_percent()
            ));
            if within(&rec, row.fidelity, row.rate_percent) {
                matches.push((central_scale, bath_scale));
            }
        }
    }
    let detail = report.join("; ");
    let default = SpinConvention::default();
    if matches == [(default.central_scale, default.bath_scale)] {
        Ok(format!("only the frozen convention matches; {detail}"))
    } else {
        Err(format!("matching conventions {matches:?}; {detail}"))
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut bad = Vec::new();
    let mut lines = Vec::new();
    for row in &REFERENCE_SEQUENCES {
        let rec = replay(&fixed_env(row.target), StartMode::FixedXplus, row.sequence);
        lines.push(format!(
            "{}: {:.5}/{:.3}%",
            row.target,
            rec.final_fidelity,
            rec.success_rate_percent()
        ));
        if !within(&rec, row.fidelity, row.rate_percent) {
            bad.push(row.sequence);
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    let detail = format!("{} in {elapsed:.3}s", lines.join(", "));
    if bad.is_empty() && elapsed < 1.0 {
        Ok(detail)
    } else {
        Err(format!("rows out of tolerance {bad:?}; {detail}"))
    }
}

fn criterion_2() -> Outcome {
    // the random-start copies were trained and evaluated with τ = 2
    let mut cfg = EnvConfig::fixed_start(Bell::PsiMinus, 50);
    cfg.model.tau = 2.0;
    let env = QseEnv::new(cfg).unwrap();
    let mut bad = Vec::new();
    let mut lines = Vec::new();
    for (start, seq, rate) in RANDOM_START_SEQUENCES {
        let rec = replay(&env, StartMode::named(start).unwrap(), seq);
        lines.push(format!("{start} {:.5}/{:.3}%", rec.final_fidelity, rec.success_rate_percent()));
        if !within(&rec, RANDOM_START_FIDELITY, rate) {
            bad.push(format!("{start}: {seq}"));
        }
    }
    // same rows with τ = 1 for the record
    let tau1 = fixed_env(Bell::PsiMinus);
    let tau1_fail = RANDOM_START_SEQUENCES
        .iter()
        .filter(|(start, seq, rate)| {
            !within(&replay(&tau1, StartMode::named(start).unwrap(), seq), RANDOM_START_FIDELITY, *rate)
        })
        .count();
    let detail = format!(
        "τ=2: {}; at τ=1 {tau1_fail} of {} rows miss",
        lines.join(", "),
        RANDOM_START_SEQUENCES.len()
    );
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("out of tolerance {bad:?}; {detail}"))
    }
}

fn criterion_3() -> Outcome {
    let rec = replay(&fixed_env(Bell::PsiMinus), StartMode::FixedXplus, REFERENCE_SEQUENCES[3].sequence);
    let f: Vec<f64> = rec.per_step.iter().map(|s| s.fidelity).collect();
    let d: Vec<f64> = rec.per_step.iter().map(|s| s.trace_distance).collect();
    let fid_mono = f.windows(2).all(|w| w[1] >= w[0]);
    let td_mono = d.windows(2).all(|w| w[1] <= w[0]);
    let purity = rec.per_step.last().unwrap().purity;
    let detail = format!(
        "fidelity monotone {fid_mono}, trace distance monotone {td_mono}, final purity {purity:.5} (need >= 0.98)"
    );
    if fid_mono && td_mono && purity >= 0.98 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Outcome {
    let rec = replay(&fixed_env(Bell::PhiPlus), StartMode::FixedXplus, REFERENCE_SEQUENCES[0].sequence);
    let f: Vec<f64> = rec.per_step.iter().map(|s| s.fidelity).collect();
    let detail = format!(
        "per-step fidelity {:?}",
        f.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()
    );
    if f[3] < 0.2 && rec.final_fidelity > 0.99 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let n2 = verify_steady_state(&ModelParams::linear_chain(2, 0.5, 1.0), 1, 5).map_err(|e| e.to_string())?;
    let n4 = verify_steady_state(&ModelParams::linear_chain(4, 0.5, 1.0), 1, 10).map_err(|e| e.to_string())?;
    let reached = n2.iter().position(|p| p.fidelity >= 0.99).map(|i| i + 1);
    let f4: Vec<f64> = n4.iter().map(|p| p.fidelity).collect();
    let mono = f4.windows(2).all(|w| w[1] >= w[0]);
    let detail = format!(
        "N=2 reaches 0.99 at projection {reached:?} (final {:.5}); N=4 fidelity {:.4} -> {:.4}, monotone {mono}",
        n2.last().unwrap().fidelity,
        f4[0],
        f4[f4.len() - 1]
    );
    if reached.is_some() && mono && f4[f4.len() - 1] > f4[0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(agent_records: &[SequenceRecord]) -> Outcome {
    let found = exhaustive_search(&fixed_env(Bell::PsiPlus), SearchOptions::new(5)).map_err(|e| e.to_string())?;
    let hit = found
        .iter()
        .find(|r| r.final_fidelity >= 0.999 && (r.success_rate_percent() - 20.313).abs() <= RATE_TOL_PP);
    let Some(hit) = hit else {
        return Err(format!("no Ψ⁺ sequence with fidelity >= 0.999 and rate 20.313% among {}", found.len()));
    };

    // every short successful agent sequence must be in the unpruned oracle
    let mut opts = SearchOptions::new(5);
    opts.rate_cutoff = 0.0;
    let oracle: HashSet<Vec<Action>> = exhaustive_search(&fixed_env(Bell::PsiMinus), opts)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| r.actions)
        .collect();
    let short: Vec<&SequenceRecord> =
        agent_records.iter().filter(|r| r.success && r.len() <= 5).collect();
    let missing: Vec<String> =
        short.iter().filter(|r| !oracle.contains(&r.actions)).map(|r| r.notation()).collect();
    let detail = format!(
        "Ψ⁺ oracle hit '{}' F={:.6} rate={:.3}%; {} short successful agent episodes, {} unique oracle Ψ⁻ sequences",
        hit.notation(),
        hit.final_fidelity,
        hit.success_rate_percent(),
        short.len(),
        oracle.len()
    );
    if short.is_empty() {
        Err(format!("agent produced no successful sequence of length <= 5; {detail}"))
    } else if missing.is_empty() {
        Ok(detail)
    } else {
        Err(format!("agent sequences missing from oracle {missing:?}; {detail}"))
    }
}

struct SeedRun {
    seed: u64,
    net: Mlp,
    trained: Evaluation,
    baseline: Evaluation,
    train_secs: f64,
}

fn train_and_evaluate(cfg: &RunConfig, dir: &Path) -> SeedRun {
    let t = Instant::now();
    let out = cmd_train(cfg, dir).expect("training");
    let train_secs = t.elapsed().as_secs_f64();
    let env = cfg.build_env().unwrap();
    let (net, _) = load_params(&out.final_path, &cfg.mlp_spec()).unwrap();
    let ev = &cfg.evaluation;
    let trained = evaluate_policy(&net, &env, 0.1, 500, ev.seed, 1).unwrap();
    let baseline = evaluate_policy(&net, &env, 1.0, 500, ev.seed, 1).unwrap();
    SeedRun { seed: cfg.master_seed, net, trained, baseline, train_secs }
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for r in runs {
        let (tm, bm) = (r.trained.mean_return(), r.baseline.mean_return());
        let (ts, bs) = (r.trained.success_fraction(), r.baseline.success_fraction());
        ok &= tm >= bm + 10.0 && ts >= 0.30 && bs <= 0.10 && r.train_secs <= 7200.0;
        lines.push(format!(
            "seed {}: return {tm:.2} vs {bm:.2}, success {ts:.3} vs {bs:.3}, trained in {:.0}s",
            r.seed, r.train_secs
        ));
    }
    let detail = lines.join("; ");
    if ok { Ok(detail) } else { Err(detail) }
}

/// Pair statistics over the unique successful sequences among 3000 nearly
/// greedy (ε = 0.01) episodes of each trained agent.
fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let env = fixed_env(Bell::PsiMinus);
    let superposition = |a: Action| !matches!(a, Action::PZ_PLUS | Action::PZ_MINUS);
    let mut ok = true;
    let mut lines = Vec::new();
    for r in runs {
        let ev = evaluate_policy(&r.net, &env, 0.01, 3000, 8_000 + r.seed, 1).map_err(|e| e.to_string())?;
        let unique = unique_successful(&ev.records);
        let hist = combination_histogram(&unique);
        let total = hist.total();
        let count = |pred: &dyn Fn(Action, Action) -> bool| -> usize {
            hist.counts.iter().filter(|((a, b), _)| pred(*a, *b)).map(|(_, c)| c).sum()
        };
        let in_set = count(&|a, b| superposition(a) && superposition(b));
        let pz_plus = count(&|a, b| a == Action::PZ_PLUS || b == Action::PZ_PLUS);
        let frac_in = in_set as f64 / total.max(1) as f64;
        let frac_pz = pz_plus as f64 / total.max(1) as f64;
        ok &= total > 0 && frac_in >= 0.90 && frac_pz < 0.01;
        let top: Vec<String> = hist.ranked().iter().take(2).map(|((a, b), c)| format!("({a},{b})x{c}")).collect();
        lines.push(format!(
            "seed {}: {} unique successful, {total} pairs, {:.1}% x/y/noop, {:.2}% Pz+, top {}",
            r.seed,
            unique.len(),
            100.0 * frac_in,
            100.0 * frac_pz,
            top.join(" ")
        ));
    }
    let detail = lines.join("; ");
    if ok { Ok(detail) } else { Err(detail) }
}

fn random_density(dim: usize, rng: &mut ChaCha8Rng) -> DensityMatrix {
    let g: Vec<C64> = (0..dim * dim)
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let g = ComplexMatrix::from_vec(dim, dim, g);
    let m = g.matmul_adjoint(&g);
    let tr = m.trace().re;
    DensityMatrix::new(m.scale_real(1.0 / tr)).unwrap()
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let env = QseEnv::new(EnvConfig::random_start(Bell::PsiMinus, 50)).unwrap();
    let cfg = env.config();
    let n = cfg.model.n_bath;
    let dim = cfg.model.dim();

    let mut worst_unitary = 0.0_f64;
    for tau in [0.5, 1.0, 2.0, 3.7] {
        let u = model::build_propagator(&cfg.model, tau).unwrap();
        worst_unitary = worst_unitary.max(u.unitarity_error());
    }
    let mut worst_completeness = 0.0_f64;
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let p = CentralProjector::new(axis, Sign::Plus, n);
        let m = CentralProjector::new(axis, Sign::Minus, n);
        let sum = p.matrix() + m.matrix();
        worst_completeness = worst_completeness.max(sum.distance(&ComplexMatrix::identity(dim)));
    }

    let (mut worst_trace, mut min_eig, mut worst_sym, mut worst_round) = (0.0_f64, f64::INFINITY, 0.0_f64, 0.0_f64);
    let mut state = env.reset(&mut rng);
    for _ in 0..1000 {
        let a = Action::new(rng.random_range(0..Action::COUNT)).unwrap();
        let step = env.step(&state, a).unwrap();
        let rho = &step.next.rho;
        worst_trace = worst_trace.max((rho.matrix().trace().re - 1.0).abs());
        min_eig = min_eig.min(hermitian_eig(rho.matrix()).unwrap().eigenvalues[0]);
        let bath = rho.trace_out_first(2).unwrap();
        let sigma = random_density(bath.dim(), &mut rng);
        let f1 = fidelity(&bath, &sigma).unwrap();
        let f2 = fidelity(&sigma, &bath).unwrap();
        worst_sym = worst_sym.max((f1 - f2).abs());
        let enc = encode_state(rho);
        let back = decode_state(&enc, dim).unwrap();
        worst_round = worst_round.max(back.matrix().distance(rho.matrix()));
        state = if step.done { env.reset(&mut rng) } else { step.next };
    }
    let elapsed = t.elapsed().as_secs_f64();
    let detail = format!(
        "trace {worst_trace:.1e}, min eig {min_eig:.1e}, unitarity {worst_unitary:.1e}, completeness {worst_completeness:.1e}, fidelity symmetry {worst_sym:.1e}, round trip {worst_round:.1e}, {elapsed:.2}s"
    );
    let ok = worst_trace <= 1e-9
        && min_eig >= -1e-9
        && worst_unitary <= 1e-10
        && worst_completeness <= 1e-12
        && worst_sym <= 1e-8
        && worst_round <= 1e-12
        && elapsed < 30.0;
    if ok { Ok(detail) } else { Err(detail) }
}

fn criterion_10() -> Outcome {
    let spec = MlpSpec {
        input_size: 70,
        hidden: vec![64, 32],
        output_size: 7,
        activation: Activation::Relu,
        init_seed: 10,
    };
    let mut net = Mlp::new(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let inputs: Vec<Vec<f64>> = (0..4).map(|_| (0..70).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<(Action, f64)> = (0..4)
            .map(|_| (Action::new(rng.random_range(0..7)).unwrap(), rng.random_range(-2.0..2.0)))
            .collect();
        let (_, grads) = net.loss_and_gradients(&inputs, &targets).unwrap();
        let analytic = grads.flatten();
        let params = net.flatten();
        for (i, &g) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            net.set_flat(&p).unwrap();
            let up = net.batch_loss(&inputs, &targets).unwrap();
            p[i] -= 2.0 * h;
            net.set_flat(&p).unwrap();
            let down = net.batch_loss(&inputs, &targets).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        net.set_flat(&params).unwrap();
    }
    let detail = format!("max relative error {worst:.2e} over {} parameters × 10 batches", net.flatten().len());
    if worst < 1e-4 { Ok(detail) } else { Err(detail) }
}

fn criterion_11(first_curve: &Path, cfg: &RunConfig, dir: &Path) -> Outcome {
    let again = cmd_train(cfg, dir).map_err(|e| e.to_string())?;
    let a = std::fs::read(first_curve).map_err(|e| e.to_string())?;
    let b = std::fs::read(&again.curve_path).map_err(|e| e.to_string())?;
    let detail = format!("{} bytes vs {} bytes", a.len(), b.len());
    if a == b { Ok(detail) } else { Err(format!("tables differ; {detail}")) }
}

fn catch<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    panic::catch_unwind(AssertUnwindSafe(f)).map_err(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        format!("panicked: {msg}")
    })
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch(f).and_then(|r| r)
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, outcome));
    };

    report("convention sweep", guarded(convention_sweep));
    report("criterion 1 (reference sequence replay)", guarded(criterion_1));
    report("criterion 2 (random-start sequence replay)", guarded(criterion_2));
    report("criterion 3 (Psi- trajectory properties)", guarded(criterion_3));
    report("criterion 4 (Phi+ fidelity dip)", guarded(criterion_4));
    report("criterion 5 (steady state)", guarded(criterion_5));
    report("criterion 9 (numerical invariants)", guarded(criterion_9));
    report("criterion 10 (gradient check)", guarded(criterion_10));

    let tmp = tempfile::tempdir().unwrap();
    let base = bundled("psi_minus_fixed").unwrap();
    let runs: Vec<SeedRun> = std::thread::scope(|s| {
        let handles: Vec<_> = [11u64, 22, 33]
            .into_iter()
            .map(|seed| {
                let mut cfg = base.clone();
                cfg.master_seed = seed;
                let dir = tmp.path().join(format!("seed_{seed}"));
                s.spawn(move || catch(|| train_and_evaluate(&cfg, &dir)))
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| match h.join().expect("thread") {
                Ok(run) => Some(run),
                Err(e) => {
                    println!("training failed: {e}");
                    None
                }
            })
            .collect()
    });
    let all_records: Vec<SequenceRecord> =
        runs.iter().flat_map(|r| r.trained.records.iter().cloned()).collect();
    if runs.len() == 3 {
        report("criterion 6 (exhaustive oracle consistency)", guarded(|| criterion_6(&all_records)));
        report("criterion 7 (learning beats random)", guarded(|| criterion_7(&runs)));
        report("criterion 8 (action pair statistics)", guarded(|| criterion_8(&runs)));
    } else {
        for name in ["criterion 6 (exhaustive oracle consistency)", "criterion 7 (learning beats random)", "criterion 8 (action pair statistics)"] {
            report(name, Err("training failed".into()));
        }
    }
    let mut cfg11 = base.clone();
    cfg11.master_seed = 11;
    report(
        "criterion 11 (determinism)",
        guarded(|| criterion_11(&tmp.path().join("seed_11/learning_curve.tsv"), &cfg11, &tmp.path().join("seed_11_again"))),
    );

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
