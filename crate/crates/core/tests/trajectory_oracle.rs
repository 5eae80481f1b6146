//! Replays checked against an independent state-vector simulation.
//!
//! For two bath spins with g = (1, 0, 0) the Hamiltonian splits by the
//! central spin's z value s = ±1 into commuting single-spin terms
//! s·X + ω·Z, so U = Σ_s |s⟩⟨s| ⊗ u_s ⊗ u_s with u_s in closed form. The
//! maximally mixed bath is carried as four weighted pure branches.

use num_complex::Complex64 as C;
use proptest::prelude::*;
use qse_core::env::{Action, EnvConfig, QseEnv, StartMode};
use qse_core::model::Bell;
use qse_core::sequence::{parse_sequence, replay_sequence, SequenceError};

const OMEGA: f64 = 0.5;

type Ket = [C; 8];

fn single_spin_propagator(s: f64, tau: f64) -> [[C; 2]; 2] {
    let r = (1.0 + OMEGA * OMEGA).sqrt();
    let (c, sn) = ((r * tau).cos(), (r * tau).sin() / r);
    // cos(rτ) I − i sin(rτ)/r (s X + ω Z)
    [
        [C::new(c, -sn * OMEGA), C::new(0.0, -sn * s)],
        [C::new(0.0, -sn * s), C::new(c, sn * OMEGA)],
    ]
}

fn evolve(psi: &Ket, tau: f64) -> Ket {
    let mut out = [C::new(0.0, 0.0); 8];
    for central in 0..2 {
        let s = if central == 0 { 1.0 } else { -1.0 };
        let u = single_spin_propagator(s, tau);
        for b1 in 0..2 {
            for b2 in 0..2 {
                let mut acc = C::new(0.0, 0.0);
                for c1 in 0..2 {
                    for c2 in 0..2 {
                        acc += u[b1][c1] * u[b2][c2] * psi[central * 4 + c1 * 2 + c2];
                    }
                }
                out[central * 4 + b1 * 2 + b2] = acc;
            }
        }
    }
    out
}

fn central_ket(action: Action) -> Option<[C; 2]> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let (one, zero) = (C::new(1.0, 0.0), C::new(0.0, 0.0));
    Some(match action.name() {
        "Pz+" => [one, zero],
        "Pz-" => [zero, one],
        "Px+" => [C::new(h, 0.0), C::new(h, 0.0)],
        "Px-" => [C::new(h, 0.0), C::new(-h, 0.0)],
        "Py+" => [C::new(h, 0.0), C::new(0.0, h)],
        "Py-" => [C::new(h, 0.0), C::new(0.0, -h)],
        _ => return None,
    })
}

fn project(psi: &Ket, e: [C; 2]) -> Ket {
    let mut out = [C::new(0.0, 0.0); 8];
    for b in 0..4 {
        let amp = e[0].conj() * psi[b] + e[1].conj() * psi[4 + b];
        out[b] = e[0] * amp;
        out[4 + b] = e[1] * amp;
    }
    out
}

fn norm_sqr(psi: &Ket) -> f64 {
    psi.iter().map(|z| z.norm_sqr()).sum()
}

fn bell(target: Bell) -> [C; 4] {
    let h = C::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let z = C::new(0.0, 0.0);
    match target {
        Bell::PhiPlus => [h, z, z, h],
        Bell::PhiMinus => [h, z, z, -h],
        Bell::PsiPlus => [z, h, h, z],
        Bell::PsiMinus => [z, h, -h, z],
    }
}

struct OracleResult {
    probs: Vec<f64>,
    fidelities: Vec<f64>,
}

/// `None` when some branch probability falls to the floor.
fn oracle(start: [C; 2], actions: &[Action], tau: f64, target: Bell) -> Option<OracleResult> {
    let mut branches: Vec<Ket> = (0..4)
        .map(|b| {
            let mut k = [C::new(0.0, 0.0); 8];
            k[b] = start[0];
            k[4 + b] = start[1];
            k
        })
        .collect();
    let t = bell(target);
    let mut probs = Vec::new();
    let mut fidelities = Vec::new();
    for &a in actions {
        let before: f64 = branches.iter().map(norm_sqr).sum();
        branches = branches.iter().map(|k| evolve(k, tau)).collect();
        if let Some(e) = central_ket(a) {
            branches = branches.iter().map(|k| project(k, e)).collect();
        }
        let after: f64 = branches.iter().map(norm_sqr).sum();
        let p = after / before;
        if p <= 1e-8 {
            return None;
        }
        probs.push(p);
        // ⟨t|ρ_bath|t⟩ summed over branches and central components
        let overlap: f64 = branches
            .iter()
            .map(|k| {
                (0..2)
                    .map(|c| {
                        (0..4)
                            .map(|b| t[b].conj() * k[c * 4 + b])
                            .sum::<C>()
                            .norm_sqr()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / after;
        fidelities.push(overlap.sqrt());
    }
    Some(OracleResult { probs, fidelities })
}

fn xplus() -> [C; 2] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [C::new(h, 0.0), C::new(h, 0.0)]
}

fn xminus() -> [C; 2] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [C::new(h, 0.0), C::new(-h, 0.0)]
}

fn env(target: Bell, tau: f64) -> QseEnv {
    let mut cfg = EnvConfig::fixed_start(target, 50);
    cfg.model.tau = tau;
    QseEnv::new(cfg).unwrap()
}

fn assert_matches(target: Bell, tau: f64, start: StartMode, ket: [C; 2], actions: &[Action]) {
    let rec = replay_sequence(&env(target, tau), start, actions);
    match (oracle(ket, actions, tau, target), rec) {
        (Some(o), Ok(rec)) => {
            for (i, s) in rec.per_step.iter().enumerate() {
                assert!((s.success_prob - o.probs[i]).abs() < 1e-10, "prob at step {i}");
                assert!((s.fidelity - o.fidelities[i]).abs() < 1e-7, "fidelity at step {i}");
            }
            let rate: f64 = o.probs.iter().product();
            assert!((rec.success_rate - rate).abs() < 1e-10);
        }
        (None, Err(SequenceError::Underflow { .. })) => {}
        (o, r) => panic!("oracle {} vs replay {:?}", o.is_some(), r.map(|r| r.success_rate)),
    }
}

#[test]
fn reference_rows_agree_with_oracle() {
    let rows = [
        (Bell::PhiPlus, "U2 Px+ U Px+ U Px- U2 Px+ U Px+"),
        (Bell::PhiMinus, "U2 Px+ U Px+ U Px- U Py- U Px- U Px-"),
        (Bell::PsiPlus, "U Px+ U2 Px+ U Px+ U Px-"),
        (Bell::PsiMinus, "U2 Px+ U Px+ U Px+ U Px+ U Px+"),
        (Bell::PsiMinus, "U2 Py- U Py- U Py- U Py- U Py-"),
        (Bell::PsiMinus, "U Px+ U Py- U Py- U Py- U Py-"),
    ];
    for (target, seq) in rows {
        assert_matches(target, 1.0, StartMode::FixedXplus, xplus(), &parse_sequence(seq).unwrap());
    }
}

#[test]
fn random_start_rows_agree_with_oracle() {
    let x_minus = StartMode::named("x-").unwrap();
    for seq in ["U Px- U Px- U Px- U Px-", "U Py- U Py- U Py- U Px+ U Px+"] {
        assert_matches(Bell::PsiMinus, 2.0, x_minus, xminus(), &parse_sequence(seq).unwrap());
    }
    assert_matches(
        Bell::PsiMinus,
        2.0,
        StartMode::FixedXplus,
        xplus(),
        &parse_sequence("U Px+ U Px+ U Px+ U Px+").unwrap(),
    );
}

#[test]
fn oracle_reports_fatal_z_flip() {
    let actions = parse_sequence("Pz+ Pz-").unwrap();
    assert!(oracle(xplus(), &actions, 1.0, Bell::PsiMinus).is_none());
    assert_matches(Bell::PsiMinus, 1.0, StartMode::FixedXplus, xplus(), &actions);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_sequences_agree_with_oracle(
        idx in proptest::collection::vec(0usize..7, 1..10),
        target in 0usize..4,
        tau in prop_oneof![Just(1.0), Just(2.0), 0.1f64..3.0],
    ) {
        let actions: Vec<Action> = idx.into_iter().map(|i| Action::new(i).unwrap()).collect();
        assert_matches(Bell::ALL[target], tau, StartMode::FixedXplus, xplus(), &actions);
    }
}
