mod common;

use common::*;
use graphon_nash::lattice::{full_tree_of, FactorTag};
use graphon_nash::model::{DriftFamily, DriftModel, Mode};
use graphon_nash::n_agent_solver::{solve_n_agent_bsde, NAgentBsdeSolution};
use graphon_nash::verify::{
    best_response, bmo_sq, certify_nash, certify_profile, check_martingale_optimality, conditional_product_check,
    convergence_experiment, evaluate_strategy, finite_game_from_graphon, random_perturbations, shifted_strategy,
    ConvergenceRow, GridConfig, StrategyGrid, VerifyError,
};
use graphon_nash::{AdaptedProcess, ConstraintSet, GameSpec, Graphon, Lattice};
use proptest::prelude::*;

fn idio(n: usize) -> Vec<FactorTag> {
    (0..n).map(|c| FactorTag::Idiosyncratic { owner: 0, component: c }).collect()
}

/// Path enumeration of `sup_node E[Σ_{s≥t}|z_s|²dt | node]` on a full tree.
fn bmo_by_paths(lat: &Lattice, z: &AdaptedProcess) -> f64 {
    let steps = lat.steps();
    let dt = lat.dt();
    let mut sup: f64 = 0.0;
    for t in 0..steps {
        for k in 0..lat.nodes_at(t) {
            let mut frontier = vec![(k, 1.0)];
            let mut acc = 0.0;
            for s in t..steps {
                let mut next = Vec::new();
                for (node, p) in &frontier {
                    acc += p * z.get(s, *node).iter().map(|v| v * v).sum::<f64>() * dt;
                    for m in 0..lat.branching() {
                        next.push((lat.child(s, *node, m), p / lat.branching() as f64));
                    }
                }
                frontier = next;
            }
            sup = sup.max(acc);
        }
    }
    sup
}

#[test]
fn bmo_matches_path_enumeration() {
    let lat = Lattice::new(4, 1.5, idio(2), false).unwrap();
    let z = AdaptedProcess::from_fn(&lat, 2, 3, |t, k| vec![((k * 7 + t) % 5) as f64 - 2.0, (k as f64).sin()]);
    let a = bmo_sq(&lat, &z);
    let b = bmo_by_paths(&lat, &z);
    assert!((a - b).abs() < 1e-13 * b.max(1.0), "{a} vs {b}");
}

#[test]
fn bmo_agrees_between_recombining_and_full_trees() {
    let rec = Lattice::new(5, 1.0, idio(1), true).unwrap();
    let z = AdaptedProcess::from_fn(&rec, 1, 4, |t, k| vec![(k as f64 - t as f64 * 0.5).powi(2) * 0.1]);
    let (full, map) = full_tree_of(&rec).unwrap();
    let zf = AdaptedProcess::from_fn(&full, 1, 4, |t, k| z.get(t, map(t, k)).to_vec());
    assert!((bmo_sq(&rec, &z) - bmo_sq(&full, &zf)).abs() < 1e-14);
}

#[test]
fn product_check_needs_a_full_tree() {
    let rec = Lattice::new(3, 1.0, vec![FactorTag::Common], true).unwrap();
    let f = AdaptedProcess::zeros(&rec, 1, 2);
    assert!(matches!(conditional_product_check(&rec, &f, &f), Err(VerifyError::Invalid(_))));
}

fn two_agents(rho: f64) -> GameSpec {
    let agents = vec![
        scalar_agent(-1.0, 1.2, 0.3, last_move(0.08, 0.04), ConstraintSet::Box { lower: vec![-0.5], upper: vec![2.0] }),
        scalar_agent(0.4, 0.9, 0.25, last_move(0.05, -0.03), ConstraintSet::FullSpace),
    ];
    finite(agents, vec![vec![0.0, 0.7], vec![0.7, 0.0]], rho, 4, false)
}

/// `E[(1/γ)X_i^κ Π_{j≠i} X_j^{−c_ij}]` by enumerating every joint path.
fn payoff_by_paths(spec: &GameSpec, sol: &NAgentBsdeSolution, profile: &[AdaptedProcess], i: usize) -> f64 {
    let n = sol.n();
    let steps = spec.steps;
    let dt = spec.horizon / steps as f64;
    let b = 1usize << n;
    let gm = spec.agent(i).gamma;
    let c: Vec<f64> = (0..n).map(|j| spec.rho * gm * spec.lambda_n(i, j)).collect();
    let mut total = 0.0;
    let paths = b.pow(steps as u32);
    for path in 0..paths {
        let moves: Vec<usize> = (0..steps).map(|t| (path / b.pow(t as u32)) % b).collect();
        let mut log_x: Vec<f64> = (0..n).map(|j| spec.agent(j).x0.ln()).collect();
        let mut own = vec![0usize; n];
        for t in 0..steps {
            for j in 0..n {
                let a = spec.agent(j);
                let s = a.sigma[0][0];
                let theta = match &a.mu {
                    DriftModel::LastMove { base, amp } => {
                        let last = if t == 0 { 0.0 } else if own[j] & 1 == 1 { 1.0 } else { -1.0 };
                        (base[0] + amp[0] * last) / s
                    }
                    _ => unreachable!(),
                };
                let h = s * profile[j].get(t, own[j])[0];
                let up = (moves[t] >> j) & 1;
                let xi = if up == 1 { dt.sqrt() } else { -dt.sqrt() };
                log_x[j] += (h * theta - 0.5 * h * h) * dt + h * xi;
                own[j] = (own[j] << 1) | up;
            }
        }
        let kappa = gm - c[i];
        let mut e = kappa * log_x[i];
        for j in 0..n {
            if j != i {
                e -= c[j] * log_x[j];
            }
        }
        total += e.exp() / gm;
    }
    total / paths as f64
}

#[test]
fn strategy_values_match_path_enumeration() {
    let spec = two_agents(0.4);
    let sol = solve_n_agent_bsde(&spec).unwrap();
    let profile: Vec<AdaptedProcess> = sol
        .own
        .iter()
        .map(|o| AdaptedProcess::from_fn(&o.lattice, 1, o.lattice.steps() - 1, |t, k| vec![0.2 + 0.1 * ((k + t) % 3) as f64]))
        .collect();
    for i in 0..2 {
        let got = evaluate_strategy(&spec, &sol, &profile, i, &profile[i]).unwrap();
        let want = payoff_by_paths(&spec, &sol, &profile, i);
        assert!((got - want).abs() < 1e-13 * want.abs(), "agent {i}: {got} vs {want}");
    }
}

#[test]
fn equilibrium_value_is_close_to_bsde_value() {
    let spec = two_agents(0.4);
    let sol = solve_n_agent_bsde(&spec).unwrap();
    let profile: Vec<AdaptedProcess> = sol.own.iter().map(|o| o.pi.clone()).collect();
    for i in 0..2 {
        let v = evaluate_strategy(&spec, &sol, &profile, i, &profile[i]).unwrap();
        // lattice dynamic programme and BSDE differ by O(dt)
        assert!((v - sol.values[i]).abs() < 0.05 * sol.values[i].abs(), "{v} vs {}", sol.values[i]);
    }
}

#[test]
fn martingale_process_starts_at_value() {
    let spec = two_agents(0.3);
    let sol = solve_n_agent_bsde(&spec).unwrap();
    for i in 0..2 {
        let pert = random_perturbations(&sol, i, 5, 0.3, 17 + i as u64);
        let rep = check_martingale_optimality(&spec, &sol, i, &pert).unwrap();
        assert!((rep.r0 - rep.v0).abs() <= 1e-14 * rep.v0.abs());
        assert!(rep.max_residual <= 1e-11, "{:e}", rep.max_residual);
        assert!(rep.passed, "{rep:?}");
        assert!(rep.strict_nodes > 0);
    }
    assert!(check_martingale_optimality(&spec, &sol, 2, &[]).is_err());
}

#[test]
fn certificate_passes_at_equilibrium_and_flags_a_shift() {
    let spec = two_agents(0.3);
    let sol = solve_n_agent_bsde(&spec).unwrap();
    let grid = GridConfig { points: 61, lower: Some(-0.5), upper: Some(2.5) };
    let cert = certify_nash(&spec, &sol, &grid).unwrap();
    assert!(cert.passed, "{cert:?}");
    assert!(cert.gains.iter().all(|g| *g >= 0.0));
    assert!(cert.martingale_residuals.as_ref().unwrap().iter().all(|r| *r <= 1e-11));

    let shifted: Vec<AdaptedProcess> = sol
        .own
        .iter()
        .map(|o| shifted_strategy(&o.pi, &o.lattice, &o.model.params.constraint, 0.5))
        .collect();
    let bad = certify_profile(&spec, &sol, &shifted, &grid).unwrap();
    assert!(!bad.passed && bad.max_gain() > bad.epsilon);
}

#[test]
fn grids() {
    let set = ConstraintSet::Box { lower: vec![0.0], upper: vec![1.0] };
    let g = StrategyGrid::for_set(&set, 1, 11).unwrap();
    assert_eq!(g.points.len(), 11);
    assert!((g.spacing - 0.1).abs() < 1e-15);
    let full = StrategyGrid::for_set(&ConstraintSet::FullSpace, 1, 3).unwrap();
    assert_eq!(full.points, vec![vec![-5.0], vec![0.0], vec![5.0]]);
    assert_eq!(StrategyGrid::from_points(vec![]), Err(VerifyError::EmptyGrid));
    let far = ConstraintSet::Box { lower: vec![2.0], upper: vec![3.0] };
    assert_eq!(StrategyGrid::uniform(&[0.0], &[1.0], 5, &far), Err(VerifyError::EmptyGrid));
}

fn graphon_base(rho: f64) -> GameSpec {
    let fam = family(
        lin(-1.5, 1.0),
        lin(0.9, 0.4),
        DriftFamily::LastMove { base: linv(0.05, 0.02), amp: linv(0.02, 0.0) },
        0.3,
        ConstraintSet::FullSpace,
    );
    graphon_spec(fam, Graphon::UniformAttachment, 8, rho, 4)
}

#[test]
fn finite_game_from_graphon_samples_weights() {
    let spec = finite_game_from_graphon(&graphon_base(0.2), 4).unwrap();
    match &spec.mode {
        Mode::Finite { lambda, allow_self_weight } => {
            assert!(!allow_self_weight);
            assert_eq!(lambda[1][2], 1.0 - 0.75);
            assert_eq!(lambda[3][3], 0.0);
        }
        _ => panic!("finite mode expected"),
    }
    assert!((spec.agent(1).gamma + 1.0).abs() < 1e-15);
    assert!(finite_game_from_graphon(&two_agents(0.1), 3).is_err());
}

#[test]
fn convergence_without_interaction_has_no_gap() {
    let rep = convergence_experiment(&graphon_base(0.0), &[2, 4], 8).unwrap();
    for row in &rep.rows {
        assert!(row.max_strategy_gap <= 1e-10 && row.max_value_gap <= 1e-10, "{row:?}");
        assert_eq!(row.delta_z_bmo_sq, 0.0);
    }
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), ConvergenceRow::HEADER.len());
    assert_eq!(text.lines().count(), 3);
    assert!(matches!(convergence_experiment(&graphon_base(0.1), &[1], 4), Err(VerifyError::AtN { n: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn finer_nested_grids_never_lower_the_best_response(k in 2usize..8, rho in 0.0f64..0.6) {
        let spec = two_agents(rho);
        let sol = solve_n_agent_bsde(&spec).unwrap();
        let profile: Vec<AdaptedProcess> = sol.own.iter().map(|o| o.pi.clone()).collect();
        let set = ConstraintSet::FullSpace;
        let coarse = StrategyGrid::uniform(&[-1.0], &[2.0], k + 1, &set).unwrap();
        let fine = StrategyGrid::uniform(&[-1.0], &[2.0], 2 * k + 1, &set).unwrap();
        for i in 0..2 {
            let a = best_response(&spec, &sol, &profile, i, &coarse, None).unwrap().value;
            let b = best_response(&spec, &sol, &profile, i, &fine, None).unwrap().value;
            prop_assert!(b >= a - 1e-14 * a.abs());
            let with = best_response(&spec, &sol, &profile, i, &coarse, Some(&profile[i])).unwrap();
            let own = evaluate_strategy(&spec, &sol, &profile, i, &profile[i]).unwrap();
            prop_assert!(with.value >= own - 1e-14 * own.abs());
            prop_assert!(with.value >= a - 1e-14 * a.abs());
        }
    }

    #[test]
    fn product_bound_holds(
        steps in 1usize..4,
        idio_count in 1usize..3,
        pos in 0usize..3,
        vals in prop::collection::vec(-3.0f64..3.0, 64),
        wals in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let mut factors = idio(idio_count);
        factors.insert(pos.min(idio_count), FactorTag::Common);
        let lat = Lattice::new(steps, 1.0, factors, false).unwrap();
        let f = AdaptedProcess::from_fn(&lat, 1, steps - 1, |t, k| vec![vals[(k * 5 + t) % 64]]);
        let g = AdaptedProcess::from_fn(&lat, 1, steps - 1, |t, k| vec![wals[(k * 3 + t * 7) % 64]]);
        let case = conditional_product_check(&lat, &f, &g).unwrap();
        prop_assert!(case.holds, "{case:?}");
        let same = conditional_product_check(&lat, &f, &f).unwrap();
        prop_assert!(same.holds);
    }
}

#[test]
fn row_gap_chain_per_n() {
    let mut base = graphon_base(0.05);
    base.mode = Mode::Graphon { m: 16, graphon: Graphon::UniformAttachment };
    let rep = convergence_experiment(&base, &[4, 16, 64], 16).unwrap();
    for row in &rep.rows {
        assert!(row.row_l1_gap <= row.row_bound_sqrt, "{row:?}");
        assert!(row.row_l1_gap <= row.row_bound_linear, "{row:?}");
    }
    for w in rep.rows.windows(2) {
        assert!(w[1].row_l1_gap < w[0].row_l1_gap);
        assert!(w[1].wealth_gap <= w[0].wealth_gap);
    }
}
