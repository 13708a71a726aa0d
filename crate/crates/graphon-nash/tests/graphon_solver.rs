mod common;

use common::*;
use graphon_nash::closed_form::merton_benchmark;
use graphon_nash::graphon_solver::{
    g_fixed_point, gmap_bound, gmap_threshold, self_consistency_residual, solve_graphon_bsde_common_noise,
    solve_graphon_bsde_no_common, type_solution_at, GMapProblem, OUTER_TOL,
};
use graphon_nash::model::{type_location, AgentModel, DriftFamily, Scheme, TypeFamily};
use graphon_nash::n_agent_solver::SolverError;
use graphon_nash::{AgentParams, ConstraintSet, GameSpec, Graphon};
use proptest::prelude::*;

fn constant_family(rho: f64, graphon: Graphon, m: usize) -> GameSpec {
    let fam = family(lin(-2.0, 1.5), lin(0.8, 0.6), DriftFamily::Constant { value: linv(0.04, 0.05) }, 0.3, ConstraintSet::FullSpace);
    graphon_spec(fam, graphon, m, rho, 6)
}

fn last_move_family(rho: f64, m: usize, constraint: ConstraintSet) -> GameSpec {
    let fam = family(
        lin(-1.5, 1.2),
        lin(1.0, 0.3),
        DriftFamily::LastMove { base: linv(0.05, 0.03), amp: linv(0.02, -0.01) },
        0.25,
        constraint,
    );
    graphon_spec(fam, Graphon::UniformAttachment, m, rho, 5)
}

#[test]
fn no_interaction_reduces_to_single_agent_benchmark() {
    let spec = constant_family(0.0, Graphon::Min, 5);
    let sol = solve_graphon_bsde_no_common(&spec).unwrap();
    for (k, v) in sol.values.iter().enumerate() {
        let a = spec.agent(k);
        let theta = match &a.mu {
            graphon_nash::model::DriftModel::Constant { value } => value[0] / 0.3,
            _ => unreachable!(),
        };
        let (y0, v0) = merton_benchmark(&[vec![theta]], &[1.0], a.gamma, a.x0).unwrap();
        assert!((sol.y0[k] - y0).abs() < 1e-14, "{} vs {y0}", sol.y0[k]);
        assert!((v - v0).abs() < 1e-14 * v0.abs().max(1.0));
    }
}

#[test]
fn deterministic_coefficients_match_aggregate_oracle() {
    let spec = constant_family(0.6, Graphon::Product, 4);
    let sol = solve_graphon_bsde_no_common(&spec).unwrap();
    let m = 4;
    let ex: Vec<(f64, f64)> = (0..m)
        .map(|b| {
            let a = spec.agent(b);
            let th = match &a.mu {
                graphon_nash::model::DriftModel::Constant { value } => value[0] / 0.3,
                _ => unreachable!(),
            };
            let g = th / (1.0 - a.gamma);
            (th * g, 0.5 * g * g)
        })
        .collect();
    for k in 0..m {
        let u = type_location(k, m);
        let a1: f64 = (0..m).map(|b| u * type_location(b, m) * ex[b].0).sum::<f64>() / m as f64;
        let a2: f64 = (0..m).map(|b| u * type_location(b, m) * ex[b].1).sum::<f64>() / m as f64;
        let gm = spec.agent(k).gamma;
        let own = gm * ex[k].0 / 2.0;
        // γ|θ|²/(2(1−γ)) with |θ|² = θg(1−γ)
        let want = own - 0.6 * gm * (a1 - a2);
        assert!((sol.y0[k] - want).abs() < 1e-12, "type {k}: {} vs {want}", sol.y0[k]);
        for t in 0..spec.steps {
            assert!((sol.aggregate.a1[t][0][k] - a1).abs() < 1e-12);
            assert!((sol.aggregate.a2[t][0][k] - a2).abs() < 1e-12);
        }
    }
}

#[test]
fn solution_is_self_consistent() {
    let spec = last_move_family(0.4, 6, ConstraintSet::Box { lower: vec![0.0], upper: vec![0.8] });
    let sol = solve_graphon_bsde_no_common(&spec).unwrap();
    assert!(*sol.trace.last().unwrap() <= OUTER_TOL);
    let r = self_consistency_residual(&sol, &spec).unwrap();
    assert!(r <= 1e-9, "{r:e}");
}

#[test]
fn type_evaluation_reproduces_grid_types() {
    let spec = last_move_family(0.5, 5, ConstraintSet::FullSpace);
    let sol = solve_graphon_bsde_no_common(&spec).unwrap();
    for k in 0..5 {
        let ts = type_solution_at(&sol, &spec, type_location(k, 5)).unwrap();
        assert!((ts.y0 - sol.y0[k]).abs() < 1e-12);
        assert!((ts.value - sol.values[k]).abs() < 1e-12 * sol.values[k].abs().max(1.0));
        assert_eq!(ts.own.pi, sol.types[k].pi);
    }
    // an off-grid type lies between its neighbours for a monotone family
    let mid = type_solution_at(&sol, &spec, 0.2).unwrap();
    let (lo, hi) = (sol.y0[0].min(sol.y0[1]), sol.y0[0].max(sol.y0[1]));
    assert!(mid.y0 >= lo - 1e-12 && mid.y0 <= hi + 1e-12);
}

#[test]
fn scheme_choice_does_not_change_the_solution() {
    let mut spec = last_move_family(0.3, 4, ConstraintSet::NonNegativeOrthant);
    let a = solve_graphon_bsde_no_common(&spec).unwrap();
    spec.scheme = Scheme::Implicit;
    let b = solve_graphon_bsde_no_common(&spec).unwrap();
    for k in 0..4 {
        assert!((a.y0[k] - b.y0[k]).abs() < 1e-12);
    }
}

#[test]
fn aggregate_csv_layout() {
    let spec = constant_family(0.2, Graphon::Min, 3);
    let sol = solve_graphon_bsde_no_common(&spec).unwrap();
    let mut buf = Vec::new();
    sol.aggregate.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,common_node,type,component,value");
    assert!(text.lines().count() > 1);
}

fn common_family(star: f64, rho: f64) -> GameSpec {
    let fam = TypeFamily {
        gamma: lin(-1.2, 0.9),
        x0: lin(1.0, 0.2),
        mu: DriftFamily::LastMove { base: linv(0.05, 0.02), amp: linv(0.02, 0.0) },
        sigma: vec![vec![0.25]],
        sigma_star: Some(vec![star]),
        constraint: ConstraintSet::FullSpace,
    };
    let mut spec = graphon_spec(graphon_nash::model::AgentSource::Family(fam), Graphon::UniformAttachment, 3, rho, 4);
    spec.common_noise = true;
    spec
}

#[test]
fn zero_common_loading_agrees_with_no_common_solver() {
    let common = solve_graphon_bsde_common_noise(&common_family(0.0, 0.3)).unwrap();
    let mut plain = common_family(0.0, 0.3);
    plain.common_noise = false;
    if let graphon_nash::model::AgentSource::Family(f) = &mut plain.agents {
        f.sigma_star = None;
    }
    let base = solve_graphon_bsde_no_common(&plain).unwrap();
    for k in 0..3 {
        assert!((common.y0[k] - base.y0[k]).abs() < 1e-8, "{} vs {}", common.y0[k], base.y0[k]);
    }
}

#[test]
fn common_noise_solution_is_self_consistent() {
    let spec = common_family(0.15, 0.3);
    let sol = solve_graphon_bsde_common_noise(&spec).unwrap();
    assert!(sol.common_noise);
    let r = self_consistency_residual(&sol, &spec).unwrap();
    assert!(r <= 1e-8, "{r:e}");
    let bound = gmap_bound(spec.rho, spec.gamma_bar(), spec.gamma_tilde());
    assert!(sol.gmap_rate <= bound + 1e-9);
}

#[test]
fn refusals() {
    let finite_spec = finite(vec![scalar_agent(-1.0, 1.0, 0.2, constant(0.05), ConstraintSet::FullSpace); 2], mean_field_lambda(2, 0.0), 0.1, 3, false);
    assert!(matches!(solve_graphon_bsde_no_common(&finite_spec), Err(SolverError::Unsupported(_))));
    let spec = common_family(0.1, 0.2);
    assert!(matches!(solve_graphon_bsde_no_common(&spec), Err(SolverError::Unsupported(_))));
    let sol = solve_graphon_bsde_common_noise(&spec).unwrap();
    assert!(matches!(type_solution_at(&sol, &spec, 0.5), Err(SolverError::Unsupported(_))));
    let mut implicit = spec.clone();
    implicit.scheme = Scheme::Implicit;
    assert!(matches!(solve_graphon_bsde_common_noise(&implicit), Err(SolverError::Unsupported(_))));
    let mut deep = spec;
    deep.steps = 11;
    assert!(solve_graphon_bsde_common_noise(&deep).is_err());
}

#[test]
fn threshold_and_bound_agree() {
    let (gb, gt) = (0.4, 2.0);
    let th = gmap_threshold(gb, gt);
    assert!((gmap_bound(th, gb, gt) - 1.0).abs() < 1e-15);
}

fn gmap_models(gammas: &[f64]) -> Vec<AgentModel> {
    gammas
        .iter()
        .map(|g| {
            AgentModel::new(&AgentParams {
                gamma: *g,
                x0: 1.0,
                mu: graphon_nash::model::DriftModel::Constant { value: vec![0.05] },
                sigma: vec![vec![0.3]],
                sigma_star: Some(vec![0.2]),
                constraint: ConstraintSet::Box { lower: vec![-1.0], upper: vec![1.5] },
            })
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gmap_contracts_within_bound(
        gammas in prop::collection::vec(prop_oneof![-3.0f64..-0.1, 0.1f64..0.7], 2..5),
        frac in 0.05f64..0.95,
        zt in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 4),
        th in prop::collection::vec(-0.5f64..0.5, 2),
    ) {
        let models = gmap_models(&gammas);
        let m = models.len();
        let gb = gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gt = gammas.iter().map(|g| g.abs()).fold(0.0, f64::max);
        let rho = (frac * gmap_threshold(gb, gt)).min(1.0);
        let weights: Vec<Vec<f64>> = (0..m)
            .map(|a| (0..m).map(|b| Graphon::UniformAttachment.eval(type_location(a, m), type_location(b, m)) / m as f64).collect())
            .collect();
        let p = GMapProblem {
            rho,
            weights,
            ztilde: (0..m).map(|_| zt.clone()).collect(),
            theta: (0..m).map(|_| vec![th.clone(); zt.len()]).collect(),
            prob: (0..m).map(|_| vec![1.0 / zt.len() as f64; zt.len()]).collect(),
        };
        let sol = g_fixed_point(&models, &p).unwrap();
        prop_assert!(sol.residual <= 1e-12);
        prop_assert!(sol.rate <= gmap_bound(rho, gb, gt) + 1e-6);

        let refused = GMapProblem { rho: gmap_threshold(gb, gt), ..p };
        let is_refused = matches!(g_fixed_point(&models, &refused), Err(SolverError::ContractionBound { .. }));
        prop_assert!(is_refused);
    }
}
