mod common;

use common::*;
use graphon_nash::lattice::{
    cond_expect, full_tree_of, martingale_coeffs, simulate_log_wealth, FactorTag, LatticeError, Measurability,
};
use graphon_nash::{AdaptedProcess, ConstraintSet, Lattice};
use proptest::prelude::*;

fn idio(n: usize) -> Vec<FactorTag> {
    (0..n).map(|c| FactorTag::Idiosyncratic { owner: 0, component: c }).collect()
}

#[test]
fn node_counts() {
    let full = Lattice::new(4, 1.0, idio(2), false).unwrap();
    assert_eq!(full.nodes_at(3), 64);
    assert_eq!(full.branching(), 4);
    let rec = Lattice::new(4, 1.0, idio(2), true).unwrap();
    assert_eq!(rec.nodes_at(3), 16);
    assert!((rec.dt() - 0.25).abs() < 1e-16);
}

#[test]
fn construction_errors() {
    assert_eq!(Lattice::new(0, 1.0, idio(1), false), Err(LatticeError::Empty));
    assert_eq!(Lattice::new(3, 1.0, vec![], true), Err(LatticeError::Empty));
    assert!(matches!(Lattice::new(13, 1.0, idio(2), false), Err(LatticeError::TreeTooLarge(26, _))));
    // recombining trees have no cap
    assert!(Lattice::new(200, 1.0, idio(2), true).is_ok());
}

#[test]
fn single_factor_representation_is_exact() {
    let lat = Lattice::new(5, 2.0, idio(1), false).unwrap();
    let y = AdaptedProcess::from_fn(&lat, 1, 5, |t, k| vec![(k as f64 * 0.37 + t as f64).sin()]);
    for t in 0..5 {
        for k in 0..lat.nodes_at(t) {
            let e = cond_expect(&lat, &y, t, k).unwrap()[0];
            let z = martingale_coeffs(&lat, &y, t, k).unwrap()[0];
            for m in 0..2 {
                let xi = Lattice::move_sign(m, 0) * lat.sqrt_dt();
                let got = e + z * xi;
                assert!((got - y.get(t + 1, lat.child(t, k, m))[0]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn residual_is_orthogonal_to_every_factor() {
    let lat = Lattice::new(3, 1.0, idio(3), false).unwrap();
    let y = AdaptedProcess::from_fn(&lat, 2, 3, |t, k| vec![((k * k) % 97) as f64 * 0.01 + t as f64, (k as f64).cos()]);
    for k in 0..lat.nodes_at(2) {
        let e = cond_expect(&lat, &y, 2, k).unwrap();
        let z = martingale_coeffs(&lat, &y, 2, k).unwrap();
        for f in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for m in 0..lat.branching() {
                    let v = y.get(3, lat.child(2, k, m))[c];
                    let mut fit = e[c];
                    for g in 0..3 {
                        fit += z[g * 2 + c] * Lattice::move_sign(m, g) * lat.sqrt_dt();
                    }
                    acc += (v - fit) * Lattice::move_sign(m, f);
                }
                assert!(acc.abs() < 1e-12, "{acc}");
            }
        }
    }
}

#[test]
fn missing_step_is_reported() {
    let lat = Lattice::new(3, 1.0, idio(1), true).unwrap();
    let y = AdaptedProcess::zeros(&lat, 1, 2);
    assert_eq!(cond_expect(&lat, &y, 2, 0), Err(LatticeError::MissingStep(3)));
}

#[test]
fn measurability_tag_is_checked() {
    let lat = Lattice::new(2, 1.0, idio(2), false).unwrap();
    let own = |t: usize, k: usize| lat.key(t, k, &[0]) as f64;
    let good: Vec<Vec<f64>> = (0..=2).map(|t| (0..lat.nodes_at(t)).map(|k| own(t, k)).collect()).collect();
    assert!(AdaptedProcess::new(&lat, 1, good, Measurability::Factors(vec![0])).is_ok());
    let bad: Vec<Vec<f64>> = (0..=2).map(|t| (0..lat.nodes_at(t)).map(|k| k as f64).collect()).collect();
    assert!(matches!(
        AdaptedProcess::new(&lat, 1, bad, Measurability::Factors(vec![0])),
        Err(LatticeError::Measurability { .. })
    ));
    let short = vec![vec![0.0], vec![0.0; 3]];
    assert!(matches!(AdaptedProcess::new(&lat, 1, short, Measurability::All), Err(LatticeError::Shape { .. })));
}

#[test]
fn csv_has_header_and_all_nodes() {
    let lat = Lattice::new(2, 1.0, idio(1), true).unwrap();
    let p = AdaptedProcess::from_fn(&lat, 2, 2, |t, k| vec![t as f64, k as f64]);
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,node_index,component,value");
    assert_eq!(lines.len(), 1 + 2 * (1 + 2 + 3));
}

#[test]
fn log_wealth_exponential_moment_matches_closed_form() {
    let agents = vec![scalar_agent(-1.0, 1.3, 0.25, constant(0.05), ConstraintSet::FullSpace); 2];
    let spec = finite(agents, mean_field_lambda(2, 0.0), 0.1, 6, false);
    let lat = Lattice::new(6, 1.0, idio(1), true).unwrap();
    let pi = AdaptedProcess::from_fn(&lat, 1, 5, |_, _| vec![0.8]);
    let path = simulate_log_wealth(&spec, &lat, &pi, 0).unwrap();
    let full = &path.lattice;
    assert!(!full.is_recombining());
    let n = full.steps();
    let mean: f64 = (0..full.nodes_at(n)).map(|k| path.log_wealth.get(n, k)[0].exp()).sum::<f64>() / full.nodes_at(n) as f64;
    let h: f64 = 0.25 * 0.8;
    let theta: f64 = 0.05 / 0.25;
    let dt: f64 = 1.0 / 6.0;
    let want = 1.3 * ((h * theta - 0.5 * h * h) * 1.0).exp() * (h * dt.sqrt()).cosh().powi(6);
    assert!((mean - want).abs() < 1e-13, "{mean} vs {want}");
}

proptest! {
    #[test]
    fn probabilities_sum_to_one(steps in 1usize..7, f in 1usize..4, rec in any::<bool>()) {
        let lat = Lattice::new(steps, 1.0, idio(f), rec).unwrap();
        for t in 0..=steps {
            let s: f64 = (0..lat.nodes_at(t)).map(|k| lat.node_prob(t, k)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recombining_map_commutes_with_children(steps in 1usize..6, f in 1usize..4) {
        let rec = Lattice::new(steps, 1.0, idio(f), true).unwrap();
        let (full, map) = full_tree_of(&rec).unwrap();
        for t in 0..steps {
            for k in 0..full.nodes_at(t) {
                for m in 0..full.branching() {
                    prop_assert_eq!(map(t + 1, full.child(t, k, m)), rec.child(t, map(t, k), m));
                }
                for g in 0..f {
                    prop_assert_eq!(full.up_count(t, k, g), rec.up_count(t, map(t, k), g));
                    prop_assert!((full.brownian(t, k, g) - rec.brownian(t, map(t, k), g)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn tower_property(steps in 2usize..6, f in 1usize..3, seed in 0u64..1000) {
        let lat = Lattice::new(steps, 1.0, idio(f), false).unwrap();
        let y = AdaptedProcess::from_fn(&lat, 1, steps, |t, k| vec![((k as u64 * 2654435761 + seed + t as u64) % 1000) as f64 / 1000.0]);
        let t = steps - 2;
        for k in 0..lat.nodes_at(t) {
            let mut inner = 0.0;
            for m in 0..lat.branching() {
                inner += cond_expect(&lat, &y, t + 1, lat.child(t, k, m)).unwrap()[0];
            }
            inner /= lat.branching() as f64;
            let mut direct = 0.0;
            for m in 0..lat.branching() {
                for m2 in 0..lat.branching() {
                    direct += y.get(t + 2, lat.child(t + 1, lat.child(t, k, m), m2))[0];
                }
            }
            direct /= (lat.branching() * lat.branching()) as f64;
            prop_assert!((inner - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn key_counts_cover_all_keys(steps in 1usize..5, f in 2usize..4, rec in any::<bool>()) {
        let lat = Lattice::new(steps, 1.0, idio(f), rec).unwrap();
        let subset = vec![0, f - 1];
        for t in 0..=steps {
            let mut seen = vec![false; lat.key_count(t, &subset)];
            for k in 0..lat.nodes_at(t) {
                seen[lat.key(t, k, &subset)] = true;
            }
            prop_assert!(seen.iter().all(|s| *s));
        }
    }
}
