//! Invariants of the regularizers and the stratum order.

use proptest::prelude::*;
use stratatrack::linalg::{Matrix, Vector};
use stratatrack::strata::{leq, Side, Stratum};
use stratatrack::{Regularizer, StratumTolerance};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-3.0f64..3.0, len).prop_map(Vector::from_vec)
}

fn subset(p: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0..p, 0..=p).prop_map(|s| s.into_iter().collect())
}

fn sup_norm(v: &Vector) -> f64 {
    v.amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn l1_moreau_identity(v in vec_strategy(12), t in 0.01f64..2.0) {
        let reg = Regularizer::l1(12);
        let prox = reg.prox(t, &v).unwrap();
        let dual = reg.project_dual_ball(&(&v / t)).unwrap();
        prop_assert!((&prox + dual * t - &v).amax() < 1e-12);
    }

    #[test]
    fn nuclear_moreau_identity(v in vec_strategy(12), t in 0.01f64..2.0) {
        let reg = Regularizer::nuclear(3, 4);
        let prox = reg.prox(t, &v).unwrap();
        let dual = reg.project_dual_ball(&(&v / t)).unwrap();
        prop_assert!((&prox + dual * t - &v).amax() < 1e-10);
    }

    #[test]
    fn prox_is_firmly_nonexpansive(a in vec_strategy(12), b in vec_strategy(12), t in 0.01f64..2.0) {
        for reg in [Regularizer::l1(12), Regularizer::nuclear(4, 3)] {
            let pa = reg.prox(t, &a).unwrap();
            let pb = reg.prox(t, &b).unwrap();
            let d = &pa - &pb;
            prop_assert!(d.norm_squared() <= d.dot(&(&a - &b)) + 1e-10);
        }
    }

    #[test]
    fn l1_prox_matches_coordinatewise_formula(v in vec_strategy(9), t in 0.0f64..2.0) {
        let reg = Regularizer::l1(9);
        let prox = reg.prox(t, &v).unwrap();
        for i in 0..9 {
            let want = v[i].signum() * (v[i].abs() - t).max(0.0);
            prop_assert!((prox[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_projection_lands_in_ball(v in vec_strategy(12)) {
        for reg in [Regularizer::l1(12), Regularizer::nuclear(3, 4)] {
            let q = reg.project_dual_ball(&(&v * 3.0)).unwrap();
            prop_assert!(reg.dual_norm(&q).unwrap() <= 1.0 + 1e-10);
        }
    }

    #[test]
    fn prox_support_within_dual_active_set(v in vec_strategy(10), t in 0.05f64..1.5) {
        // z = prox(v) and eta = (v - z)/t satisfy eta ∈ dR(z): the support of
        // z lies in the active set of eta
        let reg = Regularizer::l1(10);
        let tol = StratumTolerance::default();
        let z = reg.prox(t, &v).unwrap();
        let eta = (&v - &z) / t;
        let primal = reg.stratum_of(&z, &tol).unwrap();
        let dual = reg.dual_stratum_of(&eta, &tol).unwrap();
        let upper = reg.mirror_map_inverse(&dual).unwrap();
        prop_assert!(leq(&primal, &upper).unwrap());
        prop_assert!(sup_norm(&eta) <= 1.0 + 1e-12);
    }

    #[test]
    fn nuclear_rank_bounded_by_unit_singular_values(v in vec_strategy(12), t in 0.05f64..1.5) {
        let reg = Regularizer::nuclear(4, 3);
        let tol = StratumTolerance::default();
        let z = reg.prox(t, &v).unwrap();
        let eta = (&v - &z) / t;
        let primal = reg.stratum_of(&z, &tol).unwrap();
        let dual = reg.dual_stratum_of(&eta, &tol).unwrap();
        prop_assert!(primal.size() <= dual.size());
    }

    #[test]
    fn support_order_is_a_partial_order(a in subset(6), b in subset(6), c in subset(6)) {
        let (a, b, c) = (
            Stratum::support(Side::Primal, a),
            Stratum::support(Side::Primal, b),
            Stratum::support(Side::Primal, c),
        );
        prop_assert!(leq(&a, &a).unwrap());
        if leq(&a, &b).unwrap() && leq(&b, &a).unwrap() {
            prop_assert_eq!(&a, &b);
        }
        if leq(&a, &b).unwrap() && leq(&b, &c).unwrap() {
            prop_assert!(leq(&a, &c).unwrap());
        }
    }

    #[test]
    fn mirror_map_reverses_order(a in subset(7), b in subset(7)) {
        let reg = Regularizer::l1(7);
        let (a, b) = (Stratum::support(Side::Primal, a), Stratum::support(Side::Primal, b));
        let (ja, jb) = (reg.mirror_map(&a).unwrap(), reg.mirror_map(&b).unwrap());
        prop_assert_eq!(leq(&a, &b).unwrap(), leq(&jb, &ja).unwrap());
        prop_assert_eq!(reg.mirror_map_inverse(&ja).unwrap(), a);
    }

    #[test]
    fn rank_mirror_map_reverses_order(r1 in 0usize..=5, r2 in 0usize..=5) {
        let reg = Regularizer::nuclear(5, 6);
        let (a, b) = (Stratum::rank(Side::Primal, r1), Stratum::rank(Side::Primal, r2));
        let (ja, jb) = (reg.mirror_map(&a).unwrap(), reg.mirror_map(&b).unwrap());
        prop_assert_eq!(leq(&a, &b).unwrap(), leq(&jb, &ja).unwrap());
    }

    #[test]
    fn value_is_support_function_of_dual_ball(v in vec_strategy(12)) {
        // R(w) = <eta, w> for eta the extreme point of the dual ball aligned with w
        let reg = Regularizer::nuclear(3, 4);
        let m = reg.as_matrix(&v).unwrap();
        let svd = m.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let eta: Matrix = &u * &vt;
        let inner = reg.flatten(&eta).dot(&v);
        prop_assert!((reg.value(&v).unwrap() - inner).abs() < 1e-9);
        prop_assert!((reg.dual_norm(&reg.flatten(&eta)).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn strata_json_round_trip() {
    for m in [
        Stratum::support(Side::Primal, [0, 4, 9]),
        Stratum::support(Side::Dual, []),
        Stratum::rank(Side::Dual, 3),
    ] {
        let back: Stratum = serde_json::from_str(&m.to_json_string()).unwrap();
        assert_eq!(back, m);
    }
}
