use std::collections::BTreeSet;

use proptest::prelude::*;

use projsim::oracle::{
    closed_form_h, closed_form_h_direct, ensemble_h_difference_form, ensemble_h_normalized, h_rest,
    replacing_h_exp_rearranged, truncated_return, ClosedFormParams, VisitSchedule,
};
use projsim::ps::softmax;
use projsim::solver::{bellman_residual, value_iteration};
use projsim::{make_chain, make_gridworld, GlowVariant, PolicyKind, PsAgent, PsParams};

fn variant() -> impl Strategy<Value = GlowVariant> {
    prop_oneof![
        Just(GlowVariant::Replacing),
        Just(GlowVariant::Accumulating),
        Just(GlowVariant::FirstVisit)
    ]
}

/// Rewards plus per-step visit flags for the tracked edge.
fn schedule(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (0..=max_len).prop_flat_map(|n| {
        (
            proptest::collection::vec(-1.0f64..1.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

fn agent(variant: GlowVariant, eta: f64, gamma_damp: f64, h0: f64, h_eq: f64, s: f64) -> PsAgent {
    let p = PsParams {
        eta,
        gamma_damp,
        h_eq,
        h0,
        glow_variant: variant,
        glow_order_s: s,
        policy_kind: PolicyKind::SoftmaxH,
        beta_fixed: 0.0,
        glie_c: None,
        reset_glow_each_episode: false,
    };
    PsAgent::new(p, 1, 2, &BTreeSet::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn agent_matches_closed_form(
        (rewards, flags) in schedule(80),
        v in variant(),
        eta in 0.0f64..=1.0,
        gd in 0.0f64..0.6,
        h0 in -2.0f64..2.0,
        h_eq in -2.0f64..2.0,
        reorder in any::<bool>(),
    ) {
        let gd = if v == GlowVariant::FirstVisit { 0.0 } else { gd };
        let s = if reorder { 1.0 - eta } else { 1.0 };
        let mut a = agent(v, eta, gd, h0, h_eq, s);
        let mut visits = Vec::new();
        for (k, (&r, &hit)) in rewards.iter().zip(&flags).enumerate() {
            if hit {
                visits.push(k + 1);
            }
            a.update_step(0, if hit { 0 } else { 1 }, r).unwrap();
        }
        let sched = VisitSchedule::new(visits, rewards).unwrap();
        let p = ClosedFormParams { variant: v, eta, gamma_damp: gd, h0, h_eq, order_s: s };
        let closed = closed_form_h(&sched, &p).unwrap();
        let direct = h_rest(h0, h_eq, gd, sched.horizon) + closed_form_h_direct(&sched, &p).unwrap();
        prop_assert!((a.h().get(0, 0) - closed).abs() <= 1e-10);
        prop_assert!((direct - closed).abs() <= 1e-10);
    }

    #[test]
    fn rearranged_replacing_form_agrees(
        (rewards, flags) in schedule(60),
        eta in 0.0f64..=1.0,
        gd in 0.0f64..0.6,
        reorder in any::<bool>(),
    ) {
        let s = if reorder { 1.0 - eta } else { 1.0 };
        let visits: Vec<usize> = flags.iter().enumerate().filter(|(_, &f)| f).map(|(k, _)| k + 1).collect();
        let sched = VisitSchedule::new(visits, rewards).unwrap();
        let p = ClosedFormParams {
            variant: GlowVariant::Replacing, eta, gamma_damp: gd, h0: 0.0, h_eq: 0.0, order_s: s,
        };
        let a = closed_form_h(&sched, &p).unwrap();
        let b = replacing_h_exp_rearranged(&sched, eta, gd, s).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn glow_stays_bounded(
        (rewards, flags) in schedule(100),
        v in variant(),
        eta in 0.01f64..=1.0,
    ) {
        let mut a = agent(v, eta, 0.0, 0.0, 0.0, 1.0);
        let cap = match v {
            GlowVariant::Accumulating => 1.0 / eta,
            _ => 1.0,
        };
        for (&r, &hit) in rewards.iter().zip(&flags) {
            a.update_step(0, if hit { 0 } else { 1 }, r).unwrap();
            for &g in a.g().as_slice() {
                prop_assert!((0.0..=cap + 1e-12).contains(&g), "glow {} above {}", g, cap);
            }
        }
    }

    #[test]
    fn eta_one_makes_glow_variants_agree(
        (rewards, flags) in schedule(60),
        gd in 0.0f64..0.5,
    ) {
        let mut rep = agent(GlowVariant::Replacing, 1.0, gd, 0.3, 0.1, 1.0);
        let mut acc = agent(GlowVariant::Accumulating, 1.0, gd, 0.3, 0.1, 1.0);
        for (&r, &hit) in rewards.iter().zip(&flags) {
            let act = if hit { 0 } else { 1 };
            rep.update_step(0, act, r).unwrap();
            acc.update_step(0, act, r).unwrap();
            prop_assert_eq!(rep.g(), acc.g());
            prop_assert_eq!(rep.h(), acc.h());
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        row in proptest::collection::vec(-50.0f64..50.0, 1..8),
        beta in 0.0f64..20.0,
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&row, beta);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted, beta)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn builders_produce_valid_mdps(
        n in 2usize..30,
        w in 1usize..6,
        h in 1usize..6,
        slip in 0.0f64..=1.0,
        gamma in 0.0f64..=1.0,
        step in -1.0f64..0.0,
    ) {
        prop_assert!(make_chain(n, step, 1.0, gamma).unwrap().validate().is_empty());
        prop_assume!(w * h >= 2);
        let grid = make_gridworld(w, h, BTreeSet::new(), (0, 0), (w - 1, h - 1), step, 1.0, gamma, slip).unwrap();
        prop_assert!(grid.validate().is_empty());
        prop_assert!(grid.terminals_reachable_from_all());
    }

    #[test]
    fn value_iteration_reaches_a_fixed_point(
        n in 2usize..12,
        gamma in 0.0f64..0.95,
        step in -1.0f64..0.0,
    ) {
        let mdp = make_chain(n, step, 1.0, gamma).unwrap();
        let q = value_iteration(&mdp, 1e-10, 1_000_000).unwrap();
        prop_assert!(bellman_residual(&mdp, &q.values) <= 1e-10);
    }

    #[test]
    fn truncated_return_identities(
        r in proptest::collection::vec(-1.0f64..1.0, 3..50),
        chi in 0.0f64..1.0,
        picks in (any::<prop::sample::Index>(), any::<prop::sample::Index>(), any::<prop::sample::Index>()),
    ) {
        let len = r.len();
        let t1 = picks.0.index(len - 2);
        let t3 = t1 + 2 + picks.1.index(len - t1 - 2);
        let t2 = t1 + 1 + picks.2.index(t3 - t1);
        let g = truncated_return(&r, t1, t3, chi).unwrap();
        let rec = r[t1] + chi * truncated_return(&r, t1 + 1, t3, chi).unwrap();
        prop_assert!((g - rec).abs() <= 1e-12);
        let split = truncated_return(&r, t1, t2 - 1, chi).unwrap()
            + chi.powi((t2 - t1) as i32) * truncated_return(&r, t2, t3, chi).unwrap();
        prop_assert!((g - split).abs() <= 1e-12);
    }

    #[test]
    fn ensemble_forms_agree(
        r in proptest::collection::vec(-1.0f64..1.0, 1..40),
        eta in 0.05f64..=1.0,
        gd in 0.0f64..0.9,
        n in 1usize..500,
    ) {
        let t = r.len();
        let a = ensemble_h_normalized(&r, eta, gd, t, n).unwrap();
        let b = ensemble_h_difference_form(&r, eta, gd, t, n).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }
}
