use proptest::prelude::*;
use qcaps::routing::{e_step, em_route_state, m_step, Instance, RoutingConfig};
use qcaps::Tensor;

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    p: usize,
    votes: Vec<f64>,
    acts: Vec<f64>,
    beta_a: Vec<f64>,
    beta_u: Vec<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..8, 1usize..5).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * p * 3),
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(-2.0f64..2.0, p),
            prop::collection::vec(-2.0f64..2.0, p),
        )
            .prop_map(move |(votes, acts, beta_a, beta_u)| Case {
                n,
                p,
                votes,
                acts,
                beta_a,
                beta_u,
            })
    })
}

fn route(c: &Case, cfg: &RoutingConfig) -> qcaps::routing::RoutingState<f64> {
    em_route_state(
        &Tensor::new(&[c.n, c.p, 3], c.votes.clone()).unwrap(),
        &Tensor::new(&[c.n], c.acts.clone()).unwrap(),
        &c.beta_a,
        &c.beta_u,
        cfg,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn responsibilities_are_distributions(c in case(), iterations in 1usize..4) {
        let state = route(&c, &RoutingConfig { iterations, ..Default::default() });
        for row in state.responsibilities.chunks(c.p) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }

    #[test]
    fn outputs_are_bounded(c in case()) {
        let cfg = RoutingConfig::default();
        let state = route(&c, &cfg);
        prop_assert!(state.activations.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(state.variances.iter().all(|&v| v >= cfg.eps_var));
        prop_assert!(state.means.iter().all(|m| m.abs() <= 3.0 + 1e-9));
    }

    #[test]
    fn child_order_does_not_matter(c in case(), shift in 0usize..8) {
        let cfg = RoutingConfig::default();
        let k = shift % c.n;
        let mut rotated = c.clone();
        rotated.votes.rotate_left(k * c.p * 3);
        rotated.acts.rotate_left(k);
        let (a, b) = (route(&c, &cfg), route(&rotated, &cfg));
        for (x, y) in a.means.iter().chain(&a.activations).zip(b.means.iter().chain(&b.activations)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_iteration_matches_one_m_step(c in case()) {
        let cfg = RoutingConfig { iterations: 1, ..Default::default() };
        let inst = Instance { children: c.n, parents: c.p };
        let uniform = vec![1.0 / c.p as f64; c.n * c.p];
        let m = m_step(inst, &uniform, &c.acts, &c.votes, &c.beta_a, &c.beta_u, cfg.lambda(0), &cfg);
        let state = route(&c, &cfg);
        prop_assert_eq!(&m.means, &state.means);
        prop_assert_eq!(&m.activations, &state.activations);
        let r = e_step(inst, &m.means, &m.variances, &m.log_activations, &c.votes);
        for row in r.chunks(c.p) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
