use qcaps::autodiff::{finite_difference_check, GradCheckOptions, ParamStore, Tape, Var};
use qcaps::routing::{em_route_graph, route_windows, RoutingConfig, VoteLayout};
use qcaps::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, -1.0, 1.0)
}

fn window_store(seed: u64, layout: VoteLayout) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, tin, tout, h, w, k) = (2, 2, 3, 4, 4, 3);
    let mut store = ParamStore::new();
    let votes_shape = match layout {
        VoteLayout::Shared => vec![b, h, w, tin, tout, 3],
        VoteLayout::PerWindow => vec![b, 2, 2, k * k * tin, tout, 3],
    };
    store.insert("votes", random(&mut rng, &votes_shape, -1.5, 1.5), true).unwrap();
    store.insert("acts", random(&mut rng, &[b, tin, h, w], 0.05, 0.95), true).unwrap();
    store.insert("beta_a", random(&mut rng, &[tout], -0.5, 0.5), true).unwrap();
    store.insert("beta_u", random(&mut rng, &[tout], -0.5, 0.5), true).unwrap();
    store.insert("probe", weights(&mut rng, &[b, tout, 4, 2, 2]), false).unwrap();
    store
}

fn window_loss<'t>(tape: &'t Tape<f64>, p: &ParamStore<f64>, layout: VoteLayout) -> Result<Var<'t, f64>> {
    let cfg = RoutingConfig {
        iterations: 3,
        lambda_base: 0.5,
        lambda_growth: 0.5,
        ..RoutingConfig::default()
    };
    let out = route_windows(
        tape.param(p, "votes")?,
        tape.param(p, "acts")?,
        tape.param(p, "beta_a")?,
        tape.param(p, "beta_u")?,
        3,
        1,
        layout,
        &cfg,
    )?;
    Ok(out.mul(tape.param(p, "probe")?)?.sum_all())
}

#[test]
fn fused_window_routing_matches_finite_differences() {
    for layout in [VoteLayout::Shared, VoteLayout::PerWindow] {
        for seed in 0..3 {
            let store = window_store(seed, layout);
            let report = finite_difference_check(
                |tape, p| window_loss(tape, p, layout),
                &store,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-6), "{layout:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn graph_routing_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.insert("votes", random(&mut rng, &[5, 3, 3], -1.0, 1.0), true).unwrap();
    store.insert("acts", random(&mut rng, &[5], 0.1, 0.9), true).unwrap();
    store.insert("beta_a", random(&mut rng, &[3], -0.5, 0.5), true).unwrap();
    store.insert("beta_u", random(&mut rng, &[3], -0.5, 0.5), true).unwrap();
    store.insert("probe_mu", weights(&mut rng, &[3, 3]), false).unwrap();
    store.insert("probe_a", weights(&mut rng, &[3]), false).unwrap();
    let report = finite_difference_check(
        |tape, p| {
            let (mu, a) = em_route_graph(
                tape.param(p, "votes")?,
                tape.param(p, "acts")?,
                tape.param(p, "beta_a")?,
                tape.param(p, "beta_u")?,
                &RoutingConfig::default(),
            )?;
            let l1 = mu.mul(tape.param(p, "probe_mu")?)?.sum_all();
            let l2 = a.mul(tape.param(p, "probe_a")?)?.sum_all().scale(100.0);
            l1.add(l2)
        },
        &store,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

/// The fused node and the primitive-composed graph agree on values and on
/// every input gradient for a single full-field window.
#[test]
fn fused_and_graph_routing_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tin, tout, k) = (3, 2, 2);
    let n = k * k * tin;
    let votes = random(&mut rng, &[1, 1, 1, n, tout, 3], -1.0, 1.0);
    let acts = random(&mut rng, &[1, tin, k, k], 0.1, 0.9);
    let ba = random(&mut rng, &[tout], -0.3, 0.3);
    let bu = random(&mut rng, &[tout], -0.3, 0.3);
    let probe = weights(&mut rng, &[1, tout, 4, 1, 1]);
    let cfg = RoutingConfig::default();

    let tape = Tape::new();
    let (v, a, pa, pu) = (
        tape.leaf(votes.clone(), true),
        tape.leaf(acts.clone(), true),
        tape.leaf(ba.clone(), true),
        tape.leaf(bu.clone(), true),
    );
    let out = route_windows(v, a, pa, pu, k, 1, VoteLayout::PerWindow, &cfg).unwrap();
    let loss = out.mul(tape.constant(probe.clone())).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();

    // Children in the fused op are ordered (row, col, type); activations are
    // stored [type, row, col].
    let mut acts_children = vec![0.0; n];
    for ky in 0..k {
        for kx in 0..k {
            for i in 0..tin {
                acts_children[(ky * k + kx) * tin + i] = acts.data()[(i * k + ky) * k + kx];
            }
        }
    }
    let tape2 = Tape::new();
    let v2 = tape2.leaf(votes.clone().reshape(&[n, tout, 3]).unwrap(), true);
    let a2 = tape2.leaf(Tensor::new(&[n], acts_children).unwrap(), true);
    let pa2 = tape2.leaf(ba, true);
    let pu2 = tape2.leaf(bu, true);
    let (mu, act) = em_route_graph(v2, a2, pa2, pu2, &cfg).unwrap();
    let pd = probe.data();
    let probe_mu: Vec<f64> = (0..tout).flat_map(|j| (0..3).map(move |h| pd[j * 4 + h])).collect();
    let probe_a: Vec<f64> = (0..tout).map(|j| pd[j * 4 + 3]).collect();
    let l = mu
        .mul(tape2.constant(Tensor::new(&[tout, 3], probe_mu).unwrap()))
        .unwrap()
        .sum_all()
        .add(act.mul(tape2.constant(Tensor::new(&[tout], probe_a).unwrap())).unwrap().sum_all())
        .unwrap();
    assert!((l.value().item() - loss.value().item()).abs() < 1e-12);
    let g2 = tape2.backward(l).unwrap();
    let close = |x: &Tensor<f64>, y: &Tensor<f64>| {
        x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-10)
    };
    assert!(close(g.wrt(v).unwrap(), g2.wrt(v2).unwrap()));
    assert!(close(g.wrt(pa).unwrap(), g2.wrt(pa2).unwrap()));
    assert!(close(g.wrt(pu).unwrap(), g2.wrt(pu2).unwrap()));
    let ga = g.wrt(a).unwrap();
    let ga2 = g2.wrt(a2).unwrap();
    for ky in 0..k {
        for kx in 0..k {
            for i in 0..tin {
                let x = ga.data()[(i * k + ky) * k + kx];
                let y = ga2.data()[(ky * k + kx) * tin + i];
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
