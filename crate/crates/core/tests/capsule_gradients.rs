use qcaps::autodiff::{finite_difference_check, GradCheckOptions, ParamStore, Tape, Var};
use qcaps::capsule::{
    class_capsule_layer, compute_votes, conv_capsule_layer, extract_receptive_fields, rotor_operators, CapsLayerNames,
    CapsuleField, ConvCapsSpec,
};
use qcaps::routing::RoutingConfig;
use qcaps::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn probe<'t>(tape: &'t Tape<f64>, p: &ParamStore<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(x.mul(tape.param(p, "probe")?)?.sum_all())
}

#[test]
fn rotor_operator_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("theta", random(&mut rng, &[2, 3], -3.1, 3.1), true).unwrap();
        store.insert("axis", random(&mut rng, &[2, 3, 3], -1.0, 1.0), true).unwrap();
        store.insert("probe", random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0), false).unwrap();
        let report = finite_difference_check(
            |tape, p| {
                let ops = rotor_operators(tape.param(p, "theta")?, tape.param(p, "axis")?)?;
                probe(tape, p, ops)
            },
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-6), "seed {seed}: {report:?}");
    }
}

#[test]
fn vote_gradients_shared_and_windowed() {
    for (kernel, stride) in [(1, 1), (2, 1), (2, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(kernel as u64 * 10 + stride as u64);
        let (b, t, tout, h) = (2, 2, 3, 4);
        let oh = (h - kernel) / stride + 1;
        let mut store = ParamStore::new();
        store.insert("poses", random(&mut rng, &[b, t, 3, h, h], -1.0, 1.0), true).unwrap();
        store.insert("ops", random(&mut rng, &[kernel * kernel * t, tout, 3, 3], -1.0, 1.0), true).unwrap();
        store
            .insert("probe", random(&mut rng, &[b, oh, oh, kernel * kernel * t, tout, 3], -1.0, 1.0), false)
            .unwrap();
        let report = finite_difference_check(
            |tape, p| {
                let v = compute_votes(tape.param(p, "poses")?, tape.param(p, "ops")?, kernel, stride)?;
                probe(tape, p, v)
            },
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-6), "k={kernel} s={stride}: {report:?}");
    }
}

#[test]
fn receptive_field_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("poses", random(&mut rng, &[1, 2, 3, 5, 5], -1.0, 1.0), true).unwrap();
    store.insert("acts", random(&mut rng, &[1, 2, 5, 5], 0.0, 1.0), true).unwrap();
    store.insert("probe_p", random(&mut rng, &[1, 2, 2, 18, 3], -1.0, 1.0), false).unwrap();
    store.insert("probe", random(&mut rng, &[1, 2, 2, 18], -1.0, 1.0), false).unwrap();
    let report = finite_difference_check(
        |tape, p| {
            let field = CapsuleField::new(tape.param(p, "poses")?, tape.param(p, "acts")?)?;
            let (wp, wa) = extract_receptive_fields(&field, 3, 2)?;
            wp.mul(tape.param(p, "probe_p")?)?.sum_all().add(probe(tape, p, wa)?)
        },
        &store,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

fn layer_store(seed: u64, per_offset: bool) -> (ParamStore<f64>, ConvCapsSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvCapsSpec {
        in_types: 2,
        out_types: 2,
        kernel: 2,
        stride: 1,
        per_kernel_offset_rotors: per_offset,
    };
    let [c, j] = spec.rotor_shape();
    let mut store = ParamStore::new();
    store.insert("poses", random(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0), true).unwrap();
    store.insert("acts", random(&mut rng, &[2, 2, 3, 3], 0.1, 0.9), true).unwrap();
    store.insert("l.theta", random(&mut rng, &[c, j], -3.0, 3.0), true).unwrap();
    store.insert("l.axis", random(&mut rng, &[c, j, 3], -1.0, 1.0), true).unwrap();
    store.insert("l.beta_a", random(&mut rng, &[j], -0.5, 0.5), true).unwrap();
    store.insert("l.beta_u", random(&mut rng, &[j], -0.5, 0.5), true).unwrap();
    store.insert("c.theta", random(&mut rng, &[2, 3], -3.0, 3.0), true).unwrap();
    store.insert("c.axis", random(&mut rng, &[2, 3, 3], -1.0, 1.0), true).unwrap();
    store.insert("c.beta_a", random(&mut rng, &[3], -0.5, 0.5), true).unwrap();
    store.insert("c.beta_u", random(&mut rng, &[3], -0.5, 0.5), true).unwrap();
    store.insert("probe", random(&mut rng, &[2, 3], -1.0, 1.0), false).unwrap();
    store.insert("probe_pose", random(&mut rng, &[2, 3, 3], -1.0, 1.0), false).unwrap();
    (store, spec)
}

#[test]
fn stacked_capsule_layers_gradients() {
    for per_offset in [false, true] {
        for coordinate_addition in [false, true] {
            let (store, spec) = layer_store(per_offset as u64 + 2 * coordinate_addition as u64, per_offset);
            let routing = RoutingConfig::default();
            let report = finite_difference_check(
                |tape, p| {
                    let field = CapsuleField::new(tape.param(p, "poses")?, tape.param(p, "acts")?)?;
                    let conv = conv_capsule_layer(tape, p, &CapsLayerNames::new("l"), &spec, &field, &routing)?;
                    let class = class_capsule_layer(
                        tape,
                        p,
                        &CapsLayerNames::new("c"),
                        3,
                        &conv,
                        &routing,
                        coordinate_addition,
                    )?;
                    let pose_term = class.poses.mul(tape.param(p, "probe_pose")?)?.sum_all();
                    probe(tape, p, class.acts.scale(50.0))?.add(pose_term)
                },
                &store,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-6), "per_offset={per_offset} coord={coordinate_addition}: {report:?}");
        }
    }
}
