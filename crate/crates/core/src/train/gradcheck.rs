//! Gradient-check battery behind `qcaps gradcheck`: every differentiable
//! primitive, the rotor layer, unrolled EM routing and the miniature network,
//! each compared with central differences in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_with_finite_differences, concat, finite_difference_check, GradCheckOptions, ParamStore, Tape, Var};
use crate::capsule::{compute_votes, extract_receptive_fields, rotor_operators, CapsuleField};
use crate::error::Result;
use crate::model::Architecture;
use crate::nn::Ctx;
use crate::objective::spread_loss_batch;
use crate::routing::{em_route_graph, route_windows, RoutingConfig, VoteLayout};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const ROTOR_TOLERANCE: f64 = 1e-6;
pub const ROUTING_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Random evaluation points per primitive.
pub const POINTS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub component: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub passed: bool,
}

type LossFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>>;

/// Named inputs with their shapes and sampling ranges, plus the function
/// under test; its output is contracted with a fixed random probe.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(&'static str, Vec<usize>, f64, f64)>,
    pub output: Vec<usize>,
    pub f: LossFn,
}

fn boxed<F>(f: F) -> LossFn
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>> + 'static,
{
    Box::new(f)
}

fn x<'t>(tape: &'t Tape<f64>, p: &ParamStore<f64>, name: &str) -> Result<Var<'t, f64>> {
    tape.param(p, name)
}

macro_rules! case {
    ($name:expr, [$(($in:expr, $shape:expr, $lo:expr, $hi:expr)),*], $out:expr, |$t:ident, $p:ident| $body:expr) => {
        Case {
            name: $name,
            inputs: vec![$(($in, $shape.to_vec(), $lo, $hi)),*],
            output: $out.to_vec(),
            f: boxed(move |$t, $p| $body),
        }
    };
}

/// One case per differentiable primitive of the engine.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case!("add", [("a", [2, 3], -1.0, 1.0), ("b", [3], -1.0, 1.0)], [2, 3], |t, p| x(t, p, "a")?.add(x(t, p, "b")?)),
        case!("sub", [("a", [2, 3], -1.0, 1.0), ("b", [2, 1], -1.0, 1.0)], [2, 3], |t, p| x(t, p, "a")?.sub(x(t, p, "b")?)),
        case!("mul", [("a", [2, 3], -1.0, 1.0), ("b", [2, 3], -1.0, 1.0)], [2, 3], |t, p| x(t, p, "a")?.mul(x(t, p, "b")?)),
        case!("div", [("a", [2, 3], -1.0, 1.0), ("b", [1, 3], 0.5, 2.0)], [2, 3], |t, p| x(t, p, "a")?.div(x(t, p, "b")?)),
        case!("neg", [("a", [5], -1.0, 1.0)], [5], |t, p| Ok(x(t, p, "a")?.neg())),
        case!("relu", [("a", [6], -1.0, 1.0)], [6], |t, p| Ok(x(t, p, "a")?.relu())),
        case!("sigmoid", [("a", [5], -3.0, 3.0)], [5], |t, p| Ok(x(t, p, "a")?.sigmoid())),
        case!("exp", [("a", [5], -2.0, 2.0)], [5], |t, p| Ok(x(t, p, "a")?.exp())),
        case!("log", [("a", [5], 0.3, 3.0)], [5], |t, p| Ok(x(t, p, "a")?.log())),
        case!("sqrt", [("a", [5], 0.3, 3.0)], [5], |t, p| Ok(x(t, p, "a")?.sqrt())),
        case!("square", [("a", [5], -2.0, 2.0)], [5], |t, p| Ok(x(t, p, "a")?.square())),
        case!("sin", [("a", [5], -3.0, 3.0)], [5], |t, p| Ok(x(t, p, "a")?.sin())),
        case!("cos", [("a", [5], -3.0, 3.0)], [5], |t, p| Ok(x(t, p, "a")?.cos())),
        case!("scale", [("a", [4], -1.0, 1.0)], [4], |t, p| Ok(x(t, p, "a")?.scale(-1.7))),
        case!("offset", [("a", [4], -1.0, 1.0)], [4], |t, p| Ok(x(t, p, "a")?.offset(0.3).square())),
        case!("sum", [("a", [2, 3, 2], -1.0, 1.0)], [2, 2], |t, p| x(t, p, "a")?.sum(1, false)),
        case!("mean", [("a", [2, 3, 2], -1.0, 1.0)], [1, 3, 2], |t, p| x(t, p, "a")?.mean(0, true)),
        case!("max", [("a", [3, 4], -1.0, 1.0)], [3], |t, p| x(t, p, "a")?.max(1, false)),
        case!("sum_all", [("a", [2, 3], -1.0, 1.0)], [], |t, p| Ok(x(t, p, "a")?.square().sum_all())),
        case!("mean_all", [("a", [2, 3], -1.0, 1.0)], [], |t, p| Ok(x(t, p, "a")?.square().mean_all())),
        case!("softmax", [("a", [2, 4], -2.0, 2.0)], [2, 4], |t, p| x(t, p, "a")?.softmax(1)),
        case!("reshape", [("a", [2, 3], -1.0, 1.0)], [3, 2], |t, p| x(t, p, "a")?.reshape(&[3, 2])),
        case!("permute", [("a", [2, 3, 4], -1.0, 1.0)], [4, 2, 3], |t, p| x(t, p, "a")?.permute(&[2, 0, 1])),
        case!("transpose", [("a", [2, 3], -1.0, 1.0)], [3, 2], |t, p| x(t, p, "a")?.transpose(0, 1)),
        case!("slice", [("a", [2, 5], -1.0, 1.0)], [2, 2], |t, p| x(t, p, "a")?.slice(1, 1, 3)),
        case!("broadcast_to", [("a", [1, 3], -1.0, 1.0)], [4, 3], |t, p| x(t, p, "a")?.broadcast_to(&[4, 3])),
        case!("concat", [("a", [2, 3], -1.0, 1.0), ("b", [2, 2], -1.0, 1.0)], [2, 5], |t, p| concat(
            &[x(t, p, "a")?, x(t, p, "b")?],
            1
        )),
        case!("matmul", [("a", [3, 4], -1.0, 1.0), ("b", [4, 2], -1.0, 1.0)], [3, 2], |t, p| x(t, p, "a")?
            .matmul(x(t, p, "b")?)),
        case!("conv2d", [("a", [2, 2, 5, 5], -1.0, 1.0), ("w", [3, 2, 3, 3], -1.0, 1.0)], [2, 3, 3, 3], |t, p| x(
            t, p, "a"
        )?
        .conv2d(x(t, p, "w")?, 2, 1)),
        case!(
            "batch_norm",
            [("a", [3, 2, 2, 2], -1.0, 1.0), ("g", [2], 0.5, 1.5), ("s", [2], -0.5, 0.5)],
            [3, 2, 2, 2],
            |t, p| Ok(x(t, p, "a")?.batch_norm(x(t, p, "g")?, x(t, p, "s")?, None)?.0)
        ),
        case!("spread_loss", [("a", [3, 4], 0.0, 1.0)], [], |t, p| spread_loss_batch(x(t, p, "a")?, &[0, 2, 1], 0.4)),
        case!(
            "receptive_fields",
            [("poses", [1, 2, 3, 4, 4], -1.0, 1.0), ("acts", [1, 2, 4, 4], 0.0, 1.0)],
            [1, 2, 2, 18, 3],
            |t, p| {
                let field = CapsuleField::new(x(t, p, "poses")?, x(t, p, "acts")?)?;
                let (poses, acts) = extract_receptive_fields(&field, 3, 1)?;
                poses.add(acts.reshape(&[1, 2, 2, 18, 1])?)
            }
        ),
        case!(
            "compute_votes",
            [("poses", [1, 2, 3, 3, 3], -1.0, 1.0), ("ops", [8, 2, 3, 3], -1.0, 1.0)],
            [1, 2, 2, 8, 2, 3],
            |t, p| compute_votes(x(t, p, "poses")?, x(t, p, "ops")?, 2, 1)
        ),
    ]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Worst relative error of `case` over [`POINTS`] random points.
pub fn check_case(case: &Case, seed: u64) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(point));
        let mut store = ParamStore::new();
        for (name, shape, lo, hi) in &case.inputs {
            store.insert(*name, random(&mut rng, shape, *lo, *hi), true)?;
        }
        store.insert("probe", random(&mut rng, &case.output, -1.0, 1.0), false)?;
        let report = finite_difference_check(
            |t, p| (case.f)(t, p)?.mul(t.param(p, "probe")?).map(|v| v.sum_all()),
            &store,
            GradCheckOptions::default(),
        )?;
        worst = worst.max(report.max_rel_error);
        coords += report.coords;
    }
    Ok((worst, coords))
}

fn row(component: impl Into<String>, max_rel_error: f64, coords: usize, tolerance: f64) -> GradCheckRow {
    GradCheckRow {
        component: component.into(),
        max_rel_error,
        tolerance,
        coords,
        passed: max_rel_error.is_finite() && max_rel_error <= tolerance,
    }
}

/// Rotor angle/axis → rotation operators in isolation.
pub fn rotor_layer_check() -> Result<(f64, usize)> {
    let case = case!(
        "rotor_operators",
        [("theta", [3, 2], -3.1, 3.1), ("axis", [3, 2, 3], -1.0, 1.0)],
        [3, 2, 3, 3],
        |t, p| rotor_operators(x(t, p, "theta")?, x(t, p, "axis")?)
    );
    check_case(&case, 77)
}

/// Fused windowed routing and the primitive-composed graph, both with the
/// default two iterations.
pub fn routing_checks() -> Result<Vec<(String, f64, usize)>> {
    let cfg = RoutingConfig::default();
    let fused = Case {
        name: "em_routing_windows",
        inputs: vec![
            ("votes", vec![2, 4, 4, 2, 3, 3], -1.5, 1.5),
            ("acts", vec![2, 2, 4, 4], 0.05, 0.95),
            ("beta_a", vec![3], -0.5, 0.5),
            ("beta_u", vec![3], -0.5, 0.5),
        ],
        output: vec![2, 3, 4, 2, 2],
        f: boxed(move |t, p| {
            let out = route_windows(
                x(t, p, "votes")?,
                x(t, p, "acts")?,
                x(t, p, "beta_a")?,
                x(t, p, "beta_u")?,
                3,
                1,
                VoteLayout::Shared,
                &cfg,
            )?;
            // Activations move little at the default inverse temperature.
            let w = Tensor::new(&[1, 1, 4, 1, 1], vec![1.0, 1.0, 1.0, 100.0])?;
            out.mul(t.constant(w))
        }),
    };
    let graph = Case {
        name: "em_routing_graph",
        inputs: vec![
            ("votes", vec![6, 3, 3], -1.0, 1.0),
            ("acts", vec![6], 0.1, 0.9),
            ("beta_a", vec![3], -0.5, 0.5),
            ("beta_u", vec![3], -0.5, 0.5),
        ],
        output: vec![3, 4],
        f: boxed(move |t, p| {
            let (mu, a) = em_route_graph(x(t, p, "votes")?, x(t, p, "acts")?, x(t, p, "beta_a")?, x(t, p, "beta_u")?, &cfg)?;
            concat(&[mu, a.scale(100.0).reshape(&[3, 1])?], 1)
        }),
    };
    let mut out = Vec::new();
    for (label, case) in [("fused windows", fused), ("unrolled graph", graph)] {
        let (e, c) = check_case(&case, 91)?;
        out.push((format!("EM routing T=2 ({label})"), e, c));
    }
    Ok(out)
}

/// Miniature network from pixels to spread loss, batch statistics included.
pub fn network_check() -> Result<(f64, usize)> {
    let arch = Architecture::miniature();
    let mut store = arch.init_parameters::<f64>(5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    store.insert("images", random(&mut rng, &[3, 1, 8, 8], 0.0, 1.0), false)?;
    let arch2 = arch.clone();
    let report = finite_difference_check(
        move |t, p| {
            let images = t.param(p, "images")?;
            let mut ctx = Ctx::new(t, p, true);
            let out = arch2.forward(&mut ctx, images)?;
            Ok(spread_loss_batch(out.class_acts, &[0, 1, 2], 0.9)?.scale(100.0))
        },
        &store,
        GradCheckOptions::default(),
    )?;
    Ok((report.max_rel_error, report.coords))
}

/// Feeds negated gradients to the comparison; the harness must flag them.
pub fn self_test() -> Result<f64> {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::from_f64(&[3], &[0.3, -0.7, 1.1])?, true)?;
    let f = boxed(|t, p| Ok(t.param(p, "a")?.sin().sum_all()));
    let tape = Tape::new();
    let loss = f(&tape, &store)?;
    let mut grads = tape.backpropagate(loss, &store)?;
    for g in grads.values_mut() {
        *g = g.map(|v| -v);
    }
    drop(tape);
    Ok(compare_with_finite_differences(&f, &store, &grads, GradCheckOptions::default())?.max_rel_error)
}

/// Full report. `tolerance` overrides every per-component tolerance.
pub fn run_suite(tolerance: Option<f64>) -> Result<Vec<GradCheckRow>> {
    let tol = |default: f64| tolerance.unwrap_or(default);
    let mut rows = Vec::new();
    for (i, case) in primitive_cases().iter().enumerate() {
        let (e, c) = check_case(case, i as u64)?;
        rows.push(row(format!("primitive {}", case.name), e, c, tol(PRIMITIVE_TOLERANCE)));
    }
    let (e, c) = rotor_layer_check()?;
    rows.push(row("rotor layer", e, c, tol(ROTOR_TOLERANCE)));
    for (name, e, c) in routing_checks()? {
        rows.push(row(name, e, c, tol(ROUTING_TOLERANCE)));
    }
    let (e, c) = network_check()?;
    rows.push(row("miniature network", e, c, tol(NETWORK_TOLERANCE)));
    let corrupted = self_test()?;
    rows.push(GradCheckRow {
        component: "self-test (negated gradient is flagged)".into(),
        max_rel_error: corrupted,
        tolerance: tol(PRIMITIVE_TOLERANCE),
        coords: 3,
        passed: corrupted > tol(PRIMITIVE_TOLERANCE),
    });
    Ok(rows)
}
