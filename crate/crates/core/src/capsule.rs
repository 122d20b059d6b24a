//! Quaternion capsule layers: rotor operators, vote computation and the
//! convolutional and class capsule layers built on EM routing.

use rayon::prelude::*;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::quat::{operator_from_rotor, RotorWeight};
use crate::real::Real;
use crate::routing::{route_windows, RoutingConfig, VoteLayout, POSE_DIM};
use crate::tensor::Tensor;

/// Grid of capsules: poses `[b, T, 3, H, W]` (imaginary parts of pure
/// quaternions) and activations `[b, T, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleField<'t, T: Real> {
    pub poses: Var<'t, T>,
    pub acts: Var<'t, T>,
}

impl<'t, T: Real> CapsuleField<'t, T> {
    pub fn new(poses: Var<'t, T>, acts: Var<'t, T>) -> Result<Self> {
        let (p, a) = (poses.shape(), acts.shape());
        if p.len() != 5 || p[2] != POSE_DIM || a.len() != 4 {
            return Err(Error::shape("capsule_field", &[&p, &a]));
        }
        if p[0] != a[0] || p[1] != a[1] || p[3..] != a[2..] {
            return Err(Error::AlignmentError { pose: p, activation: a });
        }
        Ok(CapsuleField { poses, acts })
    }

    pub fn batch(&self) -> usize {
        self.acts.shape()[0]
    }

    pub fn types(&self) -> usize {
        self.acts.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.acts.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.acts.shape()[3]
    }
}

fn window_count(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent - kernel) / stride + 1
}

fn check_window(h: usize, w: usize, kernel: usize, stride: usize) -> Result<()> {
    if kernel == 0 || stride == 0 {
        return Err(Error::ConfigInvalid(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    if h < kernel || w < kernel {
        return Err(Error::FieldTooSmall {
            height: h,
            width: w,
            kernel,
        });
    }
    Ok(())
}

struct WindowGather {
    kernel: usize,
    stride: usize,
}

impl WindowGather {
    /// Maps every output element of a window view to its source element.
    /// `inner` is the number of contiguous values per (type, position) after
    /// moving the type axis next to them: 3 for poses, 1 for activations.
    fn index_map(&self, shape: &[usize]) -> Vec<usize> {
        let (b, t, h, w) = (shape[0], shape[1], shape[shape.len() - 2], shape[shape.len() - 1]);
        let inner = if shape.len() == 5 { shape[2] } else { 1 };
        let (oh, ow) = (window_count(h, self.kernel, self.stride), window_count(w, self.kernel, self.stride));
        let k = self.kernel;
        let mut map = Vec::with_capacity(b * oh * ow * k * k * t * inner);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (y, x) = (oy * self.stride + ky, ox * self.stride + kx);
                            for ti in 0..t {
                                for c in 0..inner {
                                    map.push((((bi * t + ti) * inner + c) * h + y) * w + x);
                                }
                            }
                        }
                    }
                }
            }
        }
        map
    }
}

struct GatherOp {
    map: Vec<usize>,
}

impl<T: Real> Backward<T> for GatherOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = vec![T::zero(); inputs[0].len()];
        for (&src, &v) in self.map.iter().zip(grad.data()) {
            g[src] += v;
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), g)?)])
    }
}

fn gather<'t, T: Real>(x: Var<'t, T>, gather: &WindowGather, out_shape: &[usize]) -> Result<Var<'t, T>> {
    let map = gather.index_map(&x.shape());
    let value = x.value();
    let data: Vec<T> = map.iter().map(|&i| value.data()[i]).collect();
    Ok(x.tape().push(Tensor::new(out_shape, data)?, &[x], GatherOp { map }))
}

/// Sliding `kernel x kernel` windows without padding. Returns poses
/// `[b, H', W', K·K·T, 3]` and activations `[b, H', W', K·K·T]`, children
/// ordered by (kernel row, kernel column, type).
pub fn extract_receptive_fields<'t, T: Real>(
    field: &CapsuleField<'t, T>,
    kernel: usize,
    stride: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_window(field.height(), field.width(), kernel, stride)?;
    let g = WindowGather { kernel, stride };
    let (oh, ow) = (
        window_count(field.height(), kernel, stride),
        window_count(field.width(), kernel, stride),
    );
    let n = kernel * kernel * field.types();
    let b = field.batch();
    let poses = gather(field.poses, &g, &[b, oh, ow, n, POSE_DIM])?;
    let acts = gather(field.acts, &g, &[b, oh, ow, n])?;
    Ok((poses, acts))
}

struct RotorOperatorOp;

/// Rotation block `B(q) = (w² − |v|²) I + 2 v vᵀ + 2 w [v]ₓ` of the operator
/// for `q = (w, v)`, and its reverse rule through `q = (cos θ, sin θ · a/|a|)`.
impl<T: Real> Backward<T> for RotorOperatorOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (theta, axis) = (inputs[0], inputs[1]);
        let two = T::c(2.0);
        let mut g_theta = vec![T::zero(); theta.len()];
        let mut g_axis = vec![T::zero(); axis.len()];
        for r in 0..theta.len() {
            let a = &axis.data()[r * 3..r * 3 + 3];
            let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let n = [a[0] / norm, a[1] / norm, a[2] / norm];
            let (s, c) = theta.data()[r].sin_cos();
            let (w, v) = (c, [s * n[0], s * n[1], s * n[2]]);
            let g = &grad.data()[r * 9..r * 9 + 9];
            let gm = |i: usize, j: usize| g[i * 3 + j];
            let trace = gm(0, 0) + gm(1, 1) + gm(2, 2);
            let curl = [gm(2, 1) - gm(1, 2), gm(0, 2) - gm(2, 0), gm(1, 0) - gm(0, 1)];
            let gw = two * w * trace + two * (v[0] * curl[0] + v[1] * curl[1] + v[2] * curl[2]);
            let mut gv = [T::zero(); 3];
            for i in 0..3 {
                let sym: T = (0..3).map(|j| (gm(i, j) + gm(j, i)) * v[j]).sum();
                gv[i] = -two * v[i] * trace + two * sym + two * w * curl[i];
            }
            let gv_n = gv[0] * n[0] + gv[1] * n[1] + gv[2] * n[2];
            g_theta[r] = -s * gw + c * gv_n;
            let k = s / norm;
            for i in 0..3 {
                g_axis[r * 3 + i] = k * (gv[i] - gv_n * n[i]);
            }
        }
        Ok(vec![
            Some(Tensor::new(theta.shape(), g_theta)?),
            Some(Tensor::new(axis.shape(), g_axis)?),
        ])
    }
}

/// Rotation blocks `[..., 3, 3]` of the composed operators for rotors
/// parameterized by angles `[...]` and raw axes `[..., 3]`.
pub fn rotor_operators<'t, T: Real>(theta: Var<'t, T>, axis: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ts, as_) = (theta.shape(), axis.shape());
    if as_.len() != ts.len() + 1 || as_[..ts.len()] != ts[..] || as_[ts.len()] != 3 {
        return Err(Error::shape("rotor_operators", &[&ts, &as_]));
    }
    let (tv, av) = (theta.value(), axis.value());
    let mut out = Vec::with_capacity(tv.len() * 9);
    for r in 0..tv.len() {
        let a = &av.data()[r * 3..r * 3 + 3];
        let rotor = RotorWeight::new(tv.data()[r], [a[0], a[1], a[2]]).normalize()?;
        for row in operator_from_rotor(rotor).rotation_block() {
            out.extend_from_slice(&row);
        }
    }
    let mut shape = ts.clone();
    shape.extend_from_slice(&[3, 3]);
    Ok(theta.tape().push(Tensor::new(&shape, out)?, &[theta, axis], RotorOperatorOp))
}

struct VoteOp {
    kernel: usize,
    stride: usize,
}

impl VoteOp {
    fn dims(&self, poses: &[usize], ops: &[usize]) -> (usize, usize, usize, usize, usize, usize, usize) {
        let (b, t, h, w) = (poses[0], poses[1], poses[3], poses[4]);
        let tout = ops[1];
        (b, t, tout, h, w, window_count(h, self.kernel, self.stride), window_count(w, self.kernel, self.stride))
    }
}

impl<T: Real> Backward<T> for VoteOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (poses, ops) = (inputs[0], inputs[1]);
        let (_, t, tout, h, w, oh, ow) = self.dims(poses.shape(), ops.shape());
        let k = self.kernel;
        let n = k * k * t;
        let per_sample_in = t * POSE_DIM * h * w;
        let per_sample_out = oh * ow * n * tout * POSE_DIM;
        let (pd, od, gd) = (poses.data(), ops.data(), grad.data());
        let mut g_poses = vec![T::zero(); poses.len()];
        let partials: Vec<Vec<T>> = g_poses
            .par_chunks_mut(per_sample_in)
            .enumerate()
            .map(|(bi, gp)| {
                let mut g_ops = if needs[1] { vec![T::zero(); od.len()] } else { Vec::new() };
                let p = &pd[bi * per_sample_in..(bi + 1) * per_sample_in];
                let g = &gd[bi * per_sample_out..(bi + 1) * per_sample_out];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (oy * ow + ox) * n;
                        for ky in 0..k {
                            for kx in 0..k {
                                let (y, x) = (oy * self.stride + ky, ox * self.stride + kx);
                                for i in 0..t {
                                    let c = (ky * k + kx) * t + i;
                                    let u: [usize; 3] = std::array::from_fn(|d| ((i * POSE_DIM + d) * h + y) * w + x);
                                    let uv = [p[u[0]], p[u[1]], p[u[2]]];
                                    let mut gu = [T::zero(); 3];
                                    for j in 0..tout {
                                        let m = &od[(c * tout + j) * 9..(c * tout + j) * 9 + 9];
                                        let gv = &g[((base + c) * tout + j) * 3..((base + c) * tout + j) * 3 + 3];
                                        for r in 0..3 {
                                            for col in 0..3 {
                                                gu[col] += m[r * 3 + col] * gv[r];
                                            }
                                        }
                                        if needs[1] {
                                            let go = &mut g_ops[(c * tout + j) * 9..(c * tout + j) * 9 + 9];
                                            for r in 0..3 {
                                                for col in 0..3 {
                                                    go[r * 3 + col] += gv[r] * uv[col];
                                                }
                                            }
                                        }
                                    }
                                    for d in 0..3 {
                                        gp[u[d]] += gu[d];
                                    }
                                }
                            }
                        }
                    }
                }
                g_ops
            })
            .collect();
        let g_ops = needs[1].then(|| {
            let mut acc = vec![T::zero(); od.len()];
            for part in &partials {
                for (a, &v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
            Tensor::new(ops.shape(), acc)
        });
        Ok(vec![
            needs[0].then(|| Tensor::new(poses.shape(), g_poses)).transpose()?,
            g_ops.transpose()?,
        ])
    }
}

/// Votes of every child in every `kernel x kernel` window for every parent
/// type: `votes[b, y', x', c, j, :] = B[c, j] · pose(c)` where `c` runs over
/// (kernel row, kernel column, type) and `B` holds rotation blocks
/// `[K·K·T_in, T_out, 3, 3]`. With `kernel = 1` this is the per-position vote
/// grid `[b, H, W, T_in, T_out, 3]` shared by all windows.
pub fn compute_votes<'t, T: Real>(
    poses: Var<'t, T>,
    operators: Var<'t, T>,
    kernel: usize,
    stride: usize,
) -> Result<Var<'t, T>> {
    let (ps, os) = (poses.shape(), operators.shape());
    if ps.len() != 5 || ps[2] != POSE_DIM || os.len() != 4 || os[2..] != [3, 3] {
        return Err(Error::shape("compute_votes", &[&ps, &os]));
    }
    check_window(ps[3], ps[4], kernel, stride)?;
    if os[0] != kernel * kernel * ps[1] {
        return Err(Error::shape("compute_votes", &[&ps, &os]));
    }
    let op = VoteOp { kernel, stride };
    let (b, t, tout, h, w, oh, ow) = op.dims(&ps, &os);
    let n = kernel * kernel * t;
    let per_sample_in = t * POSE_DIM * h * w;
    let per_sample_out = oh * ow * n * tout * POSE_DIM;
    let (pv, ov) = (poses.value(), operators.value());
    let (pd, od) = (pv.data(), ov.data());
    let mut out = vec![T::zero(); b * per_sample_out];
    out.par_chunks_mut(per_sample_out).enumerate().for_each(|(bi, o)| {
        let p = &pd[bi * per_sample_in..(bi + 1) * per_sample_in];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * n;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let (y, x) = (oy * stride + ky, ox * stride + kx);
                        for i in 0..t {
                            let c = (ky * kernel + kx) * t + i;
                            let u: [T; 3] = std::array::from_fn(|d| p[((i * POSE_DIM + d) * h + y) * w + x]);
                            for j in 0..tout {
                                let m = &od[(c * tout + j) * 9..(c * tout + j) * 9 + 9];
                                let v = &mut o[((base + c) * tout + j) * 3..((base + c) * tout + j) * 3 + 3];
                                for r in 0..3 {
                                    v[r] = m[r * 3] * u[0] + m[r * 3 + 1] * u[1] + m[r * 3 + 2] * u[2];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let value = Tensor::new(&[b, oh, ow, n, tout, POSE_DIM], out)?;
    Ok(poses.tape().push(value, &[poses, operators], op))
}

/// Parameter names of one capsule layer.
#[derive(Debug, Clone)]
pub struct CapsLayerNames {
    pub theta: String,
    pub axis: String,
    pub beta_a: String,
    pub beta_u: String,
}

impl CapsLayerNames {
    pub fn new(prefix: &str) -> Self {
        CapsLayerNames {
            theta: format!("{prefix}.theta"),
            axis: format!("{prefix}.axis"),
            beta_a: format!("{prefix}.beta_a"),
            beta_u: format!("{prefix}.beta_u"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCapsSpec {
    pub in_types: usize,
    pub out_types: usize,
    pub kernel: usize,
    pub stride: usize,
    /// One rotor per (kernel offset, child type, parent type) instead of per
    /// (child type, parent type).
    pub per_kernel_offset_rotors: bool,
}

impl ConvCapsSpec {
    /// Leading extents of the rotor parameters.
    pub fn rotor_shape(&self) -> [usize; 2] {
        let children = if self.per_kernel_offset_rotors {
            self.kernel * self.kernel * self.in_types
        } else {
            self.in_types
        };
        [children, self.out_types]
    }
}

/// Convolutional capsule layer: windowed votes followed by EM routing in
/// every window.
pub fn conv_capsule_layer<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    names: &CapsLayerNames,
    spec: &ConvCapsSpec,
    field: &CapsuleField<'t, T>,
    routing: &RoutingConfig,
) -> Result<CapsuleField<'t, T>> {
    if field.types() != spec.in_types {
        return Err(Error::shape("conv_capsule_layer", &[&field.acts.shape(), &[spec.in_types]]));
    }
    check_window(field.height(), field.width(), spec.kernel, spec.stride)?;
    let ops = rotor_operators(tape.param(store, &names.theta)?, tape.param(store, &names.axis)?)?;
    let (votes, layout) = if spec.per_kernel_offset_rotors {
        (compute_votes(field.poses, ops, spec.kernel, spec.stride)?, VoteLayout::PerWindow)
    } else {
        (compute_votes(field.poses, ops, 1, 1)?, VoteLayout::Shared)
    };
    let out = route_windows(
        votes,
        field.acts,
        tape.param(store, &names.beta_a)?,
        tape.param(store, &names.beta_u)?,
        spec.kernel,
        spec.stride,
        layout,
        routing,
    )?;
    split_routed(out)
}

fn split_routed<T: Real>(out: Var<'_, T>) -> Result<CapsuleField<'_, T>> {
    let s = out.shape();
    let poses = out.slice(2, 0, POSE_DIM)?;
    let acts = out.slice(2, POSE_DIM, POSE_DIM + 1)?.reshape(&[s[0], s[1], s[3], s[4]])?;
    CapsuleField::new(poses, acts)
}

/// Output of the class capsule layer.
#[derive(Debug, Clone, Copy)]
pub struct ClassCapsules<'t, T: Real> {
    /// `[b, C]`
    pub acts: Var<'t, T>,
    /// `[b, C, 3]`
    pub poses: Var<'t, T>,
}

/// Scaled cell centres `((y + ½)/H, (x + ½)/W)` added to the first two vote
/// components, shaped to broadcast against `[b, H, W, T, C, 3]`.
fn coordinate_offsets<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); h * w * POSE_DIM];
    for y in 0..h {
        for x in 0..w {
            data[(y * w + x) * POSE_DIM] = T::from_f64((y as f64 + 0.5) / h as f64);
            data[(y * w + x) * POSE_DIM + 1] = T::from_f64((x as f64 + 0.5) / w as f64);
        }
    }
    Tensor::new(&[1, h, w, 1, 1, POSE_DIM], data).expect("consistent shape")
}

/// Every capsule of the final field votes for each of `classes` parents with
/// rotors shared across positions; one routing pass covers all children.
pub fn class_capsule_layer<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    names: &CapsLayerNames,
    classes: usize,
    field: &CapsuleField<'t, T>,
    routing: &RoutingConfig,
    coordinate_addition: bool,
) -> Result<ClassCapsules<'t, T>> {
    let (h, w) = (field.height(), field.width());
    if h != w {
        return Err(Error::ConfigInvalid(format!("class capsules need a square field, got {h}x{w}")));
    }
    let ops = rotor_operators(tape.param(store, &names.theta)?, tape.param(store, &names.axis)?)?;
    if ops.shape()[..2] != [field.types(), classes] {
        return Err(Error::shape("class_capsule_layer", &[&ops.shape(), &field.acts.shape()]));
    }
    let mut votes = compute_votes(field.poses, ops, 1, 1)?;
    if coordinate_addition {
        votes = votes.add(tape.constant(coordinate_offsets(h, w)))?;
    }
    let out = route_windows(
        votes,
        field.acts,
        tape.param(store, &names.beta_a)?,
        tape.param(store, &names.beta_u)?,
        h,
        1,
        VoteLayout::Shared,
        routing,
    )?;
    let b = field.batch();
    let routed = split_routed(out)?;
    Ok(ClassCapsules {
        acts: routed.acts.reshape(&[b, classes])?,
        poses: routed.poses.reshape(&[b, classes, POSE_DIM])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::{rotate, PureQuaternion, Quaternion};

    #[test]
    fn window_counts() {
        assert_eq!(window_count(16, 5, 1), 12);
        assert_eq!(window_count(12, 5, 1), 8);
        assert_eq!(window_count(8, 5, 1), 4);
        assert_eq!(window_count(7, 3, 2), 3);
    }

    #[test]
    fn quarter_turn_vote() {
        let tape = Tape::<f64>::new();
        let theta = tape.constant(Tensor::from_f64(&[1, 1], &[std::f64::consts::FRAC_PI_4]).unwrap());
        let axis = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 0.0, 1.0]).unwrap());
        let ops = rotor_operators(theta, axis).unwrap();
        let poses = tape.constant(Tensor::from_f64(&[1, 1, 3, 1, 1], &[1.0, 0.0, 0.0]).unwrap());
        let votes = compute_votes(poses, ops, 1, 1).unwrap().value();
        assert_eq!(votes.shape(), &[1, 1, 1, 1, 1, 3]);
        let v = votes.data();
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn operator_blocks_match_rotation() {
        let tape = Tape::<f64>::new();
        let theta = tape.constant(Tensor::from_f64(&[2], &[0.7, -2.1]).unwrap());
        let axis = tape.constant(Tensor::from_f64(&[2, 3], &[0.3, -0.2, 0.9, 1.0, 1.0, -0.5]).unwrap());
        let ops = rotor_operators(theta, axis).unwrap().value();
        let axes = axis.value();
        let u = [0.4, -1.3, 2.2];
        for r in 0..2 {
            let a = &axes.data()[r * 3..r * 3 + 3];
            let rotor: Quaternion<f64> = RotorWeight::new(theta.value().data()[r], [a[0], a[1], a[2]]).normalize().unwrap();
            let direct = rotate(rotor, PureQuaternion::from_array(u)).unwrap().to_array();
            let m = &ops.data()[r * 9..r * 9 + 9];
            for i in 0..3 {
                let v = m[i * 3] * u[0] + m[i * 3 + 1] * u[1] + m[i * 3 + 2] * u[2];
                assert!((v - direct[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_axis_propagates() {
        let tape = Tape::<f64>::new();
        let theta = tape.constant(Tensor::zeros(&[1]));
        let axis = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(rotor_operators(theta, axis), Err(Error::DegenerateAxis { .. })));
    }

    #[test]
    fn small_field_is_rejected() {
        let tape = Tape::<f64>::new();
        let poses = tape.constant(Tensor::zeros(&[1, 2, 3, 3, 4]));
        let acts = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        let field = CapsuleField::new(poses, acts).unwrap();
        assert!(matches!(
            extract_receptive_fields(&field, 5, 1),
            Err(Error::FieldTooSmall { height: 3, width: 4, kernel: 5 })
        ));
    }

    #[test]
    fn misaligned_field_is_rejected() {
        let tape = Tape::<f64>::new();
        let poses = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let acts = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(matches!(CapsuleField::new(poses, acts), Err(Error::AlignmentError { .. })));
    }
}
