//! The full quaternion capsule network: parameter layout, initialization,
//! forward pass and parameter census.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::Var;
use crate::capsule::{class_capsule_layer, conv_capsule_layer, CapsLayerNames, ConvCapsSpec};
use crate::error::{Error, Result};
use crate::nn::{primary_capsules, BranchSpec, Ctx, ResidualNames};
use crate::real::Real;
use crate::routing::{RoutingConfig, POSE_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub primary_types: usize,
    /// (channels, stride) of each residual block.
    pub pose_blocks: Vec<(usize, usize)>,
    pub act_blocks: Vec<(usize, usize)>,
    pub trunk_blocks: Vec<(usize, usize)>,
    /// Output types of each convolutional capsule layer.
    pub caps_types: Vec<usize>,
    pub caps_kernel: usize,
    pub caps_stride: usize,
    pub branched: bool,
    pub coordinate_addition: bool,
    pub per_kernel_offset_rotors: bool,
    pub routing: RoutingConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 2,
            image_size: 32,
            classes: 5,
            primary_types: 96,
            pose_blocks: vec![(32, 1), (64, 2)],
            act_blocks: vec![(32, 2)],
            trunk_blocks: vec![(64, 1), (96, 2)],
            caps_types: vec![16, 16, 16],
            caps_kernel: 5,
            caps_stride: 1,
            branched: true,
            coordinate_addition: false,
            per_kernel_offset_rotors: false,
            routing: RoutingConfig::default(),
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(±√(6 / fan_in))`
    KaimingUniform { fan_in: usize },
    /// `U(±√(6 / (fan_in + fan_out)))`
    XavierUniform { fan_in: usize, fan_out: usize },
    Uniform { low: f64, high: f64 },
    Constant(f64),
}

impl Init {
    pub fn bound(&self) -> Option<f64> {
        match *self {
            Init::KaimingUniform { fan_in } => Some((6.0 / fan_in as f64).sqrt()),
            Init::XavierUniform { fan_in, fan_out } => Some((6.0 / (fan_in + fan_out) as f64).sqrt()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
    pub module: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    /// Trainable parameters per module, in network order.
    pub modules: Vec<(String, usize)>,
    pub total: usize,
    /// Rotor parameters (angle plus raw axis) over all capsule layers.
    pub transform_params: usize,
    /// Parameters the same transforms would need as 4x4 matrices.
    pub matrix_transform_params: usize,
    /// (child, parent) rotor pairs per capsule layer.
    pub rotor_pairs: Vec<(String, usize)>,
}

impl Census {
    pub fn transform_ratio(&self) -> f64 {
        self.transform_params as f64 / self.matrix_transform_params as f64
    }
}

/// Capsule grid sizes along the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldShape {
    pub types: usize,
    pub height: usize,
    pub width: usize,
}

pub struct NetOutput<'t, T: Real> {
    /// `[b, C]`
    pub class_acts: Var<'t, T>,
    /// `[b, C, 3]`
    pub class_poses: Var<'t, T>,
    /// Primary field followed by every convolutional capsule field.
    pub fields: Vec<FieldShape>,
}

fn same_pad(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

impl Architecture {
    /// The configuration used for gradient checks: 8x8 input, 4 primary
    /// types, one convolutional capsule layer with 2 types, 3 classes.
    pub fn miniature() -> Self {
        Architecture {
            in_channels: 1,
            image_size: 8,
            classes: 3,
            primary_types: 4,
            pose_blocks: vec![(3, 1), (4, 2)],
            act_blocks: vec![(3, 2)],
            trunk_blocks: vec![(4, 1), (4, 2)],
            caps_types: vec![2],
            caps_kernel: 3,
            caps_stride: 1,
            ..Architecture::default()
        }
    }

    pub fn branch_spec(&self) -> BranchSpec {
        BranchSpec {
            primary_types: self.primary_types,
            pose_blocks: self.pose_blocks.clone(),
            act_blocks: self.act_blocks.clone(),
            trunk_blocks: self.trunk_blocks.clone(),
            branched: self.branched,
        }
    }

    fn stride_product(blocks: &[(usize, usize)]) -> usize {
        blocks.iter().map(|b| b.1).product()
    }

    /// Field sizes from the primary capsules to the last convolutional
    /// capsule layer.
    pub fn field_chain(&self) -> Result<Vec<FieldShape>> {
        self.validate()?;
        let pose_extent = self.primary_extent(self.image_size);
        let mut out = vec![FieldShape {
            types: self.primary_types,
            height: pose_extent,
            width: pose_extent,
        }];
        let mut e = pose_extent;
        for &t in &self.caps_types {
            if e < self.caps_kernel {
                return Err(Error::FieldTooSmall {
                    height: e,
                    width: e,
                    kernel: self.caps_kernel,
                });
            }
            e = (e - self.caps_kernel) / self.caps_stride + 1;
            out.push(FieldShape {
                types: t,
                height: e,
                width: e,
            });
        }
        Ok(out)
    }

    fn primary_extent(&self, input: usize) -> usize {
        let blocks = if self.branched { &self.pose_blocks } else { &self.trunk_blocks };
        blocks.iter().fold(input, |e, b| same_pad(e, b.1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.in_channels == 0 || self.classes == 0 || self.primary_types == 0 || self.image_size < 3 {
            return bad("channels, classes, primary types and image size must be positive".into());
        }
        if self.caps_kernel == 0 || self.caps_stride == 0 || self.caps_types.iter().any(|&t| t == 0) {
            return bad("capsule kernel, stride and types must be positive".into());
        }
        if self.routing.iterations == 0 {
            return bad("routing needs at least one iteration".into());
        }
        let empty = if self.branched {
            self.pose_blocks.is_empty() || self.act_blocks.is_empty()
        } else {
            self.trunk_blocks.is_empty()
        };
        if empty {
            return bad("the feature extractor needs at least one residual block per branch".into());
        }
        let all = self.pose_blocks.iter().chain(&self.act_blocks).chain(&self.trunk_blocks);
        if all.clone().any(|&(c, s)| c == 0 || s == 0) {
            return bad("residual block channels and strides must be positive".into());
        }
        if self.branched && Self::stride_product(&self.pose_blocks) != Self::stride_product(&self.act_blocks) {
            return bad("pose and activation branches must share the same total stride".into());
        }
        Ok(())
    }

    fn residual_specs(out: &mut Vec<ParamSpec>, module: &str, prefix: &str, cin: usize, c: usize) {
        let n = ResidualNames::new(prefix);
        let conv = |name: String, shape: Vec<usize>, fan_in: usize| ParamSpec {
            name,
            shape,
            init: Init::KaimingUniform { fan_in },
            trainable: true,
            module: module.to_string(),
        };
        out.push(conv(n.conv1, vec![c, cin, 3, 3], cin * 9));
        Self::norm_specs(out, module, &n.norm1, c);
        out.push(conv(n.conv2, vec![c, c, 3, 3], c * 9));
        Self::norm_specs(out, module, &n.norm2, c);
        out.push(conv(n.skip, vec![c, cin, 1, 1], cin));
        Self::norm_specs(out, module, &n.skip_norm, c);
    }

    fn norm_specs(out: &mut Vec<ParamSpec>, module: &str, prefix: &str, c: usize) {
        for (suffix, value, trainable) in [
            ("scale", 1.0, true),
            ("shift", 0.0, true),
            ("running_mean", 0.0, false),
            ("running_var", 1.0, false),
        ] {
            out.push(ParamSpec {
                name: format!("{prefix}.{suffix}"),
                shape: vec![c],
                init: Init::Constant(value),
                trainable,
                module: module.to_string(),
            });
        }
    }

    fn block_stack(out: &mut Vec<ParamSpec>, module: &str, prefix: &str, cin: usize, blocks: &[(usize, usize)]) -> usize {
        let mut c_prev = cin;
        for (i, &(c, _)) in blocks.iter().enumerate() {
            Self::residual_specs(out, module, &format!("{prefix}.block{}", i + 1), c_prev, c);
            c_prev = c;
        }
        c_prev
    }

    fn head_specs(out: &mut Vec<ParamSpec>, module: &str, name: &str, norm: &str, cin: usize, cout: usize) {
        out.push(ParamSpec {
            name: name.to_string(),
            shape: vec![cout, cin, 1, 1],
            init: Init::XavierUniform {
                fan_in: cin,
                fan_out: cout,
            },
            trainable: true,
            module: module.to_string(),
        });
        Self::norm_specs(out, module, norm, cout);
    }

    fn caps_specs(out: &mut Vec<ParamSpec>, module: &str, prefix: &str, children: usize, parents: usize) {
        let n = CapsLayerNames::new(prefix);
        let pi = std::f64::consts::PI;
        let p = |name: String, shape: Vec<usize>, init: Init| ParamSpec {
            name,
            shape,
            init,
            trainable: true,
            module: module.to_string(),
        };
        out.push(p(n.theta, vec![children, parents], Init::Uniform { low: -pi, high: pi }));
        out.push(p(n.axis, vec![children, parents, 3], Init::Uniform { low: -1.0, high: 1.0 }));
        out.push(p(n.beta_a, vec![parents], Init::Constant(0.0)));
        out.push(p(n.beta_u, vec![parents], Init::Constant(0.0)));
    }

    pub fn conv_caps_spec(&self, layer: usize) -> ConvCapsSpec {
        let in_types = if layer == 0 {
            self.primary_types
        } else {
            self.caps_types[layer - 1]
        };
        ConvCapsSpec {
            in_types,
            out_types: self.caps_types[layer],
            kernel: self.caps_kernel,
            stride: self.caps_stride,
            per_kernel_offset_rotors: self.per_kernel_offset_rotors,
        }
    }

    /// Every parameter and normalization buffer of the network, in a fixed
    /// order that also fixes the initialization stream.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let n3 = self.primary_types * POSE_DIM;
        if self.branched {
            let c = Self::block_stack(&mut out, "pose_branch", "pose", self.in_channels, &self.pose_blocks);
            Self::head_specs(&mut out, "pose_branch", "pose.head", "pose.head_bn", c, n3);
            let c = Self::block_stack(&mut out, "activation_branch", "act", self.in_channels, &self.act_blocks);
            Self::head_specs(&mut out, "activation_branch", "act.head", "act.head_bn", c, self.primary_types);
        } else {
            let c = Self::block_stack(&mut out, "trunk", "trunk", self.in_channels, &self.trunk_blocks);
            Self::head_specs(&mut out, "pose_head", "pose.head", "pose.head_bn", c, n3);
            Self::head_specs(&mut out, "activation_head", "act.head", "act.head_bn", c, self.primary_types);
        }
        for layer in 0..self.caps_types.len() {
            let spec = self.conv_caps_spec(layer);
            let [children, parents] = spec.rotor_shape();
            let name = format!("caps{}", layer + 1);
            Self::caps_specs(&mut out, &format!("conv_caps{}", layer + 1), &name, children, parents);
        }
        let last = self.caps_types.last().copied().unwrap_or(self.primary_types);
        Self::caps_specs(&mut out, "class_caps", "class", last, self.classes);
        out
    }

    /// Deterministic initialization from `seed`.
    pub fn init_parameters<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Constant(v) => vec![T::from_f64(v); n],
                Init::Uniform { low, high } => (0..n).map(|_| T::from_f64(rng.gen_range(low..=high))).collect(),
                init => {
                    let b = init.bound().expect("bounded init");
                    (0..n).map(|_| T::from_f64(rng.gen_range(-b..=b))).collect()
                }
            };
            store.insert(spec.name, Tensor::new(&spec.shape, data)?, spec.trainable)?;
        }
        Ok(store)
    }

    pub fn census(&self) -> Census {
        let mut modules: Vec<(String, usize)> = Vec::new();
        for spec in self.param_specs().into_iter().filter(|s| s.trainable) {
            let n: usize = spec.shape.iter().product();
            match modules.last_mut() {
                Some((m, count)) if *m == spec.module => *count += n,
                _ => modules.push((spec.module, n)),
            }
        }
        let mut rotor_pairs = Vec::new();
        for layer in 0..self.caps_types.len() {
            let [c, p] = self.conv_caps_spec(layer).rotor_shape();
            rotor_pairs.push((format!("conv_caps{}", layer + 1), c * p));
        }
        let last = self.caps_types.last().copied().unwrap_or(self.primary_types);
        rotor_pairs.push(("class_caps".to_string(), last * self.classes));
        let pairs: usize = rotor_pairs.iter().map(|p| p.1).sum();
        Census {
            total: modules.iter().map(|m| m.1).sum(),
            modules,
            transform_params: 4 * pairs,
            matrix_transform_params: 16 * pairs,
            rotor_pairs,
        }
    }

    /// Forward pass from images `[b, C_in, S, S]` to class capsules.
    pub fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'_, 't, T>, images: Var<'t, T>) -> Result<NetOutput<'t, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape("forward", &[&s, &[self.in_channels]]));
        }
        let mut field = primary_capsules(ctx, images, &self.branch_spec())?;
        let shape_of = |f: &crate::capsule::CapsuleField<'t, T>| FieldShape {
            types: f.types(),
            height: f.height(),
            width: f.width(),
        };
        let mut fields = vec![shape_of(&field)];
        for layer in 0..self.caps_types.len() {
            let names = CapsLayerNames::new(&format!("caps{}", layer + 1));
            field = conv_capsule_layer(ctx.tape, ctx.store, &names, &self.conv_caps_spec(layer), &field, &self.routing)?;
            fields.push(shape_of(&field));
        }
        let class = class_capsule_layer(
            ctx.tape,
            ctx.store,
            &CapsLayerNames::new("class"),
            self.classes,
            &field,
            &self.routing,
            self.coordinate_addition,
        )?;
        Ok(NetOutput {
            class_acts: class.acts,
            class_poses: class.poses,
            fields,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;

    #[test]
    fn default_chain() {
        let chain = Architecture::default().field_chain().unwrap();
        let sizes: Vec<(usize, usize)> = chain.iter().map(|f| (f.types, f.height)).collect();
        assert_eq!(sizes, vec![(96, 16), (16, 12), (16, 8), (16, 4)]);
    }

    #[test]
    fn census_pairs() {
        let c = Architecture::default().census();
        assert_eq!(c.rotor_pairs[0].1 * 4, 6144);
        assert_eq!(c.rotor_pairs.last().unwrap().1 * 4, 320);
        assert_eq!(c.transform_ratio(), 0.25);
        assert_eq!(c.total, c.modules.iter().map(|m| m.1).sum::<usize>());
    }

    #[test]
    fn miniature_forward_shapes() {
        let arch = Architecture::miniature();
        let store = arch.init_parameters::<f64>(1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 8, 8], 0.3));
        let mut ctx = Ctx::new(&tape, &store, true);
        let out = arch.forward(&mut ctx, x).unwrap();
        assert_eq!(out.class_acts.shape(), vec![2, 3]);
        assert_eq!(out.class_poses.shape(), vec![2, 3, 3]);
        assert_eq!(out.fields, arch.field_chain().unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::miniature();
        let a = arch.init_parameters::<f32>(9).unwrap();
        let b = arch.init_parameters::<f32>(9).unwrap();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }
}
