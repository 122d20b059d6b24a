//! Convolutional feature extractor: residual blocks and the pose and
//! activation branches that feed the primary capsules.

use crate::autodiff::batchnorm::BatchStats;
use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::capsule::CapsuleField;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::routing::POSE_DIM;

/// Running-statistics momentum: `running = 0.9 · running + 0.1 · batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// State shared by the layers of one forward pass.
pub struct Ctx<'a, 't, T: Real> {
    pub tape: &'t Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    /// Batch statistics per normalization layer, in call order.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, 't, T: Real> Ctx<'a, 't, T> {
    pub fn new(tape: &'t Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Ctx {
            tape,
            store,
            training,
            batch_stats: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        self.tape.param(self.store, name)
    }

    pub fn conv(&self, name: &str, x: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        x.conv2d(self.param(name)?, stride, padding)
    }

    /// Batch normalization with parameters `{prefix}.scale`, `{prefix}.shift`
    /// and running statistics `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn norm(&mut self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        if self.training {
            let (y, stats) = x.batch_norm(scale, shift, None)?;
            if let Some(stats) = stats {
                self.batch_stats.push((prefix.to_string(), stats));
            }
            Ok(y)
        } else {
            let missing = |n: &str| Error::ConfigInvalid(format!("missing running statistics `{n}`"));
            let mean_name = format!("{prefix}.running_mean");
            let var_name = format!("{prefix}.running_var");
            let mean = self.store.value(&mean_name).ok_or_else(|| missing(&mean_name))?;
            let var = self.store.value(&var_name).ok_or_else(|| missing(&var_name))?;
            Ok(x.batch_norm(scale, shift, Some((mean, var)))?.0)
        }
    }
}

/// Folds batch statistics into the running averages of `store`.
pub fn apply_batch_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let keep = T::from_f64(BN_MOMENTUM);
    let take = T::one() - keep;
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let running = store
                .value_mut(&name)
                .ok_or_else(|| Error::ConfigInvalid(format!("missing running statistics `{name}`")))?;
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + take * b;
            }
        }
    }
    Ok(())
}

/// Parameter names below `prefix` for a residual block.
pub struct ResidualNames {
    pub conv1: String,
    pub norm1: String,
    pub conv2: String,
    pub norm2: String,
    pub skip: String,
    pub skip_norm: String,
}

impl ResidualNames {
    pub fn new(prefix: &str) -> Self {
        ResidualNames {
            conv1: format!("{prefix}.conv1"),
            norm1: format!("{prefix}.bn1"),
            conv2: format!("{prefix}.conv2"),
            norm2: format!("{prefix}.bn2"),
            skip: format!("{prefix}.skip"),
            skip_norm: format!("{prefix}.bn_skip"),
        }
    }
}

/// `relu(norm(conv3x3(relu(norm(conv3x3_s(x))))) + norm(conv1x1_s(x)))` with
/// padding 1 on the 3x3 convolutions.
pub fn residual_block<'t, T: Real>(
    ctx: &mut Ctx<'_, 't, T>,
    prefix: &str,
    x: Var<'t, T>,
    stride: usize,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 3 || s[3] < 3 {
        return Err(Error::shape("residual_block", &[&s]));
    }
    let n = ResidualNames::new(prefix);
    let main = ctx.conv(&n.conv1, x, stride, 1)?;
    let main = ctx.norm(&n.norm1, main)?.relu();
    let main = ctx.conv(&n.conv2, main, 1, 1)?;
    let main = ctx.norm(&n.norm2, main)?;
    let skip = ctx.conv(&n.skip, x, stride, 0)?;
    let skip = ctx.norm(&n.skip_norm, skip)?;
    Ok(main.add(skip)?.relu())
}

/// Channel and stride layout of the feature extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub primary_types: usize,
    /// Residual blocks of the pose branch as (channels, stride).
    pub pose_blocks: Vec<(usize, usize)>,
    /// Residual blocks of the activation branch as (channels, stride).
    pub act_blocks: Vec<(usize, usize)>,
    /// Shared residual blocks used when the branches are merged.
    pub trunk_blocks: Vec<(usize, usize)>,
    pub branched: bool,
}

fn blocks<'t, T: Real>(
    ctx: &mut Ctx<'_, 't, T>,
    prefix: &str,
    mut x: Var<'t, T>,
    layout: &[(usize, usize)],
) -> Result<Var<'t, T>> {
    for (i, &(_, stride)) in layout.iter().enumerate() {
        x = residual_block(ctx, &format!("{prefix}.block{}", i + 1), x, stride)?;
    }
    Ok(x)
}

fn pose_head<'t, T: Real>(ctx: &mut Ctx<'_, 't, T>, features: Var<'t, T>, types: usize) -> Result<Var<'t, T>> {
    let y = ctx.conv("pose.head", features, 1, 0)?;
    let y = ctx.norm("pose.head_bn", y)?;
    let s = y.shape();
    y.reshape(&[s[0], types, POSE_DIM, s[2], s[3]])
}

fn activation_head<'t, T: Real>(ctx: &mut Ctx<'_, 't, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = ctx.conv("act.head", features, 1, 0)?;
    Ok(ctx.norm("act.head_bn", y)?.sigmoid())
}

/// Pose grid `[b, N, 3, h, w]`.
pub fn pose_branch<'t, T: Real>(ctx: &mut Ctx<'_, 't, T>, image: Var<'t, T>, spec: &BranchSpec) -> Result<Var<'t, T>> {
    let features = blocks(ctx, "pose", image, &spec.pose_blocks)?;
    pose_head(ctx, features, spec.primary_types)
}

/// Activation grid `[b, N, h, w]` with values in (0, 1).
pub fn activation_branch<'t, T: Real>(
    ctx: &mut Ctx<'_, 't, T>,
    image: Var<'t, T>,
    spec: &BranchSpec,
) -> Result<Var<'t, T>> {
    let features = blocks(ctx, "act", image, &spec.act_blocks)?;
    activation_head(ctx, features)
}

/// Pairs pose and activation grids into primary capsules.
pub fn assemble_primary_capsules<'t, T: Real>(poses: Var<'t, T>, acts: Var<'t, T>) -> Result<CapsuleField<'t, T>> {
    CapsuleField::new(poses, acts)
}

/// Primary capsules from either the two isolated branches or a shared trunk.
pub fn primary_capsules<'t, T: Real>(
    ctx: &mut Ctx<'_, 't, T>,
    image: Var<'t, T>,
    spec: &BranchSpec,
) -> Result<CapsuleField<'t, T>> {
    if spec.branched {
        let poses = pose_branch(ctx, image, spec)?;
        let acts = activation_branch(ctx, image, spec)?;
        assemble_primary_capsules(poses, acts)
    } else {
        let features = blocks(ctx, "trunk", image, &spec.trunk_blocks)?;
        let poses = pose_head(ctx, features, spec.primary_types)?;
        let acts = activation_head(ctx, features)?;
        assemble_primary_capsules(poses, acts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn block_store(cin: usize, c: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let n = ResidualNames::new("b");
        store.insert(n.conv1, Tensor::zeros(&[c, cin, 3, 3]), true).unwrap();
        store.insert(n.conv2, Tensor::zeros(&[c, c, 3, 3]), true).unwrap();
        let skip: Vec<f64> = (0..c * cin).map(|i| (i % 5) as f64 * 0.25 - 0.5).collect();
        store.insert(n.skip, Tensor::new(&[c, cin, 1, 1], skip).unwrap(), true).unwrap();
        for bn in [n.norm1, n.norm2, n.skip_norm] {
            store.insert(format!("{bn}.scale"), Tensor::ones(&[c]), true).unwrap();
            store.insert(format!("{bn}.shift"), Tensor::zeros(&[c]), true).unwrap();
            store.insert(format!("{bn}.running_mean"), Tensor::zeros(&[c]), false).unwrap();
            store.insert(format!("{bn}.running_var"), Tensor::ones(&[c]), false).unwrap();
        }
        store
    }

    #[test]
    fn zero_main_path_leaves_normalized_skip() {
        let store = block_store(2, 4);
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 7) % 11) as f64 / 3.0).collect();
        let x = tape.constant(Tensor::new(&[2, 2, 5, 5], data).unwrap());
        let mut ctx = Ctx::new(&tape, &store, true);
        let y = residual_block(&mut ctx, "b", x, 2).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 3, 3]);
        assert_eq!(ctx.batch_stats.len(), 3);
        let skip = x.conv2d(tape.param(&store, "b.skip").unwrap(), 2, 0).unwrap();
        let scale = tape.constant(Tensor::ones(&[4]));
        let shift = tape.constant(Tensor::zeros(&[4]));
        let (expect, _) = skip.batch_norm(scale, shift, None).unwrap();
        let expect = expect.relu().value();
        for (a, b) in y.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut store = block_store(1, 1);
        let stats = vec![(
            "b.bn1".to_string(),
            BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        )];
        apply_batch_stats(&mut store, &stats).unwrap();
        assert!((store.value("b.bn1.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((store.value("b.bn1.running_var").unwrap().data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn tiny_input_is_rejected() {
        let store = block_store(1, 1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let mut ctx = Ctx::new(&tape, &store, true);
        assert!(matches!(residual_block(&mut ctx, "b", x, 1), Err(Error::ShapeMismatch { .. })));
    }
}
