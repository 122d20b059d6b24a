//! The optimization loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::Tape;
use crate::data::{viewpoint_split, Dataset, Normalization, Phase, SplitMode, SplitSpec, ViewpointSplit};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::nn::{apply_batch_stats, Ctx};
use crate::objective::{margin_schedule, predict, spread_loss_batch};
use crate::real::{DType, Real};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;
use crate::train::evaluate::{evaluate, EvalMetrics, InputPipeline};
use crate::train::metrics::{MetricsLog, MetricsRow, RowKind};
use crate::train::optimizer::{learning_rate, Optimizer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Loaded dataset, its split and the input pipeline.
pub struct PreparedData {
    pub dataset: Dataset,
    pub split: ViewpointSplit,
    pub pipeline: InputPipeline,
}

impl PreparedData {
    /// Evaluation sets of the split: one for standard mode, familiar and
    /// novel viewpoints otherwise.
    pub fn eval_sets(&self, mode: SplitMode) -> Vec<(RowKind, &[usize])> {
        match mode {
            SplitMode::Standard => vec![(RowKind::Test, self.split.novel.as_slice())],
            _ => vec![
                (RowKind::Familiar, self.split.familiar.as_slice()),
                (RowKind::Novel, self.split.novel.as_slice()),
            ],
        }
    }
}

/// Loads and splits the configured dataset. Normalization constants come
/// from `normalization` when given, else from the training split.
pub fn prepare_data(cfg: &TrainConfig, normalization: Option<Normalization>) -> Result<PreparedData> {
    let mut dataset = Dataset::load(cfg.dataset, &cfg.data_dir, cfg.synthetic_sizes())?;
    dataset.truncate(cfg.train_limit, cfg.test_limit);
    let split = viewpoint_split(&dataset.train, &dataset.test, &SplitSpec::new(cfg.split))?;
    let normalization = match normalization {
        Some(n) => n,
        None => Normalization::fit(split.train.iter().map(|&i| &dataset.train[i]), cfg.dataset)?,
    };
    Ok(PreparedData {
        pipeline: InputPipeline {
            kind: cfg.dataset,
            normalization,
            augment_fashion: cfg.augment_fashion,
            seed: cfg.seed,
        },
        dataset,
        split,
    })
}

/// Training-set order of `epoch`.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[24..].copy_from_slice(b"shuffle\0");
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::from_seed(key));
    order
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (with a checkpoint) once this many optimizer steps are done.
    pub max_steps: Option<u64>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    /// False when stopped early by `max_steps`.
    pub completed: bool,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Mean training loss of every epoch finished in this invocation.
    pub epoch_losses: Vec<(usize, f64)>,
    /// Last evaluation.
    pub evals: Vec<(RowKind, EvalMetrics)>,
}

pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = || match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, opts),
        DType::F64 => train_typed::<f64>(cfg, opts),
    };
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    }
}

struct State<T> {
    store: ParamStore<T>,
    optimizer: Optimizer<T>,
    step: u64,
}

fn resume_state<T: Real>(cfg: &TrainConfig, arch: &Architecture, path: &Path) -> Result<(State<T>, Normalization)> {
    let ck = Checkpoint::load(path)?;
    let saved = TrainConfig::parse(&ck.config)?;
    if saved.architecture() != *arch {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written for a different architecture",
            path.display()
        )));
    }
    let restored = ck.restore::<T>(arch)?;
    let mut optimizer = Optimizer::from_config(cfg);
    optimizer.steps = ck.step;
    optimizer.state = restored.optimizer_state;
    Ok((
        State {
            store: restored.store,
            optimizer,
            step: ck.step,
        },
        ck.normalization,
    ))
}

fn save<T: Real>(cfg: &TrainConfig, state: &State<T>, norm: &Normalization) -> Result<()> {
    Checkpoint::capture(state.step, &cfg.to_text(), norm, &state.store, Some(&state.optimizer)).save(&cfg.checkpoint_path())
}

fn dump_batch(cfg: &TrainConfig, step: u64, batch: usize, indices: &[usize], loss: f64) {
    let text = format!(
        "step {step}\nbatch {batch}\nloss {loss}\nsamples {}\n",
        indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
    );
    let _ = std::fs::create_dir_all(&cfg.out_dir);
    let _ = std::fs::write(cfg.out_dir.join("nonfinite_batch.txt"), text);
}

fn train_typed<T: Real>(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let arch = cfg.architecture();
    let (mut state, saved_norm) = match &opts.resume {
        Some(path) => {
            let (s, n) = resume_state::<T>(cfg, &arch, path)?;
            (s, Some(n))
        }
        None => (
            State {
                store: arch.init_parameters::<T>(cfg.seed)?,
                optimizer: Optimizer::from_config(cfg),
                step: 0,
            },
            None,
        ),
    };
    let data = prepare_data(cfg, saved_norm)?;
    let train_idx = &data.split.train;
    if train_idx.is_empty() {
        return Err(Error::DatasetMissing(format!("no training samples for the {} split", cfg.split)));
    }
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let metrics_path = cfg.metrics_path();
    let (mut log, wall_offset) = if opts.resume.is_some() && metrics_path.exists() {
        MetricsLog::resume(&metrics_path, state.step)?
    } else {
        (MetricsLog::create(&metrics_path, VERSION, &cfg.to_text())?, 0.0)
    };
    let clock = Instant::now();
    let wall = || wall_offset + clock.elapsed().as_secs_f64();
    let norm = data.pipeline.normalization.clone();
    let mut summary = TrainSummary {
        steps: state.step,
        completed: false,
        checkpoint: cfg.checkpoint_path(),
        metrics: metrics_path.clone(),
        epoch_losses: Vec::new(),
        evals: Vec::new(),
    };

    while state.step < total {
        let epoch = (state.step / per_epoch) as usize;
        let order = epoch_order(train_idx, cfg.seed, epoch);
        let first = (state.step % per_epoch) as usize;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for b in first..per_epoch as usize {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                save(cfg, &state, &norm)?;
                summary.steps = state.step;
                return Ok(summary);
            }
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let margin = margin_schedule(state.step, cfg.margin_clamp);
            let lr = learning_rate(cfg, epoch);
            let (images, labels) = data.pipeline.batch::<T>(&data.dataset.train, idx, Phase::Train, state.step)?;
            let (loss, acc, grads, stats) = {
                let tape = Tape::new();
                let mut ctx = Ctx::new(&tape, &state.store, true);
                let out = arch.forward(&mut ctx, tape.constant(images))?;
                let acts = out.class_acts.value();
                let hits = acts
                    .data()
                    .chunks(arch.classes)
                    .zip(&labels)
                    .filter(|(row, &l)| predict(row) == l)
                    .count();
                let loss = spread_loss_batch(out.class_acts, &labels, margin)?;
                let value = loss.value().item().as_f64();
                if !value.is_finite() {
                    dump_batch(cfg, state.step, b, idx, value);
                    return Err(Error::NonFiniteLoss {
                        step: state.step,
                        batch: b,
                        loss: value,
                    });
                }
                let grads = tape.backpropagate(loss, &state.store)?;
                (value, hits as f64 / idx.len() as f64, grads, ctx.batch_stats)
            };
            state.optimizer.step(&mut state.store, &grads, lr)?;
            apply_batch_stats(&mut state.store, &stats)?;
            if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
                log.append(&MetricsRow {
                    step: state.step,
                    epoch,
                    kind: RowKind::Train,
                    margin,
                    loss,
                    train_acc: Some(acc),
                    eval_acc: None,
                    wall_time: wall(),
                })?;
            }
            state.step += 1;
            loss_sum += loss;
            batches += 1;
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                save(cfg, &state, &norm)?;
            }
        }
        if batches > 0 {
            summary.epoch_losses.push((epoch, loss_sum / batches as f64));
        }
        let last = state.step == total;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if last || due {
            let margin = margin_schedule(state.step, cfg.margin_clamp);
            summary.evals.clear();
            for (kind, set) in data.eval_sets(cfg.split) {
                let m = evaluate(&arch, &state.store, &data.pipeline, &data.dataset.test, set, cfg.batch_size, margin)?;
                log.append(&MetricsRow {
                    step: state.step,
                    epoch,
                    kind,
                    margin,
                    loss: m.loss,
                    train_acc: None,
                    eval_acc: Some(m.accuracy),
                    wall_time: wall(),
                })?;
                summary.evals.push((kind, m));
            }
        }
        if opts.verbose {
            let loss = summary.epoch_losses.last().map(|e| e.1).unwrap_or(f64::NAN);
            let evals: Vec<String> = summary.evals.iter().map(|(k, m)| format!("{} {:.4}", k.name(), m.accuracy)).collect();
            eprintln!(
                "epoch {}/{} step {} loss {loss:.5} {} ({:.1} s)",
                epoch + 1,
                cfg.epochs,
                state.step,
                evals.join(" "),
                wall()
            );
        }
        save(cfg, &state, &norm)?;
    }
    summary.steps = state.step;
    summary.completed = true;
    Ok(summary)
}

/// Evaluates a checkpoint on the evaluation sets that `cfg` selects. `cfg`
/// is usually the checkpoint's own configuration with a different dataset
/// directory or split.
pub fn evaluate_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Vec<(RowKind, EvalMetrics)>> {
    cfg.validate()?;
    match ck.dtype().unwrap_or(cfg.dtype) {
        DType::F32 => evaluate_typed::<f32>(ck, cfg),
        DType::F64 => evaluate_typed::<f64>(ck, cfg),
    }
}

fn evaluate_typed<T: Real>(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Vec<(RowKind, EvalMetrics)>> {
    let arch = cfg.architecture();
    let store = ck.restore::<T>(&arch)?.store;
    let data = prepare_data(cfg, Some(ck.normalization.clone()))?;
    let margin = margin_schedule(ck.step, cfg.margin_clamp);
    data.eval_sets(cfg.split)
        .into_iter()
        .map(|(kind, set)| {
            let m = evaluate(&arch, &store, &data.pipeline, &data.dataset.test, set, cfg.batch_size, margin)?;
            Ok((kind, m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let idx: Vec<usize> = (0..50).collect();
        let a = epoch_order(&idx, 1, 0);
        assert_eq!(a, epoch_order(&idx, 1, 0));
        assert_ne!(a, epoch_order(&idx, 1, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, idx);
    }
}
