//! Baseline and joint training loops plus the ablation runner.
//!
//! All three loops share one batch schedule: every step draws a positive-pair
//! batch, one keyframe per e-side episode and an understanding-update coin,
//! each from its own seeded stream. The understanding baseline consumes the
//! u-side of each batch and the execution baseline the e-side, so a joint run
//! with the alignment weight at zero and the update frequency at one
//! reproduces both baselines step for step.

mod ablation;
mod joint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationTable};
pub use joint::{
    objective, objective_and_grads, JointModels, ModelRefs, ObjectiveWeights, StepGrads,
    StepInputs, StepLosses,
};

use crate::alignment::{mi_lower_bound, AlignmentHead, DEFAULT_LATENT_DIM, DEFAULT_TEMPERATURE};
use crate::datagen::{Dataset, Split};
use crate::encoders::{au_logits, ee_success, AUModel, EEModel, EncoderConfig, SuccessRule};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, SeededSampler};
use crate::pairing::{PairBatch, PairSampler, PairStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub au_step_size: f64,
    pub ee_step_size: f64,
    /// Step size of the alignment heads.
    pub align_step_size: f64,
    pub align_temperature: f64,
    pub lambda_ee: f64,
    pub lambda_align: f64,
    pub strategy: PairStrategy,
    /// Forbid two pairs with the same matching key in one batch.
    pub distinct_keys: bool,
    /// Probability that a joint step includes the understanding loss. The
    /// understanding baseline applies it on every step.
    pub au_frequency: f64,
    /// Training fractions at which checkpoints are kept; initialization is
    /// always kept as well.
    pub checkpoint_fractions: Vec<f64>,
    pub d_z: usize,
    pub encoder: EncoderConfig,
    pub stop_grad_encoders: bool,
    pub success: SuccessRule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            au_step_size: 3e-3,
            ee_step_size: 3e-3,
            align_step_size: 1e-4,
            align_temperature: DEFAULT_TEMPERATURE,
            lambda_ee: 1.0,
            lambda_align: 0.5,
            strategy: PairStrategy::ByInstruction,
            distinct_keys: true,
            au_frequency: 0.2,
            checkpoint_fractions: vec![0.05, 0.1, 0.25, 0.5, 1.0],
            d_z: DEFAULT_LATENT_DIM,
            encoder: EncoderConfig::default(),
            stop_grad_encoders: false,
            success: SuccessRule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ee < 0.0 || self.lambda_align < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.au_frequency > 0.0 && self.au_frequency <= 1.0) {
            return Err(Error::Config(format!(
                "understanding update frequency must lie in (0, 1], got {}",
                self.au_frequency
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for contrastive terms".into(),
            ));
        }
        for (name, v) in [
            ("au_step_size", self.au_step_size),
            ("ee_step_size", self.ee_step_size),
            ("align_step_size", self.align_step_size),
            ("align_temperature", self.align_temperature),
            ("au_temperature", self.encoder.au_temperature),
            ("success tolerance", self.success.tolerance),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self
            .checkpoint_fractions
            .iter()
            .any(|f| !(*f >= 0.0 && *f <= 1.0))
        {
            return Err(Error::Config(
                "checkpoint fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the per-epoch metric log. Terms a run does not train are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub au_loss: Option<f64>,
    pub ee_loss: Option<f64>,
    pub align_loss: Option<f64>,
    pub mi_lower_bound: Option<f64>,
    pub au_accuracy: Option<f64>,
    pub ee_success: Option<f64>,
    /// Seconds since the start of the run; kept out of the metric log file.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Batch size actually used after capping at the available distinct keys.
    pub effective_batch: usize,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Delimited-text log, one row per epoch. Absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,au_loss,ee_loss,align_loss,mi_lower_bound,au_accuracy,ee_success\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for m in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.epoch,
                fmt(m.au_loss),
                fmt(m.ee_loss),
                fmt(m.align_loss),
                fmt(m.mi_lower_bound),
                fmt(m.au_accuracy),
                fmt(m.ee_success)
            ));
        }
        out
    }
}

/// Model snapshot at a training fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub fraction: f64,
    pub epoch: usize,
    pub au: Option<AUModel>,
    pub ee: Option<EEModel>,
    pub head: Option<AlignmentHead>,
    pub config: TrainConfig,
}

/// `init` for 0, `final` for 1, otherwise `f0.25`-style.
pub fn checkpoint_tag(fraction: f64) -> String {
    if fraction <= 0.0 {
        "init".into()
    } else if fraction >= 1.0 {
        "final".into()
    } else {
        format!("f{fraction:.2}")
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub au: Option<AUModel>,
    pub ee: Option<EEModel>,
    pub head: Option<AlignmentHead>,
    pub metrics: RunMetrics,
    pub checkpoints: Vec<Checkpoint>,
    /// Set when training stopped on a non-finite value; models and
    /// checkpoints hold the last finite state.
    pub divergence: Option<String>,
}

impl TrainRun {
    pub fn checkpoint(&self, tag: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.tag == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Understanding,
    Execution,
    Joint,
}

/// One drawn step of the shared schedule.
#[derive(Debug, Clone)]
pub struct ScheduledStep {
    pub batch: PairBatch,
    pub keyframes: Vec<usize>,
    pub au_active: bool,
}

/// The seeded batch schedule shared by every training loop.
#[derive(Debug, Clone)]
pub struct Schedule {
    sampler: PairSampler,
    batch_size: usize,
    steps_per_epoch: usize,
    au_frequency: f64,
    keyframes: usize,
    pairs_rng: SeededSampler,
    keyframe_rng: SeededSampler,
    coin_rng: SeededSampler,
}

impl Schedule {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Schedule> {
        let sampler = PairSampler::for_split(ds, Split::Train, cfg.strategy, cfg.distinct_keys);
        let batch_size = cfg.batch_size.min(sampler.capacity());
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "{} pairing leaves {} usable train identities; need at least 2",
                cfg.strategy,
                sampler.capacity()
            )));
        }
        let n_train = ds.split_ids(Split::Train).len();
        let root = SeededSampler::new(cfg.seed);
        Ok(Schedule {
            sampler,
            batch_size,
            steps_per_epoch: n_train.div_ceil(batch_size).max(1),
            au_frequency: cfg.au_frequency,
            keyframes: ds.config.keyframes,
            pairs_rng: root.fork("pairs"),
            keyframe_rng: root.fork("keyframes"),
            coin_rng: root.fork("au-coin"),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn next_step(&mut self) -> Result<ScheduledStep> {
        let batch = self.sampler.sample(self.batch_size, &mut self.pairs_rng)?;
        let keyframes = (0..batch.len())
            .map(|_| self.keyframe_rng.below(self.keyframes))
            .collect();
        let au_active = self.au_frequency >= 1.0 || self.coin_rng.bernoulli(self.au_frequency);
        Ok(ScheduledStep {
            batch,
            keyframes,
            au_active,
        })
    }
}

/// Fraction of `split` episodes whose top-scoring instruction is correct.
pub fn au_accuracy(model: &AUModel, ds: &Dataset, split: Split) -> Result<f64> {
    let ids = ds.split_ids(split);
    if ids.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "no {} episodes",
            split.as_str()
        )));
    }
    let refs: Vec<_> = ids.iter().map(|&i| &ds.episode(i).observations).collect();
    let fwd = model.forward(&refs)?;
    let mut correct = 0;
    for (row, &id) in ids.iter().enumerate() {
        if au_logits(model, fwd.u.row(row))?.prediction == ds.episode(id).instruction_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// Success flag of every episode in the dataset, indexed by episode id.
pub fn ee_outcomes(model: &EEModel, ds: &Dataset, rule: &SuccessRule) -> Result<Vec<bool>> {
    ds.episodes
        .iter()
        .map(|ep| {
            let ids = vec![ep.instruction_id; ep.states.rows()];
            let fwd = model.forward(&ep.states, &ids)?;
            Ok(ee_success(&fwd.actions, &ep.actions, rule))
        })
        .collect()
}

pub fn ee_success_rate(
    model: &EEModel,
    ds: &Dataset,
    split: Split,
    rule: &SuccessRule,
) -> Result<f64> {
    let outcomes = ee_outcomes(model, ds, rule)?;
    let ids = ds.split_ids(split);
    if ids.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "no {} episodes",
            split.as_str()
        )));
    }
    Ok(ids.iter().filter(|&&i| outcomes[i]).count() as f64 / ids.len() as f64)
}

/// Freshly initialized models for a run, each from its own seeded stream.
pub fn initial_models(ds: &Dataset, cfg: &TrainConfig) -> JointModels {
    let root = SeededSampler::new(cfg.seed);
    let c = &ds.config;
    let n_instr = ds.instruction_count();
    JointModels {
        au: AUModel::new(c.d_obs, n_instr, &cfg.encoder, &mut root.fork("au-init")),
        ee: EEModel::new(
            c.d_state,
            c.d_act,
            n_instr,
            &cfg.encoder,
            &mut root.fork("ee-init"),
        ),
        head: AlignmentHead::new(
            cfg.encoder.d_u,
            cfg.encoder.d_e,
            cfg.d_z,
            &mut root.fork("head-init"),
        ),
    }
}

fn checkpoint_epochs(cfg: &TrainConfig) -> Vec<(f64, usize)> {
    let mut out = vec![(0.0, 0)];
    for &f in &cfg.checkpoint_fractions {
        if f > 0.0 {
            out.push((
                f,
                ((f * cfg.epochs as f64).round() as usize).min(cfg.epochs),
            ));
        }
    }
    out
}

#[derive(Default)]
struct Accum {
    sum: f64,
    n: usize,
}

impl Accum {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn run(ds: &Dataset, cfg: &TrainConfig, mode: Mode) -> Result<TrainRun> {
    cfg.validate()?;
    let start = Instant::now();
    let init = initial_models(ds, cfg);
    let mut au = matches!(mode, Mode::Understanding | Mode::Joint).then(|| init.au.clone());
    let mut ee = matches!(mode, Mode::Execution | Mode::Joint).then(|| init.ee.clone());
    let mut head = (mode == Mode::Joint).then(|| init.head.clone());
    let mut au_opt = AdamState::new(AdamConfig::with_step_size(cfg.au_step_size));
    let mut ee_opt = AdamState::new(AdamConfig::with_step_size(cfg.ee_step_size));
    let mut head_opt = AdamState::new(AdamConfig::with_step_size(cfg.align_step_size));

    let weights = ObjectiveWeights {
        au: au.is_some(),
        lambda_ee: match mode {
            Mode::Understanding => None,
            Mode::Execution => Some(1.0),
            Mode::Joint => Some(cfg.lambda_ee),
        },
        lambda_align: (mode == Mode::Joint).then_some(cfg.lambda_align),
        align_temperature: cfg.align_temperature,
        stop_grad_encoders: cfg.stop_grad_encoders,
    };

    let mut schedule = Schedule::new(ds, cfg)?;
    let mut metrics = RunMetrics {
        effective_batch: schedule.batch_size(),
        steps_per_epoch: schedule.steps_per_epoch(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let ckpt_epochs = checkpoint_epochs(cfg);
    let mut checkpoints = Vec::new();
    let snapshot = |epoch: usize,
                    au: &Option<AUModel>,
                    ee: &Option<EEModel>,
                    head: &Option<AlignmentHead>,
                    out: &mut Vec<Checkpoint>| {
        for &(fraction, at) in &ckpt_epochs {
            if at == epoch {
                out.push(Checkpoint {
                    tag: checkpoint_tag(fraction),
                    fraction,
                    epoch,
                    au: au.clone(),
                    ee: ee.clone(),
                    head: head.clone(),
                    config: cfg.clone(),
                });
            }
        }
    };
    snapshot(0, &au, &ee, &head, &mut checkpoints);

    let mut divergence = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let (mut l_au, mut l_ee, mut l_align, mut mi) = (
            Accum::default(),
            Accum::default(),
            Accum::default(),
            Accum::default(),
        );
        for _ in 0..schedule.steps_per_epoch() {
            let step = schedule.next_step()?;
            let inputs = StepInputs::gather(ds, &step.batch.pairs, &step.keyframes)?;
            let refs = ModelRefs {
                au: au.as_ref(),
                ee: ee.as_ref(),
                head: head.as_ref(),
            };
            let au_active = mode == Mode::Understanding || step.au_active;
            let (losses, grads) = objective_and_grads(refs, &inputs, &weights, au_active)?;
            if !losses.total.is_finite() {
                divergence = Some(format!("non-finite objective at epoch {epoch}"));
                break 'epochs;
            }
            let updates = [
                au.as_mut()
                    .zip(grads.au.as_ref())
                    .map(|(m, g)| au_opt.step(m, g)),
                ee.as_mut()
                    .zip(grads.ee.as_ref())
                    .map(|(m, g)| ee_opt.step(m, g)),
                head.as_mut()
                    .zip(grads.head.as_ref())
                    .map(|(m, g)| head_opt.step(m, g)),
            ];
            for u in updates.into_iter().flatten() {
                match u {
                    Ok(()) => {}
                    Err(Error::Divergence { param }) => {
                        divergence = Some(format!("non-finite `{param}` at epoch {epoch}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            l_au.push(losses.au);
            l_ee.push(losses.ee);
            l_align.push(losses.align);
            mi.push(
                losses
                    .align
                    .map(|l| mi_lower_bound(l, schedule.batch_size())),
            );
        }
        metrics.epochs.push(EpochMetrics {
            epoch,
            au_loss: l_au.mean(),
            ee_loss: l_ee.mean(),
            align_loss: l_align.mean(),
            mi_lower_bound: mi.mean(),
            au_accuracy: au
                .as_ref()
                .map(|m| au_accuracy(m, ds, Split::Test))
                .transpose()?,
            ee_success: ee
                .as_ref()
                .map(|m| ee_success_rate(m, ds, Split::Test, &cfg.success))
                .transpose()?,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        snapshot(epoch, &au, &ee, &head, &mut checkpoints);
    }

    Ok(TrainRun {
        au,
        ee,
        head,
        metrics,
        checkpoints,
        divergence,
    })
}

/// Trains the understanding model alone on its contrastive objective.
pub fn train_au(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    run(ds, cfg, Mode::Understanding)
}

/// Trains the execution model alone on action regression.
pub fn train_ee(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    run(ds, cfg, Mode::Execution)
}

/// Trains both models and the alignment heads on the combined objective.
pub fn train_joint(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    run(ds, cfg, Mode::Joint)
}

#[cfg(test)]
mod tests;
