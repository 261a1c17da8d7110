//! Alignment probing: linear heads trained on frozen representations,
//! bidirectional Recall@1 on held-out pairs, the success/failure subset
//! comparison and alignment curves over training checkpoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_loss, align_loss_backward, cosine_matrix, mi_lower_bound, AlignmentHead, Side,
    DEFAULT_LATENT_DIM, DEFAULT_TEMPERATURE,
};
use crate::datagen::{Dataset, Split};
use crate::encoders::{argmax, AUModel, EEModel, Tap};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Matrix, Parameters, SeededSampler};
use crate::pairing::{PairSampler, PairStrategy};

pub const DEFAULT_PROBE_STEP_SIZE: f64 = 1e-4;

/// How the probe heads start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    #[default]
    Random,
    /// Identity maps; requires both representation widths to equal `d_z`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub d_z: usize,
    pub seed: u64,
    pub strategy: PairStrategy,
    pub head_init: HeadInit,
    /// Encoder activation used as the representation.
    pub tap: Tap,
    /// Held-out batches averaged per evaluation. Each draws one pair per
    /// matching key of the test split.
    pub eval_draws: usize,
    /// Test share of each subset in the success/failure comparison.
    pub subset_test_fraction: f64,
    /// Resplit rounds averaged in the success/failure comparison.
    pub subset_repeats: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            step_size: DEFAULT_PROBE_STEP_SIZE,
            epochs: 1000,
            batch_size: 16,
            temperature: DEFAULT_TEMPERATURE,
            d_z: DEFAULT_LATENT_DIM,
            seed: 0,
            strategy: PairStrategy::ByInstruction,
            head_init: HeadInit::Random,
            tap: Tap::Output,
            eval_draws: 10,
            subset_test_fraction: 0.3,
            subset_repeats: 30,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config(
                "probe step size and temperature must be positive".into(),
            ));
        }
        if self.batch_size < 2 || self.d_z == 0 || self.eval_draws == 0 || self.subset_repeats == 0
        {
            return Err(Error::Config(
                "probe batch size must be >= 2 and d_z, draws, repeats >= 1".into(),
            ));
        }
        if !(self.subset_test_fraction > 0.0 && self.subset_test_fraction < 1.0) {
            return Err(Error::Config(
                "subset test fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen representations, one row per episode id.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub u: Matrix,
    /// Execution representation averaged over the episode's keyframes.
    pub e: Matrix,
}

impl Representations {
    pub fn compute(au: &AUModel, ee: &EEModel, ds: &Dataset, tap: Tap) -> Result<Representations> {
        let obs: Vec<&Matrix> = ds.episodes.iter().map(|ep| &ep.observations).collect();
        let u = au.forward(&obs)?.representation(tap).clone();
        let mut e_rows = Vec::with_capacity(ds.episodes.len());
        for ep in &ds.episodes {
            let ids = vec![ep.instruction_id; ep.states.rows()];
            let fwd = ee.forward(&ep.states, &ids)?;
            let rep = fwd.representation(tap);
            let mut mean = rep.col_sums();
            mean.iter_mut().for_each(|v| *v /= rep.rows() as f64);
            e_rows.push(mean);
        }
        Ok(Representations {
            u,
            e: Matrix::from_rows(&e_rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.u.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.rows() == 0
    }

    /// Copy with the execution rows permuted at random, destroying the
    /// pairing. Used as a chance-level control.
    pub fn shuffled(&self, rng: &mut SeededSampler) -> Representations {
        let mut order: Vec<usize> = (0..self.e.rows()).collect();
        rng.shuffle(&mut order);
        Representations {
            u: self.u.clone(),
            e: self.e.select_rows(&order),
        }
    }
}

/// Bidirectional Recall@1 broken down by direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub u_to_e: f64,
    pub e_to_u: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        0.5 * (self.u_to_e + self.e_to_u)
    }
}

/// Per-direction nearest-neighbor retrieval accuracy; row `i` of each side
/// is the true partner of row `i` on the other. Ties go to the lowest index.
pub fn directional_recall(zu: &Matrix, ze: &Matrix) -> Result<Recall> {
    if zu.shape() != ze.shape() {
        return Err(Error::shape("recall_at_1", zu.shape(), ze.shape()));
    }
    let n = zu.rows();
    if n < 2 {
        return Err(Error::MetricUndefined(format!(
            "Recall@1 needs at least 2 pairs, got {n}"
        )));
    }
    let s = cosine_matrix(zu, ze)?;
    let st = s.transpose();
    let hits = |m: &Matrix| (0..n).filter(|&i| argmax(m.row(i)) == i).count() as f64 / n as f64;
    Ok(Recall {
        u_to_e: hits(&s),
        e_to_u: hits(&st),
    })
}

/// Mean of the two retrieval directions.
pub fn recall_at_1(zu: &Matrix, ze: &Matrix) -> Result<f64> {
    Ok(directional_recall(zu, ze)?.mean())
}

/// A trained probe and its per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub head: AlignmentHead,
    pub loss_curve: Vec<f64>,
}

fn initial_head(
    reps: &Representations,
    cfg: &ProbeConfig,
    rng: &mut SeededSampler,
) -> Result<AlignmentHead> {
    let (du, de) = (reps.u.cols(), reps.e.cols());
    match cfg.head_init {
        HeadInit::Random => Ok(AlignmentHead::new(du, de, cfg.d_z, rng)),
        HeadInit::Identity if du == cfg.d_z && de == cfg.d_z => {
            Ok(AlignmentHead::identity(cfg.d_z))
        }
        HeadInit::Identity => Err(Error::Config(format!(
            "identity probe heads need representation widths equal to d_z = {}, got {du} and {de}",
            cfg.d_z
        ))),
    }
}

/// Trains only the two linear heads on pairs drawn from `train_pool`.
pub fn train_probe(
    reps: &Representations,
    train_pool: &[usize],
    ds: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    let sampler = PairSampler::new(ds, train_pool, cfg.strategy, true);
    if sampler.capacity() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} probe pairing has {} train identities, fewer than batch size {}",
            cfg.strategy,
            sampler.capacity(),
            cfg.batch_size
        )));
    }
    let root = SeededSampler::new(cfg.seed);
    let mut head = initial_head(reps, cfg, &mut root.fork("probe-init"))?;
    let mut rng = root.fork("probe-pairs");
    let mut opt = AdamState::new(AdamConfig::with_step_size(cfg.step_size));
    let steps = train_pool.len().div_ceil(cfg.batch_size).max(1);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sampler.sample(cfg.batch_size, &mut rng)?;
            let u = reps.u.select_rows(&batch.u_ids());
            let e = reps.e.select_rows(&batch.e_ids());
            let zu = head.project_batch(Side::Understanding, &u)?;
            let ze = head.project_batch(Side::Execution, &e)?;
            let out = align_loss_backward(&zu, &ze, cfg.temperature)?;
            let mut grads = head.zeros_like();
            grads.accumulate(
                Side::Understanding,
                &head.backward(Side::Understanding, &out.grad_u, &u)?,
            )?;
            grads.accumulate(
                Side::Execution,
                &head.backward(Side::Execution, &out.grad_e, &e)?,
            )?;
            opt.step(&mut head, &grads)?;
            total += out.loss;
        }
        loss_curve.push(total / steps as f64);
    }
    Ok(ProbeFit { head, loss_curve })
}

/// Held-out alignment of a trained probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub recall: Recall,
    pub recall_at_1: f64,
    pub mi_lower_bound: f64,
    /// Pairs per evaluation batch; chance Recall@1 is its reciprocal.
    pub batch_size: usize,
}

/// Averages Recall@1 and the MI bound over `cfg.eval_draws` batches, each
/// holding one pair per matching key of `test_pool`.
pub fn evaluate_probe(
    head: &AlignmentHead,
    reps: &Representations,
    test_pool: &[usize],
    ds: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeEval> {
    let sampler = PairSampler::new(ds, test_pool, cfg.strategy, true);
    let mut rng = SeededSampler::new(cfg.seed).fork("probe-eval");
    let draws = if cfg.strategy == PairStrategy::ByEpisode {
        1
    } else {
        cfg.eval_draws
    };
    let (mut u2e, mut e2u, mut mi) = (0.0, 0.0, 0.0);
    let mut n = 0;
    for _ in 0..draws {
        let batch = sampler.one_per_key(&mut rng);
        n = batch.len();
        let zu = head.project_batch(Side::Understanding, &reps.u.select_rows(&batch.u_ids()))?;
        let ze = head.project_batch(Side::Execution, &reps.e.select_rows(&batch.e_ids()))?;
        let r = directional_recall(&zu, &ze)?;
        u2e += r.u_to_e;
        e2u += r.e_to_u;
        mi += mi_lower_bound(align_loss(&zu, &ze, cfg.temperature)?, n);
    }
    let k = draws as f64;
    let recall = Recall {
        u_to_e: u2e / k,
        e_to_u: e2u / k,
    };
    Ok(ProbeEval {
        recall,
        recall_at_1: recall.mean(),
        mi_lower_bound: mi / k,
        batch_size: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: String,
    pub config: ProbeConfig,
    pub recall_at_1: f64,
    pub recall: Recall,
    pub mi_lower_bound: f64,
    pub test_batch_size: usize,
    pub chance: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub loss_curve: Vec<f64>,
}

/// Trains a probe on `train_pool` and evaluates it on `test_pool`.
pub fn probe(
    reps: &Representations,
    ds: &Dataset,
    train_pool: &[usize],
    test_pool: &[usize],
    cfg: &ProbeConfig,
    checkpoint: &str,
) -> Result<ProbeReport> {
    let fit = train_probe(reps, train_pool, ds, cfg)?;
    let eval = evaluate_probe(&fit.head, reps, test_pool, ds, cfg)?;
    Ok(ProbeReport {
        checkpoint: checkpoint.to_string(),
        config: cfg.clone(),
        recall_at_1: eval.recall_at_1,
        recall: eval.recall,
        mi_lower_bound: eval.mi_lower_bound,
        test_batch_size: eval.batch_size,
        chance: 1.0 / eval.batch_size as f64,
        train_samples: train_pool.len(),
        test_samples: test_pool.len(),
        loss_curve: fit.loss_curve,
    })
}

/// Probe on the dataset's own train/test split.
pub fn probe_split(
    reps: &Representations,
    ds: &Dataset,
    cfg: &ProbeConfig,
    checkpoint: &str,
) -> Result<ProbeReport> {
    probe(
        reps,
        ds,
        &ds.split_ids(Split::Train),
        &ds.split_ids(Split::Test),
        cfg,
        checkpoint,
    )
}

/// One outcome subset of the success/failure comparison, averaged over
/// the seeded resplits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSide {
    pub recall_at_1: f64,
    pub mi_lower_bound: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub runs: Vec<ProbeReport>,
}

/// Success and failure probes trained on equal sample counts. A side with
/// no samples is reported as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    /// Samples per subset after equalization.
    pub sample_count: usize,
    pub success_available: usize,
    pub failure_available: usize,
    pub success: Option<SubsetSide>,
    pub failure: Option<SubsetSide>,
}

impl SubsetReport {
    /// Success recall minus failure recall when both sides ran.
    pub fn gap(&self) -> Option<f64> {
        Some(self.success.as_ref()?.recall_at_1 - self.failure.as_ref()?.recall_at_1)
    }
}

/// Compares alignment on episodes whose execution succeeded against those
/// that failed.
///
/// Each of `cfg.subset_repeats` rounds subsamples both subsets to the size
/// of the smaller one, splits each into train and test parts of equal size
/// across the two subsets, and trains an independent probe per subset with
/// pairs matched by episode. Every subset probe takes as many optimizer
/// steps as a probe on the dataset's full train split, and its batch is
/// capped at the subset's train size. Reported recalls are means over the
/// rounds.
pub fn subset_alignment(
    ds: &Dataset,
    reps: &Representations,
    outcomes: &[bool],
    cfg: &ProbeConfig,
) -> Result<SubsetReport> {
    cfg.validate()?;
    if outcomes.len() != reps.len() || reps.len() != ds.episodes.len() {
        return Err(Error::shape(
            "subset_alignment",
            (outcomes.len(), 1),
            (reps.len(), 1),
        ));
    }
    let success: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i]).collect();
    let failure: Vec<usize> = (0..outcomes.len()).filter(|&i| !outcomes[i]).collect();
    let n = success.len().min(failure.len());
    let mut report = SubsetReport {
        sample_count: n,
        success_available: success.len(),
        failure_available: failure.len(),
        success: None,
        failure: None,
    };
    if n == 0 {
        return Ok(report);
    }
    let n_test = (n as f64 * cfg.subset_test_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test);
    if n_test < 2 || n_train < 2 {
        return Err(Error::MetricUndefined(format!(
            "{n} samples per outcome subset leave {n_train} train and {n_test} test samples; need 2 of each"
        )));
    }
    let batch_size = cfg.batch_size.min(n_train);
    let full_steps = cfg.epochs * ds.split_ids(Split::Train).len().div_ceil(cfg.batch_size);
    let sub_cfg = ProbeConfig {
        strategy: PairStrategy::ByEpisode,
        batch_size,
        epochs: full_steps.div_ceil(n_train.div_ceil(batch_size)),
        ..cfg.clone()
    };
    let root = SeededSampler::new(cfg.seed);
    let side = |pool: &[usize], label: &str| -> Result<SubsetSide> {
        let mut runs = Vec::with_capacity(cfg.subset_repeats);
        for r in 0..cfg.subset_repeats {
            let mut rng = root.fork_indexed(label, r as u64);
            let mut picked = pool.to_vec();
            rng.shuffle(&mut picked);
            picked.truncate(n);
            let (test, train) = picked.split_at(n_test);
            let (mut train, mut test) = (train.to_vec(), test.to_vec());
            train.sort_unstable();
            test.sort_unstable();
            let run_cfg = ProbeConfig {
                seed: cfg.seed.wrapping_add(r as u64),
                ..sub_cfg.clone()
            };
            runs.push(probe(reps, ds, &train, &test, &run_cfg, label)?);
        }
        let k = runs.len() as f64;
        Ok(SubsetSide {
            recall_at_1: runs.iter().map(|r| r.recall_at_1).sum::<f64>() / k,
            mi_lower_bound: runs.iter().map(|r| r.mi_lower_bound).sum::<f64>() / k,
            train_samples: n_train,
            test_samples: n_test,
            runs,
        })
    };
    report.success = Some(side(&success, "success")?);
    report.failure = Some(side(&failure, "failure")?);
    Ok(report)
}

/// Task models at one point of training.
#[derive(Debug, Clone, Copy)]
pub struct CurveInput<'a> {
    pub tag: &'a str,
    pub fraction: f64,
    pub au: &'a AUModel,
    pub ee: &'a EEModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tag: String,
    pub fraction: f64,
    pub recall_at_1: f64,
    pub mi_lower_bound: f64,
}

/// Recomputes frozen representations at every checkpoint and trains a
/// fresh probe on each. Probes run concurrently and are independent.
pub fn alignment_curve(
    points: &[CurveInput<'_>],
    ds: &Dataset,
    cfg: &ProbeConfig,
) -> Result<Vec<CurvePoint>> {
    if points.len() < 2 {
        return Err(Error::Config(format!(
            "an alignment curve needs at least 2 checkpoints, got {}",
            points.len()
        )));
    }
    points
        .par_iter()
        .map(|p| {
            let reps = Representations::compute(p.au, p.ee, ds, cfg.tap)?;
            let report = probe_split(&reps, ds, cfg, p.tag)?;
            Ok(CurvePoint {
                tag: p.tag.to_string(),
                fraction: p.fraction,
                recall_at_1: report.recall_at_1,
                mi_lower_bound: report.mi_lower_bound,
            })
        })
        .collect()
}
