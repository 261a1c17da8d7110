use super::*;
use crate::datagen::{generate_dataset, split_dataset, GenConfig};
use crate::numerics::{finite_diff_gradient, relative_error, Parameters};

fn tiny_dataset(seed: u64) -> Dataset {
    let cfg = GenConfig {
        classes: 2,
        variations: 2,
        episodes_per_instruction: 4,
        d_latent: 3,
        d_obs: 4,
        d_state: 4,
        d_act: 2,
        timesteps: 2,
        keyframes: 2,
        nuisance_dims: 1,
        seed,
        ..GenConfig::default()
    };
    split_dataset(&generate_dataset(&cfg).unwrap(), 0.5, seed).unwrap()
}

fn small_dataset(seed: u64) -> Dataset {
    let cfg = GenConfig {
        classes: 3,
        variations: 2,
        episodes_per_instruction: 6,
        seed,
        ..GenConfig::default()
    };
    split_dataset(&generate_dataset(&cfg).unwrap(), 0.34, seed).unwrap()
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden: 3,
        d_u: 3,
        d_e: 3,
        d_instruction: 2,
        ..EncoderConfig::default()
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn full_weights(lambda_ee: f64, lambda_align: f64, tau: f64) -> ObjectiveWeights {
    ObjectiveWeights {
        au: true,
        lambda_ee: Some(lambda_ee),
        lambda_align: Some(lambda_align),
        align_temperature: tau,
        stop_grad_encoders: false,
    }
}

fn tiny_step(ds: &Dataset, seed: u64) -> (JointModels, StepInputs) {
    let cfg = TrainConfig {
        batch_size: 2,
        d_z: 4,
        encoder: tiny_encoder(),
        seed,
        ..TrainConfig::default()
    };
    let models = initial_models(ds, &cfg);
    let mut schedule = Schedule::new(ds, &cfg).unwrap();
    let step = schedule.next_step().unwrap();
    let inputs = StepInputs::gather(ds, &step.batch.pairs, &step.keyframes).unwrap();
    (models, inputs)
}

#[test]
fn joint_gradient_matches_finite_differences() {
    let ds = tiny_dataset(1);
    for seed in 0..5 {
        let (models, inputs) = tiny_step(&ds, seed);
        let weights = full_weights(1.0, 0.5, 0.5);
        let (_, grads) = objective_and_grads(models.refs(), &inputs, &weights, true).unwrap();
        let analytic = grads.into_joint().unwrap().flatten();
        let mut probe = models.clone();
        let numeric = finite_diff_gradient(
            |flat| {
                probe.load_flat(flat).unwrap();
                objective(probe.refs(), &inputs, &weights, true)
                    .unwrap()
                    .total
            },
            &models.flatten(),
            1e-5,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn stop_grad_leaves_encoder_gradients_task_only() {
    let ds = tiny_dataset(2);
    let (models, inputs) = tiny_step(&ds, 3);
    let mut weights = full_weights(1.0, 0.5, 0.1);
    weights.stop_grad_encoders = true;
    let (_, with_align) = objective_and_grads(models.refs(), &inputs, &weights, true).unwrap();
    weights.lambda_align = Some(0.0);
    let (_, task_only) = objective_and_grads(models.refs(), &inputs, &weights, true).unwrap();
    assert_eq!(
        with_align.au.unwrap().flatten(),
        task_only.au.unwrap().flatten()
    );
    assert_eq!(
        with_align.ee.unwrap().flatten(),
        task_only.ee.unwrap().flatten()
    );
    assert!(with_align.head.unwrap().flatten().iter().any(|&g| g != 0.0));
}

#[test]
fn objective_is_linear_in_loss_weights() {
    let ds = tiny_dataset(3);
    let (models, inputs) = tiny_step(&ds, 0);
    let parts = objective(models.refs(), &inputs, &full_weights(1.0, 1.0, 0.1), true).unwrap();
    let (au, ee, align) = (parts.au.unwrap(), parts.ee.unwrap(), parts.align.unwrap());
    for (le, la) in [(0.0, 0.0), (1.0, 0.5), (2.5, 3.0)] {
        let total = objective(models.refs(), &inputs, &full_weights(le, la, 0.1), true)
            .unwrap()
            .total;
        assert!((total - (au + le * ee + la * align)).abs() < 1e-12);
    }
}

#[test]
fn zero_epochs_keep_initialization() {
    let ds = small_dataset(0);
    let cfg = TrainConfig {
        epochs: 0,
        ..quick_config(4)
    };
    let init = initial_models(&ds, &cfg);
    let run = train_joint(&ds, &cfg).unwrap();
    assert_eq!(run.au.unwrap(), init.au);
    assert_eq!(run.ee.unwrap(), init.ee);
    assert_eq!(run.head.unwrap(), init.head);
    assert!(run.metrics.epochs.is_empty());
    assert_eq!(train_au(&ds, &cfg).unwrap().au.unwrap(), init.au);
    assert_eq!(train_ee(&ds, &cfg).unwrap().ee.unwrap(), init.ee);
}

#[test]
fn same_seed_reproduces_metrics_and_models() {
    let ds = small_dataset(1);
    let cfg = quick_config(9);
    let a = train_joint(&ds, &cfg).unwrap();
    let b = train_joint(&ds, &cfg).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.au, b.au);
    assert_eq!(a.ee, b.ee);
    assert_eq!(a.head, b.head);
}

#[test]
fn zero_alignment_weight_decouples_the_task_streams() {
    let ds = small_dataset(2);
    let cfg = TrainConfig {
        lambda_align: 0.0,
        au_frequency: 1.0,
        ..quick_config(5)
    };
    let joint = train_joint(&ds, &cfg).unwrap();
    let au = train_au(&ds, &cfg).unwrap();
    let ee = train_ee(&ds, &cfg).unwrap();
    for ((j, a), e) in joint
        .metrics
        .epochs
        .iter()
        .zip(&au.metrics.epochs)
        .zip(&ee.metrics.epochs)
    {
        assert_eq!(j.au_loss, a.au_loss);
        assert_eq!(j.ee_loss, e.ee_loss);
        assert_eq!(j.au_accuracy, a.au_accuracy);
        assert_eq!(j.ee_success, e.ee_success);
    }
    assert_eq!(joint.au, au.au);
    assert_eq!(joint.ee, ee.ee);
}

#[test]
fn baseline_runs_only_log_their_own_terms() {
    let ds = small_dataset(3);
    let cfg = quick_config(1);
    let au = train_au(&ds, &cfg).unwrap();
    let m = au.metrics.last().unwrap();
    assert!(m.au_loss.is_some() && m.ee_loss.is_none() && m.align_loss.is_none());
    assert!(au.ee.is_none() && au.head.is_none());
    let ee = train_ee(&ds, &cfg).unwrap();
    let m = ee.metrics.last().unwrap();
    assert!(m.ee_loss.is_some() && m.au_loss.is_none() && m.mi_lower_bound.is_none());
}

#[test]
fn checkpoints_cover_requested_fractions() {
    let ds = small_dataset(4);
    let cfg = TrainConfig {
        epochs: 4,
        checkpoint_fractions: vec![0.25, 0.5, 1.0],
        ..quick_config(2)
    };
    let run = train_joint(&ds, &cfg).unwrap();
    let tags: Vec<_> = run
        .checkpoints
        .iter()
        .map(|c| (c.tag.as_str(), c.epoch))
        .collect();
    assert_eq!(
        tags,
        [("init", 0), ("f0.25", 1), ("f0.50", 2), ("final", 4)]
    );
    assert_eq!(run.checkpoint("final").unwrap().au, run.au);
}

#[test]
fn effective_batch_is_capped_by_distinct_keys() {
    let ds = small_dataset(5);
    let cfg = TrainConfig {
        strategy: PairStrategy::ByClass,
        batch_size: 16,
        ..quick_config(0)
    };
    let run = train_joint(&ds, &cfg).unwrap();
    assert_eq!(run.metrics.effective_batch, 3);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_dataset(6);
    for cfg in [
        TrainConfig {
            lambda_align: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            au_frequency: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            align_temperature: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train_joint(&ds, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn divergence_stops_training_and_keeps_checkpoints() {
    let mut ds = small_dataset(7);
    for id in ds.split_ids(Split::Train) {
        ds.episodes[id].observations.data_mut()[0] = f64::NAN;
    }
    let run = train_au(&ds, &quick_config(3)).unwrap();
    assert!(run.divergence.as_deref().unwrap().contains("epoch 1"));
    assert!(run.metrics.epochs.is_empty());
    assert!(run.checkpoint("init").is_some());
    assert!(run.au.unwrap().flatten().iter().all(|v| v.is_finite()));
}

#[test]
fn one_cell_ablation_equals_single_run() {
    let ds = small_dataset(8);
    let cfg = quick_config(11);
    let grid = AblationGrid {
        strategies: vec![PairStrategy::ByInstruction],
        temperatures: vec![0.1],
        seeds: vec![11],
        threads: Some(1),
    };
    let table = run_ablation(&ds, &cfg, &grid).unwrap();
    let single = train_joint(&ds, &cfg).unwrap();
    let last = single.metrics.last().unwrap();
    let cell = table.cell(PairStrategy::ByInstruction, 0.1).unwrap();
    assert_eq!(cell.au_accuracy, last.au_accuracy);
    assert_eq!(cell.ee_success, last.ee_success);
    assert!(table.is_complete());
}

#[test]
fn ablation_marks_failed_cells_and_continues() {
    let ds = small_dataset(9);
    let grid = AblationGrid {
        strategies: vec![PairStrategy::ByEpisode, PairStrategy::ByInstruction],
        temperatures: vec![0.1, -1.0],
        seeds: vec![0],
        threads: Some(2),
    };
    let table = run_ablation(&ds, &quick_config(0), &grid).unwrap();
    assert_eq!(table.cells.len(), 2);
    for row in &table.cells {
        assert!(!row[0].failed());
        assert!(row[1].failed());
        assert_eq!(row[1].failures.len(), 1);
    }
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("By Episode,"));
    assert!(csv.contains("failed"));
}
