use mvcnet::dataio::EpochSet;
use mvcnet::models::{BackboneKind, ModelBundle};
use mvcnet::synthetic::{generate, SyntheticConfig};
use mvcnet::trainer::{prepare_fold, run_fold, run_loso, train_observed, Method, TrainConfig};

fn small_set() -> EpochSet {
    generate(&SyntheticConfig {
        n_subjects: 3,
        trials_per_subject: 16,
        n_timepoints: 128,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

/// Bit patterns of every backbone/classifier parameter and buffer.
fn snapshot(bundle: &ModelBundle) -> Vec<(String, Vec<u32>)> {
    bundle
        .store()
        .all()
        .filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("classifier."))
        .map(|(n, v)| {
            let values = v
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            (n.clone(), values.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

fn trajectory(train: &EpochSet, config: &TrainConfig) -> Vec<Vec<(String, Vec<u32>)>> {
    let mut states = Vec::new();
    train_observed(train, BackboneKind::EEGNet, config, 42, |_, b| {
        states.push(snapshot(b))
    })
    .unwrap();
    states
}

fn config(method: Method, lambda: f64, gamma: f64) -> TrainConfig {
    let mut c = TrainConfig::new(method);
    c.epochs = 3;
    c.batch_size = Some(8);
    c.loss.lambda = lambda;
    c.loss.gamma = gamma;
    c
}

#[test]
fn mvcnet_without_contrastive_terms_follows_the_baseline_trajectory() {
    let set = small_set();
    let (train, _) = prepare_fold(&set, 1, &TrainConfig::new(Method::Baseline).ea).unwrap();
    let baseline = trajectory(&train, &config(Method::Baseline, 0.1, 0.1));
    let reduced = trajectory(&train, &config(Method::MVCNet, 0.0, 0.0));
    assert_eq!(baseline.len(), 3);
    assert!(baseline == reduced, "trajectories diverge");

    // Control: the contrastive terms do move the backbone when weighted.
    let full = trajectory(&train, &config(Method::MVCNet, 0.1, 0.1));
    assert!(baseline != full);
}

#[test]
fn folds_are_reproducible_and_independent_of_worker_count() {
    let set = small_set();
    let mut c = TrainConfig::new(Method::MVCNet);
    c.epochs = 2;
    c.repeats = 2;
    c.batch_size = Some(16);
    let serial = run_loso(&set, BackboneKind::EEGNet, &c, 1).unwrap();
    let parallel = run_loso(&set, BackboneKind::EEGNet, &c, 3).unwrap();
    let key = |r: &mvcnet::trainer::RunResult| -> Vec<(u32, usize, u64, u64)> {
        r.cells
            .iter()
            .map(|c| (c.subject, c.repeat, c.seed, c.accuracy.to_bits()))
            .collect()
    };
    assert_eq!(key(&serial), key(&parallel));
    assert_eq!(serial.cells.len(), 6);
    let order: Vec<(usize, u32)> = serial.cells.iter().map(|c| (c.repeat, c.subject)).collect();
    assert_eq!(order, vec![(0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3)]);

    let again = run_fold(&set, 2, 1, BackboneKind::EEGNet, &c).unwrap();
    assert_eq!(again.accuracy.to_bits(), serial.cells[4].accuracy.to_bits());
    assert_eq!(again.curve, serial.cells[4].curve);
}

#[test]
fn every_backbone_trains_on_lengths_the_pools_do_not_tile() {
    // 250 and 460 samples leave remainders after the pooling stages.
    for (backbone, t) in [
        (BackboneKind::EEGNet, 250),
        (BackboneKind::ShallowCNN, 250),
        (BackboneKind::DeepCNN, 460),
    ] {
        let set = generate(&SyntheticConfig {
            n_subjects: 2,
            trials_per_subject: 8,
            n_timepoints: t,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let (train, _) = prepare_fold(&set, 1, &TrainConfig::new(Method::Baseline).ea).unwrap();
        let mut c = TrainConfig::new(Method::MVCNet);
        c.epochs = 1;
        c.batch_size = Some(4);
        let trained = mvcnet::trainer::train(&train, backbone, &c, 0).unwrap();
        assert!(trained.bundle.all_finite().unwrap(), "{}", backbone.name());
    }
}

#[test]
fn every_method_trains_one_epoch_with_finite_losses() {
    let set = small_set();
    let (train, _) = prepare_fold(&set, 3, &TrainConfig::new(Method::Baseline).ea).unwrap();
    for method in Method::all() {
        let mut c = TrainConfig::new(method);
        c.epochs = 1;
        c.batch_size = Some(8);
        let mut curve = Vec::new();
        train_observed(&train, BackboneKind::ShallowCNN, &c, 1, |_, b| {
            curve.push(b.all_finite().unwrap());
        })
        .unwrap();
        assert_eq!(curve, vec![true], "{method}");
    }
}
