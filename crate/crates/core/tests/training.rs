use ndarray::ArrayD;
use sepad_core::config::ExperimentConfig;
use sepad_core::dataset::{synth_generate, Manifest, Split, SynthSpec};
use sepad_core::dsp::{rms, MixConfig, StftPlan};
use sepad_core::model::SeparatorNet;
use sepad_core::training::{fit, make_training_pair, TrainConfig, TrainError, TrainMode};

fn corpus(dir: &std::path::Path, clips: usize) -> Manifest {
    let spec = SynthSpec {
        machine_types: vec!["fan".into(), "pump".into(), "valve".into()],
        clips_per_type: clips,
        test_clips_per_type: 4,
        ..SynthSpec::default()
    };
    synth_generate(&spec, dir).unwrap()
}

fn desk_net(seed: u64) -> SeparatorNet {
    let cfg = ExperimentConfig::desk();
    SeparatorNet::new(&cfg.model, &cfg.stft, seed).unwrap()
}

fn desk_train(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        target_class: "fan".into(),
        nontarget_classes: if mode.needs_nontarget() {
            vec!["pump".into(), "valve".into()]
        } else {
            vec![]
        },
        epochs,
        ..ExperimentConfig::desk().train
    }
}

fn params(net: &SeparatorNet) -> Vec<ArrayD<f64>> {
    net.param_values().cloned().collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_and_flat_history() {
    let dir = tempfile::tempdir().unwrap();
    // clips as long as the crop, so every epoch sees identical inputs
    let manifest = corpus(dir.path(), 3);
    let mut net = desk_net(1);
    let before = params(&net);
    let cfg = TrainConfig {
        lr: 0.0,
        crop_seconds: 2.0,
        ..desk_train(TrainMode::Autoencoder, 3)
    };
    let h = fit(&mut net, &manifest, &cfg, &MixConfig::default()).unwrap();
    assert_eq!(params(&net), before);
    let first = h.epochs[0].mean_loss;
    for e in &h.epochs {
        assert!((e.mean_loss - first).abs() <= 1e-12 * first, "{} vs {first}", e.mean_loss);
    }

    let mut net = desk_net(1);
    let cfg = TrainConfig {
        lr: 0.0,
        crop_seconds: 0.5,
        ..desk_train(TrainMode::ProposedNontargetSep, 2)
    };
    fit(&mut net, &manifest, &cfg, &MixConfig::default()).unwrap();
    assert_eq!(params(&net), before);
}

#[test]
fn same_seed_same_history_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 3);
    let cfg = TrainConfig {
        crop_seconds: 0.5,
        batch_size: 2,
        ..desk_train(TrainMode::ProposedNontargetSep, 2)
    };
    let run = |seed: u64| {
        let mut net = desk_net(3);
        let h = fit(&mut net, &manifest, &TrainConfig { seed, ..cfg.clone() }, &MixConfig::default()).unwrap();
        (h, params(&net))
    };
    let (h1, p1) = run(5);
    let (h2, p2) = run(5);
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let (h3, _) = run(6);
    assert_ne!(h1, h3);
}

#[test]
fn mixing_modes_require_nontarget_classes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 2);
    let mut net = desk_net(0);
    let cfg = TrainConfig {
        nontarget_classes: vec![],
        crop_seconds: 0.5,
        ..desk_train(TrainMode::ConventionalTargetSep, 1)
    };
    assert!(matches!(
        fit(&mut net, &manifest, &cfg, &MixConfig::default()),
        Err(TrainError::NoNontargetClasses(TrainMode::ConventionalTargetSep))
    ));
}

#[test]
fn proposed_target_is_uncorrelated_with_the_target_class() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 4);
    let read = |m: &str| manifest.read_all(manifest.select(m, Split::Train)).unwrap();
    let fans = read("fan");
    let pumps = read("pump");
    let plan = StftPlan::new(&ExperimentConfig::default().stft).unwrap();
    let mix = MixConfig::default();
    let corr = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for (d, n) in fans.iter().zip(&pumps) {
        let pair = make_training_pair(TrainMode::ProposedNontargetSep, &d.samples, Some(&n.samples), &mix, &plan, None).unwrap();
        let rho = corr(&pair.target_wave, &d.samples);
        assert!((rho - corr(&n.samples, &d.samples)).abs() < 1e-9);
        assert!(rho.abs() < 0.1, "rho = {rho}");
        let ratio = rms(&pair.target_wave) / rms(&d.samples);
        assert!((ratio - 10f64.powf(-5.0 / 20.0)).abs() < 1e-9);
    }
}

#[test]
fn desk_model_converges_on_sixteen_clips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 16);
    let mut net = desk_net(2);
    let h = fit(&mut net, &manifest, &desk_train(TrainMode::ProposedNontargetSep, 30), &MixConfig::default()).unwrap();
    let ratio = h.loss_ratio().unwrap();
    assert!(ratio < 0.5, "final/first loss = {ratio}");
}
