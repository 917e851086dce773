use shadowad::adversarial::{prepare_samples, train_loop, TrainConfig, FINAL_ATTENUATOR, FINAL_DETECTOR};
use shadowad::evaluation::{evaluate_dataset, EvalProtocol};
use shadowad::imaging::{load_image, load_mask};
use shadowad::nets::{load_checkpoint_for, UNetConfig};
use shadowad::synthdata::{generate_dataset, load_dataset_dir, write_dataset, DatasetSpec};
use shadowad::Error;

fn spec() -> DatasetSpec {
    DatasetSpec { count: 6, size: 32, seed: 21, ..DatasetSpec::default() }
}

#[test]
fn written_dataset_reloads_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec()).unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    let back = load_dataset_dir(tmp.path()).unwrap();
    assert_eq!(back.len(), ds.samples.len());
    for (a, b) in ds.samples.iter().zip(&back) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.mask, b.mask);
        // PNG stores 8 bits per channel.
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let first = &ds.samples[0].name;
    assert_eq!(load_mask(tmp.path().join("masks").join(format!("{first}.png"))).unwrap(), ds.samples[0].mask);
    assert_eq!(load_image(tmp.path().join("images").join(format!("{first}.png"))).unwrap().dims(), (32, 32));
}

#[test]
fn short_training_run_produces_usable_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec()).unwrap();
    let cfg = TrainConfig {
        iterations: 3,
        batch_size: 2,
        input_size: 32,
        log_every: 2,
        checkpoint_every: 0,
        ..TrainConfig::desk(4)
    };
    let samples = prepare_samples(&ds.samples, &cfg).unwrap();
    let out = train_loop(&samples, &cfg, Some(tmp.path()), None).unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(out.records.iter().all(|r| r.is_finite() && (0.0..=1.0).contains(&r.gated_fraction)));
    let metrics = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    // Header, iteration 2, and the final iteration.
    assert_eq!(metrics.lines().count(), 3);
    assert!(!tmp.path().join("checkpoints").exists());

    let (d, adam) = load_checkpoint_for(tmp.path().join(FINAL_DETECTOR), &UNetConfig::detector()).unwrap();
    assert_eq!(adam.unwrap().step, 3);
    assert_eq!(d, out.trainer.detector);
    let wrong = load_checkpoint_for(tmp.path().join(FINAL_ATTENUATOR), &UNetConfig::detector());
    assert!(matches!(wrong, Err(Error::Fingerprint { .. } | Error::Model(_))));

    let protocol = EvalProtocol { input_size: 32, ..EvalProtocol::default() };
    let report = evaluate_dataset(&d, &ds.samples, &protocol).unwrap();
    assert_eq!(report.image_count, 6);
    assert!((0.0..=100.0).contains(&report.ber));
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = TrainConfig { iterations: 1, ..TrainConfig::desk(0) };
    assert!(matches!(train_loop(&[], &cfg, None, None), Err(Error::Dataset(_))));
}
