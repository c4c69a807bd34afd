//! End-to-end flow through the public API and the filesystem: generate a
//! dataset, train to a checkpoint, infer maps, score them. Mirrors what
//! the CLI wires together, without going through argument parsing.

use std::path::PathBuf;

use saldet::checkpoint::{unpack, Checkpoint};
use saldet::config::Config;
use saldet::data::{gen_dataset, load_examples, DatasetManifest};
use saldet::harness::{eval_maps, infer};
use saldet::metrics::write_report_csv;
use saldet::train::{train, TrainOptions};

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("saldet-pipeline-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config() -> Config {
    Config {
        input_size: 8,
        blocks: vec![(1, 3), (1, 4)],
        head_channels: 3,
        batch_size: 2,
        max_steps: 6,
        augment: false,
        ..Config::default()
    }
}

#[test]
fn dataset_generation_is_byte_deterministic() {
    let dir = temp_dir("gen");
    let a = gen_dataset(3, 16, 7, &dir.join("a")).unwrap();
    let b = gen_dataset(3, 16, 7, &dir.join("b")).unwrap();
    assert_eq!(a.entries.len(), 3);
    for (ea, eb) in a.entries.iter().zip(&b.entries) {
        let img_a = std::fs::read(a.image_path(ea)).unwrap();
        let img_b = std::fs::read(b.image_path(eb)).unwrap();
        assert_eq!(img_a, img_b);
        let mask_a = std::fs::read(a.mask_path(ea)).unwrap();
        let mask_b = std::fs::read(b.mask_path(eb)).unwrap();
        assert_eq!(mask_a, mask_b);
    }
}

#[test]
fn generate_train_infer_eval_round_trip() {
    let dir = temp_dir("e2e");
    let manifest = gen_dataset(4, 16, 11, &dir.join("data")).unwrap();

    // The manifest reloads from disk to the same entries.
    let reloaded = DatasetManifest::load(&dir.join("data").join("manifest.json")).unwrap();
    assert_eq!(reloaded.entries, manifest.entries);

    // Config survives a save/load cycle and drives training.
    let config_path = dir.join("config.json");
    tiny_config().save(&config_path).unwrap();
    let config = Config::load(&config_path).unwrap();
    assert_eq!(config, tiny_config());

    let examples = load_examples(&manifest).unwrap();
    let ckpt_path = dir.join("model.ckpt");
    let outcome =
        train(&config, &examples, TrainOptions::default(), Some(&ckpt_path), &mut |_| {})
            .unwrap();
    assert_eq!(outcome.log.len(), 6);

    // The checkpoint on disk restores to the in-memory final state.
    let restored = unpack(&Checkpoint::load(&ckpt_path).unwrap()).unwrap();
    assert_eq!(restored.step, outcome.state.step);
    let mut trained = Vec::new();
    outcome.state.model.visit(&mut |name, t| trained.push((name, t.values().to_vec())));
    let mut loaded = Vec::new();
    restored.model.visit(&mut |name, t| loaded.push((name, t.values().to_vec())));
    assert_eq!(trained, loaded);

    // Inference writes one map per image at the source resolution.
    let images: Vec<PathBuf> = manifest.entries.iter().map(|e| manifest.image_path(e)).collect();
    let maps = infer(&ckpt_path, &images, &dir.join("maps")).unwrap();
    assert_eq!(maps.len(), 4);
    for path in &maps {
        let img = saldet::image::load(path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (16, 16, 1));
    }

    // Scoring the maps produces a full report that renders to CSV.
    let report = eval_maps(&manifest, &dir.join("maps"), config.eta2, 0.5).unwrap();
    assert_eq!(report.per_image.len(), 4);
    assert!(report.mean.mae.is_finite());
    write_report_csv(&report, &dir.join("report.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1, "header, four rows, mean");
    assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
}

#[test]
fn raw_rgb_mode_trains_and_differs_from_the_pair_pipeline() {
    let dir = temp_dir("rgb");
    let manifest = gen_dataset(2, 16, 23, &dir.join("data")).unwrap();
    let examples = load_examples(&manifest).unwrap();
    let config = tiny_config();

    let pair = train(&config, &examples, TrainOptions::default(), None, &mut |_| {}).unwrap();
    let raw = train(
        &config,
        &examples,
        TrainOptions { reflect: false, ..TrainOptions::default() },
        None,
        &mut |_| {},
    )
    .unwrap();
    let last = |o: &saldet::train::TrainOutcome| o.log.last().unwrap().total;
    assert_ne!(
        last(&pair).to_bits(),
        last(&raw).to_bits(),
        "disabling separation must change the computation"
    );
}
