use std::fs;
use std::path::Path;

use asl_core::autodiff::Graph;
use asl_core::config::{Baseline, Config, GeneratorArch, ObjectiveConfig, Task, Variant};
use asl_core::datapipe::{synth_dataset, BatchPlan, Dataset, EdgeExtractorSpec, SampleMode, Split, SynthOptions};
use asl_core::domain::{Domain, ImageBatch};
use asl_core::networks::Role;
use asl_core::nn::Module;
use asl_core::segbackend::{SegBackend, SegCache};
use asl_core::training::{
    colorize, generator_objective, load_generator, train, train_step, TrainOptions, TrainState,
};
use asl_core::{Error, Scalar};

fn tiny(variant: Variant, baseline: Baseline) -> Config {
    let mut c = Config { objective: ObjectiveConfig::for_variant(variant, baseline), ..Default::default() };
    c.run.resolution = 16;
    c.run.epochs = 2;
    c.run.batch_size = 2;
    c.run.prefetch = 0;
    c.networks.generator_arch = GeneratorArch::Unet;
    c.networks.generator_width = 4;
    c.networks.generator_blocks = 2;
    c.networks.disc_width = 4;
    c.networks.disc_layers = 1;
    c
}

fn data(root: &Path, task: Task, n_train: usize) -> Dataset {
    let opts = SynthOptions {
        name: "synthetic".into(),
        task,
        resolution: 16,
        n_train,
        n_test: 3,
        seed: 4,
        edges: EdgeExtractorSpec::gradient(1.0),
    };
    synth_dataset(root, &opts).unwrap();
    Dataset::open(root).unwrap()
}

/// The reported generator loss of a step must be the objective of the
/// pre-step generators against the post-step critics.
fn step_uses_updated_critics(variant: Variant, baseline: Baseline) {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(&dir.path().join("data"), Task::Sketch2Photo, 2);
    let cfg = tiny(variant, baseline);
    let backend = SegBackend::<f64>::stub();
    let cache = SegCache::new(&dir.path().join("cache"));
    let mode = if baseline == Baseline::Paired { SampleMode::Paired } else { SampleMode::Unpaired };
    let sample = ds.load::<f64>(Split::Train, &BatchPlan { x: vec![0, 1], y: vec![1, 0] }, mode, 16).unwrap();

    let mut state = TrainState::<f64>::new(cfg).unwrap();
    let before = dir.path().join("before.ckpt");
    state.save(&before).unwrap();
    let critics_before: Vec<_> = [Role::D, Role::DB, Role::DM].iter().map(|r| state.checksum(*r)).collect();
    let report = train_step(&mut state, &backend, &cache, &sample).unwrap();
    let critics_after: Vec<_> = [Role::D, Role::DB, Role::DM].iter().map(|r| state.checksum(*r)).collect();
    for (b, a) in critics_before.iter().zip(&critics_after) {
        if b.is_some() {
            assert_ne!(b, a, "every active critic moves");
        }
    }

    let after = dir.path().join("after.ckpt");
    state.save(&after).unwrap();
    let mut mixed = TrainState::<f64>::load(&after).unwrap();
    let old = TrainState::<f64>::load(&before).unwrap();
    mixed.g = old.g;
    mixed.g_y = old.g_y;
    let g = Graph::new();
    let recomputed = generator_objective(&g, &mixed, &backend, &cache, &sample).unwrap().breakdown;
    assert_eq!(recomputed.total, report.gen.total);
    assert_eq!(recomputed.l_b, report.gen.l_b);
    assert_eq!(recomputed.l_m, report.gen.l_m);
    let w = &mixed.config.objective;
    let by_hand = w.w_g * report.gen.l_g + w.w_b * report.gen.l_b + w.w_m * report.gen.l_m;
    assert!((by_hand - report.gen.total).abs() < 1e-12);
}

#[test]
fn paired_binary_step_order() {
    step_uses_updated_critics(Variant::Binary, Baseline::Paired);
}

#[test]
fn unpaired_combined_step_order() {
    step_uses_updated_critics(Variant::Combined, Baseline::Unpaired);
}

fn run_two_epochs<T: Scalar>(task: Task, variant: Variant, baseline: Baseline) {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(&dir.path().join("data"), task, 5);
    let mut cfg = tiny(variant, baseline);
    cfg.run.task = task;
    let backend = SegBackend::<T>::stub();
    let opts = TrainOptions { out_dir: dir.path().join("run"), cache_root: dir.path().join("cache"), ..Default::default() };
    let mut seen = Vec::new();
    let out = train(&cfg, &ds, &backend, &opts, &mut |s| {
        seen.push(s.epoch);
        Ok(())
    })
    .unwrap();
    // 5 images in batches of 2: 3 steps per epoch
    assert_eq!(out.steps, 6);
    assert_eq!(seen, [1, 2]);
    let trace = fs::read_to_string(&out.trace).unwrap();
    assert_eq!(trace.lines().count(), 1 + 12);
    assert!(trace.lines().skip(1).all(|l| !l.contains("NaN") && !l.contains("inf")));

    let ckpt = out.checkpoint.unwrap();
    let (g, stored) = load_generator::<T>(&ckpt, Role::G).unwrap();
    assert_eq!(stored, cfg);
    assert!(g.param_count() > 0);
    let src = ds.load_source::<T>(Split::Test, 0, 16).unwrap();
    let domain = if task == Task::Sketch2Photo { Domain::Sketch } else { Domain::LabelMap };
    let colored = colorize(&ckpt, &ImageBatch::new(src, domain).unwrap()).unwrap();
    assert_eq!(colored.tensor().shape(), [1, 3, 16, 16]);
    assert_eq!(colored.domain(), Domain::Color);
}

#[test]
fn sketch_paired_binary_f32() {
    run_two_epochs::<f32>(Task::Sketch2Photo, Variant::Binary, Baseline::Paired);
}

#[test]
fn label_unpaired_combined_f64() {
    run_two_epochs::<f64>(Task::Label2Photo, Variant::Combined, Baseline::Unpaired);
}

#[test]
fn sketch_unpaired_multiclass_f32() {
    run_two_epochs::<f32>(Task::Sketch2Photo, Variant::Multiclass, Baseline::Unpaired);
}

#[test]
fn task_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(&dir.path().join("data"), Task::Label2Photo, 2);
    let cfg = tiny(Variant::Baseline, Baseline::Paired);
    let opts = TrainOptions { out_dir: dir.path().join("run"), cache_root: dir.path().join("cache"), ..Default::default() };
    let r = train(&cfg, &ds, &SegBackend::<f32>::stub(), &opts, &mut |_| Ok(()));
    assert!(r.is_err());
}

#[test]
fn resume_with_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(&dir.path().join("data"), Task::Sketch2Photo, 2);
    let cfg = tiny(Variant::Binary, Baseline::Paired);
    let backend = SegBackend::<f32>::stub();
    let opts = TrainOptions {
        out_dir: dir.path().join("run"),
        cache_root: dir.path().join("cache"),
        stop_after: Some(1),
        ..Default::default()
    };
    let first = train(&cfg, &ds, &backend, &opts, &mut |_| Ok(())).unwrap();
    let mut other = cfg.clone();
    other.run.seed = 99;
    let r = train(
        &other,
        &ds,
        &backend,
        &TrainOptions { resume_from: first.checkpoint, stop_after: None, ..opts },
        &mut |_| Ok(()),
    );
    assert!(matches!(r, Err(Error::Checkpoint(_))));
}

#[test]
fn generator_role_checks() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_generator::<f32>(&dir.path().join("none.ckpt"), Role::G);
    assert!(matches!(missing, Err(Error::MissingGeneratorRole(_))));
    let path = dir.path().join("paired.ckpt");
    TrainState::<f32>::new(tiny(Variant::Baseline, Baseline::Paired)).unwrap().save(&path).unwrap();
    assert!(matches!(load_generator::<f32>(&path, Role::GY), Err(Error::MissingGeneratorRole(_))));
    assert!(matches!(load_generator::<f32>(&path, Role::D), Err(Error::MissingGeneratorRole(_))));
    assert!(load_generator::<f32>(&path, Role::G).is_ok());
}
