//! Alternating adversarial training, checkpoints and inference.
//!
//! One step: the generator(s) run once on a recording graph; the image
//! critics are updated on detached outputs, then the segmentation critics;
//! finally the generator(s) are updated against the freshly updated critics
//! on the weighted total. The segmentation backend is always bound frozen
//! and never registered with an optimizer.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::autodiff::{Binding, Gradients, Graph, Var};
use crate::config::{seed_all, AssetKind, Baseline, Config, NetworksConfig, Stream};
use crate::datapipe::{Dataset, Prefetcher, Sample, SampleMode, Split};
use crate::domain::{Domain, ImageBatch, SegmentationMap};
use crate::error::{Error, Result};
use crate::networks::{
    build_discriminator, build_generator, read_module, write_module, DiscKind, Discriminator, DiscriminatorSpec,
    Generator, GeneratorSpec, Role, CHECKPOINT_MAGIC,
};
use crate::nn::{Adam, Module};
use crate::objectives::{
    cycle_forward, paired_terms, seg_adversarial_loss, total_objective, unpaired_terms, weighted_total, CycleImages,
    LossBreakdown, LossTrace, Side,
};
use crate::scalar::Scalar;
use crate::segbackend::{SegBackend, SegCache, SegMapVar};
use crate::tensor::{checksum_all, Tensor};

/// Steps of loss history kept in memory.
const HISTORY: usize = 256;

pub const TRACE_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn generator_spec(cfg: &Config, role: Role) -> GeneratorSpec {
    let n = &cfg.networks;
    let src = cfg.run.task.source_channels();
    let (in_channels, out_channels) = if role == Role::GY { (3, src) } else { (src, 3) };
    GeneratorSpec {
        arch: n.generator_arch,
        in_channels,
        out_channels,
        base_width: n.generator_width,
        n_blocks: n.generator_blocks,
        downsamplings: n.generator_downsamplings,
    }
}

pub fn discriminator_spec(cfg: &Config, role: Role) -> DiscriminatorSpec {
    let n = &cfg.networks;
    let src = cfg.run.task.source_channels();
    let (kind, in_channels) = match role {
        Role::D if cfg.objective.baseline == Baseline::Paired => (DiscKind::Image, src + 3),
        Role::D => (DiscKind::Image, 3),
        Role::DX => (DiscKind::Image, src),
        Role::DB => (DiscKind::SegBinary, 2),
        Role::DM => (DiscKind::SegMulticlass, n.seg_classes),
        Role::G | Role::GY => unreachable!("generator role"),
    };
    DiscriminatorSpec { kind, in_channels, base_width: n.disc_width, n_layers: n.disc_layers, patch_output: n.patch_output }
}

/// Networks a configuration trains, in initialization order.
pub fn active_roles(cfg: &Config) -> Vec<Role> {
    let unpaired = cfg.objective.baseline == Baseline::Unpaired;
    let v = cfg.objective.variant;
    Role::ALL
        .into_iter()
        .filter(|r| match r {
            Role::G | Role::D => true,
            Role::GY | Role::DX => unpaired,
            Role::DB => v.uses_binary(),
            Role::DM => v.uses_multiclass(),
        })
        .collect()
}

pub fn backend_from_config<T: Scalar>(n: &NetworksConfig) -> Result<SegBackend<T>> {
    match n.segbackend {
        AssetKind::Stub => Ok(SegBackend::stub()),
        AssetKind::Pretrained if n.seg_weights.is_empty() => {
            Err(Error::BackendNotLoaded("pretrained backend selected without a weight file".into()))
        }
        AssetKind::Pretrained => SegBackend::load(Path::new(&n.seg_weights)),
    }
}

pub fn sample_mode(cfg: &Config) -> SampleMode {
    match cfg.objective.baseline {
        Baseline::Paired => SampleMode::Paired,
        Baseline::Unpaired => SampleMode::Unpaired,
    }
}

/// Losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub disc: LossBreakdown,
    pub gen: LossBreakdown,
    /// Absolute gradient mass that reached backend parameters.
    pub backend_grad: f64,
}

pub struct TrainState<T: Scalar> {
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub g: Generator<T>,
    pub g_y: Option<Generator<T>>,
    pub d: Discriminator<T>,
    pub d_x: Option<Discriminator<T>>,
    pub d_b: Option<Discriminator<T>>,
    pub d_m: Option<Discriminator<T>>,
    pub optimizers: BTreeMap<Role, Adam<T>>,
    pub history: VecDeque<StepReport>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: Config,
    epoch: usize,
    global_step: u64,
    roles: Vec<Role>,
    optimizer_steps: BTreeMap<Role, u64>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh networks drawn from the seed's initialization stream.
    pub fn new(config: Config) -> Result<Self> {
        let mut rng = seed_all(config.run.seed).stream(Stream::Init);
        let g_spec = generator_spec(&config, Role::G);
        g_spec.check_resolution(config.run.resolution)?;
        let mut gens = BTreeMap::new();
        let mut discs = BTreeMap::new();
        for role in active_roles(&config) {
            match role {
                Role::G | Role::GY => {
                    gens.insert(role, build_generator::<T, _>(&generator_spec(&config, role), &mut rng)?);
                }
                _ => {
                    let spec = discriminator_spec(&config, role);
                    if spec.output_size(config.run.resolution).is_none() {
                        return Err(Error::UnsupportedArch(format!(
                            "{}px is too small for a {}-stage discriminator",
                            config.run.resolution, spec.n_layers
                        )));
                    }
                    discs.insert(role, build_discriminator::<T, _>(&spec, &mut rng)?);
                }
            }
        }
        let mut state = Self {
            epoch: 0,
            global_step: 0,
            g: gens.remove(&Role::G).expect("always active"),
            g_y: gens.remove(&Role::GY),
            d: discs.remove(&Role::D).expect("always active"),
            d_x: discs.remove(&Role::DX),
            d_b: discs.remove(&Role::DB),
            d_m: discs.remove(&Role::DM),
            optimizers: BTreeMap::new(),
            history: VecDeque::new(),
            config,
        };
        let adam = state.config.run.adam();
        for role in state.roles() {
            let opt = Adam::new(adam, state.module(role).expect("listed role"));
            state.optimizers.insert(role, opt);
        }
        Ok(state)
    }

    pub fn roles(&self) -> Vec<Role> {
        Role::ALL.into_iter().filter(|&r| self.module(r).is_some()).collect()
    }

    pub fn module(&self, role: Role) -> Option<&dyn Module<T>> {
        match role {
            Role::G => Some(&self.g),
            Role::GY => self.g_y.as_ref().map(|m| m as &dyn Module<T>),
            Role::D => Some(&self.d),
            Role::DX => self.d_x.as_ref().map(|m| m as &dyn Module<T>),
            Role::DB => self.d_b.as_ref().map(|m| m as &dyn Module<T>),
            Role::DM => self.d_m.as_ref().map(|m| m as &dyn Module<T>),
        }
    }

    fn module_mut(&mut self, role: Role) -> Option<&mut dyn Module<T>> {
        match role {
            Role::G => Some(&mut self.g),
            Role::GY => self.g_y.as_mut().map(|m| m as &mut dyn Module<T>),
            Role::D => Some(&mut self.d),
            Role::DX => self.d_x.as_mut().map(|m| m as &mut dyn Module<T>),
            Role::DB => self.d_b.as_mut().map(|m| m as &mut dyn Module<T>),
            Role::DM => self.d_m.as_mut().map(|m| m as &mut dyn Module<T>),
        }
    }

    /// Checksum over the parameters of one network.
    pub fn checksum(&self, role: Role) -> Option<String> {
        self.module(role).map(|m| checksum_all(m.params().into_iter().map(|p| p.value())))
    }

    /// Checksum over every network, in role order.
    pub fn checksum_all(&self) -> String {
        let params: Vec<&Tensor<T>> =
            self.roles().into_iter().flat_map(|r| self.module(r).unwrap().params()).map(|p| p.value()).collect();
        checksum_all(params)
    }

    pub fn set_lr(&mut self, lr: f64) {
        for opt in self.optimizers.values_mut() {
            opt.set_lr(lr);
        }
    }

    /// Applies one optimizer update to `role` if it is active.
    pub fn apply(&mut self, role: Role, grads: &Gradients<T>) {
        let Some(mut opt) = self.optimizers.remove(&role) else { return };
        if let Some(m) = self.module_mut(role) {
            opt.update(m, grads);
        }
        self.optimizers.insert(role, opt);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            roles: self.roles(),
            optimizer_steps: self.optimizers.iter().map(|(r, o)| (*r, o.step)).collect(),
        };
        let mut w = ArchiveWriter::new::<T>(CHECKPOINT_MAGIC, &meta)?;
        for role in self.roles() {
            write_module(&mut w, role.as_str(), self.module(role).unwrap());
            let opt = &self.optimizers[&role];
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                w.tensor(format!("opt/{role}/m/{i}"), m);
                w.tensor(format!("opt/{role}/v/{i}"), v);
            }
        }
        w.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = ArchiveReader::open(path, CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = r.meta()?;
        let mut state = Self::new(meta.config)?;
        if state.roles() != meta.roles {
            return Err(Error::Checkpoint("stored roles do not match the stored configuration".into()));
        }
        state.epoch = meta.epoch;
        state.global_step = meta.global_step;
        for role in state.roles() {
            read_module(&r, role.as_str(), state.module_mut(role).unwrap())?;
            let opt = state.optimizers.get_mut(&role).unwrap();
            opt.step = *meta.optimizer_steps.get(&role).unwrap_or(&0);
            for i in 0..opt.m.len() {
                let m = r.tensor::<T>(&format!("opt/{role}/m/{i}"))?;
                let v = r.tensor::<T>(&format!("opt/{role}/v/{i}"))?;
                if m.shape() != opt.m[i].shape() || v.shape() != opt.v[i].shape() {
                    return Err(Error::Checkpoint(format!("optimizer state of {role} has wrong shapes")));
                }
                opt.m[i] = m;
                opt.v[i] = v;
            }
        }
        Ok(state)
    }
}

fn seg_maps<'g, T: Scalar>(
    backend: &SegBackend<T>,
    g: &'g Graph<T>,
    fake: Var<'g, T>,
    want_binary: bool,
) -> Result<(SegMapVar<'g, T>, Option<SegMapVar<'g, T>>)> {
    let multi = backend.segment_multiclass(g, fake)?;
    let binary = if want_binary { Some(backend.collapse(multi)?) } else { None };
    Ok((multi, binary))
}

fn record_subs(out: &mut BTreeMap<String, f64>, prefix: &str, v: Option<f64>) {
    if let Some(v) = v {
        out.insert(prefix.to_string(), v);
    }
}

type SegPair<'g, T> = (SegMapVar<'g, T>, Option<SegMapVar<'g, T>>);

fn generator_forward<'g, T: Scalar>(
    gg: &'g Graph<T>,
    state: &TrainState<T>,
    x: Var<'g, T>,
    y: Var<'g, T>,
) -> Result<(Var<'g, T>, Option<CycleImages<'g, T>>)> {
    match state.config.objective.baseline {
        Baseline::Paired => Ok((state.g.forward(gg, x, Binding::Trainable)?, None)),
        Baseline::Unpaired => {
            let g_y = state.g_y.as_ref().expect("unpaired state has G_Y");
            let imgs = cycle_forward(gg, &state.g, g_y, x, y, Binding::Trainable)?;
            Ok((imgs.fake_y, Some(imgs)))
        }
    }
}

/// Weighted generator-side total and its breakdown.
pub struct GeneratorTerms<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn generator_terms<'g, T: Scalar>(
    gg: &'g Graph<T>,
    state: &TrainState<T>,
    x: Var<'g, T>,
    y: Var<'g, T>,
    fake_y: Var<'g, T>,
    cycle: Option<&CycleImages<'g, T>>,
    sample: &Sample<T>,
    real_maps: Option<&(SegmentationMap<T>, SegmentationMap<T>)>,
    fake_maps: Option<&SegPair<'g, T>>,
) -> Result<GeneratorTerms<'g, T>> {
    let cfg = &state.config.objective;
    let frag = match cycle {
        None => paired_terms(gg, &state.d, x, y, fake_y, sample.pairing, Side::Generator, cfg)?,
        Some(imgs) => {
            let d_x = state.d_x.as_ref().expect("unpaired state has D_X");
            unpaired_terms(gg, &state.d, d_x, x, y, imgs, Side::Generator, cfg)?
        }
    };
    let mut l_b = None;
    let mut l_m = None;
    if let (Some((real_m, real_b)), Some((fake_m, fake_b))) = (real_maps, fake_maps) {
        if let (Some(d_b), Some(fake_b)) = (&state.d_b, fake_b) {
            l_b = Some(seg_adversarial_loss(gg, d_b, SegMapVar::constant(gg, real_b), *fake_b, Side::Generator)?);
        }
        if let Some(d_m) = &state.d_m {
            l_m = Some(seg_adversarial_loss(gg, d_m, SegMapVar::constant(gg, real_m), *fake_m, Side::Generator)?);
        }
    }
    let value = |v: &Option<Var<'_, T>>| v.map(|v| v.item().to_f64_lossless());
    let (lb_v, lm_v) = (value(&l_b), value(&l_m));
    let l_g = frag.loss.item().to_f64_lossless();
    let mut subs = frag.sub_values();
    record_subs(&mut subs, "g_b", lb_v);
    record_subs(&mut subs, "g_m", lm_v);
    let total = weighted_total(cfg, Some(frag.loss), l_b, l_m)?;
    let breakdown = total_objective(cfg, Side::Generator, Some(l_g), lb_v, lm_v, subs)?;
    Ok(GeneratorTerms { total, breakdown })
}

/// The generator-side objective of the current state on `sample`, recorded
/// on `gg` with the generators trainable and everything else frozen. No
/// parameters change.
pub fn generator_objective<'g, T: Scalar>(
    gg: &'g Graph<T>,
    state: &TrainState<T>,
    backend: &SegBackend<T>,
    cache: &SegCache,
    sample: &Sample<T>,
) -> Result<GeneratorTerms<'g, T>> {
    let o = &state.config.objective;
    let (use_b, use_m) = (o.variant.uses_binary(), o.variant.uses_multiclass());
    let x = gg.input(sample.x.tensor().clone());
    let y = gg.input(sample.y.tensor().clone());
    let (fake_y, cycle) = generator_forward(gg, state, x, y)?;
    let (real_maps, fake_maps) = if use_b || use_m {
        (Some(cache.segment_cached(backend, &sample.y)?), Some(seg_maps(backend, gg, fake_y, use_b)?))
    } else {
        (None, None)
    };
    generator_terms(gg, state, x, y, fake_y, cycle.as_ref(), sample, real_maps.as_ref(), fake_maps.as_ref())
}

/// One optimization step on `sample`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    backend: &SegBackend<T>,
    cache: &SegCache,
    sample: &Sample<T>,
) -> Result<StepReport> {
    let cfg = state.config.objective.clone();
    let res = state.config.run.resolution;
    sample.x.expect_resolution(res)?;
    sample.y.expect_resolution(res)?;
    let (use_b, use_m) = (cfg.variant.uses_binary(), cfg.variant.uses_multiclass());
    let seg_on = use_b || use_m;

    // (1) generator forward, recorded for the later generator update
    let gg = Graph::new();
    let x = gg.input(sample.x.tensor().clone());
    let y = gg.input(sample.y.tensor().clone());
    let (fake_y, cycle) = generator_forward(&gg, state, x, y)?;

    // (2) segmentation of real targets (cached) and of the fresh fakes
    let mut real_maps: Option<(SegmentationMap<T>, SegmentationMap<T>)> = None;
    let mut fake_maps = None;
    if seg_on {
        real_maps = Some(cache.segment_cached(backend, &sample.y)?);
        fake_maps = Some(seg_maps(backend, &gg, fake_y, use_b)?);
    }

    // (3a) image critics on detached generator outputs
    let gd = Graph::new();
    let xd = gd.input(sample.x.tensor().clone());
    let yd = gd.input(sample.y.tensor().clone());
    let fake_yd = gd.input(fake_y.value().clone());
    let frag = match &cycle {
        None => paired_terms(&gd, &state.d, xd, yd, fake_yd, sample.pairing, Side::Discriminator, &cfg)?,
        Some(imgs) => {
            let fake_xd = gd.input(imgs.fake_x.value().clone());
            let detached = CycleImages { fake_y: fake_yd, rec_x: fake_xd, fake_x: fake_xd, rec_y: fake_yd };
            let d_x = state.d_x.as_ref().expect("unpaired state has D_X");
            unpaired_terms(&gd, &state.d, d_x, xd, yd, &detached, Side::Discriminator, &cfg)?
        }
    };
    let d_img = frag.loss.item().to_f64_lossless();
    let mut disc_subs = frag.sub_values();
    let grads = gd.backward(frag.loss)?;
    state.apply(Role::D, &grads);
    state.apply(Role::DX, &grads);

    // (3b) segmentation critics, each on its own loss
    let mut d_seg = [None, None];
    if let (Some((real_m, real_b)), Some((fake_m, fake_b))) = (&real_maps, &fake_maps) {
        for (slot, role, real, fake) in [
            (0, Role::DB, real_b, fake_b.as_ref().map(|f| f.to_map()).transpose()?),
            (1, Role::DM, real_m, Some(fake_m.to_map()?)),
        ] {
            let (Some(fake), true) = (fake, state.module(role).is_some()) else { continue };
            let gs = Graph::new();
            let critic = if role == Role::DB { state.d_b.as_ref() } else { state.d_m.as_ref() }.unwrap();
            let loss = seg_adversarial_loss(
                &gs,
                critic,
                SegMapVar::constant(&gs, real),
                SegMapVar::constant(&gs, &fake),
                Side::Discriminator,
            )?;
            d_seg[slot] = Some(loss.item().to_f64_lossless());
            let grads = gs.backward(loss)?;
            state.apply(role, &grads);
        }
    }
    record_subs(&mut disc_subs, "d_b", d_seg[0]);
    record_subs(&mut disc_subs, "d_m", d_seg[1]);
    let disc = total_objective(&cfg, Side::Discriminator, Some(d_img), d_seg[0], d_seg[1], disc_subs)?;

    // (4) generators against the updated critics
    let terms = generator_terms(&gg, state, x, y, fake_y, cycle.as_ref(), sample, real_maps.as_ref(), fake_maps.as_ref())?;
    let grads = gg.backward(terms.total)?;
    let backend_grad = grads.abs_sum(backend.params());
    state.apply(Role::G, &grads);
    state.apply(Role::GY, &grads);
    let gen = terms.breakdown;

    state.global_step += 1;
    let report = StepReport { disc, gen, backend_grad };
    if state.history.len() == HISTORY {
        state.history.pop_front();
    }
    state.history.push_back(report.clone());
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Parent of the segmentation cache folder.
    pub cache_root: PathBuf,
    pub resume_from: Option<PathBuf>,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final checkpoint, or the last one written when stopped early.
    pub checkpoint: Option<PathBuf>,
    pub trace: PathBuf,
    pub steps: u64,
    pub epochs_completed: usize,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    checkpoint_dir(out).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Runs the configured epochs. `on_epoch` sees the state after every
/// completed epoch.
pub fn train<T: Scalar>(
    cfg: &Config,
    dataset: &Dataset,
    backend: &SegBackend<T>,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainOutcome> {
    if dataset.task() != cfg.run.task {
        return Err(Error::Shape(format!(
            "dataset holds {} data but the run is configured for {}",
            dataset.task().as_str(),
            cfg.run.task.as_str()
        )));
    }
    if cfg.objective.variant.uses_multiclass() && backend.class_count() != cfg.networks.seg_classes {
        return Err(Error::ChannelMismatch { expected: cfg.networks.seg_classes, got: backend.class_count() });
    }
    let mode = sample_mode(cfg);
    dataset.check_mode(mode)?;
    let mut state = match &opts.resume_from {
        Some(path) => {
            let s = TrainState::<T>::load(path)?;
            if s.config != *cfg {
                return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
            }
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    let ckpt_dir = checkpoint_dir(&opts.out_dir);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let trace_path = opts.out_dir.join("logs").join(TRACE_FILE);
    let mut trace =
        if opts.resume_from.is_some() { LossTrace::resume(&trace_path, state.epoch)? } else { LossTrace::create(&trace_path)? };
    let cache = SegCache::new(&opts.cache_root);
    let seeds = seed_all(cfg.run.seed);
    let mut last_good = opts.resume_from.clone();

    while state.epoch < cfg.run.epochs {
        let epoch = state.epoch;
        state.set_lr(cfg.run.lr_at(epoch));
        let plans = dataset.plan(Split::Train, cfg.run.batch_size, mode, &seeds, epoch)?;
        let batches = Prefetcher::<T>::new(dataset.clone(), Split::Train, plans, mode, cfg.run.resolution, cfg.run.prefetch);
        for sample in batches {
            let report = match train_step(&mut state, backend, &cache, &sample?) {
                Err(Error::NonFiniteLoss(term)) => {
                    let at = last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string());
                    return Err(Error::NonFiniteLoss(format!("{term} (last good checkpoint: {at})")));
                }
                r => r?,
            };
            trace.append(epoch, state.global_step, &report.disc)?;
            trace.append(epoch, state.global_step, &report.gen)?;
        }
        state.epoch += 1;
        trace.flush()?;
        let every = cfg.run.checkpoint_every;
        let stopping = opts.stop_after == Some(state.epoch);
        if (every > 0 && state.epoch % every == 0) || stopping {
            let path = epoch_checkpoint(&opts.out_dir, state.epoch);
            state.save(&path)?;
            last_good = Some(path);
        }
        on_epoch(&state)?;
        if stopping && state.epoch < cfg.run.epochs {
            return Ok(TrainOutcome {
                checkpoint: last_good,
                trace: trace_path,
                steps: state.global_step,
                epochs_completed: state.epoch,
            });
        }
    }
    let path = ckpt_dir.join(FINAL_CHECKPOINT);
    state.save(&path)?;
    Ok(TrainOutcome { checkpoint: Some(path), trace: trace_path, steps: state.global_step, epochs_completed: state.epoch })
}

/// Loads one generator from a checkpoint without touching critics or
/// optimizer state. Returns the generator with the stored configuration.
pub fn load_generator<T: Scalar>(path: &Path, role: Role) -> Result<(Generator<T>, Config)> {
    if !matches!(role, Role::G | Role::GY) {
        return Err(Error::MissingGeneratorRole(format!("{role} is not a generator")));
    }
    if !path.is_file() {
        return Err(Error::MissingGeneratorRole(format!("{role}: no checkpoint at {}", path.display())));
    }
    let r = ArchiveReader::open(path, CHECKPOINT_MAGIC)?;
    let meta: CheckpointMeta = r.meta()?;
    if !meta.roles.contains(&role) {
        return Err(Error::MissingGeneratorRole(format!("{role} not stored in {}", path.display())));
    }
    let spec = generator_spec(&meta.config, role);
    let mut rng = seed_all(0).stream(Stream::Init);
    let mut g = build_generator::<T, _>(&spec, &mut rng)?;
    read_module(&r, role.as_str(), &mut g)?;
    Ok((g, meta.config))
}

/// Pure generator forward.
pub fn translate<T: Scalar>(g: &Generator<T>, sources: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    let graph = Graph::new();
    let out = g.forward(&graph, graph.input(sources.tensor().clone()), Binding::Frozen)?;
    let t = out.value().clone();
    ImageBatch::new(t, Domain::Color)
}

/// Colors source images with the `G` generator of a checkpoint.
pub fn colorize<T: Scalar>(checkpoint: &Path, sources: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    let (g, cfg) = load_generator::<T>(checkpoint, Role::G)?;
    sources.expect_resolution(cfg.run.resolution)?;
    translate(&g, sources)
}
