//! FID and mIoU of generated images, and the metrics report.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::autodiff::{Binding, Graph};
use crate::config::{AssetKind, NetworksConfig, Stream};
use crate::datapipe::{save_png, sequential_plan, tensor_to_gray, tensor_to_rgb, Dataset, Split};
use crate::domain::{Domain, ImageBatch};
use crate::error::{Error, Result};
use crate::networks::{Generator, Role};
use crate::nn::ConvStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{load_generator, translate};

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub extractor_id: String,
}

impl FeatureStats {
    /// Mean and unbiased covariance of row vectors.
    pub fn from_features(features: &[Vec<f64>], extractor_id: &str) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Shape(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, n, extractor_id: extractor_id.to_string() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of the union of two disjoint sets.
    pub fn pool(&self, other: &Self) -> Result<Self> {
        check_compatible(self, other)?;
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let mean = (&self.mean * na + &other.mean * nb) / n;
        let delta = &self.mean - &other.mean;
        let scatter = &self.cov * (na - 1.0) + &other.cov * (nb - 1.0) + &delta * delta.transpose() * (na * nb / n);
        Ok(Self { mean, cov: scatter / (n - 1.0), n: self.n + other.n, extractor_id: self.extractor_id.clone() })
    }
}

fn check_compatible(a: &FeatureStats, b: &FeatureStats) -> Result<()> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::ExtractorMismatch(a.extractor_id.clone(), b.extractor_id.clone()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Eigenvalues below `-EIG_TOL·max(1, λ_max)` are a numerical failure;
/// those above are clamped to zero.
const EIG_TOL: f64 = 1e-6;

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(m, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigendecomposition did not converge".into()))
}

fn clamped(values: &DVector<f64>) -> Result<Vec<f64>> {
    let scale = values.iter().cloned().fold(1.0, f64::max);
    values
        .iter()
        .map(|&l| {
            if l < -EIG_TOL * scale {
                Err(Error::NumericalFailure(format!("covariance has eigenvalue {l}")))
            } else {
                Ok(l.max(0.0))
            }
        })
        .collect()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the square
/// root taken as `Tr((Σa^½ Σb Σa^½)^½)`. Clamped to be non-negative.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    check_compatible(a, b)?;
    let ea = sym_eigen(a.cov.clone())?;
    let la = clamped(&ea.eigenvalues)?;
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&DVector::from_iterator(la.len(), la.iter().map(|l| l.sqrt()))) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let trace_sqrt: f64 = clamped(&sym_eigen(inner)?.eigenvalues)?.iter().map(|l| l.sqrt()).sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
    if d < -EIG_TOL * (1.0 + a.cov.trace() + b.cov.trace()) {
        return Err(Error::NumericalFailure(format!("negative distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Pluggable image feature map for FID.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One feature vector per image of an `N×3×H×W` batch in `[-1, 1]`.
    fn extract(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>>;
}

const STUB_GRID: usize = 8;
/// Fixed, so stub features are comparable across runs and seeds.
const STUB_SEED: u64 = 0x5eed;

/// Average colour over an 8×8 grid of cells, randomly projected and
/// squashed with `tanh`.
pub struct StubExtractor {
    dim: usize,
    proj: Vec<f64>,
    id: String,
}

impl StubExtractor {
    pub fn new(dim: usize) -> Self {
        let inputs = 3 * STUB_GRID * STUB_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
        rng.set_stream(Stream::Extractor as u64);
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("positive std");
        let proj = (0..dim * inputs).map(|_| normal.sample(&mut rng)).collect();
        Self { dim, proj, id: format!("stub-pool{STUB_GRID}-d{dim}") }
    }

    fn pooled(data: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * STUB_GRID * STUB_GRID);
        for c in 0..3 {
            for gy in 0..STUB_GRID {
                let (y0, y1) = (gy * h / STUB_GRID, (gy + 1) * h / STUB_GRID);
                for gx in 0..STUB_GRID {
                    let (x0, x1) = (gx * w / STUB_GRID, (gx + 1) * w / STUB_GRID);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += data[(c * h + y) * w + x0..(c * h + y) * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }
}

impl<T: Scalar> FeatureExtractor<T> for StubExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        if h < STUB_GRID || w < STUB_GRID {
            return Err(Error::Shape(format!("stub extractor needs at least {STUB_GRID}px, got {h}x{w}")));
        }
        let per = c * h * w;
        let inputs = 3 * STUB_GRID * STUB_GRID;
        Ok((0..n)
            .map(|i| {
                let img: Vec<f64> = images.data()[i * per..(i + 1) * per].iter().map(|v| v.to_f64_lossless()).collect();
                let p = Self::pooled(&img, h, w);
                (0..self.dim)
                    .map(|k| self.proj[k * inputs..(k + 1) * inputs].iter().zip(&p).map(|(a, b)| a * b).sum::<f64>().tanh())
                    .collect()
            })
            .collect())
    }
}

pub const FEATURE_MAGIC: [u8; 8] = *b"ASLFEAT\0";

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    layers: usize,
}

/// Externally trained convolutional feature network; features are the
/// spatial means of its output channels.
pub struct ConvExtractor {
    stack: ConvStack<f64>,
    id: String,
}

impl ConvExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingWeights(format!("no feature extractor weights at {}", path.display())));
        }
        let r = ArchiveReader::open(path, FEATURE_MAGIC)?;
        let meta: FeatureMeta = r.meta()?;
        let stack = ConvStack::from_archive(&r, meta.layers)?;
        if stack.in_channels() != 3 {
            return Err(Error::Checkpoint("feature extractor must take 3 channels".into()));
        }
        let params: Vec<&Tensor<f64>> =
            stack.layers.iter().flat_map(|l| crate::nn::Module::params(l)).map(|p| p.value()).collect();
        let id = format!("conv-{}", &crate::tensor::checksum_all(params)[..12]);
        Ok(Self { stack, id })
    }

    pub fn save(path: &Path, stack: &ConvStack<f64>) -> Result<()> {
        let mut w = ArchiveWriter::new::<f64>(FEATURE_MAGIC, &FeatureMeta { layers: stack.layers.len() })?;
        stack.write_into(&mut w);
        w.write_atomic(path)
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.stack.out_channels()
    }

    fn extract(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let out = self.stack.forward(&g, g.input(images.cast::<f64>()), Binding::Frozen)?.mean_hw()?;
        let v = out.value();
        let d = self.stack.out_channels();
        Ok(v.data().chunks(d).map(|c| c.to_vec()).collect())
    }
}

pub fn extractor_from_config<T: Scalar>(n: &NetworksConfig) -> Result<Box<dyn FeatureExtractor<T>>> {
    match n.extractor {
        AssetKind::Stub => Ok(Box::new(StubExtractor::new(n.feature_dim))),
        AssetKind::Pretrained if n.extractor_weights.is_empty() => {
            Err(Error::MissingWeights("pretrained feature extractor selected without a weight file".into()))
        }
        AssetKind::Pretrained => Ok(Box::new(ConvExtractor::load(Path::new(&n.extractor_weights))?)),
    }
}

/// Hex digest identifying an image set by content and order.
pub fn set_checksum<T: Scalar>(images: &[Tensor<T>]) -> String {
    let mut h = Sha256::new();
    for t in images {
        h.update(t.checksum().as_bytes());
    }
    hex::encode(h.finalize())
}

pub const STATS_MAGIC: [u8; 8] = *b"ASLFIDS\0";

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    n: usize,
    extractor_id: String,
}

/// Feature statistics keyed by (set checksum, extractor id), in memory and
/// optionally under `<root>/fidstats`.
#[derive(Default)]
pub struct StatsCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, FeatureStats>>,
}

impl StatsCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: &Path) -> Self {
        Self { dir: Some(root.join("fidstats")), mem: Mutex::default() }
    }

    fn key(set: &str, extractor_id: &str) -> String {
        hex::encode(Sha256::digest(format!("{set}|{extractor_id}").as_bytes()))
    }

    fn get(&self, key: &str) -> Option<FeatureStats> {
        if let Some(s) = self.mem.lock().unwrap().get(key) {
            return Some(s.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.stats"));
        let r = ArchiveReader::open(&path, STATS_MAGIC).ok()?;
        let meta: StatsMeta = r.meta().ok()?;
        let mean = r.tensor::<f64>("mean").ok()?;
        let cov = r.tensor::<f64>("cov").ok()?;
        let d = mean.len();
        if cov.len() != d * d {
            return None;
        }
        let stats = FeatureStats {
            mean: DVector::from_column_slice(mean.data()),
            cov: DMatrix::from_row_slice(d, d, cov.data()),
            n: meta.n,
            extractor_id: meta.extractor_id,
        };
        self.mem.lock().unwrap().insert(key.to_string(), stats.clone());
        Some(stats)
    }

    fn put(&self, key: &str, stats: &FeatureStats) -> Result<()> {
        self.mem.lock().unwrap().insert(key.to_string(), stats.clone());
        let Some(dir) = &self.dir else { return Ok(()) };
        let d = stats.dim();
        let mut w = ArchiveWriter::new::<f64>(STATS_MAGIC, &StatsMeta { n: stats.n, extractor_id: stats.extractor_id.clone() })?;
        w.tensor("mean", &Tensor::from_vec([d], stats.mean.as_slice().to_vec())?);
        let rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| stats.cov[(i, j)]).collect();
        w.tensor("cov", &Tensor::from_vec([d, d], rows)?);
        w.write_atomic(&dir.join(format!("{key}.stats")))
    }
}

/// Statistics of an image set given as batches.
pub fn feature_stats<T: Scalar>(
    images: &[Tensor<T>],
    extractor: &dyn FeatureExtractor<T>,
    cache: Option<&StatsCache>,
) -> Result<FeatureStats> {
    let key = cache.map(|_| StatsCache::key(&set_checksum(images), extractor.id()));
    if let (Some(c), Some(k)) = (cache, &key) {
        if let Some(s) = c.get(k) {
            return Ok(s);
        }
    }
    let mut feats = Vec::new();
    for batch in images {
        feats.extend(extractor.extract(batch)?);
    }
    let stats = FeatureStats::from_features(&feats, extractor.id())?;
    if let (Some(c), Some(k)) = (cache, &key) {
        c.put(k, &stats)?;
    }
    Ok(stats)
}

pub fn fid<T: Scalar>(
    real: &[Tensor<T>],
    fake: &[Tensor<T>],
    extractor: &dyn FeatureExtractor<T>,
    cache: Option<&StatsCache>,
) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Shape("FID needs two non-empty image sets".into()));
    }
    let a = feature_stats(real, extractor, cache)?;
    let b = feature_stats(fake, extractor, cache)?;
    frechet_distance(&a, &b)
}

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= self.k) {
            return Err(Error::Shape(format!("label {bad} outside {} classes", self.k)));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("{} vs {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both maps.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 when nothing was scored.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn miou(pred: &[u16], gt: &[u16], k: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok((cm.per_class_iou(), cm.mean_iou()))
}

/// Nearest-mean colour classifier fitted on a dataset's training images
/// and their masks.
#[derive(Clone, Debug)]
pub struct ColorSegmenter {
    means: Vec<Option<[f64; 3]>>,
}

impl ColorSegmenter {
    pub fn fit<T: Scalar>(dataset: &Dataset, resolution: usize) -> Result<Option<Self>> {
        let mut sums: Vec<([f64; 3], u64)> = Vec::new();
        let mut any = false;
        for i in 0..dataset.len(Split::Train, true) {
            let Some(mask) = dataset.load_target_mask(Split::Train, i, resolution)? else { continue };
            any = true;
            let img = dataset.load_target::<f64>(Split::Train, i, resolution)?;
            let hw = resolution * resolution;
            for (p, &c) in mask.iter().enumerate() {
                let c = c as usize;
                if sums.len() <= c {
                    sums.resize(c + 1, ([0.0; 3], 0));
                }
                for ch in 0..3 {
                    sums[c].0[ch] += img.data()[ch * hw + p];
                }
                sums[c].1 += 1;
            }
        }
        if !any {
            return Ok(None);
        }
        let means = sums.into_iter().map(|(s, n)| (n > 0).then(|| s.map(|v| v / n as f64))).collect();
        Ok(Some(Self { means }))
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    /// One label map per image of an `N×3×H×W` batch.
    pub fn segment<T: Scalar>(&self, images: &Tensor<T>) -> Result<Vec<Vec<u16>>> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        let hw = h * w;
        let d = images.data();
        Ok((0..n)
            .map(|i| {
                (0..hw)
                    .map(|p| {
                        let px: [f64; 3] = std::array::from_fn(|ch| d[(i * 3 + ch) * hw + p].to_f64_lossless());
                        let mut best = (f64::INFINITY, 0u16);
                        for (k, m) in self.means.iter().enumerate() {
                            let Some(m) = m else { continue };
                            let dist: f64 = (0..3).map(|ch| (px[ch] - m[ch]).powi(2)).sum();
                            if dist < best.0 {
                                best = (dist, k as u16);
                            }
                        }
                        best.1
                    })
                    .collect()
            })
            .collect())
    }
}

pub const REPORT_HEADER: &str = "dataset,task,baseline,variant,fid,miou,n_images,extractor_id";
pub const REPORT_FILE: &str = "metrics.csv";

/// One line of the metrics table. The oracle line has variant `oracle`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub task: String,
    pub baseline: String,
    pub variant: String,
    pub fid: Option<f64>,
    pub miou: Option<f64>,
    pub n_images: usize,
    pub extractor_id: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset,
            self.task,
            self.baseline,
            self.variant,
            opt(self.fid),
            opt(self.miou),
            self.n_images,
            self.extractor_id
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("report row has {} fields: {line}", f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Parse(format!("bad number `{s}`")))
            }
        };
        Ok(Self {
            dataset: f[0].into(),
            task: f[1].into(),
            baseline: f[2].into(),
            variant: f[3].into(),
            fid: num(f[4])?,
            miou: num(f[5])?,
            n_images: f[6].parse().map_err(|_| Error::Parse(format!("bad count `{}`", f[6])))?,
            extractor_id: f[7].into(),
        })
    }

    fn key(&self) -> (String, String, String, String) {
        (self.dataset.clone(), self.task.clone(), self.baseline.clone(), self.variant.clone())
    }
}

/// Inserts or replaces rows by (dataset, task, baseline, variant); the
/// file stays sorted by that key.
pub fn upsert_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut table: BTreeMap<_, MetricRow> = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let r = MetricRow::from_csv(line)?;
            table.insert(r.key(), r);
        }
    }
    for r in rows {
        table.insert(r.key(), r.clone());
    }
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in table.values() {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    crate::archive::write_atomic(path, out.as_bytes())
}

pub struct EvalOptions {
    pub out_dir: PathBuf,
    pub cache_root: PathBuf,
    pub batch_size: usize,
    /// Test images shown in the comparison grid.
    pub grid_images: usize,
}

/// Generated and real images of the test split.
pub struct TestImages<T> {
    pub sources: Vec<Tensor<T>>,
    pub fakes: Vec<Tensor<T>>,
    pub reals: Vec<Tensor<T>>,
}

pub fn generate_test_set<T: Scalar>(g: &Generator<T>, dataset: &Dataset, resolution: usize, batch: usize) -> Result<TestImages<T>> {
    let n = dataset.len(Split::Test, true).min(dataset.len(Split::Test, false));
    let mut out = TestImages { sources: Vec::new(), fakes: Vec::new(), reals: Vec::new() };
    for plan in sequential_plan(n, batch) {
        let src: Vec<Tensor<T>> = plan.x.iter().map(|&i| dataset.load_source(Split::Test, i, resolution)).collect::<Result<_>>()?;
        let real: Vec<Tensor<T>> = plan.y.iter().map(|&i| dataset.load_target(Split::Test, i, resolution)).collect::<Result<_>>()?;
        let src = Tensor::stack(&src, true)?;
        let domain = if src.shape()[1] == 1 { Domain::Sketch } else { Domain::LabelMap };
        let fake = translate(g, &ImageBatch::new(src.clone(), domain)?)?;
        out.sources.push(src);
        out.fakes.push(fake.into_tensor());
        out.reals.push(Tensor::stack(&real, true)?);
    }
    Ok(out)
}

/// Test-split FID of a generator.
pub fn generator_fid<T: Scalar>(
    g: &Generator<T>,
    dataset: &Dataset,
    resolution: usize,
    extractor: &dyn FeatureExtractor<T>,
    cache: Option<&StatsCache>,
) -> Result<f64> {
    let imgs = generate_test_set(g, dataset, resolution, 16)?;
    fid(&imgs.reals, &imgs.fakes, extractor, cache)
}

fn write_grid<T: Scalar>(path: &Path, imgs: &TestImages<T>, count: usize) -> Result<()> {
    let mut rows = Vec::new();
    'outer: for (b, fakes) in imgs.fakes.iter().enumerate() {
        for i in 0..fakes.shape()[0] {
            if rows.len() == count {
                break 'outer;
            }
            let src = imgs.sources[b].narrow_batch(i, 1)?;
            let src = if src.shape()[1] == 1 {
                image::DynamicImage::ImageLuma8(tensor_to_gray(&src)?).to_rgb8()
            } else {
                tensor_to_rgb(&src)?
            };
            rows.push([src, tensor_to_rgb(&fakes.narrow_batch(i, 1)?)?, tensor_to_rgb(&imgs.reals[b].narrow_batch(i, 1)?)?]);
        }
    }
    let Some(first) = rows.first() else { return Ok(()) };
    let (w, h) = (first[0].width(), first[0].height());
    let mut grid = image::RgbImage::new(3 * w, rows.len() as u32 * h);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            image::imageops::replace(&mut grid, img, (c as u32 * w) as i64, (r as u32 * h) as i64);
        }
    }
    save_png(path, &image::DynamicImage::ImageRgb8(grid))
}

/// Colorizes the test split with a checkpoint's generator and records its
/// FID, mIoU and the oracle mIoU of the real test images.
pub fn evaluate_run<T: Scalar>(
    checkpoint: &Path,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor<T>,
    opts: &EvalOptions,
) -> Result<Vec<MetricRow>> {
    let (g, cfg) = load_generator::<T>(checkpoint, Role::G)?;
    let res = cfg.run.resolution;
    let imgs = generate_test_set(&g, dataset, res, opts.batch_size)?;
    let cache = StatsCache::on_disk(&opts.cache_root);
    let fid_value = fid(&imgs.reals, &imgs.fakes, extractor, Some(&cache))?;
    let n_images: usize = imgs.fakes.iter().map(|t| t.shape()[0]).sum();

    let mut miou_value = None;
    let mut oracle = None;
    if let Some(seg) = ColorSegmenter::fit::<T>(dataset, res)? {
        let mut gts = Vec::new();
        for i in 0..n_images {
            match dataset.load_target_mask(Split::Test, i, res)? {
                Some(m) => gts.push(m),
                None => break,
            }
        }
        if gts.len() == n_images {
            let k = gts.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0).max(seg.classes());
            let mut cm_fake = ConfusionMatrix::new(k);
            let mut cm_real = ConfusionMatrix::new(k);
            let mut i = 0;
            for (fakes, reals) in imgs.fakes.iter().zip(&imgs.reals) {
                for (pf, pr) in seg.segment(fakes)?.into_iter().zip(seg.segment(reals)?) {
                    cm_fake.add(&pf, &gts[i])?;
                    cm_real.add(&pr, &gts[i])?;
                    i += 1;
                }
            }
            miou_value = Some(cm_fake.mean_iou());
            oracle = Some(cm_real.mean_iou());
        }
    }

    let name = &dataset.manifest().name;
    let task = cfg.run.task.as_str().to_string();
    let mut rows = vec![MetricRow {
        dataset: name.clone(),
        task: task.clone(),
        baseline: cfg.objective.baseline.as_str().into(),
        variant: cfg.objective.variant.as_str().into(),
        fid: Some(fid_value),
        miou: miou_value,
        n_images,
        extractor_id: extractor.id().into(),
    }];
    if oracle.is_some() {
        rows.push(MetricRow {
            dataset: name.clone(),
            task,
            baseline: "-".into(),
            variant: "oracle".into(),
            fid: None,
            miou: oracle,
            n_images,
            extractor_id: extractor.id().into(),
        });
    }
    let reports = opts.out_dir.join("reports");
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    upsert_report(&reports.join(REPORT_FILE), &rows)?;
    let grid = reports.join(format!("grid_{}_{}.png", cfg.objective.baseline.as_str(), cfg.objective.variant.as_str()));
    write_grid(&grid, &imgs, opts.grid_images)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: &[f64], cov: &[f64], id: &str) -> FeatureStats {
        let d = mean.len();
        FeatureStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
            n: 10,
            extractor_id: id.into(),
        }
    }

    #[test]
    fn closed_form_distances() {
        let a = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], "x");
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let b = stats(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], "x");
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        // diag(2,1) vs I: (√2 − 1)² + 0 = 3 − 2√2
        let c = stats(&[0.0, 0.0], &[2.0, 0.0, 0.0, 1.0], "x");
        assert!((frechet_distance(&c, &a).unwrap() - (3.0 - 2.0 * 2f64.sqrt())).abs() < 1e-6);
        let other = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], "y");
        assert!(matches!(frechet_distance(&a, &other), Err(Error::ExtractorMismatch(..))));
    }

    #[test]
    fn worked_miou_example() {
        // gt [[A,A],[B,B]], pred [[A,B],[B,B]]
        let (iou, mean) = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((mean - 7.0 / 12.0).abs() < 1e-15);
        let (iou, mean) = miou(&[1; 4], &[0; 4], 3).unwrap();
        assert_eq!(iou, vec![Some(0.0), Some(0.0), None]);
        assert_eq!(mean, 0.0);
        assert!(miou(&[0, 1], &[0], 2).is_err());
        assert!(miou(&[5], &[0], 2).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let labels = [0, 2, 2, 1, 0, 2];
        let (iou, mean) = miou(&labels, &labels, 4).unwrap();
        assert_eq!(iou, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(mean, 1.0);
    }

    fn random_images(n: usize, res: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([n, 3, res, res], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn fid_of_identical_sets_is_zero_and_cached() {
        let ex = StubExtractor::new(16);
        let set = vec![random_images(20, 16, 1), random_images(12, 16, 2)];
        let cache = StatsCache::in_memory();
        assert!(fid(&set, &set, &ex, Some(&cache)).unwrap() < 1e-4);
        assert_eq!(cache.mem.lock().unwrap().len(), 1);
    }

    #[test]
    fn disk_cache_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ex = StubExtractor::new(8);
        let set = vec![random_images(10, 8, 3)];
        let a = feature_stats(&set, &ex, Some(&StatsCache::on_disk(dir.path()))).unwrap();
        let b = feature_stats(&set, &ex, Some(&StatsCache::on_disk(dir.path()))).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read_dir(dir.path().join("fidstats")).unwrap().count(), 1);
    }

    #[test]
    fn stub_extractor_rejects_gray() {
        let ex = StubExtractor::new(4);
        let t = Tensor::<f32>::zeros([1, 1, 8, 8]);
        assert!(FeatureExtractor::<f32>::extract(&ex, &t).is_err());
    }

    #[test]
    fn report_upsert_replaces_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = |variant: &str, fid: f64| MetricRow {
            dataset: "synthetic".into(),
            task: "s2p".into(),
            baseline: "unpaired".into(),
            variant: variant.into(),
            fid: Some(fid),
            miou: None,
            n_images: 4,
            extractor_id: "stub".into(),
        };
        upsert_report(&path, &[row("binary", 3.0)]).unwrap();
        upsert_report(&path, &[row("baseline", 4.0), row("binary", 2.5)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(MetricRow::from_csv(lines[2]).unwrap(), row("binary", 2.5));
    }

    fn features(rows: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-8i32..8, d), rows)
            .prop_map(|r| r.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pooling_matches_full_set(a in features(5, 3), b in features(7, 3)) {
            let full: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
            let pooled = FeatureStats::from_features(&a, "s").unwrap().pool(&FeatureStats::from_features(&b, "s").unwrap()).unwrap();
            let direct = FeatureStats::from_features(&full, "s").unwrap();
            prop_assert_eq!(pooled.n, direct.n);
            prop_assert!((pooled.mean - &direct.mean).amax() < 1e-12);
            prop_assert!((pooled.cov - &direct.cov).amax() < 1e-10);
        }

        #[test]
        fn distance_symmetric_and_non_negative(a in features(6, 3), b in features(9, 3)) {
            let sa = FeatureStats::from_features(&a, "s").unwrap();
            let sb = FeatureStats::from_features(&b, "s").unwrap();
            let ab = frechet_distance(&sa, &sb).unwrap();
            let ba = frechet_distance(&sb, &sa).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6, "{} vs {}", ab, ba);
            prop_assert!((sa.cov.clone() - sa.cov.transpose()).amax() < 1e-6);
        }

        #[test]
        fn relabeling_permutes_iou(
            gt in proptest::collection::vec(0u16..4, 64),
            pred in proptest::collection::vec(0u16..4, 64),
            perm in Just(vec![0u16, 1, 2, 3]).prop_shuffle(),
        ) {
            let (iou, mean) = miou(&pred, &gt, 4).unwrap();
            let map = |v: &[u16]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
            let (iou2, mean2) = miou(&map(&pred), &map(&gt), 4).unwrap();
            for c in 0..4 {
                prop_assert_eq!(iou[c], iou2[perm[c] as usize]);
            }
            prop_assert!((mean - mean2).abs() < 1e-12);
        }
    }
}
