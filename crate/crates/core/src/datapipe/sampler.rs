//! Epoch plans and batch loading.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use super::manifest::{stem, DatasetManifest, Layout, Split};
use super::{load_color, load_gray, load_mask, mask_path};
use crate::config::{Seeds, Stream, Task};
use crate::domain::{Domain, ImageBatch, Pairing};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Paired,
    Unpaired,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Paired => "paired",
            SampleMode::Unpaired => "unpaired",
        }
    }
}

/// Indices into the source and target file lists for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// The batches of one epoch. Paired mode shares one permutation between
/// the sides. Unpaired mode draws independent permutations; the epoch
/// spans the larger side and the smaller side repeats fresh permutations.
/// The last batch may be partial.
pub fn epoch_plan(n_x: usize, n_y: usize, batch: usize, mode: SampleMode, seeds: &Seeds, epoch: usize) -> Vec<BatchPlan> {
    let batch = batch.max(1);
    let mut rng = seeds.epoch_stream(Stream::Shuffle, epoch);
    let mut perm = |n: usize, len: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            out.extend(p);
        }
        out.truncate(len);
        out
    };
    let (xs, ys) = match mode {
        SampleMode::Paired => {
            let p = perm(n_x.min(n_y), n_x.min(n_y));
            (p.clone(), p)
        }
        SampleMode::Unpaired => {
            let len = n_x.max(n_y);
            if n_x == 0 || n_y == 0 {
                (Vec::new(), Vec::new())
            } else {
                (perm(n_x, len), perm(n_y, len))
            }
        }
    };
    xs.chunks(batch).zip(ys.chunks(batch)).map(|(x, y)| BatchPlan { x: x.to_vec(), y: y.to_vec() }).collect()
}

/// Batches over `0..n` in order, for evaluation.
pub fn sequential_plan(n: usize, batch: usize) -> Vec<BatchPlan> {
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch.max(1)).map(|c| BatchPlan { x: c.to_vec(), y: c.to_vec() }).collect()
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub x: ImageBatch<T>,
    pub y: ImageBatch<T>,
    pub pairing: Pairing,
    pub x_stems: Vec<String>,
    pub y_stems: Vec<String>,
}

/// A dataset folder with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        manifest.verify(root)?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn len(&self, split: Split, target: bool) -> usize {
        let f = self.manifest.files(split);
        if target {
            f.b.len()
        } else {
            f.a.len()
        }
    }

    pub fn path(&self, split: Split, target: bool, index: usize) -> PathBuf {
        let f = self.manifest.files(split);
        let name = if target { &f.b[index] } else { &f.a[index] };
        split.dir(&self.root, target).join(name)
    }

    pub fn check_mode(&self, mode: SampleMode) -> Result<()> {
        if mode == SampleMode::Paired && self.manifest.layout == Layout::UnpairedAb {
            return Err(Error::LayoutModeMismatch {
                layout: self.manifest.layout.as_str().into(),
                mode: mode.as_str().into(),
            });
        }
        Ok(())
    }

    pub fn plan(&self, split: Split, batch: usize, mode: SampleMode, seeds: &Seeds, epoch: usize) -> Result<Vec<BatchPlan>> {
        self.check_mode(mode)?;
        Ok(epoch_plan(self.len(split, false), self.len(split, true), batch, mode, seeds, epoch))
    }

    fn source_domain(&self) -> Domain {
        match self.manifest.task {
            Task::Sketch2Photo => Domain::Sketch,
            Task::Label2Photo => Domain::LabelMap,
        }
    }

    pub fn load_source<T: Scalar>(&self, split: Split, index: usize, resolution: usize) -> Result<Tensor<T>> {
        let path = self.path(split, false, index);
        match self.manifest.task {
            Task::Sketch2Photo => load_gray(&path, resolution),
            Task::Label2Photo => load_color(&path, resolution),
        }
    }

    pub fn load_target<T: Scalar>(&self, split: Split, index: usize, resolution: usize) -> Result<Tensor<T>> {
        load_color(&self.path(split, true, index), resolution)
    }

    /// Ground-truth class mask of a target image, if one was shipped.
    pub fn load_target_mask(&self, split: Split, index: usize, resolution: usize) -> Result<Option<Vec<u16>>> {
        let path = mask_path(&self.path(split, true, index));
        if !path.is_file() {
            return Ok(None);
        }
        load_mask(&path, resolution).map(Some)
    }

    pub fn load<T: Scalar>(&self, split: Split, plan: &BatchPlan, mode: SampleMode, resolution: usize) -> Result<Sample<T>> {
        self.check_mode(mode)?;
        let xs: Vec<Tensor<T>> = plan.x.iter().map(|&i| self.load_source(split, i, resolution)).collect::<Result<_>>()?;
        let ys: Vec<Tensor<T>> = plan.y.iter().map(|&i| self.load_target(split, i, resolution)).collect::<Result<_>>()?;
        let f = self.manifest.files(split);
        Ok(Sample {
            x: ImageBatch::new(Tensor::stack(&xs, true)?, self.source_domain())?,
            y: ImageBatch::new(Tensor::stack(&ys, true)?, Domain::Color)?,
            pairing: match mode {
                SampleMode::Paired => Pairing::Aligned,
                SampleMode::Unpaired => Pairing::Independent,
            },
            x_stems: plan.x.iter().map(|&i| stem(&f.a[i]).to_string()).collect(),
            y_stems: plan.y.iter().map(|&i| stem(&f.b[i]).to_string()).collect(),
        })
    }
}

/// Loads the batches of a plan on a background thread, at most `depth`
/// ahead of the consumer. Delivery order is the plan order.
pub struct Prefetcher<T> {
    inline: Option<(Dataset, Split, SampleMode, usize, std::vec::IntoIter<BatchPlan>)>,
    rx: Option<Receiver<Result<Sample<T>>>>,
    worker: Option<JoinHandle<()>>,
}

impl<T: Scalar> Prefetcher<T> {
    pub fn new(dataset: Dataset, split: Split, plans: Vec<BatchPlan>, mode: SampleMode, resolution: usize, depth: usize) -> Self {
        if depth == 0 {
            return Self { inline: Some((dataset, split, mode, resolution, plans.into_iter())), rx: None, worker: None };
        }
        let (tx, rx) = sync_channel(depth);
        let worker = std::thread::spawn(move || {
            for plan in plans {
                let item = dataset.load::<T>(split, &plan, mode, resolution);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        Self { inline: None, rx: Some(rx), worker: Some(worker) }
    }
}

impl<T: Scalar> Iterator for Prefetcher<T> {
    type Item = Result<Sample<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some((ds, split, mode, res, plans)) = &mut self.inline {
            let plan = plans.next()?;
            return Some(ds.load(*split, &plan, *mode, *res));
        }
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Unblocks a worker waiting on a full channel.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_all;
    use crate::datapipe::edges::EdgeExtractorSpec;
    use crate::datapipe::synth::{synth_dataset, SynthOptions};
    use proptest::prelude::*;

    fn toy(root: &Path, n: usize) -> Dataset {
        let opts = SynthOptions {
            name: "toy".into(),
            task: Task::Sketch2Photo,
            resolution: 8,
            n_train: n,
            n_test: 1,
            seed: 2,
            edges: EdgeExtractorSpec::gradient(0.5),
        };
        synth_dataset(root, &opts).unwrap();
        Dataset::open(root).unwrap()
    }

    #[test]
    fn paired_batch_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path(), 4);
        let plans = ds.plan(Split::Train, 4, SampleMode::Paired, &seed_all(0), 0).unwrap();
        assert_eq!(plans.len(), 1);
        let s: Sample<f32> = ds.load(Split::Train, &plans[0], SampleMode::Paired, 8).unwrap();
        assert_eq!(s.x_stems, s.y_stems);
        assert_eq!(s.pairing, Pairing::Aligned);
        assert_eq!(s.x.tensor().shape(), &[4, 1, 8, 8]);
        assert_eq!(s.y.tensor().shape(), &[4, 3, 8, 8]);
        assert!(s.y.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unpaired_layout_rejects_paired_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy(dir.path(), 2);
        ds.manifest.layout = Layout::UnpairedAb;
        let err = ds.plan(Split::Train, 2, SampleMode::Paired, &seed_all(0), 0).unwrap_err();
        assert!(matches!(err, Error::LayoutModeMismatch { .. }));
        assert!(ds.plan(Split::Train, 2, SampleMode::Unpaired, &seed_all(0), 0).is_ok());
    }

    #[test]
    fn prefetch_depth_does_not_change_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path(), 7);
        let plans = ds.plan(Split::Train, 2, SampleMode::Unpaired, &seed_all(4), 1).unwrap();
        let run = |depth: usize| -> Vec<(Vec<String>, Vec<String>)> {
            Prefetcher::<f32>::new(ds.clone(), Split::Train, plans.clone(), SampleMode::Unpaired, 8, depth)
                .map(|s| {
                    let s = s.unwrap();
                    (s.x_stems, s.y_stems)
                })
                .collect()
        };
        let base = run(0);
        assert_eq!(base.len(), 4);
        assert_eq!(run(1), base);
        assert_eq!(run(3), base);
        // abandoning a prefetcher early must not hang
        let mut p = Prefetcher::<f32>::new(ds.clone(), Split::Train, plans, SampleMode::Unpaired, 8, 1);
        p.next().unwrap().unwrap();
    }

    #[test]
    fn epoch_streams_differ_and_repeat() {
        let s = seed_all(9);
        let a = epoch_plan(10, 10, 3, SampleMode::Unpaired, &s, 0);
        assert_eq!(a, epoch_plan(10, 10, 3, SampleMode::Unpaired, &s, 0));
        assert_ne!(a, epoch_plan(10, 10, 3, SampleMode::Unpaired, &s, 1));
        assert_ne!(a.iter().map(|p| &p.x).collect::<Vec<_>>(), a.iter().map(|p| &p.y).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn unpaired_epoch_visits_every_file_once(n in 1usize..40, batch in 1usize..9, seed in any::<u64>(), epoch in 0usize..5) {
            let plans = epoch_plan(n, n, batch, SampleMode::Unpaired, &seed_all(seed), epoch);
            prop_assert_eq!(plans.len(), n.div_ceil(batch));
            for side in [0, 1] {
                let mut seen: Vec<usize> = plans.iter().flat_map(|p| if side == 0 { p.x.clone() } else { p.y.clone() }).collect();
                seen.sort();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn uneven_sides_cover_both(nx in 1usize..30, ny in 1usize..30, batch in 1usize..6) {
            let plans = epoch_plan(nx, ny, batch, SampleMode::Unpaired, &seed_all(1), 0);
            let len = nx.max(ny);
            let xs: std::collections::BTreeSet<usize> = plans.iter().flat_map(|p| p.x.clone()).collect();
            let ys: std::collections::BTreeSet<usize> = plans.iter().flat_map(|p| p.y.clone()).collect();
            prop_assert_eq!(xs.len(), nx);
            prop_assert_eq!(ys.len(), ny);
            prop_assert_eq!(plans.iter().map(|p| p.x.len()).sum::<usize>(), len);
        }

        #[test]
        fn paired_plan_aligns(n in 1usize..30, batch in 1usize..6) {
            for p in epoch_plan(n, n, batch, SampleMode::Paired, &seed_all(3), 2) {
                prop_assert_eq!(p.x, p.y);
            }
        }
    }
}
