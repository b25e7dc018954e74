//! Synthetic shape scenes with exact class masks.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::Rng;

use super::edges::{edge_to_sketch, EdgeExtractor, EdgeExtractorSpec};
use super::manifest::{DatasetManifest, Layout, Split, SplitFiles};
use super::{mask_path, save_mask, save_png};
use crate::config::{seed_all, Stream, Task};
use crate::error::{Error, Result};
use crate::segbackend::PALETTE;

const SKY: u8 = 0;
const GRASS: u8 = 1;
const SAND: u8 = 2;
const WALL: u8 = 3;
const THINGS: [u8; 4] = [4, 5, 6, 7];
/// Per-pixel colour jitter of the background texture.
const TEXTURE: i32 = 10;

pub struct SynthScene {
    pub image: RgbImage,
    pub mask: GrayImage,
}

/// A horizon splits sky or wall from grass or sand; one to three solid
/// objects are drawn on top.
pub fn render_scene<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SynthScene {
    let s = size as f64;
    let horizon = (s * rng.random_range(0.35..0.65)) as usize;
    let top = if rng.random_bool(0.5) { SKY } else { WALL };
    let bottom = if rng.random_bool(0.5) { GRASS } else { SAND };
    let mut mask = GrayImage::from_fn(size as u32, size as u32, |_, y| image::Luma([if (y as usize) < horizon { top } else { bottom }]));
    for _ in 0..rng.random_range(1..=3) {
        let class = THINGS[rng.random_range(0..THINGS.len())];
        let (rw, rh) = (s * rng.random_range(0.08..0.2), s * rng.random_range(0.08..0.2));
        let (cx, cy) = (s * rng.random_range(0.2..0.8), s * rng.random_range(0.3..0.8));
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rw, (y as f64 + 0.5 - cy) / rh);
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    mask.put_pixel(x as u32, y as u32, image::Luma([class]));
                }
            }
        }
    }
    let image = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let base = PALETTE[mask.get_pixel(x, y)[0] as usize].rgb;
        image::Rgb(base.map(|c| (c as i32 + rng.random_range(-TEXTURE..=TEXTURE)).clamp(0, 255) as u8))
    });
    SynthScene { image, mask }
}

/// Flat palette rendering of a class mask.
pub fn render_label_map(mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| image::Rgb(PALETTE[mask.get_pixel(x, y)[0] as usize].rgb))
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub name: String,
    pub task: Task,
    pub resolution: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Sketch extraction for the sketch task.
    pub edges: EdgeExtractorSpec,
}

/// Writes a paired four-folder dataset under `root`, replacing any earlier
/// split folders.
pub fn synth_dataset(root: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    if opts.n_train == 0 || opts.n_test == 0 {
        return Err(Error::EmptyResult("synthetic dataset needs at least one image per split".into()));
    }
    let extractor = EdgeExtractor::new(opts.edges.clone())?;
    let mut rng = seed_all(opts.seed).stream(Stream::Synth);
    let mut manifest = DatasetManifest {
        name: opts.name.clone(),
        task: opts.task,
        layout: Layout::PairedAb,
        resolution: opts.resolution,
        source_dir: "synthetic".into(),
        train: SplitFiles::default(),
        test: SplitFiles::default(),
    };
    let mut index = 0;
    for (split, n) in [(Split::Train, opts.n_train), (Split::Test, opts.n_test)] {
        let (dir_a, dir_b) = (split.dir(root, false), split.dir(root, true));
        reset_dir(&dir_a)?;
        reset_dir(&dir_b)?;
        let mut files = SplitFiles::default();
        for _ in 0..n {
            let scene = render_scene(opts.resolution, &mut rng);
            let file = format!("scene_{index:05}.png");
            index += 1;
            let source = match opts.task {
                Task::Sketch2Photo => {
                    image::DynamicImage::ImageLuma8(edge_to_sketch(&extractor.extract(&scene.image, None)?))
                }
                Task::Label2Photo => image::DynamicImage::ImageRgb8(render_label_map(&scene.mask)),
            };
            save_png(&dir_a.join(&file), &source)?;
            let target = dir_b.join(&file);
            save_png(&target, &image::DynamicImage::ImageRgb8(scene.image))?;
            save_mask(&mask_path(&target), &scene.mask)?;
            files.a.push(file.clone());
            files.b.push(file);
        }
        match split {
            Split::Train => manifest.train = files,
            Split::Test => manifest.test = files,
        }
    }
    manifest.save(root)?;
    Ok(manifest)
}

pub(crate) fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
