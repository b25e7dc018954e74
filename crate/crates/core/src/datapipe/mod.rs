//! Datasets on disk: synthetic scenes, category curation, edge extraction,
//! manifests and batch sampling.
//!
//! A dataset root follows the four-folder layout `trainA/`, `trainB/`,
//! `testA/`, `testB/`, where `A` holds source images (sketches or label
//! renderings) and `B` color photos, plus `manifest.toml`. Ground-truth
//! class masks, when known, sit next to the color images as `<stem>.mask`.

mod curate;
mod edges;
mod manifest;
mod sampler;
mod synth;

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat, RgbImage};

pub use curate::{curate_by_category, default_policy, paper_split, CurateRequest, SplitPolicy};
pub use edges::{edge_to_sketch, extract_edges, save_hed_weights, EdgeExtractor, EdgeExtractorSpec, HED_MAGIC};
pub use manifest::{image_files, stem, DatasetManifest, Layout, Split, SplitFiles, MANIFEST_FILE};
pub use sampler::{epoch_plan, sequential_plan, BatchPlan, Dataset, Prefetcher, Sample, SampleMode};
pub use synth::{render_label_map, render_scene, synth_dataset, SynthOptions, SynthScene};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn to_signed_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`to_signed_unit`], rounding and clamping.
pub fn from_signed_unit(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub(crate) fn read_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).unwrap_or(ImageFormat::Png);
    Ok(image::load(Cursor::new(bytes), format)?)
}

/// Loads a color image as `[1, 3, r, r]` in `[-1, 1]`, resized to `r`.
pub fn load_color<T: Scalar>(path: &Path, resolution: usize) -> Result<Tensor<T>> {
    let img = read_image(path)?.to_rgb8();
    Ok(rgb_to_tensor(&resize_rgb(img, resolution)))
}

/// Loads a grayscale image as `[1, 1, r, r]` in `[-1, 1]`.
pub fn load_gray<T: Scalar>(path: &Path, resolution: usize) -> Result<Tensor<T>> {
    let img = read_image(path)?.to_luma8();
    let img = if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle)
    };
    let data = img.as_raw().iter().map(|&v| T::lit(to_signed_unit(v))).collect();
    Tensor::from_vec([1, 1, resolution, resolution], data)
}

pub(crate) fn resize_rgb(img: RgbImage, resolution: usize) -> RgbImage {
    if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle)
    }
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::lit(to_signed_unit(p[c]));
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("sized buffer")
}

/// Converts one `[3, h, w]` (or `[1, 3, h, w]`) tensor in `[-1, 1]` to RGB.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if t.len() != 3 * h * w {
        return Err(Error::Shape(format!("expected one 3-channel image, got {s:?}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| from_signed_unit(d[(c * h + y as usize) * w + x as usize].to_f64_lossless());
        image::Rgb([at(0), at(1), at(2)])
    }))
}

/// Converts one single-channel image in `[-1, 1]` to grayscale.
pub fn tensor_to_gray<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if t.len() != h * w {
        return Err(Error::Shape(format!("expected one 1-channel image, got {s:?}")));
    }
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([from_signed_unit(d[y as usize * w + x as usize].to_f64_lossless())])
    }))
}

pub fn save_png(path: &Path, img: &image::DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    crate::archive::write_atomic(path, &bytes)
}

/// Writes a class-index mask as an 8-bit PNG stream under any extension.
pub fn save_mask(path: &Path, mask: &GrayImage) -> Result<()> {
    save_png(path, &image::DynamicImage::ImageLuma8(mask.clone()))
}

/// Reads a class-index mask, resized by nearest neighbour to `r`.
pub fn load_mask(path: &Path, resolution: usize) -> Result<Vec<u16>> {
    let img = read_image(path)?.to_luma8();
    let img = if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Nearest)
    };
    Ok(img.as_raw().iter().map(|&v| v as u16).collect())
}

pub fn mask_path(color_path: &Path) -> std::path::PathBuf {
    color_path.with_extension("mask")
}
