//! Category-filtered subsets of an annotated image collection.
//!
//! The annotation store is COCO-style JSON with `images` (`id`,
//! `file_name`), `annotations` (`image_id`, `category_id`) and
//! `categories` (`id`, `name`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Deserialize;

use super::edges::{edge_to_sketch, EdgeExtractor, EdgeExtractorSpec};
use super::manifest::{stem, DatasetManifest, Layout, Split, SplitFiles};
use super::synth::reset_dir;
use super::{read_image, save_png};
use crate::config::{seed_all, Stream, Task};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Store {
    images: Vec<StoreImage>,
    annotations: Vec<StoreAnnotation>,
    categories: Vec<StoreCategory>,
}

#[derive(Deserialize)]
struct StoreImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct StoreAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct StoreCategory {
    id: u64,
    name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitPolicy {
    /// Fraction of the shuffled images that goes to training.
    Ratio(f64),
    /// Exact train and test counts drawn from the shuffled images.
    Counts { train: usize, test: usize },
    /// Explicit stems per split, restricted to images of the category.
    Files { train: Vec<String>, test: Vec<String> },
}

/// Published train/test sizes of the evaluation datasets.
pub fn paper_split(name: &str) -> Option<(usize, usize)> {
    Some(match name {
        "bedroom" => (1355, 135),
        "cityscapes" => (2975, 500),
        "illustration" => (659, 131),
        "elephant" => (1800, 343),
        "sheep" => (1300, 229),
        _ => return None,
    })
}

/// Default policy for a dataset name: the published split if known,
/// otherwise the given ratio.
pub fn default_policy(name: &str, ratio: f64) -> SplitPolicy {
    match paper_split(name) {
        Some((train, test)) => SplitPolicy::Counts { train, test },
        None => SplitPolicy::Ratio(ratio),
    }
}

pub struct CurateRequest<'a> {
    pub annotations: &'a Path,
    pub images_dir: &'a Path,
    pub category: &'a str,
    pub out_dir: &'a Path,
    pub policy: SplitPolicy,
    pub seed: u64,
    pub resolution: usize,
    pub edges: EdgeExtractorSpec,
}

/// Copies every image annotated with the category into `trainB`/`testB`
/// and writes its sketch under the same stem into `trainA`/`testA`.
pub fn curate_by_category(req: &CurateRequest<'_>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(req.annotations).map_err(|e| Error::io(req.annotations, e))?;
    let store: Store = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", req.annotations.display())))?;
    let cat_ids: BTreeSet<u64> = store.categories.iter().filter(|c| c.name == req.category).map(|c| c.id).collect();
    if cat_ids.is_empty() {
        return Err(Error::UnknownCategory(req.category.to_string()));
    }
    let tagged: BTreeSet<u64> =
        store.annotations.iter().filter(|a| cat_ids.contains(&a.category_id)).map(|a| a.image_id).collect();
    let by_id: BTreeMap<u64, &str> = store.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
    let mut files: Vec<String> = tagged.iter().filter_map(|id| by_id.get(id)).map(|f| f.to_string()).collect();
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Error::EmptyResult(format!("no image is annotated with `{}`", req.category)));
    }
    files.shuffle(&mut seed_all(req.seed).stream(Stream::Split));
    let (train, test) = split(files, &req.policy)?;

    let extractor = EdgeExtractor::new(req.edges.clone())?;
    let mut manifest = DatasetManifest {
        name: req.category.to_string(),
        task: Task::Sketch2Photo,
        layout: Layout::PairedAb,
        resolution: req.resolution,
        source_dir: req.images_dir.to_string_lossy().into_owned(),
        train: SplitFiles::default(),
        test: SplitFiles::default(),
    };
    for (split, list) in [(Split::Train, train), (Split::Test, test)] {
        let (dir_a, dir_b) = (split.dir(req.out_dir, false), split.dir(req.out_dir, true));
        reset_dir(&dir_a)?;
        reset_dir(&dir_b)?;
        let mut out = SplitFiles::default();
        for file in list {
            let src = req.images_dir.join(&file);
            let name = Path::new(&file).file_name().and_then(|n| n.to_str()).unwrap_or(&file).to_string();
            fs::copy(&src, dir_b.join(&name)).map_err(|e| Error::io(&src, e))?;
            let color = read_image(&src)?.to_rgb8();
            let sketch = edge_to_sketch(&extractor.extract(&color, Some(req.resolution))?);
            let sketch_name = format!("{}.png", stem(&name));
            save_png(&dir_a.join(&sketch_name), &image::DynamicImage::ImageLuma8(sketch))?;
            out.a.push(sketch_name);
            out.b.push(name);
        }
        // Listing order follows the folders, so reruns compare equal.
        out.a.sort();
        out.b.sort();
        match split {
            Split::Train => manifest.train = out,
            Split::Test => manifest.test = out,
        }
    }
    manifest.save(req.out_dir)?;
    Ok(manifest)
}

fn split(files: Vec<String>, policy: &SplitPolicy) -> Result<(Vec<String>, Vec<String>)> {
    let n = files.len();
    match policy {
        SplitPolicy::Ratio(r) => {
            let mut k = (n as f64 * r.clamp(0.0, 1.0)).round() as usize;
            if k == n && n > 1 && *r < 1.0 {
                k = n - 1;
            }
            let mut files = files;
            let test = files.split_off(k);
            Ok((files, test))
        }
        SplitPolicy::Counts { train, test } => {
            if train + test > n {
                return Err(Error::EmptyResult(format!("{n} images available, split needs {}", train + test)));
            }
            Ok((files[..*train].to_vec(), files[*train..train + test].to_vec()))
        }
        SplitPolicy::Files { train, test } => {
            let pick = |wanted: &[String]| -> Vec<String> {
                let wanted: BTreeSet<&str> = wanted.iter().map(|s| stem(s)).collect();
                files.iter().filter(|f| wanted.contains(stem(f))).cloned().collect()
            };
            Ok((pick(train), pick(test)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    /// Ten images; ids 0, 3, 4 and 8 carry an elephant, 4 twice.
    fn toy_store(dir: &Path) -> std::path::PathBuf {
        let images = dir.join("images");
        fs::create_dir_all(&images).unwrap();
        let mut imgs = Vec::new();
        for i in 0..10u8 {
            let img = RgbImage::from_fn(8, 8, |x, _| image::Rgb([i * 20, (x * 30) as u8, 5]));
            img.save(images.join(format!("im{i}.png"))).unwrap();
            imgs.push(serde_json::json!({"id": i, "file_name": format!("im{i}.png")}));
        }
        let anns: Vec<_> = [(0, 1), (3, 1), (4, 1), (4, 1), (8, 1), (1, 2), (2, 2), (5, 2)]
            .iter()
            .map(|(i, c)| serde_json::json!({"image_id": i, "category_id": c}))
            .collect();
        let store = serde_json::json!({
            "images": imgs,
            "annotations": anns,
            "categories": [{"id": 1, "name": "elephant"}, {"id": 2, "name": "sheep"}],
        });
        let path = dir.join("ann.json");
        fs::write(&path, store.to_string()).unwrap();
        path
    }

    fn request<'a>(dir: &'a Path, ann: &'a Path, images: &'a Path, category: &'a str, policy: SplitPolicy) -> CurateRequest<'a> {
        CurateRequest {
            annotations: ann,
            images_dir: images,
            category,
            out_dir: dir,
            policy,
            seed: 3,
            resolution: 8,
            edges: EdgeExtractorSpec::gradient(0.0),
        }
    }

    #[test]
    fn filters_by_category() {
        let tmp = tempfile::tempdir().unwrap();
        let ann = toy_store(tmp.path());
        let images = tmp.path().join("images");
        let out = tmp.path().join("out");
        let m = curate_by_category(&request(&out, &ann, &images, "elephant", SplitPolicy::Ratio(0.75))).unwrap();
        let (tr, te) = m.split_sizes();
        assert_eq!(tr + te, 4);
        assert_eq!((tr, te), (3, 1));
        let mut all: Vec<_> = m.train.b.iter().chain(&m.test.b).cloned().collect();
        all.sort();
        assert_eq!(all, ["im0.png", "im3.png", "im4.png", "im8.png"]);
        m.verify(&out).unwrap();
    }

    #[test]
    fn deterministic_and_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let ann = toy_store(tmp.path());
        let images = tmp.path().join("images");
        let out = tmp.path().join("out");
        let req = request(&out, &ann, &images, "sheep", SplitPolicy::Counts { train: 2, test: 1 });
        let a = curate_by_category(&req).unwrap();
        let b = curate_by_category(&req).unwrap();
        assert_eq!(a, b);
        b.verify(&out).unwrap();
        let other = tmp.path().join("other");
        let c = curate_by_category(&CurateRequest { out_dir: &other, ..req }).unwrap();
        assert_eq!(a.train, c.train);
    }

    #[test]
    fn errors() {
        let tmp = tempfile::tempdir().unwrap();
        let ann = toy_store(tmp.path());
        let images = tmp.path().join("images");
        let out = tmp.path().join("out");
        let r = curate_by_category(&request(&out, &ann, &images, "giraffe", SplitPolicy::Ratio(0.9)));
        assert!(matches!(r, Err(Error::UnknownCategory(_))));
        let store = serde_json::json!({"images": [], "annotations": [], "categories": [{"id": 1, "name": "car"}]});
        fs::write(&ann, store.to_string()).unwrap();
        let r = curate_by_category(&request(&out, &ann, &images, "car", SplitPolicy::Ratio(0.9)));
        assert!(matches!(r, Err(Error::EmptyResult(_))));
    }

    #[test]
    fn explicit_file_lists() {
        let tmp = tempfile::tempdir().unwrap();
        let ann = toy_store(tmp.path());
        let images = tmp.path().join("images");
        let out = tmp.path().join("out");
        let policy = SplitPolicy::Files { train: vec!["im0".into(), "im3".into(), "im1".into()], test: vec!["im8.jpg".into()] };
        let m = curate_by_category(&request(&out, &ann, &images, "elephant", policy)).unwrap();
        assert_eq!(m.train.b, ["im0.png", "im3.png"]);
        assert_eq!(m.test.b, ["im8.png"]);
    }

    #[test]
    fn published_splits() {
        assert_eq!(paper_split("bedroom"), Some((1355, 135)));
        assert_eq!(paper_split("cityscapes"), Some((2975, 500)));
        assert_eq!(paper_split("illustration"), Some((659, 131)));
        assert_eq!(paper_split("elephant"), Some((1800, 343)));
        assert_eq!(paper_split("sheep"), Some((1300, 229)));
        assert_eq!(default_policy("mine", 0.9), SplitPolicy::Ratio(0.9));
    }
}
