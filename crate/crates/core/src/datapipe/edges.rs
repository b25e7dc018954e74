//! Sketch synthesis from color photos.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{resize_rgb, rgb_to_tensor};
use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::autodiff::{Binding, Graph};
use crate::config::{DataConfig, EdgeMethod};
use crate::error::{Error, Result};
use crate::nn::ConvStack;
use crate::tensor::Tensor;

pub const HED_MAGIC: [u8; 8] = *b"ASLHEDW\0";

const XDOG_K: f64 = 1.6;
const XDOG_TAU: f64 = 0.98;
const XDOG_PHI: f64 = 10.0;
const XDOG_EPS: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeExtractorSpec {
    pub method: EdgeMethod,
    /// Gaussian smoothing. For XDoG this is the inner scale and 0 means 1.
    pub sigma: f64,
    pub binarize: bool,
    pub threshold: f64,
    /// Weight file of the pretrained detector.
    pub weights: Option<String>,
}

impl EdgeExtractorSpec {
    pub fn gradient(sigma: f64) -> Self {
        Self { method: EdgeMethod::Gradient, sigma, binarize: false, threshold: 0.2, weights: None }
    }

    pub fn from_config(d: &DataConfig) -> Self {
        Self {
            method: d.edge_method,
            sigma: d.edge_sigma,
            binarize: d.edge_binarize,
            threshold: d.edge_threshold,
            weights: (!d.edge_weights.is_empty()).then(|| d.edge_weights.clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HedMeta {
    layers: usize,
}

/// A ready extractor; the pretrained variant holds its loaded network.
pub struct EdgeExtractor {
    spec: EdgeExtractorSpec,
    hed: Option<ConvStack<f64>>,
}

impl EdgeExtractor {
    pub fn new(spec: EdgeExtractorSpec) -> Result<Self> {
        let hed = match spec.method {
            EdgeMethod::Hed => {
                let path = spec
                    .weights
                    .as_deref()
                    .ok_or_else(|| Error::MissingWeights("pretrained edge detector needs a weight file".into()))?;
                let path = Path::new(path);
                if !path.is_file() {
                    return Err(Error::MissingWeights(format!("no edge detector weights at {}", path.display())));
                }
                let r = ArchiveReader::open(path, HED_MAGIC)?;
                let meta: HedMeta = r.meta()?;
                let stack = ConvStack::from_archive(&r, meta.layers)?;
                if stack.in_channels() != 3 || stack.out_channels() != 1 {
                    return Err(Error::Checkpoint("edge detector must map 3 channels to 1".into()));
                }
                Some(stack)
            }
            _ => None,
        };
        Ok(Self { spec, hed })
    }

    pub fn spec(&self) -> &EdgeExtractorSpec {
        &self.spec
    }

    /// Edge strength in `[0, 1]` as `[1, 1, r, r]`, where `r` is the
    /// requested resolution or the input width.
    pub fn extract(&self, img: &RgbImage, resolution: Option<usize>) -> Result<Tensor<f64>> {
        let img = match resolution {
            Some(r) => resize_rgb(img.clone(), r),
            None => img.clone(),
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut edge = match self.spec.method {
            EdgeMethod::Gradient => gradient_magnitude(&luminance(&img), w, h, self.spec.sigma),
            EdgeMethod::Xdog => xdog(&luminance(&img), w, h, self.spec.sigma),
            EdgeMethod::Hed => self.hed_forward(&img)?,
        };
        if self.spec.binarize {
            for v in &mut edge {
                *v = if *v >= self.spec.threshold { 1.0 } else { 0.0 };
            }
        }
        Tensor::from_vec([1, 1, h, w], edge)
    }

    fn hed_forward(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let stack = self.hed.as_ref().expect("loaded in new");
        let g = Graph::new();
        let out = stack.forward(&g, g.input(rgb_to_tensor::<f64>(img)), Binding::Frozen)?.sigmoid();
        let v = out.value().data().to_vec();
        Ok(v)
    }
}

/// Writes a pretrained-format weight file for the edge detector.
pub fn save_hed_weights(path: &Path, stack: &ConvStack<f64>) -> Result<()> {
    let mut w = ArchiveWriter::new::<f64>(HED_MAGIC, &HedMeta { layers: stack.layers.len() })?;
    stack.write_into(&mut w);
    w.write_atomic(path)
}

/// One edge map per image, each computed independently.
pub fn extract_edges(images: &[RgbImage], spec: &EdgeExtractorSpec, resolution: Option<usize>) -> Result<Vec<Tensor<f64>>> {
    let ex = EdgeExtractor::new(spec.clone())?;
    images.iter().map(|img| ex.extract(img, resolution)).collect()
}

/// Dark strokes on white paper.
pub fn edge_to_sketch(edge: &Tensor<f64>) -> GrayImage {
    let s = edge.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = edge.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let e = d[y as usize * w + x as usize].clamp(0.0, 1.0);
        image::Luma([(255.0 * (1.0 - e)).round() as u8])
    })
}

fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Forward-difference gradient magnitude, scaled so the maximum is 1.
fn gradient_magnitude(lum: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let s = blur(lum, w, h, sigma);
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = if x + 1 < w { s[i + 1] - s[i] } else { 0.0 };
            let gy = if y + 1 < h { s[i + w] - s[i] } else { 0.0 };
            mag[i] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    // Below this the image is flat up to rounding.
    if max > 1e-9 {
        mag.iter_mut().for_each(|v| *v /= max);
    } else {
        mag.iter_mut().for_each(|v| *v = 0.0);
    }
    mag
}

fn xdog(lum: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let g1 = blur(lum, w, h, sigma);
    let g2 = blur(lum, w, h, XDOG_K * sigma);
    g1.iter()
        .zip(&g2)
        .map(|(a, b)| {
            let d = a - XDOG_TAU * b;
            let v = if d >= XDOG_EPS { 1.0 } else { 1.0 + (XDOG_PHI * (d - XDOG_EPS)).tanh() };
            (1.0 - v).clamp(0.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tone(w: u32, boundary: u32) -> RgbImage {
        RgbImage::from_fn(w, w, |x, _| if x < boundary { image::Rgb([20, 40, 60]) } else { image::Rgb([220, 200, 180]) })
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = RgbImage::from_pixel(16, 16, image::Rgb([90, 10, 200]));
        for method in [EdgeMethod::Gradient, EdgeMethod::Xdog] {
            let spec = EdgeExtractorSpec { method, ..EdgeExtractorSpec::gradient(1.5) };
            let e = &extract_edges(std::slice::from_ref(&img), &spec, None).unwrap()[0];
            assert!(e.data().iter().all(|&v| v == 0.0), "{method:?}");
        }
    }

    #[test]
    fn step_image_responds_on_boundary_column_only() {
        // Forward difference of a step between columns b-1 and b is nonzero
        // exactly at x = b-1 and, normalized by its own maximum, equals 1.
        let (w, b) = (12usize, 5usize);
        let e = &extract_edges(&[two_tone(w as u32, b as u32)], &EdgeExtractorSpec::gradient(0.0), None).unwrap()[0];
        for y in 0..w {
            for x in 0..w {
                let expect = if x == b - 1 { 1.0 } else { 0.0 };
                assert_eq!(e.data()[y * w + x], expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn smoothing_keeps_peak_at_boundary() {
        let (w, b) = (24usize, 11usize);
        let e = &extract_edges(&[two_tone(w as u32, b as u32)], &EdgeExtractorSpec::gradient(1.0), None).unwrap()[0];
        let row = &e.data()[3 * w..4 * w];
        let argmax = (0..w).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        assert!(argmax == b - 1 || argmax == b);
        assert!(row[0] < 1e-6 && row[w - 1] < 1e-6);
    }

    #[test]
    fn output_is_resized() {
        let img = two_tone(512, 200);
        let e = &extract_edges(&[img], &EdgeExtractorSpec::gradient(1.0), Some(256)).unwrap()[0];
        assert_eq!(e.shape(), &[1, 1, 256, 256]);
    }

    #[test]
    fn binarized_output_is_zero_or_one() {
        let spec = EdgeExtractorSpec { binarize: true, threshold: 0.5, ..EdgeExtractorSpec::gradient(1.0) };
        let e = &extract_edges(&[two_tone(16, 7)], &spec, None).unwrap()[0];
        assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(e.data().contains(&1.0));
    }

    #[test]
    fn hed_without_weights_is_an_error() {
        let spec = EdgeExtractorSpec { method: EdgeMethod::Hed, ..EdgeExtractorSpec::gradient(1.0) };
        assert!(matches!(EdgeExtractor::new(spec.clone()), Err(Error::MissingWeights(_))));
        let spec = EdgeExtractorSpec { weights: Some("/nonexistent/hed.bin".into()), ..spec };
        assert!(matches!(EdgeExtractor::new(spec), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn hed_with_weights_runs() {
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let stack = ConvStack {
            layers: vec![
                crate::nn::Conv2d::new("layer0", 3, 4, 3, 1, 1, 0.3, &mut rng),
                crate::nn::Conv2d::new("layer1", 4, 1, 3, 1, 1, 0.3, &mut rng),
            ],
        };
        let path = dir.path().join("hed.bin");
        save_hed_weights(&path, &stack).unwrap();
        let spec = EdgeExtractorSpec {
            method: EdgeMethod::Hed,
            weights: Some(path.to_string_lossy().into()),
            ..EdgeExtractorSpec::gradient(0.0)
        };
        let e = &extract_edges(&[two_tone(8, 3)], &spec, None).unwrap()[0];
        assert_eq!(e.shape(), &[1, 1, 8, 8]);
        assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sketch_is_inverted_edge() {
        let e = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(edge_to_sketch(&e).as_raw(), &[255, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn edges_in_unit_interval_and_order_independent(
            pixels in proptest::collection::vec(any::<u8>(), 2 * 3 * 8 * 8),
            xdog_method in any::<bool>(),
            sigma in 0.0f64..2.0,
        ) {
            let a = RgbImage::from_raw(8, 8, pixels[..192].to_vec()).unwrap();
            let b = RgbImage::from_raw(8, 8, pixels[192..].to_vec()).unwrap();
            let method = if xdog_method { EdgeMethod::Xdog } else { EdgeMethod::Gradient };
            let spec = EdgeExtractorSpec { method, ..EdgeExtractorSpec::gradient(sigma) };
            let ab = extract_edges(&[a.clone(), b.clone()], &spec, None).unwrap();
            let ba = extract_edges(&[b, a], &spec, None).unwrap();
            prop_assert_eq!(&ab[0], &ba[1]);
            prop_assert_eq!(&ab[1], &ba[0]);
            for e in &ab {
                prop_assert_eq!(e.shape(), &[1, 1, 8, 8]);
                prop_assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
