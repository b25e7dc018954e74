//! Content-addressed cache of real-image segmentation maps.
//!
//! Each image's multi-class scores live in `segcache/<image_key>.segmap`:
//! magic `ASLSEG1`, then `K`, `h`, `w` as u32 and `K·h·w` f32 scores, all
//! little-endian. The binary map is recomputed on load.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{SegBackend, SegMapVar};
use crate::archive::write_atomic;
use crate::autodiff::Graph;
use crate::domain::{ImageBatch, SegKind, SegmentationMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEGMAP_MAGIC: &[u8; 7] = b"ASLSEG1";
const HEADER: usize = 7 + 12;

/// Decoded entry: `K`, `h`, `w` and the scores.
type Entry = (usize, usize, usize, Vec<f32>);

/// Hex sha256 over one image's shape and pixel values widened to f64, so
/// the key does not depend on the scalar type the image was loaded as.
pub fn image_key<T: Scalar>(image: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    for d in image.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in image.data() {
        h.update(v.to_f64_lossless().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub corrupt: usize,
}

pub struct SegCache {
    dir: PathBuf,
    stats: Mutex<CacheStats>,
}

impl SegCache {
    /// Cache rooted at `<root>/segcache`.
    pub fn new(root: &Path) -> Self {
        Self { dir: root.join("segcache"), stats: Mutex::default() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock().unwrap()
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.segmap"))
    }

    /// Multi-class and binary maps for a batch of real images. Images
    /// missing from the cache go through the backend in one batch.
    pub fn segment_cached<T: Scalar>(
        &self,
        backend: &SegBackend<T>,
        batch: &ImageBatch<T>,
    ) -> Result<(SegmentationMap<T>, SegmentationMap<T>)> {
        let n = batch.len();
        let images: Vec<Tensor<T>> = (0..n).map(|i| batch.tensor().narrow_batch(i, 1)).collect::<Result<_>>()?;
        let keys: Vec<String> = images.iter().map(image_key).collect();
        let mut found: Vec<Option<Entry>> = Vec::with_capacity(n);
        for key in &keys {
            found.push(self.lookup(key, backend.class_count()));
        }
        let missing: Vec<usize> = (0..n).filter(|&i| found[i].is_none()).collect();
        {
            let mut s = self.stats.lock().unwrap();
            s.hits += n - missing.len();
            s.misses += missing.len();
        }
        if !missing.is_empty() {
            let sub: Vec<Tensor<T>> = missing.iter().map(|&i| images[i].clone()).collect();
            let sub = ImageBatch::with_range(Tensor::stack(&sub, true)?, batch.domain(), batch.range())?;
            let map = backend.segment(&sub)?;
            let (_, k, mh, mw) = map.scores().dims4()?;
            let per = k * mh * mw;
            for (j, &i) in missing.iter().enumerate() {
                let scores: Vec<f32> =
                    map.scores().data()[j * per..(j + 1) * per].iter().map(|v| v.to_f64_lossless() as f32).collect();
                self.store(&keys[i], k, mh, mw, &scores)?;
                found[i] = Some((k, mh, mw, scores));
            }
        }
        let (k, mh, mw, _) = found[0].as_ref().map(|e| (e.0, e.1, e.2, ())).unwrap();
        let mut data = Vec::with_capacity(n * k * mh * mw);
        for e in found {
            let (ek, eh, ew, scores) = e.unwrap();
            if (ek, eh, ew) != (k, mh, mw) {
                return Err(Error::Shape("cached maps of one batch differ in shape".into()));
            }
            data.extend(scores.into_iter().map(|v| T::lit(v as f64)));
        }
        let multi = SegmentationMap::new(Tensor::from_vec([n, k, mh, mw], data)?, SegKind::Multiclass)?;
        let g = Graph::new();
        let binary = backend.collapse(SegMapVar::constant(&g, &multi))?.to_map()?;
        Ok((multi, binary))
    }

    fn lookup(&self, key: &str, class_count: usize) -> Option<Entry> {
        let path = self.entry_path(key);
        let bytes = fs::read(&path).ok()?;
        match decode(&bytes, class_count) {
            Ok(entry) => Some(entry),
            Err(e) => {
                log::warn!("{}: {e}; recomputing", path.display());
                self.stats.lock().unwrap().corrupt += 1;
                None
            }
        }
    }

    fn store(&self, key: &str, k: usize, h: usize, w: usize, scores: &[f32]) -> Result<()> {
        write_atomic(&self.entry_path(key), &encode(k, h, w, scores))
    }
}

pub(crate) fn encode(k: usize, h: usize, w: usize, scores: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + scores.len() * 4);
    out.extend_from_slice(SEGMAP_MAGIC);
    for d in [k, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in scores {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses and validates one record. The format carries no checksum, so
/// integrity is judged from the magic, the declared sizes and the
/// per-pixel normalization of the scores.
pub(crate) fn decode(bytes: &[u8], class_count: usize) -> Result<(usize, usize, usize, Vec<f32>)> {
    let corrupt = |m: String| Error::CacheCorrupt(m);
    if bytes.len() < HEADER || &bytes[..7] != SEGMAP_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
    let (k, h, w) = (dim(0), dim(1), dim(2));
    if k != class_count {
        return Err(corrupt(format!("{k} classes, backend has {class_count}")));
    }
    let n = k * h * w;
    if bytes.len() != HEADER + 4 * n {
        return Err(corrupt(format!("length {} does not match {k}x{h}x{w}", bytes.len())));
    }
    let scores: Vec<f32> =
        bytes[HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let hw = h * w;
    for p in 0..hw {
        let mut sum = 0.0f64;
        for c in 0..k {
            let v = scores[c * hw + p];
            // negated so NaN is rejected too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(v >= 0.0) {
                return Err(corrupt(format!("invalid score {v}")));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(corrupt(format!("pixel {p} scores sum to {sum}")));
        }
    }
    Ok((k, h, w, scores))
}
