//! Image and segmentation-map containers with their invariants checked at
//! construction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Sketch,
    Color,
    LabelMap,
}

/// Closed value interval of image tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ValueRange {
    fn default() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }
}

/// `N×C×H×W` images of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    data: Tensor<T>,
    domain: Domain,
    range: ValueRange,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Tensor<T>, domain: Domain) -> Result<Self> {
        Self::with_range(data, domain, ValueRange::default())
    }

    pub fn with_range(data: Tensor<T>, domain: Domain, range: ValueRange) -> Result<Self> {
        let (_, c, h, w) = data.dims4()?;
        if h != w {
            return Err(Error::Shape(format!("images must be square, got {h}x{w}")));
        }
        let channels_ok = match domain {
            Domain::Sketch => c == 1 || c == 3,
            Domain::Color => c == 3,
            Domain::LabelMap => c == 1 || c == 3,
        };
        if !channels_ok {
            return Err(Error::ChannelMismatch { expected: if domain == Domain::Color { 3 } else { 1 }, got: c });
        }
        let (lo, hi) = (T::lit(range.lo), T::lit(range.hi));
        if let Some(bad) = data.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Shape(format!("value {bad} outside [{}, {}]", range.lo, range.hi)));
        }
        Ok(Self { data, domain, range })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }

    /// Verifies the configured training resolution.
    pub fn expect_resolution(&self, resolution: usize) -> Result<()> {
        if self.resolution() != resolution {
            return Err(Error::Shape(format!("expected {resolution}px images, got {}px", self.resolution())));
        }
        Ok(())
    }
}

/// Whether sample `i` of a source batch corresponds to sample `i` of the
/// target batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Aligned,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegKind {
    Multiclass,
    /// Channel 0 background, channel 1 foreground.
    Binary,
}

/// Per-pixel soft class scores, `N×K×h×w`, summing to one over `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap<T> {
    scores: Tensor<T>,
    kind: SegKind,
}

/// Tolerance of the per-pixel normalization invariant.
pub const SCORE_SUM_TOL: f64 = 1e-5;

impl<T: Scalar> SegmentationMap<T> {
    pub fn new(scores: Tensor<T>, kind: SegKind) -> Result<Self> {
        let (_, k, _, _) = scores.dims4()?;
        if kind == SegKind::Binary && k != 2 {
            return Err(Error::KindMismatch(format!("binary map needs 2 channels, got {k}")));
        }
        let map = Self { scores, kind };
        if let Some(err) = map.normalization_error() {
            return Err(Error::Shape(format!("scores do not form a distribution per pixel (max error {err})")));
        }
        Ok(map)
    }

    /// Largest deviation of a per-pixel sum from 1, or of a score from
    /// `[0, 1]`; `None` when within tolerance.
    pub fn normalization_error(&self) -> Option<f64> {
        let worst = pixel_sums(&self.scores)
            .into_iter()
            .map(|s| (s - 1.0).abs())
            .chain(self.scores.data().iter().map(|v| {
                let v = v.to_f64_lossless();
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    (-v).max(0.0)
                }
            }))
            .fold(0.0f64, f64::max);
        (worst > SCORE_SUM_TOL).then_some(worst)
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn kind(&self) -> SegKind {
        self.kind
    }

    pub fn class_count(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Per-pixel argmax labels, `N×h×w` flattened.
    pub fn argmax(&self) -> Vec<u16> {
        argmax_channels(&self.scores)
    }
}

pub(crate) fn pixel_sums<T: Scalar>(scores: &Tensor<T>) -> Vec<f64> {
    let s = scores.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = scores.data();
    let mut out = vec![0.0; n * hw];
    for b in 0..n {
        for c in 0..k {
            for p in 0..hw {
                out[b * hw + p] += d[(b * k + c) * hw + p].to_f64_lossless();
            }
        }
    }
    out
}

/// Index of the largest channel at every pixel (first wins ties).
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Vec<u16> {
    let s = scores.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u16);
        }
    }
    out
}
