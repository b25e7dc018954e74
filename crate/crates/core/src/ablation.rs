//! Sweep of the segmentation loss weights, ranked by test FID.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{validate_config, Config, ConfigError};
use crate::datapipe::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{generator_fid, FeatureExtractor, StatsCache};
use crate::networks::Role;
use crate::scalar::Scalar;
use crate::segbackend::SegBackend;
use crate::training::{load_generator, train, TrainOptions};

pub const DEFAULT_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];
pub const ABLATION_REPORT: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPoint {
    pub w_b: f64,
    pub w_m: f64,
    pub fid: f64,
    /// Relative to the sweep's output folder.
    pub checkpoint: PathBuf,
}

/// Config of one grid point. The weight goes to every segmentation term
/// the variant uses; unused terms stay at zero.
pub fn grid_config(base: &Config, w: f64) -> Result<Config> {
    let mut cfg = base.clone();
    if !(cfg.objective.variant.uses_binary() || cfg.objective.variant.uses_multiclass()) {
        return Err(Error::ConfigInvalid(vec![ConfigError::InvalidValue {
            key: "objective.variant",
            reason: "weight ablation needs a variant with a segmentation term".into(),
        }]));
    }
    if cfg.objective.variant.uses_binary() {
        cfg.objective.w_b = w;
    }
    if cfg.objective.variant.uses_multiclass() {
        cfg.objective.w_m = w;
    }
    validate_config(cfg).map_err(Error::ConfigInvalid)
}

pub fn point_dir(out: &Path, w: f64) -> PathBuf {
    out.join("ablation").join(format!("w_{w}"))
}

/// Trains one model per weight with the base seed and returns the points
/// sorted by FID, best first.
pub fn ablate_weights<T: Scalar>(
    base: &Config,
    grid: &[f64],
    dataset: &Dataset,
    backend: &SegBackend<T>,
    extractor: &dyn FeatureExtractor<T>,
    out_dir: &Path,
    cache_root: &Path,
) -> Result<Vec<AblationPoint>> {
    if grid.is_empty() {
        return Err(Error::ConfigInvalid(vec![ConfigError::InvalidValue { key: "grid", reason: "empty weight grid".into() }]));
    }
    let stats = StatsCache::on_disk(cache_root);
    let mut points = Vec::with_capacity(grid.len());
    for &w in grid {
        let cfg = grid_config(base, w)?;
        let dir = point_dir(out_dir, w);
        let opts = TrainOptions { out_dir: dir.clone(), cache_root: cache_root.to_path_buf(), ..Default::default() };
        let outcome = train(&cfg, dataset, backend, &opts, &mut |_| Ok(()))?;
        let ckpt = outcome.checkpoint.ok_or_else(|| Error::Checkpoint("training wrote no checkpoint".into()))?;
        let (g, _) = load_generator::<T>(&ckpt, Role::G)?;
        let fid = generator_fid(&g, dataset, cfg.run.resolution, extractor, Some(&stats))?;
        log::info!("ablation w={w}: fid {fid:.4}");
        let rel = ckpt.strip_prefix(out_dir).map(Path::to_path_buf).unwrap_or(ckpt);
        points.push(AblationPoint { w_b: cfg.objective.w_b, w_m: cfg.objective.w_m, fid, checkpoint: rel });
    }
    points.sort_by(|a, b| a.fid.total_cmp(&b.fid).then(a.w_b.total_cmp(&b.w_b)).then(a.w_m.total_cmp(&b.w_m)));
    Ok(points)
}

pub fn ablation_table(points: &[AblationPoint]) -> String {
    let mut s = String::from("rank,w_b,w_m,fid,checkpoint\n");
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{:.6},{}", i + 1, p.w_b, p.w_m, p.fid, p.checkpoint.display());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Baseline, Variant};
    use crate::training::tests::tiny_config;

    #[test]
    fn grid_sets_only_used_weights() {
        let c = grid_config(&tiny_config(Variant::Combined, Baseline::Unpaired), 5.0).unwrap();
        assert_eq!((c.objective.w_b, c.objective.w_m), (5.0, 5.0));
        let b = grid_config(&tiny_config(Variant::Binary, Baseline::Unpaired), 0.1).unwrap();
        assert_eq!((b.objective.w_b, b.objective.w_m), (0.1, 0.0));
        assert!(grid_config(&tiny_config(Variant::Baseline, Baseline::Unpaired), 1.0).is_err());
    }

    #[test]
    fn table_is_ranked() {
        let p = |w: f64, fid: f64| AblationPoint { w_b: w, w_m: w, fid, checkpoint: format!("ablation/w_{w}/c").into() };
        let t = ablation_table(&[p(1.0, 2.0), p(5.0, 3.5)]);
        assert_eq!(t, "rank,w_b,w_m,fid,checkpoint\n1,1,1,2.000000,ablation/w_1/c\n2,5,5,3.500000,ablation/w_5/c\n");
        assert_eq!(DEFAULT_GRID, [0.1, 0.5, 1.0, 5.0, 10.0]);
    }
}
