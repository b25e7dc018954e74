//! Adversarial segmentation losses, the paired and unpaired baseline
//! losses, and their weighted total.
//!
//! All losses are means over batch and patch positions in minimization
//! form. The generator side uses the non-saturating adversarial term.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, Var};
use crate::config::ObjectiveConfig;
use crate::domain::{Pairing, SegKind};
use crate::error::{Error, Result};
use crate::networks::{DiscKind, Discriminator, Generator};
use crate::scalar::Scalar;
use crate::segbackend::SegMapVar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Generator,
    Discriminator,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Generator => "generator",
            Side::Discriminator => "discriminator",
        }
    }
}

/// Anything producing real/fake logits.
pub trait Critic<T: Scalar> {
    fn critic_kind(&self) -> DiscKind;
    fn logits<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>>;
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn critic_kind(&self) -> DiscKind {
        self.spec().kind
    }

    fn logits<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        self.forward(g, x, binding)
    }
}

/// Anything mapping one image domain to another.
pub trait Translator<T: Scalar> {
    fn translate<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>>;
}

impl<T: Scalar> Translator<T> for Generator<T> {
    fn translate<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        self.forward(g, x, binding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// Log-loss on logits.
    Bce,
    /// Squared distance of raw scores to the 0/1 labels.
    LeastSquares,
}

impl Criterion {
    pub fn for_images(cfg: &ObjectiveConfig) -> Self {
        if cfg.least_squares() {
            Criterion::LeastSquares
        } else {
            Criterion::Bce
        }
    }

    /// Discriminator side: real pushed towards 1, fake towards 0.
    pub fn discriminate<'g, T: Scalar>(self, real: Var<'g, T>, fake: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            Criterion::Bce => real.bce_with_logits(T::one()).add(fake.bce_with_logits(T::zero())),
            Criterion::LeastSquares => Ok(real
                .squared_error_to(T::one())
                .add(fake.squared_error_to(T::zero()))?
                .scale(T::lit(0.5))),
        }
    }

    /// Generator side: fake pushed towards 1.
    pub fn fool<'g, T: Scalar>(self, fake: Var<'g, T>) -> Var<'g, T> {
        match self {
            Criterion::Bce => fake.bce_with_logits(T::one()),
            Criterion::LeastSquares => fake.squared_error_to(T::one()),
        }
    }
}

pub(crate) fn finite<'g, T: Scalar>(v: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
    if v.value().all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(name.to_string()))
    }
}

fn bind_for(side: Side) -> Binding {
    match side {
        Side::Discriminator => Binding::Trainable,
        Side::Generator => Binding::Frozen,
    }
}

/// L_B or L_M, depending on the kind of the maps. On the discriminator side
/// the fake map is detached; on the generator side the critic is frozen
/// and gradients reach the generator through `fake` only.
pub fn seg_adversarial_loss<'g, T: Scalar, C: Critic<T> + ?Sized>(
    g: &'g Graph<T>,
    d: &C,
    real: SegMapVar<'g, T>,
    fake: SegMapVar<'g, T>,
    side: Side,
) -> Result<Var<'g, T>> {
    let (want, name) = match d.critic_kind() {
        DiscKind::SegBinary => (SegKind::Binary, "l_b"),
        DiscKind::SegMulticlass => (SegKind::Multiclass, "l_m"),
        DiscKind::Image => return Err(Error::KindMismatch("segmentation loss needs a segmentation critic".into())),
    };
    if real.kind != want || fake.kind != want {
        return Err(Error::KindMismatch(format!(
            "critic scores {want:?} maps, got real {:?} and fake {:?}",
            real.kind, fake.kind
        )));
    }
    let loss = match side {
        Side::Discriminator => {
            let r = d.logits(g, real.scores, Binding::Trainable)?;
            let f = d.logits(g, fake.scores.detach(), Binding::Trainable)?;
            Criterion::Bce.discriminate(r, f)?
        }
        Side::Generator => Criterion::Bce.fool(d.logits(g, fake.scores, Binding::Frozen)?),
    };
    finite(loss, name)
}

/// A loss with its named components.
pub struct Fragment<'g, T: Scalar> {
    pub loss: Var<'g, T>,
    pub sub_terms: Vec<(String, Var<'g, T>)>,
}

impl<T: Scalar> Fragment<'_, T> {
    pub fn sub_values(&self) -> BTreeMap<String, f64> {
        self.sub_terms.iter().map(|(k, v)| (k.clone(), v.item().to_f64_lossless())).collect()
    }
}

/// Paired baseline terms for an already computed `fake = G(x)`. The image
/// critic sees the source concatenated with the color image.
#[allow(clippy::too_many_arguments)]
pub fn paired_terms<'g, T: Scalar, C: Critic<T> + ?Sized>(
    g: &'g Graph<T>,
    d: &C,
    x: Var<'g, T>,
    y: Var<'g, T>,
    fake: Var<'g, T>,
    pairing: Pairing,
    side: Side,
    cfg: &ObjectiveConfig,
) -> Result<Fragment<'g, T>> {
    if pairing != Pairing::Aligned {
        return Err(Error::UnpairedDataInPairedMode);
    }
    let crit = Criterion::for_images(cfg);
    match side {
        Side::Discriminator => {
            let real = d.logits(g, g.concat_channels(&[x, y])?, Binding::Trainable)?;
            let fake = d.logits(g, g.concat_channels(&[x, fake.detach()])?, Binding::Trainable)?;
            let adv = finite(crit.discriminate(real, fake)?, "d_adv")?;
            Ok(Fragment { loss: adv, sub_terms: vec![("d_adv".into(), adv)] })
        }
        Side::Generator => {
            let logits = d.logits(g, g.concat_channels(&[x, fake])?, bind_for(side))?;
            let adv = finite(crit.fool(logits), "g_adv")?;
            let l1 = finite(fake.l1(y)?, "l1")?;
            let loss = adv.add(l1.scale(T::lit(cfg.lambda_l1)))?;
            Ok(Fragment { loss, sub_terms: vec![("g_adv".into(), adv), ("l1".into(), l1)] })
        }
    }
}

/// Paired baseline loss with the generator run inside.
#[allow(clippy::too_many_arguments)]
pub fn paired_baseline_loss<'g, T: Scalar, G: Translator<T> + ?Sized, C: Critic<T> + ?Sized>(
    g: &'g Graph<T>,
    gen: &G,
    d: &C,
    x: Var<'g, T>,
    y: Var<'g, T>,
    pairing: Pairing,
    side: Side,
    cfg: &ObjectiveConfig,
) -> Result<Fragment<'g, T>> {
    let binding = if side == Side::Generator { Binding::Trainable } else { Binding::Frozen };
    let fake = gen.translate(g, x, binding)?;
    paired_terms(g, d, x, y, fake, pairing, side, cfg)
}

/// Images produced by both unpaired generators.
#[derive(Clone, Copy)]
pub struct CycleImages<'g, T: Scalar> {
    /// `G(x)`, a color image.
    pub fake_y: Var<'g, T>,
    /// `G_Y(G(x))`.
    pub rec_x: Var<'g, T>,
    /// `G_Y(y)`, a source image.
    pub fake_x: Var<'g, T>,
    /// `G(G_Y(y))`.
    pub rec_y: Var<'g, T>,
}

pub fn cycle_forward<'g, T: Scalar, G: Translator<T> + ?Sized, H: Translator<T> + ?Sized>(
    g: &'g Graph<T>,
    to_color: &G,
    to_source: &H,
    x: Var<'g, T>,
    y: Var<'g, T>,
    binding: Binding,
) -> Result<CycleImages<'g, T>> {
    let fake_y = to_color.translate(g, x, binding)?;
    let rec_x = to_source.translate(g, fake_y, binding)?;
    let fake_x = to_source.translate(g, y, binding)?;
    let rec_y = to_color.translate(g, fake_x, binding)?;
    Ok(CycleImages { fake_y, rec_x, fake_x, rec_y })
}

/// Both adversarial directions plus both cycle terms. `d_color` judges
/// color images, `d_source` source images.
#[allow(clippy::too_many_arguments)]
pub fn unpaired_terms<'g, T: Scalar, C: Critic<T> + ?Sized, E: Critic<T> + ?Sized>(
    g: &'g Graph<T>,
    d_color: &C,
    d_source: &E,
    x: Var<'g, T>,
    y: Var<'g, T>,
    imgs: &CycleImages<'g, T>,
    side: Side,
    cfg: &ObjectiveConfig,
) -> Result<Fragment<'g, T>> {
    let crit = Criterion::for_images(cfg);
    match side {
        Side::Discriminator => {
            let dy = crit.discriminate(
                d_color.logits(g, y, Binding::Trainable)?,
                d_color.logits(g, imgs.fake_y.detach(), Binding::Trainable)?,
            )?;
            let dx = crit.discriminate(
                d_source.logits(g, x, Binding::Trainable)?,
                d_source.logits(g, imgs.fake_x.detach(), Binding::Trainable)?,
            )?;
            let (dy, dx) = (finite(dy, "d_adv_y")?, finite(dx, "d_adv_x")?);
            Ok(Fragment { loss: dy.add(dx)?, sub_terms: vec![("d_adv_y".into(), dy), ("d_adv_x".into(), dx)] })
        }
        Side::Generator => {
            let adv_y = finite(crit.fool(d_color.logits(g, imgs.fake_y, Binding::Frozen)?), "g_adv_y")?;
            let adv_x = finite(crit.fool(d_source.logits(g, imgs.fake_x, Binding::Frozen)?), "g_adv_x")?;
            let lambda = T::lit(cfg.lambda_cyc);
            let cyc_x = finite(imgs.rec_x.l1(x)?.scale(lambda), "cyc_x")?;
            let cyc_y = finite(imgs.rec_y.l1(y)?.scale(lambda), "cyc_y")?;
            let xy = adv_y.add(cyc_x)?;
            let yx = adv_x.add(cyc_y)?;
            Ok(Fragment {
                loss: xy.add(yx)?,
                sub_terms: vec![
                    ("g_adv_y".into(), adv_y),
                    ("g_adv_x".into(), adv_x),
                    ("cyc_x".into(), cyc_x),
                    ("cyc_y".into(), cyc_y),
                ],
            })
        }
    }
}

/// Unpaired baseline loss with both generators run inside.
#[allow(clippy::too_many_arguments)]
pub fn unpaired_baseline_loss<'g, T, G, H, C, E>(
    g: &'g Graph<T>,
    to_color: &G,
    to_source: &H,
    d_color: &C,
    d_source: &E,
    x: Var<'g, T>,
    y: Var<'g, T>,
    side: Side,
    cfg: &ObjectiveConfig,
) -> Result<Fragment<'g, T>>
where
    T: Scalar,
    G: Translator<T> + ?Sized,
    H: Translator<T> + ?Sized,
    C: Critic<T> + ?Sized,
    E: Critic<T> + ?Sized,
{
    let binding = if side == Side::Generator { Binding::Trainable } else { Binding::Frozen };
    let imgs = cycle_forward(g, to_color, to_source, x, y, binding)?;
    unpaired_terms(g, d_color, d_source, x, y, &imgs, side, cfg)
}

/// Scalar values of one side of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_b: f64,
    pub l_m: f64,
    pub total: f64,
    pub side: Side,
    pub sub_terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l_g, self.l_b, self.l_m, self.total].iter().chain(self.sub_terms.values()).all(|v| v.is_finite())
    }
}

fn weighted(name: &str, w: f64, term: Option<f64>) -> Result<f64> {
    if w == 0.0 {
        return Ok(0.0);
    }
    let v = term.ok_or_else(|| Error::MissingFragment(name.into()))?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(name.into()));
    }
    Ok(w * v)
}

/// `w_g·l_g + w_b·l_b + w_m·l_m`. Zero-weight terms contribute nothing
/// and need not be computed; a non-zero weight without its term fails.
pub fn total_objective(
    cfg: &ObjectiveConfig,
    side: Side,
    l_g: Option<f64>,
    l_b: Option<f64>,
    l_m: Option<f64>,
    sub_terms: BTreeMap<String, f64>,
) -> Result<LossBreakdown> {
    let total = weighted("l_g", cfg.w_g, l_g)? + weighted("l_b", cfg.w_b, l_b)? + weighted("l_m", cfg.w_m, l_m)?;
    Ok(LossBreakdown {
        l_g: l_g.unwrap_or(0.0),
        l_b: l_b.unwrap_or(0.0),
        l_m: l_m.unwrap_or(0.0),
        total,
        side,
        sub_terms,
    })
}

/// Graph form of the weighted total for the generator update.
pub fn weighted_total<'g, T: Scalar>(
    cfg: &ObjectiveConfig,
    l_g: Option<Var<'g, T>>,
    l_b: Option<Var<'g, T>>,
    l_m: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let mut total: Option<Var<'g, T>> = None;
    for (name, w, term) in [("l_g", cfg.w_g, l_g), ("l_b", cfg.w_b, l_b), ("l_m", cfg.w_m, l_m)] {
        if w == 0.0 {
            continue;
        }
        let v = term.ok_or_else(|| Error::MissingFragment(name.into()))?.scale(T::lit(w));
        total = Some(match total {
            None => v,
            Some(t) => t.add(v)?,
        });
    }
    let total = total.ok_or_else(|| Error::MissingFragment("every weight is zero".into()))?;
    finite(total, "total")
}

pub const TRACE_HEADER: &str = "epoch,step,side,l_g,l_b,l_m,total,sub_terms";

/// One CSV row; sub-terms are `name=value` pairs joined by `;`.
pub fn trace_row(epoch: usize, step: u64, b: &LossBreakdown) -> String {
    let subs: Vec<String> = b.sub_terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{epoch},{step},{},{},{},{},{},{}", b.side.as_str(), b.l_g, b.l_b, b.l_m, b.total, subs.join(";"))
}

/// Append-only per-step loss log.
pub struct LossTrace {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossTrace {
    pub fn create(path: &Path) -> Result<Self> {
        Self::with_rows(path, &[])
    }

    /// Reopens a trace, keeping only the rows of epochs before `epoch`.
    pub fn resume(path: &Path, epoch: usize) -> Result<Self> {
        let text = fs::read_to_string(path).unwrap_or_default();
        let rows: Vec<&str> = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epoch))
            .collect();
        Self::with_rows(path, &rows)
    }

    fn with_rows(path: &Path, rows: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "{TRACE_HEADER}")?;
            for r in rows {
                writeln!(out, "{r}")?;
            }
            Ok(())
        };
        write().map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out })
    }

    pub fn append(&mut self, epoch: usize, step: u64, b: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{}", trace_row(epoch, step, b)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Baseline, GanMode, Variant};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Critic returning fixed logits for maps whose first score is at
    /// least 0.5 and for all others.
    struct FixedCritic {
        kind: DiscKind,
        real: Tensor<f64>,
        fake: Tensor<f64>,
    }

    impl Critic<f64> for FixedCritic {
        fn critic_kind(&self) -> DiscKind {
            self.kind
        }
        fn logits<'g>(&self, g: &'g Graph<f64>, x: Var<'g, f64>, _: Binding) -> Result<Var<'g, f64>> {
            let is_real = x.value().data()[0] >= 0.5;
            let t = if is_real { &self.real } else { &self.fake };
            Ok(g.input(Tensor::stack(&vec![t.clone(); x.shape()[0]], true)?))
        }
    }

    /// Real and fake maps told apart by their first score.
    fn maps<'g>(g: &'g Graph<f64>, kind: SegKind) -> (SegMapVar<'g, f64>, SegMapVar<'g, f64>) {
        let k = if kind == SegKind::Binary { 2 } else { 4 };
        let mut real = Tensor::full([1, k, 4, 4], 1.0 / k as f64);
        let mut fake = real.clone();
        real.data_mut()[0] = 1.0;
        fake.data_mut()[0] = 0.0;
        (SegMapVar { scores: g.input(real), kind }, SegMapVar { scores: g.input(fake), kind })
    }

    #[test]
    fn half_probability_gives_two_ln2() {
        let d = FixedCritic {
            kind: DiscKind::SegBinary,
            real: Tensor::zeros([1, 1, 4, 4]),
            fake: Tensor::zeros([1, 1, 4, 4]),
        };
        let g = Graph::new();
        let (r, f) = maps(&g, SegKind::Binary);
        let l = seg_adversarial_loss(&g, &d, r, f, Side::Discriminator).unwrap().item();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_critic_gives_zero() {
        let d = FixedCritic {
            kind: DiscKind::SegMulticlass,
            real: Tensor::full([1, 1, 4, 4], 1000.0),
            fake: Tensor::full([1, 1, 4, 4], -1000.0),
        };
        let g = Graph::new();
        let (r, f) = maps(&g, SegKind::Multiclass);
        assert_eq!(seg_adversarial_loss(&g, &d, r, f, Side::Discriminator).unwrap().item(), 0.0);
    }

    #[test]
    fn patch_losses_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let real = Tensor::<f64>::randn([1, 1, 4, 4], 2.0, &mut rng);
        let fake = Tensor::<f64>::randn([1, 1, 4, 4], 2.0, &mut rng);
        let d = FixedCritic { kind: DiscKind::SegBinary, real: real.clone(), fake: fake.clone() };
        let g = Graph::new();
        let (r, f) = maps(&g, SegKind::Binary);
        let disc = seg_adversarial_loss(&g, &d, r, f, Side::Discriminator).unwrap().item();
        let gen = seg_adversarial_loss(&g, &d, r, f, Side::Generator).unwrap().item();
        let p = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut want_d = 0.0;
        let mut want_g = 0.0;
        for i in 0..16 {
            want_d -= p(real.data()[i]).ln() / 16.0 + (1.0 - p(fake.data()[i])).ln() / 16.0;
            want_g -= p(fake.data()[i]).ln() / 16.0;
        }
        assert!((disc - want_d).abs() < 1e-12, "{disc} vs {want_d}");
        assert!((gen - want_g).abs() < 1e-12);
    }

    #[test]
    fn kind_mismatch_and_non_finite() {
        let d = FixedCritic {
            kind: DiscKind::SegBinary,
            real: Tensor::zeros([1, 1, 4, 4]),
            fake: Tensor::full([1, 1, 4, 4], f64::NAN),
        };
        let g = Graph::new();
        let (r, f) = maps(&g, SegKind::Multiclass);
        assert!(matches!(seg_adversarial_loss(&g, &d, r, f, Side::Generator), Err(Error::KindMismatch(_))));
        let (r, f) = maps(&g, SegKind::Binary);
        assert!(matches!(seg_adversarial_loss(&g, &d, r, f, Side::Generator), Err(Error::NonFiniteLoss(_))));
    }

    struct Shift(f64);

    impl Translator<f64> for Shift {
        fn translate<'g>(&self, _: &'g Graph<f64>, x: Var<'g, f64>, _: Binding) -> Result<Var<'g, f64>> {
            Ok(x.add_scalar(self.0))
        }
    }

    struct Constant(f64, usize);

    impl Translator<f64> for Constant {
        fn translate<'g>(&self, g: &'g Graph<f64>, x: Var<'g, f64>, _: Binding) -> Result<Var<'g, f64>> {
            let s = x.shape();
            Ok(g.input(Tensor::full([s[0], self.1, s[2], s[3]], self.0)))
        }
    }

    /// Scores the channel mean at each pixel, so it accepts any channel
    /// count.
    struct MeanCritic;

    impl Critic<f64> for MeanCritic {
        fn critic_kind(&self) -> DiscKind {
            DiscKind::Image
        }
        fn logits<'g>(&self, _: &'g Graph<f64>, x: Var<'g, f64>, _: Binding) -> Result<Var<'g, f64>> {
            let c = x.shape()[1];
            Ok(x.group_sum_channels(vec![(0..c).collect()])?.scale(1.0 / c as f64))
        }
    }

    fn paired_cfg() -> ObjectiveConfig {
        ObjectiveConfig::for_variant(Variant::Baseline, Baseline::Paired)
    }

    fn sub(frag: &Fragment<'_, f64>, name: &str) -> f64 {
        frag.sub_values()[name]
    }

    #[test]
    fn identity_generator_on_identical_pairs_has_zero_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let (x, y) = (g.input(t.clone()), g.input(t));
        let f = paired_baseline_loss(&g, &Shift(0.0), &MeanCritic, x, y, Pairing::Aligned, Side::Generator, &paired_cfg())
            .unwrap();
        assert_eq!(sub(&f, "l1"), 0.0);
    }

    #[test]
    fn constant_generator_reconstruction_is_absolute_difference() {
        let g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros([1, 1, 4, 4]));
        let y = g.input(Tensor::full([1, 3, 4, 4], -0.25));
        let f = paired_baseline_loss(&g, &Constant(0.5, 3), &MeanCritic, x, y, Pairing::Aligned, Side::Generator, &paired_cfg())
            .unwrap();
        assert_eq!(sub(&f, "l1"), 0.75);
    }

    #[test]
    fn reconstruction_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let f = paired_terms(
            &g,
            &MeanCritic,
            g.input(Tensor::zeros([2, 1, 4, 4])),
            g.input(b.clone()),
            g.input(a.clone()),
            Pairing::Aligned,
            Side::Generator,
            &paired_cfg(),
        )
        .unwrap();
        let mut want = 0.0;
        for i in 0..a.len() {
            want += (a.data()[i] - b.data()[i]).abs();
        }
        want /= a.len() as f64;
        assert!((sub(&f, "l1") - want).abs() < 1e-15);
        assert!((f.loss.item() - (sub(&f, "g_adv") + 100.0 * want)).abs() < 1e-12);
    }

    #[test]
    fn paired_mode_rejects_independent_batches() {
        let g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros([1, 1, 4, 4]));
        let y = g.input(Tensor::zeros([1, 3, 4, 4]));
        let r = paired_baseline_loss(&g, &Constant(0.0, 3), &MeanCritic, x, y, Pairing::Independent, Side::Generator, &paired_cfg());
        assert!(matches!(r, Err(Error::UnpairedDataInPairedMode)));
    }

    fn unpaired_cfg() -> ObjectiveConfig {
        ObjectiveConfig::for_variant(Variant::Baseline, Baseline::Unpaired)
    }

    #[test]
    fn identity_and_inverse_shift_generators_have_zero_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = Tensor::<f64>::uniform([1, 3, 8, 8], -0.5, 0.5, &mut rng);
        let yt = Tensor::<f64>::uniform([1, 3, 8, 8], -0.5, 0.5, &mut rng);
        let cfg = unpaired_cfg();
        let g = Graph::new();
        let (x, y) = (g.input(xt.clone()), g.input(yt.clone()));
        let id = unpaired_baseline_loss(&g, &Shift(0.0), &Shift(0.0), &MeanCritic, &MeanCritic, x, y, Side::Generator, &cfg)
            .unwrap();
        assert_eq!(sub(&id, "cyc_x"), 0.0);
        assert_eq!(sub(&id, "cyc_y"), 0.0);
        let sh = unpaired_baseline_loss(&g, &Shift(0.1), &Shift(-0.1), &MeanCritic, &MeanCritic, x, y, Side::Generator, &cfg)
            .unwrap();
        assert!(sub(&sh, "cyc_x") < 1e-15 && sub(&sh, "cyc_y") < 1e-15);
        // Adversarial terms are those of the shifted images themselves.
        let lsq = |t: &Tensor<f64>, s: f64| {
            let n = 64.0;
            (0..64).map(|p| {
                let m = (0..3).map(|c| t.data()[c * 64 + p] + s).sum::<f64>() / 3.0;
                (m - 1.0).powi(2) / n
            }).sum::<f64>()
        };
        assert!((sub(&sh, "g_adv_y") - lsq(&xt, 0.1)).abs() < 1e-12);
        assert!((sub(&sh, "g_adv_x") - lsq(&yt, -0.1)).abs() < 1e-12);
    }

    /// `tanh(a·x + b)` per element.
    struct Squash(f64, f64);

    impl Translator<f64> for Squash {
        fn translate<'g>(&self, _: &'g Graph<f64>, x: Var<'g, f64>, _: Binding) -> Result<Var<'g, f64>> {
            Ok(x.scale(self.0).add_scalar(self.1).tanh())
        }
    }

    #[test]
    fn unpaired_total_matches_two_direction_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let yt = Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let (gx, gy) = (Squash(0.7, 0.1), Squash(-1.3, 0.2));
        let mut cfg = unpaired_cfg();
        for mode in [GanMode::Lsgan, GanMode::Bce] {
            cfg.gan_mode = mode;
            let g = Graph::new();
            let total = unpaired_baseline_loss(&g, &gx, &gy, &MeanCritic, &MeanCritic, g.input(xt.clone()), g.input(yt.clone()), Side::Generator, &cfg)
                .unwrap()
                .loss
                .item();
            // Scalar oracle, one direction at a time.
            let f = |t: &Tensor<f64>, a: f64, b: f64| t.map(|v| (a * v + b).tanh());
            let score = |t: &Tensor<f64>| -> Vec<f64> { (0..64).map(|p| (0..3).map(|c| t.data()[c * 64 + p]).sum::<f64>() / 3.0).collect() };
            let fool = |s: Vec<f64>| -> f64 {
                s.iter()
                    .map(|&z| if mode == GanMode::Lsgan { (z - 1.0).powi(2) } else { (1.0 + (-z).exp()).ln() })
                    .sum::<f64>()
                    / 64.0
            };
            let l1 = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / 192.0;
            let fake_y = f(&xt, 0.7, 0.1);
            let rec_x = f(&fake_y, -1.3, 0.2);
            let x_to_y = fool(score(&fake_y)) + 10.0 * l1(&rec_x, &xt);
            let fake_x = f(&yt, -1.3, 0.2);
            let rec_y = f(&fake_x, 0.7, 0.1);
            let y_to_x = fool(score(&fake_x)) + 10.0 * l1(&rec_y, &yt);
            assert!((total - (x_to_y + y_to_x)).abs() < 1e-12, "{mode:?}: {total} vs {}", x_to_y + y_to_x);
        }
    }

    fn breakdown(cfg: &ObjectiveConfig, f: [f64; 3]) -> LossBreakdown {
        total_objective(cfg, Side::Generator, Some(f[0]), Some(f[1]), Some(f[2]), BTreeMap::new()).unwrap()
    }

    #[test]
    fn linear_sum_and_baseline_short_circuit() {
        let all = ObjectiveConfig::for_variant(Variant::Combined, Baseline::Paired);
        assert_eq!(breakdown(&all, [1.0, 2.0, 3.0]).total, 6.0);
        let base = ObjectiveConfig::for_variant(Variant::Baseline, Baseline::Paired);
        let b = total_objective(&base, Side::Generator, Some(2.5), None, None, BTreeMap::new()).unwrap();
        assert_eq!(b.total, 2.5);
        let r = total_objective(&all, Side::Generator, Some(2.5), None, Some(1.0), BTreeMap::new());
        assert!(matches!(r, Err(Error::MissingFragment(ref n)) if n == "l_b"));
    }

    #[test]
    fn weighted_graph_total_matches_value_total() {
        let cfg = ObjectiveConfig { w_g: 0.5, w_b: 2.0, w_m: 3.0, ..Default::default() };
        let g = Graph::new();
        let v = |x: f64| g.input(Tensor::scalar(x));
        let t = weighted_total(&cfg, Some(v(1.0)), Some(v(2.0)), Some(v(3.0))).unwrap().item();
        assert_eq!(t, breakdown(&cfg, [1.0, 2.0, 3.0]).total);
        let base = ObjectiveConfig::for_variant(Variant::Baseline, Baseline::Unpaired);
        assert_eq!(weighted_total(&base, Some(v(1.5)), None, None).unwrap().item(), 1.5);
    }

    #[test]
    fn trace_rows_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/loss.csv");
        let cfg = ObjectiveConfig::default();
        let mut b = breakdown(&cfg, [1.0, 0.5, 0.25]);
        b.sub_terms.insert("cyc_x".into(), 0.125);
        let mut t = LossTrace::create(&path).unwrap();
        t.append(0, 1, &b).unwrap();
        t.append(1, 2, &b).unwrap();
        t.flush().unwrap();
        drop(t);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,1,generator,1,0.5,0.25,1.75,cyc_x=0.125");
        let mut t = LossTrace::resume(&path, 1).unwrap();
        t.flush().unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn combined_minus_binary_is_weighted_multiclass_term(
            lg in -10.0f64..10.0, lb in 0.0f64..10.0, lm in 0.0f64..10.0,
            wg in 0.01f64..5.0, wb in 0.01f64..5.0, wm in 0.01f64..5.0,
        ) {
            let comb = ObjectiveConfig { variant: Variant::Combined, w_g: wg, w_b: wb, w_m: wm, ..Default::default() };
            let bin = ObjectiveConfig { variant: Variant::Binary, w_m: 0.0, ..comb.clone() };
            let multi = ObjectiveConfig { variant: Variant::Multiclass, w_b: 0.0, ..comb.clone() };
            let c = breakdown(&comb, [lg, lb, lm]).total;
            prop_assert!((c - breakdown(&bin, [lg, lb, lm]).total - wm * lm).abs() < 1e-6);
            prop_assert!((c - breakdown(&multi, [lg, lb, lm]).total - wb * lb).abs() < 1e-6);
        }

        #[test]
        fn discriminator_bce_is_non_negative(
            real in proptest::collection::vec(-30.0f64..30.0, 9),
            fake in proptest::collection::vec(-30.0f64..30.0, 9),
        ) {
            let g = Graph::new();
            let r = g.input(Tensor::from_vec([1, 1, 3, 3], real).unwrap());
            let f = g.input(Tensor::from_vec([1, 1, 3, 3], fake).unwrap());
            prop_assert!(Criterion::Bce.discriminate(r, f).unwrap().item() >= 0.0);
        }
    }
}
