//! Inference-time input perturbations and repeated-sampling robustness sweeps.
//!
//! Every perturbation is the identity at intensity 0 except
//! [`gaussian_feature_noise`], which adds the feature mean `mu` unless
//! [`NoiseOptions::zero_mean`] is set.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{ImageFeatureGrid, VQAInstance, Vocabulary, UNK};
use crate::eval::{score, ScoreKind, EVAL_CHUNK};
use crate::generator::infer_all;
use crate::model::CcmModel;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    GaussianFeature,
    MaskWords,
    ReplaceWords,
    Blur,
    /// Gaussian feature noise and word masking applied together.
    Combined,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::GaussianFeature,
        PerturbKind::MaskWords,
        PerturbKind::ReplaceWords,
        PerturbKind::Blur,
        PerturbKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::GaussianFeature => "gaussian",
            PerturbKind::MaskWords => "mask",
            PerturbKind::ReplaceWords => "replace",
            PerturbKind::Blur => "blur",
            PerturbKind::Combined => "combined",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Perturb(format!("unknown kind {s:?}; expected one of gaussian, mask, replace, blur, combined")))
    }
}

/// Where the noise statistics `mu` and `sigma` come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseReference {
    /// Mean and population std of the instance's own feature values.
    Instance,
    /// Fixed statistics, e.g. computed once over a corpus with [`feature_stats`].
    Corpus { mean: f64, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseOptions {
    pub reference: NoiseReference,
    /// Draw noise from `N(0, (alpha sigma)^2)` instead of `N(mu, (alpha sigma)^2)`.
    pub zero_mean: bool,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self {
            reference: NoiseReference::Instance,
            zero_mean: false,
        }
    }
}

/// Mean and population standard deviation.
pub fn feature_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Statistics over all feature values of `instances`.
pub fn corpus_stats(instances: &[VQAInstance]) -> (f64, f64) {
    let all: Vec<f64> = instances.iter().flat_map(|i| i.features.values.iter().copied()).collect();
    feature_stats(&all)
}

fn check_alpha(alpha: f64) -> Result<(), Error> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::Perturb(format!("noise intensity must be finite and >= 0, got {alpha}")))
    }
}

fn check_prob(p: f64) -> Result<(), Error> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Perturb(format!("probability must be in [0, 1], got {p}")))
    }
}

/// `features + eps`, `eps ~ N(mu, (alpha sigma)^2)` drawn per value.
pub fn gaussian_feature_noise(grid: &ImageFeatureGrid, alpha: f64, opts: NoiseOptions, rng: &mut impl Rng) -> Result<ImageFeatureGrid, Error> {
    check_alpha(alpha)?;
    let (mu, sigma) = match opts.reference {
        NoiseReference::Instance => feature_stats(&grid.values),
        NoiseReference::Corpus { mean, std } => (mean, std),
    };
    let mean = if opts.zero_mean { 0.0 } else { mu };
    let sd = alpha * sigma;
    let values = if sd == 0.0 {
        grid.values.iter().map(|v| v + mean).collect()
    } else {
        let dist = Normal::new(mean, sd).map_err(|e| Error::Perturb(e.to_string()))?;
        grid.values.iter().map(|v| v + dist.sample(rng)).collect()
    };
    ImageFeatureGrid::new(grid.width, grid.height, grid.channels, values)
}

/// Replaces each token by the unknown token with probability `p`.
pub fn mask_question_words(question: &[usize], p: f64, rng: &mut impl Rng) -> Result<Vec<usize>, Error> {
    check_prob(p)?;
    Ok(question.iter().map(|&t| if rng.random::<f64>() < p { UNK } else { t }).collect())
}

/// Replaces each token, with probability `p`, by a uniform draw from `candidates`.
pub fn replace_question_words(question: &[usize], p: f64, candidates: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>, Error> {
    check_prob(p)?;
    if candidates.is_empty() {
        return Err(Error::Perturb("no replacement candidates: vocabulary has only reserved tokens".into()));
    }
    Ok(question
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < p {
                candidates[rng.random_range(0..candidates.len())]
            } else {
                t
            }
        })
        .collect())
}

/// Index into `0..n` of position `i` under half-sample symmetric reflection.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable Gaussian blur of each channel over the spatial grid, radius
/// `ceil(3 sigma)`, reflected borders. `sigma = 0` is the identity.
pub fn blur_feature_grid(grid: &ImageFeatureGrid, sigma: f64) -> Result<ImageFeatureGrid, Error> {
    check_alpha(sigma)?;
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);
    let (w, h, c) = (grid.width, grid.height, grid.channels);
    let at = |x: usize, y: usize, ch: usize| (y * w + x) * c + ch;
    let mut horizontal = vec![0.0; grid.values.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                horizontal[at(x, y, ch)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * grid.values[at(reflect(x as isize + k as isize - radius, w), y, ch)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; grid.values.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[at(x, y, ch)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * horizontal[at(x, reflect(y as isize + k as isize - radius, h), ch)])
                    .sum();
            }
        }
    }
    ImageFeatureGrid::new(w, h, c, out)
}

/// A sweep over intensities, each evaluated `samples` times.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// `alpha` for gaussian/combined, `p` for mask/replace, `sigma` for blur.
    pub intensities: Vec<f64>,
    /// Masking probability per intensity index, for [`PerturbKind::Combined`] only.
    pub mask_probs: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseOptions,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind, intensities: Vec<f64>, samples: usize, seed: u64) -> Self {
        Self {
            kind,
            intensities,
            mask_probs: Vec::new(),
            samples,
            seed,
            noise: NoiseOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.samples == 0 {
            return Err(Error::Perturb("samples must be at least 1".into()));
        }
        if self.intensities.is_empty() {
            return Err(Error::Perturb("no intensities given".into()));
        }
        for &v in &self.intensities {
            match self.kind {
                PerturbKind::MaskWords | PerturbKind::ReplaceWords => check_prob(v)?,
                _ => check_alpha(v)?,
            }
        }
        if self.kind == PerturbKind::Combined {
            if self.mask_probs.len() != self.intensities.len() {
                return Err(Error::Perturb(format!(
                    "combined sweep needs one mask probability per intensity: {} vs {}",
                    self.mask_probs.len(),
                    self.intensities.len()
                )));
            }
            for &p in &self.mask_probs {
                check_prob(p)?;
            }
        }
        if let NoiseReference::Corpus { mean, std } = self.noise.reference {
            if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                return Err(Error::Perturb(format!("bad corpus noise statistics ({mean}, {std})")));
            }
        }
        Ok(())
    }
}

/// Generator for sample `sample` at intensity index `index`, independent of
/// evaluation order.
pub fn sweep_rng(master: u64, index: usize, sample: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"sweep");
    h.update(master.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.update((sample as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Applies intensity `index` of `spec` to every instance, drawing from `rng`
/// in instance order.
pub fn perturb_instances(
    spec: &PerturbationSpec,
    index: usize,
    vocab: &Vocabulary,
    instances: &[VQAInstance],
    rng: &mut impl Rng,
) -> Result<Vec<VQAInstance>, Error> {
    let v = spec.intensities[index];
    let candidates = vocab.question_content_ids();
    instances
        .iter()
        .map(|inst| {
            let mut out = inst.clone();
            match spec.kind {
                PerturbKind::GaussianFeature => out.features = gaussian_feature_noise(&inst.features, v, spec.noise, rng)?,
                PerturbKind::MaskWords => out.question = mask_question_words(&inst.question, v, rng)?,
                PerturbKind::ReplaceWords => out.question = replace_question_words(&inst.question, v, &candidates, rng)?,
                PerturbKind::Blur => out.features = blur_feature_grid(&inst.features, v)?,
                PerturbKind::Combined => {
                    out.features = gaussian_feature_noise(&inst.features, v, spec.noise, rng)?;
                    out.question = mask_question_words(&inst.question, spec.mask_probs[index], rng)?;
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: PerturbKind,
    pub intensity: f64,
    pub metric: ScoreKind,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Sample standard deviation (`n - 1`), 0 for a single sample.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Per-sample scores for every intensity, in intensity order.
pub fn sweep_scores(
    model: &CcmModel,
    vocab: &Vocabulary,
    instances: &[VQAInstance],
    spec: &PerturbationSpec,
    metric: ScoreKind,
) -> Result<Vec<Vec<f64>>, Error> {
    spec.validate()?;
    model.check_vocab(vocab)?;
    let jobs: Vec<(usize, usize)> = (0..spec.intensities.len()).flat_map(|i| (0..spec.samples).map(move |r| (i, r))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let wrap = |e: Error| Error::Sweep {
                intensity: spec.intensities[i],
                sample: r,
                source: Box::new(e),
            };
            let mut rng = sweep_rng(spec.seed, i, r);
            let perturbed = perturb_instances(spec, i, vocab, instances, &mut rng).map_err(wrap)?;
            let preds = infer_all(model, &perturbed, EVAL_CHUNK).map_err(wrap)?;
            score(metric, vocab, &perturbed, &preds).map_err(wrap)
        })
        .collect::<Result<_, Error>>()?;
    Ok(scores.chunks(spec.samples).map(<[f64]>::to_vec).collect())
}

pub fn robustness_sweep(
    model: &CcmModel,
    vocab: &Vocabulary,
    instances: &[VQAInstance],
    spec: &PerturbationSpec,
    metric: ScoreKind,
) -> Result<Vec<SweepRow>, Error> {
    let scores = sweep_scores(model, vocab, instances, spec, metric)?;
    Ok(spec
        .intensities
        .iter()
        .zip(scores)
        .map(|(&intensity, s)| SweepRow {
            kind: spec.kind,
            intensity,
            metric,
            mean: if s.iter().all(|x| *x == s[0]) {
                s[0]
            } else {
                s.iter().sum::<f64>() / s.len() as f64
            },
            std: sample_std(&s),
            samples: spec.samples,
            seed: spec.seed,
        })
        .collect())
}
