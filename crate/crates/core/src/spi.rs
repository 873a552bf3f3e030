//! Stochastic prior injection.
//!
//! An OCR error profile is turned into probabilities for three corruption
//! modes (drop the line, jitter its box, corrupt its transcript); priors are
//! then materialized per record as present, noisy or absent.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::mutual_best_pairs;
use crate::geometry::{Box, ImageSize};
use crate::records::TextItem;
use crate::rng::Pcg32;

pub const JITTER_RATIO_RANGE: (f64, f64) = (0.12, 0.17);
pub const JITTER_MAX_ATTEMPTS: u32 = 10;
pub const TEXT_RATIO_RANGE: (f64, f64) = (0.2, 0.6);
pub const DELETE_SHARE: f64 = 0.7256;
/// Probability that a prior is routed to the corrupted subset at gamma 0.5.
pub const NOISE_FRACTION: f64 = 0.5;
/// Minimum mutual-best IoU for a raw OCR item to count as aligned with a
/// ground-truth instance.
pub const DEFAULT_ALIGN_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SpiError {
    #[error("noise profile field `{field}` = {value} is outside [0, 1]")]
    ProfileRange { field: &'static str, value: f64 },
    #[error("e_del_hat + e_ins_hat = {0} exceeds 1")]
    ProfileShares(f64),
    #[error("mode weights sum to zero")]
    ZeroWeightSum,
    #[error("invalid mode weight {0}")]
    InvalidWeight(f64),
    #[error("gamma must be one of 1.0, 0.5, 0.0 (got {0})")]
    InvalidGamma(String),
    #[error("unknown source tag `{0}`")]
    UnknownSource(String),
    #[error("scene-text record at gamma 1.0 has no raw OCR priors")]
    MissingRawPriors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub recall: f64,
    pub precision: f64,
    pub cer: f64,
    pub e_del_hat: f64,
    pub e_ins_hat: f64,
}

impl NoiseProfile {
    pub fn validate(&self) -> Result<(), SpiError> {
        for (field, value) in [
            ("recall", self.recall),
            ("precision", self.precision),
            ("cer", self.cer),
            ("e_del_hat", self.e_del_hat),
            ("e_ins_hat", self.e_ins_hat),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SpiError::ProfileRange { field, value });
            }
        }
        let s = self.e_del_hat + self.e_ins_hat;
        if s > 1.0 + 1e-12 {
            return Err(SpiError::ProfileShares(s));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let p: NoiseProfile = serde_json::from_str(s).map_err(|e| e.to_string())?;
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeWeights {
    pub w_del: f64,
    pub w_jit: f64,
    pub w_txt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeProbs {
    pub p_del: f64,
    pub p_jit: f64,
    pub p_txt: f64,
}

pub fn derive_weights(np: &NoiseProfile) -> ModeWeights {
    ModeWeights {
        w_del: 1.0 - np.recall,
        w_jit: 1.0 - np.precision,
        w_txt: np.recall * np.cer * (np.e_del_hat + np.e_ins_hat),
    }
}

pub fn normalize_weights(w: &ModeWeights) -> Result<ModeProbs, SpiError> {
    for v in [w.w_del, w.w_jit, w.w_txt] {
        if !v.is_finite() || v < 0.0 {
            return Err(SpiError::InvalidWeight(v));
        }
    }
    let s = w.w_del + w.w_jit + w.w_txt;
    if s <= 0.0 {
        return Err(SpiError::ZeroWeightSum);
    }
    Ok(ModeProbs {
        p_del: w.w_del / s,
        p_jit: w.w_jit / s,
        p_txt: w.w_txt / s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Delete,
    Jitter,
    Text,
}

impl ModeProbs {
    pub fn sample(&self, rng: &mut Pcg32) -> Mode {
        let u = rng.next_f64();
        if u < self.p_del {
            Mode::Delete
        } else if u < self.p_del + self.p_jit || self.p_txt == 0.0 {
            if self.p_jit == 0.0 {
                Mode::Delete
            } else {
                Mode::Jitter
            }
        } else {
            Mode::Text
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterOutcome {
    pub bbox: Box,
    pub attempts: u32,
    /// Every attempt was degenerate; `bbox` is the original box.
    pub degenerate: bool,
}

/// Jitters each edge by `u * size` with `u ~ U[-rho, rho]`, clamped to the
/// image, retrying on degenerate results.
pub fn jitter_box_with_ratio(b: &Box, image: ImageSize, rho: f64, rng: &mut Pcg32) -> JitterOutcome {
    let (w, h) = (b.width(), b.height());
    let (iw, ih) = (image.width as f64, image.height as f64);
    for attempt in 1..=JITTER_MAX_ATTEMPTS {
        let x0 = (b.x_min() + rng.uniform(-rho, rho) * w).clamp(0.0, iw);
        let y0 = (b.y_min() + rng.uniform(-rho, rho) * h).clamp(0.0, ih);
        let x1 = (b.x_max() + rng.uniform(-rho, rho) * w).clamp(0.0, iw);
        let y1 = (b.y_max() + rng.uniform(-rho, rho) * h).clamp(0.0, ih);
        if let Ok(nb) = Box::new(x0, y0, x1, y1) {
            return JitterOutcome {
                bbox: nb,
                attempts: attempt,
                degenerate: false,
            };
        }
    }
    JitterOutcome {
        bbox: *b,
        attempts: JITTER_MAX_ATTEMPTS,
        degenerate: true,
    }
}

pub fn jitter_box(b: &Box, image: ImageSize, rng: &mut Pcg32) -> JitterOutcome {
    let rho = rng.uniform(JITTER_RATIO_RANGE.0, JITTER_RATIO_RANGE.1);
    jitter_box_with_ratio(b, image, rho, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextOutcome {
    pub text: String,
    pub n_del: usize,
    pub n_ins: usize,
}

/// Error budget for a transcript of `n` characters at corruption ratio `r`.
pub fn text_budget(n: usize, r: f64) -> (usize, usize) {
    let e = ((r * n as f64).round() as usize).max(1);
    let n_del = (DELETE_SHARE * e as f64).round() as usize;
    (n_del, e - n_del)
}

pub fn perturb_text_with_ratio(t: &str, r: f64, rng: &mut Pcg32) -> TextOutcome {
    let source: Vec<char> = t.chars().collect();
    if source.is_empty() {
        return TextOutcome {
            text: String::new(),
            n_del: 0,
            n_ins: 0,
        };
    }
    let (want_del, n_ins) = text_budget(source.len(), r);
    let n_del = want_del.min(source.len());
    let mut chars = source.clone();
    for _ in 0..n_del {
        let pos = rng.below_usize(chars.len());
        chars.remove(pos);
    }
    for _ in 0..n_ins {
        let c = source[rng.below_usize(source.len())];
        let pos = rng.below_usize(chars.len() + 1);
        chars.insert(pos, c);
    }
    TextOutcome {
        text: chars.into_iter().collect(),
        n_del,
        n_ins,
    }
}

pub fn perturb_text(t: &str, rng: &mut Pcg32) -> TextOutcome {
    let r = rng.uniform(TEXT_RATIO_RANGE.0, TEXT_RATIO_RANGE.1);
    perturb_text_with_ratio(t, r, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptOutcome {
    pub mode: Mode,
    pub item: Option<TextItem>,
    pub jitter_degenerate: bool,
}

pub fn corrupt_with_mode(inst: &TextItem, mode: Mode, image: ImageSize, rng: &mut Pcg32) -> CorruptOutcome {
    let (item, jitter_degenerate) = match mode {
        Mode::Delete => (None, false),
        Mode::Jitter => {
            let j = jitter_box(&inst.bbox, image, rng);
            (Some(TextItem::new(j.bbox, inst.text.clone())), j.degenerate)
        }
        Mode::Text => {
            let p = perturb_text(&inst.text, rng);
            (Some(TextItem::new(inst.bbox, p.text)), false)
        }
    };
    CorruptOutcome {
        mode,
        item,
        jitter_degenerate,
    }
}

pub fn corrupt_instance(inst: &TextItem, probs: &ModeProbs, image: ImageSize, rng: &mut Pcg32) -> CorruptOutcome {
    let mode = probs.sample(rng);
    corrupt_with_mode(inst, mode, image, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gamma {
    Present,
    Noisy,
    Absent,
}

impl Gamma {
    pub fn value(self) -> f64 {
        match self {
            Gamma::Present => 1.0,
            Gamma::Noisy => 0.5,
            Gamma::Absent => 0.0,
        }
    }

    pub fn from_value(v: f64) -> Result<Self, SpiError> {
        if v == 1.0 {
            Ok(Gamma::Present)
        } else if v == 0.5 {
            Ok(Gamma::Noisy)
        } else if v == 0.0 {
            Ok(Gamma::Absent)
        } else {
            Err(SpiError::InvalidGamma(v.to_string()))
        }
    }
}

impl FromStr for Gamma {
    type Err = SpiError;
    fn from_str(s: &str) -> Result<Self, SpiError> {
        let v: f64 = s.trim().parse().map_err(|_| SpiError::InvalidGamma(s.to_string()))?;
        Gamma::from_value(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Scene,
    Synthetic,
    Document,
}

impl FromStr for SourceKind {
    type Err = SpiError;
    fn from_str(s: &str) -> Result<Self, SpiError> {
        match s {
            "scene" | "scene_text" => Ok(SourceKind::Scene),
            "synthetic" => Ok(SourceKind::Synthetic),
            "document" => Ok(SourceKind::Document),
            _ => Err(SpiError::UnknownSource(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub gamma: Gamma,
    pub priors: Vec<TextItem>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MaterializeStats {
    /// Priors eligible for corruption that were left unchanged.
    pub kept: u64,
    /// Priors routed to the corrupted subset.
    pub noised: u64,
    pub deleted: u64,
    pub jittered: u64,
    pub text_perturbed: u64,
    pub jitter_degenerate: u64,
    /// Raw OCR items not aligned with ground truth, passed through.
    pub unaligned: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SpiConfig {
    pub probs: ModeProbs,
    pub align_iou: f64,
    pub noise_fraction: f64,
}

impl SpiConfig {
    pub fn new(probs: ModeProbs) -> Self {
        SpiConfig {
            probs,
            align_iou: DEFAULT_ALIGN_IOU,
            noise_fraction: NOISE_FRACTION,
        }
    }
}

fn split_and_corrupt(
    items: &[TextItem],
    eligible: &[bool],
    cfg: &SpiConfig,
    image: ImageSize,
    rng: &mut Pcg32,
    stats: &mut MaterializeStats,
) -> Vec<TextItem> {
    let mut out = Vec::with_capacity(items.len());
    for (item, &el) in items.iter().zip(eligible) {
        if !el {
            stats.unaligned += 1;
            out.push(item.clone());
            continue;
        }
        if !rng.bernoulli(cfg.noise_fraction) {
            stats.kept += 1;
            out.push(item.clone());
            continue;
        }
        stats.noised += 1;
        let c = corrupt_instance(item, &cfg.probs, image, rng);
        match c.mode {
            Mode::Delete => stats.deleted += 1,
            Mode::Jitter => stats.jittered += 1,
            Mode::Text => stats.text_perturbed += 1,
        }
        stats.jitter_degenerate += u64::from(c.jitter_degenerate);
        out.extend(c.item);
    }
    out
}

/// Builds the prior set for one record.
///
/// Scene-text records at gamma 0.5 corrupt only raw OCR items that are a
/// mutual-best match (IoU at least `cfg.align_iou`) of a ground-truth
/// instance; when a scene record carries no raw OCR output the priors are
/// derived from ground truth, as for synthetic data.
pub fn materialize_gamma(
    instances: &[TextItem],
    gamma: Gamma,
    source: SourceKind,
    raw_priors: Option<&[TextItem]>,
    cfg: &SpiConfig,
    image: ImageSize,
    rng: &mut Pcg32,
) -> Result<(PriorSet, MaterializeStats), SpiError> {
    let mut stats = MaterializeStats::default();
    let priors = match (gamma, source) {
        (_, SourceKind::Document) | (Gamma::Absent, _) => Vec::new(),
        (Gamma::Present, SourceKind::Scene) => raw_priors.ok_or(SpiError::MissingRawPriors)?.to_vec(),
        (Gamma::Present, SourceKind::Synthetic) => instances.to_vec(),
        (Gamma::Noisy, SourceKind::Scene) if raw_priors.is_some() => {
            let raw = raw_priors.unwrap_or_default();
            let rb: Vec<Box> = raw.iter().map(|x| x.bbox).collect();
            let gb: Vec<Box> = instances.iter().map(|x| x.bbox).collect();
            let mut eligible = vec![false; raw.len()];
            for (i, _, v) in mutual_best_pairs(&rb, &gb) {
                if v >= cfg.align_iou {
                    eligible[i] = true;
                }
            }
            split_and_corrupt(raw, &eligible, cfg, image, rng, &mut stats)
        }
        (Gamma::Noisy, _) => {
            let eligible = vec![true; instances.len()];
            split_and_corrupt(instances, &eligible, cfg, image, rng, &mut stats)
        }
    };
    Ok((PriorSet { gamma, priors }, stats))
}
