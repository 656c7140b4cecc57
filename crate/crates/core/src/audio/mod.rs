//! Synthetic spoken-event audio: clip synthesis and composition.
//!
//! Two families of procedurally generated events stand in for real corpora:
//! - a *semantic* class k renders as a pulse-train motif: a carrier tone at
//!   400 + 40k Hz gated by a class-specific on/off pattern of 8 equal slots
//!   over the clip (3 + k%5 slots on, rotated by (k/5)%8);
//! - an *acoustic* class m renders as a continuous texture: a sinusoid at
//!   100 + 25m Hz plus band-limited noise in [800+100m, 1200+100m] Hz built
//!   from 32 sinusoids whose frequencies are a fixed per-class signature.
//!
//! Composition mirrors the two dataset-construction styles: `splice`
//! concatenates clips, `overlay` mixes them at 1.0/0.5 gains over the longer
//! length. Both take the label union and reject conflicting labels.

pub mod corpus;
pub mod features;
pub mod wav;

use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("sample rate mismatch: {a} vs {b}")]
    SampleRateMismatch { a: u32, b: u32 },
    #[error("conflicting {kind:?} labels: classes {a} and {b} in one clip")]
    LabelConflict { kind: EventKind, a: u32, b: u32 },
    #[error("clip too short: {samples} samples, window needs {window}")]
    TooShort { samples: usize, window: usize },
    #[error("wav format: {0}")]
    WavFormat(String),
    #[error("corpus spec: {0}")]
    Spec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Semantic,
    Acoustic,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::Semantic => write!(f, "semantic"),
            EventKind::Acoustic => write!(f, "acoustic"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventLabel {
    pub kind: EventKind,
    pub class_id: u32,
    pub class_name: String,
    pub task_id: usize,
}

impl EventLabel {
    pub fn new(kind: EventKind, class_id: u32, task_id: usize) -> Self {
        let class_name = match kind {
            EventKind::Semantic => format!("sem_{class_id:02}"),
            EventKind::Acoustic => format!("ac_{class_id:02}"),
        };
        EventLabel {
            kind,
            class_id,
            class_name,
            task_id,
        }
    }

    /// Identity for set semantics: one label per (kind, class).
    pub fn key(&self) -> (EventKind, u32) {
        (self.kind, self.class_id)
    }
}

/// A mono audio clip with its event labels.
///
/// Labels act as a set with at most one semantic and one acoustic entry,
/// kept sorted (semantic first). `uid` is a corpus-internal identifier used
/// for caching and manifest paths; clips made outside a corpus carry 0.
/// Utility clips (silence, freshly read WAV data) may have no labels yet.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub uid: u64,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub labels: Vec<EventLabel>,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn label(&self, kind: EventKind) -> Option<&EventLabel> {
        self.labels.iter().find(|l| l.kind == kind)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Checks the representation invariants: samples in [-1, 1], sorted
    /// labels, at most one label per kind.
    pub fn validate(&self) -> Result<(), AudioError> {
        if !self.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0) {
            return Err(AudioError::Argument(
                "samples must be finite and within [-1, 1]".into(),
            ));
        }
        for pair in self.labels.windows(2) {
            if pair[0].kind == pair[1].kind {
                return Err(AudioError::LabelConflict {
                    kind: pair[0].kind,
                    a: pair[0].class_id,
                    b: pair[1].class_id,
                });
            }
            if pair[0] > pair[1] {
                return Err(AudioError::Argument("labels out of order".into()));
            }
        }
        Ok(())
    }
}

/// Set-union of labels; two different classes of the same kind cannot occur
/// in one clip.
fn union_labels(a: &[EventLabel], b: &[EventLabel]) -> Result<Vec<EventLabel>, AudioError> {
    let mut out: Vec<EventLabel> = a.to_vec();
    for lb in b {
        match out.iter().find(|l| l.kind == lb.kind) {
            Some(existing) if existing.class_id != lb.class_id => {
                return Err(AudioError::LabelConflict {
                    kind: lb.kind,
                    a: existing.class_id,
                    b: lb.class_id,
                });
            }
            Some(_) => {}
            None => out.push(lb.clone()),
        }
    }
    out.sort();
    Ok(out)
}

pub fn semantic_carrier_hz(class_id: u32) -> f64 {
    400.0 + 40.0 * class_id as f64
}

pub fn acoustic_tone_hz(class_id: u32) -> f64 {
    100.0 + 25.0 * class_id as f64
}

fn render_semantic(class_id: u32, n: usize, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
    let carrier = semantic_carrier_hz(class_id);
    let slots_on = 3 + (class_id % 5) as usize;
    let rot = ((class_id / 5) % 8) as usize;
    let on: Vec<bool> = (0..8).map(|s| (s + 8 - rot) % 8 < slots_on).collect();
    let amp = 0.8 * rng.range(0.9, 1.1);
    let phase = rng.range(0.0, 2.0 * PI);
    let w = 2.0 * PI * carrier / sample_rate as f64;
    (0..n)
        .map(|i| {
            let slot = (i * 8 / n).min(7);
            if on[slot] {
                amp * (w * i as f64 + phase).sin()
            } else {
                0.0
            }
        })
        .collect()
}

const NOISE_PARTIALS: usize = 32;

/// The noise band's partial frequencies are a fixed signature of the class,
/// independent of the per-clip seed; phases vary per clip.
fn acoustic_band_freqs(class_id: u32) -> Vec<f64> {
    let lo = 800.0 + 100.0 * class_id as f64;
    let hi = 1200.0 + 100.0 * class_id as f64;
    let mut rng = Rng::seed_from(derive_seed(0x5EED_BA5E, "acoustic-band", &[class_id as u64]));
    (0..NOISE_PARTIALS).map(|_| rng.range(lo, hi)).collect()
}

fn render_acoustic(class_id: u32, n: usize, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
    let tone = acoustic_tone_hz(class_id);
    let tone_phase = rng.range(0.0, 2.0 * PI);
    let freqs = acoustic_band_freqs(class_id);
    let phases: Vec<f64> = (0..freqs.len()).map(|_| rng.range(0.0, 2.0 * PI)).collect();
    let partial_amp = 0.3 / (freqs.len() as f64).sqrt();
    let sr = sample_rate as f64;
    let mut out = vec![0.0; n];
    for (i, s) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.6 * (2.0 * PI * tone * t + tone_phase).sin();
        for (f, p) in freqs.iter().zip(&phases) {
            v += partial_amp * (2.0 * PI * f * t + p).sin();
        }
        *s = v;
    }
    out
}

fn normalize_peak(samples: &mut [f64], target: f64) {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = target / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
}

/// Synthesizes one clip. At least one class must be given; when both are,
/// the semantic and acoustic waveforms are summed at gains 1.0/0.5 and
/// peak-normalized to 0.9. Deterministic in its arguments.
pub fn synth_clip(
    semantic: Option<u32>,
    acoustic: Option<u32>,
    duration_s: f64,
    seed: u64,
) -> Result<AudioClip, AudioError> {
    if semantic.is_none() && acoustic.is_none() {
        return Err(AudioError::Argument("at least one class required".into()));
    }
    if !(0.5..=4.0).contains(&duration_s) {
        return Err(AudioError::Argument(format!(
            "duration {duration_s} outside [0.5, 4.0] s"
        )));
    }
    let sample_rate = 8000u32;
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut rng = Rng::seed_from(seed);
    let mut labels = Vec::new();
    let sem = semantic.map(|k| {
        labels.push(EventLabel::new(EventKind::Semantic, k, 0));
        render_semantic(k, n, sample_rate, &mut rng)
    });
    let ac = acoustic.map(|m| {
        labels.push(EventLabel::new(EventKind::Acoustic, m, 0));
        render_acoustic(m, n, sample_rate, &mut rng)
    });
    let mut samples = match (sem, ac) {
        (Some(s), Some(a)) => {
            let mut mixed: Vec<f64> = s.iter().zip(&a).map(|(x, y)| x + 0.5 * y).collect();
            normalize_peak(&mut mixed, 0.9);
            mixed
        }
        (Some(s), None) => s,
        (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    // Single-source renders can exceed unit range in rare phase alignments;
    // keep the [-1, 1] invariant without clipping distortion.
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.95 {
        normalize_peak(&mut samples, 0.95);
    }
    labels.sort();
    let clip = AudioClip {
        uid: 0,
        samples,
        sample_rate,
        labels,
    };
    clip.validate()?;
    Ok(clip)
}

/// A labeled-less all-zero clip, useful as a neutral element in tests.
pub fn silence(duration_s: f64, sample_rate: u32) -> AudioClip {
    let n = (duration_s * sample_rate as f64).round() as usize;
    AudioClip {
        uid: 0,
        samples: vec![0.0; n],
        sample_rate,
        labels: Vec::new(),
    }
}

/// Concatenates b after a. Labels are the union; durations add exactly.
pub fn splice(a: &AudioClip, b: &AudioClip) -> Result<AudioClip, AudioError> {
    if a.sample_rate != b.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            a: a.sample_rate,
            b: b.sample_rate,
        });
    }
    let mut samples = Vec::with_capacity(a.samples.len() + b.samples.len());
    samples.extend_from_slice(&a.samples);
    samples.extend_from_slice(&b.samples);
    Ok(AudioClip {
        uid: 0,
        samples,
        sample_rate: a.sample_rate,
        labels: union_labels(&a.labels, &b.labels)?,
    })
}

/// Mixes b into a at half gain over max length; the shorter clip is
/// zero-padded at the end. Peak-normalizes to 0.9 only if the sum leaves
/// [-1, 1]. Labels are the union.
pub fn overlay(a: &AudioClip, b: &AudioClip) -> Result<AudioClip, AudioError> {
    if a.sample_rate != b.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            a: a.sample_rate,
            b: b.sample_rate,
        });
    }
    let n = a.samples.len().max(b.samples.len());
    let mut samples = vec![0.0; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let x = a.samples.get(i).copied().unwrap_or(0.0);
        let y = b.samples.get(i).copied().unwrap_or(0.0);
        *s = x + 0.5 * y;
    }
    if samples.iter().any(|s| s.abs() > 1.0) {
        normalize_peak(&mut samples, 0.9);
    }
    Ok(AudioClip {
        uid: 0,
        samples,
        sample_rate: a.sample_rate,
        labels: union_labels(&a.labels, &b.labels)?,
    })
}
