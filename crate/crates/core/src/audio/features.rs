//! Log-magnitude STFT features: the model's input representation.

use super::{AudioClip, AudioError};
use crate::tensor::Tensor;
use std::f64::consts::PI;

pub const NUM_BINS: usize = 64;
pub const LOG_FLOOR: f64 = -10.0;
const WINDOW_S: f64 = 0.025;
const HOP_S: f64 = 0.010;
/// Bins are linearly spaced over 0..4 kHz regardless of sample rate.
const MAX_HZ: f64 = 4000.0;

#[derive(Clone, Debug)]
pub struct FeatureSeq {
    /// num_frames x NUM_BINS log-magnitudes, each >= LOG_FLOOR.
    pub frames: Tensor,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
}

impl FeatureSeq {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn window_samples(sample_rate: u32) -> usize {
    (WINDOW_S * sample_rate as f64).round() as usize
}

pub fn hop_samples(sample_rate: u32) -> usize {
    (HOP_S * sample_rate as f64).round() as usize
}

pub fn bin_center_hz(bin: usize) -> f64 {
    MAX_HZ * bin as f64 / NUM_BINS as f64
}

/// Short-time magnitude spectrum: 25 ms Hann window, 10 ms hop, 64 linearly
/// spaced bins over 0..4 kHz, natural log floored at -10.
pub fn featurize(clip: &AudioClip) -> Result<FeatureSeq, AudioError> {
    let window = window_samples(clip.sample_rate);
    let hop = hop_samples(clip.sample_rate);
    let n = clip.samples.len();
    if n < window {
        return Err(AudioError::TooShort {
            samples: n,
            window,
        });
    }
    let num_frames = 1 + (n - window) / hop;
    // Hann window and per-bin Fourier basis over one window.
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / window as f64).cos()))
        .collect();
    let sr = clip.sample_rate as f64;
    let mut basis_cos = vec![0.0; NUM_BINS * window];
    let mut basis_sin = vec![0.0; NUM_BINS * window];
    for j in 0..NUM_BINS {
        let w = 2.0 * PI * bin_center_hz(j) / sr;
        for i in 0..window {
            basis_cos[j * window + i] = (w * i as f64).cos() * hann[i];
            basis_sin[j * window + i] = (w * i as f64).sin() * hann[i];
        }
    }
    let mut frames = Tensor::zeros(num_frames, NUM_BINS);
    for f in 0..num_frames {
        let seg = &clip.samples[f * hop..f * hop + window];
        for j in 0..NUM_BINS {
            let (mut re, mut im) = (0.0, 0.0);
            let bc = &basis_cos[j * window..(j + 1) * window];
            let bs = &basis_sin[j * window..(j + 1) * window];
            for i in 0..window {
                re += seg[i] * bc[i];
                im += seg[i] * bs[i];
            }
            let mag = (re * re + im * im).sqrt();
            frames.set(f, j, mag.ln().max(LOG_FLOOR));
        }
    }
    Ok(FeatureSeq {
        frames,
        frame_len_s: WINDOW_S,
        frame_hop_s: HOP_S,
    })
}

/// Time-averaged feature vector; the representation behind the
/// nearest-centroid separability oracle.
pub fn mean_feature(fs: &FeatureSeq) -> Vec<f64> {
    let m = fs.frames.mean_rows().expect("FeatureSeq has >= 1 frame");
    m.data().to_vec()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trains per-class centroids on `train` mean-feature vectors and reports
/// nearest-centroid accuracy on `test`. Entries are (vector, class index).
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    use std::collections::BTreeMap;
    assert!(!train.is_empty() && !test.is_empty());
    let dim = train[0].0.len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (v, c) in train {
        let entry = sums.entry(*c).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, x) in entry.0.iter_mut().zip(v) {
            *s += x;
        }
        entry.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.iter().map(|s| s / n as f64).collect()))
        .collect();
    let mut correct = 0usize;
    for (v, c) in test {
        let best = centroids
            .iter()
            .min_by(|(_, a), (_, b)| {
                sq_dist(v, a).partial_cmp(&sq_dist(v, b)).unwrap()
            })
            .map(|(cls, _)| *cls)
            .unwrap();
        if best == *c {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
