//! Minimal 16-bit PCM mono WAV codec.
//!
//! The decoder is defensive: it walks the RIFF chunk list with explicit
//! bounds checks, skips unknown chunks (honoring word alignment), and rejects
//! anything that is not 16-bit PCM mono. It must never panic on arbitrary
//! bytes; it is one of the fuzzed entry points.

use super::{AudioClip, AudioError};
use std::path::Path;

fn u16le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32le(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Serializes samples as a canonical 44-byte-header WAV file. Samples are
/// clamped to [-1, 1] and quantized with round(s * 32767).
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    // Byte rate saturates: rates above u32::MAX / 2 come only from decoded
    // foreign files, and the field is informational for mono 16-bit PCM.
    out.extend_from_slice(&sample_rate.saturating_mul(2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Parses WAV bytes into (sample_rate, samples in [-1, 1]).
pub fn decode_wav(bytes: &[u8]) -> Result<(u32, Vec<f64>), AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::WavFormat("shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::WavFormat("missing RIFF/WAVE magic".into()));
    }
    let mut off = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32le(bytes, off + 4) as usize;
        let body_start = off + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| AudioError::WavFormat("chunk size overflow".into()))?;
        if body_end > bytes.len() {
            return Err(AudioError::WavFormat(format!(
                "chunk {:?} truncated: declares {size} bytes past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::WavFormat("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((u16le(body, 0), u16le(body, 2), u32le(body, 4), u16le(body, 14)));
            }
            b"data" => {
                data = Some(body);
                // First data chunk wins; anything after it is ignored.
                break;
            }
            _ => {}
        }
        // Chunks are word-aligned: odd sizes are followed by a pad byte.
        off = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::WavFormat("no fmt chunk".into()))?;
    if format != 1 {
        return Err(AudioError::WavFormat(format!(
            "unsupported encoding {format}, only PCM (1) supported"
        )));
    }
    if channels != 1 {
        return Err(AudioError::WavFormat(format!(
            "unsupported channel count {channels}, only mono supported"
        )));
    }
    if bits != 16 {
        return Err(AudioError::WavFormat(format!(
            "unsupported bit depth {bits}, only 16 supported"
        )));
    }
    if rate == 0 {
        return Err(AudioError::WavFormat("sample rate 0".into()));
    }
    let data = data.ok_or_else(|| AudioError::WavFormat("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(AudioError::WavFormat("odd data chunk length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| (f64::from(i16::from_le_bytes([c[0], c[1]])) / 32767.0).clamp(-1.0, 1.0))
        .collect();
    Ok((rate, samples))
}

pub fn wav_write(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav(&clip.samples, clip.sample_rate))?;
    Ok(())
}

/// Reads a WAV file into a clip. Labels are not stored in WAV; they come from
/// the corpus manifest, so the returned clip has none.
pub fn wav_read(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = std::fs::read(path)?;
    let (sample_rate, samples) = decode_wav(&bytes)?;
    Ok(AudioClip {
        uid: 0,
        samples,
        sample_rate,
        labels: Vec::new(),
    })
}
