//! Audio ingestion and mel-spectrogram extraction: 16 kHz audio, 50 ms
//! windows with a 12.5 ms hop, 80 mel bins. Also a Griffin-Lim phase
//! reconstruction for qualitative playback, and the on-disk mel format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use thiserror::Error;

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
const MEL_MAGIC: &[u8; 6] = b"MEL80\0";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unreadable audio file {path}: {reason}")]
    BadAudio { path: String, reason: String },
    #[error("clip of {samples} samples is shorter than the {window}-sample analysis window")]
    TooShort { samples: usize, window: usize },
    #[error("bad mel file: {0}")]
    BadMelFile(String),
    #[error("png encode error: {0}")]
    Png(String),
}

/// Mono audio at a known sample rate, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Analysis geometry. Defaults: 800-sample (50 ms) window, 200-sample
/// (12.5 ms) hop, 80 bins, full band to Nyquist, natural-log compression
/// with floor 1e-5.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelParams {
    pub window: usize,
    pub hop: usize,
    pub bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub sample_rate: u32,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            window: 800,
            hop: 200,
            bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
            sample_rate: TARGET_SAMPLE_RATE,
        }
    }
}

/// frames x bins log-mel matrix plus its frame geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f64>,
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// Load a WAV file, average channels to mono, and resample to 16 kHz.
pub fn load_audio(path: &Path) -> Result<AudioClip, FeatureError> {
    let reader = hound::WavReader::open(path).map_err(|e| FeatureError::BadAudio {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| FeatureError::BadAudio {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| FeatureError::BadAudio {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?
        }
    };
    let mono: Vec<f32> = samples
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(resample(
        &AudioClip {
            samples: mono,
            sample_rate: spec.sample_rate,
        },
        TARGET_SAMPLE_RATE,
    ))
}

/// Linear-interpolation resampler. Identity when rates already match.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if clip.sample_rate == target_rate {
        return clip.clone();
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = (clip.samples.len() as f64 / ratio).floor() as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = clip.samples[i0.min(clip.samples.len() - 1)];
            let b = clip.samples[(i0 + 1).min(clip.samples.len() - 1)];
            (a as f64 + (b as f64 - a as f64) * frac) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: target_rate,
    }
}

/// Result of silence stripping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimResult {
    pub clip: AudioClip,
    /// True when nothing exceeded the threshold and the clip came back empty.
    pub all_silence: bool,
}

/// Strip leading and trailing silence. Interior samples are never touched:
/// the output is always a contiguous sub-slice of the input. Loudness is
/// measured on 200-sample (one hop) frames relative to dBFS.
pub fn trim_silence(clip: &AudioClip, threshold_db: f64) -> TrimResult {
    let frame = 200usize;
    let threshold = 10f64.powf(threshold_db / 20.0);
    let n = clip.samples.len();
    let loud = |start: usize| -> bool {
        let end = (start + frame).min(n);
        let rms = (clip.samples[start..end]
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            / (end - start).max(1) as f64)
            .sqrt();
        rms > threshold
    };
    let mut first = None;
    let mut last = None;
    let mut start = 0;
    while start < n {
        if loud(start) {
            if first.is_none() {
                first = Some(start);
            }
            last = Some((start + frame).min(n));
        }
        start += frame;
    }
    match (first, last) {
        (Some(a), Some(b)) => TrimResult {
            clip: AudioClip {
                samples: clip.samples[a..b].to_vec(),
                sample_rate: clip.sample_rate,
            },
            all_silence: false,
        },
        _ => TrimResult {
            clip: AudioClip {
                samples: Vec::new(),
                sample_rate: clip.sample_rate,
            },
            all_silence: true,
        },
    }
}

/// Exact frame count for `n` samples: `1 + (n - window) / hop`, no padding.
pub fn frame_count(n: usize, params: &MelParams) -> Option<usize> {
    if n < params.window {
        None
    } else {
        Some(1 + (n - params.window) / params.hop)
    }
}

fn fft_size(window: usize) -> usize {
    window.next_power_of_two()
}

fn hann(window: usize) -> Vec<f64> {
    (0..window)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / window as f64).cos())
        .collect()
}

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `bins x (n_fft/2 + 1)`.
fn mel_filterbank(params: &MelParams, n_fft: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(params.fmin);
    let mel_hi = hz_to_mel(params.fmax);
    let points: Vec<f64> = (0..params.bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (params.bins + 1) as f64))
        .collect();
    let bin_hz = params.sample_rate as f64 / n_fft as f64;
    let mut fb = Array2::zeros((params.bins, n_bins));
    for m in 0..params.bins {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn stft_magnitudes(
    samples: &[f32],
    params: &MelParams,
    fft: &Arc<dyn Fft<f64>>,
) -> Array2<f64> {
    let n_fft = fft_size(params.window);
    let n_bins = n_fft / 2 + 1;
    let frames = frame_count(samples.len(), params).unwrap_or(0);
    let win = hann(params.window);
    let mut out = Array2::zeros((frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = t * params.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < params.window {
                samples[start + i] as f64 * win[i]
            } else {
                0.0
            };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[t, k]] = buf[k].norm();
        }
    }
    out
}

/// Log-mel spectrogram. Errors when the clip is shorter than one window.
pub fn mel_spectrogram(clip: &AudioClip, params: &MelParams) -> Result<MelSpectrogram, FeatureError> {
    let n = clip.samples.len();
    if frame_count(n, params).is_none() {
        return Err(FeatureError::TooShort {
            samples: n,
            window: params.window,
        });
    }
    let n_fft = fft_size(params.window);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mags = stft_magnitudes(&clip.samples, params, &fft);
    let fb = mel_filterbank(params, n_fft);
    let mel = mags.dot(&fb.t());
    let data = mel.mapv(|e| e.max(params.log_floor).ln());
    Ok(MelSpectrogram {
        data,
        window: params.window,
        hop: params.hop,
        sample_rate: params.sample_rate,
    })
}

/// Phase reconstruction from a log-mel matrix. The mel energies are mapped
/// back to a linear spectrum through the transposed filterbank, then the
/// phase is iterated from zero. Deterministic for fixed iterations.
pub fn griffin_lim(mel: &MelSpectrogram, params: &MelParams, iterations: usize) -> AudioClip {
    let n_fft = fft_size(params.window);
    let n_bins = n_fft / 2 + 1;
    let fb = mel_filterbank(params, n_fft);
    // Pseudo-inverse by normalized transpose.
    let col_sums = fb.sum_axis(ndarray::Axis(0));
    let energies = mel.data.mapv(f64::exp);
    let frames = energies.nrows();
    let mut target = Array2::zeros((frames, n_bins));
    for t in 0..frames {
        for k in 0..n_bins {
            let mut acc = 0.0;
            for m in 0..params.bins {
                acc += fb[[m, k]] * energies[[t, m]];
            }
            target[[t, k]] = acc / col_sums[k].max(1e-8);
        }
    }

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let win = hann(params.window);
    let out_len = (frames - 1) * params.hop + params.window;

    // Start from zero phase.
    let mut phase = Array2::from_elem((frames, n_bins), 0.0f64);
    let mut audio = vec![0.0f32; out_len];
    for _ in 0..iterations.max(1) {
        // ISTFT with the current phase estimate.
        let mut acc = vec![0.0f64; out_len];
        let mut norm = vec![0.0f64; out_len];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            for k in 0..n_fft {
                let (mag, ph) = if k < n_bins {
                    (target[[t, k]], phase[[t, k]])
                } else {
                    (target[[t, n_fft - k]], -phase[[t, n_fft - k]])
                };
                buf[k] = Complex::from_polar(mag, ph);
            }
            inv.process(&mut buf);
            let start = t * params.hop;
            for i in 0..params.window {
                acc[start + i] += buf[i].re / n_fft as f64 * win[i];
                norm[start + i] += win[i] * win[i];
            }
        }
        for i in 0..out_len {
            audio[i] = (acc[i] / norm[i].max(1e-8)) as f32;
        }
        // Re-analyze to update the phase.
        let clip_samples: Vec<f32> = audio.clone();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let start = t * params.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < params.window {
                    clip_samples[start + i] as f64 * win[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            fwd.process(&mut buf);
            for k in 0..n_bins {
                phase[[t, k]] = buf[k].arg();
            }
        }
    }
    AudioClip {
        samples: audio,
        sample_rate: params.sample_rate,
    }
}

pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| FeatureError::BadAudio {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16;
        writer.write_sample(v).map_err(|e| FeatureError::BadAudio {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| FeatureError::BadAudio {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Write a mel matrix: magic "MEL80\0", u32 frames, u32 bins, row-major f32,
/// all little-endian.
pub fn save_mel(mel: &MelSpectrogram, path: &Path) -> Result<(), FeatureError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(MEL_MAGIC)?;
    f.write_all(&(mel.frames() as u32).to_le_bytes())?;
    f.write_all(&(mel.bins() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(mel.data.len() * 4);
    for &v in mel.data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_mel(path: &Path) -> Result<MelSpectrogram, FeatureError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)?;
    if &magic != MEL_MAGIC {
        return Err(FeatureError::BadMelFile(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let frames = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let bins = u32::from_le_bytes(u32buf) as usize;
    let mut raw = vec![0u8; frames * bins * 4];
    f.read_exact(&mut raw)?;
    let mut data = Array2::zeros((frames, bins));
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        data[[i / bins, i % bins]] =
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    let params = MelParams::default();
    Ok(MelSpectrogram {
        data,
        window: params.window,
        hop: params.hop,
        sample_rate: params.sample_rate,
    })
}

/// Export a heatmap PNG (time on x, mel bin on y, low bins at the bottom).
pub fn save_mel_png(mel: &Array2<f64>, path: &Path) -> Result<(), FeatureError> {
    let (frames, bins) = mel.dim();
    let lo = mel.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let mut img = image::RgbImage::new(frames.max(1) as u32, bins.max(1) as u32);
    for t in 0..frames {
        for b in 0..bins {
            let x = ((mel[[t, b]] - lo) / span).clamp(0.0, 1.0);
            // simple blue -> yellow ramp
            let r = (255.0 * x) as u8;
            let g = (255.0 * x.powf(0.7)) as u8;
            let bl = (255.0 * (1.0 - x)) as u8;
            img.put_pixel(t as u32, (bins - 1 - b) as u32, image::Rgb([r, g, bl]));
        }
    }
    img.save(path).map_err(|e| FeatureError::Png(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, rate: u32, amp: f32) -> Vec<f32> {
        (0..(secs * rate as f64) as usize)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn resample_16k_is_identity() {
        let clip = AudioClip {
            samples: tone(440.0, 0.1, 16000, 0.5),
            sample_rate: 16000,
        };
        let out = resample(&clip, 16000);
        assert_eq!(out.samples.len(), clip.samples.len());
        assert_eq!(out, clip);
    }

    #[test]
    fn resample_48k_gives_one_third_samples() {
        let clip = AudioClip {
            samples: tone(440.0, 0.25, 48000, 0.5),
            sample_rate: 48000,
        };
        let n = clip.samples.len();
        let out = resample(&clip, 16000);
        assert!((out.samples.len() as i64 - (n / 3) as i64).abs() <= 1);
        assert_eq!(out.sample_rate, 16000);
    }

    #[test]
    fn silence_resamples_to_silence() {
        let clip = AudioClip {
            samples: vec![0.0; 4800],
            sample_rate: 48000,
        };
        let out = resample(&clip, 16000);
        assert!(out.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn trim_keeps_all_loud_clip() {
        let clip = AudioClip {
            samples: tone(440.0, 0.2, 16000, 0.5),
            sample_rate: 16000,
        };
        let out = trim_silence(&clip, -40.0);
        assert!(!out.all_silence);
        assert_eq!(out.clip.samples.len(), clip.samples.len());
    }

    #[test]
    fn trim_flags_pure_silence() {
        let clip = AudioClip {
            samples: vec![0.0; 8000],
            sample_rate: 16000,
        };
        let out = trim_silence(&clip, -40.0);
        assert!(out.all_silence);
        assert!(out.clip.samples.is_empty());
    }

    #[test]
    fn trim_finds_tone_boundaries_within_one_frame() {
        let pad = vec![0.0f32; 3000];
        let mid = tone(440.0, 0.5, 16000, 0.5);
        let mid_len = mid.len();
        let mut samples = pad.clone();
        samples.extend(mid);
        samples.extend(pad);
        let clip = AudioClip {
            samples,
            sample_rate: 16000,
        };
        let out = trim_silence(&clip, -40.0);
        assert!(!out.all_silence);
        let got = out.clip.samples.len() as i64;
        assert!((got - mid_len as i64).abs() <= 400, "got {got}, want ~{mid_len}");
    }

    #[test]
    fn frame_counts_match_formula() {
        let p = MelParams::default();
        assert_eq!(frame_count(16000, &p), Some(77));
        assert_eq!(frame_count(800, &p), Some(1));
        assert_eq!(frame_count(799, &p), None);
        assert_eq!(frame_count(999, &p), Some(1));
        assert_eq!(frame_count(1000, &p), Some(2));
    }

    #[test]
    fn zero_signal_sits_at_log_floor() {
        let p = MelParams::default();
        let clip = AudioClip {
            samples: vec![0.0; 1600],
            sample_rate: 16000,
        };
        let mel = mel_spectrogram(&clip, &p).unwrap();
        let floor = p.log_floor.ln();
        assert!(mel.data.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn mel_is_pure() {
        let p = MelParams::default();
        let clip = AudioClip {
            samples: tone(523.0, 0.3, 16000, 0.5),
            sample_rate: 16000,
        };
        let a = mel_spectrogram(&clip, &p).unwrap();
        let b = mel_spectrogram(&clip, &p).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn too_short_clip_errors() {
        let p = MelParams::default();
        let clip = AudioClip {
            samples: vec![0.1; 700],
            sample_rate: 16000,
        };
        assert!(matches!(
            mel_spectrogram(&clip, &p),
            Err(FeatureError::TooShort { .. })
        ));
    }

    fn chirp(rate: u32, secs: f64) -> AudioClip {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let f = 150.0 + 1500.0 * t / secs;
                (0.6 * (std::f64::consts::TAU * f * t).sin()) as f32
            })
            .collect();
        AudioClip {
            samples,
            sample_rate: rate,
        }
    }

    fn correlation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let ma = a.mean().unwrap();
        let mb = b.mean().unwrap();
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            num += (x - ma) * (y - mb);
            da += (x - ma).powi(2);
            db += (y - mb).powi(2);
        }
        num / (da.sqrt() * db.sqrt()).max(1e-12)
    }

    #[test]
    fn griffin_lim_roundtrip_correlates_on_chirp() {
        let p = MelParams::default();
        let clip = chirp(16000, 0.6);
        let mel = mel_spectrogram(&clip, &p).unwrap();
        let audio = griffin_lim(&mel, &p, 40);
        let mel2 = mel_spectrogram(&audio, &p).unwrap();
        let frames = mel.frames().min(mel2.frames());
        let a = mel.data.slice(ndarray::s![..frames, ..]).to_owned();
        let b = mel2.data.slice(ndarray::s![..frames, ..]).to_owned();
        let c = correlation(&a, &b);
        assert!(c > 0.7, "mel roundtrip correlation {c}");
    }

    #[test]
    fn griffin_lim_is_deterministic_and_zero_mel_is_quiet() {
        let p = MelParams::default();
        let mel = MelSpectrogram {
            data: Array2::from_elem((10, 80), p.log_floor.ln()),
            window: p.window,
            hop: p.hop,
            sample_rate: p.sample_rate,
        };
        let a = griffin_lim(&mel, &p, 5);
        let b = griffin_lim(&mel, &p, 5);
        assert_eq!(a.samples, b.samples);
        // The pseudo-inverse amplifies the log floor, so "quiet" is judged
        // relative to a loud signal through the same pipeline.
        let loud = mel_spectrogram(&chirp(16000, 0.8), &p).unwrap();
        let loud_audio = griffin_lim(&loud, &p, 5);
        let peak = a.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        let loud_peak = loud_audio.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        assert!(
            peak < loud_peak / 5.0,
            "floor mel should be much quieter: peak {peak} vs loud {loud_peak}"
        );
    }

    #[test]
    fn mel_file_roundtrip() {
        let p = MelParams::default();
        let clip = chirp(16000, 0.2);
        let mel = mel_spectrogram(&clip, &p).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_mel(&mel, f.path()).unwrap();
        let loaded = load_mel(f.path()).unwrap();
        assert_eq!(loaded.frames(), mel.frames());
        // f32 storage: exact equality after one quantization
        for (&a, &b) in mel.data.iter().zip(loaded.data.iter()) {
            assert_eq!(a as f32, b as f32);
        }
    }

    #[test]
    fn wav_roundtrip_preserves_shape() {
        let clip = chirp(16000, 0.1);
        let f = tempfile::NamedTempFile::with_suffix(".wav").unwrap();
        save_wav(&clip, f.path()).unwrap();
        let loaded = load_audio(f.path()).unwrap();
        assert_eq!(loaded.samples.len(), clip.samples.len());
        assert_eq!(loaded.sample_rate, 16000);
    }
}
