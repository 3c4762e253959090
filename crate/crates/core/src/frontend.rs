//! Audio ingestion and log-Mel features.
//!
//! A 3 s clip at 16 kHz becomes a `1 × 128 × 24` tensor: centered STFT
//! (periodic Hann, 4096-point window, 2048 hop, reflect padding), magnitude
//! spectrum, HTK Mel filterbank, natural log with a small floor.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TARGET_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub clip_seconds: f64,
    /// Window length in samples; equal to `n_fft`.
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: TARGET_RATE,
            clip_seconds: 3.0,
            window: 4096,
            hop: 2048,
            n_fft: 4096,
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate_hz as f64).round() as usize
    }

    /// Frames produced by centered framing of one clip.
    pub fn n_frames(&self) -> usize {
        1 + self.clip_len() / self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window != self.n_fft {
            return bad(format!("window {} must equal n_fft {}", self.window, self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop {} must be in 1..={}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if !(self.f_min_hz >= 0.0
            && self.f_min_hz < self.f_max_hz
            && self.f_max_hz <= self.sample_rate_hz as f64 / 2.0)
        {
            return bad(format!(
                "need 0 <= f_min < f_max <= {}, got {}..{}",
                self.sample_rate_hz as f64 / 2.0,
                self.f_min_hz,
                self.f_max_hz
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        // Reflect padding needs at least n_fft/2 + 1 samples.
        if self.clip_len() <= self.n_fft / 2 {
            return bad("clip is shorter than half a window".into());
        }
        Ok(())
    }
}

/// One fixed-length segment of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub samples: Vec<f64>,
    pub recording_id: String,
    /// Position of the clip within its recording.
    pub index: usize,
}

/// Reads PCM16 or float32 WAV, downmixing channels by their mean.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported WAV encoding {fmt:?} {bits}-bit (need PCM16 or float32)",
                path.display()
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Format(format!(
            "{}: truncated sample frame",
            path.display()
        )));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|f| f.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((samples, spec.sample_rate))
}

/// Writes mono PCM16, clamping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Linear-interpolation resampling to 16 kHz (no anti-alias filter).
pub fn resample_to_16k(samples: &[f64], src_rate: u32) -> Result<Vec<f64>> {
    resample(samples, src_rate, TARGET_RATE)
}

pub fn resample(samples: &[f64], src_rate: u32, dst_rate: u32) -> Result<Vec<f64>> {
    if src_rate < 8000 || dst_rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "source rate {src_rate} Hz is below the supported 8000 Hz"
        )));
    }
    if src_rate == dst_rate || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    // Output sample i sits at source position i * src / dst.
    let n_out = ((samples.len() - 1) as u64 * dst_rate as u64 / src_rate as u64 + 1) as usize;
    let out = (0..n_out)
        .map(|i| {
            let num = i as u64 * src_rate as u64;
            let j = (num / dst_rate as u64) as usize;
            let frac = (num % dst_rate as u64) as f64 / dst_rate as f64;
            match samples.get(j + 1) {
                Some(&next) => samples[j] + frac * (next - samples[j]),
                None => samples[j],
            }
        })
        .collect();
    Ok(out)
}

/// Non-overlapping clips of `clip_len` samples; the remainder is dropped.
pub fn segment_with(samples: &[f64], recording_id: &str, clip_len: usize) -> Vec<Clip> {
    if clip_len == 0 {
        return Vec::new();
    }
    samples
        .chunks_exact(clip_len)
        .enumerate()
        .map(|(index, s)| Clip {
            samples: s.to_vec(),
            recording_id: recording_id.to_string(),
            index,
        })
        .collect()
}

/// 3 s clips at 16 kHz.
pub fn segment(samples: &[f64], recording_id: &str) -> Vec<Clip> {
    segment_with(samples, recording_id, MelConfig::default().clip_len())
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` edge frequencies, equally spaced on the Mel scale.
fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min_hz);
    let hi = hz_to_mel(cfg.f_max_hz);
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Peak frequency of each Mel filter.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let e = mel_edges(cfg);
    e[1..e.len() - 1].to_vec()
}

/// Triangular filters `[n_mels, n_fft/2 + 1]` with unit peaks, evaluated at
/// the FFT bin frequencies.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let edges = mel_edges(cfg);
    let n_bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    let mut w = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut w[m * n_bins..(m + 1) * n_bins];
        for (k, v) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            *v = up.min(down).max(0.0);
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "Mel filter {m} ({l:.1}..{r:.1} Hz) covers no FFT bin; too many Mel bands for n_fft {}",
                cfg.n_fft
            )));
        }
    }
    Tensor::new(&[cfg.n_mels, n_bins], w)
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Tensor,
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        let filters = mel_filterbank(&cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// `[1, n_mels, n_frames]` log-Mel magnitudes of one clip.
    pub fn compute(&self, clip: &[f64]) -> Result<Tensor> {
        let cfg = &self.cfg;
        if clip.len() != cfg.clip_len() {
            return Err(Error::InvalidArgument(format!(
                "clip has {} samples, expected {}",
                clip.len(),
                cfg.clip_len()
            )));
        }
        let padded = reflect_pad(clip, cfg.n_fft / 2);
        let n_frames = cfg.n_frames();
        let n_bins = cfg.n_bins();
        let mut mag = vec![0.0; n_bins];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut out = vec![0.0; cfg.n_mels * n_frames];
        let fb = self.filters.data();
        for t in 0..n_frames {
            let frame = &padded[t * cfg.hop..t * cfg.hop + cfg.n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for m in 0..cfg.n_mels {
                let row = &fb[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&mag).map(|(a, b)| a * b).sum();
                out[m * n_frames + t] = (e + cfg.log_floor).ln();
            }
        }
        Tensor::new(&[1, cfg.n_mels, n_frames], out)
    }
}

/// One-shot log-Mel extraction; see [`LogMel`] for repeated use.
pub fn log_mel(clip: &Clip, cfg: &MelConfig) -> Result<Tensor> {
    LogMel::new(cfg.clone())?.compute(&clip.samples)
}

/// Mirror padding that excludes the edge sample.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// WAV file to one feature tensor per clip.
pub fn wav_features(path: impl AsRef<Path>, extractor: &LogMel) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let (samples, rate) = read_wav(path)?;
    let samples = resample(&samples, rate, extractor.config().sample_rate_hz)?;
    let id = path.display().to_string();
    segment_with(&samples, &id, extractor.config().clip_len())
        .iter()
        .map(|c| extractor.compute(&c.samples))
        .collect()
}
