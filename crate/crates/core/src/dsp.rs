//! Waveform to log-Mel spectrogram.
//!
//! Framing uses a periodic Hann window with no centring: frame `t` covers
//! samples `[t*hop, t*hop + frame_size)` and the tail is zero padded, giving
//! `ceil(len / hop)` frames. A 10 s clip at 16 kHz therefore yields 313
//! frames of 128 HTK-mel bands.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{HmicError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(HmicError::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(HmicError::invalid(format!("sample {i} is not finite")));
        }
        Ok(Waveform { samples, sample_rate_hz })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub frame_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub floor_epsilon: f64,
    /// Zero-mean, unit-variance scaling of each clip's matrix before the
    /// model sees it.
    pub standardize: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate_hz: 16_000,
            frame_size: 1024,
            hop: 512,
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            floor_epsilon: 1e-10,
            standardize: true,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.frame_size % 2 != 0 {
            return Err(HmicError::Config("frame_size must be even and positive".into()));
        }
        if self.hop * 2 != self.frame_size {
            return Err(HmicError::Config("hop must be half the frame size".into()));
        }
        if self.n_mels == 0 {
            return Err(HmicError::Config("n_mels must be at least 1".into()));
        }
        if !(self.floor_epsilon > 0.0) {
            return Err(HmicError::Config("floor_epsilon must be positive".into()));
        }
        if !(0.0 <= self.f_min_hz
            && self.f_min_hz < self.f_max_hz
            && self.f_max_hz <= self.sample_rate_hz as f64 / 2.0)
        {
            return Err(HmicError::Config(format!(
                "invalid mel range {}..{} Hz for {} Hz audio",
                self.f_min_hz, self.f_max_hz, self.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// Frames produced for a clip of `n_samples`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }
}

/// Log-Mel matrix stored row-major as `[n_mels][n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(HmicError::shape(format!(
                "{} values for a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        Ok(LogMelSpectrogram { n_mels, n_frames, values })
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    /// Mel band with the largest value in `frame`.
    pub fn argmax_band(&self, frame: usize) -> usize {
        (0..self.n_mels)
            .max_by(|&a, &b| self.get(a, frame).total_cmp(&self.get(b, frame)))
            .unwrap_or(0)
    }

    /// Zero mean, unit variance over the whole matrix. A constant matrix
    /// maps to all zeros.
    pub fn standardized(&self) -> LogMelSpectrogram {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        LogMelSpectrogram {
            n_mels: self.n_mels,
            n_frames: self.n_frames,
            values: self.values.iter().map(|v| (v - mean) * scale).collect(),
        }
    }

    /// Rounds every value through `f32`, matching what the feature cache
    /// stores so cached and fresh features are bit-identical.
    pub fn quantized_f32(mut self) -> LogMelSpectrogram {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram, `[frame_size/2 + 1][n_frames]`.
pub fn stft_power(wave: &Waveform, frame_size: usize, hop: usize) -> Result<Matrix> {
    if wave.samples.is_empty() {
        return Err(HmicError::invalid("empty waveform"));
    }
    if frame_size == 0 || frame_size % 2 != 0 || hop == 0 {
        return Err(HmicError::invalid(format!(
            "frame size {frame_size} must be even and hop {hop} positive"
        )));
    }
    let n_frames = wave.samples.len().div_ceil(hop);
    let n_bins = frame_size / 2 + 1;
    let window = hann_window(frame_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_size);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_size];
    let mut out = Matrix::zeros(n_bins, n_frames);
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = wave.samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(n_bins).enumerate() {
            out[(k, t)] = c.norm_sqr();
        }
    }
    Ok(out)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_band_centres(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    mel_edges(n_mels, f_min, f_max)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<f64> {
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    let mut edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    // pin the outer edges so round-off cannot leak weight past the range
    edges[0] = f_min;
    edges[n_mels + 1] = f_max;
    edges
}

/// Unnormalized triangular filterbank, `[n_mels][n_fft_bins]`, peak 1 at
/// each filter's centre.
pub fn mel_filterbank(
    n_fft_bins: usize,
    n_mels: usize,
    sample_rate_hz: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Matrix> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if n_mels == 0 || n_fft_bins < 2 {
        return Err(HmicError::invalid("filterbank needs n_mels >= 1 and >= 2 FFT bins"));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(HmicError::invalid(format!(
            "invalid frequency range {f_min}..{f_max} Hz (nyquist {nyquist} Hz)"
        )));
    }
    let edges = mel_edges(n_mels, f_min, f_max);
    let bin_hz = nyquist / (n_fft_bins - 1) as f64;
    let mut bank = Matrix::zeros(n_mels, n_fft_bins);
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_fft_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (centre - left);
            let falling = (right - f) / (right - centre);
            bank[(m, k)] = rising.min(falling).max(0.0);
        }
        if bank.row(m).iter().all(|&w| w == 0.0) {
            return Err(HmicError::invalid(format!(
                "mel filter {m} ({left:.1}..{right:.1} Hz) covers no FFT bin; use fewer mels or a longer frame"
            )));
        }
    }
    Ok(bank)
}

/// Reusable extractor holding the filterbank for one config.
#[derive(Debug, Clone)]
pub struct LogMelExtractor {
    config: DspConfig,
    filterbank: Matrix,
}

impl LogMelExtractor {
    pub fn new(config: DspConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(
            config.frame_size / 2 + 1,
            config.n_mels,
            config.sample_rate_hz,
            config.f_min_hz,
            config.f_max_hz,
        )?;
        Ok(LogMelExtractor { config, filterbank })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// `ln(max(filterbank · power, floor_epsilon))`, without standardization.
    pub fn log_mel(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        if wave.sample_rate_hz != self.config.sample_rate_hz {
            return Err(HmicError::invalid(format!(
                "expected {} Hz audio, got {} Hz",
                self.config.sample_rate_hz, wave.sample_rate_hz
            )));
        }
        let power = stft_power(wave, self.config.frame_size, self.config.hop)?;
        let n_frames = power.cols();
        let n_bins = power.rows();
        let floor = self.config.floor_epsilon;
        let mut values = vec![0.0; self.config.n_mels * n_frames];
        for m in 0..self.config.n_mels {
            let weights = self.filterbank.row(m);
            let out = &mut values[m * n_frames..(m + 1) * n_frames];
            for (k, &w) in weights.iter().enumerate().take(n_bins) {
                if w == 0.0 {
                    continue;
                }
                for (o, p) in out.iter_mut().zip(power.row(k)) {
                    *o += w * p;
                }
            }
            for o in out.iter_mut() {
                *o = o.max(floor).ln();
            }
        }
        LogMelSpectrogram::new(self.config.n_mels, n_frames, values)
    }

    /// Model input: log-Mel, standardized if configured, rounded to `f32`.
    pub fn features(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        let lm = self.log_mel(wave)?;
        let lm = if self.config.standardize { lm.standardized() } else { lm };
        Ok(lm.quantized_f32())
    }
}

/// One-shot log-Mel with the given config.
pub fn log_mel(wave: &Waveform, config: &DspConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(config.clone())?.log_mel(wave)
}

/// Reads a 16-bit PCM mono WAV file, scaling samples to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(HmicError::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(HmicError::invalid(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(to_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn to_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

const CACHE_MAGIC: &[u8; 8] = b"HMICLMEL";

/// Feature cache layout: 8-byte magic, `u32` n_mels, `u32` n_frames, then
/// row-major little-endian `f32` values.
pub fn write_feature_cache<W: Write>(mut w: W, spec: &LogMelSpectrogram) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(spec.n_mels as u32).to_le_bytes())?;
    w.write_all(&(spec.n_frames as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(spec.values.len() * 4);
    for &v in &spec.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_cache<R: Read>(mut r: R) -> Result<LogMelSpectrogram> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != CACHE_MAGIC {
        return Err(HmicError::invalid("feature cache has the wrong magic"));
    }
    let n_mels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n_mels * n_frames * 4 {
        return Err(HmicError::shape(format!(
            "feature cache holds {} bytes, expected {}",
            raw.len(),
            n_mels * n_frames * 4
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    LogMelSpectrogram::new(n_mels, n_frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(),
            16000,
        )
        .unwrap()
    }

    /// Direct O(N²) DFT power of one windowed frame.
    fn dft_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn frame_count_for_ten_seconds() {
        let w = Waveform::new(vec![0.0; 160_000], 16000).unwrap();
        let p = stft_power(&w, 1024, 512).unwrap();
        assert_eq!((p.rows(), p.cols()), (513, 313));
    }

    #[test]
    fn silence_has_zero_power_and_floor_log() {
        let w = Waveform::new(vec![0.0; 4096], 16000).unwrap();
        let p = stft_power(&w, 1024, 512).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
        let lm = log_mel(&w, &DspConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(lm.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn empty_waveform_is_an_error() {
        let w = Waveform { samples: vec![], sample_rate_hz: 16000 };
        assert!(stft_power(&w, 1024, 512).is_err());
    }

    #[test]
    fn impulse_spectrum_is_flat() {
        let window = hann_window(1024);
        for pos in [0usize, 256, 300] {
            let mut samples = vec![0.0; 2048];
            samples[pos] = 1.0;
            let w = Waveform::new(samples, 16000).unwrap();
            let p = stft_power(&w, 1024, 512).unwrap();
            let mut frame = vec![0.0; 1024];
            frame[pos] = window[pos];
            let oracle = dft_power(&frame);
            let expected = window[pos] * window[pos];
            for k in 0..513 {
                assert!((p[(k, 0)] - oracle[k]).abs() < 1e-12);
                assert!((p[(k, 0)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stft_matches_direct_dft_on_noise_like_frame() {
        let samples: Vec<f64> = (0..1500).map(|i| ((i * 7919) % 211) as f64 / 211.0 - 0.5).collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        let p = stft_power(&w, 1024, 512).unwrap();
        let window = hann_window(1024);
        // frame 2 starts at 1024 and is zero padded past sample 1499
        let frame: Vec<f64> = (0..1024)
            .map(|i| samples.get(1024 + i).copied().unwrap_or(0.0) * window[i])
            .collect();
        let oracle = dft_power(&frame);
        for k in 0..513 {
            assert!((p[(k, 2)] - oracle[k]).abs() < 1e-9 * (1.0 + oracle[k]));
        }
    }

    #[test]
    fn htk_mel_at_one_khz() {
        let expected = 2595.0 * (1.0 + 1000.0f64 / 700.0).log10();
        assert_eq!(hz_to_mel(1000.0), expected);
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_structure() {
        let bank = mel_filterbank(513, 128, 16000, 0.0, 8000.0).unwrap();
        for m in 0..128 {
            let row = bank.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let nz: Vec<usize> = (0..513).filter(|&k| row[k] > 0.0).collect();
            assert!(!nz.is_empty(), "filter {m} is empty");
            assert_eq!(nz.len(), nz[nz.len() - 1] - nz[0] + 1, "filter {m} is not contiguous");
        }
        for k in 0..513 {
            let col: f64 = (0..128).map(|m| bank[(m, k)]).sum();
            assert!(col <= 1.0 + 1e-12, "column {k} sums to {col}");
        }
    }

    #[test]
    fn single_filter_spans_range() {
        let bank = mel_filterbank(513, 1, 16000, 0.0, 8000.0).unwrap();
        let centre = mel_band_centres(1, 0.0, 8000.0)[0];
        let centre_bin = (centre / (8000.0 / 512.0)).round() as usize;
        assert_eq!(bank[(0, 0)], 0.0);
        assert_eq!(bank[(0, 512)], 0.0);
        assert!(bank[(0, 1)] > 0.0 && bank[(0, 511)] > 0.0);
        let peak = (0..513).max_by(|&a, &b| bank[(0, a)].total_cmp(&bank[(0, b)])).unwrap();
        assert!(peak.abs_diff(centre_bin) <= 1);
    }

    #[test]
    fn filterbank_rejects_bad_ranges() {
        assert!(mel_filterbank(513, 128, 16000, 100.0, 50.0).is_err());
        assert!(mel_filterbank(513, 128, 16000, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(513, 0, 16000, 0.0, 8000.0).is_err());
        assert!(mel_filterbank(513, 128, 16000, -1.0, 8000.0).is_err());
    }

    #[test]
    fn shape_and_tone_localization() {
        let cfg = DspConfig::default();
        let ex = LogMelExtractor::new(cfg.clone()).unwrap();
        let lm = ex.log_mel(&sine(1000.0, 160_000, 0.5)).unwrap();
        assert_eq!((lm.n_mels, lm.n_frames), (128, 313));
        let centres = mel_band_centres(128, 0.0, 8000.0);
        let nearest = (0..128)
            .min_by(|&a, &b| (centres[a] - 1000.0).abs().total_cmp(&(centres[b] - 1000.0).abs()))
            .unwrap();
        for t in 0..lm.n_frames {
            assert_eq!(lm.argmax_band(t), nearest, "frame {t}");
        }
    }

    #[test]
    fn scaling_shifts_log_values() {
        let cfg = DspConfig::default();
        let w = sine(440.0, 8000, 0.1);
        let scaled = Waveform::new(w.samples.iter().map(|s| s * 3.0).collect(), 16000).unwrap();
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&scaled, &cfg).unwrap();
        let shift = 2.0 * 3f64.ln();
        let floor = cfg.floor_epsilon.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor + 1.0 {
                assert!((y - x - shift).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let w = Waveform::new(vec![0.1; 1000], 44100).unwrap();
        assert!(log_mel(&w, &DspConfig::default()).is_err());
    }

    #[test]
    fn standardize_constant_and_moments() {
        let lm = LogMelSpectrogram::new(2, 2, vec![3.0; 4]).unwrap().standardized();
        assert!(lm.values.iter().all(|&v| v == 0.0));
        let lm = LogMelSpectrogram::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().standardized();
        let mean: f64 = lm.values.iter().sum::<f64>() / 4.0;
        let var: f64 = lm.values.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_roundtrip_is_exact_after_quantization() {
        let lm = LogMelSpectrogram::new(2, 3, vec![0.1, -2.5, 3.3, 1e-3, 7.0, -0.0])
            .unwrap()
            .quantized_f32();
        let mut buf = Vec::new();
        write_feature_cache(&mut buf, &lm).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(read_feature_cache(buf.as_slice()).unwrap(), lm);
        buf[0] = b'X';
        assert!(read_feature_cache(buf.as_slice()).is_err());
    }

    #[test]
    fn wav_roundtrip_and_stereo_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(300.0, 1600, 0.5);
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(read_wav(&stereo).is_err());
    }
}
