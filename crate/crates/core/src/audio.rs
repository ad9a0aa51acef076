//! Acoustic front end: 50 ms Hann frames every 12.5 ms, 80 log-mel bands on
//! the HTK scale, first-order deltas, 160 features per frame.
//!
//! Everything here is deterministic. The DMF1 feature file format is
//! `"DMF1" | u32 frames | u32 160 | frames×160 f32`, all little endian.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const FEATURE_DIM: usize = 2 * N_MELS;
pub const FRAME_WIDTH_MS: f64 = 50.0;
pub const FRAME_STEP_MS: f64 = 12.5;
pub const LOG_FLOOR: f64 = 1e-10;

const DMF_MAGIC: &[u8; 4] = b"DMF1";

/// `T_a × 160` acoustic feature sequence (80 log-mel + 80 deltas).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureMatrix {
    frames: Tensor<f32>,
    pub sample_rate: u32,
}

impl AudioFeatureMatrix {
    pub fn new(frames: Tensor<f32>, sample_rate: u32) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != FEATURE_DIM {
            return Err(Error::Shape {
                op: "audio features",
                lhs: frames.shape().to_vec(),
                rhs: vec![FEATURE_DIM],
            });
        }
        Ok(Self { frames, sample_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.frames
    }
}

/// Frame width and hop in samples at `sample_rate`.
pub fn frame_geometry(sample_rate: u32) -> Result<(usize, usize)> {
    if sample_rate == 0 {
        return Err(Error::contract("sample rate must be positive"));
    }
    let width = f64::from(sample_rate) * FRAME_WIDTH_MS / 1000.0;
    let step = f64::from(sample_rate) * FRAME_STEP_MS / 1000.0;
    if width.fract() != 0.0 || step.fract() != 0.0 {
        return Err(Error::contract(format!(
            "sample rate {sample_rate} Hz does not give whole-sample frames"
        )));
    }
    Ok((width as usize, step as usize))
}

/// Number of frames for a signal of `num_samples`; `None` if shorter than one frame.
pub fn frame_count(num_samples: usize, width: usize, step: usize) -> Option<usize> {
    (num_samples >= width).then(|| (num_samples - width) / step + 1)
}

fn hann(width: usize) -> Vec<f64> {
    (0..width)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / width as f64).cos())
        .collect()
}

/// Overlapping Hann-windowed frames of 50 ms with a 12.5 ms hop.
pub fn frame_signal(samples: &[f32], sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let (width, step) = frame_geometry(sample_rate)?;
    let count = frame_count(samples.len(), width, step).ok_or(Error::TooShort {
        samples: samples.len(),
        required: width,
    })?;
    let window = hann(width);
    Ok((0..count)
        .map(|i| {
            samples[i * step..i * step + width]
                .iter()
                .zip(&window)
                .map(|(&s, &w)| f64::from(s) * w)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Power spectrum → triangular mel filters → natural log.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    /// Per filter: first FFT bin and weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl LogMel {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let nyquist = f64::from(sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let first = weights.first().map_or(0, |&(k, _)| k);
                (first, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
            filters,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    /// Filterbank sized for one frame at `sample_rate`.
    pub fn for_rate(sample_rate: u32) -> Result<Self> {
        let (width, _) = frame_geometry(sample_rate)?;
        Ok(Self::new(sample_rate, width, N_MELS))
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..self.n_fft)
            .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let power = self.power_spectrum(frame);
        self.filters
            .iter()
            .map(|(first, w)| {
                let energy: f64 = w.iter().enumerate().map(|(i, &wi)| wi * power[first + i]).sum();
                energy.max(LOG_FLOOR).ln()
            })
            .collect()
    }
}

/// Log-mel energies of one windowed frame.
pub fn log_mel(frame: &[f64], sample_rate: u32, n_mels: usize) -> Vec<f64> {
    LogMel::new(sample_rate, frame.len(), n_mels).compute(frame)
}

/// Append first-order deltas `(x[t+1] - x[t-1]) / 2` with edge replication.
pub fn add_deltas(mel: &[Vec<f64>]) -> Result<Tensor<f32>> {
    let t = mel.len();
    if t == 0 {
        return Err(Error::contract("delta computation needs at least one frame"));
    }
    let bands = mel[0].len();
    let mut data = Vec::with_capacity(t * bands * 2);
    for i in 0..t {
        let prev = &mel[i.saturating_sub(1)];
        let next = &mel[(i + 1).min(t - 1)];
        data.extend(mel[i].iter().map(|&v| v as f32));
        data.extend(next.iter().zip(prev).map(|(&n, &p)| ((n - p) / 2.0) as f32));
    }
    Tensor::new(&[t, bands * 2], data)
}

/// Full pipeline on raw samples.
pub fn featurize_samples(samples: &[f32], sample_rate: u32) -> Result<AudioFeatureMatrix> {
    let frames = frame_signal(samples, sample_rate)?;
    let bank = LogMel::for_rate(sample_rate)?;
    let mel: Vec<Vec<f64>> = frames.iter().map(|f| bank.compute(f)).collect();
    AudioFeatureMatrix::new(add_deltas(&mel)?, sample_rate)
}

/// Read a 16 kHz mono 16-bit PCM WAV file and featurize it.
pub fn featurize_wav(path: &Path) -> Result<AudioFeatureMatrix> {
    let file = fs::File::open(path).with_path(path)?;
    let reader = hound::WavReader::new(BufReader::new(file))
        .map_err(|e| Error::format(path, format!("unreadable WAV: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "unsupported sample format {:?} with {} bits; need 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            path,
            format!("sample rate {} Hz; only {SAMPLE_RATE} Hz is accepted", spec.sample_rate),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| Error::format(path, format!("corrupt sample data: {e}")))?;
    featurize_samples(&samples, SAMPLE_RATE)
}

pub fn encode_dmf(features: &Tensor<f32>) -> Result<Vec<u8>> {
    if features.rank() != 2 || features.cols() != FEATURE_DIM {
        return Err(Error::Shape {
            op: "DMF1 encode",
            lhs: features.shape().to_vec(),
            rhs: vec![FEATURE_DIM],
        });
    }
    let mut out = Vec::with_capacity(12 + features.len() * 4);
    out.extend_from_slice(DMF_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dmf(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != DMF_MAGIC {
        return Err(Error::format(path, "missing DMF1 header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if cols != FEATURE_DIM {
        return Err(Error::format(path, format!("feature width {cols}, expected {FEATURE_DIM}")));
    }
    if frames == 0 || bytes.len() != 12 + frames * cols * 4 {
        return Err(Error::format(
            path,
            format!("{} payload bytes for {frames}×{cols} floats", bytes.len() - 12),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[frames, cols], data)
}

pub fn write_dmf(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes = encode_dmf(features)?;
    let mut f = fs::File::create(path).with_path(path)?;
    f.write_all(&bytes).with_path(path)
}

pub fn read_dmf(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_path(path)?;
    decode_dmf(&bytes, path)
}

/// Per-dimension mean/standard deviation normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURE_DIM],
            std: vec![1.0; FEATURE_DIM],
        }
    }

    /// Statistics over every frame of every matrix.
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum = vec![0f64; FEATURE_DIM];
        let mut sq = vec![0f64; FEATURE_DIM];
        let mut n = 0usize;
        for m in matrices {
            for r in 0..m.rows() {
                for (j, &v) in m.row(r).iter().enumerate() {
                    sum[j] += f64::from(v);
                    sq[j] += f64::from(v) * f64::from(v);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::contract("cannot fit normalization on zero frames"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / nf - m * m).max(0.0).sqrt().max(1e-5)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, features: &Tensor<f32>) -> Tensor<f32> {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        let (w, s) = frame_geometry(16_000).unwrap();
        assert_eq!((w, s), (800, 200));
        assert_eq!(frame_signal(&vec![0.0; 16_000], 16_000).unwrap().len(), 77);
        assert_eq!(frame_signal(&vec![0.0; 800], 16_000).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&vec![0.0; 799], 16_000),
            Err(Error::TooShort { samples: 799, required: 800 })
        ));
    }

    #[test]
    fn silence_hits_the_floor() {
        let mel = log_mel(&[0.0; 800], 16_000, 80);
        assert_eq!(mel.len(), 80);
        assert!(mel.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn sine_at_filter_center_peaks_in_that_band() {
        let bank = LogMel::for_rate(16_000).unwrap();
        let window = hann(800);
        for m in [10, 25, 40, 55, 70] {
            let f = bank.center_frequencies()[m];
            let frame: Vec<f64> = (0..800)
                .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16_000.0).sin() * window[n])
                .collect();
            let mel = bank.compute(&frame);
            let argmax = mel
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, m, "sine at {f:.1} Hz");
        }
    }

    #[test]
    fn gain_adds_constant_in_log_domain() {
        let bank = LogMel::for_rate(16_000).unwrap();
        let frame: Vec<f64> = (0..800).map(|n| ((n * 7919) % 101) as f64 / 101.0 - 0.5).collect();
        let loud: Vec<f64> = frame.iter().map(|v| v * 10.0).collect();
        let (a, b) = (bank.compute(&frame), bank.compute(&loud));
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 100f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn deltas() {
        let constant = vec![vec![2.0; 3]; 4];
        let f = add_deltas(&constant).unwrap();
        assert!((0..4).all(|r| f.row(r)[3..].iter().all(|&d| d == 0.0)));

        let ramp: Vec<Vec<f64>> = (0..5).map(|t| vec![t as f64; 2]).collect();
        let f = add_deltas(&ramp).unwrap();
        for r in 1..4 {
            assert_eq!(&f.row(r)[2..], &[1.0, 1.0]);
        }
        assert_eq!(&f.row(0)[2..], &[0.5, 0.5]);

        let single = add_deltas(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(single.data(), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn dmf_rejects_bad_width() {
        let mut bytes = encode_dmf(&Tensor::zeros(&[2, FEATURE_DIM])).unwrap();
        bytes[8] = 7;
        assert!(decode_dmf(&bytes, Path::new("x.dmf")).is_err());
        assert!(decode_dmf(b"RIFF0000", Path::new("x.dmf")).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let m = Tensor::new(
            &[2, FEATURE_DIM],
            (0..2 * FEATURE_DIM).map(|i| i as f32).collect(),
        )
        .unwrap();
        let norm = FeatureNorm::fit([&m]).unwrap();
        let z = norm.apply(&m);
        assert!((z.row(0)[0] + 1.0).abs() < 1e-5 && (z.row(1)[0] - 1.0).abs() < 1e-5);
    }
}
