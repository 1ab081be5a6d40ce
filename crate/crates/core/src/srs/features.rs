//! Log mel filterbank features and their exact input gradient.
//!
//! The pipeline is fixed on purpose: Hann window, real DFT power spectrum,
//! triangular mel filterbank, log compression. Keeping it small makes the
//! hand-written backward pass auditable against finite differences.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::SrsError;
use crate::audio::{Waveform, SAMPLE_RATE};

/// Framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub num_filters: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { frame_len: 256, hop: 128, num_filters: 24, log_floor: 1e-8 }
    }
}

impl FeatureConfig {
    pub fn num_frames(&self, samples: usize) -> Result<usize, SrsError> {
        if samples < self.frame_len {
            return Err(SrsError::VoiceTooShort { len: samples, needed: self.frame_len });
        }
        Ok(1 + (samples - self.frame_len) / self.hop)
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    fn validate(&self) -> Result<(), SrsError> {
        if self.frame_len < 16 || !self.frame_len.is_power_of_two() {
            return Err(SrsError::BadConfig("frame_len must be a power of two, at least 16"));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(SrsError::BadConfig("hop must be in 1..=frame_len"));
        }
        if self.num_filters < 4 {
            return Err(SrsError::BadConfig("need at least 4 mel filters"));
        }
        if !(self.log_floor > 0.0) {
            return Err(SrsError::BadConfig("log_floor must be positive"));
        }
        Ok(())
    }
}

/// Row-major frames-by-filters feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed tables for one feature configuration: window, filterbank,
/// FFT plan for the forward pass, DFT basis for the backward pass.
pub struct FeaturePlan {
    pub cfg: FeatureConfig,
    hann: Vec<f64>,
    /// num_filters x num_bins triangular weights.
    mel: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// cos(2 pi k n / N) and sin(2 pi k n / N), k-major, built lazily on the
    /// first backward pass (the forward pass never needs them).
    dft_cos: std::sync::OnceLock<Vec<f64>>,
    dft_sin: std::sync::OnceLock<Vec<f64>>,
}

impl FeaturePlan {
    pub fn new(cfg: FeatureConfig) -> Result<Self, SrsError> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let tau = std::f64::consts::TAU;
        let hann: Vec<f64> =
            (0..n).map(|i| 0.5 * (1.0 - (tau * i as f64 / n as f64).cos())).collect();
        let mel = build_mel_bank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(FeaturePlan { cfg, hann, mel, fft, dft_cos: Default::default(), dft_sin: Default::default() })
    }

    pub fn mel_weight(&self, filter: usize, bin: usize) -> f64 {
        self.mel[filter * self.cfg.num_bins() + bin]
    }

    fn dft_tables(&self) -> (&[f64], &[f64]) {
        let n = self.cfg.frame_len;
        let bins = self.cfg.num_bins();
        let tau = std::f64::consts::TAU;
        let cos = self.dft_cos.get_or_init(|| {
            let mut t = vec![0.0; bins * n];
            for k in 0..bins {
                for i in 0..n {
                    t[k * n + i] = (tau * k as f64 * i as f64 / n as f64).cos();
                }
            }
            t
        });
        let sin = self.dft_sin.get_or_init(|| {
            let mut t = vec![0.0; bins * n];
            for k in 0..bins {
                for i in 0..n {
                    t[k * n + i] = (tau * k as f64 * i as f64 / n as f64).sin();
                }
            }
            t
        });
        (cos, sin)
    }

    /// Forward pass keeping per-frame spectra and energies for the backward
    /// pass.
    pub fn forward(&self, x: &Waveform) -> Result<FeatureForward, SrsError> {
        let cfg = &self.cfg;
        let frames = cfg.num_frames(x.len())?;
        let n = cfg.frame_len;
        let bins = cfg.num_bins();
        let filters = cfg.num_filters;
        let mut features = vec![0.0; frames * filters];
        let mut caches = Vec::with_capacity(frames);
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * cfg.hop;
            for i in 0..n {
                buf[i] = Complex::new(x.samples[start + i] * self.hann[i], 0.0);
            }
            self.fft.process(&mut buf);
            let mut re = Vec::with_capacity(bins);
            let mut im = Vec::with_capacity(bins);
            for b in buf.iter().take(bins) {
                re.push(b.re);
                im.push(b.im);
            }
            let mut energies = vec![0.0; filters];
            for (j, e) in energies.iter_mut().enumerate() {
                let row = &self.mel[j * bins..(j + 1) * bins];
                let mut acc = 0.0;
                for k in 0..bins {
                    acc += row[k] * (re[k] * re[k] + im[k] * im[k]);
                }
                *e = acc;
            }
            for (j, &e) in energies.iter().enumerate() {
                features[t * filters + j] = (cfg.log_floor + e).ln();
            }
            caches.push(FrameCache { re, im, energies });
        }
        Ok(FeatureForward {
            features: FeatureMatrix { rows: frames, cols: filters, data: features },
            caches,
        })
    }

    /// Backward pass: gradient of a scalar through the feature matrix back to
    /// the input samples. `grad_features` is laid out like the feature matrix.
    pub fn backward(
        &self,
        fwd: &FeatureForward,
        grad_features: &[f64],
        input_len: usize,
    ) -> Vec<f64> {
        let cfg = &self.cfg;
        let n = cfg.frame_len;
        let bins = cfg.num_bins();
        let filters = cfg.num_filters;
        let (cos_t, sin_t) = self.dft_tables();
        let mut grad_x = vec![0.0; input_len];
        let mut grad_power = vec![0.0; bins];
        for (t, cache) in fwd.caches.iter().enumerate() {
            let gf = &grad_features[t * filters..(t + 1) * filters];
            // log and filterbank stages.
            for g in grad_power.iter_mut() {
                *g = 0.0;
            }
            for j in 0..filters {
                let g_energy = gf[j] / (cfg.log_floor + cache.energies[j]);
                if g_energy == 0.0 {
                    continue;
                }
                let row = &self.mel[j * bins..(j + 1) * bins];
                for k in 0..bins {
                    grad_power[k] += row[k] * g_energy;
                }
            }
            // Power spectrum stage: dP_k/dw_i = 2(Re_k cos - Im_k sin).
            let start = t * cfg.hop;
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..bins {
                    let gp = grad_power[k];
                    if gp == 0.0 {
                        continue;
                    }
                    acc += gp
                        * 2.0
                        * (cache.re[k] * cos_t[k * n + i] - cache.im[k] * sin_t[k * n + i]);
                }
                grad_x[start + i] += self.hann[i] * acc;
            }
        }
        grad_x
    }
}

/// Per-frame intermediates kept by [`FeaturePlan::forward`].
pub struct FrameCache {
    re: Vec<f64>,
    im: Vec<f64>,
    pub energies: Vec<f64>,
}

pub struct FeatureForward {
    pub features: FeatureMatrix,
    caches: Vec<FrameCache>,
}

fn build_mel_bank(cfg: &FeatureConfig) -> Vec<f64> {
    let bins = cfg.num_bins();
    let filters = cfg.num_filters;
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let centers: Vec<f64> =
        (0..filters + 2).map(|i| mel_to_hz(mel_max * i as f64 / (filters + 1) as f64)).collect();
    let mut bank = vec![0.0; filters * bins];
    for j in 0..filters {
        let (lo, mid, hi) = (centers[j], centers[j + 1], centers[j + 2]);
        for k in 0..bins {
            let f = k as f64 * SAMPLE_RATE as f64 / cfg.frame_len as f64;
            let w = if f >= lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank[j * bins + k] = w;
        }
    }
    bank
}

/// One-shot feature extraction. Builds the plan internally; hold a
/// [`FeaturePlan`] (or an embedder) when calling repeatedly.
pub fn extract_features(x: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix, SrsError> {
    Ok(FeaturePlan::new(cfg.clone())?.forward(x)?.features)
}
