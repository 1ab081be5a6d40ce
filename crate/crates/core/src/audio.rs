//! Waveforms, WAV files, synthetic voices, and convolution.
//!
//! The toolkit works on 16 kHz mono audio held as `f64` samples in [-1, 1].
//! Disk format is deliberately rigid: 16-bit PCM WAV, one channel, 16 kHz.
//! Anything else is rejected at load time rather than resampled, because a
//! silent resample would change attack budgets measured in raw sample units.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::rng::{derive_seed, seeded_rng};

/// Sample rate every waveform in the toolkit uses.
pub const SAMPLE_RATE: u32 = 16_000;

/// Largest value storable in 16-bit PCM after the 1/32768 scaling.
pub const PCM_MAX: f64 = 32_767.0 / 32_768.0;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("unsupported WAV encoding: format tag {0}, expected PCM (1)")]
    NotPcm(u16),
    #[error("expected mono audio, file has {0} channels")]
    NotMono(u16),
    #[error("expected 16-bit samples, file has {0} bits")]
    NotSixteenBit(u16),
    #[error("expected {SAMPLE_RATE} Hz audio, file is {0} Hz")]
    WrongRate(u32),
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("empty waveform")]
    Empty,
    #[error("waveform is silent (zero power)")]
    Silent,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// A mono 16 kHz audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared sample value.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, &s| m.max(s.abs()))
    }

    /// Errors unless every sample is finite.
    pub fn check_finite(&self) -> Result<(), AudioError> {
        match self.samples.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(AudioError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// Mean squared value of a raw sample slice.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

/// Reads a 16 kHz mono 16-bit PCM WAV file. Samples come back as s / 32768.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wav(&bytes)
}

/// Decodes WAV bytes; see [`load_wav`].
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::NotWave);
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or(AudioError::MissingChunk("fmt "))?;
    if tag != 1 {
        return Err(AudioError::NotPcm(tag));
    }
    if channels != 1 {
        return Err(AudioError::NotMono(channels));
    }
    if bits != 16 {
        return Err(AudioError::NotSixteenBit(bits));
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::WrongRate(rate));
    }
    let data = data.ok_or(AudioError::MissingChunk("data"))?;
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32_768.0)
        .collect();
    Ok(Waveform::new(samples))
}

/// Writes a waveform as 16 kHz mono 16-bit PCM. Samples are clamped to
/// [-1, 32767/32768] and rounded, so a round trip agrees with the original
/// within one quantization step (1/32768) per sample.
pub fn store_wav(path: &Path, wav: &Waveform) -> Result<(), AudioError> {
    let bytes = encode_wav(wav)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Encodes a waveform to WAV bytes; see [`store_wav`].
pub fn encode_wav(wav: &Waveform) -> Result<Vec<u8>, AudioError> {
    wav.check_finite()?;
    let data_len = wav.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &wav.samples {
        let clamped = s.clamp(-1.0, PCM_MAX);
        let q = (clamped * 32_768.0).round() as i32;
        let q = q.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Recipe for one synthetic speaker: a harmonic comb with a fixed spectral
/// envelope. Identity lives in `base_freq` and `envelope_coeffs`; individual
/// utterances vary phases and amplitude modulation on top.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpeakerSpec {
    pub speaker_seed: u64,
    pub base_freq: f64,
    pub num_harmonics: usize,
    pub envelope_coeffs: Vec<f64>,
}

impl SynthSpeakerSpec {
    /// Derives a speaker recipe from its seed.
    pub fn from_seed(speaker_seed: u64) -> Self {
        let mut rng = seeded_rng(speaker_seed);
        let base_freq = rng.gen_range(80.0..300.0);
        let num_harmonics = rng.gen_range(8..=16usize);
        let decay = rng.gen_range(0.4..1.2);
        let envelope_coeffs = (1..=num_harmonics)
            .map(|k| rng.gen_range(0.3..1.0) * (k as f64).powf(-decay))
            .collect();
        SynthSpeakerSpec { speaker_seed, base_freq, num_harmonics, envelope_coeffs }
    }

    /// Synthesizes one utterance: harmonics with utterance-random phases,
    /// slow amplitude modulation, white noise 30 dB below the tone power,
    /// peak-normalized to 0.5.
    pub fn utterance(&self, duration_s: f64, utterance_seed: u64) -> Waveform {
        let mut rng = seeded_rng(utterance_seed);
        let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
        let tau = std::f64::consts::TAU;
        let phases: Vec<f64> =
            (0..self.num_harmonics).map(|_| rng.gen_range(0.0..tau)).collect();
        let mod_freq = rng.gen_range(1.5..4.0);
        let mod_phase = rng.gen_range(0.0..tau);
        let mut clean = vec![0.0; n];
        for (i, c) in clean.iter_mut().enumerate() {
            let t = i as f64 / SAMPLE_RATE as f64;
            let am = 1.0 + 0.3 * (tau * mod_freq * t + mod_phase).sin();
            let mut s = 0.0;
            for (k, (&env, &ph)) in
                self.envelope_coeffs.iter().zip(phases.iter()).enumerate()
            {
                s += env * (tau * (k + 1) as f64 * self.base_freq * t + ph).sin();
            }
            *c = s * am;
        }
        let tone_power = power(&clean);
        // Noise 30 dB down: gamma^2 * P_noise = P_tone / 10^3.
        let mut noise = vec![0.0; n];
        crate::rng::fill_standard_normal(&mut rng, &mut noise);
        let gamma = (tone_power / (power(&noise) * 1e3)).sqrt();
        let mut samples: Vec<f64> =
            clean.iter().zip(noise.iter()).map(|(c, z)| c + gamma * z).collect();
        let peak = samples.iter().fold(0.0_f64, |m, &s| m.max(s.abs()));
        if peak > 0.0 {
            let scale = 0.5 / peak;
            for s in samples.iter_mut() {
                *s *= scale;
            }
        }
        Waveform::new(samples)
    }
}

/// Generates a corpus of synthetic speakers, keyed by id ("spk00", ...).
/// Fully determined by `master_seed`.
pub fn generate_corpus(
    num_speakers: usize,
    utterances_per_speaker: usize,
    duration_s: f64,
    master_seed: u64,
) -> BTreeMap<String, Vec<Waveform>> {
    let mut corpus = BTreeMap::new();
    for spk in 0..num_speakers {
        let spec = SynthSpeakerSpec::from_seed(derive_seed(master_seed, &[SEED_SPEAKER, spk as u64]));
        let voices = (0..utterances_per_speaker)
            .map(|utt| {
                spec.utterance(
                    duration_s,
                    derive_seed(master_seed, &[SEED_UTTERANCE, spk as u64, utt as u64]),
                )
            })
            .collect();
        corpus.insert(format!("spk{spk:02}"), voices);
    }
    corpus
}

/// Speaker recipe for a corpus index, matching [`generate_corpus`].
pub fn corpus_speaker_spec(master_seed: u64, speaker_index: usize) -> SynthSpeakerSpec {
    SynthSpeakerSpec::from_seed(derive_seed(master_seed, &[SEED_SPEAKER, speaker_index as u64]))
}

const SEED_SPEAKER: u64 = 0x5350_4b52; // tag: speaker recipe
const SEED_UTTERANCE: u64 = 0x5554_5452; // tag: utterance realization

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Full linear convolution of `x` with `h`, truncated to `x.len()` samples
/// (the natural output length when filtering a fixed-length voice through an
/// impulse response). FFT-based; agrees with the direct sum to ~1e-9.
pub fn convolve_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    let full = convolve_untruncated(x, h);
    let mut out = full;
    out.truncate(x.len());
    out
}

/// Full linear convolution, all `x.len() + h.len() - 1` samples.
pub fn convolve_untruncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len().saturating_add(h.len()).saturating_sub(1)];
    }
    let out_len = x.len() + h.len() - 1;
    // Short kernels take the direct path: cheaper than an FFT round trip at
    // these sizes, and a one-tap kernel stays exact down to the last bit.
    if x.len().min(h.len()) <= DIRECT_CONV_CROSSOVER {
        return convolve_direct(x, h, out_len);
    }
    let fft_len = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);
    let mut a: Vec<Complex<f64>> =
        x.iter().map(|&v| Complex::new(v, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(fft_len).collect();
    let mut b: Vec<Complex<f64>> =
        h.iter().map(|&v| Complex::new(v, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(fft_len).collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (av, bv) in a.iter_mut().zip(b.iter()) {
        *av *= bv;
    }
    ifft.process(&mut a);
    let scale = 1.0 / fft_len as f64;
    a.iter().take(out_len).map(|c| c.re * scale).collect()
}

/// Below roughly this many taps the quadratic sum beats the FFT setup cost.
const DIRECT_CONV_CROSSOVER: usize = 32;

fn convolve_direct(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (j, &hv) in h.iter().enumerate() {
        for (i, &xv) in x.iter().enumerate() {
            out[i + j] += hv * xv;
        }
    }
    out
}

/// Adjoint of the truncated convolution `x -> convolve_full(x, h)`: given a
/// gradient with respect to the output, returns the gradient with respect to
/// the input. This is cross-correlation with `h`.
pub fn convolve_adjoint(grad_out: &[f64], h: &[f64], input_len: usize) -> Vec<f64> {
    // (A^T g)[i] = sum_j h[j] g[i + j], with i + j < grad_out.len().
    // Computed as full convolution of reversed h with g, sliced at offset h-1.
    if h.is_empty() || grad_out.is_empty() {
        return vec![0.0; input_len];
    }
    let h_rev: Vec<f64> = h.iter().rev().copied().collect();
    let full = convolve_untruncated(&h_rev, grad_out);
    let mut out = vec![0.0; input_len];
    for (i, o) in out.iter_mut().enumerate() {
        let idx = h.len() - 1 + i;
        if idx < full.len() {
            *o = full[idx];
        }
    }
    out
}
