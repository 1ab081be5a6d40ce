//! Over-the-air modeling: room impulse responses, noise at a target SNR,
//! random transform sampling for expectation-over-transforms attacks, and a
//! transmission simulator for evaluating what survives a playback chain.
//!
//! The key structural fact: for a fixed room and a frozen noise draw, the
//! whole chain is affine in the input. [`SampledTransform::linearize`] hands
//! back that affine map exactly, which is what lets the robust attack pull
//! gradients through the chain with a plain convolution adjoint.

use std::path::Path;

use rand::Rng;

use crate::attack::{
    clip_box, finish_outcome, Adam, AttackError, AttackOutcome, WhiteBoxModel,
};
use crate::audio::{convolve_adjoint, convolve_full, power, AudioError, Waveform};
use crate::losses::{AttackSetting, LossId};
use crate::rng::{fill_standard_normal, seeded_rng};

const SPEED_OF_SOUND: f64 = 343.0;
const RIR_SAMPLE_RATE: f64 = 16_000.0;

#[derive(Debug, thiserror::Error)]
pub enum OtaError {
    #[error("bad room geometry: {0}")]
    BadRoom(&'static str),
    #[error("transform set needs a non-empty impulse response pool")]
    EmptyPool,
    #[error("noise has zero power; cannot hit a target signal-to-noise ratio")]
    SilentNoise,
    #[error("length mismatch: need {need} samples, got {got}")]
    LengthMismatch { need: usize, got: usize },
    #[error("bad configuration: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// A shoebox room with one source and one microphone, both strictly inside.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoomSpec {
    /// Interior dimensions in meters.
    pub dimensions: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    /// Wall absorption coefficient; each reflection keeps `1 - absorption`
    /// of its amplitude.
    pub absorption: f64,
    /// Cap on the total reflection count of contributing image sources.
    pub max_order: usize,
}

/// Impulse response at the toolkit sample rate. Taps are normalized so the
/// direct-path tap is exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
}

impl ImpulseResponse {
    /// The identity response: convolution with it returns the input.
    pub fn identity() -> Self {
        ImpulseResponse { taps: vec![1.0] }
    }
}

/// Image-source simulation of the room's impulse response.
///
/// For each axis, mirror images of the source are enumerated as
/// `(1 - 2q) s + 2 m L` with `q` in {0, 1} and integer `m`; the image's
/// reflection count is `|m - q| + |m|` summed over axes, capped at
/// `max_order`. Each image lands on the tap nearest its travel time with
/// amplitude `(1 - absorption)^reflections / max(distance, 0.1)`, and the
/// response is scaled so the accumulated direct-path tap is exactly one.
/// `max_order` of zero therefore yields a single unit tap at the direct
/// delay.
pub fn simulate_rir(room: &RoomSpec) -> Result<ImpulseResponse, OtaError> {
    for i in 0..3 {
        if !(room.dimensions[i] > 0.0) {
            return Err(OtaError::BadRoom("dimensions must be positive"));
        }
        if !(room.source[i] > 0.0 && room.source[i] < room.dimensions[i]) {
            return Err(OtaError::BadRoom("source must be strictly inside the room"));
        }
        if !(room.mic[i] > 0.0 && room.mic[i] < room.dimensions[i]) {
            return Err(OtaError::BadRoom("mic must be strictly inside the room"));
        }
    }
    if !(0.0..1.0).contains(&room.absorption) {
        return Err(OtaError::BadRoom("absorption must be in [0, 1)"));
    }

    // Per-axis candidates (q, m, reflection count).
    let order = room.max_order as i64;
    let mut axis_images: [Vec<(f64, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for axis in 0..3 {
        for q in 0..=1i64 {
            for m in -(order + 1)..=(order + 1) {
                let count = (m - q).unsigned_abs() + m.unsigned_abs();
                if count as i64 > order {
                    continue;
                }
                let pos = (1 - 2 * q) as f64 * room.source[axis]
                    + 2.0 * m as f64 * room.dimensions[axis];
                axis_images[axis].push((pos, count as usize));
            }
        }
    }

    let mut taps: Vec<f64> = Vec::new();
    let mut direct_index = 0usize;
    for &(x, nx) in &axis_images[0] {
        for &(y, ny) in &axis_images[1] {
            for &(z, nz) in &axis_images[2] {
                let reflections = nx + ny + nz;
                if reflections > room.max_order {
                    continue;
                }
                let d = ((room.mic[0] - x).powi(2)
                    + (room.mic[1] - y).powi(2)
                    + (room.mic[2] - z).powi(2))
                .sqrt();
                let index = (RIR_SAMPLE_RATE * d / SPEED_OF_SOUND).round() as usize;
                let amplitude =
                    (1.0 - room.absorption).powi(reflections as i32) / d.max(0.1);
                if index >= taps.len() {
                    taps.resize(index + 1, 0.0);
                }
                taps[index] += amplitude;
                if reflections == 0 {
                    direct_index = index;
                }
            }
        }
    }

    let direct = taps[direct_index];
    for t in taps.iter_mut() {
        *t /= direct;
    }
    Ok(ImpulseResponse { taps })
}

/// Gain that scales `noise` so `signal + gain * noise` sits at `snr_db`
/// relative to the given signal power. Infinite SNR (or a silent signal)
/// yields zero gain; silent noise cannot be scaled to any finite SNR.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> Result<f64, OtaError> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(0.0);
    }
    if !(noise_power > 0.0) {
        return Err(OtaError::SilentNoise);
    }
    Ok((signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds `noise` to `x` scaled so the mixture's signal-to-noise ratio is
/// `snr_db`. The noise must cover the signal; extra noise samples are
/// ignored.
pub fn mix_at_snr(x: &Waveform, noise: &[f64], snr_db: f64) -> Result<Waveform, OtaError> {
    if noise.len() < x.len() {
        return Err(OtaError::LengthMismatch { need: x.len(), got: noise.len() });
    }
    let gain = snr_gain(x.power(), power(&noise[..x.len()]), snr_db)?;
    Ok(Waveform::new(
        x.samples.iter().zip(noise.iter()).map(|(&s, &n)| s + gain * n).collect(),
    ))
}

/// Which pieces of the playback chain a transform set draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    NoiseOnly,
    RirOnly,
    NoiseAndRir,
}

/// Which signal the noise gain is measured against when a transform both
/// reverberates and adds noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrReference {
    /// Measure against the reverberated signal (what the mic hears).
    Reverbed,
    /// Measure against the dry input.
    Dry,
}

/// Distribution over playback transforms: a pool of room responses and a
/// band of SNRs to draw from.
#[derive(Debug, Clone)]
pub struct TransformSet {
    pub kind: TransformKind,
    pub rir_pool: Vec<ImpulseResponse>,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub snr_reference: SnrReference,
}

impl TransformSet {
    pub fn noise_only(snr_lo: f64, snr_hi: f64) -> Self {
        TransformSet {
            kind: TransformKind::NoiseOnly,
            rir_pool: Vec::new(),
            snr_lo,
            snr_hi,
            snr_reference: SnrReference::Reverbed,
        }
    }

    pub fn rir_only(rir_pool: Vec<ImpulseResponse>) -> Self {
        TransformSet {
            kind: TransformKind::RirOnly,
            rir_pool,
            snr_lo: 0.0,
            snr_hi: 0.0,
            snr_reference: SnrReference::Reverbed,
        }
    }

    pub fn noise_and_rir(rir_pool: Vec<ImpulseResponse>, snr_lo: f64, snr_hi: f64) -> Self {
        TransformSet {
            kind: TransformKind::NoiseAndRir,
            rir_pool,
            snr_lo,
            snr_hi,
            snr_reference: SnrReference::Reverbed,
        }
    }

    fn uses_rir(&self) -> bool {
        matches!(self.kind, TransformKind::RirOnly | TransformKind::NoiseAndRir)
    }

    fn uses_noise(&self) -> bool {
        matches!(self.kind, TransformKind::NoiseOnly | TransformKind::NoiseAndRir)
    }

    /// Draws one concrete transform: a room from the pool, an SNR from the
    /// band, and a frozen unit-variance noise track of `input_len` samples.
    pub fn sample<R: Rng>(
        &self,
        input_len: usize,
        rng: &mut R,
    ) -> Result<SampledTransform, OtaError> {
        if self.snr_lo > self.snr_hi {
            return Err(OtaError::BadConfig("snr_lo must not exceed snr_hi"));
        }
        let rir = if self.uses_rir() {
            if self.rir_pool.is_empty() {
                return Err(OtaError::EmptyPool);
            }
            let pick = rng.gen_range(0..self.rir_pool.len());
            Some(self.rir_pool[pick].taps.clone())
        } else {
            None
        };
        let (noise, snr_db) = if self.uses_noise() {
            let snr = if self.snr_hi > self.snr_lo {
                rng.gen_range(self.snr_lo..self.snr_hi)
            } else {
                self.snr_lo
            };
            let mut draw = vec![0.0; input_len];
            fill_standard_normal(rng, &mut draw);
            (Some(draw), snr)
        } else {
            (None, f64::INFINITY)
        };
        Ok(SampledTransform { rir, noise, snr_db, snr_reference: self.snr_reference })
    }
}

/// One concrete draw from a [`TransformSet`]: the room is fixed, the noise
/// track is frozen, only the noise gain still depends on the input's level.
#[derive(Debug, Clone)]
pub struct SampledTransform {
    pub rir: Option<Vec<f64>>,
    pub noise: Option<Vec<f64>>,
    pub snr_db: f64,
    pub snr_reference: SnrReference,
}

impl SampledTransform {
    /// Runs the chain with the noise gain measured live against this input.
    pub fn apply(&self, x: &Waveform) -> Result<Waveform, OtaError> {
        Ok(self.linearize(x)?.apply(x))
    }

    /// Freezes the noise gain against `x_ref`, yielding the exact affine map
    /// `x -> rir (*) x + gain * noise`. Differences of its outputs are pure
    /// convolutions: `f(x + d) - f(x) = rir (*) d`.
    pub fn linearize(&self, x_ref: &Waveform) -> Result<AffineTransform, OtaError> {
        if let Some(noise) = &self.noise {
            if noise.len() < x_ref.len() {
                return Err(OtaError::LengthMismatch { need: x_ref.len(), got: noise.len() });
            }
        }
        let reference_power = match (self.snr_reference, &self.rir) {
            (SnrReference::Dry, _) | (SnrReference::Reverbed, None) => x_ref.power(),
            (SnrReference::Reverbed, Some(taps)) => {
                power(&convolve_full(&x_ref.samples, taps))
            }
        };
        let offset = match &self.noise {
            Some(noise) => {
                let gain = snr_gain(reference_power, power(&noise[..x_ref.len()]), self.snr_db)?;
                Some(noise[..x_ref.len()].iter().map(|&n| gain * n).collect())
            }
            None => None,
        };
        Ok(AffineTransform { kernel: self.rir.clone(), offset })
    }
}

/// An exact affine playback map. `kernel` of `None` means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub kernel: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
}

impl AffineTransform {
    pub fn apply(&self, x: &Waveform) -> Waveform {
        let mut out = match &self.kernel {
            Some(taps) => convolve_full(&x.samples, taps),
            None => x.samples.clone(),
        };
        if let Some(offset) = &self.offset {
            for (o, n) in out.iter_mut().zip(offset.iter()) {
                *o += n;
            }
        }
        Waveform::new(out)
    }

    /// Pulls a gradient at the output back to the input: the adjoint of the
    /// convolution, with the constant offset contributing nothing.
    pub fn pull_back(&self, grad_out: &[f64], input_len: usize) -> Vec<f64> {
        match &self.kernel {
            Some(taps) => convolve_adjoint(grad_out, taps, input_len),
            None => grad_out[..input_len].to_vec(),
        }
    }
}

/// Knobs for [`robust_attack`]. The step count is high and the step small
/// compared to the plain iterated attack because every step averages a
/// fresh batch of transforms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RobustAttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Transforms averaged per iteration.
    pub transforms_per_iter: usize,
    pub adam: bool,
    /// Weight on the distance-to-original term; zero in budgeted mode.
    pub lambda: f64,
}

impl RobustAttackConfig {
    /// Default schedule at a given budget: 400 steps covering five budget
    /// widths of travel.
    pub fn for_epsilon(epsilon: f64) -> Self {
        let iterations = 400;
        RobustAttackConfig {
            epsilon,
            alpha: 5.0 * epsilon / iterations as f64,
            iterations,
            transforms_per_iter: 10,
            adam: true,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), OtaError> {
        if !(self.epsilon > 0.0) {
            return Err(OtaError::BadConfig("epsilon must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(OtaError::BadConfig("alpha must be positive"));
        }
        if self.iterations == 0 {
            return Err(OtaError::BadConfig("iterations must be at least 1"));
        }
        if self.transforms_per_iter == 0 {
            return Err(OtaError::BadConfig("transforms_per_iter must be at least 1"));
        }
        if self.lambda < 0.0 {
            return Err(OtaError::BadConfig("lambda must be non-negative"));
        }
        Ok(())
    }
}

impl Default for RobustAttackConfig {
    fn default() -> Self {
        RobustAttackConfig::for_epsilon(0.01)
    }
}

/// Expectation-over-transforms attack: each step samples a batch of
/// playback transforms, averages the loss gradient through their linearized
/// chains, optionally adds a distance penalty, and steps inside the budget
/// box. The returned outcome's decision fields describe the direct (no
/// playback) system; judge over-the-air success by pushing the result
/// through [`transmit`] with held-out conditions.
#[allow(clippy::too_many_arguments)]
pub fn robust_attack(
    x: &Waveform,
    loss: LossId,
    setting: &AttackSetting,
    model: &WhiteBoxModel,
    transforms: &TransformSet,
    cfg: &RobustAttackConfig,
    seed: u64,
) -> Result<AttackOutcome, OtaError> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let mut current = x.clone();
    let mut adam = cfg.adam.then(|| Adam::new(x.len(), cfg.alpha));
    let mut iterations_used = 0;
    let k = cfg.transforms_per_iter;
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; x.len()];
        for _ in 0..k {
            let sampled = transforms.sample(x.len(), &mut rng)?;
            let lin = sampled.linearize(&current)?;
            let heard = lin.apply(&current);
            let g_out = model.input_gradient(&heard, loss, setting)?;
            let g_in = lin.pull_back(&g_out, x.len());
            for (g, gi) in grad.iter_mut().zip(g_in.iter()) {
                *g += gi / k as f64;
            }
        }
        if cfg.lambda > 0.0 {
            let delta: Vec<f64> =
                current.samples.iter().zip(x.samples.iter()).map(|(c, o)| c - o).collect();
            let l2 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            if l2 > 1e-12 {
                for (g, d) in grad.iter_mut().zip(delta.iter()) {
                    *g += cfg.lambda * d / l2;
                }
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFiniteGradient.into());
        }
        if grad.iter().all(|&v| v == 0.0) {
            break;
        }
        let stepped: Vec<f64> = match adam.as_mut() {
            Some(adam) => {
                let step = adam.step(&grad);
                current.samples.iter().zip(step.iter()).map(|(&xi, &si)| xi - si).collect()
            }
            None => current
                .samples
                .iter()
                .zip(grad.iter())
                .map(|(&xi, &gi)| xi - cfg.alpha * crate::attack::sign0(gi))
                .collect(),
        };
        current = Waveform::new(clip_box(&stepped, &x.samples, cfg.epsilon));
        iterations_used += 1;
    }
    Ok(finish_outcome(model, setting, loss, x, current, iterations_used)?)
}

/// Simulates playback through a held-out room: reverberate, add white noise
/// at `snr_db` against the reverberated signal, then rescale so the peak
/// matches the input's (the playback volume knob).
pub fn transmit(
    x: &Waveform,
    rir: &ImpulseResponse,
    snr_db: f64,
    seed: u64,
) -> Result<Waveform, OtaError> {
    let reverbed = Waveform::new(convolve_full(&x.samples, &rir.taps));
    let mut noise = vec![0.0; reverbed.len()];
    let mut rng = seeded_rng(seed);
    fill_standard_normal(&mut rng, &mut noise);
    let mut received = mix_at_snr(&reverbed, &noise, snr_db)?;
    let peak_in = x.peak();
    let peak_out = received.peak();
    if peak_out > 0.0 {
        let scale = peak_in / peak_out;
        for s in received.samples.iter_mut() {
            *s *= scale;
        }
    }
    Ok(received)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoolManifest {
    rirs: Vec<PoolEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoolEntry {
    file: String,
    /// Peak amplitude divided out before PCM encoding; multiplied back on
    /// load.
    scale: f64,
}

/// Writes a pool as one WAV per response plus a manifest recording each
/// response's scale, since impulse responses exceed the PCM range.
pub fn save_rir_pool(dir: &Path, pool: &[ImpulseResponse]) -> Result<(), OtaError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pool.len());
    for (i, rir) in pool.iter().enumerate() {
        let peak = rir.taps.iter().fold(0.0_f64, |m, &t| m.max(t.abs()));
        // Slightly above the peak so the largest tap encodes without
        // clamping at the PCM ceiling.
        let scale = if peak > 0.0 { peak * (32768.0 / 32767.0) } else { 1.0 };
        let normalized: Vec<f64> = rir.taps.iter().map(|&t| t / scale).collect();
        let file = format!("rir_{:03}.wav", i);
        crate::audio::store_wav(&dir.join(&file), &Waveform::new(normalized))?;
        entries.push(PoolEntry { file, scale });
    }
    let manifest = serde_json::to_string_pretty(&PoolManifest { rirs: entries })?;
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn load_rir_pool(dir: &Path) -> Result<Vec<ImpulseResponse>, OtaError> {
    let manifest: PoolManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut pool = Vec::with_capacity(manifest.rirs.len());
    for entry in &manifest.rirs {
        let wave = crate::audio::load_wav(&dir.join(&entry.file))?;
        pool.push(ImpulseResponse {
            taps: wave.samples.iter().map(|&s| s * entry.scale).collect(),
        });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{pgd, AttackConfig};
    use crate::audio::generate_corpus;
    use crate::losses::{AttackTarget, SettingId, SourceSpeaker};
    use crate::srs::{enroll, Activation, Embedder, EmbedderSpec, FeatureConfig, TaskKind};
    use std::collections::BTreeMap;

    /// Mic deliberately off every symmetry axis so distinct images never
    /// share a tap.
    fn test_room() -> RoomSpec {
        RoomSpec {
            dimensions: [5.0, 4.0, 3.0],
            source: [1.0, 1.0, 1.0],
            mic: [3.5, 2.5, 1.8],
            absorption: 0.4,
            max_order: 2,
        }
    }

    fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn order_zero_rir_is_a_single_unit_tap() {
        let room = RoomSpec { max_order: 0, ..test_room() };
        let rir = simulate_rir(&room).unwrap();
        let d = distance(room.mic, room.source);
        let expected_index = (16000.0 * d / 343.0).round() as usize;
        assert_eq!(rir.taps.len(), expected_index + 1);
        assert_eq!(rir.taps[expected_index], 1.0);
        assert!(rir.taps[..expected_index].iter().all(|&t| t == 0.0));
    }

    #[test]
    fn first_order_image_lands_where_geometry_says() {
        let room = RoomSpec { max_order: 1, absorption: 0.3, ..test_room() };
        let rir = simulate_rir(&room).unwrap();
        // Image across the x = 0 wall: source reflected to (-1, 1, 1).
        let image = [-room.source[0], room.source[1], room.source[2]];
        let d_img = distance(room.mic, image);
        let d_direct = distance(room.mic, room.source);
        let idx = (16000.0 * d_img / 343.0).round() as usize;
        let direct_amp = 1.0 / d_direct;
        let expected = (0.7 / d_img) / direct_amp;
        assert!(
            (rir.taps[idx] - expected).abs() < 1e-12,
            "tap {} expected {}",
            rir.taps[idx],
            expected
        );
        let direct_idx = (16000.0 * d_direct / 343.0).round() as usize;
        assert_eq!(rir.taps[direct_idx], 1.0);
        // Direct path plus six first-order images, all on distinct taps.
        assert_eq!(rir.taps.iter().filter(|&&t| t != 0.0).count(), 7);
    }

    #[test]
    fn rir_rejects_bad_geometry() {
        let outside = RoomSpec { source: [6.0, 1.0, 1.0], ..test_room() };
        assert!(matches!(simulate_rir(&outside), Err(OtaError::BadRoom(_))));
        let absorbing = RoomSpec { absorption: 1.0, ..test_room() };
        assert!(matches!(simulate_rir(&absorbing), Err(OtaError::BadRoom(_))));
    }

    #[test]
    fn mix_at_snr_hits_the_requested_ratio_exactly() {
        let mut rng = seeded_rng(4);
        let x = Waveform::new((0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let mut noise = vec![0.0; 2000];
        fill_standard_normal(&mut rng, &mut noise);
        for snr in [-10.0, 0.0, 7.5, 20.0] {
            let mixed = mix_at_snr(&x, &noise, snr).unwrap();
            let residual: Vec<f64> =
                mixed.samples.iter().zip(x.samples.iter()).map(|(m, s)| m - s).collect();
            let measured = 10.0 * (x.power() / power(&residual)).log10();
            assert!((measured - snr).abs() < 1e-9, "snr {} measured {}", snr, measured);
        }
    }

    #[test]
    fn infinite_snr_returns_the_signal_untouched() {
        let x = Waveform::new(vec![0.1, -0.2, 0.3]);
        let noise = vec![1.0, 1.0, 1.0];
        let mixed = mix_at_snr(&x, &noise, f64::INFINITY).unwrap();
        assert_eq!(mixed.samples, x.samples);
    }

    #[test]
    fn silent_noise_is_an_error() {
        let x = Waveform::new(vec![0.1, -0.2]);
        assert!(matches!(mix_at_snr(&x, &[0.0, 0.0], 10.0), Err(OtaError::SilentNoise)));
    }

    #[test]
    fn linearized_transform_is_exactly_affine() {
        let mut rng = seeded_rng(9);
        let rir = simulate_rir(&test_room()).unwrap();
        let set = TransformSet::noise_and_rir(vec![rir], 0.0, 20.0);
        let x = Waveform::new((0..1500).map(|_| rng.gen_range(-0.4..0.4)).collect());
        let sampled = set.sample(x.len(), &mut rng).unwrap();
        let lin = sampled.linearize(&x).unwrap();

        // apply() at the linearization point agrees with the affine map.
        let live = sampled.apply(&x).unwrap();
        let frozen = lin.apply(&x);
        assert_eq!(live.samples, frozen.samples);

        // Differences through the affine map are pure convolutions.
        let delta: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let shifted = Waveform::new(
            x.samples.iter().zip(delta.iter()).map(|(&a, &b)| a + b).collect(),
        );
        let out_shift = lin.apply(&shifted);
        let conv_delta = convolve_full(&delta, sampled.rir.as_ref().unwrap());
        for i in 0..x.len() {
            let diff = out_shift.samples[i] - frozen.samples[i];
            assert!((diff - conv_delta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pull_back_matches_the_adjoint_identity() {
        let mut rng = seeded_rng(10);
        let rir = ImpulseResponse { taps: vec![1.0, 0.4, -0.2, 0.05] };
        let lin = AffineTransform { kernel: Some(rir.taps.clone()), offset: None };
        let x: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = lin.apply(&Waveform::new(x.clone()));
        let pulled = lin.pull_back(&g, x.len());
        let lhs: f64 = y.samples.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(pulled.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn transmit_preserves_the_input_peak() {
        let mut rng = seeded_rng(11);
        let x = Waveform::new((0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let rir = simulate_rir(&test_room()).unwrap();
        let out = transmit(&x, &rir, 5.0, 42).unwrap();
        assert!((out.peak() - x.peak()).abs() < 1e-12);
        let again = transmit(&x, &rir, 5.0, 42).unwrap();
        assert_eq!(out.samples, again.samples);
        let other = transmit(&x, &rir, 5.0, 43).unwrap();
        assert_ne!(out.samples, other.samples);
    }

    #[test]
    fn rir_pool_roundtrips_through_wav_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let pool = vec![
            simulate_rir(&test_room()).unwrap(),
            simulate_rir(&RoomSpec { absorption: 0.7, ..test_room() }).unwrap(),
            ImpulseResponse::identity(),
        ];
        save_rir_pool(dir.path(), &pool).unwrap();
        let loaded = load_rir_pool(dir.path()).unwrap();
        assert_eq!(loaded.len(), pool.len());
        for (orig, back) in pool.iter().zip(loaded.iter()) {
            assert_eq!(orig.taps.len(), back.taps.len());
            let peak = orig.taps.iter().fold(0.0_f64, |m, &t| m.max(t.abs()));
            for (a, b) in orig.taps.iter().zip(back.taps.iter()) {
                assert!((a - b).abs() <= peak / 32768.0 + 1e-12);
            }
        }
    }

    fn small_stack() -> (BTreeMap<String, Vec<Waveform>>, crate::srs::SpeakerDatabase, Embedder)
    {
        let embedder = Embedder::new(EmbedderSpec {
            weight_seed: 3,
            embed_dim: 16,
            activation: Activation::Tanh,
            features: FeatureConfig { frame_len: 128, hop: 64, num_filters: 10, log_floor: 1e-8 },
        })
        .unwrap();
        let corpus = generate_corpus(3, 2, 0.12, 77);
        let enroll_set: BTreeMap<String, Vec<Waveform>> =
            corpus.iter().map(|(id, v)| (id.clone(), vec![v[0].clone()])).collect();
        let db = enroll(&enroll_set, &embedder, TaskKind::Csi).unwrap();
        (corpus, db, embedder)
    }

    #[test]
    fn robust_attack_with_identity_transform_matches_plain_adam_descent() {
        let (corpus, db, embedder) = small_stack();
        let model = WhiteBoxModel::new(&db, &embedder);
        let setting = AttackSetting::new(
            SettingId::C6,
            SourceSpeaker::Enrolled(0),
            AttackTarget::Enrolled(1),
            db.num_speakers(),
        )
        .unwrap();
        let x = &corpus["spk00"][1];

        let robust_cfg = RobustAttackConfig {
            epsilon: 0.002,
            alpha: 0.0004,
            iterations: 6,
            transforms_per_iter: 1,
            adam: true,
            lambda: 0.0,
        };
        let identity = TransformSet::rir_only(vec![ImpulseResponse::identity()]);
        let robust = robust_attack(
            x,
            LossId::CrossEntropy,
            &setting,
            &model,
            &identity,
            &robust_cfg,
            5,
        )
        .unwrap();

        let pgd_cfg = AttackConfig {
            epsilon: 0.002,
            alpha: 0.0004,
            iterations: 6,
            adam: true,
            ..AttackConfig::default()
        };
        let plain = pgd(x, LossId::CrossEntropy, &setting, &model, &pgd_cfg, 5).unwrap();

        assert_eq!(robust.adversarial.samples, plain.adversarial.samples);
        assert_eq!(robust.iterations_used, plain.iterations_used);
    }

    #[test]
    fn robust_attack_respects_the_budget_and_is_seeded() {
        let (corpus, db, embedder) = small_stack();
        let model = WhiteBoxModel::new(&db, &embedder);
        let setting = AttackSetting::new(
            SettingId::C8,
            SourceSpeaker::Enrolled(1),
            AttackTarget::Untargeted,
            db.num_speakers(),
        )
        .unwrap();
        let x = &corpus["spk01"][1];
        let rir = simulate_rir(&RoomSpec { max_order: 1, ..test_room() }).unwrap();
        let set = TransformSet::noise_and_rir(vec![rir], 5.0, 15.0);
        let cfg = RobustAttackConfig {
            epsilon: 0.003,
            alpha: 0.0005,
            iterations: 4,
            transforms_per_iter: 3,
            adam: true,
            lambda: 0.5,
        };
        let a = robust_attack(x, LossId::SourceMargin, &setting, &model, &set, &cfg, 21).unwrap();
        let b = robust_attack(x, LossId::SourceMargin, &setting, &model, &set, &cfg, 21).unwrap();
        let c = robust_attack(x, LossId::SourceMargin, &setting, &model, &set, &cfg, 22).unwrap();
        assert!(a.perturbation_linf <= cfg.epsilon + 1e-12);
        assert!(a.adversarial.samples.iter().all(|&s| (-1.0..=1.0).contains(&s)));
        assert_eq!(a.adversarial.samples, b.adversarial.samples);
        assert_ne!(a.adversarial.samples, c.adversarial.samples);
    }

    #[test]
    fn transform_set_without_rirs_errors_when_asked_for_one() {
        let set = TransformSet::rir_only(Vec::new());
        let mut rng = seeded_rng(1);
        assert!(matches!(set.sample(100, &mut rng), Err(OtaError::EmptyPool)));
    }
}
