//! Seeded affine embedder over log mel features.
//!
//! Per frame: normalize the log features to a sane range, apply a random
//! (but seed-fixed) affine map, squash, then mean-pool over frames and
//! project to the unit sphere. The whole map is differentiable and
//! [`Embedder::input_gradient`] returns the exact gradient of
//! `<embed(x), upstream>` with respect to the raw samples.

use super::features::{FeatureConfig, FeatureForward, FeaturePlan};
use super::SrsError;
use crate::audio::Waveform;
use crate::rng::{seeded_rng, standard_normal};

/// Frame nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            // Stable softplus: ln(1 + e^z) without overflow for large |z|.
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = SrsError;
    fn from_str(s: &str) -> Result<Self, SrsError> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(SrsError::BadConfig("activation must be tanh or softplus")),
        }
    }
}

/// Everything that determines an embedder; two equal specs give bit-equal
/// embeddings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub weight_seed: u64,
    pub embed_dim: usize,
    pub activation: Activation,
    pub features: FeatureConfig,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            weight_seed: 7,
            embed_dim: 32,
            activation: Activation::Tanh,
            features: FeatureConfig::default(),
        }
    }
}

/// Log features are roughly in [-18, 2]; recentering keeps the affine input
/// at unit scale so neither activation saturates at initialization.
const FEATURE_SHIFT: f64 = -8.0;
const FEATURE_SCALE: f64 = 4.0;

/// An [`EmbedderSpec`] with its weights and feature tables materialized.
pub struct Embedder {
    spec: EmbedderSpec,
    plan: FeaturePlan,
    /// embed_dim x num_filters, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self, SrsError> {
        if spec.embed_dim < 2 {
            return Err(SrsError::BadConfig("embed_dim must be at least 2"));
        }
        let plan = FeaturePlan::new(spec.features.clone())?;
        let mut rng = seeded_rng(spec.weight_seed);
        let filters = spec.features.num_filters;
        let scale = 1.0 / (filters as f64).sqrt();
        let weights: Vec<f64> =
            (0..spec.embed_dim * filters).map(|_| standard_normal(&mut rng) * scale).collect();
        let bias: Vec<f64> =
            (0..spec.embed_dim).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        Ok(Embedder { spec, plan, weights, bias })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Unit-norm embedding of a voice.
    pub fn embed(&self, x: &Waveform) -> Result<Vec<f64>, SrsError> {
        let fwd = self.plan.forward(x)?;
        Ok(self.embed_from_features(&fwd)?.embedding)
    }

    /// Gradient of `<embed(x), upstream>` with respect to every input sample.
    pub fn input_gradient(&self, x: &Waveform, upstream: &[f64]) -> Result<Vec<f64>, SrsError> {
        if upstream.len() != self.spec.embed_dim {
            return Err(SrsError::BadConfig("upstream length must equal embed_dim"));
        }
        let fwd = self.plan.forward(x)?;
        let state = self.embed_from_features(&fwd)?;
        let dim = self.spec.embed_dim;
        let frames = state.pre_activations.len() / dim;
        let filters = self.spec.features.num_filters;

        // Unit-sphere projection: d(v/|v|) applied to upstream.
        let e = &state.embedding;
        let dot: f64 = e.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum();
        let grad_pooled: Vec<f64> = e
            .iter()
            .zip(upstream.iter())
            .map(|(&ei, &ui)| (ui - ei * dot) / state.norm)
            .collect();

        // Mean pool, activation, affine, feature normalization.
        let mut grad_features = vec![0.0; frames * filters];
        let inv_frames = 1.0 / frames as f64;
        for t in 0..frames {
            let z = &state.pre_activations[t * dim..(t + 1) * dim];
            for d in 0..dim {
                let gz = grad_pooled[d] * inv_frames * self.spec.activation.derivative(z[d]);
                if gz == 0.0 {
                    continue;
                }
                let w_row = &self.weights[d * filters..(d + 1) * filters];
                let gf_row = &mut grad_features[t * filters..(t + 1) * filters];
                for j in 0..filters {
                    gf_row[j] += gz * w_row[j] / FEATURE_SCALE;
                }
            }
        }
        Ok(self.plan.backward(&fwd, &grad_features, x.len()))
    }

    fn embed_from_features(&self, fwd: &FeatureForward) -> Result<EmbedState, SrsError> {
        let dim = self.spec.embed_dim;
        let filters = self.spec.features.num_filters;
        let frames = fwd.features.rows;
        let mut pre_activations = vec![0.0; frames * dim];
        let mut pooled = vec![0.0; dim];
        for t in 0..frames {
            let row = fwd.features.row(t);
            for d in 0..dim {
                let w_row = &self.weights[d * filters..(d + 1) * filters];
                let mut z = self.bias[d];
                for j in 0..filters {
                    z += w_row[j] * (row[j] - FEATURE_SHIFT) / FEATURE_SCALE;
                }
                pre_activations[t * dim + d] = z;
                pooled[d] += self.spec.activation.apply(z);
            }
        }
        for p in pooled.iter_mut() {
            *p /= frames as f64;
        }
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(SrsError::DegenerateEmbedding);
        }
        let embedding = pooled.iter().map(|v| v / norm).collect();
        Ok(EmbedState { embedding, pre_activations, norm })
    }
}

struct EmbedState {
    embedding: Vec<f64>,
    /// Affine outputs per frame, frame-major, kept for the backward pass.
    pre_activations: Vec<f64>,
    norm: f64,
}

/// One-shot embedding; builds the embedder internally.
pub fn embed(x: &Waveform, spec: &EmbedderSpec) -> Result<Vec<f64>, SrsError> {
    Embedder::new(spec.clone())?.embed(x)
}

/// One-shot input gradient of `<embed(x), upstream>`; see
/// [`Embedder::input_gradient`].
pub fn embed_input_grad(
    x: &Waveform,
    spec: &EmbedderSpec,
    upstream: &[f64],
) -> Result<Vec<f64>, SrsError> {
    Embedder::new(spec.clone())?.input_gradient(x, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn small_spec(activation: Activation) -> EmbedderSpec {
        EmbedderSpec {
            weight_seed: 5,
            embed_dim: 8,
            activation,
            features: FeatureConfig { frame_len: 64, hop: 32, num_filters: 6, log_floor: 1e-8 },
        }
    }

    fn test_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = seeded_rng(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        for act in [Activation::Tanh, Activation::Softplus] {
            let spec = small_spec(act);
            let x = test_wave(200, 1);
            let e1 = embed(&x, &spec).unwrap();
            let e2 = embed(&x, &spec).unwrap();
            assert_eq!(e1, e2);
            let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn different_weight_seeds_give_different_embeddings() {
        let x = test_wave(200, 2);
        let mut a_spec = small_spec(Activation::Tanh);
        let e_a = embed(&x, &a_spec).unwrap();
        a_spec.weight_seed = 6;
        let e_b = embed(&x, &a_spec).unwrap();
        let dot: f64 = e_a.iter().zip(e_b.iter()).map(|(a, b)| a * b).sum();
        assert!(dot < 0.999, "seeds should change the map, cos = {dot}");
    }

    #[test]
    fn input_gradient_matches_finite_differences_both_activations() {
        for act in [Activation::Tanh, Activation::Softplus] {
            let spec = small_spec(act);
            let emb = Embedder::new(spec.clone()).unwrap();
            let x = test_wave(160, 3);
            let mut rng = seeded_rng(9);
            let mut upstream: Vec<f64> =
                (0..spec.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let un: f64 = upstream.iter().map(|v| v * v).sum::<f64>().sqrt();
            upstream.iter_mut().for_each(|v| *v /= un);
            let grad = emb.input_gradient(&x, &upstream).unwrap();
            let scalar = |w: &Waveform| -> f64 {
                let e = emb.embed(w).unwrap();
                e.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-4;
            let mut worst = 0.0_f64;
            for idx in [0usize, 17, 63, 64, 95, 128, 159] {
                let mut plus = x.clone();
                plus.samples[idx] += h;
                let mut minus = x.clone();
                minus.samples[idx] -= h;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
                let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
                worst = worst.max((fd - grad[idx]).abs() / denom);
            }
            assert!(worst < 1e-3, "{act:?}: max rel err {worst}");
        }
    }

    #[test]
    fn samples_past_the_last_frame_get_zero_gradient() {
        let spec = small_spec(Activation::Tanh);
        let emb = Embedder::new(spec.clone()).unwrap();
        // 100 samples: one 64-sample frame starting at 0, next would need 96.
        let x = test_wave(100, 4);
        let upstream = vec![1.0; spec.embed_dim];
        let grad = emb.input_gradient(&x, &upstream).unwrap();
        // Frames cover [0, 64) and [32, 96); the tail is unreachable.
        assert!(grad[96..].iter().all(|&g| g == 0.0));
        assert!(grad[..96].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn too_short_input_is_rejected() {
        let spec = small_spec(Activation::Tanh);
        let x = test_wave(32, 5);
        assert!(matches!(embed(&x, &spec), Err(SrsError::VoiceTooShort { .. })));
    }
}
