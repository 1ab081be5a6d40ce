//! Enrollment, cosine scoring, task decision rules, and threshold tuning.

use std::collections::BTreeMap;
use std::path::Path;

use super::embedder::Embedder;
use super::SrsError;
use crate::audio::Waveform;

/// The three recognition tasks.
///
/// Open-set identification names the best-matching enrolled speaker when the
/// match is strong enough, otherwise rejects. Closed-set identification
/// always names someone. Verification guards a single enrolled speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Osi,
    Csi,
    Sv,
}

impl std::str::FromStr for TaskKind {
    type Err = SrsError;
    fn from_str(s: &str) -> Result<Self, SrsError> {
        match s {
            "osi" => Ok(TaskKind::Osi),
            "csi" => Ok(TaskKind::Csi),
            "sv" => Ok(TaskKind::Sv),
            _ => Err(SrsError::BadConfig("task must be osi, csi, or sv")),
        }
    }
}

/// One enrolled speaker: id plus unit-norm voiceprint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Enrollment {
    pub id: String,
    pub embedding: Vec<f64>,
}

/// Enrollment table for one task. Score vectors index into `entries` in
/// order, so the file format keeps entries as an explicit list.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpeakerDatabase {
    pub task: TaskKind,
    pub entries: Vec<Enrollment>,
    /// Acceptance threshold for OSI and SV; irrelevant to CSI.
    pub threshold: Option<f64>,
}

/// What the system says about a voice. `Speaker` carries the index into the
/// enrollment order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Decision {
    Speaker(usize),
    Imposter,
}

impl SpeakerDatabase {
    pub fn num_speakers(&self) -> usize {
        self.entries.len()
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn require_threshold(&self) -> Result<f64, SrsError> {
        self.threshold.ok_or(SrsError::ThresholdUnset)
    }

    pub fn save(&self, path: &Path) -> Result<(), SrsError> {
        let json = serde_json::to_string_pretty(self).map_err(SrsError::Serde)?;
        std::fs::write(path, json).map_err(SrsError::Io)
    }

    pub fn load(path: &Path) -> Result<Self, SrsError> {
        let text = std::fs::read_to_string(path).map_err(SrsError::Io)?;
        let db: SpeakerDatabase = serde_json::from_str(&text).map_err(SrsError::Serde)?;
        db.validate()?;
        Ok(db)
    }

    pub fn validate(&self) -> Result<(), SrsError> {
        if self.entries.is_empty() {
            return Err(SrsError::BadConfig("database has no enrollments"));
        }
        if self.task == TaskKind::Sv && self.entries.len() != 1 {
            return Err(SrsError::BadConfig("verification enrolls exactly one speaker"));
        }
        let dim = self.entries[0].embedding.len();
        for e in &self.entries {
            if e.embedding.len() != dim {
                return Err(SrsError::BadConfig("enrollment embedding dims disagree"));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(SrsError::BadConfig("enrollment embedding has non-finite values"));
            }
        }
        Ok(())
    }
}

/// Builds a database from enrollment voices: each speaker's voiceprint is the
/// renormalized mean of their utterance embeddings. Map iteration order fixes
/// the enrollment order (BTreeMap, so sorted by id).
pub fn enroll(
    voices: &BTreeMap<String, Vec<Waveform>>,
    embedder: &Embedder,
    task: TaskKind,
) -> Result<SpeakerDatabase, SrsError> {
    if voices.is_empty() {
        return Err(SrsError::BadConfig("no speakers to enroll"));
    }
    if task == TaskKind::Sv && voices.len() != 1 {
        return Err(SrsError::BadConfig("verification enrolls exactly one speaker"));
    }
    let mut entries = Vec::with_capacity(voices.len());
    for (id, utterances) in voices {
        if utterances.is_empty() {
            return Err(SrsError::EmptyEnrollment(id.clone()));
        }
        let mut mean = vec![0.0; embedder.embed_dim()];
        for utt in utterances {
            let e = embedder.embed(utt)?;
            for (m, v) in mean.iter_mut().zip(e.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= utterances.len() as f64;
        }
        let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(SrsError::DegenerateEmbedding);
        }
        mean.iter_mut().for_each(|v| *v /= norm);
        entries.push(Enrollment { id: id.clone(), embedding: mean });
    }
    Ok(SpeakerDatabase { task, entries, threshold: None })
}

/// Cosine scores of a test embedding against every enrollment, in enrollment
/// order. Both sides are unit norm, so this is a plain dot product.
pub fn score_embedding(embedding: &[f64], db: &SpeakerDatabase) -> Vec<f64> {
    db.entries
        .iter()
        .map(|e| e.embedding.iter().zip(embedding.iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Embeds a voice and scores it against the database.
pub fn score(x: &Waveform, db: &SpeakerDatabase, embedder: &Embedder) -> Result<Vec<f64>, SrsError> {
    Ok(score_embedding(&embedder.embed(x)?, db))
}

/// Index of the highest score; ties go to the lower index so decisions stay
/// deterministic.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Task decision rule. OSI accepts the argmax speaker when the top score
/// reaches the threshold and rejects otherwise; CSI always answers the
/// argmax; SV compares its single score against the threshold.
pub fn decide(scores: &[f64], db: &SpeakerDatabase) -> Result<Decision, SrsError> {
    if scores.len() != db.entries.len() {
        return Err(SrsError::BadConfig("score vector length mismatches enrollment count"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SrsError::NonFiniteScore);
    }
    match db.task {
        TaskKind::Csi => Ok(Decision::Speaker(argmax(scores))),
        TaskKind::Osi => {
            let theta = db.require_threshold()?;
            let best = argmax(scores);
            if scores[best] >= theta {
                Ok(Decision::Speaker(best))
            } else {
                Ok(Decision::Imposter)
            }
        }
        TaskKind::Sv => {
            let theta = db.require_threshold()?;
            if scores[0] >= theta {
                Ok(Decision::Speaker(0))
            } else {
                Ok(Decision::Imposter)
            }
        }
    }
}

/// Equal error rate threshold sweep.
///
/// Candidates are the midpoints between consecutive distinct values of the
/// pooled score lists. A score at or above the threshold counts as accepted,
/// so FAR is the accepted fraction of `imposter` and FRR the rejected
/// fraction of `genuine`. Returns the threshold minimizing |FAR - FRR|,
/// breaking ties toward lower (FAR + FRR) / 2 and then lower threshold,
/// along with that (FAR + FRR) / 2 value.
pub fn tune_threshold_eer(genuine: &[f64], imposter: &[f64]) -> Result<(f64, f64), SrsError> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(SrsError::EmptyScoreList);
    }
    if genuine.iter().chain(imposter.iter()).any(|s| !s.is_finite()) {
        return Err(SrsError::NonFiniteScore);
    }
    let mut pooled: Vec<f64> = genuine.iter().chain(imposter.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pooled.dedup();
    let candidates: Vec<f64> = if pooled.len() == 1 {
        vec![pooled[0]]
    } else {
        pooled.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    };
    let mut best: Option<(f64, f64, f64)> = None; // (theta, |far-frr|, eer)
    for &theta in &candidates {
        let far = imposter.iter().filter(|&&s| s >= theta).count() as f64 / imposter.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < theta).count() as f64 / genuine.len() as f64;
        let gap = (far - frr).abs();
        let eer = (far + frr) / 2.0;
        let better = match &best {
            None => true,
            Some((bt, bgap, beer)) => {
                gap < bgap - 1e-15
                    || (gap < bgap + 1e-15 && eer < beer - 1e-15)
                    || (gap < bgap + 1e-15 && (eer - beer).abs() <= 1e-15 && theta < *bt)
            }
        };
        if better {
            best = Some((theta, gap, eer));
        }
    }
    let (theta, _, eer) = best.expect("candidate list is never empty");
    Ok((theta, eer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srs::embedder::{Activation, EmbedderSpec};
    use crate::srs::features::FeatureConfig;

    fn tiny_embedder() -> Embedder {
        Embedder::new(EmbedderSpec {
            weight_seed: 11,
            embed_dim: 8,
            activation: Activation::Tanh,
            features: FeatureConfig { frame_len: 64, hop: 32, num_filters: 6, log_floor: 1e-8 },
        })
        .unwrap()
    }

    fn tiny_corpus(speakers: usize) -> BTreeMap<String, Vec<Waveform>> {
        crate::audio::generate_corpus(speakers, 2, 0.05, 77)
    }

    #[test]
    fn enrollment_embeddings_are_unit_norm() {
        let db = enroll(&tiny_corpus(3), &tiny_embedder(), TaskKind::Csi).unwrap();
        assert_eq!(db.num_speakers(), 3);
        for e in &db.entries {
            let norm: f64 = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_scores_beat_cross_scores() {
        let emb = tiny_embedder();
        let corpus = tiny_corpus(4);
        let db = enroll(&corpus, &emb, TaskKind::Csi).unwrap();
        for (idx, (_, voices)) in corpus.iter().enumerate() {
            let scores = score(&voices[0], &db, &emb).unwrap();
            assert_eq!(argmax(&scores), idx, "scores {scores:?}");
        }
    }

    #[test]
    fn osi_rejects_below_threshold_and_csi_never_rejects() {
        let mut db = SpeakerDatabase {
            task: TaskKind::Osi,
            entries: vec![
                Enrollment { id: "a".into(), embedding: vec![1.0, 0.0] },
                Enrollment { id: "b".into(), embedding: vec![0.0, 1.0] },
            ],
            threshold: Some(0.5),
        };
        assert_eq!(decide(&[0.3, 0.6], &db).unwrap(), Decision::Speaker(1));
        assert_eq!(decide(&[0.3, 0.4], &db).unwrap(), Decision::Imposter);
        // Acceptance is inclusive at the threshold.
        assert_eq!(decide(&[0.5, 0.1], &db).unwrap(), Decision::Speaker(0));
        db.task = TaskKind::Csi;
        db.threshold = None;
        assert_eq!(decide(&[0.3, 0.4], &db).unwrap(), Decision::Speaker(1));
        db.task = TaskKind::Osi;
        assert!(matches!(decide(&[0.3, 0.4], &db), Err(SrsError::ThresholdUnset)));
    }

    #[test]
    fn sv_compares_single_score() {
        let db = SpeakerDatabase {
            task: TaskKind::Sv,
            entries: vec![Enrollment { id: "a".into(), embedding: vec![1.0, 0.0] }],
            threshold: Some(0.7),
        };
        assert_eq!(decide(&[0.71], &db).unwrap(), Decision::Speaker(0));
        assert_eq!(decide(&[0.69], &db).unwrap(), Decision::Imposter);
    }

    #[test]
    fn eer_tuning_separable_lists_yields_zero_eer_at_midpoint() {
        let (theta, eer) = tune_threshold_eer(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
        assert_eq!(theta, 0.5);
        assert_eq!(eer, 0.0);
    }

    #[test]
    fn eer_tuning_interleaved_lists() {
        let (theta, eer) = tune_threshold_eer(&[0.4, 0.8], &[0.2, 0.6]).unwrap();
        assert_eq!(theta, 0.5);
        assert_eq!(eer, 0.5);
    }

    #[test]
    fn eer_tuning_identical_lists_gives_half() {
        let (_, eer) = tune_threshold_eer(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12);
        let (theta, eer) = tune_threshold_eer(&[0.5], &[0.5]).unwrap();
        assert_eq!(theta, 0.5);
        assert!((eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_tuning_rejects_bad_input() {
        assert!(matches!(tune_threshold_eer(&[], &[0.1]), Err(SrsError::EmptyScoreList)));
        assert!(matches!(
            tune_threshold_eer(&[f64::NAN], &[0.1]),
            Err(SrsError::NonFiniteScore)
        ));
    }

    #[test]
    fn database_roundtrips_through_json() {
        let emb = tiny_embedder();
        let mut db = enroll(&tiny_corpus(2), &emb, TaskKind::Osi).unwrap();
        db.threshold = Some(0.42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        db.save(&path).unwrap();
        let back = SpeakerDatabase::load(&path).unwrap();
        assert_eq!(back.task, db.task);
        assert_eq!(back.threshold, db.threshold);
        assert_eq!(back.entries.len(), db.entries.len());
        for (a, b) in db.entries.iter().zip(back.entries.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.embedding, b.embedding, "embeddings must survive as exact decimals");
        }
    }
}
