//! Experiment orchestration: recognition and attack-success metrics, target
//! selection, transferability measurement, and deterministic report files.
//!
//! Everything here is replay-exact: all randomness is split from one master
//! seed per voice, collections iterate in key order, and reports carry no
//! timestamps, so the same config produces the same bytes twice. Wall time
//! goes to stderr where it cannot perturb a diff.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::attack::{
    cw2, estimate_threshold, fakebob, fakebob_with, fgsm, pgd, AttackConfig, AttackError,
    AttackOutcome, CountingOracle, GradientSource, OptimizerKind, ScoreOracle,
    ThresholdSearchConfig, WhiteBoxModel,
};
use crate::audio::{
    generate_corpus, power, store_wav, AudioError, SynthSpeakerSpec, Waveform, SAMPLE_RATE,
};
use crate::losses::{
    goal_met, untargeted_success, AttackSetting, AttackTarget, LossError, LossId, SettingId,
    SourceSpeaker,
};
use crate::ota::{
    robust_attack, simulate_rir, transmit, ImpulseResponse, OtaError, RobustAttackConfig,
    RoomSpec, SnrReference, TransformKind, TransformSet,
};
use crate::rng::{derive_seed, seeded_rng};
use crate::srs::{
    decide, enroll, score, tune_threshold_eer, Activation, Decision, Embedder, EmbedderSpec,
    SpeakerDatabase, SrsError, TaskKind,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("no trials to score")]
    EmptyTrials,
    #[error("trials mix different settings")]
    MixedSettings,
    #[error("waveform lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no candidate target besides the source")]
    NoCandidateTargets,
    #[error("fixed target {0} is the source speaker")]
    FixedTargetIsSource(usize),
    #[error("target index {index} out of range for {num_speakers} speakers")]
    TargetOutOfRange { index: usize, num_speakers: usize },
    #[error("bad experiment config: {0}")]
    BadConfig(&'static str),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Srs(#[from] SrsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Ota(#[from] OtaError),
}

impl HarnessError {
    fn stage(stage: &'static str, source: impl Into<HarnessError>) -> Self {
        HarnessError::Stage { stage, source: Box::new(source.into()) }
    }
}

fn pct(numerator: usize, denominator: usize) -> f64 {
    100.0 * numerator as f64 / denominator as f64
}

/// Recognition rates over labeled trials, in percent. Rates whose group is
/// empty are absent rather than zero: a system with no imposter trials has
/// no false accept rate, not a perfect one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RateReport {
    /// Exactly-right fraction over all trials: the truth speaker for
    /// enrolled voices, rejection for imposter voices.
    pub acc: f64,
    /// Imposter-truth voices accepted as anyone.
    pub far: Option<f64>,
    /// Enrolled-truth voices rejected.
    pub frr: Option<f64>,
    /// Enrolled-truth voices accepted but as the wrong speaker.
    pub ier: Option<f64>,
}

/// `trials` pairs ground truth with the system's decision. Truth uses the
/// same type: `Speaker(s)` when enrolled speaker `s` is talking, `Imposter`
/// when nobody enrolled is.
pub fn compute_rates(trials: &[(Decision, Decision)]) -> Result<RateReport, HarnessError> {
    if trials.is_empty() {
        return Err(HarnessError::EmptyTrials);
    }
    let mut correct = 0usize;
    let mut enrolled = 0usize;
    let mut imposter = 0usize;
    let mut false_accept = 0usize;
    let mut false_reject = 0usize;
    let mut misidentified = 0usize;
    for &(truth, decided) in trials {
        if truth == decided {
            correct += 1;
        }
        match truth {
            Decision::Imposter => {
                imposter += 1;
                if matches!(decided, Decision::Speaker(_)) {
                    false_accept += 1;
                }
            }
            Decision::Speaker(_) => {
                enrolled += 1;
                match decided {
                    Decision::Imposter => false_reject += 1,
                    d if d != truth => misidentified += 1,
                    _ => {}
                }
            }
        }
    }
    let over = |n: usize, d: usize| if d == 0 { None } else { Some(pct(n, d)) };
    Ok(RateReport {
        acc: pct(correct, trials.len()),
        far: over(false_accept, imposter),
        frr: over(false_reject, enrolled),
        ier: over(misidentified, enrolled),
    })
}

/// One attacked voice: the setting it was attacked under (targets resolved
/// per voice) and where the system landed on the final waveform.
#[derive(Debug, Clone, Copy)]
pub struct AttackTrial {
    pub setting: AttackSetting,
    pub final_decision: Decision,
}

/// Attack success rates in percent. `asr_t` counts the exact goal decision
/// and is absent for untargeted settings. `asr_u` counts any misbehavior the
/// setting recognizes. The open-set enrolled-source untargeted setting can
/// misbehave two ways, so it alone reports the split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AsrReport {
    pub asr_t: Option<f64>,
    pub asr_u: f64,
    /// Voices the system now rejects outright.
    pub rejected_pct: Option<f64>,
    /// Voices the system now assigns to a different enrolled speaker.
    pub misidentified_pct: Option<f64>,
}

pub fn compute_asr(trials: &[AttackTrial]) -> Result<AsrReport, HarnessError> {
    let first = trials.first().ok_or(HarnessError::EmptyTrials)?;
    let id = first.setting.id();
    if trials.iter().any(|t| t.setting.id() != id) {
        return Err(HarnessError::MixedSettings);
    }
    let n = trials.len();
    let targeted = !matches!(first.setting.target(), AttackTarget::Untargeted);
    let asr_t = targeted.then(|| {
        pct(trials.iter().filter(|t| goal_met(&t.setting, t.final_decision)).count(), n)
    });
    let asr_u =
        pct(trials.iter().filter(|t| untargeted_success(&t.setting, t.final_decision)).count(), n);
    let (rejected_pct, misidentified_pct) = if id == SettingId::C4 {
        let rejected =
            trials.iter().filter(|t| t.final_decision == Decision::Imposter).count();
        let misidentified = trials
            .iter()
            .filter(|t| {
                matches!(t.final_decision, Decision::Speaker(_))
                    && untargeted_success(&t.setting, t.final_decision)
            })
            .count();
        (Some(pct(rejected, n)), Some(pct(misidentified, n)))
    } else {
        (None, None)
    };
    Ok(AsrReport { asr_t, asr_u, rejected_pct, misidentified_pct })
}

/// How audible the perturbation is. `snr_db` compares clean-signal power to
/// perturbation power; an untouched voice reports `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StealthReport {
    pub l2: f64,
    pub linf: f64,
    pub snr_db: f64,
}

pub fn stealth_metrics(x: &Waveform, x_adv: &Waveform) -> Result<StealthReport, HarnessError> {
    if x.len() != x_adv.len() {
        return Err(HarnessError::LengthMismatch(x.len(), x_adv.len()));
    }
    let delta: Vec<f64> =
        x_adv.samples.iter().zip(x.samples.iter()).map(|(&a, &b)| a - b).collect();
    let l2 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let linf = delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let p_delta = power(&delta);
    let snr_db = if p_delta == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (power(&x.samples) / p_delta).log10()
    };
    Ok(StealthReport { l2, linf, snr_db })
}

/// How the harness picks `t` when a setting leaves the choice open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TargetPolicy {
    /// Seeded uniform draw over the enrolled speakers besides the source.
    Random,
    /// The enrolled speaker the clean voice scores lowest against, the
    /// hardest plausible target.
    LeastLikely,
    Fixed(usize),
}

/// Picks a target index given the clean voice's scores against every
/// enrollment. The source, when enrolled, is never a candidate.
pub fn select_target<R: Rng>(
    policy: TargetPolicy,
    source: SourceSpeaker,
    scores: &[f64],
    rng: &mut R,
) -> Result<usize, HarnessError> {
    let n = scores.len();
    let excluded = match source {
        SourceSpeaker::Enrolled(s) => Some(s),
        SourceSpeaker::Unenrolled => None,
    };
    if let TargetPolicy::Fixed(t) = policy {
        if t >= n {
            return Err(HarnessError::TargetOutOfRange { index: t, num_speakers: n });
        }
        if excluded == Some(t) {
            return Err(HarnessError::FixedTargetIsSource(t));
        }
        return Ok(t);
    }
    let candidates: Vec<usize> = (0..n).filter(|i| Some(*i) != excluded).collect();
    if candidates.is_empty() {
        return Err(HarnessError::NoCandidateTargets);
    }
    Ok(match policy {
        TargetPolicy::Random => candidates[rng.gen_range(0..candidates.len())],
        TargetPolicy::LeastLikely => candidates
            .iter()
            .copied()
            .min_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"))
            .expect("non-empty candidates"),
        TargetPolicy::Fixed(_) => unreachable!("handled above"),
    })
}

/// Mean `L1` norm of the loss gradient at the clean voices. Large values
/// mean the loss surface is steep at the data, which is exactly what makes a
/// model receptive to perturbations crafted elsewhere: a first-order bound
/// on the loss change under any budget-`eps` perturbation is
/// `eps * |grad|_1`, so steep models certify a bigger worst case.
pub fn input_gradient_size(
    voices: &[(AttackSetting, &Waveform)],
    loss: LossId,
    model: &WhiteBoxModel,
) -> Result<f64, HarnessError> {
    if voices.is_empty() {
        return Err(HarnessError::EmptyTrials);
    }
    let mut total = 0.0;
    for (setting, x) in voices {
        let g = model.input_gradient(x, loss, setting)?;
        total += g.iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(total / voices.len() as f64)
}

/// Cross-model evaluation knobs. The attack is the iterated sign descent
/// under `epsilon`, run white-box on each source model in turn.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Leading voices per speaker used for enrollment; the rest are attacked.
    pub enroll_utterances: usize,
    pub loss: LossId,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            epsilon: 0.002,
            alpha: 0.0004,
            iterations: 5,
            enroll_utterances: 2,
            loss: LossId::SourceMargin,
            seed: 0,
        }
    }
}

/// Accuracy drops from crafting on one model and testing on another.
/// `accuracy_drop[i][j]` is clean accuracy of model `j` minus its accuracy
/// on voices crafted against model `i`, in points; the diagonal is the
/// self-attack. Gradient size and the first-order transfer bound
/// `epsilon * gradient_size` are per receiving model.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TransferReport {
    pub model_ids: Vec<String>,
    pub clean_accuracy: Vec<f64>,
    pub adversarial_accuracy: Vec<Vec<f64>>,
    pub accuracy_drop: Vec<Vec<f64>>,
    pub gradient_size: Vec<f64>,
    pub transfer_bound: Vec<f64>,
}

impl TransferReport {
    /// One row per (source, target) pair, diagonal included.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = String::from(
            "source_model,target_model,clean_acc,adv_acc,accuracy_drop,target_gradient_size,target_transfer_bound\n",
        );
        for (i, source) in self.model_ids.iter().enumerate() {
            for (j, target) in self.model_ids.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    source,
                    target,
                    fmt_f64(self.clean_accuracy[j]),
                    fmt_f64(self.adversarial_accuracy[i][j]),
                    fmt_f64(self.accuracy_drop[i][j]),
                    fmt_f64(self.gradient_size[j]),
                    fmt_f64(self.transfer_bound[j]),
                ));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// A short, stable name for a model variant, used in reports.
pub fn model_id(spec: &EmbedderSpec) -> String {
    let act = match spec.activation {
        Activation::Tanh => "tanh",
        Activation::Softplus => "softplus",
    };
    format!("dim{}_seed{}_{}", spec.embed_dim, spec.weight_seed, act)
}

/// Runs the close-set untargeted attack white-box against every model in
/// turn and measures every model's accuracy on the results. All models
/// enroll the same speakers from the same voices; only the embedder varies.
pub fn transfer_matrix(
    specs: &[EmbedderSpec],
    corpus: &BTreeMap<String, Vec<Waveform>>,
    cfg: &TransferConfig,
) -> Result<TransferReport, HarnessError> {
    if specs.len() < 2 {
        return Err(HarnessError::BadConfig("transfer needs at least two model variants"));
    }
    if cfg.enroll_utterances == 0 {
        return Err(HarnessError::BadConfig("enrollment needs at least one voice per speaker"));
    }
    if corpus.values().any(|utts| utts.len() <= cfg.enroll_utterances) {
        return Err(HarnessError::BadConfig("corpus leaves no evaluation voices"));
    }
    let enroll_set: BTreeMap<String, Vec<Waveform>> = corpus
        .iter()
        .map(|(id, utts)| (id.clone(), utts[..cfg.enroll_utterances].to_vec()))
        .collect();
    let mut models = Vec::with_capacity(specs.len());
    for spec in specs {
        let embedder = Embedder::new(spec.clone())
            .map_err(|e| HarnessError::stage("model construction", e))?;
        let db = enroll(&enroll_set, &embedder, TaskKind::Csi)
            .map_err(|e| HarnessError::stage("enrollment", e))?;
        models.push((model_id(spec), embedder, db));
    }

    let num_speakers = corpus.len();
    let mut eval: Vec<(AttackSetting, &Waveform)> = Vec::new();
    for (s, utts) in corpus.values().enumerate() {
        for x in &utts[cfg.enroll_utterances..] {
            let setting = AttackSetting::new(
                SettingId::C8,
                SourceSpeaker::Enrolled(s),
                AttackTarget::Untargeted,
                num_speakers,
            )?;
            eval.push((setting, x));
        }
    }

    let accuracy_of = |waves: &[Waveform], embedder: &Embedder, db: &SpeakerDatabase| {
        let mut correct = 0usize;
        for ((setting, _), wave) in eval.iter().zip(waves.iter()) {
            let s = score(wave, db, embedder)?;
            let d = decide(&s, db)?;
            if let SourceSpeaker::Enrolled(truth) = setting.source() {
                if d == Decision::Speaker(truth) {
                    correct += 1;
                }
            }
        }
        Ok::<f64, HarnessError>(pct(correct, eval.len()))
    };

    let clean_waves: Vec<Waveform> = eval.iter().map(|(_, x)| (*x).clone()).collect();
    let mut clean_accuracy = Vec::with_capacity(models.len());
    let mut gradient_size = Vec::with_capacity(models.len());
    for (_, embedder, db) in &models {
        clean_accuracy.push(accuracy_of(&clean_waves, embedder, db)?);
        let model = WhiteBoxModel::new(db, embedder);
        gradient_size.push(input_gradient_size(&eval, cfg.loss, &model)?);
    }

    let attack_cfg = AttackConfig {
        optimizer: OptimizerKind::Pgd,
        epsilon: cfg.epsilon,
        alpha: cfg.alpha,
        iterations: cfg.iterations,
        ..AttackConfig::default()
    };
    let mut adversarial_accuracy = vec![vec![0.0; models.len()]; models.len()];
    for (i, (_, embedder, db)) in models.iter().enumerate() {
        let model = WhiteBoxModel::new(db, embedder);
        let mut crafted = Vec::with_capacity(eval.len());
        for (v, (setting, x)) in eval.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[i as u64, v as u64]);
            let outcome = pgd(x, cfg.loss, setting, &model, &attack_cfg, seed)
                .map_err(|e| HarnessError::stage("attack", e))?;
            crafted.push(outcome.adversarial);
        }
        for (j, (_, embedder, db)) in models.iter().enumerate() {
            adversarial_accuracy[i][j] = accuracy_of(&crafted, embedder, db)?;
        }
    }

    let accuracy_drop = adversarial_accuracy
        .iter()
        .map(|row| row.iter().zip(clean_accuracy.iter()).map(|(a, c)| c - a).collect())
        .collect();
    let transfer_bound = gradient_size.iter().map(|g| cfg.epsilon * g).collect();
    Ok(TransferReport {
        model_ids: models.into_iter().map(|(id, _, _)| id).collect(),
        clean_accuracy,
        adversarial_accuracy,
        accuracy_drop,
        gradient_size,
        transfer_bound,
    })
}

/// Synthetic corpus shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
}

/// A full attack run: corpus, one model, one setting, one optimizer.
///
/// The first `enrolled_speakers` corpus speakers enroll with their first
/// `enroll_utterances` voices. Enrolled-source settings attack the enrolled
/// speakers' remaining voices; unenrolled-source settings attack every voice
/// of the remaining speakers. `threshold` overrides tuning; `None` tunes at
/// the equal error rate, which needs at least one unenrolled speaker.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub corpus: CorpusConfig,
    pub model: EmbedderSpec,
    pub setting: SettingId,
    /// Required exactly when the setting leaves the target choice open
    /// (an enrolled target with more than one legal value).
    pub target_policy: Option<TargetPolicy>,
    pub loss: LossId,
    pub attack: AttackConfig,
    pub enrolled_speakers: usize,
    pub enroll_utterances: usize,
    pub threshold: Option<f64>,
    /// Deterministic cap on how many voices get attacked.
    pub max_voices: Option<usize>,
    pub master_seed: u64,
}

/// Which kind of target a setting's goal column names.
enum TargetKind {
    /// The adversary picks an enrolled speaker.
    EnrolledChoice,
    /// Verification accept: the single enrolled speaker.
    ForcedFirst,
    Imposter,
    Untargeted,
}

fn target_kind(id: SettingId) -> TargetKind {
    match id {
        SettingId::C1 | SettingId::C2 | SettingId::C6 | SettingId::C7 => TargetKind::EnrolledChoice,
        SettingId::C10 => TargetKind::ForcedFirst,
        SettingId::C3 | SettingId::C9 => TargetKind::Imposter,
        SettingId::C4 | SettingId::C5 | SettingId::C8 => TargetKind::Untargeted,
    }
}

fn validate_common(
    corpus: &CorpusConfig,
    setting: SettingId,
    target_policy: Option<TargetPolicy>,
    enrolled_speakers: usize,
    enroll_utterances: usize,
    threshold: Option<f64>,
) -> Result<(), HarnessError> {
    if corpus.num_speakers == 0 || corpus.utterances_per_speaker == 0 || !(corpus.duration_s > 0.0)
    {
        return Err(HarnessError::BadConfig("corpus must be non-empty"));
    }
    if enrolled_speakers == 0 || enrolled_speakers > corpus.num_speakers {
        return Err(HarnessError::BadConfig("enrolled speakers out of range"));
    }
    if enroll_utterances == 0 || enroll_utterances >= corpus.utterances_per_speaker {
        return Err(HarnessError::BadConfig(
            "enrollment must leave at least one evaluation voice per speaker",
        ));
    }
    let task = setting.task();
    if task == TaskKind::Sv && enrolled_speakers != 1 {
        return Err(HarnessError::BadConfig("verification enrolls exactly one speaker"));
    }
    if !setting.source_enrolled() && enrolled_speakers == corpus.num_speakers {
        return Err(HarnessError::BadConfig(
            "unenrolled-source settings need speakers outside the enrolled set",
        ));
    }
    if task != TaskKind::Csi && threshold.is_none() && enrolled_speakers == corpus.num_speakers {
        return Err(HarnessError::BadConfig(
            "threshold tuning needs imposter voices; enroll fewer speakers or set one",
        ));
    }
    match target_kind(setting) {
        TargetKind::EnrolledChoice => {
            if target_policy.is_none() {
                return Err(HarnessError::BadConfig(
                    "this setting picks an enrolled target; set a target policy",
                ));
            }
            if setting.source_enrolled() && enrolled_speakers < 2 {
                return Err(HarnessError::BadConfig(
                    "an enrolled source needs a second enrolled speaker to target",
                ));
            }
        }
        _ => {
            if target_policy.is_some() {
                return Err(HarnessError::BadConfig(
                    "this setting's target is fixed by its goal; drop the target policy",
                ));
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        validate_common(
            &self.corpus,
            self.setting,
            self.target_policy,
            self.enrolled_speakers,
            self.enroll_utterances,
            self.threshold,
        )?;
        self.attack.validate()?;
        Ok(())
    }
}

/// A robust (expectation-over-transforms) run plus its held-out playback
/// evaluation. The attack averages gradients over transforms drawn from
/// `training_rooms` at `snr_lo..snr_hi`; success is then judged through a
/// room the attack never saw, at each evaluation SNR.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RobustExperimentConfig {
    pub experiment_id: String,
    pub corpus: CorpusConfig,
    pub model: EmbedderSpec,
    pub setting: SettingId,
    pub target_policy: Option<TargetPolicy>,
    pub loss: LossId,
    pub robust: RobustAttackConfig,
    pub kind: TransformKind,
    pub training_rooms: Vec<RoomSpec>,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub eval_room: RoomSpec,
    pub eval_snrs: Vec<f64>,
    pub enrolled_speakers: usize,
    pub enroll_utterances: usize,
    pub threshold: Option<f64>,
    pub max_voices: Option<usize>,
    pub master_seed: u64,
}

impl RobustExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        validate_common(
            &self.corpus,
            self.setting,
            self.target_policy,
            self.enrolled_speakers,
            self.enroll_utterances,
            self.threshold,
        )?;
        self.robust.validate()?;
        let uses_rir = matches!(self.kind, TransformKind::RirOnly | TransformKind::NoiseAndRir);
        if uses_rir && self.training_rooms.is_empty() {
            return Err(HarnessError::BadConfig("room-based transforms need training rooms"));
        }
        if self.eval_snrs.is_empty() {
            return Err(HarnessError::BadConfig("evaluation needs at least one SNR"));
        }
        Ok(())
    }
}

/// An attack run followed by a playback sweep over every combination of
/// room pool, transform kind, and SNR.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OtaEvalConfig {
    pub experiment: ExperimentConfig,
    pub pools: Vec<NamedRoomPool>,
    pub kinds: Vec<TransformKind>,
    pub snrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NamedRoomPool {
    pub name: String,
    pub rooms: Vec<RoomSpec>,
}

impl OtaEvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.experiment.validate()?;
        if self.pools.is_empty() || self.kinds.is_empty() || self.snrs.is_empty() {
            return Err(HarnessError::BadConfig(
                "the sweep needs at least one pool, kind, and SNR",
            ));
        }
        if self.pools.iter().any(|p| p.rooms.is_empty()) {
            return Err(HarnessError::BadConfig("every pool needs at least one room"));
        }
        Ok(())
    }
}

/// One attacked voice in the JSON-lines record stream.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VoiceRecord {
    pub voice_id: String,
    pub speaker: String,
    pub setting: &'static str,
    pub loss: &'static str,
    pub optimizer: &'static str,
    pub source: SourceSpeaker,
    pub target: AttackTarget,
    pub clean_decision: Decision,
    pub final_decision: Decision,
    pub success: bool,
    pub untargeted_success: bool,
    pub iterations_used: usize,
    pub queries_used: u64,
    pub final_loss: f64,
    pub l2: f64,
    pub linf: f64,
    /// Absent means no perturbation at all (unbounded ratio).
    pub snr_db: Option<f64>,
}

/// Aggregates over one experiment, mirroring the summary CSV row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub model_id: String,
    pub setting: &'static str,
    pub loss: &'static str,
    pub optimizer: &'static str,
    pub voices: usize,
    pub clean: RateReport,
    pub attack: AsrReport,
    pub mean_l2: f64,
    pub mean_linf: f64,
    /// Mean over voices with a nonzero perturbation; absent if none have one.
    pub mean_snr_db: Option<f64>,
    pub mean_queries: f64,
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const SUMMARY_CSV_HEADER: &str = "experiment_id,model_id,setting,loss,optimizer,voices,\
clean_acc,clean_far,clean_frr,clean_ier,asr_t,asr_u,rejected_pct,misidentified_pct,\
mean_l2,mean_linf,mean_snr_db,mean_queries,pesq";

impl ExperimentSummary {
    /// The `pesq` column is reserved for externally computed perceptual
    /// scores and is always empty here.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
            self.experiment_id,
            self.model_id,
            self.setting,
            self.loss,
            self.optimizer,
            self.voices,
            fmt_f64(self.clean.acc),
            fmt_opt(self.clean.far),
            fmt_opt(self.clean.frr),
            fmt_opt(self.clean.ier),
            fmt_opt(self.attack.asr_t),
            fmt_f64(self.attack.asr_u),
            fmt_opt(self.attack.rejected_pct),
            fmt_opt(self.attack.misidentified_pct),
            fmt_f64(self.mean_l2),
            fmt_f64(self.mean_linf),
            fmt_opt(self.mean_snr_db),
            fmt_f64(self.mean_queries),
        )
    }
}

/// The descriptive fields every run variant shares; the attack itself is
/// supplied as a closure.
#[derive(Debug, Clone, Copy)]
struct RunShape {
    setting: SettingId,
    target_policy: Option<TargetPolicy>,
    loss: LossId,
    optimizer_name: &'static str,
    enrolled_speakers: usize,
    enroll_utterances: usize,
    max_voices: Option<usize>,
    master_seed: u64,
}

struct SourceVoice {
    voice_id: String,
    speaker: String,
    source: SourceSpeaker,
    waveform: Waveform,
}

fn collect_sources(
    shape: &RunShape,
    corpus: &BTreeMap<String, Vec<Waveform>>,
) -> Vec<SourceVoice> {
    let mut sources = Vec::new();
    if shape.setting.source_enrolled() {
        for (s, (id, utts)) in corpus.iter().take(shape.enrolled_speakers).enumerate() {
            for (u, x) in utts[shape.enroll_utterances..].iter().enumerate() {
                sources.push(SourceVoice {
                    voice_id: format!("{id}_utt{:02}", shape.enroll_utterances + u),
                    speaker: id.clone(),
                    source: SourceSpeaker::Enrolled(s),
                    waveform: x.clone(),
                });
            }
        }
    } else {
        for (id, utts) in corpus.iter().skip(shape.enrolled_speakers) {
            for (u, x) in utts.iter().enumerate() {
                sources.push(SourceVoice {
                    voice_id: format!("{id}_utt{u:02}"),
                    speaker: id.clone(),
                    source: SourceSpeaker::Unenrolled,
                    waveform: x.clone(),
                });
            }
        }
    }
    if let Some(cap) = shape.max_voices {
        sources.truncate(cap);
    }
    sources
}

/// Tunes the decision threshold at the equal error rate: genuine scores are
/// enrolled speakers' evaluation voices against their own enrollment,
/// imposter scores are unenrolled speakers' voices at their best enrollment.
fn tune_from_corpus(
    enrolled_speakers: usize,
    enroll_utterances: usize,
    corpus: &BTreeMap<String, Vec<Waveform>>,
    db: &SpeakerDatabase,
    embedder: &Embedder,
) -> Result<f64, HarnessError> {
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for (s, (_, utts)) in corpus.iter().take(enrolled_speakers).enumerate() {
        for x in &utts[enroll_utterances..] {
            genuine.push(score(x, db, embedder)?[s]);
        }
    }
    for (_, utts) in corpus.iter().skip(enrolled_speakers) {
        for x in utts {
            let scores = score(x, db, embedder)?;
            imposter.push(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let (theta, _eer) = tune_threshold_eer(&genuine, &imposter)?;
    Ok(theta)
}

/// The stack every run variant starts from: a deterministic corpus, one
/// embedder, and an enrolled database with its threshold resolved.
struct PreparedStack {
    corpus: BTreeMap<String, Vec<Waveform>>,
    embedder: Embedder,
    db: SpeakerDatabase,
}

fn prepare_stack(
    corpus_cfg: &CorpusConfig,
    model: &EmbedderSpec,
    setting: SettingId,
    enrolled_speakers: usize,
    enroll_utterances: usize,
    threshold: Option<f64>,
    master_seed: u64,
) -> Result<PreparedStack, HarnessError> {
    let corpus = generate_corpus(
        corpus_cfg.num_speakers,
        corpus_cfg.utterances_per_speaker,
        corpus_cfg.duration_s,
        master_seed,
    );
    let embedder =
        Embedder::new(model.clone()).map_err(|e| HarnessError::stage("model construction", e))?;
    let enroll_set: BTreeMap<String, Vec<Waveform>> = corpus
        .iter()
        .take(enrolled_speakers)
        .map(|(id, utts)| (id.clone(), utts[..enroll_utterances].to_vec()))
        .collect();
    let task = setting.task();
    let mut db =
        enroll(&enroll_set, &embedder, task).map_err(|e| HarnessError::stage("enrollment", e))?;
    if task != TaskKind::Csi {
        db.threshold = Some(match threshold {
            Some(t) => t,
            None => tune_from_corpus(enrolled_speakers, enroll_utterances, &corpus, &db, &embedder)
                .map_err(|e| HarnessError::stage("threshold tuning", e))?,
        });
    }
    Ok(PreparedStack { corpus, embedder, db })
}

/// A threshold estimate the attacker could really have made: anchored on the
/// source voice when the system rejects it. When the system accepts the
/// source, the search needs some other rejected voice; any stranger's speech
/// works, so the attacker synthesizes a handful of fresh voices at the
/// source's level, checks each once, and anchors on the rejected one the
/// system liked most. Returns the estimate and the queries it cost, failed
/// probes included.
fn attacker_threshold(
    x: &Waveform,
    db: &SpeakerDatabase,
    embedder: &Embedder,
    seed: u64,
) -> Result<(f64, u64), HarnessError> {
    let search = ThresholdSearchConfig::default();
    let mut spent = 0u64;
    let mut oracle = CountingOracle::new(db, embedder);
    match estimate_threshold(x, &mut oracle, &search, derive_seed(seed, &[0x7468])) {
        Ok(est) => return Ok((est.theta_hat, est.queries_used)),
        Err(AttackError::ProbeAlreadyAccepted) => spent += 1,
        Err(e) => return Err(e.into()),
    }
    let duration_s = x.len() as f64 / SAMPLE_RATE as f64;
    let level = x.peak().max(1e-6);
    let mut best: Option<(f64, Waveform)> = None;
    let mut oracle = CountingOracle::new(db, embedder);
    for k in 0..8u64 {
        let stranger = SynthSpeakerSpec::from_seed(derive_seed(seed, &[0x6e70, k]));
        let raw = stranger.utterance(duration_s, derive_seed(seed, &[0x6e71, k]));
        let scale = level / raw.peak().max(1e-12);
        let probe =
            Waveform::new(raw.samples.iter().map(|v| v * scale).collect::<Vec<f64>>());
        let (scores, decision) = oracle.evaluate(&probe)?;
        spent += 1;
        if decision == Decision::Imposter {
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if best.as_ref().map_or(true, |(b, _)| top > *b) {
                best = Some((top, probe));
            }
        }
    }
    let Some((_, probe)) = best else {
        return Err(AttackError::ThresholdUnavailable("every probe was accepted").into());
    };
    let mut oracle = CountingOracle::new(db, embedder);
    let est = estimate_threshold(&probe, &mut oracle, &search, derive_seed(seed, &[0x7468]))?;
    Ok((est.theta_hat, est.queries_used + spent))
}

fn run_attack(
    cfg: &ExperimentConfig,
    x: &Waveform,
    setting: &AttackSetting,
    db: &SpeakerDatabase,
    embedder: &Embedder,
    seed: u64,
) -> Result<AttackOutcome, HarnessError> {
    let model = WhiteBoxModel::new(db, embedder);
    Ok(match cfg.attack.optimizer {
        OptimizerKind::Fgsm => fgsm(x, cfg.loss, setting, &model, &cfg.attack)?,
        OptimizerKind::Pgd => pgd(x, cfg.loss, setting, &model, &cfg.attack, seed)?,
        OptimizerKind::Cw2 => cw2(x, cfg.loss, setting, &model, &cfg.attack)?,
        OptimizerKind::Nes => {
            let mut oracle = CountingOracle::new(db, embedder);
            if cfg.loss.needs_threshold() {
                let (theta, theta_queries) = attacker_threshold(x, db, embedder, seed)?;
                fakebob_with(
                    x,
                    cfg.loss,
                    setting,
                    &mut oracle,
                    &cfg.attack,
                    seed,
                    Some(theta),
                    theta_queries,
                    GradientSource::Nes,
                )?
            } else {
                fakebob(x, cfg.loss, setting, &mut oracle, &cfg.attack, seed)?
            }
        }
    })
}

struct VoiceResults {
    records: Vec<VoiceRecord>,
    trials: Vec<AttackTrial>,
    clean_trials: Vec<(Decision, Decision)>,
    adversarials: Vec<Waveform>,
}

/// Resolves each source voice's target, runs the supplied attack, and
/// gathers records. The closure sees the voice, its resolved setting, and a
/// voice-specific seed.
fn attack_voices(
    stack: &PreparedStack,
    shape: &RunShape,
    attack_fn: &mut dyn FnMut(
        &Waveform,
        &AttackSetting,
        u64,
    ) -> Result<AttackOutcome, HarnessError>,
) -> Result<VoiceResults, HarnessError> {
    let sources = collect_sources(shape, &stack.corpus);
    if sources.is_empty() {
        return Err(HarnessError::BadConfig("no voices to attack under this setting"));
    }
    let db = &stack.db;
    let embedder = &stack.embedder;
    let num_speakers = db.num_speakers();
    let mut results = VoiceResults {
        records: Vec::with_capacity(sources.len()),
        trials: Vec::with_capacity(sources.len()),
        clean_trials: Vec::with_capacity(sources.len()),
        adversarials: Vec::with_capacity(sources.len()),
    };
    for (idx, sv) in sources.iter().enumerate() {
        let clean_scores = score(&sv.waveform, db, embedder)?;
        let clean_decision = decide(&clean_scores, db)?;
        let target = match target_kind(shape.setting) {
            TargetKind::EnrolledChoice => {
                let policy = shape.target_policy.expect("validated");
                let mut rng = seeded_rng(derive_seed(shape.master_seed, &[0x7a72, idx as u64]));
                AttackTarget::Enrolled(
                    select_target(policy, sv.source, &clean_scores, &mut rng)
                        .map_err(|e| HarnessError::stage("target selection", e))?,
                )
            }
            TargetKind::ForcedFirst => AttackTarget::Enrolled(0),
            TargetKind::Imposter => AttackTarget::Imposter,
            TargetKind::Untargeted => AttackTarget::Untargeted,
        };
        let setting = AttackSetting::new(shape.setting, sv.source, target, num_speakers)?;
        let seed = derive_seed(shape.master_seed, &[0xa77c, idx as u64]);
        let outcome = attack_fn(&sv.waveform, &setting, seed)
            .map_err(|e| HarnessError::stage("attack", e))?;
        let stealth = stealth_metrics(&sv.waveform, &outcome.adversarial)?;
        results.records.push(VoiceRecord {
            voice_id: sv.voice_id.clone(),
            speaker: sv.speaker.clone(),
            setting: shape.setting.name(),
            loss: shape.loss.name(),
            optimizer: shape.optimizer_name,
            source: sv.source,
            target,
            clean_decision,
            final_decision: outcome.final_decision,
            success: outcome.success,
            untargeted_success: untargeted_success(&setting, outcome.final_decision),
            iterations_used: outcome.iterations_used,
            queries_used: outcome.queries_used,
            final_loss: outcome.final_loss,
            l2: stealth.l2,
            linf: stealth.linf,
            snr_db: stealth.snr_db.is_finite().then_some(stealth.snr_db),
        });
        results.trials.push(AttackTrial { setting, final_decision: outcome.final_decision });
        let truth = match sv.source {
            SourceSpeaker::Enrolled(s) => Decision::Speaker(s),
            SourceSpeaker::Unenrolled => Decision::Imposter,
        };
        results.clean_trials.push((truth, clean_decision));
        results.adversarials.push(outcome.adversarial);
    }
    Ok(results)
}

/// Writes `records.jsonl`, `summary.csv`, and the adversarial waveforms
/// under `out_dir`, returning the aggregate row.
fn write_reports(
    out_dir: &Path,
    experiment_id: &str,
    model: &EmbedderSpec,
    shape: &RunShape,
    results: &VoiceResults,
) -> Result<ExperimentSummary, HarnessError> {
    let adv_dir = out_dir.join("adversarial");
    fs::create_dir_all(&adv_dir)?;
    for (record, wave) in results.records.iter().zip(results.adversarials.iter()) {
        store_wav(&adv_dir.join(format!("{}.wav", record.voice_id)), wave)?;
    }

    let mut jsonl = String::new();
    for r in &results.records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join("records.jsonl"), jsonl)?;

    let records = &results.records;
    let n = records.len();
    let mean =
        |f: &dyn Fn(&VoiceRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    let finite_snrs: Vec<f64> = records.iter().filter_map(|r| r.snr_db).collect();
    let summary = ExperimentSummary {
        experiment_id: experiment_id.to_string(),
        model_id: model_id(model),
        setting: shape.setting.name(),
        loss: shape.loss.name(),
        optimizer: shape.optimizer_name,
        voices: n,
        clean: compute_rates(&results.clean_trials)?,
        attack: compute_asr(&results.trials)?,
        mean_l2: mean(&|r| r.l2),
        mean_linf: mean(&|r| r.linf),
        mean_snr_db: (!finite_snrs.is_empty())
            .then(|| finite_snrs.iter().sum::<f64>() / finite_snrs.len() as f64),
        mean_queries: mean(&|r| r.queries_used as f64),
    };
    let mut csv = String::from(SUMMARY_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&summary.csv_row());
    csv.push('\n');
    fs::write(out_dir.join("summary.csv"), csv)?;
    Ok(summary)
}

fn log_wall_time(experiment_id: &str, voices: usize, started: Instant) {
    let mut stderr = std::io::stderr().lock();
    let _ = writeln!(
        stderr,
        "[{}] {} voices in {:.1} s",
        experiment_id,
        voices,
        started.elapsed().as_secs_f64()
    );
}

/// Runs the configured attack over every source voice and writes
/// `records.jsonl`, `summary.csv`, and the adversarial waveforms under
/// `out_dir`. Byte-identical across reruns of the same config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentSummary, HarnessError> {
    let started = Instant::now();
    cfg.validate()?;
    let stack = prepare_stack(
        &cfg.corpus,
        &cfg.model,
        cfg.setting,
        cfg.enrolled_speakers,
        cfg.enroll_utterances,
        cfg.threshold,
        cfg.master_seed,
    )?;
    let shape = RunShape {
        setting: cfg.setting,
        target_policy: cfg.target_policy,
        loss: cfg.loss,
        optimizer_name: cfg.attack.optimizer.name(),
        enrolled_speakers: cfg.enrolled_speakers,
        enroll_utterances: cfg.enroll_utterances,
        max_voices: cfg.max_voices,
        master_seed: cfg.master_seed,
    };
    let results = attack_voices(&stack, &shape, &mut |x, setting, seed| {
        run_attack(cfg, x, setting, &stack.db, &stack.embedder, seed)
    })?;
    let summary = write_reports(out_dir, &cfg.experiment_id, &cfg.model, &shape, &results)?;
    log_wall_time(&cfg.experiment_id, summary.voices, started);
    Ok(summary)
}

/// Runs the expectation-over-transforms attack over every source voice,
/// writes the usual reports (the summary judges the direct, no-playback
/// decision), then replays every adversarial voice through the held-out
/// room at each evaluation SNR and writes those rows to `ota_eval.csv`.
pub fn run_robust_experiment(
    cfg: &RobustExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentSummary, Vec<OtaCell>), HarnessError> {
    let started = Instant::now();
    cfg.validate()?;
    let stack = prepare_stack(
        &cfg.corpus,
        &cfg.model,
        cfg.setting,
        cfg.enrolled_speakers,
        cfg.enroll_utterances,
        cfg.threshold,
        cfg.master_seed,
    )?;
    let mut pool = Vec::with_capacity(cfg.training_rooms.len());
    for room in &cfg.training_rooms {
        pool.push(simulate_rir(room).map_err(|e| HarnessError::stage("room simulation", e))?);
    }
    let transforms = TransformSet {
        kind: cfg.kind,
        rir_pool: pool,
        snr_lo: cfg.snr_lo,
        snr_hi: cfg.snr_hi,
        snr_reference: SnrReference::Reverbed,
    };
    let shape = RunShape {
        setting: cfg.setting,
        target_policy: cfg.target_policy,
        loss: cfg.loss,
        optimizer_name: "robust",
        enrolled_speakers: cfg.enrolled_speakers,
        enroll_utterances: cfg.enroll_utterances,
        max_voices: cfg.max_voices,
        master_seed: cfg.master_seed,
    };
    let results = attack_voices(&stack, &shape, &mut |x, setting, seed| {
        let model = WhiteBoxModel::new(&stack.db, &stack.embedder);
        Ok(robust_attack(x, cfg.loss, setting, &model, &transforms, &cfg.robust, seed)?)
    })?;
    let summary = write_reports(out_dir, &cfg.experiment_id, &cfg.model, &shape, &results)?;

    let eval_rir =
        simulate_rir(&cfg.eval_room).map_err(|e| HarnessError::stage("room simulation", e))?;
    let voices: Vec<(AttackSetting, &Waveform)> = results
        .trials
        .iter()
        .zip(results.adversarials.iter())
        .map(|(t, w)| (t.setting, w))
        .collect();
    let cells = ota_sweep(
        &voices,
        &[("heldout".to_string(), vec![eval_rir])],
        &[TransformKind::NoiseAndRir],
        &cfg.eval_snrs,
        &stack.db,
        &stack.embedder,
        derive_seed(cfg.master_seed, &[0x6f74]),
    )?;
    write_ota_csv(&out_dir.join("ota_eval.csv"), &cells)?;
    log_wall_time(&cfg.experiment_id, summary.voices, started);
    Ok((summary, cells))
}

/// One cell of a playback sweep: the attacked voices replayed under one
/// choice of room pool, transform kind, and SNR.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OtaCell {
    pub pool: String,
    pub kind: TransformKind,
    pub snr_db: f64,
    pub asr_t: Option<f64>,
    pub asr_u: f64,
}

fn kind_name(kind: TransformKind) -> &'static str {
    match kind {
        TransformKind::NoiseOnly => "noise_only",
        TransformKind::RirOnly => "rir_only",
        TransformKind::NoiseAndRir => "noise_and_rir",
    }
}

pub fn write_ota_csv(path: &Path, cells: &[OtaCell]) -> Result<(), HarnessError> {
    let mut out = String::from("pool,kind,snr_db,asr_t,asr_u\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.pool,
            kind_name(c.kind),
            fmt_f64(c.snr_db),
            fmt_opt(c.asr_t),
            fmt_f64(c.asr_u),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Replays already-crafted adversarial voices through every combination of
/// room pool, transform kind, and SNR, and scores each cell. The room draw
/// for a voice depends only on the pool and the noise realization only on
/// the voice, so cells differ purely through the transform under test:
/// rows of a noise-free kind repeat across SNRs, rows of a room-free kind
/// repeat across pools, and an SNR sweep rescales one fixed noise shape.
pub fn ota_sweep(
    voices: &[(AttackSetting, &Waveform)],
    pools: &[(String, Vec<ImpulseResponse>)],
    kinds: &[TransformKind],
    snrs: &[f64],
    db: &SpeakerDatabase,
    embedder: &Embedder,
    seed: u64,
) -> Result<Vec<OtaCell>, HarnessError> {
    if voices.is_empty() {
        return Err(HarnessError::EmptyTrials);
    }
    if pools.is_empty() || kinds.is_empty() || snrs.is_empty() {
        return Err(HarnessError::BadConfig("the sweep needs at least one pool, kind, and SNR"));
    }
    if pools.iter().any(|(_, rooms)| rooms.is_empty()) {
        return Err(HarnessError::BadConfig("every pool needs at least one room"));
    }
    let identity = ImpulseResponse::identity();
    let mut cells = Vec::with_capacity(pools.len() * kinds.len() * snrs.len());
    for (pool_idx, (pool_name, pool)) in pools.iter().enumerate() {
        for &kind in kinds {
            let uses_rir = matches!(kind, TransformKind::RirOnly | TransformKind::NoiseAndRir);
            let uses_noise =
                matches!(kind, TransformKind::NoiseOnly | TransformKind::NoiseAndRir);
            for &snr in snrs {
                let mut trials = Vec::with_capacity(voices.len());
                for (v, (setting, adv)) in voices.iter().enumerate() {
                    let rir = if uses_rir {
                        let mut rng = seeded_rng(derive_seed(
                            seed,
                            &[0x7269, pool_idx as u64, v as u64],
                        ));
                        &pool[rng.gen_range(0..pool.len())]
                    } else {
                        &identity
                    };
                    let snr_eff = if uses_noise { snr } else { f64::INFINITY };
                    let noise_seed = derive_seed(seed, &[0x6e73, v as u64]);
                    let received = transmit(adv, rir, snr_eff, noise_seed)?;
                    let scores = score(&received, db, embedder)?;
                    let decision = decide(&scores, db)?;
                    trials.push(AttackTrial { setting: *setting, final_decision: decision });
                }
                let asr = compute_asr(&trials)?;
                cells.push(OtaCell {
                    pool: pool_name.clone(),
                    kind,
                    snr_db: snr,
                    asr_t: asr.asr_t,
                    asr_u: asr.asr_u,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs the configured attack, then sweeps the results through every
/// (pool, kind, SNR) combination, writing `ota_sweep.csv` next to the usual
/// attack reports.
pub fn run_ota_eval(
    cfg: &OtaEvalConfig,
    out_dir: &Path,
) -> Result<(ExperimentSummary, Vec<OtaCell>), HarnessError> {
    let started = Instant::now();
    cfg.validate()?;
    let exp = &cfg.experiment;
    let stack = prepare_stack(
        &exp.corpus,
        &exp.model,
        exp.setting,
        exp.enrolled_speakers,
        exp.enroll_utterances,
        exp.threshold,
        exp.master_seed,
    )?;
    let shape = RunShape {
        setting: exp.setting,
        target_policy: exp.target_policy,
        loss: exp.loss,
        optimizer_name: exp.attack.optimizer.name(),
        enrolled_speakers: exp.enrolled_speakers,
        enroll_utterances: exp.enroll_utterances,
        max_voices: exp.max_voices,
        master_seed: exp.master_seed,
    };
    let results = attack_voices(&stack, &shape, &mut |x, setting, seed| {
        run_attack(exp, x, setting, &stack.db, &stack.embedder, seed)
    })?;
    let summary = write_reports(out_dir, &exp.experiment_id, &exp.model, &shape, &results)?;

    let mut pools = Vec::with_capacity(cfg.pools.len());
    for p in &cfg.pools {
        let mut rirs = Vec::with_capacity(p.rooms.len());
        for room in &p.rooms {
            rirs.push(simulate_rir(room).map_err(|e| HarnessError::stage("room simulation", e))?);
        }
        pools.push((p.name.clone(), rirs));
    }
    let voices: Vec<(AttackSetting, &Waveform)> = results
        .trials
        .iter()
        .zip(results.adversarials.iter())
        .map(|(t, w)| (t.setting, w))
        .collect();
    let cells = ota_sweep(
        &voices,
        &pools,
        &cfg.kinds,
        &cfg.snrs,
        &stack.db,
        &stack.embedder,
        derive_seed(exp.master_seed, &[0x6f74]),
    )?;
    write_ota_csv(&out_dir.join("ota_sweep.csv"), &cells)?;
    log_wall_time(&exp.experiment_id, summary.voices, started);
    Ok((summary, cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srs::FeatureConfig;
    use tempfile::tempdir;

    fn spk(i: usize) -> Decision {
        Decision::Speaker(i)
    }

    #[test]
    fn rates_match_their_definitions_on_hand_built_trials() {
        let trials = vec![
            (Decision::Imposter, spk(0)),
            (Decision::Imposter, spk(1)),
            (spk(0), spk(0)),
            (spk(1), Decision::Imposter),
            (spk(2), spk(1)),
        ];
        let r = compute_rates(&trials).unwrap();
        assert!((r.acc - 20.0).abs() < 1e-12);
        assert_eq!(r.far, Some(100.0));
        let frr = r.frr.unwrap();
        let ier = r.ier.unwrap();
        assert!((frr - 100.0 / 3.0).abs() < 1e-12);
        assert!((ier - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rates_report_missing_groups_as_absent() {
        let enrolled_only = vec![(spk(0), spk(0)), (spk(1), spk(0))];
        let r = compute_rates(&enrolled_only).unwrap();
        assert_eq!(r.far, None);
        assert!(r.frr.is_some() && r.ier.is_some());

        let imposter_only = vec![(Decision::Imposter, Decision::Imposter)];
        let r = compute_rates(&imposter_only).unwrap();
        assert_eq!(r.frr, None);
        assert_eq!(r.ier, None);
        assert_eq!(r.far, Some(0.0));

        assert!(matches!(compute_rates(&[]), Err(HarnessError::EmptyTrials)));
    }

    #[test]
    fn enrolled_outcomes_partition_into_correct_rejected_misidentified() {
        let mut rng = seeded_rng(5);
        let trials: Vec<(Decision, Decision)> = (0..200)
            .map(|_| {
                let truth = spk(rng.gen_range(0..4));
                let decided = if rng.gen_bool(0.3) {
                    Decision::Imposter
                } else {
                    spk(rng.gen_range(0..4))
                };
                (truth, decided)
            })
            .collect();
        let r = compute_rates(&trials).unwrap();
        let correct = trials.iter().filter(|(t, d)| t == d).count();
        let share = pct(correct, trials.len());
        assert!((r.frr.unwrap() + r.ier.unwrap() + share - 100.0).abs() < 1e-9);
    }

    #[test]
    fn asr_counts_exact_target_and_misbehavior() {
        let setting = AttackSetting::new(
            SettingId::C6,
            SourceSpeaker::Enrolled(0),
            AttackTarget::Enrolled(2),
            4,
        )
        .unwrap();
        let decisions = [spk(2), spk(0), spk(1)];
        let trials: Vec<AttackTrial> = decisions
            .iter()
            .map(|&d| AttackTrial { setting, final_decision: d })
            .collect();
        let r = compute_asr(&trials).unwrap();
        let asr_t = r.asr_t.unwrap();
        assert!((asr_t - 100.0 / 3.0).abs() < 1e-12);
        assert!((r.asr_u - 200.0 / 3.0).abs() < 1e-12);
        assert!(r.asr_u >= asr_t);
        assert_eq!(r.rejected_pct, None);
    }

    #[test]
    fn open_set_untargeted_reports_the_misbehavior_split() {
        let setting = AttackSetting::new(
            SettingId::C4,
            SourceSpeaker::Enrolled(1),
            AttackTarget::Untargeted,
            3,
        )
        .unwrap();
        let decisions = [Decision::Imposter, spk(0), spk(1)];
        let trials: Vec<AttackTrial> = decisions
            .iter()
            .map(|&d| AttackTrial { setting, final_decision: d })
            .collect();
        let r = compute_asr(&trials).unwrap();
        assert_eq!(r.asr_t, None);
        assert!((r.asr_u - 200.0 / 3.0).abs() < 1e-12);
        let rej = r.rejected_pct.unwrap();
        let mis = r.misidentified_pct.unwrap();
        assert!((rej + mis - r.asr_u).abs() < 1e-12);
    }

    #[test]
    fn asr_rejects_empty_and_mixed_trials() {
        assert!(matches!(compute_asr(&[]), Err(HarnessError::EmptyTrials)));
        let a = AttackSetting::new(
            SettingId::C6,
            SourceSpeaker::Enrolled(0),
            AttackTarget::Enrolled(1),
            3,
        )
        .unwrap();
        let b = AttackSetting::new(
            SettingId::C8,
            SourceSpeaker::Enrolled(0),
            AttackTarget::Untargeted,
            3,
        )
        .unwrap();
        let trials = vec![
            AttackTrial { setting: a, final_decision: spk(1) },
            AttackTrial { setting: b, final_decision: spk(1) },
        ];
        assert!(matches!(compute_asr(&trials), Err(HarnessError::MixedSettings)));
    }

    #[test]
    fn stealth_metrics_handle_zero_and_doubling() {
        let x = Waveform::new(vec![0.1, -0.2, 0.3]);
        let same = stealth_metrics(&x, &x).unwrap();
        assert_eq!(same.l2, 0.0);
        assert_eq!(same.linf, 0.0);
        assert!(same.snr_db.is_infinite() && same.snr_db > 0.0);

        let doubled = Waveform::new(x.samples.iter().map(|v| 2.0 * v).collect::<Vec<f64>>());
        let r = stealth_metrics(&x, &doubled).unwrap();
        assert!(r.snr_db.abs() < 1e-12, "doubling means the perturbation is the signal");
        let expect_l2 = x.samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r.l2 - expect_l2).abs() < 1e-12);

        let short = Waveform::new(vec![0.1]);
        assert!(matches!(
            stealth_metrics(&x, &short),
            Err(HarnessError::LengthMismatch(3, 1))
        ));
    }

    #[test]
    fn target_selection_follows_the_policy() {
        let mut rng = seeded_rng(1);
        let scores = [0.9, 0.2, 0.5];
        let least = select_target(
            TargetPolicy::LeastLikely,
            SourceSpeaker::Enrolled(1),
            &scores,
            &mut rng,
        )
        .unwrap();
        assert_eq!(least, 2, "the source's own minimum is excluded");

        let global = select_target(
            TargetPolicy::LeastLikely,
            SourceSpeaker::Unenrolled,
            &scores,
            &mut rng,
        )
        .unwrap();
        assert_eq!(global, 1);

        for seed in 0..5 {
            let mut rng = seeded_rng(seed);
            let t = select_target(
                TargetPolicy::Random,
                SourceSpeaker::Enrolled(1),
                &[0.3, 0.4],
                &mut rng,
            )
            .unwrap();
            assert_eq!(t, 0, "one candidate leaves no choice");
        }
        for _ in 0..50 {
            let t = select_target(
                TargetPolicy::Random,
                SourceSpeaker::Enrolled(0),
                &scores,
                &mut rng,
            )
            .unwrap();
            assert_ne!(t, 0);
        }

        assert_eq!(
            select_target(TargetPolicy::Fixed(2), SourceSpeaker::Enrolled(1), &scores, &mut rng)
                .unwrap(),
            2
        );
        assert!(matches!(
            select_target(TargetPolicy::Fixed(1), SourceSpeaker::Enrolled(1), &scores, &mut rng),
            Err(HarnessError::FixedTargetIsSource(1))
        ));
        assert!(matches!(
            select_target(TargetPolicy::Fixed(9), SourceSpeaker::Enrolled(1), &scores, &mut rng),
            Err(HarnessError::TargetOutOfRange { index: 9, num_speakers: 3 })
        ));
    }

    fn tiny_spec(weight_seed: u64, activation: Activation) -> EmbedderSpec {
        EmbedderSpec {
            weight_seed,
            embed_dim: 16,
            activation,
            features: FeatureConfig { frame_len: 128, hop: 64, num_filters: 10, log_floor: 1e-8 },
        }
    }

    #[test]
    fn gradient_size_is_the_mean_over_voices() {
        let corpus = generate_corpus(3, 2, 0.12, 7);
        let embedder = Embedder::new(tiny_spec(3, Activation::Tanh)).unwrap();
        let db = enroll(&corpus, &embedder, TaskKind::Csi).unwrap();
        let model = WhiteBoxModel::new(&db, &embedder);
        let voices: Vec<(AttackSetting, &Waveform)> = corpus
            .values()
            .enumerate()
            .map(|(s, utts)| {
                let setting = AttackSetting::new(
                    SettingId::C8,
                    SourceSpeaker::Enrolled(s),
                    AttackTarget::Untargeted,
                    3,
                )
                .unwrap();
                (setting, &utts[1])
            })
            .collect();
        let joint = input_gradient_size(&voices, LossId::SourceMargin, &model).unwrap();
        let mut sum = 0.0;
        for v in &voices {
            sum += input_gradient_size(std::slice::from_ref(v), LossId::SourceMargin, &model).unwrap();
        }
        assert!(joint > 0.0);
        assert!((joint - sum / voices.len() as f64).abs() < 1e-12);
        assert!(matches!(
            input_gradient_size(&[], LossId::SourceMargin, &model),
            Err(HarnessError::EmptyTrials)
        ));
    }

    #[test]
    fn transfer_matrix_is_square_named_and_deterministic() {
        let corpus = generate_corpus(3, 3, 0.12, 11);
        let specs =
            vec![tiny_spec(3, Activation::Tanh), tiny_spec(9, Activation::Softplus)];
        let cfg = TransferConfig { iterations: 2, enroll_utterances: 2, ..Default::default() };
        let a = transfer_matrix(&specs, &corpus, &cfg).unwrap();
        assert_eq!(a.model_ids, vec!["dim16_seed3_tanh", "dim16_seed9_softplus"]);
        assert_eq!(a.accuracy_drop.len(), 2);
        assert!(a.accuracy_drop.iter().all(|row| row.len() == 2));
        for j in 0..2 {
            assert!((0.0..=100.0).contains(&a.clean_accuracy[j]));
            assert!(a.gradient_size[j] > 0.0);
            assert!((a.transfer_bound[j] - cfg.epsilon * a.gradient_size[j]).abs() < 1e-12);
        }
        let b = transfer_matrix(&specs, &corpus, &cfg).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            transfer_matrix(&specs[..1], &corpus, &cfg),
            Err(HarnessError::BadConfig(_))
        ));
    }

    fn tiny_experiment(out_tag: &str) -> ExperimentConfig {
        ExperimentConfig {
            experiment_id: out_tag.to_string(),
            corpus: CorpusConfig { num_speakers: 3, utterances_per_speaker: 3, duration_s: 0.12 },
            model: tiny_spec(3, Activation::Tanh),
            setting: SettingId::C6,
            target_policy: Some(TargetPolicy::Random),
            loss: LossId::Margin,
            attack: AttackConfig { iterations: 2, ..AttackConfig::default() },
            enrolled_speakers: 3,
            enroll_utterances: 1,
            threshold: None,
            max_voices: Some(4),
            master_seed: 42,
        }
    }

    #[test]
    fn experiment_reports_are_deterministic_and_self_consistent() {
        let cfg = tiny_experiment("det");
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let summary = run_experiment(&cfg, dir_a.path()).unwrap();
        run_experiment(&cfg, dir_b.path()).unwrap();

        let records_a = fs::read(dir_a.path().join("records.jsonl")).unwrap();
        let records_b = fs::read(dir_b.path().join("records.jsonl")).unwrap();
        assert_eq!(records_a, records_b);
        let csv_a = fs::read(dir_a.path().join("summary.csv")).unwrap();
        let csv_b = fs::read(dir_b.path().join("summary.csv")).unwrap();
        assert_eq!(csv_a, csv_b);

        let text = String::from_utf8(records_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), summary.voices);
        assert_eq!(summary.voices, 4);
        let mut untargeted = 0usize;
        for line in &lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["setting"], "C6");
            let wav = dir_a
                .path()
                .join("adversarial")
                .join(format!("{}.wav", v["voice_id"].as_str().unwrap()));
            assert!(wav.exists());
            let wav_a = fs::read(&wav).unwrap();
            let wav_b = fs::read(
                dir_b
                    .path()
                    .join("adversarial")
                    .join(format!("{}.wav", v["voice_id"].as_str().unwrap())),
            )
            .unwrap();
            assert_eq!(wav_a, wav_b);
            if v["untargeted_success"].as_bool().unwrap() {
                untargeted += 1;
            }
        }
        let recomputed = pct(untargeted, lines.len());
        assert!((recomputed - summary.attack.asr_u).abs() < 1e-9);

        let csv_text = String::from_utf8(csv_a).unwrap();
        let mut csv_lines = csv_text.lines();
        assert_eq!(csv_lines.next(), Some(SUMMARY_CSV_HEADER));
        let row = csv_lines.next().unwrap();
        assert!(row.starts_with("det,dim16_seed3_tanh,C6,M,pgd,4,"));
        assert!(row.ends_with(','), "the perceptual-score column stays reserved");
    }

    #[test]
    fn experiment_validation_rejects_inconsistent_configs() {
        let base = tiny_experiment("bad");

        let sv = ExperimentConfig {
            setting: SettingId::C9,
            target_policy: None,
            enrolled_speakers: 2,
            ..base.clone()
        };
        assert!(matches!(sv.validate(), Err(HarnessError::BadConfig(_))));

        let no_policy = ExperimentConfig { target_policy: None, ..base.clone() };
        assert!(matches!(no_policy.validate(), Err(HarnessError::BadConfig(_))));

        let policy_on_untargeted = ExperimentConfig {
            setting: SettingId::C8,
            target_policy: Some(TargetPolicy::Random),
            ..base.clone()
        };
        assert!(matches!(policy_on_untargeted.validate(), Err(HarnessError::BadConfig(_))));

        let no_eval = ExperimentConfig { enroll_utterances: 3, ..base.clone() };
        assert!(matches!(no_eval.validate(), Err(HarnessError::BadConfig(_))));

        let no_imposters = ExperimentConfig {
            setting: SettingId::C1,
            target_policy: Some(TargetPolicy::Random),
            threshold: None,
            ..base
        };
        assert!(matches!(no_imposters.validate(), Err(HarnessError::BadConfig(_))));
    }

    /// The query-based attack path must cope with a source the system
    /// already accepts: its threshold search anchors on junk probes instead.
    #[test]
    fn query_attack_estimates_a_threshold_from_noise_when_the_source_is_accepted() {
        let corpus: BTreeMap<String, Vec<Waveform>> = generate_corpus(5, 3, 0.2, 2024)
            .into_iter()
            .map(|(id, utts)| {
                let quiet = utts
                    .into_iter()
                    .map(|w| {
                        Waveform::new(
                            w.samples.iter().map(|v| v * 0.006).collect::<Vec<f64>>(),
                        )
                    })
                    .collect();
                (id, quiet)
            })
            .collect();
        let embedder = Embedder::new(EmbedderSpec::default()).unwrap();
        let enroll_set: BTreeMap<String, Vec<Waveform>> = corpus
            .iter()
            .take(3)
            .map(|(id, utts)| (id.clone(), vec![utts[0].clone()]))
            .collect();
        let mut db = enroll(&enroll_set, &embedder, TaskKind::Osi).unwrap();
        let mut genuine = Vec::new();
        let mut imposter = Vec::new();
        for (id, utts) in corpus.iter() {
            let enrolled = db.speaker_index(id);
            for x in &utts[1..] {
                let s = score(x, &db, &embedder).unwrap();
                let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                match enrolled {
                    Some(_) => genuine.push(top),
                    None => imposter.push(top),
                }
            }
        }
        let (theta, _) = tune_threshold_eer(&genuine, &imposter).unwrap();
        db.threshold = Some(theta);

        // A voice of enrolled speaker 0 that the system accepts as speaker 0.
        let x = corpus.values().next().unwrap()[1].clone();
        let s = score(&x, &db, &embedder).unwrap();
        assert_eq!(decide(&s, &db).unwrap(), Decision::Speaker(0), "fixture assumption");

        let (theta_hat, queries) = attacker_threshold(&x, &db, &embedder, 99).unwrap();
        assert!(queries > 0);
        assert!(theta_hat.is_finite());
        assert!(
            (theta_hat - theta).abs() < 0.05,
            "estimate {theta_hat} strayed far from {theta}"
        );
    }

    fn shoebox(source: [f64; 3], mic: [f64; 3]) -> RoomSpec {
        RoomSpec {
            dimensions: [4.0, 3.0, 2.5],
            source,
            mic,
            absorption: 0.5,
            max_order: 1,
        }
    }

    #[test]
    fn playback_sweep_covers_the_grid_and_repeats_where_transforms_are_ignored() {
        let corpus = generate_corpus(3, 2, 0.12, 7);
        let embedder = Embedder::new(tiny_spec(3, Activation::Tanh)).unwrap();
        let db = enroll(&corpus, &embedder, TaskKind::Csi).unwrap();
        let voices: Vec<(AttackSetting, &Waveform)> = corpus
            .values()
            .enumerate()
            .map(|(s, utts)| {
                let setting = AttackSetting::new(
                    SettingId::C8,
                    SourceSpeaker::Enrolled(s),
                    AttackTarget::Untargeted,
                    3,
                )
                .unwrap();
                (setting, &utts[1])
            })
            .collect();
        let pools = vec![
            ("near".to_string(), vec![simulate_rir(&shoebox([1.0, 1.0, 1.0], [1.5, 1.2, 1.1])).unwrap()]),
            (
                "far".to_string(),
                vec![
                    simulate_rir(&shoebox([0.8, 0.9, 1.0], [3.2, 2.1, 1.6])).unwrap(),
                    simulate_rir(&shoebox([1.2, 1.5, 0.9], [2.9, 0.7, 1.9])).unwrap(),
                ],
            ),
        ];
        let kinds =
            [TransformKind::NoiseOnly, TransformKind::RirOnly, TransformKind::NoiseAndRir];
        let snrs = [30.0, 10.0];

        let cells = ota_sweep(&voices, &pools, &kinds, &snrs, &db, &embedder, 5).unwrap();
        assert_eq!(cells.len(), pools.len() * kinds.len() * snrs.len());
        let mut it = cells.iter();
        for (pool_name, _) in &pools {
            for &kind in &kinds {
                for &snr in &snrs {
                    let cell = it.next().unwrap();
                    assert_eq!(cell.pool, *pool_name);
                    assert_eq!(cell.kind, kind);
                    assert_eq!(cell.snr_db, snr);
                }
            }
        }

        // A kind that never adds noise cannot react to the SNR column, and a
        // kind that never convolves cannot react to the pool.
        let find = |pool: &str, kind: TransformKind, snr: f64| {
            cells
                .iter()
                .find(|c| c.pool == pool && c.kind == kind && c.snr_db == snr)
                .unwrap()
        };
        for pool in ["near", "far"] {
            let a = find(pool, TransformKind::RirOnly, 30.0);
            let b = find(pool, TransformKind::RirOnly, 10.0);
            assert_eq!((a.asr_t, a.asr_u), (b.asr_t, b.asr_u));
        }
        for &snr in &snrs {
            let a = find("near", TransformKind::NoiseOnly, snr);
            let b = find("far", TransformKind::NoiseOnly, snr);
            assert_eq!((a.asr_t, a.asr_u), (b.asr_t, b.asr_u));
        }

        let again = ota_sweep(&voices, &pools, &kinds, &snrs, &db, &embedder, 5).unwrap();
        assert_eq!(cells, again);

        assert!(matches!(
            ota_sweep(&[], &pools, &kinds, &snrs, &db, &embedder, 5),
            Err(HarnessError::EmptyTrials)
        ));
        assert!(matches!(
            ota_sweep(&voices, &pools, &[], &snrs, &db, &embedder, 5),
            Err(HarnessError::BadConfig(_))
        ));
    }

    #[test]
    fn robust_experiment_writes_reports_and_a_held_out_sweep() {
        let cfg = RobustExperimentConfig {
            experiment_id: "robust-smoke".to_string(),
            corpus: CorpusConfig { num_speakers: 3, utterances_per_speaker: 3, duration_s: 0.12 },
            model: tiny_spec(3, Activation::Tanh),
            setting: SettingId::C8,
            target_policy: None,
            loss: LossId::SourceMargin,
            robust: RobustAttackConfig {
                epsilon: 0.002,
                alpha: 0.0005,
                iterations: 3,
                transforms_per_iter: 2,
                adam: true,
                lambda: 0.0,
            },
            kind: TransformKind::NoiseAndRir,
            training_rooms: vec![shoebox([1.0, 1.0, 1.0], [1.5, 1.2, 1.1])],
            snr_lo: 15.0,
            snr_hi: 25.0,
            eval_room: shoebox([0.8, 0.9, 1.0], [3.2, 2.1, 1.6]),
            eval_snrs: vec![20.0],
            enrolled_speakers: 3,
            enroll_utterances: 1,
            threshold: None,
            max_voices: Some(3),
            master_seed: 11,
        };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let (summary, cells) = run_robust_experiment(&cfg, dir_a.path()).unwrap();
        run_robust_experiment(&cfg, dir_b.path()).unwrap();

        assert_eq!(summary.voices, 3);
        assert_eq!(summary.optimizer, "robust");
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].pool, "heldout");
        assert_eq!(cells[0].kind, TransformKind::NoiseAndRir);
        assert_eq!(cells[0].snr_db, 20.0);
        assert!(cells[0].asr_t.is_none());

        for name in ["records.jsonl", "summary.csv", "ota_eval.csv"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b, "{name} differed between reruns");
        }
        let csv = fs::read_to_string(dir_a.path().join("summary.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains(",robust,"));
    }
}
