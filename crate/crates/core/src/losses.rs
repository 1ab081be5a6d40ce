//! Attack settings and the loss ledger.
//!
//! An attack setting pins down the task, whether the source voice belongs to
//! an enrolled speaker, and what the adversary wants the system to decide.
//! Each setting admits a small menu of losses, all written so that *lower is
//! better for the adversary*; optimizers simply descend. Several losses have
//! a sign tied exactly to the decision rule (their value is non-positive iff
//! the attack goal holds), which is what makes them usable inside the
//! margin-style optimizer; those are flagged `cw_eligible`.

use crate::srs::{argmax, Decision, Embedder, SpeakerDatabase, TaskKind};
use crate::audio::Waveform;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("setting {0:?} requires {1}")]
    InvalidSetting(SettingId, &'static str),
    #[error("target speaker index {index} out of range for {num_speakers} speakers")]
    TargetOutOfRange { index: usize, num_speakers: usize },
    #[error("source speaker index {index} out of range for {num_speakers} speakers")]
    SourceOutOfRange { index: usize, num_speakers: usize },
    #[error("source and target must differ")]
    SourceEqualsTarget,
    #[error("loss {0} needs a resolved enrolled target")]
    NeedsTarget(&'static str),
    #[error("loss {0} needs an enrolled source")]
    NeedsSource(&'static str),
    #[error("loss {0} needs a decision threshold")]
    NeedsThreshold(&'static str),
    #[error("loss {0} applies to {1} tasks only")]
    WrongTask(&'static str, &'static str),
    #[error("loss {0} needs at least two enrolled speakers")]
    NeedsCompetitor(&'static str),
    #[error("score vector is empty")]
    EmptyScores,
    #[error("verification scores must have exactly one entry, got {0}")]
    NotScalar(usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("unknown loss name {0:?}")]
    UnknownLoss(String),
    #[error("unknown setting name {0:?}")]
    UnknownSetting(String),
    #[error(transparent)]
    Srs(#[from] crate::srs::SrsError),
}

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

/// The ten source/target configurations. Naming is positional: task, then
/// whether the source speaker is enrolled, then the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SettingId {
    /// OSI, enrolled source, impersonate another enrolled speaker.
    C1,
    /// OSI, unenrolled source, impersonate an enrolled speaker.
    C2,
    /// OSI, enrolled source, get rejected as an imposter.
    C3,
    /// OSI, enrolled source, any wrong outcome.
    C4,
    /// OSI, unenrolled source, get accepted as anyone.
    C5,
    /// CSI, enrolled source, impersonate another enrolled speaker.
    C6,
    /// CSI, unenrolled source, impersonate an enrolled speaker.
    C7,
    /// CSI, enrolled source, any wrong label.
    C8,
    /// SV, the enrolled speaker, get rejected.
    C9,
    /// SV, unenrolled source, get accepted.
    C10,
}

impl SettingId {
    pub const ALL: [SettingId; 10] = [
        SettingId::C1,
        SettingId::C2,
        SettingId::C3,
        SettingId::C4,
        SettingId::C5,
        SettingId::C6,
        SettingId::C7,
        SettingId::C8,
        SettingId::C9,
        SettingId::C10,
    ];

    pub fn task(self) -> TaskKind {
        match self {
            SettingId::C1 | SettingId::C2 | SettingId::C3 | SettingId::C4 | SettingId::C5 => {
                TaskKind::Osi
            }
            SettingId::C6 | SettingId::C7 | SettingId::C8 => TaskKind::Csi,
            SettingId::C9 | SettingId::C10 => TaskKind::Sv,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SettingId::C1 => "C1",
            SettingId::C2 => "C2",
            SettingId::C3 => "C3",
            SettingId::C4 => "C4",
            SettingId::C5 => "C5",
            SettingId::C6 => "C6",
            SettingId::C7 => "C7",
            SettingId::C8 => "C8",
            SettingId::C9 => "C9",
            SettingId::C10 => "C10",
        }
    }

    /// Whether the setting's source voice comes from an enrolled speaker.
    pub fn source_enrolled(self) -> bool {
        matches!(
            self,
            SettingId::C1
                | SettingId::C3
                | SettingId::C4
                | SettingId::C6
                | SettingId::C8
                | SettingId::C9
        )
    }
}

impl std::str::FromStr for SettingId {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, LossError> {
        SettingId::ALL
            .iter()
            .copied()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::UnknownSetting(s.to_string()))
    }
}

/// Who utters the voice under attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SourceSpeaker {
    /// Index into the enrollment order.
    Enrolled(usize),
    Unenrolled,
}

/// What the adversary wants the system to decide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttackTarget {
    /// Index into the enrollment order.
    Enrolled(usize),
    Imposter,
    Untargeted,
}

/// A validated (setting, source, target) triple against a given enrollment
/// size. Construction rejects combinations the setting does not describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttackSetting {
    id: SettingId,
    source: SourceSpeaker,
    target: AttackTarget,
}

impl AttackSetting {
    pub fn new(
        id: SettingId,
        source: SourceSpeaker,
        target: AttackTarget,
        num_speakers: usize,
    ) -> Result<Self, LossError> {
        if let SourceSpeaker::Enrolled(s) = source {
            if s >= num_speakers {
                return Err(LossError::SourceOutOfRange { index: s, num_speakers });
            }
        }
        if let AttackTarget::Enrolled(t) = target {
            if t >= num_speakers {
                return Err(LossError::TargetOutOfRange { index: t, num_speakers });
            }
        }
        let source_ok = match source {
            SourceSpeaker::Enrolled(_) => id.source_enrolled(),
            SourceSpeaker::Unenrolled => !id.source_enrolled(),
        };
        if !source_ok {
            return Err(LossError::InvalidSetting(
                id,
                if id.source_enrolled() { "an enrolled source" } else { "an unenrolled source" },
            ));
        }
        let target_ok = match (id, target) {
            (SettingId::C1 | SettingId::C2 | SettingId::C6 | SettingId::C7, AttackTarget::Enrolled(_)) => true,
            (SettingId::C3 | SettingId::C9, AttackTarget::Imposter) => true,
            (SettingId::C4 | SettingId::C5 | SettingId::C8, AttackTarget::Untargeted) => true,
            (SettingId::C10, AttackTarget::Enrolled(0)) => true,
            _ => false,
        };
        if !target_ok {
            return Err(LossError::InvalidSetting(id, "a target matching its goal column"));
        }
        if let (SourceSpeaker::Enrolled(s), AttackTarget::Enrolled(t)) = (source, target) {
            if s == t {
                return Err(LossError::SourceEqualsTarget);
            }
        }
        if id.task() == TaskKind::Sv {
            match source {
                SourceSpeaker::Enrolled(s) if s != 0 => {
                    return Err(LossError::SourceOutOfRange { index: s, num_speakers: 1 })
                }
                _ => {}
            }
        }
        Ok(AttackSetting { id, source, target })
    }

    pub fn id(&self) -> SettingId {
        self.id
    }

    pub fn source(&self) -> SourceSpeaker {
        self.source
    }

    pub fn target(&self) -> AttackTarget {
        self.target
    }

    pub fn task(&self) -> TaskKind {
        self.id.task()
    }

    fn source_index(&self, loss: LossId) -> Result<usize, LossError> {
        match self.source {
            SourceSpeaker::Enrolled(s) => Ok(s),
            SourceSpeaker::Unenrolled => Err(LossError::NeedsSource(loss.name())),
        }
    }

    fn target_index(&self, loss: LossId) -> Result<usize, LossError> {
        match self.target {
            AttackTarget::Enrolled(t) => Ok(t),
            _ => Err(LossError::NeedsTarget(loss.name())),
        }
    }
}

/// True when `decision` is exactly what the setting's adversary wanted.
pub fn goal_met(setting: &AttackSetting, decision: Decision) -> bool {
    match setting.target {
        AttackTarget::Enrolled(t) => decision == Decision::Speaker(t),
        AttackTarget::Imposter => decision == Decision::Imposter,
        AttackTarget::Untargeted => untargeted_success(setting, decision),
    }
}

/// True when `decision` counts as untargeted misbehavior for the setting's
/// source: enrolled sources succeed by not being recognized as themselves;
/// unenrolled sources succeed by being accepted (OSI/SV) or merely labeled
/// (CSI, which cannot reject and therefore always mislabels an outsider).
pub fn untargeted_success(setting: &AttackSetting, decision: Decision) -> bool {
    match (setting.task(), setting.source) {
        (TaskKind::Sv, SourceSpeaker::Enrolled(_)) => decision == Decision::Imposter,
        (TaskKind::Sv, SourceSpeaker::Unenrolled) => decision == Decision::Speaker(0),
        (_, SourceSpeaker::Enrolled(s)) => decision != Decision::Speaker(s),
        (TaskKind::Osi, SourceSpeaker::Unenrolled) => decision != Decision::Imposter,
        (TaskKind::Csi, SourceSpeaker::Unenrolled) => true,
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Every loss in the ledger. Lower is always better for the adversary.
/// Config files accept either the variant name or the short label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LossId {
    /// "CE": cross entropy pulling probability mass onto the target.
    #[serde(alias = "CE")]
    CrossEntropy,
    /// "M": best competitor score minus target score.
    #[serde(alias = "M")]
    Margin,
    /// "L1": negated target score.
    #[serde(alias = "L1")]
    TargetScore,
    /// "L2": like the margin but the competitor never drops below the
    /// threshold; non-positive exactly when OSI decides the target.
    #[serde(alias = "L2")]
    ClampedMargin,
    /// "CEs": cross entropy pushed away from the source.
    #[serde(alias = "CEs")]
    SourceCrossEntropy,
    /// "L1s": the source's own score.
    #[serde(alias = "L1s")]
    SourceScore,
    /// "L3": top score minus threshold; non-positive exactly when OSI
    /// rejects.
    #[serde(alias = "L3")]
    RejectAll,
    /// "Ms": source score minus best competitor.
    #[serde(alias = "Ms")]
    SourceMargin,
    /// "L2s": clamped source margin; non-positive exactly when OSI decides
    /// some other enrolled speaker.
    #[serde(alias = "L2s")]
    SourceClampedMargin,
    /// "L4s": negated best competitor score.
    #[serde(alias = "L4s")]
    OthersScore,
    /// "L3neg": threshold minus top score; non-positive exactly when OSI
    /// accepts someone.
    #[serde(alias = "L3neg")]
    AcceptAny,
    /// "BCE": binary cross entropy toward rejection.
    #[serde(alias = "BCE")]
    BinaryCrossEntropyReject,
    /// "L3B": score minus threshold; non-positive exactly when SV rejects.
    #[serde(alias = "L3B")]
    ScoreMinusThreshold,
    /// "BCEp": binary cross entropy toward acceptance.
    #[serde(alias = "BCEp")]
    BinaryCrossEntropyAccept,
    /// "L3Bneg": threshold minus score; non-positive exactly when SV accepts.
    #[serde(alias = "L3Bneg")]
    ThresholdMinusScore,
}

impl LossId {
    pub const ALL: [LossId; 15] = [
        LossId::CrossEntropy,
        LossId::Margin,
        LossId::TargetScore,
        LossId::ClampedMargin,
        LossId::SourceCrossEntropy,
        LossId::SourceScore,
        LossId::RejectAll,
        LossId::SourceMargin,
        LossId::SourceClampedMargin,
        LossId::OthersScore,
        LossId::AcceptAny,
        LossId::BinaryCrossEntropyReject,
        LossId::ScoreMinusThreshold,
        LossId::BinaryCrossEntropyAccept,
        LossId::ThresholdMinusScore,
    ];

    /// Canonical short name used in CLI flags and report rows.
    pub fn name(self) -> &'static str {
        match self {
            LossId::CrossEntropy => "CE",
            LossId::Margin => "M",
            LossId::TargetScore => "L1",
            LossId::ClampedMargin => "L2",
            LossId::SourceCrossEntropy => "CEs",
            LossId::SourceScore => "L1s",
            LossId::RejectAll => "L3",
            LossId::SourceMargin => "Ms",
            LossId::SourceClampedMargin => "L2s",
            LossId::OthersScore => "L4s",
            LossId::AcceptAny => "L3neg",
            LossId::BinaryCrossEntropyReject => "BCE",
            LossId::ScoreMinusThreshold => "L3B",
            LossId::BinaryCrossEntropyAccept => "BCEp",
            LossId::ThresholdMinusScore => "L3Bneg",
        }
    }

    pub fn needs_threshold(self) -> bool {
        matches!(
            self,
            LossId::ClampedMargin
                | LossId::RejectAll
                | LossId::SourceClampedMargin
                | LossId::AcceptAny
                | LossId::ScoreMinusThreshold
                | LossId::ThresholdMinusScore
        )
    }

    fn sigmoid_family(self) -> bool {
        matches!(
            self,
            LossId::BinaryCrossEntropyReject
                | LossId::ScoreMinusThreshold
                | LossId::BinaryCrossEntropyAccept
                | LossId::ThresholdMinusScore
        )
    }
}

impl std::str::FromStr for LossId {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, LossError> {
        LossId::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| LossError::UnknownLoss(s.to_string()))
    }
}

/// A loss from a setting's menu, with its margin-optimizer eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSpec {
    pub loss: LossId,
    /// True when `loss <= 0` is equivalent to the setting's goal holding,
    /// which the margin-style optimizer relies on.
    pub cw_eligible: bool,
}

/// The loss menu for a setting, in preference order for reporting. The
/// spread-out untargeted OSI setting also carries the rejection-flavored
/// loss, since pushing the source below the threshold is one way to
/// misbehave.
pub fn losses_for_setting(id: SettingId) -> Vec<LossSpec> {
    use LossId::*;
    let all = |l: LossId, e: bool| LossSpec { loss: l, cw_eligible: e };
    match id {
        SettingId::C1 | SettingId::C2 => vec![
            all(CrossEntropy, false),
            all(Margin, false),
            all(TargetScore, false),
            all(ClampedMargin, true),
        ],
        SettingId::C3 => vec![
            all(SourceCrossEntropy, false),
            all(SourceScore, false),
            all(RejectAll, true),
        ],
        SettingId::C4 => vec![
            all(SourceCrossEntropy, false),
            all(SourceScore, false),
            all(SourceMargin, false),
            all(SourceClampedMargin, true),
            all(OthersScore, false),
            all(RejectAll, true),
        ],
        SettingId::C5 => vec![all(AcceptAny, true)],
        SettingId::C6 | SettingId::C7 => vec![
            all(CrossEntropy, false),
            all(Margin, true),
            all(TargetScore, false),
        ],
        SettingId::C8 => vec![
            all(SourceCrossEntropy, false),
            all(SourceMargin, true),
            all(SourceScore, false),
            all(OthersScore, false),
        ],
        SettingId::C9 => vec![
            all(BinaryCrossEntropyReject, false),
            all(ScoreMinusThreshold, true),
        ],
        SettingId::C10 => vec![
            all(BinaryCrossEntropyAccept, false),
            all(ThresholdMinusScore, true),
        ],
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Index of the best score excluding `skip`; ties to the lower index.
fn argmax_excluding(scores: &[f64], skip: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if i == skip {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if s > scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

fn check_scores(loss: LossId, scores: &[f64], task: TaskKind) -> Result<(), LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LossError::NonFinite);
    }
    if loss.sigmoid_family() {
        if task != TaskKind::Sv {
            return Err(LossError::WrongTask(loss.name(), "verification"));
        }
        if scores.len() != 1 {
            return Err(LossError::NotScalar(scores.len()));
        }
    } else if task == TaskKind::Sv {
        return Err(LossError::WrongTask(loss.name(), "identification"));
    }
    Ok(())
}

fn threshold_for(loss: LossId, theta: Option<f64>) -> Result<f64, LossError> {
    match theta {
        Some(t) => Ok(t),
        None => Err(LossError::NeedsThreshold(loss.name())),
    }
}

/// Evaluates one loss on a raw cosine score vector. `theta` is only read by
/// the threshold-aware losses; pass the system threshold, or an estimate when
/// attacking black-box.
pub fn eval_loss(
    loss: LossId,
    scores: &[f64],
    setting: &AttackSetting,
    theta: Option<f64>,
) -> Result<f64, LossError> {
    check_scores(loss, scores, setting.task())?;
    use LossId::*;
    let value = match loss {
        CrossEntropy => {
            let t = setting.target_index(loss)?;
            -softmax(scores)[t].ln()
        }
        Margin => {
            let t = setting.target_index(loss)?;
            let rival = argmax_excluding(scores, t).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            scores[rival] - scores[t]
        }
        TargetScore => {
            let t = setting.target_index(loss)?;
            -scores[t]
        }
        ClampedMargin => {
            let t = setting.target_index(loss)?;
            let theta = threshold_for(loss, theta)?;
            let rival = argmax_excluding(scores, t).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            theta.max(scores[rival]) - scores[t]
        }
        SourceCrossEntropy => {
            let s = setting.source_index(loss)?;
            softmax(scores)[s].ln()
        }
        SourceScore => {
            let s = setting.source_index(loss)?;
            scores[s]
        }
        RejectAll => {
            let theta = threshold_for(loss, theta)?;
            scores[argmax(scores)] - theta
        }
        SourceMargin => {
            let s = setting.source_index(loss)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            scores[s] - scores[rival]
        }
        SourceClampedMargin => {
            let s = setting.source_index(loss)?;
            let theta = threshold_for(loss, theta)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            theta.max(scores[s]) - scores[rival]
        }
        OthersScore => {
            let s = setting.source_index(loss)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            -scores[rival]
        }
        AcceptAny => {
            let theta = threshold_for(loss, theta)?;
            theta - scores[argmax(scores)]
        }
        BinaryCrossEntropyReject => -(1.0 - sigmoid(scores[0])).ln(),
        ScoreMinusThreshold => scores[0] - threshold_for(loss, theta)?,
        BinaryCrossEntropyAccept => -sigmoid(scores[0]).ln(),
        ThresholdMinusScore => threshold_for(loss, theta)? - scores[0],
    };
    Ok(value)
}

/// Gradient of [`eval_loss`] with respect to the score vector. Max-based
/// losses use the subgradient at the active branch, matching the
/// deterministic tie rule in [`argmax`].
pub fn loss_grad_scores(
    loss: LossId,
    scores: &[f64],
    setting: &AttackSetting,
    theta: Option<f64>,
) -> Result<Vec<f64>, LossError> {
    check_scores(loss, scores, setting.task())?;
    let n = scores.len();
    let mut g = vec![0.0; n];
    use LossId::*;
    match loss {
        CrossEntropy => {
            let t = setting.target_index(loss)?;
            let p = softmax(scores);
            for i in 0..n {
                g[i] = p[i] - if i == t { 1.0 } else { 0.0 };
            }
        }
        Margin => {
            let t = setting.target_index(loss)?;
            let rival = argmax_excluding(scores, t).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            g[rival] += 1.0;
            g[t] -= 1.0;
        }
        TargetScore => {
            let t = setting.target_index(loss)?;
            g[t] = -1.0;
        }
        ClampedMargin => {
            let t = setting.target_index(loss)?;
            let theta = threshold_for(loss, theta)?;
            let rival = argmax_excluding(scores, t).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            if scores[rival] > theta {
                g[rival] += 1.0;
            }
            g[t] -= 1.0;
        }
        SourceCrossEntropy => {
            let s = setting.source_index(loss)?;
            let p = softmax(scores);
            for i in 0..n {
                g[i] = if i == s { 1.0 } else { 0.0 } - p[i];
            }
        }
        SourceScore => {
            let s = setting.source_index(loss)?;
            g[s] = 1.0;
        }
        RejectAll => {
            threshold_for(loss, theta)?;
            g[argmax(scores)] = 1.0;
        }
        SourceMargin => {
            let s = setting.source_index(loss)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            g[s] += 1.0;
            g[rival] -= 1.0;
        }
        SourceClampedMargin => {
            let s = setting.source_index(loss)?;
            let theta = threshold_for(loss, theta)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            if scores[s] > theta {
                g[s] += 1.0;
            }
            g[rival] -= 1.0;
        }
        OthersScore => {
            let s = setting.source_index(loss)?;
            let rival = argmax_excluding(scores, s).ok_or(LossError::NeedsCompetitor(loss.name()))?;
            g[rival] = -1.0;
        }
        AcceptAny => {
            threshold_for(loss, theta)?;
            g[argmax(scores)] = -1.0;
        }
        BinaryCrossEntropyReject => g[0] = sigmoid(scores[0]),
        ScoreMinusThreshold => {
            threshold_for(loss, theta)?;
            g[0] = 1.0;
        }
        BinaryCrossEntropyAccept => g[0] = sigmoid(scores[0]) - 1.0,
        ThresholdMinusScore => {
            threshold_for(loss, theta)?;
            g[0] = -1.0;
        }
    }
    Ok(g)
}

/// Gradient of the loss with respect to the input samples: chain rule
/// through cosine scoring (enrollments are constant unit vectors) into the
/// embedder's input gradient. The threshold comes from the database.
pub fn input_loss_grad(
    x: &Waveform,
    loss: LossId,
    setting: &AttackSetting,
    db: &SpeakerDatabase,
    embedder: &Embedder,
) -> Result<Vec<f64>, LossError> {
    let scores = crate::srs::score(x, db, embedder)?;
    let g = loss_grad_scores(loss, &scores, setting, db.threshold)?;
    let dim = embedder.embed_dim();
    let mut upstream = vec![0.0; dim];
    for (gi, e) in g.iter().zip(db.entries.iter()) {
        if *gi == 0.0 {
            continue;
        }
        for (u, w) in upstream.iter_mut().zip(e.embedding.iter()) {
            *u += gi * w;
        }
    }
    Ok(embedder.input_gradient(x, &upstream)?)
}
