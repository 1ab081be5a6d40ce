//! Command line front end: corpus generation, enrollment, threshold tuning,
//! attack runs, playback sweeps, transfer matrices, and record rollups.
//! Every subcommand is a pure function of its flags, config file, and seeds,
//! so a rerun reproduces reports and waveforms byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use falsetto::attack::OptimizerKind;
use falsetto::audio::{generate_corpus, load_wav, store_wav, Waveform};
use falsetto::harness::{
    run_experiment, run_ota_eval, run_robust_experiment, transfer_matrix, CorpusConfig,
    ExperimentConfig, ExperimentSummary, OtaEvalConfig, RobustExperimentConfig, TransferConfig,
};
use falsetto::losses::{LossId, SettingId};
use falsetto::srs::{
    enroll, score, tune_threshold_eer, Activation, Embedder, EmbedderSpec, FeatureConfig,
    SpeakerDatabase, TaskKind,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "falsetto",
    about = "Adversarial voice attacks against a self-contained speaker recognition stack",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker corpus as WAV files under a directory.
    GenCorpus(GenCorpusArgs),
    /// Build a speaker database from enrollment voices on disk.
    Enroll(EnrollArgs),
    /// Set a saved database's threshold to its equal error rate point.
    TuneThreshold(TuneThresholdArgs),
    /// Run a configured attack; write records, a summary, and the audio.
    Attack(AttackArgs),
    /// Run the over-transforms attack and score it through a held-out room.
    RobustAttack(ConfigRunArgs),
    /// Replay a configured attack's output across room and noise sweeps.
    OtaEval(ConfigRunArgs),
    /// Craft on each model variant and measure accuracy drops on the rest.
    TransferMatrix(TransferMatrixArgs),
    /// Aggregate per-voice records into one row per attack configuration.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    speakers: usize,
    #[arg(long)]
    utterances: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; one subdirectory per speaker plus a manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnrollArgs {
    /// Corpus directory as written by gen-corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Recognition task: osi, csi, or sv.
    #[arg(long)]
    task: TaskKind,
    /// Enroll the first K speakers; the rest stay imposters. Defaults to all.
    #[arg(long)]
    enrolled: Option<usize>,
    /// Leading utterances per speaker used as enrollment data.
    #[arg(long, default_value_t = 2)]
    enroll_utterances: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 7)]
    weight_seed: u64,
    /// Frame nonlinearity: tanh or softplus.
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    #[arg(long, default_value_t = 256)]
    frame_len: usize,
    #[arg(long, default_value_t = 128)]
    hop: usize,
    #[arg(long, default_value_t = 24)]
    filters: usize,
    /// Output path for the speaker database.
    #[arg(long)]
    db_out: PathBuf,
    /// Output path for the embedder description used by later subcommands.
    #[arg(long)]
    embedder_out: PathBuf,
}

#[derive(Args)]
struct TuneThresholdArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Database to tune; rewritten in place with the threshold set.
    #[arg(long)]
    db: PathBuf,
    /// Embedder description written by enroll.
    #[arg(long)]
    embedder: PathBuf,
    /// Leading utterances per enrolled speaker to skip as enrollment data.
    #[arg(long, default_value_t = 2)]
    enroll_utterances: usize,
}

#[derive(Args)]
struct AttackArgs {
    /// Attack run description in TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for records.jsonl, summary.csv, and adversarial/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    experiment_id: Option<String>,
    /// Setting name, C1 through C10.
    #[arg(long)]
    setting: Option<SettingId>,
    /// Loss short name, e.g. Ms or L2.
    #[arg(long)]
    loss: Option<LossId>,
    /// fgsm, pgd, cw2, or nes.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_voices: Option<usize>,
}

#[derive(Args)]
struct ConfigRunArgs {
    /// Run description in TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferMatrixArgs {
    /// Corpus, model list, and attack knobs in TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for transfer_matrix.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-voice records as written by the attack subcommands.
    #[arg(long)]
    records: PathBuf,
    /// Optional CSV destination for the aggregated rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus(args) => gen_corpus_cmd(&args),
        Command::Enroll(args) => enroll_cmd(&args),
        Command::TuneThreshold(args) => tune_threshold_cmd(&args),
        Command::Attack(args) => attack_cmd(&args),
        Command::RobustAttack(args) => robust_attack_cmd(&args),
        Command::OtaEval(args) => ota_eval_cmd(&args),
        Command::TransferMatrix(args) => transfer_matrix_cmd(&args),
        Command::Report(args) => report_cmd(&args),
    }
}

fn gen_corpus_cmd(args: &GenCorpusArgs) -> Result<()> {
    if args.speakers == 0 || args.utterances == 0 {
        bail!("need at least one speaker and one utterance");
    }
    let corpus = generate_corpus(args.speakers, args.utterances, args.duration, args.seed);
    for (id, utterances) in &corpus {
        let speaker_dir = args.out.join(id);
        fs::create_dir_all(&speaker_dir)
            .with_context(|| format!("creating {}", speaker_dir.display()))?;
        for (u, wav) in utterances.iter().enumerate() {
            store_wav(&speaker_dir.join(format!("utt{u:02}.wav")), wav)?;
        }
    }
    let manifest = serde_json::json!({
        "speakers": args.speakers,
        "utterances_per_speaker": args.utterances,
        "duration_s": args.duration,
        "seed": args.seed,
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    println!(
        "wrote {} speakers x {} utterances under {}",
        args.speakers,
        args.utterances,
        args.out.display()
    );
    Ok(())
}

/// Reads a corpus directory back: every subdirectory is a speaker, every
/// `.wav` inside it an utterance, both in name order.
fn load_corpus(dir: &Path) -> Result<BTreeMap<String, Vec<Waveform>>> {
    let mut corpus = BTreeMap::new();
    let mut speaker_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speaker_dirs.sort();
    for speaker_dir in speaker_dirs {
        let id = speaker_dir
            .file_name()
            .and_then(|n| n.to_str())
            .context("speaker directory name is not valid UTF-8")?
            .to_string();
        let mut wavs: Vec<PathBuf> = fs::read_dir(&speaker_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "wav"))
            .collect();
        wavs.sort();
        let mut utterances = Vec::with_capacity(wavs.len());
        for path in wavs {
            utterances
                .push(load_wav(&path).with_context(|| format!("loading {}", path.display()))?);
        }
        if !utterances.is_empty() {
            corpus.insert(id, utterances);
        }
    }
    if corpus.is_empty() {
        bail!("no speaker directories with .wav files under {}", dir.display());
    }
    Ok(corpus)
}

fn load_embedder(path: &Path) -> Result<Embedder> {
    let spec: EmbedderSpec = serde_json::from_str(
        &fs::read_to_string(path)
            .with_context(|| format!("reading embedder description {}", path.display()))?,
    )?;
    Ok(Embedder::new(spec)?)
}

fn enroll_cmd(args: &EnrollArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let enrolled = args.enrolled.unwrap_or(corpus.len());
    if enrolled == 0 || enrolled > corpus.len() {
        bail!("--enrolled must be between 1 and the {} corpus speakers", corpus.len());
    }
    let spec = EmbedderSpec {
        weight_seed: args.weight_seed,
        embed_dim: args.embed_dim,
        activation: args.activation,
        features: FeatureConfig {
            frame_len: args.frame_len,
            hop: args.hop,
            num_filters: args.filters,
            ..FeatureConfig::default()
        },
    };
    let embedder = Embedder::new(spec.clone())?;
    let mut enrollment = BTreeMap::new();
    for (id, utterances) in corpus.iter().take(enrolled) {
        if args.enroll_utterances == 0 || args.enroll_utterances > utterances.len() {
            bail!(
                "--enroll-utterances must be between 1 and the {} utterances of {id}",
                utterances.len()
            );
        }
        enrollment.insert(id.clone(), utterances[..args.enroll_utterances].to_vec());
    }
    let db = enroll(&enrollment, &embedder, args.task)?;
    db.save(&args.db_out)?;
    fs::write(&args.embedder_out, serde_json::to_string_pretty(&spec)? + "\n")?;
    println!(
        "enrolled {} speakers into {}; embedder description in {}",
        enrolled,
        args.db_out.display(),
        args.embedder_out.display()
    );
    Ok(())
}

fn tune_threshold_cmd(args: &TuneThresholdArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut db = SpeakerDatabase::load(&args.db)?;
    if db.task == TaskKind::Csi {
        bail!("closed-set identification decides by argmax and has no threshold");
    }
    let embedder = load_embedder(&args.embedder)?;
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for (id, utterances) in &corpus {
        match db.speaker_index(id) {
            Some(s) => {
                for x in utterances.iter().skip(args.enroll_utterances) {
                    genuine.push(score(x, &db, &embedder)?[s]);
                }
            }
            None => {
                for x in utterances {
                    let scores = score(x, &db, &embedder)?;
                    imposter.push(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
    }
    let (theta, eer) = tune_threshold_eer(&genuine, &imposter)?;
    db.threshold = Some(theta);
    db.save(&args.db)?;
    println!(
        "threshold {theta} at {:.2}% equal error rate ({} genuine, {} imposter scores)",
        100.0 * eer,
        genuine.len(),
        imposter.len()
    );
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn print_summary(summary: &ExperimentSummary, out: &Path) {
    println!(
        "[{}] {} voices, clean accuracy {:.1}%",
        summary.experiment_id, summary.voices, summary.clean.acc
    );
    if let Some(t) = summary.attack.asr_t {
        println!("  targeted success {t:.1}%");
    }
    println!("  untargeted success {:.1}%", summary.attack.asr_u);
    println!("  reports under {}", out.display());
}

fn attack_cmd(args: &AttackArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_toml(&args.config)?;
    if let Some(id) = &args.experiment_id {
        cfg.experiment_id = id.clone();
    }
    if let Some(setting) = args.setting {
        cfg.setting = setting;
    }
    if let Some(loss) = args.loss {
        cfg.loss = loss;
    }
    if let Some(optimizer) = args.optimizer {
        cfg.attack.optimizer = optimizer;
    }
    if let Some(epsilon) = args.epsilon {
        cfg.attack.epsilon = epsilon;
    }
    if let Some(alpha) = args.alpha {
        cfg.attack.alpha = alpha;
    }
    if let Some(iterations) = args.iterations {
        cfg.attack.iterations = iterations;
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(max_voices) = args.max_voices {
        cfg.max_voices = Some(max_voices);
    }
    fs::create_dir_all(&args.out)?;
    let summary = run_experiment(&cfg, &args.out)?;
    print_summary(&summary, &args.out);
    Ok(())
}

fn robust_attack_cmd(args: &ConfigRunArgs) -> Result<()> {
    let cfg: RobustExperimentConfig = read_toml(&args.config)?;
    fs::create_dir_all(&args.out)?;
    let (summary, cells) = run_robust_experiment(&cfg, &args.out)?;
    print_summary(&summary, &args.out);
    for cell in &cells {
        match cell.asr_t {
            Some(t) => println!(
                "  held-out room at {} dB: targeted {t:.1}%, untargeted {:.1}%",
                cell.snr_db, cell.asr_u
            ),
            None => println!(
                "  held-out room at {} dB: untargeted {:.1}%",
                cell.snr_db, cell.asr_u
            ),
        }
    }
    Ok(())
}

fn ota_eval_cmd(args: &ConfigRunArgs) -> Result<()> {
    let cfg: OtaEvalConfig = read_toml(&args.config)?;
    fs::create_dir_all(&args.out)?;
    let (summary, cells) = run_ota_eval(&cfg, &args.out)?;
    print_summary(&summary, &args.out);
    println!("  {} playback cells in ota_sweep.csv", cells.len());
    Ok(())
}

/// Corpus, model variants, and attack knobs for the cross-model matrix.
#[derive(Deserialize)]
struct TransferMatrixSpec {
    corpus: CorpusConfig,
    #[serde(default)]
    master_seed: u64,
    models: Vec<EmbedderSpec>,
    #[serde(default)]
    transfer: TransferConfig,
}

fn transfer_matrix_cmd(args: &TransferMatrixArgs) -> Result<()> {
    let spec: TransferMatrixSpec = read_toml(&args.config)?;
    let corpus = generate_corpus(
        spec.corpus.num_speakers,
        spec.corpus.utterances_per_speaker,
        spec.corpus.duration_s,
        spec.master_seed,
    );
    let report = transfer_matrix(&spec.models, &corpus, &spec.transfer)?;
    fs::create_dir_all(&args.out)?;
    report.write_csv(&args.out.join("transfer_matrix.csv"))?;
    println!("accuracy drop in points, crafted on the row, received by the column:");
    for (i, source) in report.model_ids.iter().enumerate() {
        let cells: Vec<String> = report.accuracy_drop[i]
            .iter()
            .map(|d| format!("{d:>6.1}"))
            .collect();
        println!("  {source:>24} {}", cells.join(" "));
    }
    println!("full matrix in {}", args.out.join("transfer_matrix.csv").display());
    Ok(())
}

/// The fields of a per-voice record that the rollup needs. Extra fields in
/// the JSON lines are ignored, so old records stay readable.
#[derive(Deserialize)]
struct RecordRow {
    setting: String,
    loss: String,
    optimizer: String,
    success: bool,
    untargeted_success: bool,
    queries_used: u64,
    l2: f64,
    linf: f64,
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.records)
        .with_context(|| format!("reading records {}", args.records.display()))?;
    let mut groups: BTreeMap<(String, String, String), Vec<RecordRow>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let row: RecordRow = serde_json::from_str(line)
            .with_context(|| format!("parsing record on line {}", i + 1))?;
        groups
            .entry((row.setting.clone(), row.loss.clone(), row.optimizer.clone()))
            .or_default()
            .push(row);
    }
    if groups.is_empty() {
        bail!("no records in {}", args.records.display());
    }
    let mut csv =
        String::from("setting,loss,optimizer,voices,success_pct,untargeted_pct,mean_l2,mean_linf,mean_queries\n");
    for ((setting, loss, optimizer), rows) in &groups {
        let n = rows.len() as f64;
        let success = 100.0 * rows.iter().filter(|r| r.success).count() as f64 / n;
        let untargeted = 100.0 * rows.iter().filter(|r| r.untargeted_success).count() as f64 / n;
        let mean_l2 = rows.iter().map(|r| r.l2).sum::<f64>() / n;
        let mean_linf = rows.iter().map(|r| r.linf).sum::<f64>() / n;
        let mean_queries = rows.iter().map(|r| r.queries_used as f64).sum::<f64>() / n;
        println!(
            "{setting} {loss} {optimizer}: {} voices, success {success:.1}%, untargeted {untargeted:.1}%, \
             mean l2 {mean_l2:.4}, mean linf {mean_linf:.6}, mean queries {mean_queries:.1}",
            rows.len()
        );
        csv.push_str(&format!(
            "{setting},{loss},{optimizer},{},{success},{untargeted},{mean_l2},{mean_linf},{mean_queries}\n",
            rows.len()
        ));
    }
    if let Some(out) = &args.out {
        fs::write(out, csv)?;
        println!("rows written to {}", out.display());
    }
    Ok(())
}
