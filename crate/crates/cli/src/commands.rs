//! Subcommand arguments and their implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde_json::json;

use muser::checkpoint::{self, CheckpointKind, Dtype, RngState};
use muser::config::{ModelConfig, Preset, RunConfig, TrainConfig};
use muser::corpus::{emotion_from_name, load_corpus, load_piece, write_piece};
use muser::eval::{self, MetricsReport};
use muser::generate::{element_transfer, generate};
use muser::gradcheck::model_grad_check;
use muser::midi::{read_midi, write_midi};
use muser::model::MuserModel;
use muser::prior::{prior_corpus, PriorModel, PriorTrainer};
use muser::score::Score;
use muser::synth::{synthetic_corpus, SynthOptions};
use muser::tokenizer::{detokenize, tokenize, CpSequence};
use muser::train::Trainer;
use muser::vocab::{parse_elements, parse_optional_emotion, Emotion, Vocabulary};
use muser::MuserError;
use muser_numerics::Precision;

use crate::manifest::{beside, Manifest};
use crate::{Cli, CliError, Command, Common};

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// MIDI file, or an event-stream JSON to render back to MIDI.
    #[arg(long)]
    pub input: PathBuf,
    /// `.json` writes an event stream, `.mid` writes MIDI.
    #[arg(long)]
    pub out: PathBuf,
    /// Quadrant label (Q1..Q4 or none); taken from the file name when omitted.
    #[arg(long)]
    pub emotion: Option<String>,
    /// Token budget; defaults to the model's sequence length.
    #[arg(long)]
    pub max_len: Option<usize>,
}

/// Where training sequences come from.
#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// MIDI / event-stream files or directories.
    #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
    pub corpus: Vec<PathBuf>,
    /// Use this many synthetic pieces instead of files.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Bars per synthetic piece.
    #[arg(long, default_value_t = 3)]
    pub synthetic_bars: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Use the fine-tuning learning rate.
    #[arg(long)]
    pub finetune: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the regularization loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    /// Per-step losses as CSV.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// Trained model whose codes the prior learns.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub emotion: Emotion,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Piece that keeps its other elements and its emotion.
    #[arg(long)]
    pub a: PathBuf,
    /// Donor of the transferred elements.
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated elements taken from B, e.g. `v` or `p,d,v`.
    #[arg(long, default_value = "")]
    pub elements: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Hybrid piece; defaults to `transfer.mid`.
    #[arg(long, default_value = "transfer.mid")]
    pub out: PathBuf,
    /// Provenance report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// MIDI / event-stream files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-element token histograms as CSV.
    #[arg(long)]
    pub distribution: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportLatentsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled MIDI / event-stream files or directories.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Pooled latents as CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// 2-D PCA projection per element as CSV.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Quadrant-pair silhouette scores as JSON.
    #[arg(long)]
    pub silhouette: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Sequences in the probe batch.
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Sequence length of the probe model.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 2)]
    pub per_param: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect; without it the resolved config is inspected.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Fail unless the configuration equals this preset field for field.
    #[arg(long)]
    pub expect_preset: Option<Preset>,
}

struct Ctx {
    command: &'static str,
    seed: u64,
    config: RunConfig,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn new(command: &'static str, common: Common) -> CliResult<Self> {
        let mut config = match (&common.config, common.preset) {
            (Some(_), Some(_)) => return Err(CliError::usage("--config and --preset are mutually exclusive")),
            (Some(path), None) => {
                require(path)?;
                RunConfig::load(path)?
            }
            (None, p) => RunConfig::preset(p.unwrap_or(Preset::Desk)),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        Ok(Self {
            command,
            seed: config.train.seed,
            config,
            manifest: common.manifest,
        })
    }

    /// Validates the final config and logs it with the seed.
    fn resolved(&self) -> CliResult<()> {
        self.config.validate()?;
        info!("{}: seed {}", self.command, self.seed);
        info!("resolved config:\n{}", self.config.to_toml());
        Ok(())
    }

    fn finish(&self, out: Option<&Path>, checkpoint_model: Option<&ModelConfig>, outputs: serde_json::Value) -> CliResult<()> {
        let path = match (&self.manifest, out) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => beside(out),
            (None, None) => PathBuf::from(format!("muser-{}.manifest.json", self.command)),
        };
        let mut m = Manifest::new(self.command, self.seed, self.config.clone());
        m.checkpoint_model = checkpoint_model.cloned();
        m.outputs = outputs;
        m.write(&path)?;
        info!("manifest written to {}", path.display());
        Ok(())
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("input path {} does not exist", path.display())))
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| MuserError::io(path, e))?))
}

fn dtype(p: Precision) -> Dtype {
    match p {
        Precision::F64 => Dtype::F64,
        Precision::F32 => Dtype::F32,
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(cli.command.name(), cli.common)?;
    match cli.command {
        Command::Tokenize(a) => tokenize_cmd(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::TrainPrior(a) => train_prior_cmd(ctx, a),
        Command::Generate(a) => generate_cmd(ctx, a),
        Command::Transfer(a) => transfer_cmd(ctx, a),
        Command::Eval(a) => eval_cmd(ctx, a),
        Command::ExportLatents(a) => export_latents_cmd(ctx, a),
        Command::Gradcheck(a) => gradcheck_cmd(ctx, a),
        Command::InspectCheckpoint(a) => inspect_cmd(ctx, a),
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn tokenize_cmd(ctx: Ctx, a: TokenizeArgs) -> CliResult<()> {
    require(&a.input)?;
    ctx.resolved()?;
    let vocab = ctx.config.model.vocabulary();
    let max_len = a.max_len.unwrap_or(ctx.config.model.seq_len);
    let outputs = if is_json(&a.input) {
        let (seq, _) = load_piece(&a.input, &vocab, usize::MAX)?;
        let (score, report) = detokenize(&seq, &vocab);
        write_midi(&score, &a.out)?;
        json!({ "tokens": seq.len(), "notes": score.notes.len(), "detokenize": report })
    } else {
        let emotion = match &a.emotion {
            Some(s) => parse_optional_emotion(s)?,
            None => emotion_from_name(&a.input),
        };
        let score = read_midi(&a.input)?;
        let (seq, report) = tokenize(&score, emotion, &vocab, max_len)?;
        write_piece(&seq, &vocab, &a.out)?;
        json!({ "tokens": seq.len(), "notes": score.notes.len(), "tokenize": report })
    };
    println!("{outputs}");
    ctx.finish(Some(&a.out), None, outputs)
}

fn load_training_corpus(data: &CorpusArgs, vocab: &Vocabulary, seq_len: usize, seed: u64) -> CliResult<Vec<CpSequence>> {
    match (data.synthetic, data.corpus.is_empty()) {
        (Some(0), _) => Err(CliError::usage("--synthetic needs at least one piece")),
        (Some(count), _) => {
            let opts = SynthOptions {
                bars: data.synthetic_bars,
                max_len: seq_len,
                ..SynthOptions::default()
            };
            Ok(synthetic_corpus(count, vocab, &opts, seed)?)
        }
        (None, true) => Err(CliError::usage("give --corpus paths or --synthetic N")),
        (None, false) => {
            for p in &data.corpus {
                require(p)?;
            }
            Ok(load_corpus(&data.corpus, vocab, seq_len)?.into_iter().map(|(_, s)| s).collect())
        }
    }
}

fn apply_train_overrides(t: &mut TrainConfig, steps: Option<usize>, batch: Option<usize>, lr: Option<f64>, prior: bool) {
    if let Some(s) = steps {
        if prior {
            t.prior_steps = s;
        } else {
            t.steps = s;
        }
    }
    if let Some(b) = batch {
        t.batch_size = b;
    }
    if let Some(lr) = lr {
        if prior {
            t.prior_lr = lr;
        } else {
            t.lr = lr;
        }
    }
}

fn train_cmd(mut ctx: Ctx, a: TrainArgs) -> CliResult<()> {
    apply_train_overrides(&mut ctx.config.train, a.steps, a.batch_size, a.lr, false);
    let init = match &a.init {
        Some(path) => {
            require(path)?;
            if a.seq_len.is_some() || a.codebook_size.is_some() {
                return Err(CliError::usage("--seq-len and --codebook-size cannot change a loaded model"));
            }
            let model = checkpoint::load_model(path)?;
            ctx.config.model = model.config.clone();
            Some(model)
        }
        None => None,
    };
    if let Some(v) = a.alpha {
        ctx.config.model.alpha = v;
    }
    if let Some(n) = a.seq_len {
        ctx.config.model.seq_len = n;
    }
    if let Some(k) = a.codebook_size {
        ctx.config.model.codebook_size = k;
    }
    ctx.resolved()?;
    let cfg = &ctx.config;
    let corpus = load_training_corpus(&a.data, &cfg.model.vocabulary(), cfg.model.seq_len, ctx.seed)?;
    info!("{} training sequences", corpus.len());
    let model = match init {
        Some(mut m) => {
            m.config.alpha = cfg.model.alpha;
            m
        }
        None => MuserModel::new(cfg.model.clone(), ctx.seed)?,
    };
    let mut trainer = Trainer::new(model, cfg.train.clone());
    if a.finetune {
        trainer.start_finetune();
    }
    let mut log = match &a.loss_log {
        Some(p) => {
            let mut w = csv::Writer::from_writer(create(p)?);
            w.write_record(["step", "total", "rec", "commit", "reg"]).map_err(csv_err)?;
            Some(w)
        }
        None => None,
    };
    let every = cfg.train.log_every.max(1) as u64;
    let mut log_err = None;
    let history = trainer.fit(&corpus, cfg.train.steps, |step, l| {
        if step % every == 0 {
            info!("step {step}: total {:.5} rec {:.5} commit {:.5} reg {:.5}", l.total, l.rec_total(), l.commit, l.reg);
        }
        if let Some(w) = log.as_mut() {
            let row = [step.to_string(), l.total.to_string(), l.rec_total().to_string(), l.commit.to_string(), l.reg.to_string()];
            if let Err(e) = w.write_record(&row) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(csv_err(e));
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| MuserError::io(a.loss_log.as_deref().unwrap_or(Path::new("")), e))?;
    }
    let rng = RngState::capture(trainer.rng());
    let step = trainer.step;
    let model = trainer.into_model();
    checkpoint::write_model(&model, &a.out, step, Some(rng), dtype(cfg.train.precision))?;
    let outputs = json!({
        "checkpoint": a.out,
        "sequences": corpus.len(),
        "steps": step,
        "first_loss": history.first().map(|l| l.total),
        "final_loss": history.last().map(|l| l.total),
    });
    println!("{outputs}");
    ctx.finish(Some(&a.out), Some(&model.config), outputs)
}

fn csv_err(e: csv::Error) -> CliError {
    MuserError::data(format!("csv: {e}")).into()
}

fn train_prior_cmd(mut ctx: Ctx, a: TrainPriorArgs) -> CliResult<()> {
    require(&a.ckpt)?;
    apply_train_overrides(&mut ctx.config.train, a.steps, a.batch_size, a.lr, true);
    let model = checkpoint::load_model(&a.ckpt)?;
    ctx.resolved()?;
    let corpus = load_training_corpus(&a.data, &model.vocab, model.config.seq_len, ctx.seed)?;
    let examples = prior_corpus(&model, &corpus)?;
    let prior = PriorModel::new(model.config.clone(), ctx.seed)?;
    let mut trainer = PriorTrainer::new(prior, ctx.config.train.clone());
    let every = ctx.config.train.log_every.max(1) as u64;
    let losses = trainer.fit(&examples, ctx.config.train.prior_steps, |step, loss| {
        if step % every == 0 {
            info!("prior step {step}: loss {loss:.5}");
        }
    })?;
    let step = trainer.step;
    let prior = trainer.into_prior();
    checkpoint::write_prior(&prior, &a.out, step, dtype(ctx.config.train.precision))?;
    let outputs = json!({
        "checkpoint": a.out,
        "examples": examples.len(),
        "steps": step,
        "final_loss": losses.last(),
        "accuracy": prior.accuracy(&examples)?,
    });
    println!("{outputs}");
    ctx.finish(Some(&a.out), Some(&model.config), outputs)
}

fn generate_cmd(ctx: Ctx, a: GenerateArgs) -> CliResult<()> {
    require(&a.ckpt)?;
    require(&a.prior)?;
    ctx.resolved()?;
    let model = checkpoint::load_model(&a.ckpt)?;
    let prior = checkpoint::load_prior(&a.prior)?;
    let max_len = a.max_len.unwrap_or(model.config.seq_len);
    let g = generate(&model, &prior, a.emotion, max_len, ctx.seed)?;
    write_piece(&g.sequence, &model.vocab, &a.out)?;
    let outputs = json!({ "out": a.out, "emotion": a.emotion, "tokens": g.sequence.len(), "codes": g.codes });
    info!("wrote {} tokens to {}", g.sequence.len(), a.out.display());
    ctx.finish(Some(&a.out), Some(&model.config), outputs)
}

fn transfer_cmd(ctx: Ctx, a: TransferArgs) -> CliResult<()> {
    require(&a.ckpt)?;
    require(&a.a)?;
    require(&a.b)?;
    let elements = parse_elements(&a.elements).map_err(|e| CliError::usage(e.to_string()))?;
    ctx.resolved()?;
    let model = checkpoint::load_model(&a.ckpt)?;
    let n = model.config.seq_len;
    let (piece_a, _) = load_piece(&a.a, &model.vocab, n)?;
    let (piece_b, _) = load_piece(&a.b, &model.vocab, n)?;
    let t = element_transfer(&model, &piece_a, &piece_b, &elements, ctx.seed)?;
    write_piece(&t.sequence, &model.vocab, &a.out)?;
    let report = to_json(&t.report)?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".report.json");
        a.out.with_file_name(name)
    });
    std::fs::write(&report_path, pretty(&report)? + "\n").map_err(|e| MuserError::io(&report_path, e))?;
    println!("{report}");
    let outputs = json!({ "out": a.out, "report": report_path, "tokens": t.sequence.len(), "transfer": report });
    ctx.finish(Some(&a.out), Some(&model.config), outputs)
}

fn eval_cmd(ctx: Ctx, a: EvalArgs) -> CliResult<()> {
    for p in &a.input {
        require(p)?;
    }
    ctx.resolved()?;
    let vocab = ctx.config.model.vocabulary();
    let paths = muser::corpus::collect_paths(&a.input)?;
    if paths.is_empty() {
        return Err(MuserError::data("no .mid, .midi or .json pieces found").into());
    }
    let mut scores: Vec<(String, Score)> = Vec::new();
    let mut seqs = Vec::new();
    for p in &paths {
        let name = p.display().to_string();
        let score = if is_json(p) {
            let (seq, _) = load_piece(p, &vocab, usize::MAX)?;
            let score = detokenize(&seq, &vocab).0;
            seqs.push(seq);
            score
        } else {
            let score = read_midi(p)?;
            if a.distribution.is_some() {
                seqs.push(tokenize(&score, emotion_from_name(p), &vocab, usize::MAX)?.0);
            }
            score
        };
        scores.push((name, score));
    }
    let report = MetricsReport::build(&scores)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_json()).map_err(|e| MuserError::io(out, e))?;
    }
    if let Some(path) = &a.distribution {
        eval::write_distribution_csv(&eval::element_distribution(&seqs), create(path)?)?;
    }
    let summary = to_json(&report.summary)?;
    let outputs = json!({ "pieces": report.pieces.len(), "skipped": report.skipped, "summary": summary });
    ctx.finish(a.out.as_deref(), None, outputs)
}

fn export_latents_cmd(ctx: Ctx, a: ExportLatentsArgs) -> CliResult<()> {
    require(&a.ckpt)?;
    for p in &a.corpus {
        require(p)?;
    }
    ctx.resolved()?;
    let model = checkpoint::load_model(&a.ckpt)?;
    let pieces = load_corpus(&a.corpus, &model.vocab, model.config.seq_len)?;
    let seqs: Vec<CpSequence> = pieces.iter().map(|(_, s)| s.clone()).collect();
    let rows = eval::export_latents(&model, &seqs)?;
    eval::write_latents_csv(&rows, create(&a.out)?)?;
    if let Some(path) = &a.pca {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["piece", "name", "emotion", "element", "pc1", "pc2"]).map_err(csv_err)?;
        for eps in muser::vocab::TokenType::ELEMENTS {
            let sel: Vec<_> = rows.iter().filter(|r| r.element == eps).collect();
            let pts: Vec<Vec<f64>> = sel.iter().map(|r| r.vector.clone()).collect();
            for (r, xy) in sel.iter().zip(eval::pca_2d(&pts)?) {
                let emotion = r.emotion.map_or("none".to_string(), |e| e.to_string());
                w.write_record([
                    r.piece.to_string(),
                    pieces[r.piece].0.clone(),
                    emotion,
                    eps.short().to_string(),
                    xy[0].to_string(),
                    xy[1].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| MuserError::io(path, e))?;
    }
    let sc = eval::quadrant_silhouettes(&rows)?;
    for s in &sc {
        println!("{:<10} {}-{}  {:+.4}", s.element.name(), s.pair.0, s.pair.1, s.score);
    }
    let sc_json = to_json(&sc)?;
    if let Some(path) = &a.silhouette {
        std::fs::write(path, pretty(&sc_json)? + "\n").map_err(|e| MuserError::io(path, e))?;
    }
    let outputs = json!({ "latents": a.out, "pieces": pieces.len(), "silhouette": sc_json });
    ctx.finish(Some(&a.out), Some(&model.config), outputs)
}

fn gradcheck_cmd(mut ctx: Ctx, a: GradcheckArgs) -> CliResult<()> {
    if a.m == 0 || a.n < 4 {
        return Err(CliError::usage("gradcheck needs --m ≥ 1 and --n ≥ 4"));
    }
    ctx.config.model.seq_len = a.n;
    ctx.resolved()?;
    let started = std::time::Instant::now();
    let primitives = muser_numerics::gradcheck::primitive_suite(a.eps, ctx.seed).map_err(MuserError::from)?;
    let mut worst: f64 = 0.0;
    for (name, err) in &primitives {
        println!("{name:<24} {err:.3e}");
        worst = worst.max(*err);
    }
    let model = MuserModel::new(ctx.config.model.clone(), ctx.seed)?;
    let opts = SynthOptions {
        bars: 2,
        max_len: a.n,
        ..SynthOptions::default()
    };
    let seqs = synthetic_corpus(a.m, &model.vocab, &opts, ctx.seed)?;
    let full = model_grad_check(&model, &seqs, a.eps, a.per_param)?;
    println!(
        "{:<24} {:.3e} (worst parameter {}, {} probes over {} tensors)",
        "model loss", full.max_rel_error, full.worst_param, full.probes, full.params
    );
    worst = worst.max(full.max_rel_error);
    let seconds = started.elapsed().as_secs_f64();
    println!("max relative error {worst:.3e} ({seconds:.1} s)");
    let outputs = json!({ "primitives": primitives, "model": full, "max_rel_error": worst, "seconds": seconds });
    ctx.finish(None, None, outputs)?;
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {worst:.3e} ≥ {:e}", a.tolerance), 3))
    }
}

/// Dotted paths of fields whose values differ.
fn json_diff(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let null = serde_json::Value::Null;
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                json_diff(&path, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} (expected {b})")),
        _ => {}
    }
}

fn inspect_cmd(ctx: Ctx, a: InspectArgs) -> CliResult<()> {
    ctx.resolved()?;
    let (model_cfg, train_cfg, outputs) = match &a.ckpt {
        Some(path) => {
            require(path)?;
            let c = checkpoint::read_container(path)?;
            let params: usize = c.arrays.iter().map(|(_, t)| t.len()).sum();
            let kind = match c.meta.kind {
                CheckpointKind::Muser => "muser",
                CheckpointKind::Prior => "prior",
            };
            println!("checkpoint {} (format {}, {kind})", path.display(), c.version);
            println!("vocabulary {}, step {}, {} arrays, {params} values", c.meta.vocab, c.meta.step, c.arrays.len());
            for (name, t) in &c.arrays {
                println!("  {name:<40} {:?}", t.shape());
            }
            let outputs = json!({
                "kind": kind,
                "version": c.version,
                "step": c.meta.step,
                "arrays": c.arrays.len(),
                "values": params,
            });
            (c.meta.config, None, outputs)
        }
        None => (ctx.config.model.clone(), Some(ctx.config.train.clone()), json!({})),
    };
    println!("model {}", pretty(&model_cfg)?);
    if let Some(t) = &train_cfg {
        println!("train {}", pretty(t)?);
    }
    let mut diffs = Vec::new();
    if let Some(p) = a.expect_preset {
        json_diff("model", &to_json(&model_cfg)?, &to_json(&ModelConfig::preset(p))?, &mut diffs);
        if let Some(t) = &train_cfg {
            let mut want = TrainConfig::preset(p);
            // The seed is a run choice, not a preset value.
            want.seed = t.seed;
            json_diff("train", &to_json(t)?, &to_json(&want)?, &mut diffs);
        }
        if diffs.is_empty() {
            println!("matches preset {p:?}");
        } else {
            for d in &diffs {
                println!("mismatch {d}");
            }
        }
    }
    let mut outputs = outputs;
    outputs["mismatches"] = json!(diffs);
    ctx.finish(None, Some(&model_cfg), outputs)?;
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} field(s) differ from the preset", diffs.len()), 2))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| MuserError::data(e.to_string()).into())
}

fn pretty<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| MuserError::data(e.to_string()).into())
}
