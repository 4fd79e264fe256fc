use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use njm::captioner::{check_gradients, decode_beam, decode_greedy, Batch, Example, ModelDims, ModelParams};
use njm::corpus::{
    load_corpus, read_features, read_manifest, write_features, write_manifest, SyntheticConfig, SyntheticCorpus,
    Vocabulary, DEFAULT_CAPTIONS_PER_IMAGE,
};
use njm::eval::{eval_buckets, rank_candidates, run_experiment, ExperimentGrid};
use njm::funny_score::{FunnyScorePolicy, PolicyMode};
use njm::nn::AdamConfig;
use njm::trainer::{load_checkpoint, save_checkpoint, train, write_metrics, TrainingConfig};
use njm::{Error, Result};

#[derive(Parser)]
#[command(name = "njm", version, about = "Star-weighted LSTM caption generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Build a vocabulary from a manifest.
    BuildVocab(BuildVocabArgs),
    /// Train a captioner and write a checkpoint.
    Train(TrainArgs),
    /// Decode captions for one image.
    Caption(CaptionArgs),
    /// Per-bucket loss and perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Rank candidate captions for one image by model score.
    Rank(RankArgs),
    /// Finite-difference check of the backward pass on a random toy model.
    Gradcheck(GradcheckArgs),
    /// Run a policy-by-seed experiment grid.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    images: usize,
    #[arg(long = "captions-per", default_value_t = DEFAULT_CAPTIONS_PER_IMAGE)]
    captions_per: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long = "frac-high", default_value_t = 0.05)]
    frac_high: f64,
    #[arg(long = "out-manifest")]
    out_manifest: PathBuf,
    #[arg(long = "out-features")]
    out_features: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "min-freq", default_value_t = 1)]
    min_freq: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "uniform")]
    policy: String,
    #[arg(long, default_value_t = 100)]
    threshold: u32,
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
    #[arg(long = "w-high", default_value_t = 2.0)]
    w_high: f64,
    #[arg(long = "w-low", default_value_t = 1.0)]
    w_low: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long = "embed-dim", default_value_t = 128)]
    embed_dim: usize,
    #[arg(long = "hidden-dim", default_value_t = 128)]
    hidden_dim: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// Write the per-step metrics log (JSON lines) here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long = "out-ckpt")]
    out_ckpt: PathBuf,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "image-id")]
    image_id: String,
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long = "max-len", default_value_t = 20)]
    max_len: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 100)]
    threshold: u32,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "image-id")]
    image_id: String,
    /// One candidate caption per line.
    #[arg(long = "candidates-file")]
    candidates_file: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// feature,embed,hidden,vocab
    #[arg(long, default_value = "4,4,4,8")]
    dims: String,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn meta_path(manifest: &Path) -> PathBuf {
    let mut p = manifest.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        n_images: a.images,
        captions_per_image: a.captions_per,
        dim: a.dim,
        frac_high: a.frac_high,
        ..SyntheticConfig::default()
    };
    let s = SyntheticCorpus::generate(&cfg)?;
    write_manifest(&a.out_manifest, &s.manifest)?;
    write_features(&a.out_features, &s.corpus.features)?;
    fs::write(meta_path(&a.out_manifest), serde_json::to_string_pretty(&cfg)?)?;
    let n_high = s.corpus.records.iter().filter(|r| r.stars >= 100).count();
    println!(
        "{} captions for {} images ({} with >= 100 stars), dim {}",
        s.corpus.len(),
        s.corpus.features.len(),
        n_high,
        cfg.dim
    );
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let texts: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = Vocabulary::build_from_texts(&texts, a.min_freq)?;
    vocab.save(&a.out)?;
    println!("{} tokens ({} regular)", vocab.len(), vocab.len() - 4);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let corpus = load_corpus(&a.manifest, &a.features, &vocab)?;
    let mode: PolicyMode = a.policy.parse()?;
    let policy = FunnyScorePolicy { mode, threshold: a.threshold, offset: a.offset, w_high: a.w_high, w_low: a.w_low };
    let config = TrainingConfig {
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        policy,
        feature_dim: corpus.dim(),
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        min_freq: 1,
        max_caption_len: a.max_len,
    };
    let (ckpt, log) = train(config, vocab, &corpus)?;
    save_checkpoint(&ckpt, &a.out_ckpt)?;
    if let Some(p) = &a.metrics {
        write_metrics(p, &log)?;
    }
    match log.last() {
        Some(m) => println!("{} steps, final batch loss {:.6}, model {}", log.len(), m.loss, ckpt.model_id()),
        None => println!("0 steps, model {}", ckpt.model_id()),
    }
    Ok(())
}

fn image_features(path: &Path, image_id: &str) -> Result<Vec<f64>> {
    read_features(path)?.get_f64(image_id).ok_or_else(|| Error::DanglingImageId(image_id.to_owned()))
}

fn caption_cmd(a: CaptionArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let f = image_features(&a.features, &a.image_id)?;
    let results = if a.beam <= 1 {
        vec![decode_greedy(&f, &ckpt.params, a.max_len)?]
    } else {
        decode_beam(&f, &ckpt.params, a.beam, a.max_len)?
    };
    for r in results {
        println!("{:.6}\t{}", r.log_prob, ckpt.vocab.detokenize(&r.tokens)?);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.manifest, &a.features, &ckpt.vocab)?;
    let report = eval_buckets(&ckpt, &corpus, a.threshold)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let f = image_features(&a.features, &a.image_id)?;
    let text = fs::read_to_string(&a.candidates_file)?;
    let candidates: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let ranking = rank_candidates(&ckpt, &f, &candidates)?;
    for (pos, c) in ranking.ranked.iter().enumerate() {
        println!("{}\t{:.6}\t{}", pos + 1, c.log_prob, c.caption);
    }
    Ok(())
}

fn parse_dims(s: &str) -> Result<ModelDims> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("--dims: {e}")))?;
    let [f, d, h, v] = parts[..] else {
        return Err(Error::InvalidArgument("--dims takes feature,embed,hidden,vocab".into()));
    };
    let dims = ModelDims::new(f, d, h, v);
    dims.validate()?;
    Ok(dims)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    if a.eps.is_nan() || a.eps <= 0.0 {
        return Err(Error::InvalidArgument("--eps must be positive".into()));
    }
    let params = ModelParams::init_with_scale(dims, a.seed, 0.5);
    let features = |k: u64| njm::nn::Matrix::seeded(1, dims.feature_dim, 1.0, a.seed + 100 + k).as_slice().to_vec();
    let regular: Vec<u32> = (4..dims.vocab_size as u32).collect();
    let pick = |i: usize| regular[i % regular.len()];
    let batch = Batch::from_examples(vec![
        Example { features: features(0), caption: vec![1, pick(0), pick(3), pick(1), 2], stars: 10 },
        Example { features: features(1), caption: vec![1, pick(2), 2], stars: 150 },
    ]);
    let mut worst = 0.0f64;
    for policy in [FunnyScorePolicy::uniform(), FunnyScorePolicy::literal(), FunnyScorePolicy::weighted(2.0, 1.0)] {
        let err = check_gradients(&params, &batch, &policy, a.eps)?;
        println!("{:<10} max relative error {err:.3e}", policy.mode.to_string());
        worst = worst.max(err);
    }
    if worst >= a.tolerance {
        return Err(Error::GradientCheck { error: worst, tolerance: a.tolerance });
    }
    println!("ok");
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let grid: ExperimentGrid =
        serde_json::from_str(&fs::read_to_string(&a.grid)?).map_err(|e| Error::Malformed(format!("grid: {e}")))?;
    let summary = run_experiment(&grid)?;
    fs::write(&a.out, serde_json::to_string_pretty(&summary)?)?;
    print!("{}", summary.to_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rank(a) => rank_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
