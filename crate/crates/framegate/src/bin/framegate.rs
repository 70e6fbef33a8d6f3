//! Command-line entry point: data generation, training, evaluation,
//! ablations, gradient checking, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use framegate::ablate::{ablate, default_variants, render_table, Variant};
use framegate::ctx::RunCtx;
use framegate::data::{audit_corpus, generate_corpus, load_corpus, save_corpus, CorpusConfig};
use framegate::gradcheck::{suite, Precision};
use framegate::losses::span_to_labels;
use framegate::model::Model;
use framegate::train::{evaluate, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "framegate", version, about = "Multimodal video QA with frame-selection gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and audit a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the ablation grid with paired bootstrap comparisons.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Dump attention matrices and frame gate scores for chosen episodes.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML corpus config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config-file seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the corpus files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory (checkpoint, metrics log, resolved config).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config-file seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config-file epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Split name: train, val, or test.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML training config shared by all variants.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to named variants, e.g. "dual-att/bbce+iofsm/densecap-on".
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Float width of the analytic side under test.
    #[arg(long, default_value = "64", value_parser = ["32", "64"])]
    precision: String,
    /// Maximum acceptable relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated episode ids, e.g. "val-00000,val-00007".
    #[arg(long, value_delimiter = ',')]
    episode_ids: Vec<String>,
    /// Output directory for the per-episode tables.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::GradCheck(a) => run_grad_check(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, String> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", p.display()))
        }
    }
}

fn write_resolved<T: serde::Serialize>(cfg: &T, dir: &Path, name: &str) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let text = toml::to_string_pretty(cfg).map_err(|e| format!("config serialization: {e}"))?;
    std::fs::write(dir.join(name), text).map_err(|e| format!("cannot write resolved config: {e}"))
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, String> {
    let mut cfg: CorpusConfig = load_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let corpus = generate_corpus(&cfg).map_err(|e| e.to_string())?;
    audit_corpus(&corpus).map_err(|e| format!("generated corpus failed its audit: {e}"))?;
    save_corpus(&corpus, &a.out).map_err(|e| e.to_string())?;
    write_resolved(&cfg, &a.out, "resolved-corpus-config.toml")?;
    println!(
        "wrote corpus to {} (train {}, val {}, test {}; audit passed)",
        a.out.display(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn open_corpus(dir: &Path) -> Result<framegate::data::Corpus, String> {
    if !dir.exists() {
        return Err(format!(
            "corpus directory {} does not exist; run `framegate gen-data --out {}` first",
            dir.display(),
            dir.display()
        ));
    }
    load_corpus(dir).map_err(|e| e.to_string())
}

fn run_train(a: TrainArgs) -> Result<ExitCode, String> {
    let mut cfg: TrainConfig = load_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    let corpus = open_corpus(&a.corpus)?;
    if cfg.object_name_offset.is_none() {
        cfg.object_name_offset = Some(corpus.vocab.object_names.0 as usize);
    }
    write_resolved(&cfg, &a.out, "resolved-train-config.toml")?;
    let metrics = a.out.join("metrics.jsonl");
    let outcome = train(&cfg, &corpus.train, &corpus.val, Some(&metrics)).map_err(|e| e.to_string())?;
    let ckpt_path = a.out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path).map_err(|e| e.to_string())?;
    println!(
        "trained {} epochs (best val accuracy {:.4} at epoch {}{}); checkpoint: {}",
        outcome.history.len(),
        outcome.checkpoint.best_val_accuracy,
        outcome.checkpoint.epoch,
        if outcome.stopped_early { ", early stop" } else { "" },
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: EvalArgs) -> Result<ExitCode, String> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = open_corpus(&a.corpus)?;
    let episodes = corpus
        .split(&a.split)
        .ok_or_else(|| format!("unknown split {:?}; expected train, val, or test", a.split))?;
    let model = ckpt.model().map_err(|e| e.to_string())?;
    let report =
        evaluate(&model, episodes, &a.split, ckpt.config.losses).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?);
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, String> {
    if !path.exists() {
        return Err(format!(
            "checkpoint {} does not exist; run `framegate train --out <dir>` to create one",
            path.display()
        ));
    }
    Checkpoint::load(path).map_err(|e| e.to_string())
}

fn run_ablate(a: AblateArgs) -> Result<ExitCode, String> {
    let cfg: TrainConfig = load_toml(a.config.as_deref())?;
    let corpus = open_corpus(&a.corpus)?;
    let variants = match &a.variants {
        None => default_variants(),
        Some(names) => names
            .iter()
            .map(|n| {
                Variant::parse(n).ok_or_else(|| {
                    format!("unknown variant {n:?}; expected e.g. dual-att/bbce+iofsm/densecap-on")
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    write_resolved(&cfg, &a.out, "resolved-train-config.toml")?;
    let table = ablate(&cfg, &variants, &a.seeds, &corpus, true).map_err(|e| e.to_string())?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| e.to_string())?;
    std::fs::write(a.out.join("ablation.json"), json).map_err(|e| e.to_string())?;
    let rendered = render_table(&table);
    std::fs::write(a.out.join("ablation.txt"), &rendered).map_err(|e| e.to_string())?;
    print!("{rendered}");
    Ok(ExitCode::SUCCESS)
}

fn run_grad_check(a: GradCheckArgs) -> Result<ExitCode, String> {
    let precision = if a.precision == "32" { Precision::Bits32 } else { Precision::Bits64 };
    let tolerance = a.tolerance.unwrap_or(match precision {
        Precision::Bits32 => 1e-3,
        Precision::Bits64 => 1e-5,
    });
    let reports = suite::run_all(a.epsilon, precision).map_err(|e| e.to_string())?;
    let mut max = 0.0f64;
    for (name, r) in &reports {
        println!(
            "{name:24} max rel err {:.3e}  ({} values; worst {} [{}])",
            r.max_rel_err, r.checked, r.worst_param, r.worst_index
        );
        max = max.max(r.max_rel_err);
    }
    println!("overall max relative error {max:.3e} (tolerance {tolerance:.1e}, {}-bit)", a.precision);
    if max < tolerance {
        println!("grad-check PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("grad-check FAIL");
        Ok(ExitCode::from(2))
    }
}

fn run_inspect(a: InspectArgs) -> Result<ExitCode, String> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = open_corpus(&a.corpus)?;
    let model = ckpt.model().map_err(|e| e.to_string())?;
    if a.episode_ids.is_empty() {
        return Err("no --episode-ids given".into());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| e.to_string())?;
    for id in &a.episode_ids {
        let ep = ["train", "val", "test"]
            .iter()
            .filter_map(|s| corpus.split(s))
            .flatten()
            .find(|e| &e.id == id)
            .ok_or_else(|| format!("episode {id:?} not found in any split"))?;
        let text = inspect_episode(&model, ep).map_err(|e| e.to_string())?;
        let path = a.out.join(format!("{id}.txt"));
        std::fs::write(&path, &text).map_err(|e| e.to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn render_matrix(m: &framegate::attention::AttnMatrix, out: &mut String) {
    for r in 0..m.rows {
        let row: Vec<String> =
            (0..m.cols).map(|c| format!("{:8.4}", m.data[r * m.cols + c])).collect();
        out.push_str(&format!("    {}\n", row.join(" ")));
    }
}

fn inspect_episode(
    model: &Model<f32>,
    ep: &framegate::data::Episode,
) -> framegate::tensor::Result<String> {
    let mut ctx = RunCtx::eval();
    let fwd = model.forward(ep, &mut ctx, Some(ep.gt_answer))?;
    let trace = fwd.trace.expect("trace requested");
    let labels = span_to_labels(ep.gt_span, ep.num_frames(), framegate::losses::FRAME_INTERVAL_SEC)?;
    let mut out = String::new();
    out.push_str(&format!(
        "episode {}  gt answer {}  span {:?}  evidence stream {}\n",
        ep.id,
        ep.gt_answer,
        ep.gt_span,
        ep.evidence_stream.name()
    ));
    out.push_str(&format!("logits: {:?}\n\n", fwd.logits.values()));
    out.push_str(&format!(
        "# word/object-level attention (hypothesis {}), one matrix per frame\n",
        trace.traced_hypothesis
    ));
    for (stream, mats) in &trace.word {
        for (t, m) in mats.iter().enumerate() {
            out.push_str(&format!("  stream {} frame {t} [{}x{}]:\n", stream.name(), m.rows, m.cols));
            render_matrix(m, &mut out);
        }
    }
    out.push_str("\n# frame-level attention: subtitle/video [T_F x T_F]\n");
    render_matrix(&trace.frame_sv, &mut out);
    if let Some(sd) = &trace.frame_sd {
        out.push_str("# frame-level attention: subtitle/densecap [T_F x T_F]\n");
        render_matrix(sd, &mut out);
    }
    out.push_str("\n# frame gate scores (hypothesis = gt)\n");
    out.push_str("frame  label  local_gate  global_gate\n");
    for t in 0..ep.num_frames() {
        out.push_str(&format!(
            "{t:>5}  {:>5}  {:>10.4}  {:>11.4}\n",
            labels.labels[t], trace.gate_local[t], trace.gate_global[t]
        ));
    }
    Ok(out)
}
