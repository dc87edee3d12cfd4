use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use uirate::data::{self, ManifestSchema, Split};
use uirate::image::{self, ConvShape, ImageEncoder};
use uirate::metrics::{evaluate, evaluate_clamped, fmt_metric, MetricsReport};
use uirate::text::distill::{run_distill_demo, write_distill_csv, DistillDemoConfig};
use uirate::train::{self, AblationSpec, Checkpoint, LossKind, ModelConfig, TargetScale};
use uirate::{ActivationKind, Error};

#[derive(Parser)]
#[command(name = "uirate", version, about = "Screenshot + metadata app-rating regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a rating model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Write per-sample predictions from a checkpoint.
    Predict(PredictArgs),
    /// Run an activation, ablation or dropout suite.
    Ablate(AblateArgs),
    /// Standard vs depthwise-separable multiply-accumulate counts.
    ConvCost(ConvCostArgs),
    /// Category counts and rating histogram of a manifest.
    DataStats(DataStatsArgs),
    /// Generate a synthetic screenshot corpus with a known rating function.
    GenSynthetic(GenArgs),
    /// Toy teacher-to-student distillation with the three-part loss.
    DistillDemo(DistillArgs),
}

#[derive(Args, Clone)]
struct Output {
    /// Also write machine-readable results to this JSON file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Leave the timestamp out of JSON output.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Clone)]
struct Hyper {
    /// Configuration preset: desk or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    dropout: Option<f64>,
    /// Activation after fusion: swish, mish, gelu, golu, sigmoid, hswish, identity.
    #[arg(long)]
    activation: Option<String>,
    /// Training loss: mse or mae.
    #[arg(long)]
    loss: Option<String>,
    /// Target scale: raw or minmax.
    #[arg(long)]
    target_scale: Option<String>,
    /// Text encoder: transformer or simple-recurrent.
    #[arg(long)]
    text_encoder: Option<String>,
}

impl Hyper {
    fn config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.dropout {
            c.fusion.dropout = v;
        }
        if let Some(v) = &self.activation {
            c.fusion.activation = v.parse::<ActivationKind>()?;
        }
        if let Some(v) = &self.loss {
            c.loss = v.parse::<LossKind>()?;
        }
        if let Some(v) = &self.target_scale {
            c.target_scale = v.parse::<TargetScale>()?;
        }
        if let Some(v) = &self.text_encoder {
            c.text.kind = v.parse()?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint.json and history.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split to score: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Clamp predictions to the rating range before scoring.
    #[arg(long)]
    clamp: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Predictions CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clamp: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Named suite: activations, components or dropout.
    #[arg(long, conflicts_with = "spec")]
    suite: Option<String>,
    /// Individual variants as axis=value (repeatable).
    #[arg(long)]
    spec: Vec<String>,
    /// Table CSV (stdout text table when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ConvCostArgs {
    #[arg(long)]
    dk: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    df: Option<usize>,
    /// Per-layer costs of the image encoder for a preset instead.
    #[arg(long, conflicts_with_all = ["dk", "m", "n", "df"])]
    preset: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct DataStatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Half-width of uniform rating noise.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    noise: f64,
    /// Side length of the generated PNGs.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    /// Loss curve CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

/// Write to stdout, surfacing a closed pipe as an error instead of a panic.
fn emit(text: impl std::fmt::Display) -> Result<()> {
    let mut out = std::io::stdout().lock();
    write!(out, "{text}")?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ConvCost(a) => cmd_conv_cost(a),
        Command::DataStats(a) => cmd_data_stats(a),
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::DistillDemo(a) => cmd_distill(a),
    }
}

fn write_json(out: &Output, command: &str, mut body: Value) -> Result<()> {
    let Some(path) = &out.json else { return Ok(()) };
    if let Value::Object(map) = &mut body {
        map.insert("command".into(), json!(command));
        if !out.no_timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            map.insert("generated_at_unix".into(), json!(secs));
        }
    }
    let text = serde_json::to_string_pretty(&body)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path, seed: u64) -> Result<(data::Manifest, data::LoadReport)> {
    let (m, report) = data::load_manifest(path, ManifestSchema::from_path(path), seed)?;
    if report.rejected > 0 {
        eprintln!(
            "manifest: {} rows, {} accepted, {} rejected {:?}",
            report.input_rows, report.accepted, report.rejected, report.reasons
        );
    }
    Ok((m, report))
}

fn print_metrics(label: &str, m: &MetricsReport) {
    let [mae, mse, rmse, r2, r] = m.columns().map(fmt_metric);
    println!("{label}: n={} MAE {mae} MSE {mse} RMSE {rmse} R2 {r2} Pearson-r {r}", m.n);
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.hyper.config()?;
    let (manifest, report) = load(&a.manifest, cfg.seed)?;
    let outcome = train::train_with(&manifest, &cfg, |r| {
        let m = &r.metrics;
        eprintln!(
            "epoch {:>3} {:<5} loss {:.6} mae {:.4} r2 {}",
            r.epoch,
            r.split.name(),
            r.loss,
            m.mae,
            fmt_metric(m.r2)
        );
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ck_path = a.out.join("checkpoint.json");
    outcome.checkpoint.save(&ck_path)?;
    let hist_path = a.out.join("history.csv");
    let file = fs::File::create(&hist_path).with_context(|| format!("creating {}", hist_path.display()))?;
    train::write_history_csv(&outcome.history, file)?;
    if outcome.val_missing {
        eprintln!("note: validation split has fewer than two samples; best epoch chosen on training MAE");
    }
    println!(
        "best epoch {} -> {} ({} history rows in {})",
        outcome.best_epoch,
        ck_path.display(),
        outcome.history.len(),
        hist_path.display()
    );
    write_json(
        &a.output,
        "train",
        json!({
            "config": cfg,
            "load_report": report,
            "best_epoch": outcome.best_epoch,
            "val_missing": outcome.val_missing,
            "history": outcome.history,
        }),
    )
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(Error::Config(format!("unknown split `{other}`")).into()),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let (manifest, _) = load(&a.manifest, ck.config.seed)?;
    let idx: Vec<usize> = match split {
        Some(s) => manifest.indices(s),
        None => (0..manifest.len()).collect(),
    };
    let y_hat = predict_indices(&model, &manifest, &idx)?;
    let y: Vec<f64> = idx.iter().map(|&i| manifest.samples[i].avg_rating).collect();
    let report = if a.clamp {
        evaluate_clamped(&y, &y_hat, data::MIN_RATING, data::MAX_RATING)?
    } else {
        evaluate(&y, &y_hat)?
    };
    print_metrics(&a.split, &report);
    write_json(&a.output, "eval", json!({ "split": a.split, "metrics": report }))
}

fn predict_indices(model: &train::RatingModel, m: &data::Manifest, idx: &[usize]) -> Result<Vec<f64>> {
    let size = model.config().image.input_size;
    let paths: Vec<PathBuf> = idx.iter().map(|&i| m.resolve(&m.samples[i])).collect();
    let images = data::preprocess_batch(&paths, size)
        .into_iter()
        .collect::<uirate::Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(idx.len());
    for (chunk, imgs) in idx.chunks(32).zip(images.chunks(32)) {
        let refs: Vec<_> = imgs.iter().collect();
        let texts: Vec<String> = chunk.iter().map(|&i| m.samples[i].text()).collect();
        out.extend(model.predict(&refs, &texts)?);
    }
    Ok(out)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let (manifest, _) = load(&a.manifest, ck.config.seed)?;
    let idx: Vec<usize> = (0..manifest.len()).collect();
    let mut preds = predict_indices(&model, &manifest, &idx)?;
    if a.clamp {
        for p in &mut preds {
            *p = p.clamp(data::MIN_RATING, data::MAX_RATING);
        }
    }
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["image_path", "split", "avg_rating", "predicted"])?;
    for (i, p) in preds.iter().enumerate() {
        let s = &manifest.samples[i];
        w.write_record([
            s.image_path.clone(),
            manifest.splits[i].name().to_string(),
            s.avg_rating.to_string(),
            p.to_string(),
        ])?;
    }
    w.flush()?;
    let rows: Vec<Value> = preds
        .iter()
        .zip(&manifest.samples)
        .map(|(p, s)| json!({ "image_path": s.image_path, "predicted": p }))
        .collect();
    write_json(&a.output, "predict", json!({ "predictions": rows }))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.hyper.config()?;
    let specs = match (&a.suite, a.spec.is_empty()) {
        (Some(s), _) => train::suite(s)?,
        (None, false) => a.spec.iter().map(|s| AblationSpec::parse(s)).collect::<uirate::Result<_>>()?,
        (None, true) => return Err(Error::Config("pass --suite or at least one --spec".into()).into()),
    };
    for s in &specs {
        s.apply(&cfg)?;
    }
    let (manifest, _) = load(&a.manifest, cfg.seed)?;
    let table = train::run_ablation(&specs, &manifest, &cfg)?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            table.write_csv(f)?;
            emit(&table)?;
        }
        None => emit(&table)?,
    }
    write_json(&a.output, "ablate", json!({ "config": cfg, "table": table }))
}

fn cmd_conv_cost(a: ConvCostArgs) -> Result<()> {
    if let Some(p) = &a.preset {
        let cfg = ModelConfig::preset(p)?;
        let enc = ImageEncoder::new(cfg.image)?;
        println!("{:<32} {:>5} {:>5} {:>5} {:>3} {:>14}", "layer", "df", "m", "n", "dk", "macs");
        let mut rows = Vec::new();
        for l in enc.layer_costs() {
            let s = l.shape;
            println!("{:<32} {:>5} {:>5} {:>5} {:>3} {:>14}", l.name, s.df, s.m, s.n, s.dk, l.macs());
            rows.push(json!({ "layer": l.name, "kind": l.kind, "shape": s, "macs": l.macs() }));
        }
        println!("total {}", enc.analytic_macs());
        return write_json(&a.output, "conv-cost", json!({ "layers": rows, "total_macs": enc.analytic_macs() }));
    }
    let (Some(dk), Some(m), Some(n), Some(df)) = (a.dk, a.m, a.n, a.df) else {
        return Err(Error::Config("conv-cost needs --dk --m --n --df, or --preset".into()).into());
    };
    let s = ConvShape::new(df, m, n, dk)?;
    let std_cost = image::standard_conv_cost(s);
    let sep_cost = image::separable_conv_cost(s);
    let ratio = image::cost_reduction_ratio(s);
    println!("{:>4} {:>6} {:>6} {:>6} {:>14} {:>14} {:>10}", "dk", "m", "n", "df", "standard", "separable", "ratio");
    println!("{dk:>4} {m:>6} {n:>6} {df:>6} {std_cost:>14} {sep_cost:>14} {ratio:>10.6}");
    write_json(
        &a.output,
        "conv-cost",
        json!({
            "shape": s,
            "standard_macs": std_cost,
            "separable_macs": sep_cost,
            "ratio": ratio,
            "closed_form_ratio": image::closed_form_ratio(s),
        }),
    )
}

fn cmd_data_stats(a: DataStatsArgs) -> Result<()> {
    let (manifest, report) = load(&a.manifest, 0)?;
    if manifest.is_empty() {
        return Err(Error::Contract("manifest has no valid rows".into()).into());
    }
    let stats = data::dataset_stats(&manifest);
    emit(&stats)?;
    write_json(&a.output, "data-stats", json!({ "load_report": report, "stats": stats }))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = data::SyntheticConfig {
        n: a.n,
        seed: a.seed,
        noise: a.noise,
        image_size: a.size,
    };
    let (m, samples) = data::generate_synthetic(&cfg, &a.out)?;
    println!("wrote {} samples to {}", m.len(), a.out.join("manifest.csv").display());
    let truth: Vec<Value> = samples
        .iter()
        .map(|s| json!({ "image_path": s.sample.image_path, "features": s.features, "true_rating": s.true_rating }))
        .collect();
    write_json(&a.output, "gen-synthetic", json!({ "config": cfg, "samples": truth }))
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let mut cfg = DistillDemoConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let records = run_distill_demo(&cfg)?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_distill_csv(&records, f)?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                println!("total loss {:.6} -> {:.6} over {} steps", first.total, last.total, records.len());
            }
        }
        None => write_distill_csv(&records, std::io::stdout())?,
    }
    write_json(&a.output, "distill-demo", json!({ "config": cfg, "records": records }))
}
