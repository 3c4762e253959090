use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shufflefac::complexity::model_cost;
use shufflefac::dataset::split_recordings;
use shufflefac::frontend::{self, wav_features};
use shufflefac::profiler::{self, attribute, EnergyParams, ProfileOptions};
use shufflefac::sft::{self, DType};
use shufflefac::trainer::{self, evaluate, write_epoch_log};
use shufflefac::{
    AdamConfig, Dataset, FaGate, LogMel, Manifest, ManifestRow, MelConfig, Model, ShuffleFacConfig,
    Tensor, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "shufflefac", version, about = "Compact underwater acoustic classifier: features, training, evaluation and profiling")]
struct Cli {
    /// Seed for weight init, shuffling and splits.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Progress details on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract log-Mel features from WAV files into SFT1 tensors.
    Features(FeaturesArgs),
    /// Print the per-stage architecture table with shapes, params and MACs.
    Summary(ModelArgs),
    /// Per-layer parameter and MAC accounting.
    Count(CountArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Clip-level accuracy, macro F1 and confusion matrix.
    Eval(EvalArgs),
    /// Classify every 3-s clip of a WAV file.
    Classify(ClassifyArgs),
    /// Latency, per-category time attribution and energy estimate.
    Profile(ProfileArgs),
    /// Split a manifest 7:1:2 by recording.
    Split(SplitArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Gate {
    SharedFc,
    ChannelMix,
}

impl From<Gate> for FaGate {
    fn from(g: Gate) -> Self {
        match g {
            Gate::SharedFc => FaGate::SharedFc,
            Gate::ChannelMix => FaGate::ChannelMix,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    /// Channel scale; must be a multiple of 4.
    #[arg(long, default_value_t = 16)]
    gamma: usize,
    /// Kernel of the first convolution.
    #[arg(long, default_value_t = 3)]
    kernel_first: usize,
    /// Kernel of the depthwise convolutions.
    #[arg(long, default_value_t = 3)]
    kernel_dw: usize,
    #[arg(long, value_enum, default_value_t = Gate::SharedFc)]
    gate: Gate,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Apply batch norm before ReLU.
    #[arg(long)]
    bn_before_act: bool,
}

impl ArchArgs {
    fn config(&self) -> ShuffleFacConfig {
        ShuffleFacConfig {
            gamma: self.gamma,
            k_first: self.kernel_first,
            k_dw: self.kernel_dw,
            fa_gate: self.gate.into(),
            n_classes: self.classes,
            bn_before_act: self.bn_before_act,
            ..ShuffleFacConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Describe a saved model instead of building one from the flags.
    #[arg(long, conflicts_with_all = ["gamma", "kernel_first", "kernel_dw", "gate", "classes", "bn_before_act"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Write the JSON report here (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// WAV files; each becomes `<out-dir>/<stem>.sft` holding every clip.
    #[arg(long, num_args = 1.., required_unless_present = "manifest")]
    wav: Vec<PathBuf>,
    /// Featurize every WAV row and write a matching manifest to the output directory.
    #[arg(long, conflicts_with = "wav")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Store 64-bit values instead of 32-bit.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest (`path,label,recording_id`).
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest used for checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Where to write the selected checkpoint.
    #[arg(long, default_value = "model.sfac")]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Stop after this many epochs without improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Save the final parameters instead of the best epoch.
    #[arg(long)]
    last: bool,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the JSON evaluation here (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Saved model; without it a fresh model is built from the flags.
    #[arg(long, conflicts_with_all = ["gamma", "kernel_first", "kernel_dw", "gate", "classes", "bn_before_act"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = 10)]
    warmup: u64,
    /// CPU power for the energy estimate.
    #[arg(long, default_value_t = 10.0)]
    power_watts: f64,
    /// Tensor-manipulation share above which MACs are flagged as a poor latency proxy.
    #[arg(long, default_value_t = profiler::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Input clip; the first 3 s are used. Silence when omitted.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Include log-Mel extraction in the timed region.
    #[arg(long)]
    end_to_end: bool,
    /// Write the JSON report here (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Receives train.csv, val.csv and test.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Bad flag values, as opposed to unreadable or malformed data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<shufflefac::Error>(), Some(shufflefac::Error::Config(_)));
            ExitCode::from(if is_usage { 1 } else { 2 })
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Features(a) => features(cli, a),
        Command::Summary(a) => {
            let model = resolve_model(a.model.as_deref(), &a.arch, cli.seed)?;
            print!("{}", model.summary()?);
            Ok(())
        }
        Command::Count(a) => count(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(a),
        Command::Classify(a) => classify(a),
        Command::Profile(a) => profile(cli, a),
        Command::Split(a) => split(cli, a),
    }
}

fn resolve_model(path: Option<&Path>, arch: &ArchArgs, seed: u64) -> anyhow::Result<Model> {
    match path {
        Some(p) => load_model(p),
        None => {
            let cfg = arch.config();
            cfg.validate().map_err(|e| usage(format!("--gamma/--kernel-*: {e}")))?;
            Ok(Model::build(&cfg, seed)?)
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("--model {}", path.display()))
}

fn read_manifest(flag: &str, path: &Path) -> anyhow::Result<Manifest> {
    Manifest::read_csv(path).with_context(|| format!("{flag} {}", path.display()))
}

fn extractor() -> LogMel {
    LogMel::new(MelConfig::default()).expect("default log-Mel configuration is valid")
}

/// Writes JSON to `dest`, where `-` means stdout.
fn emit_json<T: serde::Serialize>(dest: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if dest == Path::new("-") {
        writeln!(std::io::stdout().lock(), "{text}")?;
    } else {
        fs::write(dest, text + "\n").with_context(|| format!("--json {}", dest.display()))?;
    }
    Ok(())
}

fn to_stdout(dest: &Option<PathBuf>) -> bool {
    dest.as_deref() == Some(Path::new("-"))
}

fn features(cli: &Cli, a: &FeaturesArgs) -> anyhow::Result<()> {
    let ex = extractor();
    let dtype = if a.f64 { DType::F64 } else { DType::F32 };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("--out-dir {}", a.out_dir.display()))?;

    let (inputs, rows) = match &a.manifest {
        Some(m) => {
            let manifest = read_manifest("--manifest", m)?;
            let paths = manifest.rows.iter().map(|r| r.path.clone()).collect();
            (paths, Some(manifest.rows))
        }
        None => (a.wav.clone(), None),
    };

    let mut written = Vec::new();
    let mut out_rows = Vec::new();
    for (i, wav) in inputs.iter().enumerate() {
        let clips = wav_features(wav, &ex).with_context(|| format!("{}", wav.display()))?;
        if clips.is_empty() {
            eprintln!("warning: {} is shorter than one clip; skipped", wav.display());
            continue;
        }
        let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
        let name = format!("{stem}.sft");
        if written.contains(&name) {
            bail!("two inputs map to {name}; rename one of them");
        }
        let refs: Vec<&Tensor> = clips.iter().collect();
        let stack = Tensor::stack(&refs)?;
        sft::write(a.out_dir.join(&name), &stack, dtype)?;
        if cli.verbose {
            eprintln!("{} -> {name} ({} clips)", wav.display(), clips.len());
        }
        if let Some(rows) = &rows {
            out_rows.push(ManifestRow {
                path: PathBuf::from(&name),
                ..rows[i].clone()
            });
        }
        written.push(name);
    }
    if rows.is_some() {
        let path = a.out_dir.join("manifest.csv");
        Manifest::new(out_rows)?.write_csv(&path)?;
        println!("wrote {} feature files and {}", written.len(), path.display());
    } else {
        println!("wrote {} feature files to {}", written.len(), a.out_dir.display());
    }
    Ok(())
}

fn count(cli: &Cli, a: &CountArgs) -> anyhow::Result<()> {
    let model = resolve_model(a.model.model.as_deref(), &a.model.arch, cli.seed)?;
    let report = model_cost(&model);
    if !to_stdout(&a.json) {
        print!("{}", report.to_table());
    }
    if let Some(dest) = &a.json {
        emit_json(dest, &report)?;
    }
    Ok(())
}

fn load_dataset(flag: &str, path: &Path, ex: &LogMel) -> anyhow::Result<Dataset> {
    let manifest = read_manifest(flag, path)?;
    let data = Dataset::load(&manifest, ex).with_context(|| format!("{flag} {}", path.display()))?;
    if data.is_empty() {
        bail!("{flag} {}: no clips", path.display());
    }
    Ok(data)
}

fn train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.arch.config();
    cfg.validate().map_err(|e| usage(format!("--gamma/--kernel-*: {e}")))?;
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(usage(format!("--lr must be >= 0, got {}", a.lr)));
    }
    let ex = extractor();
    let train_set = load_dataset("--manifest", &a.manifest, &ex)?;
    let val_set = a.val.as_deref().map(|v| load_dataset("--val", v, &ex)).transpose()?;
    if cli.verbose {
        eprintln!(
            "{} training clips, {} validation clips",
            train_set.len(),
            val_set.as_ref().map_or(0, Dataset::len)
        );
    }

    let model = Model::build(&cfg, cli.seed)?;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: cli.seed,
        patience: a.patience,
    };
    let verbose = cli.verbose;
    let out = trainer::train(&model, &train_set, val_set.as_ref(), &tc, &mut |row| {
        if verbose {
            eprintln!(
                "epoch {:>3}  train loss {:.6}  val loss {:.6}  val acc {:.4}  val F1 {:.4}",
                row.epoch, row.train_loss, row.val_loss, row.val_acc, row.val_macro_f1
            );
        }
    })?;
    if let Some(log) = &a.log {
        write_epoch_log(log, &out.log).with_context(|| format!("--log {}", log.display()))?;
    }
    let chosen = if a.last { &out.last } else { &out.best };
    chosen.save(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    let last = out.log.last().ok_or_else(|| anyhow!("no epochs were run"))?;
    println!(
        "trained {} epochs; best epoch {}; final train loss {:.6}; saved {}",
        out.log.len(),
        out.best_epoch,
        last.train_loss,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset("--manifest", &a.manifest, &extractor())?;
    let res = evaluate(&model, &data)?;
    if !to_stdout(&a.json) {
        let m = &res.metrics;
        println!("clips     {}", data.len());
        println!("loss      {:.6}", res.loss);
        println!("accuracy  {:.4}", m.accuracy);
        println!("macro F1  {:.4}", m.macro_f1);
        println!("class  precision  recall      f1  support");
        for (i, c) in m.per_class.iter().enumerate() {
            println!("{i:>5}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}", c.precision, c.recall, c.f1, c.support);
        }
        println!("confusion (rows true, columns predicted)");
        for row in &m.confusion {
            println!("{}", row.iter().map(|v| format!("{v:>6}")).collect::<String>());
        }
    }
    if let Some(dest) = &a.json {
        emit_json(dest, &res)?;
    }
    Ok(())
}

fn classify(a: &ClassifyArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let clips = wav_features(&a.wav, &extractor()).with_context(|| format!("--wav {}", a.wav.display()))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, clip) in clips.iter().enumerate() {
        let logits = model.forward(clip)?;
        let logit_str: Vec<String> = logits.data().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{i},{},{}", logits.argmax(), logit_str.join(","))?;
    }
    Ok(())
}

fn profile(cli: &Cli, a: &ProfileArgs) -> anyhow::Result<()> {
    let model = resolve_model(a.model.as_deref(), &a.arch, cli.seed)?;
    let opts = ProfileOptions {
        runs: a.runs as usize,
        warmup: a.warmup as usize,
        energy: EnergyParams {
            p_cpu_watts: a.power_watts,
            ..EnergyParams::default()
        },
    };
    opts.energy.validate().map_err(|e| usage(format!("--power-watts: {e}")))?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("--threshold must be in [0, 1], got {}", a.threshold)));
    }
    let ex = extractor();
    let clip = match &a.wav {
        Some(p) => {
            let (samples, rate) = frontend::read_wav(p).with_context(|| format!("--wav {}", p.display()))?;
            let samples = frontend::resample_to_16k(&samples, rate)?;
            frontend::segment(&samples, "profile")
                .into_iter()
                .next()
                .ok_or_else(|| anyhow!("--wav {}: shorter than one clip", p.display()))?
                .samples
        }
        None => vec![0.0; ex.config().clip_len()],
    };
    let report = if a.end_to_end {
        profiler::profile_end_to_end(&model, &clip, &ex, &opts)?
    } else {
        profiler::profile(&model, &ex.compute(&clip)?, &opts)?
    };
    let verdict = attribute(&report, a.threshold);

    if !to_stdout(&a.json) {
        let f = &report.category_fraction;
        println!("runs {} (warmup {}){}", report.runs, report.warmup, if report.end_to_end { ", end to end" } else { "" });
        println!(
            "latency  mean {:.3} ms  std {:.3}  min {:.3}  max {:.3}",
            report.mean_ms, report.std_ms, report.min_ms, report.max_ms
        );
        println!(
            "time share  core arithmetic {:.1}%  tensor manipulation {:.1}%  other {:.1}%  (attributed {:.1}% of wall time)",
            100.0 * f.core_arithmetic,
            100.0 * f.tensor_manipulation,
            100.0 * f.other,
            100.0 * report.attributed_fraction
        );
        println!(
            "energy  {:.3} uWh per inference at P_cpu = {} W, utilization {}",
            report.energy_uwh, report.energy.p_cpu_watts, report.energy.utilization
        );
        if verdict.macs_unreliable {
            println!(
                "tensor manipulation exceeds {:.0}% of time: MAC counts underestimate latency",
                100.0 * a.threshold
            );
        }
        if cli.verbose {
            let mut ops = report.ops.clone();
            ops.sort_by(|x, y| y.total_ms.total_cmp(&x.total_ms));
            for op in ops {
                println!("  {:<24} {:?}  {:>10.3} ms  {:>6} calls", op.name, op.category, op.total_ms, op.calls);
            }
        }
    }
    if let Some(dest) = &a.json {
        emit_json(dest, &report)?;
    }
    Ok(())
}

fn split(cli: &Cli, a: &SplitArgs) -> anyhow::Result<()> {
    let manifest = read_manifest("--manifest", &a.manifest)?;
    let s = split_recordings(&manifest, cli.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("--out-dir {}", a.out_dir.display()))?;
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let path = a.out_dir.join(format!("{name}.csv"));
        part.write_csv(&path)?;
        println!(
            "{name:<5} {:>4} recordings {:>6} rows -> {}",
            part.recordings().len(),
            part.len(),
            path.display()
        );
    }
    Ok(())
}
