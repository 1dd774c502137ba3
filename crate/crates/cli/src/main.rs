//! `osd`: compress per-layer fine-tuning deltas under a hard bit budget.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osd_core::error::{Error, Result};
use osd_core::matio::{self, LayerSet};
use osd_core::model::{
    apply_delta, compress_model, CompressedLayer, CompressedModel, LayerPayload, Method,
};
use osd_core::osd::{
    importance_from_gradient, ones_importance, sweep_c, EvaluationHook, ImportanceMap,
};
use osd_core::sparsify::LayerRecord;
use osd_core::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "osd",
    version,
    about = "Compress model deltas to the size of a rank-r SVD, bit for bit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a delta into a model directory of per-layer records.
    Compress(CompressArgs),
    /// Rebuild finetuned weights from a model directory plus pretrained weights.
    Decompress(DecompressArgs),
    /// Try every c in 1..=C, score each candidate, keep the best model.
    Sweep(SweepArgs),
    /// Print per-layer size accounting of an existing model directory.
    Report(ReportArgs),
    /// Generate a seeded synthetic instance: weights, delta, gradient, importance.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Pretrained weight container.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Finetuned weight container; with --pretrained, the delta is derived.
    #[arg(long)]
    finetuned: Option<PathBuf>,
    /// Precomputed delta container; alternative to the weight pair.
    #[arg(long)]
    delta: Option<PathBuf>,
    /// Loss-gradient container; importance becomes |grad * finetuned|.
    #[arg(long)]
    grad: Option<PathBuf>,
    /// Ready-made importance container; mutually exclusive with --grad.
    #[arg(long)]
    importance: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// truncsvd, mag, osd, or sparse-only.
    #[arg(long, default_value = "osd")]
    method: String,
    /// Target rank r; the budget is the size of a dense rank-r SVD.
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Rank relaxation for mag and osd (default 1).
    #[arg(long)]
    c: Option<usize>,
    #[command(flatten)]
    input: InputArgs,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct DecompressArgs {
    /// Model directory produced by compress or sweep.
    model: PathBuf,
    /// Pretrained weight container; defaults to the path recorded at compress time.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Output container of rebuilt finetuned weights.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Only osd supports the c sweep.
    #[arg(long, default_value = "osd")]
    method: String,
    /// Target rank r.
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Upper bound of the c sweep.
    #[arg(long = "max-c", default_value_t = 5)]
    max_c: usize,
    #[command(flatten)]
    input: InputArgs,
    /// Shell command scoring a candidate; {} is replaced by a container path.
    #[arg(long = "hook-cmd")]
    hook_cmd: Option<String>,
    /// Model directory for the winning candidate.
    #[arg(long)]
    out: PathBuf,
    /// CSV destination; omitted means stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Model directory to inspect.
    model: PathBuf,
    /// CSV destination; omitted means stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the generated containers.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 256)]
    cols: usize,
    /// Planted rank of the low-rank part.
    #[arg(long = "true-rank", default_value_t = 8)]
    true_rank: usize,
    /// Fraction of entries replaced by large spikes.
    #[arg(long = "spike-frac", default_value_t = 0.01)]
    spike_frac: f64,
    /// Standard deviation of the dense noise floor.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Argument(_) => 2,
                Error::Evaluation { .. } => 4,
                _ => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Loaded input containers; pretrained and finetuned stay around for the
/// hook and gradient paths.
struct Inputs {
    deltas: LayerSet,
    pretrained: Option<LayerSet>,
    pretrained_path: Option<String>,
}

fn load_inputs(input: &InputArgs) -> Result<Inputs> {
    let pretrained = input
        .pretrained
        .as_deref()
        .map(matio::load_layer_set)
        .transpose()?;
    let deltas = if let Some(delta_path) = &input.delta {
        if input.finetuned.is_some() {
            return Err(Error::Argument(
                "--delta and --finetuned are alternatives; pass one of them".into(),
            ));
        }
        let deltas = matio::load_layer_set(delta_path)?;
        if let Some(base) = &pretrained {
            for layer in deltas.layers() {
                let found = base.get(&layer.id).ok_or_else(|| {
                    Error::Structural(format!(
                        "pretrained container has no layer '{}'",
                        layer.id
                    ))
                })?;
                if found.matrix.shape() != layer.matrix.shape() {
                    return Err(Error::Structural(format!(
                        "layer '{}': pretrained is {}x{}, delta is {}x{}",
                        layer.id,
                        found.matrix.rows(),
                        found.matrix.cols(),
                        layer.matrix.rows(),
                        layer.matrix.cols()
                    )));
                }
            }
        }
        deltas
    } else {
        let (Some(_), Some(finetuned_path)) = (&input.pretrained, &input.finetuned) else {
            return Err(Error::Argument(
                "pass --delta, or both --pretrained and --finetuned".into(),
            ));
        };
        let finetuned = matio::load_layer_set(finetuned_path)?;
        matio::delta(
            &finetuned,
            pretrained.as_ref().expect("loaded with the flag present"),
        )?
    };
    Ok(Inputs {
        deltas,
        pretrained,
        pretrained_path: input
            .pretrained
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned()),
    })
}

/// One importance map per delta layer, from --importance, --grad, or ones.
fn build_importance(input: &InputArgs, deltas: &LayerSet) -> Result<Vec<ImportanceMap>> {
    if input.importance.is_some() && input.grad.is_some() {
        return Err(Error::Argument(
            "--importance and --grad are alternatives; pass one of them".into(),
        ));
    }
    if let Some(path) = &input.importance {
        let container = matio::load_layer_set(path)?;
        return deltas
            .layers()
            .iter()
            .map(|layer| {
                let found = container.get(&layer.id).ok_or_else(|| {
                    Error::Structural(format!(
                        "importance container has no layer '{}'",
                        layer.id
                    ))
                })?;
                if found.matrix.shape() != layer.matrix.shape() {
                    return Err(Error::Structural(format!(
                        "layer '{}': importance is {}x{}, delta is {}x{}",
                        layer.id,
                        found.matrix.rows(),
                        found.matrix.cols(),
                        layer.matrix.rows(),
                        layer.matrix.cols()
                    )));
                }
                ImportanceMap::new(found.matrix.clone())
            })
            .collect();
    }
    if let Some(path) = &input.grad {
        let finetuned_path = input.finetuned.as_deref().ok_or_else(|| {
            Error::Argument(
                "--grad needs --finetuned to supply the weights the gradient pairs with"
                    .into(),
            )
        })?;
        let grads = matio::load_layer_set(path)?;
        let weights = matio::load_layer_set(finetuned_path)?;
        return deltas
            .layers()
            .iter()
            .map(|layer| {
                let g = grads.get(&layer.id).ok_or_else(|| {
                    Error::Structural(format!(
                        "gradient container has no layer '{}'",
                        layer.id
                    ))
                })?;
                let w = weights.get(&layer.id).ok_or_else(|| {
                    Error::Structural(format!(
                        "finetuned container has no layer '{}'",
                        layer.id
                    ))
                })?;
                importance_from_gradient(&g.matrix, &w.matrix)
            })
            .collect();
    }
    deltas
        .layers()
        .iter()
        .map(|layer| ones_importance(layer.matrix.rows(), layer.matrix.cols()))
        .collect()
}

/// Per-layer bits-vs-budget lines; every line re-checks the budget and a
/// violation aborts instead of printing.
fn emit_stats_lines(model: &CompressedModel, mut out: impl Write) -> Result<()> {
    let mut payload_total = 0u64;
    let mut file_total = 0u64;
    for stats in model.layer_stats()? {
        if stats.payload_bits > stats.budget_bits {
            return Err(Error::Structural(format!(
                "layer '{}' payload {} bits exceeds budget {} bits",
                stats.id, stats.payload_bits, stats.budget_bits
            )));
        }
        payload_total += stats.payload_bits;
        file_total += stats.file_bits;
        writeln!(
            out,
            "layer '{}' [{}, {}x{}]: {} / {} payload bits, {} file bits",
            stats.id,
            stats.kind,
            stats.rows,
            stats.cols,
            stats.payload_bits,
            stats.budget_bits,
            stats.file_bits
        )?;
    }
    writeln!(
        out,
        "total: {payload_total} payload bits, {file_total} file bits across {} layers",
        model.layers().len()
    )?;
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    osd_core::init_thread_pool(args.threads)?;
    let method: Method = args.method.parse()?;
    let takes_c = matches!(method, Method::Mag | Method::Osd);
    if args.c.is_some() && !takes_c {
        return Err(Error::Argument(format!(
            "--c does not apply to method {method}"
        )));
    }
    if method != Method::Osd
        && (args.input.grad.is_some() || args.input.importance.is_some())
    {
        return Err(Error::Argument(format!(
            "--grad/--importance only apply to method osd, not {method}"
        )));
    }
    let c = args.c.unwrap_or(1);
    let inputs = load_inputs(&args.input)?;
    let importance = if method == Method::Osd {
        Some(build_importance(&args.input, &inputs.deltas)?)
    } else {
        None
    };
    let model = compress_model(
        &inputs.deltas,
        importance.as_deref(),
        method,
        args.rank,
        c,
        inputs.pretrained_path,
    )?;
    model.save(&args.out)?;
    emit_stats_lines(&model, std::io::stdout().lock())?;
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    osd_core::init_thread_pool(args.threads)?;
    let model = CompressedModel::load(&args.model)?;
    let pretrained_path = match (&args.pretrained, &model.pretrained) {
        (Some(p), _) => p.clone(),
        (None, Some(recorded)) => PathBuf::from(recorded),
        (None, None) => {
            return Err(Error::Argument(
                "pass --pretrained; the model records no pretrained path".into(),
            ))
        }
    };
    let pretrained = matio::load_layer_set(&pretrained_path)?;
    let deltas = model.reconstruct_deltas()?;
    let finetuned = apply_delta(&pretrained, &deltas)?;
    matio::save_layer_set(&finetuned, &args.out)?;
    println!(
        "wrote {} layers to {}",
        finetuned.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    osd_core::init_thread_pool(args.threads)?;
    let method: Method = args.method.parse()?;
    if method != Method::Osd {
        return Err(Error::Argument(format!(
            "sweep only supports method osd, not {method}"
        )));
    }
    let inputs = load_inputs(&args.input)?;
    let importance = build_importance(&args.input, &inputs.deltas)?;
    let hook = match &args.hook_cmd {
        Some(command) => {
            let pretrained = inputs.pretrained.as_ref().ok_or_else(|| {
                Error::Argument(
                    "--hook-cmd needs --pretrained to assemble candidate weights".into(),
                )
            })?;
            EvaluationHook::External {
                command: command.clone(),
                pretrained,
            }
        }
        None => EvaluationHook::Proxy,
    };
    let result = sweep_c(&inputs.deltas, &importance, args.rank, args.max_c, &hook)?;

    let mut csv = String::from("c,score,total_bits,header_bits,wall_ms\n");
    for row in &result.per_c {
        let score = row.score.map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.c, score, row.total_bits, row.header_bits, row.wall_ms
        ));
    }
    // Keep stdout parseable when it carries the CSV itself.
    let mut prose: Box<dyn Write> = match &args.csv {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })?;
            Box::new(std::io::stdout().lock())
        }
        None => {
            print!("{csv}");
            Box::new(std::io::stderr().lock())
        }
    };

    let best = result.best();
    let layers = inputs
        .deltas
        .layers()
        .iter()
        .zip(&best.pairs)
        .map(|(layer, pair)| {
            Ok(CompressedLayer {
                id: layer.id.clone(),
                payload: LayerPayload::Pair(LayerRecord::new(
                    pair.clone(),
                    args.rank as u32,
                    best.c,
                )?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = CompressedModel::new(
        Method::Osd,
        args.rank as u32,
        best.c,
        inputs.pretrained_path,
        layers,
    )?;
    model.save(&args.out)?;
    writeln!(
        prose,
        "selected c={} (score {}) -> {}",
        best.c,
        best.score.expect("the winning candidate scored"),
        args.out.display()
    )?;
    for row in &result.per_c {
        if let Some(reason) = &row.hook_error {
            writeln!(prose, "c={} hook failed: {reason}", row.c)?;
        }
    }
    emit_stats_lines(&model, prose)?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let model = CompressedModel::load(&args.model)?;
    let mut csv = String::from(
        "layer,kind,rows,cols,payload_bits,header_bits,padding_bits,file_bits,budget_bits\n",
    );
    for stats in model.layer_stats()? {
        if stats.payload_bits > stats.budget_bits {
            return Err(Error::Structural(format!(
                "layer '{}' payload {} bits exceeds budget {} bits",
                stats.id, stats.payload_bits, stats.budget_bits
            )));
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            csv_field(&stats.id),
            stats.kind,
            stats.rows,
            stats.cols,
            stats.payload_bits,
            stats.header_bits,
            stats.padding_bits,
            stats.file_bits,
            stats.budget_bits
        ));
    }
    match &args.csv {
        Some(path) => fs::write(path, &csv).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Quotes a CSV field when it contains delimiters; layer ids are free text.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        layers: args.layers,
        rows: args.rows,
        cols: args.cols,
        true_rank: args.true_rank,
        spike_frac: args.spike_frac,
        noise: args.noise,
    };
    let out = generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.out.display())))
    })?;
    let importance_layers = out
        .delta
        .layers()
        .iter()
        .zip(&out.importance)
        .map(|(layer, z)| matio::Layer {
            id: layer.id.clone(),
            matrix: z.matrix().clone(),
        })
        .collect();
    let importance_set = LayerSet::new(importance_layers)?;
    let files: [(&str, &LayerSet); 5] = [
        ("pretrained.sdt", &out.pretrained),
        ("finetuned.sdt", &out.finetuned),
        ("delta.sdt", &out.delta),
        ("gradient.sdt", &out.gradient),
        ("importance.sdt", &importance_set),
    ];
    for (name, set) in files {
        matio::save_layer_set(set, &args.out.join(name))?;
    }
    let manifest = matio::Manifest {
        pretrained: Some("pretrained.sdt".into()),
        finetuned: Some("finetuned.sdt".into()),
        delta: Some("delta.sdt".into()),
        importance: Some("importance.sdt".into()),
        gradient: Some("gradient.sdt".into()),
    };
    manifest.save(&args.out.join("manifest.json"))?;
    println!(
        "wrote {} layer(s) of {}x{} to {}",
        cfg.layers,
        cfg.rows,
        cfg.cols,
        args.out.display()
    );
    Ok(())
}
