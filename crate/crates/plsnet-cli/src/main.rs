//! Batch command-line surface for the volumetric segmentation kit.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (including
//! unreadable inputs), 1 for runtime failures. Every run echoes its resolved
//! configuration on stderr so results can be reproduced from logs alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use plsnet::analysis::network_cost_report;
use plsnet::blocks::{
    load_checkpoint, plsnet_infer, plsnet_infer_with_taps, save_checkpoint, tap_names,
    NetworkConfig, PlsNetParams,
};
use plsnet::metrics::per_lobe_report;
use plsnet::phantom::{generate_phantom, PhantomSpec};
use plsnet::tensor::Tensor4;
use plsnet::train::{fit, history_to_csv, StopReason, TrainConfig, TrainSample};
use plsnet::volume::{
    argmax_labels, load_volume, preprocess_intensity, preprocess_labels, resample_labels_to_native,
    save_volume, Volume,
};

#[derive(Parser)]
#[command(
    name = "plsnet",
    version,
    about = "Volumetric segmentation kit: cost analysis, phantom data, training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DumpFormat {
    Pgm,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Print the MAC/parameter/receptive-field audit of a configuration
    Analyze {
        /// Network configuration JSON; the built-in default when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input extents as `H,W,D` (or one value for a cube)
        #[arg(long, default_value = "384,384,384")]
        input_size: String,
        /// Emit the full report as JSON on stdout
        #[arg(long)]
        json: bool,
    },
    /// Generate synthetic lobe phantoms (image + reference labels)
    Phantom {
        /// Phantom spec JSON; the built-in default when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Case i uses seed `seed + i`
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on (image, labels) volume pairs
    Train {
        /// JSON list of training cases (a phantom manifest works directly)
        #[arg(long)]
        train: PathBuf,
        /// JSON list of validation cases
        #[arg(long)]
        val: PathBuf,
        /// Network configuration JSON; the built-in default when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; the loss history lands next to it as CSV
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        max_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segment one volume with a trained checkpoint
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output label volume (written on the input's native grid)
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted labels against reference labels per lobe
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump the feature maps of one layer as per-channel 2D slices
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Layer name (see the error message for the available names)
        #[arg(long)]
        layer: String,
        /// Depth index of the slice to dump
        #[arg(long, default_value_t = 0)]
        slice: usize,
        /// Output directory, one file per channel
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DumpFormat::Pgm)]
        format: DumpFormat,
    },
}

/// Errors carrying their exit code class.
enum CliError {
    /// Bad flags, unreadable/malformed inputs, bad configuration: exit 2.
    Usage(String),
    /// Failures after inputs were accepted: exit 1.
    Runtime(String),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Analyze { config, input_size, json } => cmd_analyze(config, &input_size, json),
        Command::Phantom { spec, out, count, seed } => cmd_phantom(spec, &out, count, seed),
        Command::Train { train, val, config, out, max_epochs, seed } => {
            cmd_train(&train, &val, config, &out, max_epochs, seed)
        }
        Command::Infer { ckpt, input, out } => cmd_infer(&ckpt, &input, &out),
        Command::Evaluate { pred, reference, csv } => cmd_evaluate(&pred, &reference, csv.as_deref()),
        Command::Inspect { ckpt, input, layer, slice, out, format } => {
            cmd_inspect(&ckpt, &input, &layer, slice, &out, format)
        }
    }
}

fn parse_dims(text: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("bad extent '{s}' in --input-size")))
    };
    match parts.as_slice() {
        [one] => {
            let e = parse(one)?;
            Ok([e, e, e])
        }
        [h, w, d] => Ok([parse(h)?, parse(w)?, parse(d)?]),
        _ => Err(CliError::Usage(format!(
            "--input-size expects `H,W,D` or one extent, got '{text}'"
        ))),
    }
}

fn load_net_config(path: Option<&Path>) -> CliResult<NetworkConfig> {
    let cfg = match path {
        None => NetworkConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", p.display())))?
        }
    };
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn echo_config(label: &str, value: &impl serde::Serialize) {
    eprintln!(
        "# {label}: {}",
        serde_json::to_string(value).unwrap_or_else(|_| "<unprintable>".into())
    );
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn cmd_analyze(config: Option<PathBuf>, input_size: &str, json: bool) -> CliResult<()> {
    let cfg = load_net_config(config.as_deref())?;
    let dims = parse_dims(input_size)?;
    echo_config("config", &cfg);
    eprintln!("# input: {}x{}x{}", dims[0], dims[1], dims[2]);

    let report = network_cost_report(&cfg, dims).map_err(CliError::usage)?;
    if json {
        #[derive(serde::Serialize)]
        struct Doc<'a> {
            config: &'a NetworkConfig,
            report: &'a plsnet::analysis::CostReport,
        }
        let doc = Doc { config: &cfg, report: &report };
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).map_err(CliError::runtime)?
        );
        return Ok(());
    }

    println!(
        "{:<28} {:>12} {:>14} {:>12} {:>8}",
        "layer", "kind", "macs", "params", "rf"
    );
    for l in &report.layers {
        let kind = serde_json::to_value(l.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        println!(
            "{:<28} {:>12} {:>14} {:>12} {:>8}",
            l.name,
            kind,
            l.macs,
            l.params,
            if l.rf.fract() == 0.0 {
                format!("{}", l.rf as u64)
            } else {
                format!("{:.1}", l.rf)
            }
        );
    }
    println!();
    println!("total MACs:          {:>16}  ({:.2} B)", report.total_macs, report.total_macs as f64 / 1e9);
    println!("total conv params:   {:>16}  ({:.3} M)", report.total_params, report.total_params as f64 / 1e6);
    println!("trainable params:    {:>16}  ({:.3} M)", report.trainable_params, report.trainable_params as f64 / 1e6);
    println!("all-regular twin:    {:>16} MACs, {} params", report.baseline_macs, report.baseline_params);
    println!(
        "separable reduction: {:>15.2}x MACs, {:.2}x params",
        report.macs_reduction, report.params_reduction
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, Deserialize)]
struct ManifestCase {
    image: String,
    labels: String,
    seed: u64,
}

#[derive(serde::Serialize, Deserialize)]
struct Manifest {
    cases: Vec<ManifestCase>,
}

fn cmd_phantom(spec: Option<PathBuf>, out: &Path, count: usize, seed: u64) -> CliResult<()> {
    let base = match &spec {
        None => PhantomSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed spec {}: {e}", p.display())))?
        }
    };
    echo_config("phantom-spec", &base);
    eprintln!("# count: {count}, base seed: {seed}");

    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;

    let mut manifest = Manifest { cases: Vec::with_capacity(count) };
    for i in 0..count {
        let case_seed = seed + i as u64;
        let spec_i = PhantomSpec { seed: case_seed, ..base.clone() };
        let (image, labels) = generate_phantom(&spec_i).map_err(CliError::usage)?;
        let image_name = format!("case_{i:03}_image");
        let labels_name = format!("case_{i:03}_labels");
        save_volume(&out.join(&image_name), &image).map_err(CliError::runtime)?;
        save_volume(&out.join(&labels_name), &Volume::from_labeled(&labels))
            .map_err(CliError::runtime)?;
        manifest.cases.push(ManifestCase {
            image: format!("{image_name}.json"),
            labels: format!("{labels_name}.json"),
            seed: case_seed,
        });
    }
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?,
    )
    .map_err(CliError::runtime)?;
    println!(
        "wrote {count} phantom case(s) ({} volumes) and manifest.json to {}",
        2 * count,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_case_list(path: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read list {}: {e}", path.display())))?;
    let cases: Vec<ManifestCase> = match serde_json::from_str::<Manifest>(&text) {
        Ok(m) => m.cases,
        Err(_) => serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed case list {}: {e}", path.display())))?,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(cases
        .into_iter()
        .map(|c| (base.join(c.image), base.join(c.labels)))
        .collect())
}

fn load_samples(list: &Path) -> CliResult<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for (image_path, labels_path) in load_case_list(list)? {
        let image = load_volume(&image_path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", image_path.display())))?;
        let labels = load_volume(&labels_path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", labels_path.display())))?;
        let input = preprocess_intensity(&image).map_err(CliError::usage)?;
        let target = preprocess_labels(&labels).map_err(CliError::usage)?;
        samples.push(TrainSample { input, target });
    }
    Ok(samples)
}

fn cmd_train(
    train: &Path,
    val: &Path,
    config: Option<PathBuf>,
    out: &Path,
    max_epochs: usize,
    seed: u64,
) -> CliResult<()> {
    let net_cfg = load_net_config(config.as_deref())?;
    let train_cfg = TrainConfig { max_epochs, seed, ..TrainConfig::default() };
    echo_config("config", &net_cfg);
    eprintln!(
        "# recipe: lr {}, beta1 {}, beta2 {}, patience {}, max_epochs {}, seed {}, init sigma {}",
        train_cfg.lr,
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.patience,
        train_cfg.max_epochs,
        train_cfg.seed,
        train_cfg.init_sigma
    );

    let train_set = load_samples(train)?;
    if train_set.is_empty() {
        return Err(CliError::Usage("training list is empty".into()));
    }
    let val_set = load_samples(val)?;
    if val_set.is_empty() {
        return Err(CliError::Usage("validation list is empty".into()));
    }
    println!("training on {} volume(s), validating on {}", train_set.len(), val_set.len());

    let result = fit(&train_set, &val_set, &net_cfg, &train_cfg).map_err(CliError::runtime)?;

    save_checkpoint(out, &result.params).map_err(CliError::runtime)?;
    let csv_path = loss_csv_path(out);
    std::fs::write(&csv_path, history_to_csv(&result.history)).map_err(CliError::runtime)?;

    let last = result.history.last().expect("at least one epoch");
    println!(
        "stopped after epoch {} ({}); best validation loss {:.6} at epoch {}",
        last.epoch,
        match result.stop_reason {
            StopReason::Patience => "no validation improvement within patience",
            StopReason::MaxEpochs => "max epochs reached",
        },
        result.history[result.best_epoch - 1].val_loss,
        result.best_epoch
    );
    println!("checkpoint: {}", out.display());
    println!("loss history: {}", csv_path.display());
    Ok(())
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}_loss.csv"))
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn load_params(ckpt: &Path) -> CliResult<PlsNetParams> {
    load_checkpoint(ckpt).map_err(|e| CliError::Usage(format!("{}: {e}", ckpt.display())))
}

fn cmd_infer(ckpt: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let t0 = Instant::now();
    let params = load_params(ckpt)?;
    echo_config("config", &params.cfg);

    let native = load_volume(input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
    let tensor = preprocess_intensity(&native).map_err(CliError::usage)?;
    let probs = plsnet_infer(&tensor, &params).map_err(CliError::runtime)?;
    let labels_1mm = argmax_labels(&probs);
    let labels_native = resample_labels_to_native(&labels_1mm, &native.header);
    save_volume(out, &Volume::from_labeled(&labels_native)).map_err(CliError::runtime)?;

    println!(
        "segmented {} -> {} in {:.2} s",
        input.display(),
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(pred: &Path, reference: &Path, csv: Option<&Path>) -> CliResult<()> {
    let p = load_volume(pred)
        .and_then(|v| v.to_labeled())
        .map_err(|e| CliError::Usage(format!("{}: {e}", pred.display())))?;
    let r = load_volume(reference)
        .and_then(|v| v.to_labeled())
        .map_err(|e| CliError::Usage(format!("{}: {e}", reference.display())))?;
    eprintln!("# pred: {}, ref: {}", pred.display(), reference.display());

    let report = per_lobe_report(&p, &r).map_err(CliError::usage)?;

    println!("{:<8} {:>8} {:>10}", "lobe", "DSC", "ASD(mm)");
    let mut csv_text = String::from("lobe,dsc,asd_mm\n");
    for row in &report.rows {
        println!("{:<8} {:>8.4} {:>10.4}", row.name, row.dsc, row.asd_mm);
        csv_text.push_str(&format!("{},{:.4},{:.4}\n", row.name, row.dsc, row.asd_mm));
    }
    println!("{:<8} {:>8.4} {:>10.4}", "overall", report.mean_dsc, report.mean_asd_mm);
    csv_text.push_str(&format!("overall,{:.4},{:.4}\n", report.mean_dsc, report.mean_asd_mm));

    if let Some(path) = csv {
        std::fs::write(path, csv_text).map_err(CliError::runtime)?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn cmd_inspect(
    ckpt: &Path,
    input: &Path,
    layer: &str,
    slice: usize,
    out: &Path,
    format: DumpFormat,
) -> CliResult<()> {
    let params = load_params(ckpt)?;
    echo_config("config", &params.cfg);

    let names = tap_names(&params.cfg);
    if !names.iter().any(|n| n == layer) {
        return Err(CliError::Usage(format!(
            "unknown layer '{layer}'; available layers:\n  {}",
            names.join("\n  ")
        )));
    }

    let native = load_volume(input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
    let tensor = preprocess_intensity(&native).map_err(CliError::usage)?;

    let mut captured: Option<Tensor4> = None;
    plsnet_infer_with_taps(&tensor, &params, &mut |name, t| {
        if name == layer {
            captured = Some(t.clone());
        }
    })
    .map_err(CliError::runtime)?;
    let maps = captured.expect("tap name was validated against the network");

    let s = maps.shape();
    if slice >= s.d {
        return Err(CliError::Usage(format!(
            "slice {slice} out of range: layer '{layer}' has depth {}",
            s.d
        )));
    }

    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let safe_name = layer.replace('.', "_");
    for c in 0..s.c {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for h in 0..s.h {
            for w in 0..s.w {
                let v = maps.get(h, w, slice, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let path = match format {
            DumpFormat::Pgm => out.join(format!("{safe_name}_c{c:02}.pgm")),
            DumpFormat::Csv => out.join(format!("{safe_name}_c{c:02}.csv")),
        };
        match format {
            DumpFormat::Pgm => {
                let mut bytes = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
                for h in 0..s.h {
                    for w in 0..s.w {
                        let v = maps.get(h, w, slice, c);
                        let g = if hi > lo {
                            ((v - lo) / (hi - lo) * 255.0).round() as u8
                        } else {
                            128 // constant channel renders mid-gray
                        };
                        bytes.push(g);
                    }
                }
                std::fs::write(&path, bytes).map_err(CliError::runtime)?;
            }
            DumpFormat::Csv => {
                let mut text = String::new();
                for h in 0..s.h {
                    let row: Vec<String> = (0..s.w)
                        .map(|w| format!("{:.6}", maps.get(h, w, slice, c)))
                        .collect();
                    text.push_str(&row.join(","));
                    text.push('\n');
                }
                std::fs::write(&path, text).map_err(CliError::runtime)?;
            }
        }
    }
    println!(
        "dumped layer '{layer}' ({} channels, {}x{} slice at depth {}) to {}",
        s.c,
        s.h,
        s.w,
        slice,
        out.display()
    );
    Ok(())
}
