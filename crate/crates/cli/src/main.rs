use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use zsquant::calib::{estimate_substitutes, PolicyMap, SubstituteSet};
use zsquant::distill::{distill, DistillConfig, DistilledData, LossKind, DISTILLED_FORMAT};
use zsquant::folding::fold_bn;
use zsquant::graph::{load_model, save_model};
use zsquant::harness::{
    bn_variant, compare_calibrations, distill_fixture, eval_accuracy, gen_dataset, grad_audit,
    random_model, reference_cnn, train_tiny, BnVariant, Classifier, CompareConfig, Dataset,
    DatasetKind, DatasetSpec, RandomModelOptions, Split, TrainConfig, GRAD_TOLERANCE,
};
use zsquant::quant::{
    calibrate_activations, load_quantized, quantize_model, save_quantized, ActivationParams,
    Granularity, ObserverKind, Symmetry,
};
use zsquant::{ModelGraph, Tensor};

#[derive(Parser)]
#[command(
    name = "zsquant",
    version,
    about = "Data-free post-training quantization toolkit"
)]
struct Cli {
    /// JSON job file; flags given on the command line override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved job as JSON and exit without running it
    #[arg(long, global = true)]
    dry_run: bool,
    /// Also write the resolved job to this file
    #[arg(long, global = true)]
    emit_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a model fixture
    GenModel(GenModelArgs),
    /// Generate a synthetic dataset (writes <out>/train and <out>/test)
    GenData(GenDataArgs),
    /// Train a model with SGD on cross-entropy
    Train(TrainArgs),
    /// Fold batch-norm into the preceding layers
    FoldBn(FoldBnArgs),
    /// Estimate substitute activation statistics from the weights
    EstimateStats(EstimateArgs),
    /// Distill calibration data against a substitute set
    Distill(DistillArgs),
    /// Compute activation quantization parameters from calibration data
    Calibrate(CalibrateArgs),
    /// Quantize weights and attach activation parameters
    Quantize(QuantizeArgs),
    /// Print top-1 accuracy of a float or quantized model
    Eval(EvalArgs),
    /// Compare calibration methods over a grid of quantization configs
    Compare(CompareArgs),
    /// Finite-difference audit of input gradients
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenModelArgs {
    /// reference-cnn | random | distill-fixture | bn-variant [default: reference-cnn]
    #[arg(long)]
    kind: Option<String>,
    /// Output classes of the reference CNN [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Initialization seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Most layers of a random model [default: 5]
    #[arg(long)]
    max_layers: Option<usize>,
    /// Allow batch-norm in random models [default: true]
    #[arg(long)]
    allow_bn: Option<bool>,
    /// Allow residual adds in random models [default: true]
    #[arg(long)]
    allow_residual: Option<bool>,
    /// bn-variant: trained BN-free model to re-parameterize
    #[arg(long)]
    from: Option<PathBuf>,
    /// bn-variant: dataset whose first 512 samples set the BN statistics
    #[arg(long)]
    data: Option<PathBuf>,
    /// bn-variant: weight scale a [default: 0.5]
    #[arg(long, allow_hyphen_values = true)]
    bn_scale: Option<f64>,
    /// bn-variant: pre-activation shift in units of a·σ [default: -2.0]
    #[arg(long, allow_hyphen_values = true)]
    bn_shift: Option<f64>,
    /// Output model directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    /// blobs | stripes [default: blobs]
    #[arg(long)]
    kind: Option<String>,
    /// Number of classes [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per class in each split [default: 100]
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Sample shape c,h,w [default: 3,8,8]
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    /// Class-mean distance from the origin in noise std units [default: 3.0]
    #[arg(long)]
    separation: Option<f64>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Training dataset directory
    data: Option<PathBuf>,
    /// Optional held-out dataset to report accuracy on
    #[arg(long)]
    test: Option<PathBuf>,
    /// Passes over the data [default: 15]
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate [default: 0.05]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output model directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FoldBnArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Output model directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EstimateArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// JSON statistics-adjustment policy file [default: built-in policy]
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Fold batch-norm before estimating [default]
    #[arg(long, conflicts_with = "fold_after")]
    #[serde(skip)]
    fold_before: bool,
    /// Keep live batch-norm and use its parameters as targets
    #[arg(long)]
    #[serde(skip)]
    fold_after: bool,
    #[arg(skip)]
    fold: Option<String>,
    /// Output substitute file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DistillArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Substitute file from estimate-stats
    subs: Option<PathBuf>,
    /// Adam iterations [default: 500]
    #[arg(long)]
    iters: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Distilled samples optimized jointly [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Initialization seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// zscore | l1 | l2 | l1mu | l1sigma | l2mu | l2sigma | kl [default: zscore]
    #[arg(long)]
    loss: Option<String>,
    /// Division guard s [default: 1e-6]
    #[arg(long)]
    guard: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CalibrateArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Distilled-data or dataset directory
    calib: Option<PathBuf>,
    /// minmax | histogram [default: minmax]
    #[arg(long)]
    observer: Option<String>,
    /// Histogram bins [default: 2048]
    #[arg(long)]
    bins: Option<usize>,
    /// Activation bits, 2-8, or 32 for float [default: 8]
    #[arg(long)]
    abits: Option<u8>,
    /// symmetric | affine [default: affine]
    #[arg(long)]
    asym: Option<String>,
    /// Output parameter file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct QuantizeArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Activation parameter file from calibrate
    qparams: Option<PathBuf>,
    /// Weight bits, 2-8, or 32 for float [default: 8]
    #[arg(long)]
    wbits: Option<u8>,
    /// per-channel | per-tensor [default: per-channel]
    #[arg(long)]
    wscheme: Option<String>,
    /// symmetric | affine [default: symmetric]
    #[arg(long)]
    wsym: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    /// Model or quantized-model directory
    model: Option<PathBuf>,
    /// Dataset directory
    data: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CompareArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Test dataset directory
    data: Option<PathBuf>,
    /// Training dataset for the real-subset method [default: none, cells skipped]
    #[arg(long)]
    train: Option<PathBuf>,
    /// JSON grid overriding methods, configs, calib_batch, distill, policy [default: built-in grid]
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Runs per cell [default: 10]
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output report JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CheckGradArgs {
    /// Model directory
    model: Option<PathBuf>,
    /// Input and projection seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(zsquant::Error),
    Check(String),
}

impl From<zsquant::Error> for Failure {
    fn from(e: zsquant::Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(zsquant::Error::NumericFault { .. }) | Failure::Check(_) => 3,
            Failure::Lib(_) => 2,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Lib(e) => (e.kind(), e.to_string()),
            Failure::Check(m) => ("numeric-fault", m.clone()),
        };
        format!("zsquant: {kind}: {}", msg.replace('\n', " "))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn need<T>(v: Option<T>, name: &str) -> Outcome<T> {
    v.ok_or_else(|| usage(format!("missing required {name}")))
}

/// Copies every non-null field of `src` over `dst`.
fn overlay(dst: &mut Map<String, Value>, src: Map<String, Value>) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (_, Value::Null) => {}
            (Some(Value::Object(d)), Value::Object(s)) => overlay(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn as_object(v: Value, what: &str) -> Outcome<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(usage(format!("{what} must be a JSON object"))),
    }
}

fn read_json_value(path: &Path) -> Outcome<Value> {
    let text = zsquant::format::read_text(path)?;
    Ok(zsquant::format::parse_json(path, &text)?)
}

/// Defaults, then the job file, then flags; returns the typed job and its JSON form.
fn resolve<T: Serialize + DeserializeOwned>(
    command: &str,
    flags: &T,
    defaults: Value,
    config: Option<&Path>,
) -> Outcome<(T, Value)> {
    let mut merged = as_object(defaults, "defaults")?;
    if let Some(path) = config {
        let mut file = as_object(read_json_value(path)?, "job file")?;
        match file.remove("command") {
            Some(Value::String(c)) if c != command => {
                return Err(usage(format!("job file is for {c:?}, not {command:?}")))
            }
            _ => {}
        }
        overlay(&mut merged, file);
    }
    let given = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))?;
    overlay(&mut merged, as_object(given, "flags")?);
    let job: T = serde_json::from_value(Value::Object(merged.clone()))
        .map_err(|e| usage(format!("job: {e}")))?;
    let mut out = Map::new();
    out.insert("command".into(), Value::String(command.into()));
    out.extend(merged);
    Ok((job, Value::Object(out)))
}

fn parse_symmetry(s: &str) -> Outcome<Symmetry> {
    match s {
        "symmetric" => Ok(Symmetry::Symmetric),
        "affine" => Ok(Symmetry::Affine),
        _ => Err(usage(format!("unknown symmetry {s:?}"))),
    }
}

fn parse_granularity(s: &str) -> Outcome<Granularity> {
    match s {
        "per-channel" => Ok(Granularity::PerChannel),
        "per-tensor" => Ok(Granularity::PerTensor),
        _ => Err(usage(format!("unknown weight scheme {s:?}"))),
    }
}

/// Model directory or quantized-model directory.
enum AnyModel {
    Float(ModelGraph),
    Quantized(Box<zsquant::quant::QuantizedModel>),
}

fn load_any(path: &Path) -> Outcome<AnyModel> {
    if path.join("qparams.json").exists() {
        Ok(AnyModel::Quantized(Box::new(load_quantized(path)?)))
    } else {
        Ok(AnyModel::Float(load_model(path)?))
    }
}

fn calibration_batches(path: &Path) -> Outcome<Vec<Tensor>> {
    let meta = read_json_value(&path.join("meta.json"))?;
    let data = if meta.get("format").and_then(Value::as_str) == Some(DISTILLED_FORMAT) {
        DistilledData::load(path)?.data
    } else {
        Dataset::load(path)?.samples
    };
    let n = data.batch();
    let mut out = Vec::new();
    for start in (0..n).step_by(256) {
        out.push(data.slice_batch(start, (start + 256).min(n))?);
    }
    Ok(out)
}

/// Sibling file `<out>.job.json`.
fn job_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "job".into());
    name.push(".job.json");
    out.with_file_name(name)
}

struct Job {
    json: Value,
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Outcome<()> {
    let cfg = cli.config.as_deref();
    let (job, action): (Job, Box<dyn FnOnce() -> Outcome<()>>) = match cli.command {
        Command::GenModel(a) => {
            let d = json!({"kind": "reference-cnn", "classes": 4, "seed": 0, "max_layers": 5,
                "allow_bn": true, "allow_residual": true, "bn_scale": 0.5, "bn_shift": -2.0});
            let (a, json) = resolve("gen-model", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || gen_model(a, &out)),
            )
        }
        Command::GenData(a) => {
            let d = json!({"kind": "blobs", "classes": 4, "n_per_class": 100, "shape": [3, 8, 8],
                "separation": 3.0, "seed": 0});
            let (a, json) = resolve("gen-data", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || gen_data(a, &out)),
            )
        }
        Command::Train(a) => {
            let t = TrainConfig::default();
            let d = json!({"epochs": t.epochs, "lr": t.learning_rate, "momentum": t.momentum,
                "batch": t.batch, "seed": t.seed});
            let (a, json) = resolve("train", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || train(a, &out)),
            )
        }
        Command::FoldBn(a) => {
            let (a, json) = resolve("fold-bn", &a, json!({}), cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || fold(a, &out)),
            )
        }
        Command::EstimateStats(mut a) => {
            if a.fold_before || a.fold_after {
                a.fold = Some(if a.fold_after { "after" } else { "before" }.into());
            }
            let (a, json) = resolve("estimate-stats", &a, json!({"fold": "before"}), cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || estimate(a, &out)),
            )
        }
        Command::Distill(a) => {
            let c = DistillConfig::default();
            let d = json!({"iters": c.iterations, "lr": c.learning_rate, "batch": c.batch, "seed": c.seed,
                "loss": c.loss.cli_name(), "guard": c.guard});
            let (a, json) = resolve("distill", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || run_distill(a, &out)),
            )
        }
        Command::Calibrate(a) => {
            let d = json!({"observer": "minmax", "bins": zsquant::quant::DEFAULT_HISTOGRAM_BINS,
                "abits": 8, "asym": "affine"});
            let (a, json) = resolve("calibrate", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || calibrate(a, &out)),
            )
        }
        Command::Quantize(a) => {
            let d = json!({"wbits": 8, "wscheme": "per-channel", "wsym": "symmetric"});
            let (a, json) = resolve("quantize", &a, d, cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || quantize(a, &out)),
            )
        }
        Command::Eval(a) => {
            let (a, json) = resolve("eval", &a, json!({}), cfg)?;
            (Job { json, out: None }, Box::new(move || eval(a)))
        }
        Command::Compare(a) => {
            let (a, json) = resolve("compare", &a, json!({"runs": 10, "seed": 0}), cfg)?;
            let out = need(a.out.clone(), "--out")?;
            (
                Job {
                    json,
                    out: Some(out.clone()),
                },
                Box::new(move || compare(a, &out)),
            )
        }
        Command::CheckGrad(a) => {
            let (a, json) = resolve("check-grad", &a, json!({"seed": 0}), cfg)?;
            (Job { json, out: None }, Box::new(move || check_grad(a)))
        }
    };
    let text = serde_json::to_string_pretty(&job.json).expect("job serializes") + "\n";
    if cli.dry_run {
        print!("{text}");
        return Ok(());
    }
    action()?;
    let write = |p: &Path| {
        std::fs::write(p, &text).map_err(|e| {
            Failure::Lib(zsquant::Error::Io {
                path: p.into(),
                source: e,
            })
        })
    };
    if let Some(out) = &job.out {
        write(&job_path(out))?;
    }
    if let Some(p) = &cli.emit_config {
        write(p)?;
    }
    Ok(())
}

fn gen_model(a: GenModelArgs, out: &Path) -> Outcome<()> {
    let kind = a.kind.unwrap_or_default();
    let seed = a.seed.unwrap_or_default();
    let model = match kind.as_str() {
        "reference-cnn" => reference_cnn(a.classes.unwrap_or(4), seed),
        "random" => random_model(
            seed,
            RandomModelOptions {
                max_layers: a.max_layers.unwrap_or(5),
                allow_bn: a.allow_bn.unwrap_or(true),
                allow_residual: a.allow_residual.unwrap_or(true),
            },
        ),
        "distill-fixture" => distill_fixture(seed),
        "bn-variant" => {
            let base = load_model(&need(a.from, "--from")?)?;
            let data = Dataset::load(&need(a.data, "--data")?)?;
            let probe = data.samples.slice_batch(0, data.len().min(512))?;
            let variant = BnVariant {
                scale: a.bn_scale.unwrap_or(0.5),
                shift: a.bn_shift.unwrap_or(-2.0),
            };
            bn_variant(&base, &probe, variant)?
        }
        other => return Err(usage(format!("unknown model kind {other:?}"))),
    };
    save_model(&model, out)?;
    println!("{} layers written to {}", model.layers.len(), out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &Path) -> Outcome<()> {
    let kind = match a.kind.as_deref() {
        Some("blobs") => DatasetKind::GaussianBlobs,
        Some("stripes") => DatasetKind::StripedPatterns,
        other => return Err(usage(format!("unknown dataset kind {other:?}"))),
    };
    let shape = a.shape.unwrap_or_default();
    let shape: [usize; 3] = shape
        .as_slice()
        .try_into()
        .map_err(|_| usage(format!("shape needs three values, got {shape:?}")))?;
    let spec = DatasetSpec {
        kind,
        classes: a.classes.unwrap_or_default(),
        n_per_class: a.n_per_class.unwrap_or_default(),
        shape,
        separation: a.separation.unwrap_or_default(),
        seed: a.seed.unwrap_or_default(),
    };
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let d = gen_dataset(&spec, split)?;
        d.save(&out.join(name))?;
        println!("{name}: {} samples", d.len());
    }
    Ok(())
}

fn train(a: TrainArgs, out: &Path) -> Outcome<()> {
    let model = load_model(&need(a.model, "model")?)?;
    let data = Dataset::load(&need(a.data, "data")?)?;
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or_default(),
        learning_rate: a.lr.unwrap_or_default(),
        momentum: a.momentum.unwrap_or_default(),
        batch: a.batch.unwrap_or_default(),
        seed: a.seed.unwrap_or_default(),
    };
    let trained = train_tiny(&model, &data, &cfg)?;
    save_model(&trained, out)?;
    println!("train_accuracy {:.6}", eval_accuracy(&trained, &data)?);
    if let Some(test) = a.test {
        println!(
            "test_accuracy {:.6}",
            eval_accuracy(&trained, &Dataset::load(&test)?)?
        );
    }
    Ok(())
}

fn fold(a: FoldBnArgs, out: &Path) -> Outcome<()> {
    let model = load_model(&need(a.model, "model")?)?;
    let (folded, report) = fold_bn(&model)?;
    save_model(&folded, out)?;
    println!(
        "folded {} layers, max deviation {:.3e}",
        report.folded_count(),
        report.max_deviation()
    );
    for e in report.layers.iter().filter(|e| e.folded) {
        println!("  layer {}: deviation {:.3e}", e.layer, e.max_deviation);
    }
    Ok(())
}

fn estimate(a: EstimateArgs, out: &Path) -> Outcome<()> {
    let model = load_model(&need(a.model, "model")?)?;
    let policy = match &a.policy {
        Some(p) => PolicyMap::load(p)?,
        None => PolicyMap::default(),
    };
    let subs = match a.fold.as_deref() {
        Some("before") => {
            let target = if model.has_bn() {
                fold_bn(&model)?.0
            } else {
                model
            };
            estimate_substitutes(&target, &policy, true)?
        }
        Some("after") => estimate_substitutes(&model, &policy, false)?,
        other => {
            return Err(usage(format!(
                "fold must be \"before\" or \"after\", got {other:?}"
            )))
        }
    };
    subs.save(out)?;
    println!(
        "{} substitute layers written to {}",
        subs.entries.len(),
        out.display()
    );
    Ok(())
}

fn run_distill(a: DistillArgs, out: &Path) -> Outcome<()> {
    let loss = a.loss.unwrap_or_default();
    let cfg = DistillConfig {
        iterations: a.iters.unwrap_or_default(),
        learning_rate: a.lr.unwrap_or_default(),
        batch: a.batch.unwrap_or_default(),
        seed: a.seed.unwrap_or_default(),
        guard: a.guard.unwrap_or_default(),
        loss: LossKind::from_cli(&loss).ok_or_else(|| usage(format!("unknown loss {loss:?}")))?,
        ..DistillConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&need(a.model, "model")?)?;
    let subs = SubstituteSet::load(&need(a.subs, "substitute file")?)?;
    // Substitutes estimated after folding describe the folded network.
    let target = if subs.folded_before && model.has_bn() {
        fold_bn(&model)?.0
    } else {
        model
    };
    let d = distill(&target, &subs, &cfg)?;
    d.save(out)?;
    println!("initial_loss {:.6e}", d.initial_loss());
    println!("final_loss {:.6e}", d.final_loss());
    Ok(())
}

fn calibrate(a: CalibrateArgs, out: &Path) -> Outcome<()> {
    let kind = match a.observer.as_deref() {
        Some("minmax") => ObserverKind::MinMax,
        Some("histogram") => ObserverKind::Histogram {
            bins: a.bins.unwrap_or_default(),
        },
        other => return Err(usage(format!("unknown observer {other:?}"))),
    };
    let sym = parse_symmetry(a.asym.as_deref().unwrap_or_default())?;
    let model = load_model(&need(a.model, "model")?)?;
    let batches = calibration_batches(&need(a.calib, "calibration data")?)?;
    let folded = if model.has_bn() {
        fold_bn(&model)?.0
    } else {
        model
    };
    let params = calibrate_activations(&folded, &batches, kind, a.abits.unwrap_or_default(), sym)?;
    params.save(out)?;
    let quantized = params.layers.iter().filter(|(_, p)| p.is_some()).count();
    println!(
        "{quantized} of {} layer outputs quantized",
        params.layers.len()
    );
    Ok(())
}

fn quantize(a: QuantizeArgs, out: &Path) -> Outcome<()> {
    let gran = parse_granularity(a.wscheme.as_deref().unwrap_or_default())?;
    let sym = parse_symmetry(a.wsym.as_deref().unwrap_or_default())?;
    let model = load_model(&need(a.model, "model")?)?;
    let act = ActivationParams::load(&need(a.qparams, "activation parameter file")?)?;
    let qm = quantize_model(&model, &act, a.wbits.unwrap_or_default(), gran, sym)?;
    save_quantized(&qm, out)?;
    println!("quantized model written to {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome<()> {
    let data = Dataset::load(&need(a.data, "dataset")?)?;
    let acc = match load_any(&need(a.model, "model")?)? {
        AnyModel::Float(m) => eval_accuracy(&m as &dyn Classifier, &data)?,
        AnyModel::Quantized(q) => eval_accuracy(q.as_ref() as &dyn Classifier, &data)?,
    };
    println!("top1 {acc:.6}");
    Ok(())
}

fn compare(a: CompareArgs, out: &Path) -> Outcome<()> {
    let model = load_model(&need(a.model, "model")?)?;
    let test = Dataset::load(&need(a.data, "dataset")?)?;
    let train = a.train.as_deref().map(Dataset::load).transpose()?;
    let mut cfg = serde_json::to_value(CompareConfig::default())
        .map_err(|e| usage(e.to_string()))
        .and_then(|v| as_object(v, "grid"))?;
    if let Some(grid) = &a.grid {
        overlay(&mut cfg, as_object(read_json_value(grid)?, "grid file")?);
    }
    overlay(
        &mut cfg,
        as_object(json!({"runs": a.runs, "seed": a.seed}), "flags")?,
    );
    let cfg: CompareConfig =
        serde_json::from_value(Value::Object(cfg)).map_err(|e| usage(format!("grid: {e}")))?;
    let report = compare_calibrations(&model, train.as_ref(), &test, &cfg)?;
    std::fs::write(out, report.to_json() + "\n").map_err(|e| {
        Failure::Lib(zsquant::Error::Io {
            path: out.into(),
            source: e,
        })
    })?;
    print!("{}", report.to_table());
    Ok(())
}

fn check_grad(a: CheckGradArgs) -> Outcome<()> {
    let model = load_model(&need(a.model, "model")?)?;
    let checks = grad_audit(&model, a.seed.unwrap_or_default())?;
    for c in &checks {
        println!("{} max_rel_error {:.3e}", c.objective, c.max_rel_error);
    }
    match checks
        .iter()
        .find(|c| c.max_rel_error.is_nan() || c.max_rel_error > GRAD_TOLERANCE)
    {
        Some(c) => Err(Failure::Check(format!(
            "{} gradient error {:.3e} exceeds {GRAD_TOLERANCE:e}",
            c.objective, c.max_rel_error
        ))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", usage(first).line());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
