use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dlcaps::checkpoint::Checkpoint;
use dlcaps::config::{RunConfig, DATA_DIR_ENV};
use dlcaps::data_io::Split;
use dlcaps::gradcheck::{self, run_suite};
use dlcaps::model::{ensemble_predict, Model};
use dlcaps::training::{evaluate, run_training, score, RunOutput};
use dlcaps::{Error, Tensor};

use crate::{ConfigArgs, Fault, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Check = 1,
    Config = 2,
    Data = 3,
    Checkpoint = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub message: String,
}

impl Failure {
    fn new(code: Code, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    /// Wraps a library error under an explicit exit code.
    fn with(code: Code) -> impl Fn(Error) -> Self {
        move |e| Self::new(code, e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) => Code::Config,
            Error::Format(_) | Error::Io(_) => Code::Data,
            Error::Checkpoint(_) => Code::Checkpoint,
            Error::Numeric { .. } => Code::Check,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Applies `--key value` pairs; a `--config` among them is returned.
fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<(), Failure> {
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Failure::new(Code::Config, format!("expected `--key value`, got `{flag}`")))?;
        let value = it.next().ok_or_else(|| Failure::new(Code::Config, format!("`--{key}` needs a value")))?;
        cfg.apply_override(key, value).map_err(Failure::with(Code::Config))?;
    }
    Ok(())
}

/// Config file (or the default preset) plus overrides, with the data
/// directory resolved so the echo is self-contained.
fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let (path, overrides) = split_config_flag(args)?;
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p),
        None => RunConfig::preset("cifar10"),
    }
    .map_err(Failure::with(Code::Config))?;
    apply_overrides(&mut cfg, &overrides)?;
    if cfg.data.dir.is_none() {
        cfg.data.dir = Some(cfg.data.resolved_dir(data_root().as_deref()));
    }
    Ok(cfg)
}

/// clap stops parsing named flags at the first override, so a later
/// `--config PATH` lands in the override list.
fn split_config_flag(args: &ConfigArgs) -> Result<(Option<PathBuf>, Vec<String>), Failure> {
    let mut path = args.config.clone();
    let mut rest = Vec::with_capacity(args.overrides.len());
    let mut it = args.overrides.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it.next().ok_or_else(|| Failure::new(Code::Config, "`--config` needs a path"))?;
            if path.replace(PathBuf::from(p)).is_some() {
                return Err(Failure::new(Code::Config, "`--config` given twice"));
            }
        } else {
            rest.push(a.clone());
        }
    }
    Ok((path, rest))
}

fn print_echo(cfg: &RunConfig) {
    println!("# resolved config");
    for line in cfg.echo().lines() {
        println!("#   {line}");
    }
}

pub fn train(args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    cfg.validate().map_err(Failure::with(Code::Config))?;
    let train = cfg.data.load(Split::Train, None).map_err(Failure::with(Code::Data))?;
    let val = cfg.data.load(Split::Test, None).map_err(Failure::with(Code::Data))?;
    let echo = cfg.echo();
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Failure::new(Code::Config, format!("{}: {e}", cfg.run_dir.display())))?;
    fs::write(cfg.run_dir.join("run_config.txt"), &echo)
        .map_err(|e| Failure::new(Code::Config, format!("{}: {e}", cfg.run_dir.display())))?;
    print_echo(&cfg);
    println!("# {} training / {} validation images", train.len(), val.len());

    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let out = RunOutput { dir: &cfg.run_dir, config_echo: &echo, verbose: true };
    let summary = run_training(&mut model, &train, Some(&val), &cfg.train, &out)?;
    if let Some(last) = summary.metrics.last() {
        println!("final validation accuracy {:.4}", last.val_acc.unwrap_or(f64::NAN));
    }
    if let Some(best) = summary.best_val_acc {
        println!("best validation accuracy {best:.4}");
    }
    println!("run directory {}", cfg.run_dir.display());
    Ok(())
}

/// A checkpoint with the model it configures.
struct Member {
    path: PathBuf,
    cfg: RunConfig,
    model: Model<f32>,
}

fn load_member(path: &Path, overrides: &[String]) -> Result<Member, Failure> {
    let ckpt = Checkpoint::load(path).map_err(Failure::with(Code::Checkpoint))?;
    let bad = |e: Error| Failure::new(Code::Checkpoint, format!("{}: {e}", path.display()));
    let mut cfg = RunConfig::parse(&ckpt.config).map_err(bad)?;
    apply_overrides(&mut cfg, overrides)?;
    if cfg.data.dir.is_none() {
        cfg.data.dir = Some(cfg.data.resolved_dir(data_root().as_deref()));
    }
    let mut model = Model::<f32>::new(cfg.model.clone()).map_err(bad)?;
    ckpt.restore(&mut model.params).map_err(bad)?;
    Ok(Member { path: path.to_path_buf(), cfg, model })
}

pub fn eval(checkpoints: &[PathBuf], args: &ConfigArgs) -> Outcome {
    let (config, overrides) = split_config_flag(args)?;
    if config.is_some() {
        return Err(Failure::new(Code::Config, "eval takes its config from the checkpoint; use overrides instead"));
    }
    let members = checkpoints.iter().map(|p| load_member(p, &overrides)).collect::<Result<Vec<_>, _>>()?;
    let first = &members[0];
    for m in &members[1..] {
        if m.model.num_classes() != first.model.num_classes() || m.model.cfg.input != first.model.cfg.input {
            return Err(Failure::new(
                Code::Checkpoint,
                format!(
                    "{} ({} classes, input {:?}) is incompatible with {} ({} classes, input {:?})",
                    m.path.display(),
                    m.model.num_classes(),
                    m.model.cfg.input,
                    first.path.display(),
                    first.model.num_classes(),
                    first.model.cfg.input
                ),
            ));
        }
    }
    print_echo(&first.cfg);
    let ds = first.cfg.data.load(Split::Test, None).map_err(Failure::with(Code::Data))?;
    if ds.num_classes != first.model.num_classes() || ds.image_shape() != first.model.cfg.input {
        return Err(Failure::new(
            Code::Checkpoint,
            format!(
                "checkpoint expects {} classes of {:?} images, dataset has {} classes of {:?}",
                first.model.num_classes(),
                first.model.cfg.input,
                ds.num_classes,
                ds.image_shape()
            ),
        ));
    }

    let mut probs: Vec<Tensor<f64>> = Vec::with_capacity(members.len());
    for m in &members {
        let r = evaluate(&m.model, &ds, m.cfg.train.eval_batch)?;
        println!("member {} accuracy {:.4}", m.path.display(), r.accuracy);
        probs.push(r.probabilities);
    }
    let predictions = ensemble_predict(&probs)?;
    let (acc, per_class) = score(&predictions, &ds.labels, ds.num_classes);
    let label = if members.len() == 1 { "accuracy".to_string() } else { format!("ensemble({}) accuracy", members.len()) };
    println!("{label} {acc:.4} on {} images", ds.len());
    for (k, a) in per_class.iter().enumerate() {
        println!("class {k} accuracy {a:.4}");
    }
    Ok(())
}

pub fn params(args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    cfg.model.validate().map_err(Failure::with(Code::Config))?;
    print_echo(&cfg);
    let model = Model::<f32>::new(cfg.model.clone()).map_err(Failure::with(Code::Config))?;
    let rows = model.param_breakdown();
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    println!("{:width$}  params", "layer");
    for (name, n) in &rows {
        println!("{name:width$}  {n}");
    }
    println!("{:width$}  {}", "total", model.count_params());
    Ok(())
}

pub fn gradcheck(scope: Scope, fault: Option<Fault>) -> Outcome {
    let scope = match scope {
        Scope::Ops => gradcheck::Scope::Ops,
        Scope::Model => gradcheck::Scope::Model,
    };
    let fault = fault.map(|Fault::Squash| gradcheck::Fault::Squash);
    println!("# eps {:e}; tolerance {:e} (ops), {:e} (model)", gradcheck::EPS, gradcheck::OP_TOLERANCE, gradcheck::MODEL_TOLERANCE);
    let start = Instant::now();
    let results = run_suite(scope, fault, |c| {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:28} max_rel_error {:.3e}  tol {:.0e}  {verdict}", c.name, c.report.max_rel_error, c.tolerance);
    })
    .map_err(|e| Failure::new(Code::Check, e.to_string()))?;
    println!("# {} cases in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    let worst = gradcheck::worst(&results).ok_or_else(|| Failure::new(Code::Check, "no cases ran"))?;
    let line = format!(
        "worst: {} max_rel_error {:.3e} (analytic {:.6e}, numeric {:.6e})",
        worst.name, worst.report.max_rel_error, worst.report.analytic, worst.report.numeric
    );
    if worst.passed() {
        println!("{line}");
        Ok(())
    } else {
        Err(Failure::new(Code::Check, format!("gradient check failed; {line}")))
    }
}

pub fn bench(args: &ConfigArgs, batch_sizes: &[usize], runs: usize, warmup: usize) -> Outcome {
    if runs < 20 {
        return Err(Failure::new(Code::Config, format!("--runs must be at least 20, got {runs}")));
    }
    if batch_sizes.contains(&0) {
        return Err(Failure::new(Code::Config, "batch sizes must be ≥ 1"));
    }
    let cfg = resolve(args)?;
    cfg.model.validate().map_err(Failure::with(Code::Config))?;
    print_echo(&cfg);
    let model = Model::<f32>::new(cfg.model.clone()).map_err(Failure::with(Code::Config))?;

    let with = cfg.model.routing_input_capsules(true)?;
    let without = cfg.model.routing_input_capsules(false)?;
    let types = cfg.model.mlce.cell1.out_types();
    println!("capsules entering DR: {with} with CapsSum, {without} without (ratio {}, S = {types})", without / with.max(1));

    let (h, w, c) = cfg.model.input;
    let mut csv = String::from("batch_size,median_ms_per_batch,ms_per_image,runs\n");
    println!("{:>10}  {:>12}  {:>12}", "batch", "ms/batch", "ms/image");
    for &b in batch_sizes {
        let n = b * h * w * c;
        // Fixed pseudo-random pixels; latency does not depend on content.
        let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(2_654_435_761) % 1000) as f32 / 1000.0).collect();
        let images = Tensor::new(&[b, h, w, c], data)?;
        for _ in 0..warmup {
            model.infer_lengths(&images, b)?;
        }
        let mut times: Vec<f64> = (0..runs)
            .map(|_| {
                let t = Instant::now();
                model.infer_lengths(&images, b).map(|_| t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<_, _>>()?;
        times.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 { times[runs / 2] } else { 0.5 * (times[runs / 2 - 1] + times[runs / 2]) };
        let per_image = median / b as f64;
        println!("{b:>10}  {median:>12.3}  {per_image:>12.4}");
        writeln!(csv, "{b},{median:.6},{per_image:.6},{runs}").expect("writing to a String");
    }
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Failure::new(Code::Config, format!("{}: {e}", cfg.run_dir.display())))?;
    let path = cfg.run_dir.join("bench.csv");
    fs::write(&path, csv).map_err(|e| Failure::new(Code::Config, format!("{}: {e}", path.display())))?;
    fs::write(cfg.run_dir.join("run_config.txt"), cfg.echo())
        .map_err(|e| Failure::new(Code::Config, format!("{}: {e}", cfg.run_dir.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}
