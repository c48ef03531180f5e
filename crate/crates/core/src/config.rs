//! Run configuration: flat `key = value` text with `#` comments and dotted
//! keys, layered over a named preset.
//!
//! ```text
//! preset = fmnist_small
//! mlce.capssum1.d_out = 8
//! train.epochs_phase1 = 15
//! ```
//!
//! [`RunConfig::echo`] writes every resolved key; parsing the echo gives back
//! an identical config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::{CapsCellConfig, SkipConfig};
use crate::data_io::{Dataset, DatasetKind, Resample, Split};
use crate::error::{Error, Result};
use crate::model::{DecoderStage, ModelConfig};
use crate::training::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "DLCAPS_DATA_DIR";

pub const PRESETS: &[&str] = &["cifar10", "cifar100", "svhn", "fmnist", "fmnist_small", "tiny"];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Dataset directory; when unset, `<root>/<dataset dir name>`.
    pub dir: Option<PathBuf>,
    /// Keep only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` test images.
    pub val_limit: Option<usize>,
    /// 2× upsampling applied at load time.
    pub resize: Option<Resample>,
}

impl DataConfig {
    /// The directory to read, falling back to `root` (or `./data`).
    pub fn resolved_dir(&self, root: Option<&Path>) -> PathBuf {
        match &self.dir {
            Some(d) => d.clone(),
            None => root.unwrap_or(Path::new("data")).join(self.dataset.dir_name()),
        }
    }

    /// Loads `split` (test split for validation), truncated to its limit.
    pub fn load(&self, split: Split, root: Option<&Path>) -> Result<Dataset> {
        let ds = self.dataset.load(&self.resolved_dir(root), split, self.resize)?;
        let limit = match split {
            Split::Train => self.train_limit,
            Split::Test => self.val_limit,
        };
        match limit {
            Some(n) => ds.truncated(n),
            None => Ok(ds),
        }
    }

    /// `(H, W, C)` of the images handed to the model.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.dataset.native_shape();
        match self.resize {
            Some(_) => (2 * h, 2 * w, c),
            None => (h, w, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let data = |dataset, resize| DataConfig { dataset, dir: None, train_limit: None, val_limit: None, resize };
        let colour = |dataset| data(dataset, Some(Resample::Bilinear));
        let (model, data) = match name {
            "cifar10" => (ModelConfig::cifar10(), colour(DatasetKind::Cifar10)),
            "svhn" => (ModelConfig::cifar10(), colour(DatasetKind::Svhn)),
            "cifar100" => {
                let mut m = ModelConfig::cifar10();
                m.num_classes = 100;
                (m, colour(DatasetKind::Cifar100))
            }
            "fmnist" => (ModelConfig::fmnist(), data(DatasetKind::Fmnist, None)),
            "fmnist_small" => {
                let mut d = data(DatasetKind::Fmnist, None);
                d.train_limit = Some(10_000);
                d.val_limit = Some(2_000);
                (ModelConfig::fmnist_small(), d)
            }
            "tiny" => (ModelConfig::tiny(), data(DatasetKind::Fmnist, None)),
            _ => return Err(Error::config(format!("unknown preset `{name}` ({})", PRESETS.join("|")))),
        };
        let mut train = TrainConfig::default();
        if name == "fmnist_small" {
            train.epochs_phase1 = 15;
            train.epochs_phase2 = 5;
        }
        Ok(Self { preset: name.to_string(), model, train, data, run_dir: PathBuf::from(format!("runs/{name}")) })
    }

    /// Parses config text. A `preset` line, if present, must come first;
    /// otherwise the `cifar10` preset is the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::config(format!("line {}: {}", lineno + 1, strip_kind(e)));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            if key == "preset" {
                if cfg.is_some() {
                    return Err(Error::config(format!("line {}: `preset` must precede every other key", lineno + 1)));
                }
                cfg = Some(Self::preset(value).map_err(at)?);
                continue;
            }
            let c = match &mut cfg {
                Some(c) => c,
                None => cfg.insert(Self::preset("cifar10")?),
            };
            c.set(key, value).map_err(at)?;
        }
        match cfg {
            Some(c) => Ok(c),
            None => Self::preset("cifar10"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), strip_kind(e))))
    }

    /// Applies one command-line override; accepts full keys or the short
    /// aliases `lr`, `epochs-phase1`, `epochs-phase2`, `batch-size`, `seed`,
    /// `run-dir`, `data-dir`, `dataset`, `train-limit`, `val-limit`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let key = match key {
            "lr" => "train.lr",
            "epochs-phase1" => "train.epochs_phase1",
            "epochs-phase2" => "train.epochs_phase2",
            "batch-size" => "train.batch_size",
            "run-dir" => "run.dir",
            "data-dir" => "data.dir",
            "dataset" => "data.dataset",
            "train-limit" => "data.train_limit",
            "val-limit" => "data.val_limit",
            "preset" => return Err(Error::config("`preset` can only be set in a config file")),
            other => other,
        };
        self.set(key, value)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => {
                let s = parse(key, value)?;
                m.seed = s;
                t.seed = s;
            }
            "run.dir" => self.run_dir = PathBuf::from(value),

            "model.input" => {
                let v = parse_dims(key, value, 3)?;
                m.input = (v[0], v[1], v[2]);
            }
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.final_dim" => m.final_dim = parse(key, value)?,
            "model.init_gain" => m.init_gain = parse(key, value)?,
            "stem.filters" => m.stem.filters = parse(key, value)?,
            "stem.kernel" => m.stem.kernel = parse(key, value)?,
            "stem.stride" => m.stem.stride = parse(key, value)?,
            "stem.caps_dim" => m.stem.caps_dim = parse(key, value)?,
            "routing.iterations" => m.routing.iterations = parse(key, value)?,
            "routing.detach_agreement" => m.routing.detach_agreement = parse(key, value)?,
            "mlce.capssum1.d_out" => m.mlce.sum1_out_dim = parse(key, value)?,
            "mlce.capssum2.d_out" => m.mlce.sum2_out_dim = parse(key, value)?,
            "mlce.capssum.enabled" => m.mlce.caps_sum = parse(key, value)?,
            "mlce.capssum.squash" => m.mlce.sum_squash = parse(key, value)?,
            "decoder.seed_hw" => m.decoder.seed_hw = parse(key, value)?,
            "decoder.seed_channels" => m.decoder.seed_channels = parse(key, value)?,
            "decoder.stages" => m.decoder.stages = parse_stages(key, value)?,

            "train.lr" => t.base_lr = parse(key, value)?,
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs_phase1" => t.epochs_phase1 = parse(key, value)?,
            "train.epochs_phase2" => t.epochs_phase2 = parse(key, value)?,
            "train.phase1.m_plus" => t.phase1.m_plus = parse(key, value)?,
            "train.phase1.m_minus" => t.phase1.m_minus = parse(key, value)?,
            "train.phase1.lambda" => t.phase1.lambda = parse(key, value)?,
            "train.phase2.m_plus" => t.phase2.m_plus = parse(key, value)?,
            "train.phase2.m_minus" => t.phase2.m_minus = parse(key, value)?,
            "train.phase2.lambda" => t.phase2.lambda = parse(key, value)?,
            "train.recon_weight" => t.recon_weight = parse(key, value)?,
            "train.reset_adam" => t.reset_adam = parse(key, value)?,
            "train.shuffle" => t.shuffle = parse(key, value)?,
            "train.eval_batch" => t.eval_batch = parse(key, value)?,
            "train.metrics_wall_time" => t.metrics_wall_time = parse(key, value)?,

            "data.dataset" => self.data.dataset = parse(key, value)?,
            "data.dir" => self.data.dir = optional(value).map(PathBuf::from),
            "data.train_limit" => self.data.train_limit = optional(value).map(|v| parse(key, v)).transpose()?,
            "data.val_limit" => self.data.val_limit = optional(value).map(|v| parse(key, v)).transpose()?,
            "data.resize" => self.data.resize = optional(value).map(|v| parse(key, v)).transpose()?,

            _ => return self.set_cell(key, value),
        }
        Ok(())
    }

    fn set_cell(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::config(format!("unknown key `{key}`"));
        let (prefix, field) = key.rsplit_once('.').ok_or_else(unknown)?;
        let m = &mut self.model;
        let (cell, routed) = match prefix {
            "cell1" => (&mut m.cells[0], false),
            "cell2" => (&mut m.cells[1], false),
            "mlce.cell1" => (&mut m.mlce.cell1, true),
            "mlce.cell2" => (&mut m.mlce.cell2, true),
            _ => return Err(unknown()),
        };
        let mut p = CellParams::of(cell);
        match field {
            "types" => p.types = parse(key, value)?,
            "dim" => p.dim = parse(key, value)?,
            "stride" => p.stride = parse(key, value)?,
            "iterations" if routed => p.iterations = parse(key, value)?,
            _ => return Err(unknown()),
        }
        *cell = p.build(routed);
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("seed", m.seed.to_string());
        put("run.dir", self.run_dir.display().to_string());
        put("model.input", format!("{}x{}x{}", m.input.0, m.input.1, m.input.2));
        put("model.num_classes", m.num_classes.to_string());
        put("model.final_dim", m.final_dim.to_string());
        put("model.init_gain", m.init_gain.to_string());
        put("stem.filters", m.stem.filters.to_string());
        put("stem.kernel", m.stem.kernel.to_string());
        put("stem.stride", m.stem.stride.to_string());
        put("stem.caps_dim", m.stem.caps_dim.to_string());
        for (prefix, cell, routed) in [
            ("cell1", &m.cells[0], false),
            ("cell2", &m.cells[1], false),
            ("mlce.cell1", &m.mlce.cell1, true),
            ("mlce.cell2", &m.mlce.cell2, true),
        ] {
            let p = CellParams::of(cell);
            put(&format!("{prefix}.types"), p.types.to_string());
            put(&format!("{prefix}.dim"), p.dim.to_string());
            put(&format!("{prefix}.stride"), p.stride.to_string());
            if routed {
                put(&format!("{prefix}.iterations"), p.iterations.to_string());
            }
        }
        put("mlce.capssum.enabled", m.mlce.caps_sum.to_string());
        put("mlce.capssum.squash", m.mlce.sum_squash.to_string());
        put("mlce.capssum1.d_out", m.mlce.sum1_out_dim.to_string());
        put("mlce.capssum2.d_out", m.mlce.sum2_out_dim.to_string());
        put("routing.iterations", m.routing.iterations.to_string());
        put("routing.detach_agreement", m.routing.detach_agreement.to_string());
        put("decoder.seed_hw", m.decoder.seed_hw.to_string());
        put("decoder.seed_channels", m.decoder.seed_channels.to_string());
        let stages: Vec<String> =
            m.decoder.stages.iter().map(|s| format!("{}x{}x{}", s.channels, s.kernel, s.stride)).collect();
        put("decoder.stages", stages.join(", "));
        put("train.lr", t.base_lr.to_string());
        put("train.gamma", t.gamma.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.epochs_phase1", t.epochs_phase1.to_string());
        put("train.epochs_phase2", t.epochs_phase2.to_string());
        for (prefix, p) in [("train.phase1", t.phase1), ("train.phase2", t.phase2)] {
            put(&format!("{prefix}.m_plus"), p.m_plus.to_string());
            put(&format!("{prefix}.m_minus"), p.m_minus.to_string());
            put(&format!("{prefix}.lambda"), p.lambda.to_string());
        }
        put("train.recon_weight", t.recon_weight.to_string());
        put("train.reset_adam", t.reset_adam.to_string());
        put("train.shuffle", t.shuffle.to_string());
        put("train.eval_batch", t.eval_batch.to_string());
        put("train.metrics_wall_time", t.metrics_wall_time.to_string());
        put("data.dataset", d.dataset.to_string());
        put("data.dir", d.dir.as_ref().map_or("none".into(), |p| p.display().to_string()));
        put("data.train_limit", d.train_limit.map_or("none".into(), |v| v.to_string()));
        put("data.val_limit", d.val_limit.map_or("none".into(), |v| v.to_string()));
        put("data.resize", d.resize.map_or("none".into(), |r| r.to_string()));
        e
    }

    /// The fully resolved config as parseable text.
    pub fn echo(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let classes = self.data.dataset.num_classes();
        if classes != self.model.num_classes {
            return Err(Error::config(format!(
                "dataset {} has {classes} classes but model.num_classes = {}",
                self.data.dataset, self.model.num_classes
            )));
        }
        let shape = self.data.image_shape();
        if shape != self.model.input {
            return Err(Error::config(format!(
                "dataset {} yields {}x{}x{} images (data.resize = {}) but model.input = {}x{}x{}",
                self.data.dataset,
                shape.0,
                shape.1,
                shape.2,
                self.data.resize.map_or("none".into(), |r| r.to_string()),
                self.model.input.0,
                self.model.input.1,
                self.model.input.2
            )));
        }
        Ok(())
    }
}

/// The constructor arguments a cell config was built from.
struct CellParams {
    types: usize,
    dim: usize,
    stride: usize,
    iterations: usize,
}

impl CellParams {
    fn of(cell: &CapsCellConfig) -> Self {
        let iterations = match cell.skip {
            SkipConfig::Routing3d(r) => r.opts.iterations,
            SkipConfig::ConvCaps(_) => crate::routing::DEFAULT_ITERATIONS,
        };
        Self { types: cell.out_types(), dim: cell.out_dim(), stride: cell.layers[0].stride, iterations }
    }

    fn build(&self, routed: bool) -> CapsCellConfig {
        if routed {
            CapsCellConfig::routing3d(self.types, self.dim, self.stride, self.iterations)
        } else {
            CapsCellConfig::normal(self.types, self.dim, self.stride)
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn optional(value: &str) -> Option<&str> {
    (value != "none" && !value.is_empty()).then_some(value)
}

fn parse_dims(key: &str, value: &str, n: usize) -> Result<Vec<usize>> {
    let dims: Vec<usize> = value.split('x').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
    if dims.len() != n {
        return Err(Error::config(format!("`{key}`: expected {n} `x`-separated numbers, got `{value}`")));
    }
    Ok(dims)
}

/// `"16x3x2, 8x3x2"`: channels × kernel × stride per stage.
fn parse_stages(key: &str, value: &str) -> Result<Vec<DecoderStage>> {
    value
        .split(',')
        .map(|s| {
            let d = parse_dims(key, s.trim(), 3)?;
            Ok(DecoderStage { channels: d[0], kernel: d[1], stride: d[2] })
        })
        .collect()
}

fn strip_kind(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_echo_round_trips() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn keys_override_preset_and_comments_are_ignored() {
        let text = "# narrow run\npreset = fmnist_small\nmlce.capssum1.d_out = 6  # smaller\nmlce.capssum2.d_out = 6\n\ndecoder.stages = 4x3x2, 2x3x2, 1x3x1\nseed = 9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.mlce.sum1_out_dim, 6);
        assert_eq!(cfg.model.decoder.stages[0], DecoderStage { channels: 4, kernel: 3, stride: 2 });
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.data.train_limit, Some(10_000));
    }

    #[test]
    fn cell_keys_rebuild_the_cell() {
        let mut cfg = RunConfig::preset("fmnist").unwrap();
        cfg.set("mlce.cell2.iterations", "5").unwrap();
        cfg.set("cell1.types", "16").unwrap();
        match cfg.model.mlce.cell2.skip {
            SkipConfig::Routing3d(r) => assert_eq!(r.opts.iterations, 5),
            SkipConfig::ConvCaps(_) => panic!("MLCE cell lost its 3DR skip"),
        }
        assert_eq!(cfg.model.cells[0].out_types(), 16);
        assert!(cfg.set("cell1.iterations", "2").is_err());
    }

    #[test]
    fn bad_input_is_a_config_error_with_line_number() {
        for (text, needle) in [
            ("train.lr = fast", "line 1"),
            ("seed = 1\npreset = tiny", "must precede"),
            ("no_equals_sign", "key = value"),
            ("model.colour = red", "unknown key"),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn aliases_map_to_keys() {
        let mut cfg = RunConfig::preset("tiny").unwrap();
        cfg.apply_override("lr", "0").unwrap();
        cfg.apply_override("epochs-phase2", "3").unwrap();
        cfg.apply_override("data-dir", "/tmp/x").unwrap();
        assert_eq!(cfg.train.base_lr, 0.0);
        assert_eq!(cfg.train.epochs_phase2, 3);
        assert_eq!(cfg.data.resolved_dir(None), PathBuf::from("/tmp/x"));
        assert!(cfg.apply_override("preset", "cifar10").is_err());
    }

    #[test]
    fn validate_checks_dataset_against_model() {
        assert!(RunConfig::preset("fmnist_small").unwrap().validate().is_ok());
        assert!(RunConfig::preset("cifar10").unwrap().validate().is_ok());
        let mut cfg = RunConfig::preset("cifar10").unwrap();
        cfg.data.resize = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.set("data.dataset", "cifar100").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
