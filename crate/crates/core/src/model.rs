//! The full network: stem convolution, two normal CapsCells, MLCE, dynamic
//! routing to one capsule per class, and the class-independent decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{CapsCell, CapsCellConfig, Mlce, MlceConfig, Skip};
use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamId, ParamStore, ParamVars};
use crate::routing::{DynamicRouting, RoutingOptions};
use crate::tensor::{conv_output_len, softmax_values, FlushDenormals, Graph, Padding, Real, Tensor, Var};

pub const DEFAULT_INIT_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Channels grouped into each primary capsule after the stem.
    pub caps_dim: usize,
}

/// One transposed-convolution stage of the decoder (same padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// The selected capsule is mapped densely to a `seed_hw × seed_hw × seed_channels` map.
    pub seed_hw: usize,
    pub seed_channels: usize,
    pub stages: Vec<DecoderStage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(H, W, C)`.
    pub input: (usize, usize, usize),
    pub stem: StemConfig,
    pub cells: [CapsCellConfig; 2],
    pub mlce: MlceConfig,
    pub num_classes: usize,
    pub final_dim: usize,
    pub routing: RoutingOptions,
    pub decoder: DecoderConfig,
    /// Multiplier on the He-uniform init of every capsule-layer weight. Each
    /// squash maps a norm `x` to `x²/(1+x²) < x`, so with gain 1 capsule
    /// norms shrink layer over layer and vanish before the final routing.
    pub init_gain: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Widths shared by the presets, scaled down by `div`.
    fn preset(input: (usize, usize, usize), div: usize, decoder: DecoderConfig) -> Self {
        let types = 32 / div;
        let iterations = crate::routing::DEFAULT_ITERATIONS;
        Self {
            input,
            stem: StemConfig { filters: 128 / div, kernel: 3, stride: 1, caps_dim: 4 },
            cells: [CapsCellConfig::normal(types, 4, 2), CapsCellConfig::normal(types, 8, 2)],
            mlce: MlceConfig {
                cell1: CapsCellConfig::routing3d(types, 8, 2, iterations),
                cell2: CapsCellConfig::routing3d(types, 8, 2, iterations),
                sum1_out_dim: 8,
                sum2_out_dim: 8,
                sum_squash: true,
                caps_sum: true,
            },
            num_classes: 10,
            final_dim: 16,
            routing: RoutingOptions::default(),
            decoder,
            init_gain: DEFAULT_INIT_GAIN,
            seed: 0,
        }
    }

    /// 64×64×3 input (CIFAR-10 / SVHN after resizing).
    pub fn cifar10() -> Self {
        let stages = vec![
            DecoderStage { channels: 16, kernel: 3, stride: 2 },
            DecoderStage { channels: 8, kernel: 3, stride: 2 },
            DecoderStage { channels: 3, kernel: 3, stride: 2 },
        ];
        Self::preset((64, 64, 3), 1, DecoderConfig { seed_hw: 8, seed_channels: 16, stages })
    }

    /// 28×28×1 input.
    pub fn fmnist() -> Self {
        Self::preset((28, 28, 1), 1, Self::fmnist_decoder())
    }

    /// [`fmnist`](Self::fmnist) with every width divided by four.
    pub fn fmnist_small() -> Self {
        Self::preset((28, 28, 1), 4, Self::fmnist_decoder())
    }

    fn fmnist_decoder() -> DecoderConfig {
        let stages = vec![
            DecoderStage { channels: 16, kernel: 3, stride: 2 },
            DecoderStage { channels: 8, kernel: 3, stride: 2 },
            DecoderStage { channels: 1, kernel: 3, stride: 1 },
        ];
        DecoderConfig { seed_hw: 7, seed_channels: 16, stages }
    }

    /// 8×8×1 input, 2 classes, every width at most 4; small enough for a
    /// 64-bit whole-model gradient check.
    pub fn tiny() -> Self {
        Self {
            input: (8, 8, 1),
            stem: StemConfig { filters: 4, kernel: 3, stride: 1, caps_dim: 2 },
            cells: [CapsCellConfig::normal(2, 2, 2), CapsCellConfig::normal(2, 2, 1)],
            mlce: MlceConfig {
                cell1: CapsCellConfig::routing3d(2, 2, 2, 2),
                cell2: CapsCellConfig::routing3d(2, 2, 1, 2),
                sum1_out_dim: 2,
                sum2_out_dim: 2,
                sum_squash: true,
                caps_sum: true,
            },
            num_classes: 2,
            final_dim: 3,
            routing: RoutingOptions { iterations: 2, detach_agreement: false },
            decoder: DecoderConfig {
                seed_hw: 2,
                seed_channels: 2,
                stages: vec![
                    DecoderStage { channels: 2, kernel: 3, stride: 2 },
                    DecoderStage { channels: 1, kernel: 3, stride: 2 },
                ],
            },
            init_gain: DEFAULT_INIT_GAIN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!("input shape must be positive, got {:?}", self.input)));
        }
        let s = &self.stem;
        if s.filters == 0 || s.kernel == 0 || s.stride == 0 || s.caps_dim == 0 || !s.filters.is_multiple_of(s.caps_dim) {
            return Err(Error::config(format!("stem filters must be a positive multiple of caps_dim, got {s:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be ≥ 2, got {}", self.num_classes)));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        if self.final_dim == 0 || self.routing.iterations == 0 {
            return Err(Error::config("final_dim and routing iterations must be ≥ 1"));
        }
        let d = &self.decoder;
        if d.seed_hw == 0 || d.seed_channels == 0 || d.stages.is_empty() {
            return Err(Error::config("decoder needs a non-empty seed and at least one stage"));
        }
        let mut side = d.seed_hw;
        for st in &d.stages {
            if st.channels == 0 || st.kernel == 0 || st.stride == 0 {
                return Err(Error::config(format!("invalid decoder stage {st:?}")));
            }
            side *= st.stride;
        }
        let last = d.stages.last().expect("non-empty").channels;
        if side != h || side != w || last != c {
            return Err(Error::config(format!(
                "decoder reconstructs {side}x{side}x{last} but the input is {h}x{w}x{c}"
            )));
        }
        self.mlce.validate()
    }

    /// Capsules entering the final routing, with or without CapsSum.
    pub fn routing_input_capsules(&self, caps_sum: bool) -> Result<usize> {
        let mut cfg = self.clone();
        cfg.mlce.caps_sum = caps_sum;
        let [w1, w2] = cfg.mlce_widths()?;
        Ok(if caps_sum {
            w1 * w1 + w2 * w2
        } else {
            w1 * w1 * cfg.mlce.cell1.out_types() + w2 * w2 * cfg.mlce.cell2.out_types()
        })
    }

    fn stem_hw(&self) -> Result<(usize, usize)> {
        let out = |x| conv_output_len(x, self.stem.kernel, self.stem.stride, Padding::Same);
        match (out(self.input.0), out(self.input.1)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::config(format!("stem {:?} does not fit input {:?}", self.stem, self.input))),
        }
    }

    fn mlce_input_hw(&self) -> Result<(usize, usize)> {
        let mut hw = self.stem_hw()?;
        for cell in &self.cells {
            hw = cell.output_hw(hw.0, hw.1)?;
        }
        Ok(hw)
    }

    fn mlce_widths(&self) -> Result<[usize; 2]> {
        let hw = self.mlce_input_hw()?;
        let hw1 = self.mlce.cell1.output_hw(hw.0, hw.1)?;
        let hw2 = self.mlce.cell2.output_hw(hw1.0, hw1.1)?;
        Ok([hw1.0, hw2.0])
    }
}

/// Output capsules `[N, classes, D]` and their lengths `[N, classes]`.
#[derive(Debug, Clone, Copy)]
pub struct OutputCapsules {
    pub capsules: Var,
    pub lengths: Var,
}

#[derive(Debug, Clone)]
struct Decoder {
    dense_weight: ParamId,
    dense_bias: ParamId,
    stages: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    stem_kernel: ParamId,
    stem_bias: ParamId,
    pub cells: [CapsCell; 2],
    pub mlce: Mlce,
    pub routing: DynamicRouting,
    decoder: Decoder,
}

impl<F: Real> Model<F> {
    /// Builds the network with parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (_, _, c) = cfg.input;
        let s = cfg.stem;
        let stem_kernel = store.add("stem.kernel", he_uniform(&[s.kernel, s.kernel, c, s.filters], s.kernel * s.kernel * c, &mut rng))?;
        let stem_bias = store.add("stem.bias", Tensor::zeros(&[s.filters]))?;

        let cell1 = CapsCell::new(&mut store, "cell1", s.filters, cfg.cells[0], &mut rng)
            .map_err(|e| layer_error("stem", "cell1", e))?;
        let cell2 = CapsCell::new(&mut store, "cell2", cfg.cells[0].layers[2].out_channels(), cfg.cells[1], &mut rng)
            .map_err(|e| layer_error("cell1", "cell2", e))?;
        let mlce_hw = cfg.mlce_input_hw()?;
        let mlce = Mlce::new(&mut store, "mlce", cfg.cells[1].layers[2].out_channels(), mlce_hw, cfg.mlce, &mut rng)
            .map_err(|e| layer_error("cell2", "mlce", e))?;
        let routing = DynamicRouting::new(
            &mut store,
            "routing",
            mlce.output_capsules(),
            mlce.out_dim(),
            cfg.num_classes,
            cfg.final_dim,
            cfg.routing,
            &mut rng,
        )?;

        let d = &cfg.decoder;
        let seed_len = d.seed_hw * d.seed_hw * d.seed_channels;
        let dense_weight = store.add("decoder.dense.weight", he_uniform(&[cfg.final_dim, seed_len], cfg.final_dim, &mut rng))?;
        let dense_bias = store.add("decoder.dense.bias", Tensor::zeros(&[seed_len]))?;
        let mut stages = Vec::with_capacity(d.stages.len());
        let mut cin = d.seed_channels;
        for (i, st) in d.stages.iter().enumerate() {
            let k = st.kernel;
            let kernel = store.add(
                format!("decoder.deconv{}.kernel", i + 1),
                he_uniform(&[k, k, st.channels, cin], k * k * cin, &mut rng),
            )?;
            let bias = store.add(format!("decoder.deconv{}.bias", i + 1), Tensor::zeros(&[st.channels]))?;
            stages.push((kernel, bias));
            cin = st.channels;
        }
        let decoder = Decoder { dense_weight, dense_bias, stages };
        let mut model = Self { cfg, params: store, stem_kernel, stem_bias, cells: [cell1, cell2], mlce, routing, decoder };
        let gain = F::from_f64(model.cfg.init_gain);
        for id in model.capsule_weight_ids() {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= gain);
        }
        Ok(model)
    }

    /// Kernels and weight maps of every capsule layer (cells, MLCE, routing).
    fn capsule_weight_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for cell in self.cells.iter().chain([&self.mlce.cell1, &self.mlce.cell2]) {
            ids.extend(cell.layers.iter().map(|l| l.kernel_id()));
            ids.push(match &cell.skip {
                Skip::ConvCaps(c) => c.kernel_id(),
                Skip::Routing3d(r) => r.kernel_id(),
            });
        }
        ids.extend(self.mlce.sum1.iter().chain(&self.mlce.sum2).map(|s| s.weight_id()));
        ids.push(self.routing.weight_id());
        ids
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stem_kernel: self.stem_kernel,
            stem_bias: self.stem_bias,
            cells: self.cells.clone(),
            mlce: self.mlce.clone(),
            routing: self.routing.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts grouped by layer (parameter name minus its last
    /// component), in construction order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            match rows.last_mut() {
                Some((last, n)) if last == layer => *n += t.len(),
                _ => rows.push((layer.to_string(), t.len())),
            }
        }
        rows
    }

    /// `[N, H, W, C]` images → output capsules.
    pub fn forward(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<OutputCapsules> {
        let shape = g.shape(x).to_vec();
        let (h, w, c) = self.cfg.input;
        if shape.len() != 4 || shape[1..] != [h, w, c] {
            return Err(Error::usage(format!("model expects [N, {h}, {w}, {c}] input, got {shape:?}")));
        }
        let n = shape[0];
        let s = self.cfg.stem;
        let stem = g.conv2d(x, params.get(self.stem_kernel), Some(params.get(self.stem_bias)), s.stride, Padding::Same)?;
        let stem = g.relu(stem)?;
        let ss = g.shape(stem).to_vec();
        let caps = g.reshape(stem, &[n, ss[1], ss[2], s.filters / s.caps_dim, s.caps_dim])?;
        let c1 = self.cells[0].forward(g, params, caps)?;
        let c2 = self.cells[1].forward(g, params, c1)?;
        let primary = self.mlce.forward(g, params, c2)?;
        let capsules = self.routing.forward(g, params, primary)?;
        let lengths = g.l2_norm(capsules, 2)?;
        Ok(OutputCapsules { capsules, lengths })
    }

    /// Decoder pre-activations for the capsule of `classes[n]` in each row;
    /// all other capsules are dropped before the decoder.
    pub fn decode_logits(&self, g: &mut Graph<F>, params: &ParamVars, capsules: Var, classes: &[usize]) -> Result<Var> {
        let n = classes.len();
        let selected = g.select(capsules, classes)?;
        let seed = g.matmul(selected, params.get(self.decoder.dense_weight))?;
        let seed = g.add(seed, params.get(self.decoder.dense_bias))?;
        let seed = g.relu(seed)?;
        let d = &self.cfg.decoder;
        let mut x = g.reshape(seed, &[n, d.seed_hw, d.seed_hw, d.seed_channels])?;
        for (i, (&(kernel, bias), st)) in self.decoder.stages.iter().zip(&d.stages).enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            x = g.conv2d_transpose(x, params.get(kernel), Some(params.get(bias)), st.stride, Padding::Same)?;
        }
        Ok(x)
    }

    /// Reconstruction in `[0, 1]` from the selected class capsules.
    pub fn decode(&self, g: &mut Graph<F>, params: &ParamVars, capsules: Var, classes: &[usize]) -> Result<Var> {
        let logits = self.decode_logits(g, params, capsules, classes)?;
        g.sigmoid(logits)
    }

    /// Names of the decoder's parameters; the same set serves every class.
    pub fn decoder_param_names(&self) -> Vec<&str> {
        let mut ids = vec![self.decoder.dense_weight, self.decoder.dense_bias];
        for &(k, b) in &self.decoder.stages {
            ids.extend([k, b]);
        }
        ids.into_iter().map(|id| self.params.name(id)).collect()
    }

    /// Output-capsule lengths for `images`, evaluated in chunks of `batch` rows
    /// without recording gradients.
    pub fn infer_lengths(&self, images: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
        let _ftz = FlushDenormals::new();
        let shape = images.shape().to_vec();
        let n = *shape.first().ok_or_else(|| Error::usage("empty image tensor"))?;
        let per = shape[1..].iter().product::<usize>();
        let k = self.num_classes();
        let mut out = Vec::with_capacity(n * k);
        for start in (0..n).step_by(batch.max(1)) {
            let len = batch.max(1).min(n - start);
            let mut chunk_shape = shape.clone();
            chunk_shape[0] = len;
            let chunk = Tensor::new(&chunk_shape, images.data()[start * per..(start + len) * per].to_vec())?;
            let mut g = Graph::new();
            let pv = self.params.attach_frozen(&mut g);
            let x = g.constant(chunk);
            let o = self.forward(&mut g, &pv, x)?;
            out.extend_from_slice(g.value(o.lengths).data());
        }
        Tensor::new(&[n, k], out)
    }
}

fn layer_error(from: &str, to: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{from} -> {to}: {msg}")),
        other => other,
    }
}

/// Row-wise argmax of `[N, K]` scores; ties go to the lowest index.
pub fn predict<F: Real>(scores: &Tensor<F>) -> Vec<usize> {
    let k = *scores.shape().last().expect("rank ≥ 1");
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Softmax over classes of the capsule lengths `[N, K]`; the per-member
/// scores averaged by [`ensemble_predict`].
pub fn class_probabilities<F: Real>(lengths: &Tensor<F>) -> Tensor<F> {
    softmax_values(lengths, lengths.rank() - 1)
}

/// Mean of the members' `[N, K]` softmax outputs, then [`predict`].
pub fn ensemble_predict<F: Real>(members: &[Tensor<F>]) -> Result<Vec<usize>> {
    let first = members.first().ok_or_else(|| Error::usage("ensemble needs at least one member"))?;
    let mut sum = vec![0.0f64; first.len()];
    for m in members {
        if m.shape() != first.shape() {
            return Err(Error::shape_mismatch("ensemble members", first.shape(), m.shape()));
        }
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v.as_f64();
        }
    }
    let count = members.len() as f64;
    let mean = Tensor::<f64>::new(first.shape(), sum.into_iter().map(|s| s / count).collect())?;
    Ok(predict(&mean))
}
