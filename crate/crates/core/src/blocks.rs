//! CapsCells and the multi-level capsule extractor (MLCE).

use rand_chacha::ChaCha8Rng;

use crate::capsule_ops::{squash, CapsSum, CapsSumConfig, ConvCaps, ConvCapsConfig};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::routing::{Routing3d, Routing3dConfig, RoutingOptions};
use crate::tensor::{Graph, Padding, Real, Var};

/// The skip path from the first ConvCaps layer to the cell output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipConfig {
    ConvCaps(ConvCapsConfig),
    Routing3d(Routing3dConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsCellConfig {
    pub layers: [ConvCapsConfig; 3],
    pub skip: SkipConfig,
}

impl CapsCellConfig {
    /// Three `K=3` ConvCaps layers of `types×dim` capsules, the first one
    /// strided, and a `1×1` ConvCaps skip.
    pub fn normal(types: usize, dim: usize, stride: usize) -> Self {
        Self {
            layers: Self::trunk(types, dim, stride),
            skip: SkipConfig::ConvCaps(ConvCapsConfig::new(1, dim, types, 1)),
        }
    }

    /// Like [`normal`](Self::normal) but the skip is a `K=3` 3DR layer.
    pub fn routing3d(types: usize, dim: usize, stride: usize, iterations: usize) -> Self {
        Self {
            layers: Self::trunk(types, dim, stride),
            skip: SkipConfig::Routing3d(Routing3dConfig {
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
                out_types: types,
                out_dim: dim,
                opts: RoutingOptions { iterations, detach_agreement: false },
            }),
        }
    }

    fn trunk(types: usize, dim: usize, stride: usize) -> [ConvCapsConfig; 3] {
        [
            ConvCapsConfig::new(3, dim, types, stride),
            ConvCapsConfig::new(3, dim, types, 1),
            ConvCapsConfig::new(3, dim, types, 1),
        ]
    }

    pub fn out_types(&self) -> usize {
        self.layers[2].types
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].dim
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut hw = (h, w);
        for l in &self.layers {
            hw = l.output_hw(hw.0, hw.1)?;
        }
        Ok(hw)
    }
}

#[derive(Debug, Clone)]
pub enum Skip {
    ConvCaps(ConvCaps),
    Routing3d(Routing3d),
}

/// Three ConvCaps layers with the first layer's output skip-connected to the
/// last layer's output; `squash(trunk + skip)`.
#[derive(Debug, Clone)]
pub struct CapsCell {
    pub cfg: CapsCellConfig,
    pub layers: [ConvCaps; 3],
    pub skip: Skip,
}

impl CapsCell {
    /// `in_channels` is the flattened `types·dim` of the input capsules.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        cfg: CapsCellConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let l1 = ConvCaps::new(store, &format!("{name}.conv1"), in_channels, cfg.layers[0], rng)?;
        let l2 = ConvCaps::new(store, &format!("{name}.conv2"), cfg.layers[0].out_channels(), cfg.layers[1], rng)?;
        let l3 = ConvCaps::new(store, &format!("{name}.conv3"), cfg.layers[1].out_channels(), cfg.layers[2], rng)?;
        let (skip_types, skip_dim, skip) = match cfg.skip {
            SkipConfig::ConvCaps(c) => {
                let layer = ConvCaps::new(store, &format!("{name}.skip"), cfg.layers[0].out_channels(), c, rng)?;
                (c.types, c.dim, Skip::ConvCaps(layer))
            }
            SkipConfig::Routing3d(r) => {
                let layer = Routing3d::new(store, &format!("{name}.skip"), cfg.layers[0].types, cfg.layers[0].dim, r, rng)?;
                (r.out_types, r.out_dim, Skip::Routing3d(layer))
            }
        };
        if (skip_types, skip_dim) != (cfg.out_types(), cfg.out_dim()) {
            return Err(Error::config(format!(
                "{name}: skip emits {skip_types}x{skip_dim} capsules but the trunk emits {}x{}",
                cfg.out_types(),
                cfg.out_dim()
            )));
        }
        Ok(Self { cfg, layers: [l1, l2, l3], skip })
    }

    /// `[N,H,W,T,D]` (or `[N,H,W,C]`) → `[N,H',W',N_v,D]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<Var> {
        let first = self.layers[0].forward(g, params, x)?;
        let second = self.layers[1].forward(g, params, first)?;
        let trunk = self.layers[2].forward(g, params, second)?;
        let skip = match &self.skip {
            Skip::ConvCaps(c) => c.forward(g, params, first)?,
            Skip::Routing3d(r) => r.forward(g, params, first)?,
        };
        if g.shape(trunk) != g.shape(skip) {
            return Err(Error::shape_mismatch("CapsCell trunk vs skip", g.shape(trunk), g.shape(skip)));
        }
        let merged = g.add(trunk, skip)?;
        squash(g, merged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlceConfig {
    pub cell1: CapsCellConfig,
    pub cell2: CapsCellConfig,
    pub sum1_out_dim: usize,
    pub sum2_out_dim: usize,
    /// Squash CapsSum outputs.
    pub sum_squash: bool,
    /// With `false`, the cell outputs are flattened and concatenated directly
    /// (both cells must then share a capsule dimension).
    pub caps_sum: bool,
}

impl MlceConfig {
    pub fn validate(&self) -> Result<()> {
        for cell in [&self.cell1, &self.cell2] {
            if !matches!(cell.skip, SkipConfig::Routing3d(_)) {
                return Err(Error::config("MLCE cells must use a 3DR skip"));
            }
        }
        if self.caps_sum && self.sum1_out_dim != self.sum2_out_dim {
            return Err(Error::config(format!(
                "MLCE CapsSum output dims differ: {} vs {}",
                self.sum1_out_dim, self.sum2_out_dim
            )));
        }
        if !self.caps_sum && self.cell1.out_dim() != self.cell2.out_dim() {
            return Err(Error::config(format!(
                "MLCE without CapsSum needs equal cell capsule dims, got {} vs {}",
                self.cell1.out_dim(),
                self.cell2.out_dim()
            )));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        if self.caps_sum {
            self.sum1_out_dim
        } else {
            self.cell1.out_dim()
        }
    }
}

/// Two stacked 3DR CapsCells, each summarized by a CapsSum; the low- and
/// high-level capsules are concatenated into `[N, w₁² + w₂², D_out]`.
#[derive(Debug, Clone)]
pub struct Mlce {
    pub cfg: MlceConfig,
    pub cell1: CapsCell,
    pub cell2: CapsCell,
    pub sum1: Option<CapsSum>,
    pub sum2: Option<CapsSum>,
    /// Spatial sizes `w₁`, `w₂` of the two cell outputs.
    pub widths: [usize; 2],
}

impl Mlce {
    /// `in_hw` is the spatial size of the input capsule map; CapsSum requires
    /// square maps.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        in_hw: (usize, usize),
        cfg: MlceConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let hw1 = cfg.cell1.output_hw(in_hw.0, in_hw.1)?;
        let hw2 = cfg.cell2.output_hw(hw1.0, hw1.1)?;
        if hw1.0 != hw1.1 || hw2.0 != hw2.1 {
            return Err(Error::config(format!("MLCE needs square capsule maps, got {hw1:?} and {hw2:?}")));
        }
        let cell1 = CapsCell::new(store, &format!("{name}.cell1"), in_channels, cfg.cell1, rng)?;
        let cell2 = CapsCell::new(store, &format!("{name}.cell2"), cfg.cell1.layers[2].out_channels(), cfg.cell2, rng)?;
        let (sum1, sum2) = if cfg.caps_sum {
            let c1 = CapsSumConfig {
                w: hw1.0,
                in_types: cfg.cell1.out_types(),
                in_dim: cfg.cell1.out_dim(),
                out_dim: cfg.sum1_out_dim,
                apply_squash: cfg.sum_squash,
            };
            let c2 = CapsSumConfig {
                w: hw2.0,
                in_types: cfg.cell2.out_types(),
                in_dim: cfg.cell2.out_dim(),
                out_dim: cfg.sum2_out_dim,
                apply_squash: cfg.sum_squash,
            };
            (
                Some(CapsSum::new(store, &format!("{name}.sum1"), c1, rng)?),
                Some(CapsSum::new(store, &format!("{name}.sum2"), c2, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { cfg, cell1, cell2, sum1, sum2, widths: [hw1.0, hw2.0] })
    }

    /// Number of capsules emitted per image.
    pub fn output_capsules(&self) -> usize {
        let [w1, w2] = self.widths;
        if self.cfg.caps_sum {
            w1 * w1 + w2 * w2
        } else {
            w1 * w1 * self.cfg.cell1.out_types() + w2 * w2 * self.cfg.cell2.out_types()
        }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    /// `[N,H,W,T,D]` → `[N, capsules, D_out]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<Var> {
        let c1 = self.cell1.forward(g, params, x)?;
        let c2 = self.cell2.forward(g, params, c1)?;
        let (low, high) = match (&self.sum1, &self.sum2) {
            (Some(s1), Some(s2)) => (s1.forward(g, params, c1)?, s2.forward(g, params, c2)?),
            _ => (c1, c2),
        };
        let n = g.shape(x)[0];
        let d = self.out_dim();
        let low = g.reshape(low, &[n, g.shape(low).iter().skip(1).product::<usize>() / d, d])?;
        let high = g.reshape(high, &[n, g.shape(high).iter().skip(1).product::<usize>() / d, d])?;
        g.concat(&[low, high], 1)
    }
}
