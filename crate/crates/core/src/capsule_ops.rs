//! Capsule primitives: the squash nonlinearity, convolutional capsule layers
//! and capsule summarization.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamId, ParamStore, ParamVars};
use crate::tensor::{conv_output_len, Graph, Op, Padding, Real, Tensor, Var};

/// Added to the vector norm in the squash denominator.
pub const SQUASH_EPS: f64 = 1e-8;

/// `v = ‖s‖² / (1 + ‖s‖²) · s / (‖s‖ + ε)` over the last axis.
struct Squash {
    /// Scales the backward pass; anything but 1 is a deliberately broken op.
    backward_gain: f64,
}

/// (f, (2D − n·D′)/D²) with f = n²/D and D = (1+n²)(n+ε); the second term is f′(n)/n.
fn squash_factors(n: f64) -> (f64, f64) {
    let d = (1.0 + n * n) * (n + SQUASH_EPS);
    let d_prime = 2.0 * n * (n + SQUASH_EPS) + (1.0 + n * n);
    (n * n / d, (2.0 * d - n * d_prime) / (d * d))
}

fn squash_values<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let dim = *x.shape().last().expect("squash needs rank ≥ 1");
    let mut out = x.clone();
    for v in out.data_mut().chunks_mut(dim) {
        let n = v.iter().map(|&e| e.as_f64() * e.as_f64()).sum::<f64>().sqrt();
        let (f, _) = squash_factors(n);
        let f = F::from_f64(f);
        for e in v {
            *e *= f;
        }
    }
    out
}

impl<F: Real> Op<F> for Squash {
    fn name(&self) -> &'static str {
        "squash"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>, _: &[bool]) -> Vec<Option<Tensor<F>>> {
        let x = inputs[0];
        let dim = *x.shape().last().expect("rank ≥ 1");
        let mut gx = Tensor::zeros(x.shape());
        let gain = self.backward_gain;
        for ((s, g), out) in x.data().chunks(dim).zip(grad.data().chunks(dim)).zip(gx.data_mut().chunks_mut(dim)) {
            let n = s.iter().map(|&e| e.as_f64() * e.as_f64()).sum::<f64>().sqrt();
            let (f, h) = squash_factors(n);
            let sg: f64 = s.iter().zip(g).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
            for ((o, &si), &gi) in out.iter_mut().zip(s).zip(g) {
                *o = F::from_f64(gain * (f * gi.as_f64() + h * sg * si.as_f64()));
            }
        }
        vec![Some(gx)]
    }
}

/// Squashes every vector along the last axis to the same direction with norm in `[0, 1)`.
pub fn squash<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    if g.shape(x).is_empty() {
        return Err(Error::usage("squash needs a tensor of rank ≥ 1"));
    }
    let out = squash_values(g.value(x));
    g.apply(Squash { backward_gain: 1.0 }, &[x], out)
}

/// Squash with a backward pass scaled by `gain`; used only to prove that the
/// gradient checker catches a broken op.
#[doc(hidden)]
pub fn squash_with_faulty_backward<F: Real>(g: &mut Graph<F>, x: Var, gain: f64) -> Result<Var> {
    let out = squash_values(g.value(x));
    g.apply(Squash { backward_gain: gain }, &[x], out)
}

/// Kernel size `K`, capsule dimensionality `D`, capsule types per location `N_v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCapsConfig {
    pub kernel: usize,
    pub dim: usize,
    pub types: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvCapsConfig {
    pub fn new(kernel: usize, dim: usize, types: usize, stride: usize) -> Self {
        Self { kernel, dim, types, stride, padding: Padding::Same }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.dim == 0 || self.types == 0 || self.stride == 0 {
            return Err(Error::config(format!("ConvCaps needs K, D, N_v, stride ≥ 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.types * self.dim
    }

    /// Kernel plus bias.
    pub fn param_count(&self, in_channels: usize) -> usize {
        self.kernel * self.kernel * in_channels * self.out_channels() + self.out_channels()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |x| conv_output_len(x, self.kernel, self.stride, self.padding);
        match (out(h), out(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::config(format!("ConvCaps {self:?} does not fit a {h}x{w} input"))),
        }
    }
}

/// Capsule tensor view `[N, H, W, types, dim]` or flat feature map `[N, H, W, C]`.
fn flat_channels(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        4 => Ok(shape[3]),
        5 => Ok(shape[3] * shape[4]),
        _ => Err(Error::config(format!("expected [N,H,W,C] or [N,H,W,T,D], got {shape:?}"))),
    }
}

/// A convolution over flattened capsule channels whose output is regrouped
/// into `types` capsules of `dim` values per location and squashed.
#[derive(Debug, Clone)]
pub struct ConvCaps {
    pub cfg: ConvCapsConfig,
    pub in_channels: usize,
    kernel: ParamId,
    bias: ParamId,
}

impl ConvCaps {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        cfg: ConvCapsConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let kernel = store.add(
            format!("{name}.kernel"),
            he_uniform(&[k, k, in_channels, cfg.out_channels()], k * k * in_channels, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cfg.out_channels()]))?;
        Ok(Self { cfg, in_channels, kernel, bias })
    }

    pub fn kernel_id(&self) -> ParamId {
        self.kernel
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// `[N,H,W,C]` or `[N,H,W,T,D]` → `[N,H',W',N_v,D]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let channels = flat_channels(&shape)?;
        if channels != self.in_channels {
            return Err(Error::config(format!(
                "ConvCaps expects {} input channels, got shape {shape:?}",
                self.in_channels
            )));
        }
        let flat = if shape.len() == 5 { g.reshape(x, &[shape[0], shape[1], shape[2], channels])? } else { x };
        let y = g.conv2d(flat, params.get(self.kernel), Some(params.get(self.bias)), self.cfg.stride, self.cfg.padding)?;
        let ys = g.shape(y).to_vec();
        let caps = g.reshape(y, &[ys[0], ys[1], ys[2], self.cfg.types, self.cfg.dim])?;
        squash(g, caps)
    }
}

/// Capsule summarization over a `w×w` grid of `S` capsules of `D_in` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsSumConfig {
    pub w: usize,
    pub in_types: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub apply_squash: bool,
}

impl CapsSumConfig {
    /// `w·w` independent maps of `S·D_in → D_out` plus a bias each.
    pub fn param_count(&self) -> usize {
        self.w * self.w * (self.in_types * self.in_dim * self.out_dim + self.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.in_types == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config(format!("CapsSum dimensions must be ≥ 1, got {self:?}")));
        }
        Ok(())
    }
}

/// One dense map per spatial location, collapsing that location's `S`
/// capsules into a single capsule; capsule count drops by a factor of `S`.
#[derive(Debug, Clone)]
pub struct CapsSum {
    pub cfg: CapsSumConfig,
    weight: ParamId,
    bias: ParamId,
}

impl CapsSum {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: CapsSumConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let locations = cfg.w * cfg.w;
        let fan_in = cfg.in_types * cfg.in_dim;
        let weight = store.add(format!("{name}.weight"), he_uniform(&[locations, fan_in, cfg.out_dim], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[locations, cfg.out_dim]))?;
        Ok(Self { cfg, weight, bias })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// `[N, w, w, S, D_in]` → `[N, w, w, 1, D_out]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<Var> {
        let c = self.cfg;
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != c.w || shape[2] != c.w || shape[3] != c.in_types || shape[4] != c.in_dim {
            return Err(Error::shape_mismatch("CapsSum input", &shape, &[0, c.w, c.w, c.in_types, c.in_dim]));
        }
        let n = shape[0];
        let locations = c.w * c.w;
        let rows = g.reshape(x, &[n, locations, 1, c.in_types * c.in_dim])?;
        let mapped = g.matmul(rows, params.get(self.weight))?;
        let mapped = g.reshape(mapped, &[n, locations, c.out_dim])?;
        let mut out = g.add(mapped, params.get(self.bias))?;
        if c.apply_squash {
            out = squash(g, out)?;
        }
        g.reshape(out, &[n, c.w, c.w, 1, c.out_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squash_factor_limits() {
        let (f0, h0) = squash_factors(0.0);
        assert_eq!(f0, 0.0);
        assert!(h0.is_finite());
        let (f1, _) = squash_factors(1.0);
        assert!((f1 - 0.5 / (1.0 + SQUASH_EPS)).abs() < 1e-15);
    }

    #[test]
    fn caps_sum_param_count_formula() {
        let cfg = CapsSumConfig { w: 4, in_types: 8, in_dim: 4, out_dim: 8, apply_squash: true };
        assert_eq!(cfg.param_count(), 4224);
    }
}
