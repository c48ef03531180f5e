//! Routing-by-agreement between capsule layers.
//!
//! Dynamic routing (DR) connects every input capsule to every output capsule;
//! 3-D dynamic routing (3DR) produces votes with a per-type strided
//! convolution and routes only the votes that land on the same output
//! location. In both, coupling coefficients are recomputed on every forward
//! pass from zero logits and are never trained; gradients flow through the
//! unrolled iterations.

use rand_chacha::ChaCha8Rng;

use crate::capsule_ops::squash;
use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamId, ParamStore, ParamVars};
use crate::tensor::{conv_output_len, Graph, Padding, Real, Tensor, Var};

pub const DEFAULT_ITERATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iterations: usize,
    /// Treat the agreement update `b += û·v` as a constant in the backward pass.
    pub detach_agreement: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        Self { iterations: DEFAULT_ITERATIONS, detach_agreement: false }
    }
}

/// Values of one routing iteration, captured for inspection.
#[derive(Debug, Clone)]
pub struct RoutingState<F: Real> {
    /// `[B, N_in, N_out]` logits before this iteration's softmax.
    pub logits: Tensor<F>,
    /// `[B, N_in, N_out]`, softmax of `logits` over outputs.
    pub couplings: Tensor<F>,
    /// `[B, N_out, D]`, coupling-weighted vote sums.
    pub pre_activation: Tensor<F>,
    /// `[B, N_out, D]`, squashed `pre_activation`.
    pub outputs: Tensor<F>,
}

fn routing_core<F: Real>(
    g: &mut Graph<F>,
    votes: Var,
    opts: RoutingOptions,
    mut trace: Option<&mut Vec<RoutingState<F>>>,
) -> Result<Var> {
    if opts.iterations == 0 {
        return Err(Error::usage("routing needs at least one iteration"));
    }
    let shape = g.shape(votes).to_vec();
    let &[batch, n_in, n_out, dim] = shape.as_slice() else {
        return Err(Error::config(format!("votes must be [B, N_in, N_out, D], got {shape:?}")));
    };
    let mut logits = g.constant(Tensor::zeros(&[batch, n_in, n_out, 1]));
    let mut outputs = None;
    for it in 0..opts.iterations {
        let couplings = g.softmax(logits, 2)?;
        let weighted = g.mul(couplings, votes)?;
        let pre = g.reduce_sum(weighted, 1)?;
        let v = squash(g, pre)?;
        if let Some(trace) = trace.as_deref_mut() {
            let flat = |t: &Tensor<F>| t.clone().reshaped(&[batch, n_in, n_out]).expect("same numel");
            trace.push(RoutingState {
                logits: flat(g.value(logits)),
                couplings: flat(g.value(couplings)),
                pre_activation: g.value(pre).clone(),
                outputs: g.value(v).clone(),
            });
        }
        if it + 1 < opts.iterations {
            let v_b = g.reshape(v, &[batch, 1, n_out, dim])?;
            let prod = g.mul(votes, v_b)?;
            let agreement = g.reduce_sum(prod, 3)?;
            let mut agreement = g.reshape(agreement, &[batch, n_in, n_out, 1])?;
            if opts.detach_agreement {
                agreement = g.detach(agreement);
            }
            logits = g.add(logits, agreement)?;
        }
        outputs = Some(v);
    }
    Ok(outputs.expect("iterations ≥ 1"))
}

/// Routes `votes` `[B, N_in, N_out, D]` to output capsules `[B, N_out, D]`.
///
/// Each iteration: `c = softmax_out(b)`, `s_j = Σ_i c_ij û_ij`,
/// `v_j = squash(s_j)`, `b_ij += û_ij · v_j`.
pub fn dynamic_routing<F: Real>(g: &mut Graph<F>, votes: Var, opts: RoutingOptions) -> Result<Var> {
    routing_core(g, votes, opts, None)
}

/// [`dynamic_routing`] that also returns every iteration's state.
pub fn dynamic_routing_traced<F: Real>(
    g: &mut Graph<F>,
    votes: Var,
    opts: RoutingOptions,
) -> Result<(Var, Vec<RoutingState<F>>)> {
    let mut trace = Vec::with_capacity(opts.iterations);
    let v = routing_core(g, votes, opts, Some(&mut trace))?;
    Ok((v, trace))
}

/// Votes `û[n,i,j] = W[i,j] · u[n,i]` for `u` `[N, N_in, D_in]` and
/// `W` `[N_in, N_out, D_out, D_in]`, giving `[N, N_in, N_out, D_out]`.
pub fn compute_votes<F: Real>(g: &mut Graph<F>, u: Var, weights: Var) -> Result<Var> {
    let (us, ws) = (g.shape(u).to_vec(), g.shape(weights).to_vec());
    if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
        return Err(Error::shape_mismatch("compute_votes: capsules vs transformation matrices", &us, &ws));
    }
    let (n, n_in, d_in) = (us[0], us[1], us[2]);
    let (n_out, d_out) = (ws[1], ws[2]);
    let column = g.reshape(u, &[n, n_in, 1, d_in, 1])?;
    let votes = g.matmul(weights, column)?;
    g.reshape(votes, &[n, n_in, n_out, d_out])
}

/// Fully connected capsule layer with dynamic routing (`DRWeights` plus options).
#[derive(Debug, Clone)]
pub struct DynamicRouting {
    pub n_in: usize,
    pub n_out: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub opts: RoutingOptions,
    weight: ParamId,
}

impl DynamicRouting {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        d_in: usize,
        n_out: usize,
        d_out: usize,
        opts: RoutingOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_in == 0 || d_in == 0 || n_out == 0 || d_out == 0 {
            return Err(Error::config("dynamic routing dimensions must be ≥ 1"));
        }
        let weight = store.add(format!("{name}.weight"), he_uniform(&[n_in, n_out, d_out, d_in], d_in, rng))?;
        Ok(Self { n_in, n_out, d_in, d_out, opts, weight })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(n_in: usize, d_in: usize, n_out: usize, d_out: usize) -> usize {
        n_in * n_out * d_out * d_in
    }

    /// `[N, N_in, D_in]` → `[N, N_out, D_out]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, u: Var) -> Result<Var> {
        let votes = compute_votes(g, u, params.get(self.weight))?;
        dynamic_routing(g, votes, self.opts)
    }
}

/// Kernel, stride and output capsule shape of a 3DR layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing3dConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub out_types: usize,
    pub out_dim: usize,
    pub opts: RoutingOptions,
}

impl Routing3dConfig {
    pub fn param_count(&self, in_types: usize, in_dim: usize) -> usize {
        self.kernel * self.kernel * in_dim * in_types * self.out_types * self.out_dim
    }
}

/// 3-D dynamic routing: each input capsule type has its own vote convolution
/// (weights shared across spatial positions); routing then runs independently
/// at every output location over the `c_l` votes cast for each output type.
#[derive(Debug, Clone)]
pub struct Routing3d {
    pub cfg: Routing3dConfig,
    pub in_types: usize,
    pub in_dim: usize,
    kernel: ParamId,
}

impl Routing3d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_types: usize,
        in_dim: usize,
        cfg: Routing3dConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.kernel == 0 || cfg.stride == 0 || cfg.out_types == 0 || cfg.out_dim == 0 || in_types == 0 || in_dim == 0 {
            return Err(Error::config(format!("3DR dimensions must be ≥ 1, got {cfg:?}")));
        }
        let k = cfg.kernel;
        let shape = [k, k, in_dim, in_types * cfg.out_types * cfg.out_dim];
        let kernel = store.add(format!("{name}.kernel"), he_uniform(&shape, k * k * in_dim, rng))?;
        Ok(Self { cfg, in_types, in_dim, kernel })
    }

    pub fn kernel_id(&self) -> ParamId {
        self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |x| conv_output_len(x, self.cfg.kernel, self.cfg.stride, self.cfg.padding);
        match (out(h), out(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::config(format!("3DR {:?} does not fit a {h}x{w} input", self.cfg))),
        }
    }

    /// Votes `[N·H'·W', c_l, c_{l+1}, n_{l+1}]` for input `[N, H, W, c_l, n_l]`.
    pub fn votes<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<(Var, [usize; 3])> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[3] != self.in_types || shape[4] != self.in_dim {
            return Err(Error::shape_mismatch("3DR input", &shape, &[0, 0, 0, self.in_types, self.in_dim]));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[n, h, w, self.in_types * self.in_dim])?;
        let conv = g.conv2d_grouped(flat, params.get(self.kernel), None, self.cfg.stride, self.cfg.padding, self.in_types)?;
        let cs = g.shape(conv).to_vec();
        let votes = g.reshape(conv, &[n * cs[1] * cs[2], self.in_types, self.cfg.out_types, self.cfg.out_dim])?;
        Ok((votes, [n, cs[1], cs[2]]))
    }

    /// `[N, H, W, c_l, n_l]` → `[N, H', W', c_{l+1}, n_{l+1}]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParamVars, x: Var) -> Result<Var> {
        let (votes, [n, h, w]) = self.votes(g, params, x)?;
        let routed = dynamic_routing(g, votes, self.cfg.opts)?;
        g.reshape(routed, &[n, h, w, self.cfg.out_types, self.cfg.out_dim])
    }
}
