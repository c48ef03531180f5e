//! The 64-bit finite-difference suite: one named case per differentiable op
//! and layer, plus the whole tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{CapsCell, CapsCellConfig};
use crate::capsule_ops::{squash, squash_with_faulty_backward, CapsSum, CapsSumConfig, ConvCaps, ConvCapsConfig};
use crate::data_io::one_hot;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, ParamVars};
use crate::routing::{compute_votes, dynamic_routing, Routing3d, Routing3dConfig, RoutingOptions};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{Graph, Padding, Tensor, Var};
use crate::training::{batch_loss, hard_training_params, margin_loss, reconstruction_loss};

pub const EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Model,
}

/// A deliberately broken backward pass, to show the suite catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Squash,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

/// Uniform in `[lo, hi)`.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).expect("shape matches")
}

/// Uniform magnitude in `[0.1, 1)` with random sign, away from relu kinks.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> =
        (0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate gets a
/// distinct upstream gradient.
fn readout(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn case<const N: usize>(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    inputs: [Tensor<f64>; N],
    out_shape: &[usize],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = rand_tensor(rng, out_shape, -1.0, 1.0);
    Case {
        name,
        tolerance: OP_TOLERANCE,
        inputs: inputs.to_vec(),
        f: Box::new(move |g, v| {
            let out = f(g, v)?;
            readout(g, out, &w)
        }),
    }
}

fn op_cases(fault: Option<Fault>) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(0x6C0C);
    let r = &mut r;
    let mut cases = Vec::new();

    let (a, b) = (rand_signed(r, &[2, 3, 4]), rand_signed(r, &[3, 1]));
    cases.push(case(r, "add", [a.clone(), b.clone()], &[2, 3, 4], |g, v| g.add(v[0], v[1])));
    cases.push(case(r, "sub", [a.clone(), b.clone()], &[2, 3, 4], |g, v| g.sub(v[0], v[1])));
    cases.push(case(r, "mul", [a.clone(), b.clone()], &[2, 3, 4], |g, v| g.mul(v[0], v[1])));
    let pos = rand_tensor(r, &[3, 1], 0.5, 2.0);
    cases.push(case(r, "div", [a.clone(), pos], &[2, 3, 4], |g, v| g.div(v[0], v[1])));
    cases.push(case(r, "relu", [a.clone()], &[2, 3, 4], |g, v| g.relu(v[0])));
    cases.push(case(r, "sigmoid", [a.clone()], &[2, 3, 4], |g, v| g.sigmoid(v[0])));
    cases.push(case(r, "square", [a.clone()], &[2, 3, 4], |g, v| g.square(v[0])));
    cases.push(case(r, "exp", [a.clone()], &[2, 3, 4], |g, v| g.exp(v[0])));
    cases.push(case(r, "scale", [a.clone()], &[2, 3, 4], |g, v| g.scale(v[0], -1.7)));
    cases.push(case(r, "add_scalar", [a.clone()], &[2, 3, 4], |g, v| g.add_scalar(v[0], 0.3)));
    cases.push(case(r, "neg", [a.clone()], &[2, 3, 4], |g, v| g.neg(v[0])));
    cases.push(case(r, "reshape", [a.clone()], &[4, 6], |g, v| g.reshape(v[0], &[4, 6])));
    let c = rand_signed(r, &[2, 2, 4]);
    cases.push(case(r, "concat", [a.clone(), c], &[2, 5, 4], |g, v| g.concat(&[v[0], v[1]], 1)));
    cases.push(case(r, "slice", [a.clone()], &[2, 3, 2], |g, v| g.slice(v[0], 2, 1, 2)));
    cases.push(case(r, "reduce_sum", [a.clone()], &[2, 4], |g, v| g.reduce_sum(v[0], 1)));
    cases.push(case(r, "reduce_mean", [a.clone()], &[2, 3], |g, v| g.reduce_mean(v[0], 2)));
    cases.push(case(r, "sum", [a.clone()], &[1], |g, v| {
        let s = g.sum(v[0])?;
        g.reshape(s, &[1])
    }));
    cases.push(case(r, "mean", [a.clone()], &[1], |g, v| {
        let s = g.mean(v[0])?;
        g.reshape(s, &[1])
    }));
    cases.push(case(r, "softmax", [a.clone()], &[2, 3, 4], |g, v| g.softmax(v[0], 1)));
    cases.push(case(r, "l2_norm", [a.clone()], &[2, 3], |g, v| g.l2_norm(v[0], 2)));
    let (m1, m2) = (rand_signed(r, &[2, 3, 4]), rand_signed(r, &[4, 5]));
    cases.push(case(r, "matmul", [m1, m2], &[2, 3, 5], |g, v| g.matmul(v[0], v[1])));
    let sel = rand_signed(r, &[3, 4, 2]);
    cases.push(case(r, "select", [sel], &[3, 2], |g, v| g.select(v[0], &[2, 0, 3])));

    let x = rand_signed(r, &[2, 5, 5, 3]);
    let (k, bias) = (rand_signed(r, &[3, 3, 3, 4]), rand_signed(r, &[4]));
    cases.push(case(r, "conv2d_same_stride2", [x.clone(), k.clone(), bias.clone()], &[2, 3, 3, 4], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same)
    }));
    cases.push(case(r, "conv2d_valid", [x.clone(), k.clone()], &[2, 3, 3, 4], |g, v| {
        g.conv2d(v[0], v[1], None, 1, Padding::Valid)
    }));
    let xg = rand_signed(r, &[1, 4, 4, 4]);
    let kg = rand_signed(r, &[3, 3, 2, 6]);
    cases.push(case(r, "conv2d_grouped", [xg, kg], &[1, 4, 4, 6], |g, v| {
        g.conv2d_grouped(v[0], v[1], None, 1, Padding::Same, 2)
    }));
    let xt = rand_signed(r, &[2, 3, 3, 2]);
    let (kt, bt) = (rand_signed(r, &[3, 3, 3, 2]), rand_signed(r, &[3]));
    cases.push(case(r, "conv2d_transpose", [xt, kt, bt], &[2, 6, 6, 3], |g, v| {
        g.conv2d_transpose(v[0], v[1], Some(v[2]), 2, Padding::Same)
    }));

    let s = rand_signed(r, &[2, 3, 8]);
    cases.push(match fault {
        Some(Fault::Squash) => case(r, "squash", [s], &[2, 3, 8], |g, v| squash_with_faulty_backward(g, v[0], 1.5)),
        None => case(r, "squash", [s], &[2, 3, 8], |g, v| squash(g, v[0])),
    });

    let lengths = rand_tensor(r, &[4, 3], 0.0, 1.0);
    let targets = one_hot::<f64>(&[0, 2, 1, 2], 3);
    for (name, phase) in [("margin_loss_phase1", 1), ("margin_loss_phase2", 2)] {
        let p = hard_training_params(phase).expect("phase 1 or 2");
        let t = targets.clone();
        cases.push(Case {
            name,
            tolerance: OP_TOLERANCE,
            inputs: vec![lengths.clone()],
            f: Box::new(move |g, v| {
                let t = g.constant(t.clone());
                margin_loss(g, v[0], t, p)
            }),
        });
    }
    let caps = rand_signed(r, &[4, 8]);
    let wmat = rand_tensor(r, &[8, 24], -0.5, 0.5);
    let t = targets.clone();
    cases.push(Case {
        name: "margin_squash_matmul",
        tolerance: OP_TOLERANCE,
        inputs: vec![caps, wmat],
        f: Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.reshape(y, &[4, 3, 8])?;
            let y = squash(g, y)?;
            let l = g.l2_norm(y, 2)?;
            let t = g.constant(t.clone());
            margin_loss(g, l, t, hard_training_params(1).expect("phase 1"))
        }),
    });
    let (rec, img) = (rand_tensor(r, &[2, 4, 4, 1], 0.0, 1.0), rand_tensor(r, &[2, 4, 4, 1], 0.0, 1.0));
    cases.push(Case {
        name: "reconstruction_loss",
        tolerance: OP_TOLERANCE,
        inputs: vec![rec, img],
        f: Box::new(|g, v| reconstruction_loss(g, v[0], v[1], 0.0005 * 16.0)),
    });

    let (u, wv) = (rand_signed(r, &[2, 5, 3]), rand_tensor(r, &[5, 4, 6, 3], -0.5, 0.5));
    cases.push(case(r, "compute_votes", [u, wv], &[2, 5, 4, 6], |g, v| compute_votes(g, v[0], v[1])));
    let votes = rand_signed(r, &[2, 6, 3, 4]);
    cases.push(case(r, "dynamic_routing_1_iteration", [votes.clone()], &[2, 3, 4], |g, v| {
        dynamic_routing(g, v[0], RoutingOptions { iterations: 1, detach_agreement: false })
    }));
    cases.push(case(r, "dynamic_routing", [votes], &[2, 3, 4], |g, v| {
        dynamic_routing(g, v[0], RoutingOptions::default())
    }));

    cases.extend(layer_cases(r));
    cases
}

/// Layers whose parameters come from a [`ParamStore`]; every parameter and
/// the input are checked.
fn layer_case(
    r: &mut ChaCha8Rng,
    name: &'static str,
    store: ParamStore<f64>,
    input: Tensor<f64>,
    out_shape: &[usize],
    f: impl Fn(&mut Graph<f64>, &ParamVars, Var) -> Result<Var> + 'static,
) -> Case {
    let mut inputs = vec![input];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let w = rand_tensor(r, out_shape, -1.0, 1.0);
    Case {
        name,
        tolerance: OP_TOLERANCE,
        inputs,
        f: Box::new(move |g, v| {
            let pv = ParamVars::from_vars(v[1..].to_vec());
            let out = f(g, &pv, v[0])?;
            readout(g, out, &w)
        }),
    }
}

fn layer_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut init = ChaCha8Rng::seed_from_u64(7);

    let mut store = ParamStore::new();
    let cc = ConvCaps::new(&mut store, "cc", 4, ConvCapsConfig::new(3, 3, 2, 2), &mut init).expect("valid");
    let x = rand_signed(r, &[1, 4, 4, 2, 2]);
    cases.push(layer_case(r, "conv_caps", store, x, &[1, 2, 2, 2, 3], move |g, p, x| cc.forward(g, p, x)));

    let mut store = ParamStore::new();
    let cfg = CapsSumConfig { w: 2, in_types: 3, in_dim: 2, out_dim: 3, apply_squash: true };
    let cs = CapsSum::new(&mut store, "sum", cfg, &mut init).expect("valid");
    let x = rand_signed(r, &[2, 2, 2, 3, 2]);
    cases.push(layer_case(r, "caps_sum", store, x, &[2, 2, 2, 1, 3], move |g, p, x| cs.forward(g, p, x)));

    let mut store = ParamStore::new();
    let cfg = Routing3dConfig {
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
        out_types: 2,
        out_dim: 3,
        opts: RoutingOptions::default(),
    };
    let r3 = Routing3d::new(&mut store, "r3", 2, 2, cfg, &mut init).expect("valid");
    let x = rand_signed(r, &[1, 3, 3, 2, 2]);
    cases.push(layer_case(r, "routing_3d", store, x, &[1, 3, 3, 2, 3], move |g, p, x| r3.forward(g, p, x)));

    let mut store = ParamStore::new();
    let cell = CapsCell::new(&mut store, "cell", 4, CapsCellConfig::normal(2, 2, 2), &mut init).expect("valid");
    let x = rand_signed(r, &[1, 4, 4, 2, 2]);
    cases.push(layer_case(r, "caps_cell_normal", store, x, &[1, 2, 2, 2, 2], move |g, p, x| cell.forward(g, p, x)));

    let mut store = ParamStore::new();
    let cell = CapsCell::new(&mut store, "cell", 4, CapsCellConfig::routing3d(2, 2, 1, 2), &mut init).expect("valid");
    let x = rand_signed(r, &[1, 3, 3, 2, 2]);
    cases.push(layer_case(r, "caps_cell_3dr", store, x, &[1, 3, 3, 2, 2], move |g, p, x| cell.forward(g, p, x)));
    cases
}

fn model_cases() -> Result<Vec<Case>> {
    let model = Model::<f64>::new(ModelConfig::tiny())?;
    let mut r = ChaCha8Rng::seed_from_u64(0x7159);
    let (h, w, c) = model.cfg.input;
    let images = rand_tensor(&mut r, &[2, h, w, c], 0.0, 1.0);
    let labels = vec![1, 0];
    let targets = one_hot::<f64>(&labels, model.num_classes());
    let recon_weight = 0.0005 * (h * w * c) as f64;
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let f = move |g: &mut Graph<f64>, v: &[Var]| {
        let pv = ParamVars::from_vars(v.to_vec());
        let x = g.constant(images.clone());
        let t = g.constant(targets.clone());
        let p = hard_training_params(1).expect("phase 1");
        Ok(batch_loss(&model, g, &pv, x, t, &labels, p, recon_weight)?.0)
    };
    Ok(vec![Case { name: "tiny_model_loss", tolerance: MODEL_TOLERANCE, inputs, f: Box::new(f) }])
}

/// Runs every case of `scope`; `on_case` sees each result as it finishes.
pub fn run_suite(scope: Scope, fault: Option<Fault>, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let cases = match scope {
        Scope::Ops => op_cases(fault),
        Scope::Model => model_cases()?,
    };
    let mut results = Vec::with_capacity(cases.len());
    for c in cases {
        let report = check_gradients(&c.f, &c.inputs, EPS)?;
        let res = CaseResult { name: c.name.to_string(), tolerance: c.tolerance, report };
        on_case(&res);
        results.push(res);
    }
    Ok(results)
}

/// The case with the largest error relative to its tolerance.
pub fn worst(results: &[CaseResult]) -> Option<&CaseResult> {
    results.iter().max_by(|a, b| {
        let ra = a.report.max_rel_error / a.tolerance;
        let rb = b.report.max_rel_error / b.tolerance;
        ra.total_cmp(&rb)
    })
}
