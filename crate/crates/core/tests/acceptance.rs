//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The reduced-scale FMNIST runs read the IDX files
//! from `$DLCAPS_DATA_DIR/fashion-mnist` (default `<workspace>/data`).

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{max_abs_diff, naive_dynamic_routing, naive_margin, naive_routing3d, rand_tensor, rng, same_pad};
use dlcaps::blocks::CapsCellConfig;
use dlcaps::checkpoint::Checkpoint;
use dlcaps::config::{RunConfig, DATA_DIR_ENV};
use dlcaps::data_io::{Dataset, Split};
use dlcaps::gradcheck::{run_suite, worst, Scope};
use dlcaps::model::{ensemble_predict, Model, ModelConfig};
use dlcaps::params::ParamStore;
use dlcaps::routing::{dynamic_routing_traced, Routing3d, Routing3dConfig, RoutingOptions};
use dlcaps::training::{evaluate, hard_training_params, margin_loss, run_training, score, MarginLossParams, RunOutput};
use dlcaps::{Graph, Padding, Tensor};
use rand::Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const RUN_BUDGET: Duration = Duration::from_secs(60 * 60);
const MIN_REDUCED_ACC: f64 = 0.80;
const PHASE2_SLACK: f64 = 0.02;
const ENSEMBLE_SLACK: f64 = 0.005;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results = match run_suite(Scope::Ops, None, |_| {}) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("op suite error: {e}")),
    };
    match run_suite(Scope::Model, None, |_| {}) {
        Ok(r) => results.extend(r),
        Err(e) => return outcome(false, format!("model suite error: {e}")),
    }
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let w = worst(&results).expect("non-empty suite");
    let detail = format!(
        "{} cases, worst {} rel {:.2e} (tol {:.0e}), {:.1}s; failed: {:?}",
        results.len(),
        w.name,
        w.report.max_rel_error,
        w.tolerance,
        elapsed.as_secs_f64(),
        failed
    );
    outcome(failed.is_empty() && elapsed < GRADCHECK_BUDGET, detail)
}

fn routing_oracles() -> Outcome {
    let mut r = rng(901);
    let mut dr_err = 0.0f64;
    let mut row_err = 0.0f64;
    for _ in 0..20 {
        let (n_in, n_out, d, iters) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=4));
        let votes = rand_tensor(&mut r, &[1, n_in, n_out, d], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let v = g.constant(votes.clone());
        let (out, trace) = dynamic_routing_traced(&mut g, v, RoutingOptions { iterations: iters, detach_agreement: false })
            .expect("routing");
        let (want, _) = naive_dynamic_routing(votes.data(), n_in, n_out, d, iters);
        dr_err = dr_err.max(max_abs_diff(g.value(out).data(), &want));
        for state in &trace {
            for row in state.couplings.data().chunks(n_out) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let layer = |ct, cd, ot, od, stride, iters, seed| {
        let cfg = Routing3dConfig {
            kernel: 3,
            stride,
            padding: Padding::Same,
            out_types: ot,
            out_dim: od,
            opts: RoutingOptions { iterations: iters, detach_agreement: false },
        };
        let mut store = ParamStore::<f64>::new();
        let l = Routing3d::new(&mut store, "r3d", ct, cd, cfg, &mut rng(seed)).expect("3DR layer");
        (l, store)
    };
    let run = |l: &Routing3d, store: &ParamStore<f64>, x: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let pv = store.attach_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = l.forward(&mut g, &pv, xv).expect("3DR forward");
        g.value(y).clone()
    };
    let mut r3d_err = 0.0f64;
    for case in 0..20 {
        let (ct, cd, ot, od) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, stride, iters) = (r.gen_range(3..=8), r.gen_range(1..=2), r.gen_range(1..=3));
        let (l, store) = layer(ct, cd, ot, od, stride, iters, 1000 + case);
        let x = rand_tensor(&mut r, &[1, h, h, ct, cd], -1.0, 1.0);
        let k = store.by_name("r3d.kernel").expect("kernel");
        let (want, _) = naive_routing3d(x.data(), (h, h, ct, cd), k.data(), 3, stride, ot, od, iters);
        r3d_err = r3d_err.max(max_abs_diff(run(&l, &store, &x).data(), &want));
    }

    let mut local = 0;
    for case in 0..10 {
        let (stride, h) = (r.gen_range(1..=2), r.gen_range(4..=8));
        let (l, store) = layer(2, 3, 2, 3, stride, 3, 2000 + case);
        let x = rand_tensor(&mut r, &[1, h, h, 2, 3], -1.0, 1.0);
        let (oh, pt) = same_pad(h, 3, stride);
        let (oy, ox) = (r.gen_range(0..oh), r.gen_range(0..oh));
        let window = |o: usize| (o * stride) as isize - pt as isize..(o * stride + 3) as isize - pt as isize;
        let (rows, cols) = (window(oy), window(ox));
        let mut masked = x.clone();
        for (p, cap) in masked.data_mut().chunks_mut(6).enumerate() {
            if !(rows.contains(&((p / h) as isize)) && cols.contains(&((p % h) as isize))) {
                cap.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (y, ym) = (run(&l, &store, &x), run(&l, &store, &masked));
        let at = |t: &Tensor<f64>| t.data()[(oy * oh + ox) * 6..(oy * oh + ox + 1) * 6].to_vec();
        local += usize::from(at(&y) == at(&ym));
    }

    let pass = dr_err < 1e-6 && row_err < 1e-6 && r3d_err < 1e-6 && local == 10;
    outcome(pass, format!("DR err {dr_err:.1e}, row-sum err {row_err:.1e}, 3DR err {r3d_err:.1e}, locality {local}/10"))
}

fn margin_of(lengths: &[f64], label: usize, p: MarginLossParams) -> f64 {
    let k = lengths.len();
    let t: Vec<f64> = (0..k).map(|i| f64::from(u8::from(i == label))).collect();
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::new(&[1, k], lengths.to_vec()).expect("lengths"));
    let tv = g.constant(Tensor::new(&[1, k], t).expect("targets"));
    let loss = margin_loss(&mut g, l, tv, p).expect("margin loss");
    g.value(loss).item()
}

fn margin_values() -> Outcome {
    let p = hard_training_params(1).expect("phase 1");
    let cases = [([0.1, 0.9, 0.1], 0.0), ([0.05, 0.5, 0.0], 0.16), ([0.6, 0.95, 0.1], 0.125)];
    let hand = cases.iter().all(|(l, want)| (margin_of(l, 1, p) - want).abs() < 1e-9);
    let mut r = rng(903);
    let mut agree = 0;
    for _ in 0..1000 {
        let inside = r.gen_bool(0.5);
        let label = r.gen_range(0..10);
        let lengths: Vec<f64> = (0..10)
            .map(|k| match (inside, k == label) {
                (true, true) => r.gen_range(0.9..1.0),
                (true, false) => r.gen_range(0.0..=0.1),
                _ => r.gen_range(0.0..1.0),
            })
            .collect();
        let loss = margin_of(&lengths, label, p);
        let oracle = naive_margin(&lengths, label, p.m_plus, p.m_minus, p.lambda);
        let inside_margins = (0..10).all(|k| if k == label { lengths[k] >= 0.9 } else { lengths[k] <= 0.1 });
        agree += usize::from((loss == 0.0) == inside_margins && (loss - oracle).abs() < 1e-12);
    }
    outcome(hand && agree == 1000, format!("hand cases {}, iff condition {agree}/1000", if hand { "exact" } else { "wrong" }))
}

fn caps_sum_reduction() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for s in [4, 8, 32] {
        let mut cfg = ModelConfig::fmnist_small();
        let iters = dlcaps::routing::DEFAULT_ITERATIONS;
        cfg.mlce.cell1 = CapsCellConfig::routing3d(s, 8, 2, iters);
        cfg.mlce.cell2 = CapsCellConfig::routing3d(s, 8, 2, iters);
        let with = Model::<f32>::new(cfg.clone()).expect("model with CapsSum");
        cfg.mlce.caps_sum = false;
        let without = Model::<f32>::new(cfg).expect("model without CapsSum");
        let entering = |m: &Model<f32>| m.params.get(m.routing.weight_id()).shape()[0];
        let (a, b) = (entering(&with), entering(&without));
        let [w1, w2] = with.mlce.widths;
        let sum_params: usize = with
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("mlce.sum"))
            .map(|(_, t)| t.len())
            .sum();
        let formula = w1 * w1 * (s * 8 * 8 + 8) + w2 * w2 * (s * 8 * 8 + 8);
        pass &= b == s * a && sum_params == formula;
        details.push(format!("S={s}: {b}->{a} caps, params {sum_params}/{formula}"));
    }
    outcome(pass, details.join("; "))
}

fn assembly() -> Outcome {
    let model = Model::<f32>::new(ModelConfig::fmnist_small()).expect("model");
    let [w1, w2] = model.mlce.widths;
    let mlce_ok = model.mlce.output_capsules() == w1 * w1 + w2 * w2
        && model.params.get(model.routing.weight_id()).shape()[0] == w1 * w1 + w2 * w2;

    let mut r = rng(905);
    let caps = rand_tensor(&mut r, &[4, 10, 16], -0.3, 0.3).cast::<f32>();
    let classes = [1, 4, 0, 9];
    let decode = |c: &Tensor<f32>| {
        let mut g = Graph::<f32>::new();
        let pv = model.params.attach_frozen(&mut g);
        let cv = g.constant(c.clone());
        let out = model.decode(&mut g, &pv, cv, &classes).expect("decode");
        g.value(out).clone()
    };
    let base = decode(&caps);
    let mut moved = caps.clone();
    for (row, &cls) in classes.iter().enumerate() {
        for k in (0..10).filter(|&k| k != cls) {
            for d in 0..16 {
                moved.data_mut()[(row * 10 + k) * 16 + d] = r.gen_range(-1.0..1.0);
            }
        }
    }
    let discard_ok = decode(&moved) == base;

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("ck.dlcp");
    let ck = Checkpoint::from_params("", &model.params);
    ck.save(&path).expect("save");
    let loaded = Checkpoint::load(&path).expect("load");
    let mut restored = Model::<f32>::new(ModelConfig { seed: 99, ..ModelConfig::fmnist_small() }).expect("model");
    loaded.restore(&mut restored.params).expect("restore");
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ck_ok = loaded.to_bytes() == std::fs::read(&path).expect("read")
        && restored.params.iter().zip(model.params.iter()).all(|((_, a), (_, b))| bits(a) == bits(b));

    outcome(
        mlce_ok && discard_ok && ck_ok,
        format!("MLCE {} = {w1}²+{w2}²: {mlce_ok}, decoder discard: {discard_ok}, checkpoint: {ck_ok}", model.mlce.output_capsules()),
    )
}

fn parameter_window() -> Outcome {
    let cifar = Model::<f32>::new(ModelConfig::cifar10()).expect("cifar").count_params();
    let fmnist = Model::<f32>::new(ModelConfig::fmnist()).expect("fmnist").count_params();
    outcome((6_500_000..=7_100_000).contains(&cifar) && fmnist < cifar, format!("CIFAR-10 {cifar}, FMNIST {fmnist}"))
}

fn monotone_phases() -> Outcome {
    let (p1, p2) = (hard_training_params(1).expect("p1"), hard_training_params(2).expect("p2"));
    let mut r = rng(909);
    let ok = (0..1000)
        .filter(|_| {
            let lengths: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
            let label = r.gen_range(0..10);
            margin_of(&lengths, label, p2) >= margin_of(&lengths, label, p1)
        })
        .count();
    outcome(ok == 1000, format!("{ok}/1000 vectors"))
}

struct Run {
    model: Model<f32>,
    final_acc: f64,
    probabilities: Tensor<f64>,
    metrics_csv: Vec<u8>,
    elapsed: Duration,
}

struct Reduced {
    cfg: RunConfig,
    train: Dataset,
    val: Dataset,
    root: tempfile::TempDir,
}

impl Reduced {
    fn load() -> Result<Self, String> {
        let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        let cfg = RunConfig::load(&workspace.join("configs/fmnist_small.cfg")).map_err(|e| e.to_string())?;
        let data_root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| workspace.join("data"));
        let train = cfg.data.load(Split::Train, Some(&data_root)).map_err(|e| e.to_string())?;
        let val = cfg.data.load(Split::Test, Some(&data_root)).map_err(|e| e.to_string())?;
        Ok(Self { cfg, train, val, root: tempfile::tempdir().map_err(|e| e.to_string())? })
    }

    fn run(&self, name: &str, seed: u64, phase1_only: bool) -> Result<Run, String> {
        let mut cfg = self.cfg.clone();
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        if phase1_only {
            cfg.train.epochs_phase1 += cfg.train.epochs_phase2;
            cfg.train.epochs_phase2 = 0;
        }
        let dir = self.root.path().join(name);
        let echo = cfg.echo();
        let out = RunOutput { dir: &dir, config_echo: &echo, verbose: false };
        let mut model = Model::<f32>::new(cfg.model.clone()).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let summary = run_training(&mut model, &self.train, Some(&self.val), &cfg.train, &out).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let eval = evaluate(&model, &self.val, cfg.train.eval_batch).map_err(|e| e.to_string())?;
        let final_acc = summary.metrics.last().and_then(|m| m.val_acc).unwrap_or(eval.accuracy);
        eprintln!("  run {name}: seed {seed}, val acc {final_acc:.4}, {:.0}s", elapsed.as_secs_f64());
        Ok(Run {
            model,
            final_acc,
            probabilities: eval.probabilities,
            metrics_csv: std::fs::read(dir.join("metrics.csv")).map_err(|e| e.to_string())?,
            elapsed,
        })
    }
}

fn reduced_runs() -> [Outcome; 3] {
    let fail = |msg: &str| outcome(false, msg.to_string());
    let reduced = match Reduced::load() {
        Ok(r) => r,
        Err(e) => {
            let msg = format!("FMNIST data unavailable: {e}");
            return [fail(&msg), fail(&msg), fail(&msg)];
        }
    };
    let seed = reduced.cfg.model.seed;
    let runs = (|| -> Result<_, String> {
        Ok((
            reduced.run("a", seed, false)?,
            reduced.run("b", seed, false)?,
            reduced.run("phase1_only", seed, true)?,
            reduced.run("d", seed + 1, false)?,
            reduced.run("e", seed + 2, false)?,
        ))
    })();
    let (a, b, c, d, e) = match runs {
        Ok(r) => r,
        Err(err) => {
            let msg = format!("training failed: {err}");
            return [fail(&msg), fail(&msg), fail(&msg)];
        }
    };

    let deterministic = a.metrics_csv == b.metrics_csv;
    let learning = outcome(
        a.final_acc >= MIN_REDUCED_ACC && a.elapsed <= RUN_BUDGET && deterministic && a.final_acc >= c.final_acc - PHASE2_SLACK,
        format!(
            "acc {:.4} (phase-1 only {:.4}), {:.1} min on {} core(s), same-seed rerun identical: {deterministic}",
            a.final_acc,
            c.final_acc,
            a.elapsed.as_secs_f64() / 60.0,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );

    let labels = &reduced.val.labels;
    let acc_of = |preds: &[usize]| score(preds, labels, 10).0;
    let single = acc_of(&ensemble_predict(std::slice::from_ref(&a.probabilities)).expect("single"));
    let seven = acc_of(&ensemble_predict(&vec![a.probabilities.clone(); 7]).expect("seven"));
    let members = [&a, &d, &e];
    let three = acc_of(&ensemble_predict(&members.map(|r| r.probabilities.clone())).expect("three"));
    let best = members.iter().map(|r| r.final_acc).fold(0.0, f64::max);
    let ensemble = outcome(
        seven == single && three >= best - ENSEMBLE_SLACK,
        format!("7 identical {seven:.4} vs single {single:.4}; 3 seeds {three:.4} vs best member {best:.4}"),
    );

    let same_params = a.model.params.iter().zip(b.model.params.iter()).all(|(x, y)| x == y);
    let determinism = outcome(
        deterministic && same_params,
        format!("metrics.csv {} bytes, byte-identical: {deterministic}, parameters identical: {same_params}", a.metrics_csv.len()),
    );
    [learning, ensemble, determinism]
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_suite()),
        (2, "routing oracles", routing_oracles()),
        (3, "margin-loss values", margin_values()),
        (4, "CapsSum reduction", caps_sum_reduction()),
        (5, "architecture assembly", assembly()),
        (6, "parameter window", parameter_window()),
    ];
    let [learning, ensemble, determinism] = reduced_runs();
    results.push((7, "reduced-scale learning", learning));
    results.push((8, "ensemble behavior", ensemble));
    results.push((9, "hard-training monotonicity", monotone_phases()));
    results.push((10, "determinism", determinism));
    results.sort_by_key(|(n, _, _)| *n);

    println!();
    for (n, name, o) in &results {
        println!("criterion {n:>2} {:<28} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed, {:.0}s", results.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
