mod common;

use common::{rand_tensor, rng};
use dlcaps::blocks::SkipConfig;
use dlcaps::capsule_ops::CapsSumConfig;
use dlcaps::checkpoint::Checkpoint;
use dlcaps::model::{ensemble_predict, predict, Model, ModelConfig};
use dlcaps::params::ParamStore;
use dlcaps::routing::DynamicRouting;
use dlcaps::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Sum of the per-layer parameter formulas for a config.
fn analytic_params(cfg: &ModelConfig) -> usize {
    let (h, _, c) = cfg.input;
    let s = cfg.stem;
    let mut total = s.kernel * s.kernel * c * s.filters + s.filters;
    let mut channels = s.filters;
    let mut side = h.div_ceil(s.stride);
    let mut widths = Vec::new();
    for cell in cfg.cells.iter().chain([&cfg.mlce.cell1, &cfg.mlce.cell2]) {
        let mut cin = channels;
        for l in &cell.layers {
            total += l.param_count(cin);
            cin = l.out_channels();
            side = side.div_ceil(l.stride);
        }
        total += match cell.skip {
            SkipConfig::ConvCaps(k) => k.param_count(cell.layers[0].out_channels()),
            SkipConfig::Routing3d(r) => r.param_count(cell.layers[0].types, cell.layers[0].dim),
        };
        channels = cin;
        widths.push((side, cell.out_types(), cell.out_dim()));
    }
    let (w1, t1, d1) = widths[2];
    let (w2, t2, d2) = widths[3];
    let m = &cfg.mlce;
    total += CapsSumConfig { w: w1, in_types: t1, in_dim: d1, out_dim: m.sum1_out_dim, apply_squash: true }.param_count();
    total += CapsSumConfig { w: w2, in_types: t2, in_dim: d2, out_dim: m.sum2_out_dim, apply_squash: true }.param_count();
    total += DynamicRouting::param_count(w1 * w1 + w2 * w2, m.sum1_out_dim, cfg.num_classes, cfg.final_dim);
    let d = &cfg.decoder;
    let seed = d.seed_hw * d.seed_hw * d.seed_channels;
    total += cfg.final_dim * seed + seed;
    let mut cin = d.seed_channels;
    for st in &d.stages {
        total += st.kernel * st.kernel * st.channels * cin + st.channels;
        cin = st.channels;
    }
    total
}

#[test]
fn count_params_matches_layer_formulas() {
    for cfg in [ModelConfig::cifar10(), ModelConfig::fmnist(), ModelConfig::fmnist_small(), ModelConfig::tiny()] {
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(m.count_params(), analytic_params(&cfg));
        assert_eq!(m.param_breakdown().iter().map(|(_, n)| n).sum::<usize>(), m.count_params());
    }
}

#[test]
fn count_params_small_examples() {
    let mut store = ParamStore::<f32>::new();
    store.add("dense.weight", Tensor::zeros(&[10, 5])).unwrap();
    store.add("dense.bias", Tensor::zeros(&[5])).unwrap();
    assert_eq!(store.count(), 55);
    let s = CapsSumConfig { w: 4, in_types: 8, in_dim: 4, out_dim: 8, apply_squash: true };
    assert_eq!(s.param_count(), 4224);
}

#[test]
fn default_configs_hit_the_parameter_window() {
    let cifar = Model::<f32>::new(ModelConfig::cifar10()).unwrap().count_params();
    let fmnist = Model::<f32>::new(ModelConfig::fmnist()).unwrap().count_params();
    assert!((6_500_000..=7_100_000).contains(&cifar), "{cifar}");
    assert!(fmnist < cifar);
}

#[test]
fn doubling_caps_sum_dim_changes_only_sum_and_routing() {
    let base = Model::<f32>::new(ModelConfig::cifar10()).unwrap().param_breakdown();
    let mut cfg = ModelConfig::cifar10();
    cfg.mlce.sum1_out_dim *= 2;
    cfg.mlce.sum2_out_dim *= 2;
    let wide = Model::<f32>::new(cfg).unwrap().param_breakdown();
    assert_eq!(base.len(), wide.len());
    for ((name, a), (name2, b)) in base.iter().zip(&wide) {
        assert_eq!(name, name2);
        let expect_change = name.starts_with("mlce.sum") || name == "routing";
        assert_eq!(a != b, expect_change, "{name}: {a} vs {b}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    let b = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x == y));
    let mut cfg = ModelConfig::fmnist_small();
    cfg.seed = 9;
    let c = Model::<f32>::new(cfg).unwrap();
    assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x != y));
}

#[test]
fn parameter_names_are_unique() {
    let m = Model::<f32>::new(ModelConfig::cifar10()).unwrap();
    let mut names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
}

#[test]
fn cifar_forward_shapes_and_lengths() {
    let m = Model::<f32>::new(ModelConfig::cifar10()).unwrap();
    let x = rand_tensor(&mut rng(71), &[2, 64, 64, 3], 0.0, 1.0).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let pv = m.params.attach_frozen(&mut g);
    let xv = g.constant(x);
    let out = m.forward(&mut g, &pv, xv).unwrap();
    assert_eq!(g.shape(out.capsules), &[2, 10, 16]);
    assert_eq!(g.shape(out.lengths), &[2, 10]);
    let caps = g.value(out.capsules).data();
    for (k, &len) in g.value(out.lengths).data().iter().enumerate() {
        let norm = caps[k * 16..(k + 1) * 16].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - len).abs() < 1e-6);
        assert!((0.0..1.0).contains(&len));
    }
    let recon = m.decode(&mut g, &pv, out.capsules, &[3, 7]).unwrap();
    assert_eq!(g.shape(recon), &[2, 64, 64, 3]);
}

#[test]
fn zero_input_gives_near_zero_lengths() {
    let m = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    let lengths = m.infer_lengths(&Tensor::zeros(&[2, 28, 28, 1]), 2).unwrap();
    assert!(lengths.data().iter().all(|&l| l.abs() < 1e-6));
}

#[test]
fn wrong_input_shape_is_a_usage_error() {
    let m = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let mut g = Graph::<f32>::new();
    let pv = m.params.attach_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 9, 8, 1]));
    assert!(matches!(m.forward(&mut g, &pv, x), Err(Error::Usage(_))));
}

#[test]
fn inference_is_deterministic_and_chunk_independent() {
    let m = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    let x = rand_tensor(&mut rng(72), &[5, 28, 28, 1], 0.0, 1.0).cast::<f32>();
    let a = m.infer_lengths(&x, 5).unwrap();
    assert_eq!(a, m.infer_lengths(&x, 5).unwrap());
    let b = m.infer_lengths(&x, 2).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
    let other = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    assert_eq!(a, other.infer_lengths(&x, 5).unwrap());
}

fn decode_of(m: &Model<f64>, capsules: &Tensor<f64>, classes: &[usize]) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let pv = m.params.attach_frozen(&mut g);
    let c = g.constant(capsules.clone());
    let r = m.decode(&mut g, &pv, c, classes).unwrap();
    g.value(r).clone()
}

#[test]
fn decoder_discards_unselected_capsules() {
    let m = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap().cast::<f64>();
    let mut r = rng(73);
    let caps = rand_tensor(&mut r, &[3, 10, 16], -0.3, 0.3);
    let classes = [2, 0, 9];
    let base = decode_of(&m, &caps, &classes);
    assert_eq!(base.shape(), &[3, 28, 28, 1]);
    for _ in 0..5 {
        let mut moved = caps.clone();
        for (row, &cls) in classes.iter().enumerate() {
            for k in (0..10).filter(|&k| k != cls) {
                for d in 0..16 {
                    moved.data_mut()[(row * 10 + k) * 16 + d] += r.gen_range(-1.0..1.0);
                }
            }
        }
        assert_eq!(decode_of(&m, &moved, &classes), base);
    }
    let mut selected = caps.clone();
    selected.data_mut()[2 * 16] += 0.5;
    assert_ne!(decode_of(&m, &selected, &classes), base);
}

#[test]
fn zero_capsule_with_zero_biases_gives_zero_logits() {
    let mut m = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    let names: Vec<String> = m.decoder_param_names().iter().map(|s| s.to_string()).collect();
    for name in names.iter().filter(|n| n.ends_with(".bias")) {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::<f32>::new();
    let pv = m.params.attach_frozen(&mut g);
    let caps = g.constant(Tensor::zeros(&[1, 10, 16]));
    let logits = m.decode_logits(&mut g, &pv, caps, &[4]).unwrap();
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    // The final sigmoid maps a zero pre-activation to mid-grey.
    let img = g.sigmoid(logits).unwrap();
    assert!(g.value(img).data().iter().all(|&v| v == 0.5));
}

#[test]
fn decoder_is_shared_across_classes() {
    let m10 = Model::<f32>::new(ModelConfig::cifar10()).unwrap();
    let mut cfg = ModelConfig::cifar10();
    cfg.num_classes = 100;
    let m100 = Model::<f32>::new(cfg).unwrap();
    let size = |m: &Model<f32>| m.decoder_param_names().iter().map(|n| m.params.by_name(n).unwrap().len()).sum::<usize>();
    assert_eq!(size(&m10), size(&m100));
    assert_eq!(m10.decoder_param_names(), m100.decoder_param_names());
    let fm = Model::<f32>::new(ModelConfig::fmnist()).unwrap();
    let mut g = Graph::<f32>::new();
    let pv = fm.params.attach_frozen(&mut g);
    let caps = g.constant(Tensor::zeros(&[1, 10, 16]));
    let r = fm.decode(&mut g, &pv, caps, &[0]).unwrap();
    assert_eq!(g.shape(r), &[1, 28, 28, 1]);
}

#[test]
fn decode_rejects_bad_class() {
    let m = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let mut g = Graph::<f32>::new();
    let pv = m.params.attach_frozen(&mut g);
    let caps = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(m.decode(&mut g, &pv, caps, &[2]).is_err());
}

#[test]
fn predict_examples() {
    let t = |d: &[f64]| Tensor::new(&[1, d.len()], d.to_vec()).unwrap();
    assert_eq!(predict(&t(&[0.1, 0.9, 0.2])), vec![1]);
    assert_eq!(predict(&t(&[0.3, 0.3, 0.3])), vec![0]);
    let mut r = rng(74);
    let scores = rand_tensor(&mut r, &[50, 7], 0.0, 1.0);
    let want: Vec<usize> = scores
        .data()
        .chunks(7)
        .map(|row| {
            let mut best = 0;
            for k in 1..7 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    assert_eq!(predict(&scores), want);
}

proptest! {
    #[test]
    fn predict_invariant_under_squaring(lengths in prop::collection::vec(0.0f64..1.0, 10)) {
        let a = Tensor::new(&[1, 10], lengths.clone()).unwrap();
        let b = Tensor::new(&[1, 10], lengths.iter().map(|l| l * l).collect()).unwrap();
        prop_assert_eq!(predict(&a), predict(&b));
    }
}

#[test]
fn ensemble_examples() {
    let mut r = rng(75);
    let one = rand_tensor(&mut r, &[20, 10], 0.0, 1.0);
    let seven = vec![one.clone(); 7];
    assert_eq!(ensemble_predict(&seven).unwrap(), predict(&one));

    let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(ensemble_predict(&[a, b]).unwrap(), vec![0]);

    let members: Vec<Tensor<f64>> = (0..7).map(|_| rand_tensor(&mut r, &[30, 5], 0.0, 1.0)).collect();
    let want: Vec<usize> = (0..30)
        .map(|n| {
            let mean: Vec<f64> = (0..5).map(|k| members.iter().map(|m| m.data()[n * 5 + k]).sum::<f64>() / 7.0).collect();
            (0..5).fold(0, |best, k| if mean[k] > mean[best] { k } else { best })
        })
        .collect();
    assert_eq!(ensemble_predict(&members).unwrap(), want);

    let bad = vec![Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[2, 4])];
    assert!(ensemble_predict(&bad).is_err());
    assert!(ensemble_predict::<f64>(&[]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut m = Model::<f32>::new(ModelConfig::fmnist_small()).unwrap();
    let ck = Checkpoint::from_params("seed = 0\n", &m.params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dlcp");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DLCP");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), bytes);

    let original = m.params.clone();
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    loaded.restore(&mut m.params).unwrap();
    for ((_, a), (_, b)) in m.params.iter().zip(original.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_rejects_damage_and_mismatch() {
    let m = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let bytes = Checkpoint::from_params("", &m.params).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));

    let mut cfg = ModelConfig::tiny();
    cfg.num_classes = 3;
    let mut other = Model::<f32>::new(cfg).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(ck.restore(&mut other.params), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::tiny();
    cfg.num_classes = 1;
    assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config(_))));
    let mut cfg = ModelConfig::fmnist_small();
    cfg.input = (32, 32, 1);
    assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config(_))));
    let mut cfg = ModelConfig::fmnist_small();
    cfg.mlce.sum2_out_dim = 4;
    assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config(_))));
}
