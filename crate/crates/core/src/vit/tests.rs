use super::*;
use crate::autodiff::{finite_difference_check, Tape};
use crate::error::Error;
use crate::params::{ParamId, Role};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 3,
        drop_path_rate: 0.0,
    }
}

fn images(config: &ViTConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let s = config.image_size;
    let mut r = rng::stream(seed, streams::NOISE);
    rng::truncated_normal_tensor(&mut r, vec![batch, config.channels, s, s], 0.5)
}

fn set(model: &mut Model<f64>, id: ParamId, values: &[f64]) {
    model.store.tensor_mut(id).data_mut().copy_from_slice(values);
}

fn fill(model: &mut Model<f64>, id: ParamId, v: f64) {
    model.store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
}

/// Replaces every parameter with larger random values so gradients are
/// well away from zero.
fn roughen(model: &mut Model<f64>, seed: u64) {
    let mut r = rng::stream(seed, streams::INIT);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let gamma = model.store.get(id).role == Role::NormGamma;
        let shape = model.store.tensor(id).shape().to_vec();
        let noise = rng::truncated_normal_tensor::<f64>(&mut r, shape, 0.4);
        for (x, n) in model.store.tensor_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *x = if gamma { 1.0 + n } else { *n };
        }
    }
}

#[test]
fn zero_branches_are_identity() {
    let cfg = tiny();
    let mut model = init_model::<f64>(&cfg, 3).unwrap();
    let block = model.blocks[0].clone();
    for id in block.backbone_params() {
        fill(&mut model, id, 0.0);
    }
    for id in block.norm_params() {
        fill(&mut model, id, 0.0);
    }
    let mut tape = Tape::new();
    let x = tape.constant(images(&cfg, 2, 1).reshape(vec![2, 24, 8]).unwrap());
    let mut r = rng::stream(0, streams::DROP_PATH);
    for training in [false, true] {
        let y = model.block_forward(&mut tape, x, &block, training, &mut r).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}

#[test]
fn fully_dropped_branches_are_identity() {
    let cfg = tiny();
    let mut model = init_model::<f64>(&cfg, 3).unwrap();
    roughen(&mut model, 9);
    let mut block = model.blocks[1].clone();
    block.drop_path_prob = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(images(&cfg, 3, 2).reshape(vec![3, 24, 8]).unwrap());
    let mut r = rng::stream(0, streams::DROP_PATH);
    let y = model.block_forward(&mut tape, x, &block, true, &mut r).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

/// `x·W + b` with `W` stored `[in, out]` row-major.
fn ref_linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn block_matches_scalar_walkthrough() {
    let cfg = ViTConfig {
        image_size: 2,
        patch_size: 2,
        channels: 1,
        depth: 1,
        dim: 2,
        heads: 1,
        mlp_ratio: 2.0,
        classes: 2,
        drop_path_rate: 0.0,
    };
    let mut model = init_model::<f64>(&cfg, 0).unwrap();
    let b = model.blocks[0].clone();
    let ln1 = ([1.5, 0.5], [0.1, -0.2]);
    let qkv_w = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4, -0.6, 0.2, 0.4, 0.9, -0.3, 0.8];
    let qkv_b = [0.05, 0.0, -0.1, 0.2, 0.0, 0.1];
    let proj_w = [0.9, -0.5, 0.3, 0.6];
    let proj_b = [0.01, -0.02];
    let ln2 = ([0.8, 1.2], [0.0, 0.3]);
    let fc1_w = [0.5, -1.0, 0.2, 0.7, 0.3, 0.4, -0.8, 1.1];
    let fc1_b = [0.1, 0.0, -0.1, 0.2];
    let fc2_w = [0.6, -0.3, 0.2, 0.9, -0.7, 0.4, 1.0, 0.5];
    let fc2_b = [0.0, 0.05];
    set(&mut model, b.ln1.gamma, &ln1.0);
    set(&mut model, b.ln1.beta, &ln1.1);
    set(&mut model, b.qkv.weight, &qkv_w);
    set(&mut model, b.qkv.bias, &qkv_b);
    set(&mut model, b.proj.weight, &proj_w);
    set(&mut model, b.proj.bias, &proj_b);
    set(&mut model, b.ln2.gamma, &ln2.0);
    set(&mut model, b.ln2.beta, &ln2.1);
    set(&mut model, b.fc1.weight, &fc1_w);
    set(&mut model, b.fc1.bias, &fc1_b);
    set(&mut model, b.fc2.weight, &fc2_w);
    set(&mut model, b.fc2.bias, &fc2_b);

    let x = [[1.0, -2.0], [0.5, 3.0]];
    let h: Vec<Vec<f64>> = x.iter().map(|r| ref_layer_norm(r, &ln1.0, &ln1.1)).collect();
    let qkv: Vec<Vec<f64>> = h.iter().map(|r| ref_linear(r, &qkv_w, &qkv_b)).collect();
    let scale = 1.0 / 2f64.sqrt();
    let mut attn_out = vec![vec![0.0; 2]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (qkv[i][0] * qkv[j][2] + qkv[i][1] * qkv[j][3]) * scale)
            .collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z = e[0] + e[1];
        for c in 0..2 {
            attn_out[i][c] = (0..2).map(|j| e[j] / z * qkv[j][4 + c]).sum();
        }
    }
    let mut expected = [[0.0; 2]; 2];
    for i in 0..2 {
        let p = ref_linear(&attn_out[i], &proj_w, &proj_b);
        let mid = [x[i][0] + p[0], x[i][1] + p[1]];
        let n = ref_layer_norm(&mid, &ln2.0, &ln2.1);
        let hidden: Vec<f64> = ref_linear(&n, &fc1_w, &fc1_b).into_iter().map(ref_gelu).collect();
        let o = ref_linear(&hidden, &fc2_w, &fc2_b);
        expected[i] = [mid[0] + o[0], mid[1] + o[1]];
    }

    let mut tape = Tape::new();
    let input = tape.constant(Tensor::from_f64(vec![1, 2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let mut r = rng::stream(0, streams::DROP_PATH);
    let y = model.block_forward(&mut tape, input, &b, false, &mut r).unwrap();
    let got = tape.value(y).data();
    for (g, e) in got.iter().zip(expected.iter().flatten()) {
        assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
    }
}

#[test]
fn patch_embedding_examples() {
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        depth: 0,
        dim: 4,
        heads: 1,
        mlp_ratio: 1.0,
        classes: 2,
        drop_path_rate: 0.0,
    };
    assert_eq!(cfg.tokens(), 5);
    let mut model = init_model::<f64>(&cfg, 0).unwrap();
    let (w, cls) = (model.patch_embed.weight, model.cls_token);
    fill(&mut model, w, 0.0);
    fill(&mut model, cls, 0.0);
    let pos: Tensor<f64> = model.store.tensor(model.pos_embed).clone();
    let mut tape = Tape::new();
    let e = model.embed(&mut tape, &Tensor::zeros(vec![2, 1, 4, 4])).unwrap();
    assert_eq!(tape.shape(e), &[2, 5, 4]);
    assert_eq!(&tape.value(e).data()[..20], pos.data());
    assert_eq!(&tape.value(e).data()[20..], pos.data());

    let single = ViTConfig {
        image_size: 2,
        ..cfg
    };
    let mut model = init_model::<f64>(&single, 0).unwrap();
    model.store.tensor_mut(model.patch_embed.weight).data_mut().copy_from_slice(Tensor::<f64>::eye(4).data());
    let pos = model.store.tensor(model.pos_embed).clone();
    let mut tape = Tape::new();
    let img = Tensor::from_f64(vec![1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let e = model.embed(&mut tape, &img).unwrap();
    let row = &tape.value(e).data()[4..8];
    for k in 0..4 {
        assert_eq!(row[k], (k + 1) as f64 + pos.data()[4 + k]);
    }

    let wrong = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
    assert!(matches!(model.embed(&mut Tape::new(), &wrong), Err(Error::Dimension(_))));
}

#[test]
fn patchify_orders_channels_then_rows() {
    let cfg = ViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 2,
        depth: 0,
        dim: 4,
        heads: 1,
        mlp_ratio: 1.0,
        classes: 2,
        drop_path_rate: 0.0,
    };
    let data: Vec<f64> = (0..32).map(|v| v as f64).collect();
    let p = patchify(&Tensor::<f64>::from_f64(vec![1, 2, 4, 4], &data).unwrap(), &cfg).unwrap();
    assert_eq!(p.shape(), &[4, 8]);
    assert_eq!(&p.data()[..8], &[0., 1., 4., 5., 16., 17., 20., 21.]);
    assert_eq!(&p.data()[8..16], &[2., 3., 6., 7., 18., 19., 22., 23.]);
}

#[test]
fn depth_zero_reads_the_class_token_path() {
    let cfg = ViTConfig { depth: 0, ..tiny() };
    let mut model = init_model::<f64>(&cfg, 5).unwrap();
    roughen(&mut model, 1);
    let x = images(&cfg, 2, 0);
    let logits = model.predict(&x).unwrap();

    let cls = model.store.tensor(model.cls_token).data().to_vec();
    let pos0 = &model.store.tensor(model.pos_embed).data()[..cfg.dim];
    let token: Vec<f64> = cls.iter().zip(pos0).map(|(a, b)| a + b).collect();
    let g = model.store.tensor(model.head_norm.gamma).data();
    let b = model.store.tensor(model.head_norm.beta).data();
    let n = ref_layer_norm(&token, g, b);
    let expected = ref_linear(
        &n,
        model.store.tensor(model.head.weight).data(),
        model.store.tensor(model.head.bias).data(),
    );
    for row in logits.data().chunks(cfg.classes) {
        for (a, e) in row.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let cfg = tiny();
    let a = init_model::<f32>(&cfg, 7).unwrap();
    let b = init_model::<f32>(&cfg, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_model::<f32>(&cfg, 8).unwrap());
    let x: Tensor<f32> = images(&cfg, 5, 3).cast();
    let la = a.predict(&x).unwrap();
    assert_eq!(la.shape(), &[5, 3]);
    assert_eq!(la.to_le_bytes(), b.predict(&x).unwrap().to_le_bytes());
}

#[test]
fn init_examples() {
    let cfg = ViTConfig {
        depth: 5,
        drop_path_rate: 0.2,
        dim: 8,
        heads: 2,
        ..ViTConfig::default()
    };
    let model = init_model::<f64>(&cfg, 0).unwrap();
    let probs: Vec<f64> = model.blocks.iter().map(|b| b.drop_path_prob).collect();
    for (p, e) in probs.iter().zip([0.0, 0.05, 0.10, 0.15, 0.20]) {
        assert!((p - e).abs() < 1e-15, "{probs:?}");
    }
    assert!(probs.windows(2).all(|w| w[0] <= w[1]));
    for (_, p) in model.store.iter() {
        let d = p.tensor.data();
        if p.role.is_norm() && p.name.ends_with("gamma") {
            assert!(d.iter().all(|&v| v == 1.0));
        } else if p.name.ends_with("bias") || p.name.ends_with("beta") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            assert!(d.iter().all(|v| v.abs() <= 0.04), "{}", p.name);
        }
    }
    assert!(matches!(
        init_model::<f64>(&ViTConfig { heads: 3, ..cfg }, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let mut r = rng::stream(4, streams::NOISE);
    let s = tape.constant(rng::truncated_normal_tensor(&mut r, vec![3, 5, 5], 3.0));
    let a = tape.softmax(s);
    for row in tape.value(a).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ViTConfig {
        drop_path_rate: 0.0,
        ..tiny()
    };
    let mut model = init_model::<f64>(&cfg, 2).unwrap();
    roughen(&mut model, 3);
    let x = images(&cfg, 2, 5);
    let labels = [0usize, 2];
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let f = |tape: &mut Tape<f64>, v| {
            tape.bind_param(id, v);
            let mut r = rng::stream(0, streams::DROP_PATH);
            let logits = model.forward(tape, &x, false, &mut r)?;
            tape.cross_entropy(logits, &labels)
        };
        let err = finite_difference_check(f, model.store.tensor(id), 1e-5).unwrap();
        assert!(err < 1e-6, "{}: {err:e}", model.store.get(id).name);
    }
}

#[test]
fn drop_path_preserves_expectation() {
    for p in [0.1, 0.5] {
        let mut r = rng::stream(11, streams::DROP_PATH);
        let draws = 10_000usize;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![draws, 3], 2.0));
        let y = drop_path(&mut tape, x, p, true, &mut r).unwrap();
        let mean = tape.value(y).sum() / (3 * draws) as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "p={p}: mean {mean}");
    }
}
