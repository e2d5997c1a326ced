//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::time::Instant;

use vitexpand::analysis::{cka_matrix, grad_norm_profile, linear_cka};
use vitexpand::autodiff::{finite_difference_check, Tape, Var};
use vitexpand::expansion::{
    build_mapping, count_parameters_in, expand_model, parameter_fraction, parameter_fraction_exact, AdjustConfig,
    AdjustKind, ExpandOptions, ExpandedModel, MappingKind, ParamScope,
};
use vitexpand::io::checkpoint::{decode, encode, tensor_checksum};
use vitexpand::io::dataset::{generate_split, DatasetSpec, Split};
use vitexpand::params::{ParamId, Role};
use vitexpand::rng::{self, streams};
use vitexpand::training::{evaluate, train, Policy, TrainConfig};
use vitexpand::vit::{drop_path, init_model, Model, ViTConfig};
use vitexpand::{Result, Tensor};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: impl Into<String>) -> Outcome {
    let detail = detail.into();
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, streams::NOISE);
    rng::truncated_normal_tensor(&mut r, shape.to_vec(), std)
}

fn tiny(depth: usize) -> ViTConfig {
    ViTConfig {
        depth,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 3,
        ..ViTConfig::default()
    }
}

fn rough(model: &mut Model<f64>, seed: u64) {
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

/// Contracts an op's output with a fixed random tensor to get a scalar.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), 1.0, seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let c = |shape: &[usize], seed| randn(shape, 1.0, seed);
    vec![
        ("matmul", vec![3, 4], Box::new(move |t, x| { let b = t.constant(c(&[4, 5], 1)); t.matmul(x, b) })),
        ("matmul_ta", vec![4, 3], Box::new(move |t, x| { let b = t.constant(c(&[4, 5], 2)); t.matmul_t(x, true, b, false) })),
        ("matmul_tb", vec![5, 4], Box::new(move |t, x| { let a = t.constant(c(&[3, 4], 3)); t.matmul_t(a, false, x, true) })),
        ("batch_matmul", vec![2, 3, 4], Box::new(move |t, x| { let b = t.constant(c(&[2, 5, 4], 4)); t.batch_matmul(x, false, b, true) })),
        ("add", vec![3, 4], Box::new(move |t, x| { let b = t.constant(c(&[3, 4], 5)); t.add(x, b) })),
        ("add_broadcast", vec![4], Box::new(move |t, x| { let a = t.constant(c(&[2, 3, 4], 6)); t.add_broadcast(a, x) })),
        ("mul", vec![3, 4], Box::new(move |t, x| t.mul(x, x))),
        ("scale", vec![3, 4], Box::new(move |t, x| Ok(t.scale(x, -1.7)))),
        ("scale_rows", vec![3, 2, 2], Box::new(move |t, x| t.scale_rows(x, vec![0.0, 2.0, 1.25]))),
        ("reshape", vec![3, 4], Box::new(move |t, x| t.reshape(x, vec![2, 6]))),
        ("permute", vec![2, 3, 4], Box::new(move |t, x| t.permute(x, vec![2, 0, 1]))),
        ("slice_rows", vec![5, 3], Box::new(move |t, x| t.slice_rows(x, 1, 3))),
        ("prepend_token", vec![4], Box::new(move |t, x| { let a = t.constant(c(&[2, 3, 4], 7)); t.prepend_token(a, x) })),
        ("select_token", vec![2, 3, 4], Box::new(move |t, x| t.select_token(x, 1))),
        ("layer_norm_x", vec![3, 5], Box::new(move |t, x| {
            let g = t.constant(c(&[5], 8)); let b = t.constant(c(&[5], 9)); t.layer_norm(x, g, b, 1e-6)
        })),
        ("layer_norm_gamma", vec![5], Box::new(move |t, g| {
            let x = t.constant(c(&[3, 5], 10)); let b = t.constant(c(&[5], 11)); t.layer_norm(x, g, b, 1e-6)
        })),
        ("layer_norm_beta", vec![5], Box::new(move |t, b| {
            let x = t.constant(c(&[3, 5], 12)); let g = t.constant(c(&[5], 13)); t.layer_norm(x, g, b, 1e-6)
        })),
        ("softmax", vec![3, 5], Box::new(move |t, x| Ok(t.softmax(x)))),
        ("gelu", vec![3, 5], Box::new(move |t, x| Ok(t.gelu(x)))),
        ("relu", vec![3, 5], Box::new(move |t, x| Ok(t.relu(x)))),
        ("cross_entropy", vec![4, 3], Box::new(move |t, x| t.cross_entropy(x, &[0, 2, 1, 2]))),
        ("lora_a", vec![2, 4], Box::new(move |t, a| {
            let x = t.constant(c(&[3, 4], 14)); let w = t.constant(c(&[4, 5], 15));
            let b = t.constant(c(&[5, 2], 16)); vitexpand::expansion::lora_forward(t, x, w, None, a, b)
        })),
        ("adapter_b", vec![5, 2], Box::new(move |t, b| {
            let x = t.constant(c(&[3, 4], 17)); let w = t.constant(c(&[4, 5], 18));
            let a = t.constant(c(&[2, 4], 19)); vitexpand::expansion::adapter_forward(t, x, w, None, a, b)
        })),
    ]
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for (i, (name, shape, f)) in op_cases().into_iter().enumerate() {
        let x = randn(&shape, 1.0, 100 + i as u64);
        let g = move |t: &mut Tape<f64>, v: Var| {
            let y = f(t, v)?;
            project(t, y, 500 + i as u64)
        };
        let err = finite_difference_check(g, &x, 1e-5).map_err(|e| format!("{name}: {e}"))?;
        if err > worst {
            worst = err;
            worst_name = name;
        }
    }
    let cfg = tiny(1);
    let mut model = init_model::<f64>(&cfg, 1).unwrap();
    rough(&mut model, 2);
    let block = model.blocks[0].clone();
    let input = randn(&[2, cfg.tokens(), cfg.dim], 1.0, 3);
    let run = |t: &mut Tape<f64>, x: Var, model: &Model<f64>| -> Result<Var> {
        let mut r = rng::stream(0, streams::DROP_PATH);
        let y = model.block_forward(t, x, &block, false, &mut r)?;
        project(t, y, 4)
    };
    let err = finite_difference_check(|t, x| run(t, x, &model), &input, 1e-5).unwrap();
    if err > worst {
        worst = err;
        worst_name = "block input";
    }
    for id in block.params() {
        let f = |t: &mut Tape<f64>, v: Var| {
            t.bind_param(id, v);
            let x = t.constant(input.clone());
            run(t, x, &model)
        };
        let err = finite_difference_check(f, model.store.tensor(id), 1e-5).unwrap();
        if err > worst {
            worst = err;
            worst_name = "block parameter";
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst < 1e-6 && secs < 60.0,
        format!("max rel err {worst:.2e} ({worst_name}), {secs:.1}s"),
    )
}

fn expand_with(base: &Model<f64>, share: bool) -> ExpandedModel<f64> {
    let mapping = build_mapping(MappingKind::Cyclic, base.depth(), 2 * base.depth()).unwrap();
    let options = ExpandOptions {
        share,
        adjust: Some(AdjustConfig {
            kind: AdjustKind::ParallelAdapter,
            rank: 2,
        }),
        ..ExpandOptions::default()
    };
    expand_model(base, &mapping, &options).unwrap()
}

fn criterion_2() -> Outcome {
    let cfg = tiny(2);
    let base = init_model::<f64>(&cfg, 6).unwrap();
    let mut shared = expand_with(&base, true);
    let mut copied = expand_with(&base, false);
    for m in [&mut shared.model, &mut copied.model] {
        let ids: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.role == Role::AdjustB).map(|(id, _)| id).collect();
        for id in ids {
            for (i, v) in m.store.tensor_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.03 * ((i % 5) as f64 - 2.0);
            }
        }
    }
    let x = randn(&[4, 3, 8, 8], 0.7, 8);
    let labels = [0, 1, 2, 0];
    let grads = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let mut r = rng::stream(0, streams::DROP_PATH);
        let logits = m.forward(&mut tape, &x, false, &mut r).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap()
    };
    let (gs, gc) = (grads(&shared.model), grads(&copied.model));
    let mut worst = 0.0f64;
    for s in 0..2 {
        let sp = shared.model.blocks[s].backbone_params();
        let (a, b) = (copied.model.blocks[s].backbone_params(), copied.model.blocks[s + 2].backbone_params());
        for role in 0..8 {
            let g = gs.param(sp[role]).unwrap();
            let (ga, gb) = (gc.param(a[role]).unwrap(), gc.param(b[role]).unwrap());
            for ((v, p), q) in g.data().iter().zip(ga.data()).zip(gb.data()) {
                worst = worst.max((v - (p + q)).abs());
            }
        }
    }
    ensure(worst < 1e-10, format!("max abs err {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let cfg = ViTConfig::default();
    let base = init_model::<f32>(&cfg, 3).unwrap();
    let probe: Tensor<f32> = randn(&[64, 3, 8, 8], 1.0, 9).cast();
    let expected = base.predict(&probe).unwrap().to_le_bytes();
    let mut ok = true;
    for kind in [AdjustKind::Lora, AdjustKind::ParallelAdapter] {
        let mapping = build_mapping(MappingKind::Identity, cfg.depth, cfg.depth).unwrap();
        let options = ExpandOptions {
            share: true,
            adjust: Some(AdjustConfig { kind, rank: 16 }),
            seed: 5,
            ..ExpandOptions::default()
        };
        let e = expand_model(&base, &mapping, &options).unwrap();
        ok &= e.model.predict(&probe).unwrap().to_le_bytes() == expected;
    }
    ensure(ok, "64-sample probe, LoRA and adapter")
}

fn counted_fraction(depth: usize, dim: usize, rank: usize) -> (u128, u128) {
    let cfg = ViTConfig {
        depth,
        dim,
        heads: 4,
        mlp_ratio: 1.0,
        classes: 2,
        ..ViTConfig::default()
    };
    let base = init_model::<f32>(&cfg, 0).unwrap();
    let mapping = build_mapping(MappingKind::Cyclic, depth, 2 * depth).unwrap();
    let options = ExpandOptions {
        share: true,
        adjust: Some(AdjustConfig {
            kind: AdjustKind::Lora,
            rank,
        }),
        ..ExpandOptions::default()
    };
    let e = expand_model(&base, &mapping, &options).unwrap();
    (
        count_parameters_in(&e.model, true, ParamScope::AdjustedLinears) as u128,
        count_parameters_in(&e.model, false, ParamScope::MlpWeights) as u128,
    )
}

fn criterion_4() -> Outcome {
    let (num, den) = counted_fraction(1, 768, 16);
    let exact = num * 1536 == den * 832;
    let (fnum, fden) = parameter_fraction_exact(1, 2, 768, 16);
    let closed = num * fden == den * fnum && (parameter_fraction(12, 2, 768, 16) - 0.541667).abs() < 1e-6;
    // Each counted value must equal its closed form, and the excess over
    // one half (2r/d) must shrink with the rank down to exactly 1/2 at r=0.
    let ranks = [8usize, 4, 2, 1];
    let mut series = Vec::new();
    let mut matches = true;
    for &r in &ranks {
        let (n, d) = counted_fraction(1, 256, r);
        let (fnum, fden) = parameter_fraction_exact(1, 2, 256, r as u64);
        matches &= n * fden == d * fnum;
        series.push(n as f64 / d as f64);
    }
    let tends = matches
        && series.windows(2).all(|w| w[1] < w[0])
        && parameter_fraction(12, 2, 768, 0) == 0.5;
    ensure(
        exact && closed && tends,
        format!("counted {num}/{den} = {:.6}; d=256 r=8..1: {series:.4?}", num as f64 / den as f64),
    )
}

fn criterion_5() -> Outcome {
    let table = |k| build_mapping(k, 3, 6).unwrap().table;
    let want = |v: [usize; 6]| v.map(Some).to_vec();
    let ok = table(MappingKind::Cyclic) == want([0, 1, 2, 0, 1, 2])
        && table(MappingKind::Stack) == want([0, 1, 2, 0, 1, 2])
        && table(MappingKind::Interpolate) == want([0, 0, 1, 1, 2, 2])
        && build_mapping(MappingKind::Cyclic, 3, 5).unwrap().table == [0, 1, 2, 0, 1].map(Some).to_vec();
    ensure(ok, "cyclic/stack/interpolate at L=3, L'=6")
}

struct DeskRun {
    base: f64,
    expanded: f64,
    scratch: f64,
    backbone_frozen: bool,
}

fn desk_run(seed: u64) -> DeskRun {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    let train_set = generate_split::<f32>(&spec, Split::Train, spec.train_samples).unwrap();
    let eval_set = generate_split::<f32>(&spec, Split::Eval, spec.eval_samples).unwrap();
    let cfg = ViTConfig::default();
    let all = TrainConfig {
        epochs: 30,
        policy: Policy::AllParameters,
        seed,
        ..TrainConfig::default()
    };

    let mut base = init_model::<f32>(&cfg, seed).unwrap();
    train(&mut base, &train_set, None, &all).unwrap();
    let base_acc = evaluate(&base, &eval_set, 250).unwrap().accuracy;

    let mapping = build_mapping(MappingKind::Cyclic, cfg.depth, 2 * cfg.depth).unwrap();
    let options = ExpandOptions {
        share: true,
        adjust: Some(AdjustConfig {
            kind: AdjustKind::ParallelAdapter,
            rank: 16,
        }),
        seed,
        ..ExpandOptions::default()
    };
    let mut expanded = expand_model(&base, &mapping, &options).unwrap().model;
    let checksums = |m: &Model<f32>| -> Vec<(String, String)> {
        m.store
            .iter()
            .filter(|(_, p)| p.role.is_block_backbone() || p.role.is_embedding())
            .map(|(_, p)| (p.name.clone(), tensor_checksum(&p.tensor)))
            .collect()
    };
    let before = checksums(&expanded);
    let finetune = TrainConfig {
        policy: Policy::AdjustmentOnly,
        ..all.clone()
    };
    train(&mut expanded, &train_set, None, &finetune).unwrap();
    let backbone_frozen = checksums(&expanded) == before && !before.is_empty();
    let expanded_acc = evaluate(&expanded, &eval_set, 250).unwrap().accuracy;

    let deep = ViTConfig {
        depth: 2 * cfg.depth,
        ..cfg
    };
    let mut scratch = init_model::<f32>(&deep, seed + 1000).unwrap();
    train(&mut scratch, &train_set, None, &all).unwrap();
    let scratch_acc = evaluate(&scratch, &eval_set, 250).unwrap().accuracy;
    DeskRun {
        base: base_acc,
        expanded: expanded_acc,
        scratch: scratch_acc,
        backbone_frozen,
    }
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let started = Instant::now();
    let runs: Vec<DeskRun> = (0..3).map(desk_run).collect();
    let mean = |f: fn(&DeskRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (base, expanded, scratch) = (mean(|r| r.base), mean(|r| r.expanded), mean(|r| r.scratch));
    let secs = started.elapsed().as_secs_f64();
    let tol = 0.005;
    let six = ensure(
        expanded + tol >= base && expanded + tol >= scratch && secs < 900.0,
        format!("mean eval acc: expanded {expanded:.4}, base {base:.4}, scratch {scratch:.4}; {secs:.0}s"),
    );
    let seven = ensure(
        runs.iter().all(|r| r.backbone_frozen),
        "backbone and embedding checksums unchanged over 3 adjustment-only runs",
    );
    (six, seven)
}

fn criterion_8() -> Outcome {
    let x = randn(&[40, 6], 1.0, 21);
    let q = {
        // Givens rotations compose into an orthogonal 6×6 matrix.
        let mut q = Tensor::<f64>::eye(6);
        for (i, j, theta) in [(0, 1, 0.3), (2, 5, 1.1), (1, 4, -0.7), (3, 0, 2.0)] {
            let mut g = Tensor::<f64>::eye(6);
            let (c, s) = (f64::cos(theta), f64::sin(theta));
            let d = g.data_mut();
            d[i * 6 + i] = c;
            d[j * 6 + j] = c;
            d[i * 6 + j] = -s;
            d[j * 6 + i] = s;
            q = q.matmul(&g).unwrap();
        }
        q
    };
    let y = randn(&[40, 3], 1.0, 22);
    let self_sim = linear_cka(&x, &x).unwrap();
    let rotated = linear_cka(&x, &x.matmul(&q).unwrap()).unwrap();
    let scaled = linear_cka(&x.map(|v| -3.5 * v), &y).unwrap();
    let plain = linear_cka(&x, &y).unwrap();
    let props = (self_sim - 1.0).abs() < 1e-6 && (rotated - 1.0).abs() < 1e-9 && (scaled - plain).abs() < 1e-9;

    let cfg = ViTConfig::default();
    let base = init_model::<f64>(&cfg, 4).unwrap();
    let probe = randn(&[16, 3, 8, 8], 1.0, 23);
    let own = cka_matrix(&base, &base, &probe).unwrap();
    let diag = (0..cfg.depth).all(|i| (own.values[i][i] - 1.0).abs() < 1e-6);
    let mapping = build_mapping(MappingKind::Identity, cfg.depth, cfg.depth).unwrap();
    let options = ExpandOptions {
        share: true,
        adjust: Some(AdjustConfig {
            kind: AdjustKind::ParallelAdapter,
            rank: 16,
        }),
        ..ExpandOptions::default()
    };
    let e = expand_model(&base, &mapping, &options).unwrap();
    let cross = cka_matrix(&e.model, &base, &probe).unwrap();
    ensure(
        props && diag && cross.values == own.values,
        format!("self {self_sim:.12}, rotated {rotated:.12}, scale gap {:.1e}", (scaled - plain).abs()),
    )
}

fn criterion_9() -> Outcome {
    let mut lengths = Vec::new();
    for depth in [2usize, 3, 4] {
        let base = init_model::<f64>(&tiny(depth), 1).unwrap();
        let e = expand_with(&base, true);
        let x = randn(&[4, 3, 8, 8], 1.0, 24);
        let profile = grad_norm_profile(&e.model, &x, &[0, 1, 2, 0]).unwrap();
        lengths.push((depth, profile.norms.len()));
    }
    ensure(lengths.iter().all(|(l, n)| l == n), format!("(L, profile length): {lengths:?}"))
}

fn criterion_10() -> Outcome {
    let spec = DatasetSpec {
        train_samples: 200,
        ..DatasetSpec::default()
    };
    let data = generate_split::<f32>(&spec, Split::Train, 200).unwrap();
    let config = TrainConfig {
        epochs: 2,
        policy: Policy::AllParameters,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = init_model::<f32>(&ViTConfig::default(), 2).unwrap();
        let report = train(&mut m, &data, None, &config).unwrap();
        (m, report.without_timing())
    };
    let ((a, ra), (b, rb)) = (run(), run());
    let (bytes_a, bytes_b) = (encode(&a, None).unwrap(), encode(&b, None).unwrap());
    let reproducible = ra == rb && bytes_a == bytes_b;

    let back = decode::<f32>(&bytes_a, std::path::Path::new("memory")).unwrap().into_model();
    let probe: Tensor<f32> = randn(&[32, 3, 8, 8], 1.0, 25).cast();
    let round_trip = back.predict(&probe).unwrap().to_le_bytes() == a.predict(&probe).unwrap().to_le_bytes();

    let size = |share: bool| {
        let mapping = build_mapping(MappingKind::Cyclic, 4, 8).unwrap();
        let options = ExpandOptions {
            share,
            adjust: Some(AdjustConfig {
                kind: AdjustKind::ParallelAdapter,
                rank: 2,
            }),
            ..ExpandOptions::default()
        };
        let e = expand_model(&a, &mapping, &options).unwrap();
        encode(&e.model, Some(&e.info)).unwrap().len() as f64
    };
    let base = bytes_a.len() as f64;
    let (shared, unshared) = (size(true) / base, size(false) / base);
    ensure(
        reproducible && round_trip && shared < 1.2 && unshared > 1.8,
        format!("shared 2× {shared:.3}× base, unshared 2× {unshared:.3}× base (rank-2 adapters)"),
    )
}

fn criterion_11() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[8, 5, 4], 1.0, 26));
    let mut r = rng::stream(0, streams::DROP_PATH);
    let p0 = drop_path(&mut tape, x, 0.0, true, &mut r).unwrap();
    let inf = drop_path(&mut tape, x, 0.5, false, &mut r).unwrap();
    let identity = tape.value(p0) == tape.value(x) && tape.value(inf) == tape.value(x);
    let mut gaps = Vec::new();
    for p in [0.1, 0.5] {
        let draws = 10_000;
        let ones = tape.constant(Tensor::full(vec![draws, 1], 1.0));
        let y = drop_path(&mut tape, ones, p, true, &mut r).unwrap();
        gaps.push((tape.value(y).sum() / draws as f64 - 1.0).abs());
    }
    ensure(identity && gaps.iter().all(|g| *g < 0.02), format!("relative mean error {gaps:.4?}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", criterion_1()),
        (2, "shared-gradient oracle", criterion_2()),
        (3, "init-equivalence", criterion_3()),
        (4, "parameter accounting", criterion_4()),
        (5, "mapping tables", criterion_5()),
    ];
    let (six, seven) = criteria_6_and_7();
    results.push((6, "desk-scale training ordering", six));
    results.push((7, "frozen-weight guarantee", seven));
    results.push((8, "CKA properties", criterion_8()));
    results.push((9, "gradient-profile shape", criterion_9()));
    results.push((10, "reproducibility and persistence", criterion_10()));
    results.push((11, "drop-path sanity", criterion_11()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
