//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero when any criterion fails.
//!
//! Trained models are cached under the cargo target directory, so the first
//! run pretrains the editor backbone and the lifter and later runs reuse them.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;

use xview::consistency::{
    edit_loss, finetune_editor, gdfl, gdfl_on, lefl, lefl_on, LossConfig, TrainConfig, ViewPair,
};
use xview::flow_editor::{
    euler_single_step, gaussian_noise, perturb, pretrain, velocity, EditPrompt, EditorConfig, FlowEditor, ForwardArgs,
    PretrainConfig,
};
use xview::gaussians::{covariance, eval_sh_raw, read_ply, write_ply, GaussianPrimitive, GaussianScene, SH_C0};
use xview::imaging;
use xview::lifting::{photometric_loss, train_lifter, LiftTrainConfig, Lifter, LifterConfig};
use xview::lora::{adapted_linear, BoundAdapter, LoraAdapter, PlacementRule};
use xview::nn;
use xview::numerics::{rng, AdamW, Graph, Tensor};
use xview::perception::{cosine, localize, partition_patches, toy_color_embedder, Embedder, Localization};
use xview::pipeline::io::save_edit_result;
use xview::pipeline::{
    edit_scene, pretrained_editor, run_ablation, synth_dataset, trained_lifter, Models, PipelineConfig, SceneInput,
    SceneRecord,
};
use xview::rasterizer::{
    render, render_bruteforce, render_on, render_weights, CameraIntrinsics, CameraPose, RasterConfig, SplatVars,
};
use xview::vocab;

/// Finite-difference step of every gradient check.
const FD_EPS: f64 = 1e-5;
/// Relative floor of the gradient-check denominator.
const GRAD_FLOOR: f64 = 1e-6;
/// Relative error bound for whole losses.
const LOSS_GRAD_TOL: f64 = 1e-3;
/// Relative error bound for individual layers.
const LAYER_GRAD_TOL: f64 = 1e-4;
/// Largest probe of one gradient check.
const PROBE_DIM: usize = 32;
/// Re-evaluated velocity tolerance of the Euler identity.
const EULER_TOL: f64 = 1e-6;
/// Tiled versus brute-force rendering.
const RASTER_TOL: f64 = 1e-5;
/// Round-off allowance of weight plus transmittance.
const PARTITION_TOL: f64 = 1e-12;
const SH_TOL: f64 = 1e-9;
const EIGEN_TOL: f64 = 1e-9;
const QUAT_SIGN_TOL: f64 = 1e-12;
const PLY_TOL: f64 = 1e-6;
/// Feedforward pipeline wall-time budget.
const PIPELINE_BUDGET_S: f64 = 10.0;
const OVERFIT_PSNR_DB: f64 = 25.0;
const OVERFIT_STEPS: usize = 2000;
const HELD_OUT_REDUCTION: f64 = 0.30;

/// Seed of the 20-scene recolor benchmark.
const BENCH_SEED: u64 = 2024;
const BENCH_SCENES: usize = 20;
/// Seed of the held-out lifting scenes.
const HELD_OUT_SEED: u64 = 4242;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

/// The desk-scale configuration the benchmark criteria share. Adapter
/// fine-tuning uses a higher rate and fewer steps than the reference
/// schedule so the ablation fits its time budget; the lifter trains for 300
/// steps.
fn bench_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.steps = 300;
    cfg.train.optimizer.lr = 1e-2;
    cfg.lift_train.steps = 300;
    cfg
}

fn bench_data(cfg: &PipelineConfig) -> Vec<SceneRecord> {
    synth_dataset(BENCH_SCENES, BENCH_SEED, &cfg.synth).expect("benchmark scenes")
}

fn tiny_editor_config() -> EditorConfig {
    EditorConfig {
        width: 16,
        heads: 2,
        patch: 4,
        double_blocks: 1,
        single_blocks: 2,
        mlp_ratio: 2,
        channels: 3,
        pixel_features: 4,
        pixel_hidden: 8,
    }
}

/// A tiny editor with randomized output layers so every weight matters.
fn tiny_editor(seed: u64) -> FlowEditor {
    let mut r = rng(seed);
    let mut e = FlowEditor::new(tiny_editor_config(), &mut r).unwrap();
    let names: Vec<String> = e
        .weights
        .names()
        .into_iter()
        .filter(|n| n.starts_with("out.") || n.starts_with("pixel.fc2"))
        .collect();
    for n in names {
        let t = e.weights.get_mut(&n).unwrap();
        *t = Tensor::randn(t.shape(), 0.3, &mut r);
    }
    e
}

fn tiny_lifter_config() -> LifterConfig {
    LifterConfig {
        patch: 4,
        width: 16,
        intrinsics_width: 4,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 2,
        ..LifterConfig::default()
    }
}

fn image(seed: u64, size: usize) -> Tensor {
    Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut rng(seed))
}

/// Worst relative error between analytic and central-difference gradients
/// over the coordinates `idx` of `base`; `f` maps a full tensor to its value
/// and full gradient. The denominator is floored at `GRAD_FLOOR·max(1, |f|)`
/// so coordinates whose true gradient is zero are judged against the
/// difference quotient's round-off rather than against zero.
fn probe_check<F>(base: &Tensor, idx: &[usize], f: F) -> f64
where
    F: Fn(&Tensor) -> xview::Result<(f64, Tensor)>,
{
    assert!(idx.len() <= PROBE_DIM);
    let (value, analytic) = f(base).expect("probe point evaluates");
    let floor = GRAD_FLOOR * value.abs().max(1.0);
    let mut worst = 0.0f64;
    let mut x = base.clone();
    for &i in idx {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_EPS;
        let plus = f(&x).expect("perturbed point evaluates").0;
        x.data_mut()[i] = orig - FD_EPS;
        let minus = f(&x).expect("perturbed point evaluates").0;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    worst
}

/// Up to `n` evenly spread coordinates of a tensor with `numel` entries.
fn spread(numel: usize, n: usize) -> Vec<usize> {
    let n = n.min(numel);
    (0..n).map(|k| k * numel / n).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let e = tiny_editor(1);
    let prompt = EditPrompt::parse("turn the cube red").unwrap();
    let mut exact = true;
    let mut worst_cached = 0.0f64;
    let mut worst_fresh = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let src = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r);
        let z1 = perturb(&src, &gaussian_noise(&[16, 16, 3], &mut r), 1.0).unwrap();
        let (z0, v) = euler_single_step(&z1, &prompt, Some(&src), &e).unwrap();
        // The update is exactly the rounded difference with the cached velocity.
        exact &= z0.z == z1.z.sub(&v).unwrap();
        // Adding it back can differ from z1 by the rounding of one subtraction.
        let bound = z1.z.max_abs().max(v.max_abs()) * f64::EPSILON;
        let cached = z0.z.add(&v).unwrap().max_abs_diff(&z1.z);
        exact &= cached <= bound;
        worst_cached = worst_cached.max(cached);
        let again = velocity(&e, &z1, &prompt, Some(&src)).unwrap();
        worst_fresh = worst_fresh.max(z0.z.add(&again).unwrap().max_abs_diff(&z1.z));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(exact, || format!("cached residual {worst_cached:e} exceeds one rounding"))?;
    ensure(worst_fresh < EULER_TOL, || format!("re-evaluated residual {worst_fresh:e}"))?;
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "cached: exact update, residual {worst_cached:.1e} within one rounding; re-evaluated {worst_fresh:.1e}; {secs:.2}s"
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut e = tiny_editor(2);
    let prompt = EditPrompt::parse("turn the cube red").unwrap();
    let mut r = rng(3);
    let src = image(4, 16);
    let z1 = perturb(&src, &gaussian_noise(&[16, 16, 3], &mut r), 1.0).unwrap();
    let before = velocity(&e, &z1, &prompt, Some(&src)).unwrap();
    let checksum = e.backbone_checksum();
    e.attach_adapters(PlacementRule::LastK, 4, 1.0, &mut r).unwrap();
    let attached = velocity(&e, &z1, &prompt, Some(&src)).unwrap();
    ensure(before == attached, || "fresh adapters changed the forward pass".into())?;
    let pairs: Vec<ViewPair> = (0..4)
        .map(|i| ViewPair {
            left: image(10 + i, 16),
            right: image(20 + i, 16),
            prompt: "turn the cube red".into(),
        })
        .collect();
    let loss = LossConfig {
        lefl_patch: 8,
        localization_patch: 8,
        ..LossConfig::default()
    };
    let train = TrainConfig {
        steps: 2000,
        optimizer: AdamW {
            lr: 1e-3,
            ..AdamW::default()
        },
        ..TrainConfig::default()
    };
    let log = finetune_editor(&pairs, &mut e, &toy_color_embedder(), &train, &loss, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(log.len() == 2000, || format!("{} steps ran", log.len()))?;
    ensure(e.backbone_checksum() == checksum, || "backbone weights changed".into())?;
    let trained = velocity(&e, &z1, &prompt, Some(&src)).unwrap();
    ensure(trained != before, || "adapters did not train".into())?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("bit-identical at init, checksum stable over 2000 steps, {secs:.1}s"))
}

fn criterion_3() -> Outcome {
    let e = tiny_editor(5);
    let emb = toy_color_embedder();
    let prompt = EditPrompt::parse("turn the cube red").unwrap();
    let cfg = LossConfig {
        lefl_patch: 8,
        localization_patch: 8,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let x = image(200 + seed, 16);
        let noise = gaussian_noise(&[16, 16, 3], &mut rng(300 + seed));
        let gd = gdfl(&x, &x, &e, &prompt, &noise, &cfg).unwrap();
        // Different images whose localized cells hold identical pixels.
        let mut y = image(400 + seed, 16);
        for r in 0..8 {
            for c in 0..8 {
                imaging::set_pixel(&mut y, 8 + r, c, imaging::pixel(&x, r, 8 + c));
            }
        }
        let loc = Localization {
            patch: 8,
            rows: 2,
            cols: 2,
            left: (0, 1),
            right: (1, 0),
            left_scores: vec![0.0; 4],
            right_scores: vec![0.0; 4],
            confidence: 1.0,
            low_confidence: false,
        };
        let le = lefl(&x, &y, &loc, &emb, &cfg).unwrap();
        let same = Localization {
            right: (0, 1),
            ..loc
        };
        let (total, a, b) = edit_loss(&x, &x, &same, &e, &emb, &prompt, &noise, &cfg).unwrap();
        worst = worst.max(gd.abs()).max(le.abs()).max(total.abs()).max(a.abs()).max(b.abs());
    }
    ensure(worst == 0.0, || format!("largest value {worst:e}"))?;
    Ok("GDFL, LEFL and the joint loss are exactly 0 on 10 fixtures".into())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    let mut r = rng(6);

    // Losses.
    let e = tiny_editor(7);
    let prompt = EditPrompt::parse("turn the cube red").unwrap();
    let cfg = LossConfig {
        lefl_patch: 8,
        localization_patch: 8,
        ..LossConfig::default()
    };
    let (a, b) = (image(8, 16), image(9, 16));
    let noise = gaussian_noise(&[16, 16, 3], &mut r);
    let gd = probe_check(&a, &spread(a.numel(), PROBE_DIM), |x| {
        let g = Graph::new();
        let bound = e.bind_frozen_backbone(&g);
        let l = g.param(x.clone());
        let v = gdfl_on(&g, &e, &bound, l, g.constant(b.clone()), &prompt, &noise, &cfg)?;
        let grads = g.backward(v)?;
        Ok((g.value(v).item(), grads.get(l).unwrap().clone()))
    });
    report.push(("gdfl", gd, LOSS_GRAD_TOL));
    let emb = toy_color_embedder();
    let loc = localize(&a, &b, "red", &emb, 8, 0.0).unwrap();
    let ((li, lj), _) = loc.lefl_cells(8).unwrap();
    let cell: Vec<usize> = (0..PROBE_DIM)
        .map(|k| {
            let (y, x, c) = (li * 8 + k / 12 * 3, lj * 8 + (k / 3) % 4 * 2, k % 3);
            (y * 16 + x) * 3 + c
        })
        .collect();
    let le = probe_check(&a, &cell, |x| {
        let g = Graph::new();
        let l = g.param(x.clone());
        let v = lefl_on(&g, l, g.constant(b.clone()), &loc, &emb, &cfg)?;
        let grads = g.backward(v)?;
        Ok((g.value(v).item(), grads.get(l).unwrap().clone()))
    });
    report.push(("lefl", le, LOSS_GRAD_TOL));

    // Rasterizer through a photometric loss, per splat parameter group.
    let scene = GaussianScene {
        primitives: (0..6)
            .map(|_| {
                let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                GaussianPrimitive {
                    mean: [r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), r.random_range(1.8..2.6)],
                    opacity: r.random_range(0.2..0.9),
                    rotation: q.map(|v| v / n),
                    scale: std::array::from_fn(|_| r.random_range(0.05..0.15)),
                    sh: (0..12).map(|_| r.random_range(-0.5..0.5)).collect(),
                }
            })
            .collect(),
        sh_degree: 1,
        canonical_view: 0,
    };
    let intr = CameraIntrinsics::from_fov(24, 24, 50.0);
    let pose = CameraPose::look_at([0.2, -0.1, -0.2], [0.0, 0.0, 2.2], [0.0, -1.0, 0.0]).unwrap();
    let target = image(10, 24);
    let flat = |f: &dyn Fn(&GaussianPrimitive) -> Vec<f64>| -> Tensor {
        let data: Vec<f64> = scene.primitives.iter().flat_map(f).collect();
        let n = scene.primitives.len();
        Tensor::from_vec(&[n, data.len() / n], data)
    };
    let base = [
        flat(&|p| p.mean.to_vec()),
        flat(&|p| vec![p.opacity]),
        flat(&|p| p.rotation.to_vec()),
        flat(&|p| p.scale.to_vec()),
        flat(&|p| p.sh.clone()),
    ];
    for (k, name) in ["means", "opacity", "rotation", "scale", "sh"].iter().enumerate() {
        let err = probe_check(&base[k], &spread(base[k].numel(), PROBE_DIM), |x| {
            let g = Graph::new();
            let mut vars: Vec<_> = base.iter().map(|t| g.constant(t.clone())).collect();
            vars[k] = g.param(x.clone());
            let sv = SplatVars {
                means: vars[0],
                opacity: g.reshape(vars[1], &[6])?,
                rotation: vars[2],
                scale: vars[3],
                sh: vars[4],
                sh_degree: 1,
            };
            let img = render_on(&g, sv, &intr, &pose, [0.3; 3], &RasterConfig::default())?;
            let d = g.sub(img, g.constant(target.clone()))?;
            let loss = g.mean_square(d);
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads.get(vars[k]).unwrap().clone()))
        });
        report.push((Box::leak(format!("render/{name}").into_boxed_str()), err, LOSS_GRAD_TOL));
    }

    // Building-block layers.
    let x = Tensor::randn(&[4, 8], 1.0, &mut r);
    let w = Tensor::randn(&[4, 8], 1.0, &mut r);
    let weighted = |g: &Graph, y| -> xview::Result<_> {
        let s = g.shape(y);
        let wt = Tensor::randn(&s, 1.0, &mut rng(s.iter().product::<usize>() as u64));
        let p = g.mul(y, g.constant(wt))?;
        Ok(g.sum(p))
    };
    let mut params = nn::Params::new();
    nn::init_mlp(&mut params, "m", 8, 16, &mut r);
    for name in params.names() {
        let t = params.get_mut(&name).unwrap();
        *t = Tensor::randn(t.shape(), 0.5, &mut r);
    }
    for name in params.names() {
        let err = probe_check(params.get(&name).unwrap(), &spread(params.get(&name).unwrap().numel(), PROBE_DIM), |t| {
            let mut p = params.clone();
            p.insert(name.clone(), t.clone());
            let g = Graph::new();
            let b = p.bind(&g, true);
            let y = nn::mlp(&g, &b, "m", g.constant(x.clone()))?;
            let s = weighted(&g, y)?;
            let grads = g.backward(s)?;
            Ok((g.value(s).item(), grads.get(b.var(&name)?).unwrap().clone()))
        });
        report.push((Box::leak(format!("mlp/{name}").into_boxed_str()), err, LAYER_GRAD_TOL));
    }
    let att = probe_check(&x, &spread(x.numel(), PROBE_DIM), |q| {
        let g = Graph::new();
        let qv = g.param(q.clone());
        let kv = g.constant(w.clone());
        let y = nn::attention(&g, qv, kv, kv, 2)?;
        let s = weighted(&g, y)?;
        let grads = g.backward(s)?;
        Ok((g.value(s).item(), grads.get(qv).unwrap().clone()))
    });
    report.push(("attention", att, LAYER_GRAD_TOL));
    let ln = probe_check(&x, &spread(x.numel(), PROBE_DIM), |q| {
        let g = Graph::new();
        let qv = g.param(q.clone());
        let y = g.layer_norm(qv, 1e-6);
        let s = weighted(&g, y)?;
        let grads = g.backward(s)?;
        Ok((g.value(s).item(), grads.get(qv).unwrap().clone()))
    });
    report.push(("layer_norm", ln, LAYER_GRAD_TOL));
    let mut ad = LoraAdapter::new(8, 6, 4, 1.0, &mut r).unwrap();
    ad.b = Tensor::randn(&[6, 4], 0.5, &mut r);
    let lw = Tensor::randn(&[8, 6], 0.5, &mut r);
    for (which, t) in [("lora/A", ad.a.clone()), ("lora/B", ad.b.clone())] {
        let err = probe_check(&t, &spread(t.numel(), PROBE_DIM), |p| {
            let g = Graph::new();
            let (av, bv) = if which == "lora/A" {
                (g.param(p.clone()), g.constant(ad.b.clone()))
            } else {
                (g.constant(ad.a.clone()), g.param(p.clone()))
            };
            let y = adapted_linear(
                &g,
                g.constant(x.clone()),
                g.constant(lw.clone()),
                g.constant(Tensor::zeros(&[6])),
                Some(BoundAdapter {
                    a: av,
                    b: bv,
                    scale: 1.0,
                }),
            )?;
            let s = weighted(&g, y)?;
            let grads = g.backward(s)?;
            let v = if which == "lora/A" { av } else { bv };
            Ok((g.value(s).item(), grads.get(v).unwrap().clone()))
        });
        report.push((which, err, LAYER_GRAD_TOL));
    }

    // Every editor weight tensor through a full forward pass.
    let src = image(11, 8);
    let z = image(12, 8);
    let ew = Tensor::randn(&[8, 8, 3], 1.0, &mut r);
    let mut editor_worst = (0.0f64, String::new());
    for name in e.weights.names() {
        let t = e.weights.get(&name).unwrap().clone();
        let err = probe_check(&t, &spread(t.numel(), 4), |p| {
            let mut e2 = e.clone();
            e2.weights.insert(name.clone(), p.clone());
            let g = Graph::new();
            let b = e2.bind_backbone_trainable(&g);
            let out = e2.forward(
                &g,
                &b,
                ForwardArgs {
                    z: g.constant(z.clone()),
                    t: 0.6,
                    prompt: &prompt.ids,
                    source: Some(g.constant(src.clone())),
                    panel_cols: None,
                    tap: None,
                },
            )?;
            let s = g.mul(out.velocity, g.constant(ew.clone()))?;
            let s = g.sum(s);
            let grads = g.backward(s)?;
            Ok((g.value(s).item(), grads.get(b.weights.var(&name)?).unwrap().clone()))
        });
        if err > editor_worst.0 {
            editor_worst = (err, name.clone());
        }
    }
    report.push((Box::leak(format!("editor/{}", editor_worst.1).into_boxed_str()), editor_worst.0, LAYER_GRAD_TOL));

    // Every lifter weight tensor through its splat outputs; the rasterizer
    // is checked above on its own.
    let lifter = Lifter::new(tiny_lifter_config(), &mut rng(13)).unwrap();
    let lintr = CameraIntrinsics::from_fov(16, 16, 45.0);
    let views = [image(14, 16), image(15, 16)];
    let mut lifter_worst = (0.0f64, String::new());
    for name in lifter.weights.names() {
        let t = lifter.weights.get(&name).unwrap().clone();
        let err = probe_check(&t, &spread(t.numel(), 4), |p| {
            let mut w = lifter.weights.clone();
            w.insert(name.clone(), p.clone());
            let g = Graph::new();
            let b = w.bind(&g, true);
            let vs = [g.constant(views[0].clone()), g.constant(views[1].clone())];
            let out = lifter.forward_on(&g, &b, vs, [&lintr, &lintr])?;
            let sp = out.splats;
            let mut total = weighted(&g, out.confidence)?;
            for v in [sp.means, sp.opacity, sp.rotation, sp.scale, sp.sh] {
                let term = weighted(&g, v)?;
                total = g.add(total, term)?;
            }
            let grads = g.backward(total)?;
            let grad = grads.get(b.var(&name)?).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            Ok((g.value(total).item(), grad))
        });
        if err > lifter_worst.0 {
            lifter_worst = (err, name.clone());
        }
    }
    report.push((Box::leak(format!("lifter/{}", lifter_worst.1).into_boxed_str()), lifter_worst.0, LAYER_GRAD_TOL));

    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = report
        .iter()
        .filter(|(_, e, tol)| !(*e < *tol))
        .map(|(n, e, tol)| format!("{n} {e:.2e} (tol {tol:.0e})"))
        .collect();
    ensure(failed.is_empty(), || failed.join(", "))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let worst = report.iter().map(|(_, e, _)| *e).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.1e}, {secs:.1}s", report.len()))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut r = rng(17);
    let intr = CameraIntrinsics::from_fov(64, 64, 55.0);
    let cfg = RasterConfig::default();
    let (mut worst, mut worst_partition) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = r.random_range(1..=50);
        let degree = r.random_range(0..=3);
        let scene = GaussianScene {
            primitives: (0..n)
                .map(|_| {
                    let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
                    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                    GaussianPrimitive {
                        mean: [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), r.random_range(1.2..3.5)],
                        opacity: r.random_range(0.05..1.0),
                        rotation: q.map(|v| v / qn),
                        scale: std::array::from_fn(|_| r.random_range(0.01..0.25)),
                        sh: (0..3 * (degree + 1) * (degree + 1)).map(|_| r.random_range(-0.8..0.8)).collect(),
                    }
                })
                .collect(),
            sh_degree: degree,
            canonical_view: 0,
        };
        let eye = [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(-0.3..0.0)];
        let pose = CameraPose::look_at(eye, [0.0, 0.0, 2.0], [0.0, -1.0, 0.0]).unwrap();
        let tiled = render(&scene, &intr, &pose, [0.2, 0.4, 0.6], &cfg).unwrap().image;
        let brute = render_bruteforce(&scene, &intr, &pose, [0.2, 0.4, 0.6], &cfg).unwrap();
        worst = worst.max(tiled.max_abs_diff(&brute));
        let (w, t) = render_weights(&scene, &intr, &pose, &cfg).unwrap();
        for (a, b) in w.data().iter().zip(t.data()) {
            worst_partition = worst_partition.max((a + b - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < RASTER_TOL, || format!("max abs diff {worst:e}"))?;
    ensure(worst_partition <= PARTITION_TOL, || format!("weight + transmittance off by {worst_partition:e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "20 scenes, max abs diff {worst:.1e}, weight+transmittance within {worst_partition:.1e} of 1, {secs:.2}s"
    ))
}

fn criterion_6() -> Outcome {
    let mut r = rng(19);
    let (mut sh_err, mut eig_err, mut sign_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        // Degree-0 coefficients give a direction-independent color.
        let c: [f64; 3] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let dir: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let out = eval_sh_raw(&c, dir, 0).unwrap();
        for k in 0..3 {
            sh_err = sh_err.max((out[k] - (SH_C0 * c[k] + 0.5)).abs());
        }
        let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = q.map(|v| v / qn);
        let s: [f64; 3] = std::array::from_fn(|_| r.random_range(0.01..2.0));
        let cov = covariance(q, s).unwrap();
        let m = Matrix3::from_fn(|i, j| cov[i][j]);
        let mut eig: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        sq.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&sq) {
            eig_err = eig_err.max((a - b).abs());
        }
        let neg = covariance(q.map(|v| -v), s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                sign_err = sign_err.max((cov[i][j] - neg[i][j]).abs());
            }
        }
    }
    ensure(sh_err < SH_TOL, || format!("constant SH error {sh_err:e}"))?;
    ensure(eig_err < EIGEN_TOL, || format!("eigenvalue error {eig_err:e}"))?;
    ensure(sign_err < QUAT_SIGN_TOL, || format!("quaternion sign error {sign_err:e}"))?;
    Ok(format!(
        "SH {sh_err:.1e}, eigenvalues {eig_err:.1e}, quaternion sign {sign_err:.1e} over 200 draws"
    ))
}

fn criterion_7() -> Outcome {
    let emb = toy_color_embedder();
    let names = emb.color_names().to_vec();
    let (p, cells) = (8usize, 4usize);
    let mut hits = 0;
    let mut oracle_agree = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let word = names[r.random_range(0..names.len())];
        let rgb = vocab::color_rgb(word).unwrap();
        let others: Vec<&str> = names.iter().copied().filter(|n| *n != word).collect();
        let mut img = Tensor::zeros(&[p * cells, p * cells, 3]);
        let planted = r.random_range(0..cells * cells);
        for cell in 0..cells * cells {
            let (ci, cj) = (cell / cells, cell % cells);
            // Distractors: solid other colors or per-pixel noise.
            let solid = if cell == planted {
                Some(rgb)
            } else if r.random_bool(0.5) {
                Some(vocab::color_rgb(others[r.random_range(0..others.len())]).unwrap())
            } else {
                None
            };
            for y in 0..p {
                for x in 0..p {
                    let c = solid.unwrap_or_else(|| std::array::from_fn(|_| r.random_range(0.0..1.0)));
                    imaging::set_pixel(&mut img, ci * p + y, cj * p + x, c);
                }
            }
        }
        let prompt = format!("turn it {word}");
        let prompt = if vocab::tokenize(&prompt).is_ok() { prompt } else { word.to_string() };
        let loc = localize(&img, &img, &prompt, &emb, p, 0.0).unwrap();
        let found = loc.left.0 * cells + loc.left.1;
        if found == planted {
            hits += 1;
        }
        // Exhaustive oracle: embed every cell independently.
        let text = emb.embed_text(&prompt).unwrap();
        let grid = partition_patches(&img, p).unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..cells {
            for j in 0..cells {
                let s = cosine(&emb.embed_patch(grid.get(i, j)).unwrap(), &text);
                if s > best.1 {
                    best = (i * cells + j, s);
                }
            }
        }
        if best.0 == found {
            oracle_agree += 1;
        }
    }
    ensure(hits == 100 && oracle_agree == 100, || {
        format!("planted {hits}/100, oracle agreement {oracle_agree}/100")
    })?;
    Ok("planted patch found 100/100, exhaustive oracle agrees 100/100".into())
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = bench_config();
    let data = bench_data(&cfg);
    let backbone = pretrained_editor(&cfg, Some(&cache_dir())).map_err(|e| e.to_string())?;
    let lifter = trained_lifter(&data, &cfg, Some(&cache_dir())).map_err(|e| e.to_string())?;
    let emb = toy_color_embedder();
    let table = run_ablation(&data, &backbone, &lifter, &emb, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    print!("{}", table.markdown());
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} {:.5}/{:.4}", r.name, r.report.lefl_distance, r.report.clip_sim))
        .collect();
    let summary = format!(
        "distance/clip_sim {}; smallest gap {:.1}%, {secs:.0}s",
        rows.join(", "),
        100.0 * table.check.min_relative_gap
    );
    ensure(table.check.lefl_strictly_ordered, || format!("distance not ordered with 10% gaps: {summary}"))?;
    ensure(table.check.clip_sim_non_decreasing, || format!("clip_sim decreased: {summary}"))?;
    ensure(table.check.shared_data_order, || "runs drew different pair orders".into())?;
    ensure(secs < 20.0 * 60.0, || format!("took {secs:.0}s"))?;
    Ok(summary)
}

fn criterion_9() -> Outcome {
    let cfg = bench_config();
    let data = bench_data(&cfg);
    let editor = pretrained_editor(&cfg, Some(&cache_dir())).map_err(|e| e.to_string())?;
    let lifter = trained_lifter(&data, &cfg, Some(&cache_dir())).map_err(|e| e.to_string())?;
    let emb = toy_color_embedder();
    let models = Models {
        editor: &editor,
        lifter: &lifter,
        embedder: &emb,
    };
    let start = Instant::now();
    let res = edit_scene(&SceneInput::from_record(&data[0]), &models, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let c = res.counts;
    ensure(
        c.editor_forwards == 2 && c.lifter_forwards == 1 && c.renders == 4 && c.optimizer_steps == 0,
        || format!("counts {c:?}"),
    )?;
    ensure(secs < PIPELINE_BUDGET_S, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "2 editor forwards, 1 lifter forward, 4 renders at {}px, 0 optimizer steps, {secs:.2}s",
        cfg.protocol.resolution
    ))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let cfg = bench_config();
    // Single-scene overfit.
    let one = synth_dataset(1, 1, &cfg.synth).unwrap()[0].lift_sample();
    let mut lifter = Lifter::new(cfg.lifter.clone(), &mut rng(0)).unwrap();
    let train = LiftTrainConfig {
        steps: 300,
        ..cfg.lift_train.clone()
    };
    train_lifter(&mut lifter, std::slice::from_ref(&one), &train, None).unwrap();
    let out = lifter
        .predict_gaussians([&one.views[0], &one.views[1]], [&one.intrinsics[0], &one.intrinsics[1]])
        .unwrap();
    let psnr = one
        .targets
        .iter()
        .map(|t| {
            let img = render(&out.scene, &t.intrinsics, &t.pose, train.background, &train.raster).unwrap().image;
            imaging::psnr(&img, &t.image)
        })
        .fold(f64::INFINITY, f64::min);
    ensure(train.steps <= OVERFIT_STEPS, || "overfit budget exceeded".into())?;
    ensure(psnr > OVERFIT_PSNR_DB, || format!("overfit PSNR {psnr:.2} dB after {} steps", train.steps))?;

    // Held-out reduction of the 20-scene lifter.
    let data = bench_data(&cfg);
    let trained = trained_lifter(&data, &cfg, Some(&cache_dir())).map_err(|e| e.to_string())?;
    let initial = Lifter::new(cfg.lifter.clone(), &mut rng(cfg.seed)).unwrap();
    let held: Vec<_> = synth_dataset(10, HELD_OUT_SEED, &cfg.synth)
        .unwrap()
        .iter()
        .map(SceneRecord::lift_sample)
        .collect();
    let mean_loss = |l: &Lifter| -> f64 {
        held.iter().map(|s| photometric_loss(l, s, &cfg.lift_train).unwrap()).sum::<f64>() / held.len() as f64
    };
    let (before, after) = (mean_loss(&initial), mean_loss(&trained));
    let reduction = 1.0 - after / before;
    let secs = start.elapsed().as_secs_f64();
    ensure(reduction >= HELD_OUT_REDUCTION, || {
        format!("held-out loss {before:.4} -> {after:.4} ({:.1}%)", 100.0 * reduction)
    })?;
    ensure(secs < 15.0 * 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "overfit {psnr:.1} dB in {} steps; held-out loss {before:.4} -> {after:.4} (-{:.0}%), {secs:.0}s",
        train.steps,
        100.0 * reduction
    ))
}

fn criterion_11() -> Outcome {
    // Two full runs from seeds: pretraining, lifter training, editing.
    let run = |dir: &Path| {
        let mut cfg = PipelineConfig {
            editor: tiny_editor_config(),
            lifter: tiny_lifter_config(),
            ..PipelineConfig::default()
        };
        cfg.pretrain = PretrainConfig {
            steps: 20,
            image_size: 16,
            ..PretrainConfig::default()
        };
        cfg.lift_train.steps = 10;
        cfg.protocol.resolution = 32;
        let data = synth_dataset(2, 77, &cfg.synth).unwrap();
        let mut editor = FlowEditor::new(cfg.editor.clone(), &mut rng(cfg.pretrain.seed)).unwrap();
        pretrain(&mut editor, &cfg.pretrain).unwrap();
        let lifter = trained_lifter(&data, &cfg, None).unwrap();
        let emb = toy_color_embedder();
        let models = Models {
            editor: &editor,
            lifter: &lifter,
            embedder: &emb,
        };
        let res = edit_scene(&SceneInput::from_record(&data[0]), &models, &cfg).unwrap();
        save_edit_result(dir, &res).unwrap();
        res.scene
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let scene = run(dirs[0].path());
    run(dirs[1].path());
    for f in ["scene.ply", "metrics.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    let path = dirs[0].path().join("again.ply");
    write_ply(&scene, &path).unwrap();
    let back = read_ply(&path).unwrap();
    ensure(back.primitives.len() == scene.primitives.len(), || "primitive count changed".into())?;
    let mut worst = 0.0f64;
    for (a, b) in scene.primitives.iter().zip(&back.primitives) {
        let fields = |p: &GaussianPrimitive| -> Vec<f64> {
            let mut v = p.mean.to_vec();
            v.push(p.opacity);
            v.extend(p.rotation);
            v.extend(p.scale);
            v.extend(&p.sh);
            v
        };
        for (x, y) in fields(a).iter().zip(&fields(b)) {
            worst = worst.max((*x as f32 as f64 - y).abs());
        }
    }
    ensure(worst < PLY_TOL, || format!("PLY field error {worst:e}"))?;
    Ok(format!(
        "byte-identical PLY and metrics across two seeded runs; PLY round trip within {worst:.1e} of 32-bit"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("single-step sampling identity", criterion_1),
        ("adapter no-op at init", criterion_2),
        ("loss zero cases", criterion_3),
        ("gradient checks", criterion_4),
        ("rasterizer oracle equivalence", criterion_5),
        ("SH and covariance analytics", criterion_6),
        ("localization correctness", criterion_7),
        ("consistency ablation trend", criterion_8),
        ("feedforward inference contract", criterion_9),
        ("lifting training sanity", criterion_10),
        ("determinism and I/O", criterion_11),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
