//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
#![allow(clippy::needless_range_loop)]

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use camo_core::attention::{masked_ta_forward, ta_forward, HeadGroupConfig, TaBranch};
use camo_core::gradcheck::{self, GradCheckCase, Registry, Sampling};
use camo_core::metrics::{self, GrayMap};
use camo_core::model::{CamoFormer, ModelConfig, STRIDES};
use camo_core::params::ParamStore;
use camo_core::train::{self, OverfitConfig, TARGET_LOSS};
use camo_core::{Tape, Tensor};
use image::{GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

// 1
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report =
        gradcheck::check_suite(&Registry::builtin(), &gradcheck::default_suite()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    for r in &report.results {
        ensure(r.passed, || {
            format!("{} max rel err {:.3e}", r.case.target, r.max_rel_error)
        })?;
    }
    ensure(report.uncovered.is_empty(), || {
        format!("uncovered ops {:?}", report.uncovered)
    })?;
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "{} cases, worst {} at {:.2e}, {elapsed:.1?}",
        report.results.len(),
        worst.case.target,
        worst.max_rel_error
    ))
}

fn random_branch(seed: u64) -> (ParamStore, TaBranch, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let b = TaBranch::register(&mut store, "b", heads * d, heads, d, &mut rng).unwrap();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
    }
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let x = Tensor::uniform([heads * d, h, w], -2.0, 2.0, &mut rng);
    (store, b, x)
}

// 2
fn mask_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (store, b, x) = random_branch(seed);
        let (_, h, w) = x.dims3().unwrap();
        let plain = ta_forward(&x, &store, &b).map_err(|e| e.to_string())?;
        let masked = masked_ta_forward(&x, &Tensor::ones([1, h, w]), &store, &b).map_err(|e| e.to_string())?;
        worst = worst.max(plain.max_abs_diff(&masked));
    }
    ensure(worst <= 1e-9, || format!("max diff {worst:.3e}"))?;
    Ok(format!("100 draws, max diff {worst:.1e}"))
}

// 3
fn zero_logit() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (mut store, b, x) = random_branch(1000 + seed);
        for id in [b.q_proj.weight, b.q_proj.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        store.get_mut(b.q_dw.bias).data_mut().fill(0.0);
        let [q, _, v] = common::qkv(&store, &b, &x);
        ensure(q.data().iter().all(|&z| z == 0.0), || "Q is not zero".into())?;
        let y = ta_forward(&x, &store, &b).map_err(|e| e.to_string())?;
        let (c, h, w) = v.dims3().unwrap();
        let d = b.head_dim;
        for head in 0..b.heads {
            for p in 0..h * w {
                let mean = (0..d).map(|j| v.data()[(head * d + j) * h * w + p]).sum::<f64>() / d as f64;
                for j in 0..d {
                    worst = worst.max((y.data()[(head * d + j) * h * w + p] - mean).abs());
                }
            }
        }
        ensure(c == b.width(), || "width mismatch".into())?;
    }
    ensure(worst <= 1e-9, || format!("max diff {worst:.3e}"))?;
    Ok(format!("100 draws, max diff {worst:.1e}"))
}

// 4
fn shape_ladder() -> Outcome {
    let model = CamoFormer::new(ModelConfig::micro()).map_err(|e| e.to_string())?;
    for size in [64, 96, 384] {
        let img = Tensor::uniform([3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(size as u64));
        let mut tape = Tape::new();
        let b = model.params.bind_constant(&mut tape);
        let x = tape.constant(img);
        let out = model.forward_on_tape(&mut tape, &b, x).map_err(|e| e.to_string())?;
        for level in 0..4 {
            let e = tape.value(out.raw[level]).shape();
            ensure(e[1] * STRIDES[level] == size && e[2] * STRIDES[level] == size, || {
                format!("stage {} at {size}: {e:?}", level + 1)
            })?;
            let d = tape.value(out.decoded[level]).shape();
            let ei = tape.value(out.pyramid[level]).shape();
            ensure(d[1..] == ei[1..], || {
                format!("D{} {d:?} vs E{} {ei:?}", level + 1, level + 1)
            })?;
        }
        ensure(tape.value(out.pyramid[4]).shape()[1] * 32 == size, || {
            "E5 stride".into()
        })?;
        for level in 0..5 {
            let p = tape.value(out.upsampled[level]).shape();
            ensure(p == [1, size, size], || format!("P{} at {size}: {p:?}", level + 1))?;
        }
    }
    Ok("strides 4/8/16/32 at 64, 96, 384".into())
}

// 5
fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for (p, g) in common::random_pairs(200, 16, 16, 2024) {
        let gb = g.binarized();
        let e = |r: camo_core::Result<f64>| r.unwrap();
        note(e(metrics::s_measure(&p, &gb)), common::s_measure(&p, &g));
        note(e(metrics::weighted_fmeasure(&p, &gb)), common::weighted_f(&p, &g));
        note(e(metrics::adaptive_emeasure(&p, &gb)), common::e_measure(&p, &g));
        note(e(metrics::mae(&p, &gb)), common::mae(&p, &g));
        let c = metrics::pr_and_fbeta_curves(&p, &gb).unwrap();
        for (k, (pr, re, f)) in common::curves(&p, &g).into_iter().enumerate() {
            note(c.precision[k], pr);
            note(c.recall[k], re);
            note(c.fbeta[k], f);
        }
        for k in [3, 15, 30] {
            let s = metrics::br_metrics(&p, &gb, k).unwrap();
            let (wf, mae, empty) = common::border_scores(&p, &g, k);
            if s.empty != empty {
                return Err(format!("border k={k}: empty flag differs"));
            }
            note(s.wf, wf);
            note(s.mae, mae);
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-9, || format!("max diff {worst:.3e}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!("200 pairs, max diff {worst:.1e}, {elapsed:.1?}"))
}

fn write_gray(path: &Path, map: &GrayMap) {
    let px = map.to_u8();
    GrayImage::from_raw(map.width() as u32, map.height() as u32, px)
        .unwrap()
        .save(path)
        .unwrap();
}

// 6
fn exact_match() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut maps = vec![
        GrayMap::filled(20, 24, 0.0),
        GrayMap::filled(16, 16, 1.0),
        common::rectangle(32, 4, 6, 20, 28),
    ];
    for _ in 0..5 {
        let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let v = (0..h * w).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        maps.push(GrayMap::new(h, w, v).unwrap());
    }
    for (i, m) in maps.iter().enumerate() {
        write_gray(&dir.path().join(format!("m{i}.png")), m);
    }
    let sel = metrics::MetricSelection::default();
    let out = camo_core::cli::evaluate_directories(dir.path(), dir.path(), &sel, 2).map_err(|e| e.to_string())?;
    let off = |v: Option<f64>, want: f64| (v.unwrap() - want).abs();
    let mut worst = 0.0f64;
    for s in &out.report.images {
        worst = worst
            .max(off(s.mae, 0.0))
            .max(off(s.sm, 1.0))
            .max(off(s.wf, 1.0))
            .max(off(s.em, 1.0));
    }
    let r = &out.report;
    worst = worst
        .max(off(r.mae, 0.0))
        .max(off(r.sm, 1.0))
        .max(off(r.wf, 1.0))
        .max(off(r.em, 1.0));
    ensure(out.report.count() == maps.len(), || "images were skipped".into())?;
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{} images, max deviation {worst:.1e}", maps.len()))
}

// 7
fn border_protocol() -> Outcome {
    let gt = common::rectangle(32, 8, 6, 22, 25);
    let mut areas = Vec::new();
    for k in [3, 15] {
        let got = metrics::border_region(&gt, k).map_err(|e| e.to_string())?;
        let want = common::border_region(&gt, k);
        ensure(got == want, || format!("k={k} differs from brute force"))?;
        areas.push(got.iter().filter(|&&b| b).count());
    }
    let b15 = metrics::border_region(&gt, 15).unwrap();
    let b30 = metrics::border_region(&gt, 30).unwrap();
    ensure(b15.iter().zip(&b30).all(|(&a, &b)| !a || b), || {
        "BR@30 misses BR@15 pixels".into()
    })?;
    Ok(format!("areas k=3: {}, k=15: {}", areas[0], areas[1]))
}

/// Gradients of the full model loss with respect to every parameter tensor.
fn model_gradcheck(config: ModelConfig, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![config.input_size.0, config.input_size.1];
    let inst = gradcheck::model_loss_instance(config, &mut rng).map_err(|e| e.to_string())?;
    let mut case = GradCheckCase::new("ablation");
    case.seed = seed;
    case.samples = 2;
    let r = gradcheck::check_instance(&case, shape, Sampling::PerTensor, inst, &mut rng).map_err(|e| e.to_string())?;
    ensure(r.passed, || format!("max rel err {:.3e}", r.max_rel_error))?;
    Ok(r.max_rel_error)
}

// 8
fn ablation_grid() -> Outcome {
    let mut worst = 0.0f64;
    for row in 0..8u64 {
        let heads = HeadGroupConfig::new((row & 1) as usize, ((row >> 1) & 1) as usize, ((row >> 2) & 1) as usize);
        let config = ModelConfig {
            input_size: (32, 32),
            cd: 6,
            heads,
            seed: 40 + row,
            ..ModelConfig::micro()
        };
        let model = CamoFormer::new(config.clone()).map_err(|e| format!("{heads:?}: {e}"))?;
        let img = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(row));
        let out = model.forward(&img).map_err(|e| format!("{heads:?}: {e}"))?;
        ensure(out.final_map().shape() == [1, 64, 64], || "bad output".into())?;
        if heads.total() == 0 {
            let pyr = model.pyramid(&img).unwrap();
            let (_, decoded) = model.decoder_forward(&pyr).unwrap();
            let e = &pyr.levels;
            let mut d = e[3].clone();
            let top = e[4].clone();
            let fuse = |top: &Tensor, ei: &Tensor| {
                let (_, h, w) = ei.dims3().unwrap();
                let up = common::bilinear(top, h, w);
                Tensor::new(
                    ei.shape().to_vec(),
                    up.data().iter().zip(ei.data()).map(|(a, b)| a * b + b).collect(),
                )
                .unwrap()
            };
            d = fuse(&top, &d);
            ensure(decoded[3].max_abs_diff(&d) < 1e-12, || "D4 is not plain fusion".into())?;
            for i in (0..3).rev() {
                d = fuse(&d, &e[i]);
                ensure(decoded[i].max_abs_diff(&d) < 1e-12, || {
                    format!("D{} is not plain fusion", i + 1)
                })?;
            }
        }
        worst = worst.max(model_gradcheck(config, 100 + row).map_err(|e| format!("{heads:?}: {e}"))?);
    }
    Ok(format!("8 rows, worst rel err {worst:.1e}"))
}

// 9
fn overfit_demo() -> Outcome {
    let start = Instant::now();
    let cfg = OverfitConfig::default();
    let (_, a) = train::overfit(&cfg).map_err(|e| e.to_string())?;
    let (_, b) = train::overfit(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(a.losses == b.losses, || "trajectories differ between runs".into())?;
    ensure(a.losses.iter().all(|l| l.is_finite()), || "non-finite loss".into())?;
    ensure(a.last() < TARGET_LOSS, || {
        format!(
            "final loss {:.4} after {} steps (initial {:.4})",
            a.last(),
            cfg.steps,
            a.initial()
        )
    })?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "{} steps, loss {:.3} -> {:.4}, two runs in {elapsed:.1?}",
        cfg.steps,
        a.initial(),
        a.last()
    ))
}

fn camo(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_camo"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("camo {args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out)
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

// 10
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = root.join("model.cfg");
    fs::write(
        &cfg,
        "input_size=64\nstage_widths=4,8,8,8\ncd=8\nheads_fta=1\nheads_bta=1\nheads_ta=2\nseed=11\n",
    )
    .unwrap();
    let img = root.join("in.png");
    RgbImage::from_fn(96, 64, |x, y| {
        image::Rgb([(x * 2) as u8, (y * 3) as u8, ((x * y) % 251) as u8])
    })
    .save(&img)
    .unwrap();

    let mut forward = Vec::new();
    for i in 0..3 {
        let out = root.join(format!("fwd{i}"));
        fs::create_dir(&out).unwrap();
        camo(&[
            "forward",
            "--config",
            &s(&cfg),
            "--image",
            &s(&img),
            "--out",
            &s(&out.join("p.png")),
            "--dump-all",
        ])?;
        forward.push(read_all(&out));
    }
    ensure(forward.windows(2).all(|w| w[0] == w[1]), || {
        "forward outputs differ".into()
    })?;

    let (pred, gt) = (root.join("pred"), root.join("gt"));
    fs::create_dir(&pred).unwrap();
    fs::create_dir(&gt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..16 {
        let (w, h) = (rng.gen_range(16..48), rng.gen_range(16..48));
        let (x0, y0) = (rng.gen_range(0..w / 2), rng.gen_range(0..h / 2));
        GrayImage::from_fn(w, h, |x, y| {
            Luma([if x >= x0 && y >= y0 && x < x0 + w / 2 && y < y0 + h / 2 {
                255
            } else {
                0
            }])
        })
        .save(gt.join(format!("i{i:02}.png")))
        .unwrap();
        let noise: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        GrayImage::from_raw(w, h, noise)
            .unwrap()
            .save(pred.join(format!("i{i:02}.png")))
            .unwrap();
    }
    let mut evals = Vec::new();
    for (i, jobs) in ["1", "3", "8", "8"].iter().enumerate() {
        let out = root.join(format!("eval{i}"));
        let run = camo(&[
            "eval",
            "--pred",
            &s(&pred),
            "--gt",
            &s(&gt),
            "--br",
            "15,30",
            "--jobs",
            jobs,
            "--out",
            &s(&out),
        ])?;
        let stdout_run = camo(&[
            "eval",
            "--pred",
            &s(&pred),
            "--gt",
            &s(&gt),
            "--br",
            "15,30",
            "--jobs",
            jobs,
        ])?;
        evals.push((read_all(&out), run.stdout, stdout_run.stdout));
    }
    ensure(evals.windows(2).all(|w| w[0] == w[1]), || {
        "eval outputs differ across runs or job counts".into()
    })?;
    Ok(format!(
        "3 forward runs, 4 eval runs at jobs 1/3/8/8, {} report files",
        evals[0].0.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("mask identity", mask_identity),
        ("zero-logit channel mean", zero_logit),
        ("shape ladder", shape_ladder),
        ("metric oracle equivalence", metric_oracles),
        ("exact-match maxima", exact_match),
        ("border-region protocol", border_protocol),
        ("ablation topology", ablation_grid),
        ("overfit demo", overfit_demo),
        ("determinism", determinism),
    ];
    // an `--exact NAME` or plain filter from the test runner narrows the run
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.1?}]", i + 1, start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.1?}]", i + 1, start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
