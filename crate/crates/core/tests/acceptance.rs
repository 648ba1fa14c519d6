//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use common::*;
use sc_calib::adjust::{aggregate_features, enhanced_attention, AdjustConfig, AttentionWeights};
use sc_calib::anomaly::{lof_scores, resolve_anomalies, select_anomalies, AnomalySet, LofConfig};
use sc_calib::eval::{auc_mann_whitney, coherence_auc, ConfusionAccumulator, PairSampling};
use sc_calib::fusion::{fuse, FusionStrategy};
use sc_calib::numerics::{cosine_similarity_map, SimilarityMap, Tensor2D};
use sc_calib::pipeline::{
    direct_inference, slide_inference, slide_logits, PipelineConfig, SlidePlan, TextBank,
};
use sc_calib::vit::{
    encode_all_layers, modified_last_layer, AttentionKind, AttentionMode, EncoderConfig,
    EncoderWeights, ImageTensor, TokenGrid,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * b.abs().max(1e-300) || (a - b).abs() <= tol
}

fn lof_oracle_criterion() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let k = [3, 5, 10][seed as usize % 3];
        let n = r.random_range(k + 1..=64);
        let d = r.random_range(1..=8);
        // every other set on an integer lattice so boundary ties occur
        let pts = if seed % 2 == 0 {
            normal_matrix(&mut r, n, d)
        } else {
            Tensor2D::from_fn(n, d, |_, _| r.random_range(-3i32..=3) as f32)
        };
        let got = lof_scores(&pts, &LofConfig::with_k(k)).map_err(|e| e.to_string())?;
        let want = lof_oracle(&pts, k);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            check(relative_close(*g, *w, 1e-6), || {
                format!("seed {seed} point {i}: {g} vs oracle {w}")
            })?;
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("50 sets, {checked} scores within 1e-6 rel, {secs:.2} s"))
}

fn interpolation_criterion() -> Outcome {
    let mut resolved = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let h = r.random_range(2..=16);
        let w = r.random_range(2..=16);
        let d = r.random_range(1..=16);
        let grid = normal_grid(&mut r, h, w, d);
        let count = r.random_range(1..=(h * w / 3).max(1));
        let mut coords = distinct_positions(&mut r, h, w, count);
        // always include a corner and a horizontally adjacent pair
        for extra in [(0, 0), (h - 1, w - 1), (h / 2, 0), (h / 2, 1)] {
            if !coords.contains(&extra) {
                coords.push(extra);
            }
        }
        let scores = vec![1.0; coords.len()];
        let set = AnomalySet::new((h, w), coords.clone(), scores).map_err(|e| e.to_string())?;
        let res = resolve_anomalies(&grid, &set).map_err(|e| e.to_string())?;
        let (want, stuck) = interpolation_oracle(&grid, &coords);
        check(res.unresolved == stuck, || format!("seed {seed}: unresolved sets differ"))?;
        let diff = max_abs_diff(&res.grid.tokens, &want);
        check(diff <= 1e-6, || format!("seed {seed}: max diff {diff:e}"))?;
        for i in 0..h * w {
            let pos = (i / w, i % w);
            if !coords.contains(&pos) {
                let same = res
                    .grid
                    .tokens
                    .row(i)
                    .iter()
                    .zip(grid.tokens.row(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                check(same, || format!("seed {seed}: normal token {pos:?} changed"))?;
            }
        }
        resolved += coords.len() - stuck.len();
    }
    Ok(format!("100 grids, {resolved} anomalies match within 1e-6, normals bit-identical"))
}

fn aggregation_criterion() -> Outcome {
    let cfg = AdjustConfig::default();
    let mut r = rng(7);
    // constant field
    let c: Vec<f32> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
    let constant = TokenGrid::new(4, 5, Tensor2D::from_fn(20, 6, |_, j| c[j]), None).unwrap();
    let simi = cosine_similarity_map(&normal_matrix(&mut r, 20, 5));
    let out = aggregate_features(&constant, &simi, &cfg).map_err(|e| e.to_string())?;
    let d1 = max_abs_diff(&out.tokens, &constant.tokens);
    check(d1 <= 1e-5, || format!("constant field drifted by {d1:e}"))?;

    // uniform similarity
    let grid = normal_grid(&mut r, 3, 4, 5);
    let uniform = SimilarityMap::from_matrix(Tensor2D::from_fn(12, 12, |_, _| 0.3)).unwrap();
    let out = aggregate_features(&grid, &uniform, &cfg).map_err(|e| e.to_string())?;
    let mean = Tensor2D::from_fn(12, 5, |_, j| {
        ((0..12).map(|i| f64::from(grid.tokens.get(i, j))).sum::<f64>() / 12.0) as f32
    });
    let d2 = max_abs_diff(&out.tokens, &mean);
    check(d2 <= 1e-5, || format!("uniform similarity off the mean by {d2:e}"))?;

    // three tokens, hand-set similarity
    let tokens = Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]]).unwrap();
    let s = Tensor2D::from_rows(&[[1.0, 0.5, -0.2], [0.5, 1.0, 0.1], [-0.2, 0.1, 1.0]]).unwrap();
    let grid = TokenGrid::new(1, 3, tokens.clone(), None).unwrap();
    let out = aggregate_features(&grid, &SimilarityMap::from_matrix(s.clone()).unwrap(), &cfg)
        .map_err(|e| e.to_string())?;
    let want = aggregation_oracle(&tokens, &s, 2.0, 1.0);
    let d3 = max_abs_diff(&out.tokens, &want);
    check(d3 <= 1e-6, || format!("3-token case off by {d3:e}"))?;
    Ok(format!("constant {d1:.1e}, uniform {d2:.1e}, 3-token {d3:.1e}"))
}

fn row_mass_criterion() -> Outcome {
    let single = [AttentionKind::QkBaseline, AttentionKind::KkOnly, AttentionKind::SimiOnly];
    let mut worst_double = 0f64;
    let mut worst_single = 0f64;
    let row_error = |a: &AttentionWeights, mass: f64| -> f64 {
        a.heads()
            .iter()
            .flat_map(|m| m.row_iter().map(|r| r.iter().map(|&v| f64::from(v)).sum::<f64>()))
            .map(|s| (s - mass).abs())
            .fold(0.0, f64::max)
    };
    for seed in 0..1000u64 {
        let mut r = rng(5000 + seed);
        let n = r.random_range(2..=24);
        let heads = r.random_range(1..=4);
        let dh = r.random_range(2..=8);
        let spread = r.random_range(0.1f32..6.0);
        let q: Vec<Tensor2D> = (0..heads).map(|_| normal_matrix(&mut r, n, dh).scale(spread)).collect();
        let k: Vec<Tensor2D> = (0..heads).map(|_| normal_matrix(&mut r, n, dh).scale(spread)).collect();
        let simi = cosine_similarity_map(&normal_matrix(&mut r, n, 6));
        let mut mode = AttentionMode::new(AttentionKind::KkPlusSimi);
        mode.simi_temperature = r.random_range(0.05..2.0);
        let a = enhanced_attention(&q, &k, Some(&simi), &mode).map_err(|e| e.to_string())?;
        worst_double = worst_double.max(row_error(&a, 2.0));
        for kind in single {
            let m = AttentionMode { kind, ..mode };
            let a = enhanced_attention(&q, &k, Some(&simi), &m).map_err(|e| e.to_string())?;
            worst_single = worst_single.max(row_error(&a, 1.0));
        }
    }
    check(worst_double <= 1e-5, || format!("KK_PLUS_SIMI row error {worst_double:e}"))?;
    check(worst_single <= 1e-6, || format!("single-softmax row error {worst_single:e}"))?;
    Ok(format!("1000 instances; |row-2| <= {worst_double:.1e}, |row-1| <= {worst_single:.1e}"))
}

fn fusion_criterion() -> Outcome {
    let weights = EncoderWeights::random(EncoderConfig::toy(4), 11).map_err(|e| e.to_string())?;
    let mut r = rng(12);
    let x = normal_grid(&mut r, 8, 8, 32);
    let ml = normal_grid(&mut r, 8, 8, 32);
    let simi = cosine_similarity_map(&normal_matrix(&mut r, 64, 8));
    let proj = weights
        .head_projections(weights.last_layer(), &x.tokens)
        .map_err(|e| e.to_string())?;
    let attn = enhanced_attention(&proj.q, &proj.k, Some(&simi), &AttentionMode::default())
        .map_err(|e| e.to_string())?;
    let last = |g: &TokenGrid| modified_last_layer(g, &weights, &attn);

    let two = fuse(&x, &ml, &last, FusionStrategy::TwoPass).map_err(|e| e.to_string())?;
    let a = fuse(&x, &ml, &last, FusionStrategy::None).map_err(|e| e.to_string())?;
    let b = fuse(&ml, &x, &last, FusionStrategy::None).map_err(|e| e.to_string())?;
    let sum = a.add(&b).map_err(|e| e.to_string())?;
    let exact = two
        .tokens
        .as_slice()
        .iter()
        .zip(sum.tokens.as_slice())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    check(exact, || "TWO_PASS differs from the sum of separate passes".into())?;

    // frozen attention with a linear (bias-free, norm-free) last layer
    let frozen = attn.heads()[0].clone();
    let proj_w = normal_matrix(&mut r, 32, 16).scale(1.0 / 32f32.sqrt());
    let linear = |g: &TokenGrid| -> sc_calib::Result<TokenGrid> {
        TokenGrid::new(g.h, g.w, frozen.matmul(&g.tokens)?.matmul(&proj_w)?, None)
    };
    let one = fuse(&x, &ml, &linear, FusionStrategy::OnePass).map_err(|e| e.to_string())?;
    let two = fuse(&x, &ml, &linear, FusionStrategy::TwoPass).map_err(|e| e.to_string())?;
    let d = max_abs_diff(&one.tokens, &two.tokens);
    check(d <= 1e-5, || format!("ONE_PASS vs TWO_PASS differ by {d:e}"))?;
    Ok(format!("TWO_PASS bit-exact; ONE_PASS = TWO_PASS within {d:.1e}"))
}

fn miou_criterion() -> Outcome {
    for seed in 0..200u64 {
        let mut r = rng(9000 + seed);
        let nc = r.random_range(1..=6u32);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=8);
        let ignore_rate = if seed % 4 == 0 { 1.0 } else { r.random_range(0.0..0.4) };
        let gt: Vec<u32> = (0..h * w)
            .map(|_| if r.random_bool(ignore_rate) { 255 } else { r.random_range(0..nc) })
            .collect();
        let pred: Vec<u32> = (0..h * w).map(|_| r.random_range(0..nc)).collect();
        let mut acc = ConfusionAccumulator::new(nc as usize, 255);
        acc.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let (ious, miou) = miou_oracle(&pred, &gt, nc, 255);
        check(acc.per_class_iou() == ious, || format!("seed {seed}: per-class IoU differs"))?;
        let same = acc.miou() == miou || (acc.miou().is_nan() && miou.is_nan());
        check(same, || format!("seed {seed}: mIoU {} vs {miou}", acc.miou()))?;
    }
    let mut acc = ConfusionAccumulator::new(2, 255);
    acc.accumulate(&[0, 0, 0, 0], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    check(acc.miou() == 0.25, || format!("hand case gave {}", acc.miou()))?;
    Ok("200 random maps exact; hand case 0.25".into())
}

fn auc_criterion() -> Outcome {
    let mut worst = 0f64;
    for seed in 0..200u64 {
        let mut r = rng(20_000 + seed);
        let np = r.random_range(1..=100);
        let nn = r.random_range(1..=100);
        // coarse grid of values to force ties
        let levels = r.random_range(2..=40);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| f64::from(r.random_range(0..levels)) / levels as f64).collect()
        };
        let pos = draw(np);
        let neg = draw(nn);
        let got = auc_mann_whitney(&pos, &neg).ok_or("missing AUC")?;
        let want = auc_oracle(&pos, &neg);
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let hand = auc_mann_whitney(&[0.9, 0.6], &[0.8, 0.3, 0.2, 0.1]).ok_or("missing AUC")?;
    check((hand - 7.0 / 8.0).abs() <= 1e-12, || format!("hand case gave {hand}"))?;
    Ok(format!("200 sets within {worst:.1e}; hand case 7/8"))
}

fn slide_weights() -> EncoderWeights {
    let config = EncoderConfig {
        image_size: 224,
        patch_size: 16,
        width: 16,
        depth: 3,
        heads: 2,
        mlp_dim: 32,
        output_dim: 8,
        ..EncoderConfig::toy(3)
    };
    EncoderWeights::random(config, 21).unwrap()
}

fn slide_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.adjust.pre_source_layer = 2;
    cfg.adjust.post_source_layer = 1;
    cfg.fusion.level_set = vec![1];
    cfg
}

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| r.random_range(-1.5f32..1.5)).collect()).unwrap()
}

fn slide_criterion() -> Outcome {
    let plan = SlidePlan::new(336, 336, 224, 112).map_err(|e| e.to_string())?;
    check(plan.windows().len() == 4, || format!("{} windows", plan.windows().len()))?;
    check(plan.tops == [0, 112] && plan.lefts == [0, 112], || "unexpected origins".into())?;
    let hits = plan.hit_counts();
    check(hits.iter().all(|&h| h >= 1), || "uncovered pixel".into())?;
    check(hits[168 * 336 + 168] == 4, || "centre not hit 4 times".into())?;

    let weights = slide_weights();
    let text = TextBank::random(vec!["a".into(), "b".into(), "c".into()], 8, 3).unwrap();
    let cfg = slide_config();
    let (canvas, _) =
        slide_logits(&random_image(1, 336, 336), &weights, &text, &cfg).map_err(|e| e.to_string())?;
    check((canvas.height, canvas.width) == (336, 336), || "canvas size".into())?;

    let img = random_image(2, 224, 224);
    let slid = slide_inference(&img, &weights, &text, &cfg, true).map_err(|e| e.to_string())?;
    let direct = direct_inference(&img, &weights, &text, &cfg, true).map_err(|e| e.to_string())?;
    let bits = |m: &sc_calib::pipeline::SegmentationMap| -> Vec<u32> {
        m.logits.as_ref().unwrap().data.iter().map(|v| v.to_bits()).collect()
    };
    check(slid.labels == direct.labels && bits(&slid) == bits(&direct), || {
        "224x224 slide differs from the direct pass".into()
    })?;
    Ok("336x336 -> 4 windows, min hit 1, centre 4; 224x224 slide == direct bitwise".into())
}

fn planted_anomaly_criterion() -> Outcome {
    let mut per_seed = Vec::new();
    for seed in 0..20u64 {
        let weights = EncoderWeights::random(EncoderConfig::toy(4), seed).map_err(|e| e.to_string())?;
        let mut r = rng(40_000 + seed);
        let image = ImageTensor::new(32, 32, (0..3 * 32 * 32).map(|_| r.random_range(-1.0f32..1.0)).collect())
            .unwrap();
        let mut stack = encode_all_layers(&image, &weights).map_err(|e| e.to_string())?;
        let planted = distinct_positions(&mut r, 8, 8, 5);
        let penul = stack.penultimate_index();
        let grid = stack.layer_mut(penul).map_err(|e| e.to_string())?;
        let typical = grid.tokens.row_iter().map(|row| sc_calib::numerics::l2_norm(row)).sum::<f64>()
            / grid.n() as f64;
        for &(row, col) in &planted {
            let dir = normal_matrix(&mut r, 1, grid.dim());
            let norm = sc_calib::numerics::l2_norm(dir.row(0));
            let idx = grid.index(row, col);
            for (t, v) in grid.tokens.row_mut(idx).iter_mut().zip(dir.row(0)) {
                *t += (20.0 * typical * f64::from(*v) / norm) as f32;
            }
        }
        let x = stack.penultimate().clone();
        let scores = lof_scores(&x.tokens, &LofConfig::default()).map_err(|e| e.to_string())?;
        let set = select_anomalies(&scores, (8, 8), 5).map_err(|e| e.to_string())?;
        let hits = planted.iter().filter(|p| set.contains(p.0, p.1)).count();
        check(hits >= 4, || format!("seed {seed}: recovered {hits} of 5"))?;

        let res = resolve_anomalies(&x, &set).map_err(|e| e.to_string())?;
        let (want, _) = interpolation_oracle(&x, &set.coords);
        let d = max_abs_diff(&res.grid.tokens, &want);
        check(d <= 1e-6, || format!("seed {seed}: resolved tokens off by {d:e}"))?;
        per_seed.push(hits);
    }
    let total: usize = per_seed.iter().sum();
    Ok(format!("20 seeds, {total}/100 planted positions recovered (min {})", per_seed.iter().min().unwrap()))
}

fn coherence_criterion() -> Outcome {
    let cfg = AdjustConfig::default();
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 0..20u64 {
        let f = clustered_features(60_000 + seed, 8, 16, 1.5);
        let sampling = PairSampling::default();
        let raw = coherence_auc(&cosine_similarity_map(&f.deep.tokens), &f.labels, &sampling)
            .map_err(|e| e.to_string())?
            .ok_or("degenerate labels")?;
        let mid = cosine_similarity_map(&f.mid.tokens);
        let agg = aggregate_features(&f.deep, &mid, &cfg).map_err(|e| e.to_string())?;
        let after = coherence_auc(&cosine_similarity_map(&agg.tokens), &f.labels, &sampling)
            .map_err(|e| e.to_string())?
            .ok_or("degenerate labels")?;
        if after > raw {
            wins += 1;
        }
        gains.push(after - raw);
    }
    check(wins >= 18, || format!("aggregation helped in only {wins}/20 seeds"))?;
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    Ok(format!("aggregated AUC higher in {wins}/20 seeds (mean gain {mean_gain:+.3})"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_file() && name != "timings.json" {
            files.insert(name, std::fs::read(&p).unwrap());
        }
    }
    files
}

fn determinism_criterion() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sc-calib");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = tmp.path().join("toy");
    let status = Command::new(bin)
        .args(["make-toy", "--out"])
        .arg(&toy)
        .args(["--images", "3", "--seed", "5"])
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let config = toy.join("config.json");

    let mut compared = 0;
    for command in ["segment", "evaluate", "coherence", "inspect-anomalies", "ablate"] {
        let mut runs = Vec::new();
        for (i, jobs) in ["1", "1", "4"].iter().enumerate() {
            let out = tmp.path().join(format!("{command}_{i}"));
            let result = Command::new(bin)
                .args(["--jobs", jobs, "--deterministic", command, "--config"])
                .arg(&config)
                .arg("--output-dir")
                .arg(&out)
                .args(["--set", "save_logits=true", "--set", "emit_csv=true"])
                .output()
                .map_err(|e| e.to_string())?;
            check(result.status.success(), || {
                format!("{command}: {}", String::from_utf8_lossy(&result.stderr))
            })?;
            runs.push(snapshot(&out));
        }
        check(!runs[0].is_empty(), || format!("{command} wrote nothing"))?;
        check(runs[0] == runs[1], || format!("{command}: two --jobs 1 runs differ"))?;
        check(runs[0] == runs[2], || format!("{command}: --jobs 1 and --jobs 4 differ"))?;
        compared += runs[0].len();
    }
    let has_png = std::fs::read_dir(tmp.path().join("segment_0"))
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png"));
    check(has_png, || "segment produced no PNG".into())?;
    Ok(format!("{compared} JSON/PNG/CSV/SCT outputs byte-identical across runs and --jobs 1/4"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("LOF oracle", lof_oracle_criterion),
        ("3x3 interpolation oracle", interpolation_criterion),
        ("feature aggregation properties", aggregation_criterion),
        ("attention row mass", row_mass_criterion),
        ("fusion identities", fusion_criterion),
        ("mIoU oracle", miou_criterion),
        ("AUC oracle", auc_criterion),
        ("slide tiling", slide_criterion),
        ("planted-anomaly end-to-end", planted_anomaly_criterion),
        ("coherence direction", coherence_criterion),
        ("determinism", determinism_criterion),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
