//! Reference implementations written straight from the definitions, plus
//! random fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sc_calib::numerics::Tensor2D;
use sc_calib::vit::TokenGrid;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn normal_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> TokenGrid {
    TokenGrid::new(h, w, normal_matrix(rng, h * w, d), None).unwrap()
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Local Outlier Factor, evaluated term by term.
pub fn lof_oracle(points: &Tensor2D, k: usize) -> Vec<f64> {
    let n = points.rows();
    let d = |i: usize, j: usize| euclid(points.row(i), points.row(j));

    let kdist: Vec<f64> = (0..n)
        .map(|p| {
            let mut ds: Vec<f64> = (0..n).filter(|&o| o != p).map(|o| d(p, o)).collect();
            ds.sort_by(f64::total_cmp);
            ds[k - 1]
        })
        .collect();
    let hood: Vec<Vec<usize>> = (0..n)
        .map(|p| (0..n).filter(|&o| o != p && d(p, o) <= kdist[p]).collect())
        .collect();
    let lrd: Vec<f64> = (0..n)
        .map(|p| {
            let reach: f64 = hood[p].iter().map(|&o| kdist[o].max(d(p, o))).sum();
            let mean = reach / hood[p].len() as f64;
            if mean == 0.0 {
                f64::INFINITY
            } else {
                1.0 / mean
            }
        })
        .collect();
    (0..n)
        .map(|p| {
            let s: f64 = hood[p]
                .iter()
                .map(|&o| {
                    if lrd[o].is_infinite() && lrd[p].is_infinite() {
                        1.0
                    } else {
                        lrd[o] / lrd[p]
                    }
                })
                .sum();
            s / hood[p].len() as f64
        })
        .collect()
}

/// Masked 3×3 mean evaluated for each position from the untouched input.
/// Returns the repaired tokens and the anomalies with no usable neighbour.
pub fn interpolation_oracle(
    grid: &TokenGrid,
    anomalies: &[(usize, usize)],
) -> (Tensor2D, Vec<(usize, usize)>) {
    let (h, w, d) = (grid.h, grid.w, grid.dim());
    let mut mask = vec![vec![false; w]; h];
    for &(r, c) in anomalies {
        mask[r][c] = true;
    }
    let mut out = grid.tokens.clone();
    let mut stuck = Vec::new();
    for &(r, c) in anomalies {
        let mut members = Vec::new();
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                if (rr, cc) != (r, c) && !mask[rr][cc] {
                    members.push((rr, cc));
                }
            }
        }
        if members.is_empty() {
            stuck.push((r, c));
            continue;
        }
        for j in 0..d {
            let s: f64 = members
                .iter()
                .map(|&(rr, cc)| f64::from(grid.tokens.get(rr * w + cc, j)))
                .sum();
            out.set(r * w + c, j, (s / members.len() as f64) as f32);
        }
    }
    (out, stuck)
}

/// Softmax-weighted token mixing, one output row at a time.
pub fn aggregation_oracle(tokens: &Tensor2D, simi: &Tensor2D, scale: f64, temperature: f64) -> Tensor2D {
    let n = tokens.rows();
    let d = tokens.cols();
    let mut out = Tensor2D::zeros(n, d);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| scale * f64::from(simi.get(i, j)) / temperature)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let v: f64 = (0..n).map(|j| e[j] / z * f64::from(tokens.get(j, c))).sum();
            out.set(i, c, v as f32);
        }
    }
    out
}

/// Per-class IoU by counting pixel sets directly.
pub fn miou_oracle(pred: &[u32], gt: &[u32], num_classes: u32, ignore: u32) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..num_classes {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if g == c && p == c {
                inter += 1;
            }
            if g == c || p == c {
                union += 1;
            }
        }
        ious.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (ious, miou)
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn auc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Draws `count` distinct grid positions.
pub fn distinct_positions(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    for i in 0..count.min(all.len()) {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(count);
    all
}

pub fn max_abs_diff(a: &Tensor2D, b: &Tensor2D) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

/// Three well-separated clusters: pure mid-level features and noisy deep ones.
pub struct ClusteredFeatures {
    pub labels: Vec<Option<u32>>,
    pub mid: TokenGrid,
    pub deep: TokenGrid,
}

pub fn clustered_features(seed: u64, side: usize, dim: usize, sigma: f32) -> ClusteredFeatures {
    let mut rng = rng(seed);
    let n = side * side;
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let mid_centres = normal_matrix(&mut rng, 3, dim);
    let deep_centres = normal_matrix(&mut rng, 3, dim);
    let mid = Tensor2D::from_fn(n, dim, |i, c| mid_centres.get(labels[i] as usize, c));
    let noise: Tensor2D = normal_matrix(&mut rng, n, dim);
    let deep = Tensor2D::from_fn(n, dim, |i, c| {
        deep_centres.get(labels[i] as usize, c) + sigma * noise.get(i, c)
    });
    ClusteredFeatures {
        labels: labels.into_iter().map(Some).collect(),
        mid: TokenGrid::new(side, side, mid, None).unwrap(),
        deep: TokenGrid::new(side, side, deep, None).unwrap(),
    }
}
