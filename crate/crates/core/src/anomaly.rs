//! Anomaly-token detection with the Local Outlier Factor and repair by
//! masked 3×3 neighbour interpolation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::vit::TokenGrid;

pub const DEFAULT_K_NEIGHBORS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LofConfig {
    /// Neighbourhood size; `None` means `min(20, N − 1)`.
    pub k_neighbors: Option<usize>,
    /// How many top-scoring tokens to flag.
    pub anomaly_count: usize,
}

impl Default for LofConfig {
    fn default() -> Self {
        Self {
            k_neighbors: None,
            anomaly_count: 10,
        }
    }
}

impl LofConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k_neighbors: Some(k),
            ..Self::default()
        }
    }

    pub fn effective_k(&self, n: usize) -> usize {
        self.k_neighbors
            .unwrap_or_else(|| DEFAULT_K_NEIGHBORS.min(n.saturating_sub(1)))
    }
}

/// Local Outlier Factor of every row of `tokens` under Euclidean distance.
///
/// The k-neighbourhood of a point contains every other point no farther than
/// its k-distance, so ties at the boundary are all included. When a point's
/// mean reachability distance is zero (it sits in a cluster of duplicates),
/// its reachability density is treated as infinite: two infinite densities
/// compare as equal (ratio 1), an infinite density over a finite one is
/// infinite, and a finite one over an infinite one is 0.
pub fn lof_scores(tokens: &Tensor2D, cfg: &LofConfig) -> Result<Vec<f64>> {
    let n = tokens.rows();
    let k = cfg.effective_k(n);
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!(
            "LOF needs 1 <= k < N, got k = {k} for N = {n}"
        )));
    }

    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = tokens.row(i);
            (0..n)
                .map(|j| {
                    a.iter()
                        .zip(tokens.row(j))
                        .map(|(x, y)| {
                            let d = f64::from(*x) - f64::from(*y);
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();

    let (k_distance, neighborhoods): (Vec<f64>, Vec<Vec<usize>>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
            let kd = dist[i][others[k - 1]];
            let hood = others.into_iter().take_while(|&j| dist[i][j] <= kd).collect();
            (kd, hood)
        })
        .unzip();

    // Mean reachability distance; its reciprocal is the local reachability density.
    let mean_reach: Vec<f64> = neighborhoods
        .iter()
        .enumerate()
        .map(|(i, hood)| {
            hood.iter().map(|&o| k_distance[o].max(dist[i][o])).sum::<f64>() / hood.len() as f64
        })
        .collect();

    Ok(neighborhoods
        .iter()
        .enumerate()
        .map(|(i, hood)| {
            let total: f64 = hood
                .iter()
                .map(|&o| density_ratio(mean_reach[o], mean_reach[i]))
                .sum();
            total / hood.len() as f64
        })
        .collect())
}

/// `lrd(o) / lrd(p)` expressed through mean reachability distances.
fn density_ratio(reach_o: f64, reach_p: f64) -> f64 {
    match (reach_o == 0.0, reach_p == 0.0) {
        (true, true) => 1.0,
        (true, false) => f64::INFINITY,
        (false, true) => 0.0,
        (false, false) => reach_p / reach_o,
    }
}

/// Flagged grid positions with their outlier scores, highest score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySet {
    pub grid: (usize, usize),
    pub coords: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl AnomalySet {
    pub fn new(grid: (usize, usize), coords: Vec<(usize, usize)>, scores: Vec<f64>) -> Result<Self> {
        if coords.len() != scores.len() {
            return Err(Error::Shape(format!(
                "{} coordinates with {} scores",
                coords.len(),
                scores.len()
            )));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= grid.0 || c >= grid.1) {
            return Err(Error::Parameter(format!(
                "anomaly ({r}, {c}) outside {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self { grid, coords, scores })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.coords.contains(&(row, col))
    }

    /// Row-major flat indices of the flagged positions.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.coords.iter().map(|&(r, c)| r * self.grid.1 + c).collect()
    }
}

/// The `count` highest-scoring positions; equal scores resolve to the lower
/// row-major index.
pub fn select_anomalies(scores: &[f64], grid: (usize, usize), count: usize) -> Result<AnomalySet> {
    let n = grid.0 * grid.1;
    if scores.len() != n {
        return Err(Error::Shape(format!(
            "{} scores for a {}x{} grid",
            scores.len(),
            grid.0,
            grid.1
        )));
    }
    if count >= n.max(1) {
        return Err(Error::Parameter(format!(
            "anomaly count {count} must be below the token count {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    let coords = order.iter().map(|&i| (i / grid.1, i % grid.1)).collect();
    let picked = order.iter().map(|&i| scores[i]).collect();
    AnomalySet::new(grid, coords, picked)
}

/// The repaired grid plus any anomaly that had no usable neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub grid: TokenGrid,
    /// Anomalies left unchanged because every 3×3 neighbour was out of bounds or anomalous.
    pub unresolved: Vec<(usize, usize)>,
}

/// Replaces every anomaly by the mean of its in-bounds, non-anomalous 3×3
/// neighbours, reading only from the original grid.
pub fn resolve_anomalies(grid: &TokenGrid, anomalies: &AnomalySet) -> Result<Resolution> {
    if anomalies.grid != (grid.h, grid.w) {
        return Err(Error::Shape(format!(
            "anomaly set for a {}x{} grid applied to {}x{}",
            anomalies.grid.0, anomalies.grid.1, grid.h, grid.w
        )));
    }
    let flagged: HashSet<(usize, usize)> = anomalies.coords.iter().copied().collect();
    let d = grid.dim();
    let mut out = grid.tokens.clone();
    let mut unresolved = Vec::new();
    for &(r, c) in &anomalies.coords {
        let mut acc = vec![0f64; d];
        let mut weight = 0u32;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= grid.h as i64 || nc >= grid.w as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if flagged.contains(&(nr, nc)) {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(grid.token(nr, nc)) {
                    *a += f64::from(v);
                }
                weight += 1;
            }
        }
        if weight == 0 {
            unresolved.push((r, c));
            continue;
        }
        let row = out.row_mut(grid.index(r, c));
        for (o, a) in row.iter_mut().zip(&acc) {
            *o = (a / f64::from(weight)) as f32;
        }
    }
    Ok(Resolution {
        grid: grid.with_tokens(out)?,
        unresolved,
    })
}

/// LOF scoring, top-K selection and interpolation in one call.
pub fn detect_and_resolve(grid: &TokenGrid, cfg: &LofConfig) -> Result<(AnomalySet, Resolution)> {
    let scores = lof_scores(&grid.tokens, cfg)?;
    let set = select_anomalies(&scores, (grid.h, grid.w), cfg.anomaly_count)?;
    let resolution = resolve_anomalies(grid, &set)?;
    Ok((set, resolution))
}
