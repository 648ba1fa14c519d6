//! Dense row-major matrices and the numeric kernels shared by every stage.
//!
//! Storage is `f32`; every reduction (dot products, means, variances)
//! accumulates in `f64` so results are deterministic and comparable against
//! 64-bit reference evaluations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major `rows × cols` matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    /// Wraps `data` as a matrix, rejecting length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly.
        let cols = self.cols.max(1);
        let empty = self.cols == 0;
        (0..self.rows).map(move |r| {
            if empty {
                &self.data[0..0]
            } else {
                &self.data[r * cols..(r + 1) * cols]
            }
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.matmul_t(&other.transpose())
    }

    /// `self · otherᵀ`, the natural layout for `x · Wᵀ` linear layers and Gram matrices.
    pub fn matmul_t(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                out.push(dot(a, b) as f32);
            }
        }
        Ok(Tensor2D {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f32) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        let cols = self.cols;
        if cols == 0 {
            return Ok(());
        }
        for row in self.data.chunks_exact_mut(cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        Ok(())
    }

    /// Selects a contiguous column block `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Tensor2D {
        Tensor2D::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&self) -> Tensor2D {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with a 64-bit accumulator.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

#[inline]
pub fn l2_norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax over each row of `m / temperature`.
pub fn row_softmax(m: &Tensor2D, temperature: f32) -> Result<Tensor2D> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::Data("softmax input contains non-finite values".into()));
    }
    let t = f64::from(temperature);
    let mut out = Tensor2D::zeros(m.rows, m.cols);
    let mut buf = vec![0f64; m.cols];
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row
            .iter()
            .map(|&v| f64::from(v) / t)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = (f64::from(v) / t - max).exp();
            sum += *b;
        }
        for (o, b) in out.row_mut(r).iter_mut().zip(&buf) {
            *o = (b / sum) as f32;
        }
    }
    Ok(out)
}

/// An `n × n` pairwise cosine-similarity matrix over token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    values: Tensor2D,
}

impl SimilarityMap {
    /// Wraps an externally computed matrix after checking it is square and symmetric.
    pub fn from_matrix(values: Tensor2D) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c {
            return Err(Error::Shape(format!("similarity map must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                if (values.get(i, j) - values.get(j, i)).abs() > 1e-5 {
                    return Err(Error::Data(format!(
                        "similarity map not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor2D {
        &self.values
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f32 {
        self.values.get(p, q)
    }
}

/// Cosine similarity between every pair of token rows.
///
/// Zero-norm rows have similarity 0 to every other token and 1 to themselves.
pub fn cosine_similarity_map(x: &Tensor2D) -> SimilarityMap {
    let n = x.rows();
    let norms: Vec<f64> = x.row_iter().map(l2_norm).collect();
    let mut values = Tensor2D::zeros(n, n);
    for p in 0..n {
        values.set(p, p, 1.0);
        for q in (p + 1)..n {
            let denom = norms[p] * norms[q];
            let s = if denom > 0.0 {
                (dot(x.row(p), x.row(q)) / denom).clamp(-1.0, 1.0) as f32
            } else {
                0.0
            };
            values.set(p, q, s);
            values.set(q, p, s);
        }
    }
    SimilarityMap { values }
}

/// Per-row layer normalization (biased variance) followed by an affine map.
pub fn layer_norm(x: &Tensor2D, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor2D> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Parameter(format!(
            "layer norm over {} features given gain/bias of length {}/{}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("layer norm eps must be positive, got {eps}")));
    }
    let d = x.cols() as f64;
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / d;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for (i, o) in out.row_mut(r).iter_mut().enumerate() {
            let z = (f64::from(row[i]) - mean) * inv;
            *o = (z * f64::from(gain[i]) + f64::from(bias[i])) as f32;
        }
    }
    Ok(out)
}

/// Principal-component decomposition of a token matrix.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `N × k` projections of the mean-centred rows.
    pub projection: Tensor2D,
    /// Variance along each retained direction, descending.
    pub explained_variance: Vec<f64>,
    /// Sum of all feature variances.
    pub total_variance: f64,
    /// `k × D` unit principal directions.
    pub components: Tensor2D,
    pub mean: Vec<f64>,
}

/// Projects the rows of `x` onto their top-`k` principal directions.
pub fn pca_project(x: &Tensor2D, k: usize) -> Result<Tensor2D> {
    Ok(pca(x, k)?.projection)
}

/// Full PCA via eigen-decomposition of the `D × D` population covariance.
pub fn pca(x: &Tensor2D, k: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::Parameter(format!(
            "PCA rank {k} outside 1..={} for a {n}x{d} matrix",
            n.min(d)
        )));
    }
    let mut mean = vec![0f64; d];
    for row in x.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centred: Vec<Vec<f64>> = x
        .row_iter()
        .map(|row| row.iter().zip(&mean).map(|(&v, m)| f64::from(v) - m).collect())
        .collect();
    let mut cov = vec![vec![0f64; d]; d];
    for row in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let total_variance = (0..d).map(|i| cov[i][i]).sum();

    let (eigenvalues, eigenvectors) = symmetric_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = (0..d).map(|r| eigenvectors[r][idx]).collect();
        // Sign convention: the largest-magnitude coordinate is positive.
        let pivot = v
            .iter()
            .copied()
            .fold(0f64, |acc, c| if c.abs() > acc.abs() { c } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        directions.push(v);
    }
    let explained_variance = order
        .iter()
        .take(k)
        .map(|&i| eigenvalues[i].max(0.0))
        .collect();

    let projection = Tensor2D::from_fn(n, k, |r, c| {
        centred[r]
            .iter()
            .zip(&directions[c])
            .map(|(a, b)| a * b)
            .sum::<f64>() as f32
    });
    let components = Tensor2D::from_fn(k, d, |r, c| directions[r][c] as f32);
    Ok(Pca {
        projection,
        explained_variance,
        total_variance,
        components,
        mean,
    })
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues and a matrix whose columns are the matching eigenvectors.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Bilinear resampling of a channel-major `channels × h × w` buffer.
///
/// Uses half-pixel centres with edge clamping (the `align_corners = false`
/// convention). Resampling to the same size returns the input unchanged.
pub fn resize_bilinear(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    debug_assert_eq!(src.len(), channels * h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}
