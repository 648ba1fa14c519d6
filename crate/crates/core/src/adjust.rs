//! Similarity-driven self-adjustment of the last layer.
//!
//! A mid-layer cosine-similarity map is used twice: to re-weight deep
//! features as a convex combination of semantically similar patches
//! ([`aggregate_features`]), and as an additional softmax term in the
//! last-layer attention ([`enhanced_attention`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{row_softmax, SimilarityMap, Tensor2D};
use crate::vit::{AttentionKind, AttentionMode, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormKind {
    #[default]
    RowSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustConfig {
    /// Layer whose similarity map adjusts the penultimate features and the attention.
    pub pre_source_layer: usize,
    /// Layer whose similarity map adjusts the final output features.
    pub post_source_layer: usize,
    pub norm_kind: NormKind,
    pub norm_temperature: f32,
    /// Multiplier on cosine similarities before the row softmax.
    pub simi_scale: f32,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self {
            pre_source_layer: 9,
            post_source_layer: 4,
            norm_kind: NormKind::RowSoftmax,
            norm_temperature: 1.0,
            simi_scale: 2.0,
        }
    }
}

impl AdjustConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        for (name, l) in [
            ("pre_source_layer", self.pre_source_layer),
            ("post_source_layer", self.post_source_layer),
        ] {
            if l == 0 || l >= depth {
                return Err(Error::Config(format!(
                    "{name} = {l} must lie in 1..={} for a depth-{depth} encoder",
                    depth - 1
                )));
            }
        }
        if !(self.norm_temperature > 0.0) || !(self.simi_scale > 0.0) {
            return Err(Error::Config(
                "norm_temperature and simi_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The row-normalized aggregation weights derived from `simi`.
    pub fn normalize(&self, simi: &SimilarityMap) -> Result<Tensor2D> {
        match self.norm_kind {
            NormKind::RowSoftmax => {
                row_softmax(&simi.values().scale(self.simi_scale), self.norm_temperature)
            }
        }
    }
}

/// Last-layer attention weights, one `N × N` matrix per head or a single
/// matrix shared by all heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    per_head: Vec<Tensor2D>,
    row_mass: f32,
}

impl AttentionWeights {
    /// Checks shapes, nonnegativity and that each row sums to `row_mass` (±1e-5).
    pub fn new(per_head: Vec<Tensor2D>, row_mass: f32) -> Result<Self> {
        let first = per_head
            .first()
            .ok_or_else(|| Error::Parameter("attention needs at least one matrix".into()))?;
        let n = first.rows();
        for (h, m) in per_head.iter().enumerate() {
            if m.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "head {h} attention is {}x{}, expected {n}x{n}",
                    m.rows(),
                    m.cols()
                )));
            }
            for (r, row) in m.row_iter().enumerate() {
                if row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Data(format!("head {h} row {r} has negative weight")));
                }
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                if (sum - f64::from(row_mass)).abs() > 1e-5 {
                    return Err(Error::Data(format!(
                        "head {h} row {r} sums to {sum}, expected {row_mass}"
                    )));
                }
            }
        }
        Ok(Self { per_head, row_mass })
    }

    /// One matrix broadcast to every head.
    pub fn shared(m: Tensor2D, row_mass: f32) -> Result<Self> {
        Self::new(vec![m], row_mass)
    }

    pub fn heads(&self) -> &[Tensor2D] {
        &self.per_head
    }

    pub fn row_mass(&self) -> f32 {
        self.row_mass
    }

    pub fn n(&self) -> usize {
        self.per_head[0].rows()
    }
}

/// Replaces each token by a similarity-weighted convex combination of all tokens.
pub fn aggregate_features(
    deep: &TokenGrid,
    simi: &SimilarityMap,
    cfg: &AdjustConfig,
) -> Result<TokenGrid> {
    if simi.n() != deep.n() {
        return Err(Error::Shape(format!(
            "{}-token similarity map for a {}-token grid",
            simi.n(),
            deep.n()
        )));
    }
    let weights = cfg.normalize(simi)?;
    deep.with_tokens(weights.matmul(&deep.tokens)?)
}

/// Builds last-layer attention weights for `mode` from per-head projections.
///
/// `q` may be empty for modes that never read it; `simi` is required by the
/// similarity modes and is added identically to every head.
pub fn enhanced_attention(
    q: &[Tensor2D],
    k: &[Tensor2D],
    simi: Option<&SimilarityMap>,
    mode: &AttentionMode,
) -> Result<AttentionWeights> {
    let n = k.first().map(Tensor2D::rows);
    let self_softmax = |a: &Tensor2D, b: &Tensor2D| -> Result<Tensor2D> {
        let scale = if mode.scale_qk {
            1.0 / (a.cols() as f32).sqrt()
        } else {
            1.0
        };
        row_softmax(&a.matmul_t(b)?.scale(scale), 1.0)
    };
    let simi_term = || -> Result<Tensor2D> {
        let simi = simi.ok_or_else(|| {
            Error::Parameter(format!("attention mode {} needs a similarity map", mode.kind))
        })?;
        if let Some(n) = n {
            if simi.n() != n {
                return Err(Error::Shape(format!(
                    "{}-token similarity map for {n} keys",
                    simi.n()
                )));
            }
        }
        row_softmax(simi.values(), mode.simi_temperature)
    };
    let need_q = || -> Result<()> {
        if q.len() != k.len() {
            return Err(Error::Parameter(format!(
                "mode {} needs queries for all {} heads, got {}",
                mode.kind,
                k.len(),
                q.len()
            )));
        }
        Ok(())
    };
    let need_k = || -> Result<()> {
        if k.is_empty() {
            return Err(Error::Parameter(format!("mode {} needs key projections", mode.kind)));
        }
        Ok(())
    };

    let per_head = match mode.kind {
        AttentionKind::QkBaseline => {
            need_k()?;
            need_q()?;
            q.iter().zip(k).map(|(q, k)| self_softmax(q, k)).collect::<Result<Vec<_>>>()?
        }
        AttentionKind::QqPlusKk => {
            need_k()?;
            need_q()?;
            q.iter()
                .zip(k)
                .map(|(q, k)| self_softmax(q, q)?.add(&self_softmax(k, k)?))
                .collect::<Result<Vec<_>>>()?
        }
        AttentionKind::KkOnly => {
            need_k()?;
            k.iter().map(|k| self_softmax(k, k)).collect::<Result<Vec<_>>>()?
        }
        AttentionKind::SimiOnly => vec![simi_term()?],
        AttentionKind::KkPlusSimi => {
            need_k()?;
            let enhancement = simi_term()?;
            k.iter()
                .map(|k| self_softmax(k, k)?.add(&enhancement))
                .collect::<Result<Vec<_>>>()?
        }
    };
    AttentionWeights::new(per_head, mode.kind.row_mass())
}
