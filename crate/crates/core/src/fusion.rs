//! Multi-level feature fusion around the last layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};
use crate::vit::{LayerStack, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionStrategy {
    /// `L(X_penul)`
    None,
    /// `L(X_penul) + Σ X_i`
    DirectSum,
    /// `L(X_penul + Σ X_i)`
    OnePass,
    /// `L(X_penul) + L(Σ X_i)`
    TwoPass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// 1-based layer numbers whose outputs are summed.
    pub level_set: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::TwoPass,
            level_set: (4..=10).collect(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.strategy == FusionStrategy::None {
            return Ok(());
        }
        if self.level_set.is_empty() {
            return Err(Error::Config("fusion level_set is empty".into()));
        }
        let penultimate = depth - 1;
        if let Some(&bad) = self.level_set.iter().find(|&&l| l == 0 || l >= penultimate) {
            return Err(Error::Config(format!(
                "fusion level {bad} must lie in 1..{penultimate} (below the penultimate layer)"
            )));
        }
        Ok(())
    }

    /// Levels in canonical (ascending, deduplicated) order.
    pub fn canonical_levels(&self) -> Vec<usize> {
        let mut levels = self.level_set.clone();
        levels.sort_unstable();
        levels.dedup();
        levels
    }
}

/// Elementwise sum of the selected layer grids, accumulated in ascending layer order.
pub fn multilevel_sum(stack: &LayerStack, cfg: &FusionConfig) -> Result<TokenGrid> {
    let levels = cfg.canonical_levels();
    let (&first, rest) = levels
        .split_first()
        .ok_or_else(|| Error::Parameter("no fusion levels selected".into()))?;
    let mut acc = stack.layer(first).map_err(as_parameter)?.clone();
    for &l in rest {
        acc = acc.add(stack.layer(l).map_err(as_parameter)?)?;
    }
    Ok(acc)
}

fn as_parameter(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Parameter(m),
        other => other,
    }
}

/// Combines the last-layer output of `x_penul` with the multi-level sum.
///
/// For [`FusionStrategy::DirectSum`] the caller supplies `ml_sum` already in
/// the output space of `last`; for the pass-based strategies it must match
/// `x_penul`. The two passes of [`FusionStrategy::TwoPass`] run concurrently
/// and are added in a fixed order.
pub fn fuse<F>(
    x_penul: &TokenGrid,
    ml_sum: &TokenGrid,
    last: &F,
    strategy: FusionStrategy,
) -> Result<TokenGrid>
where
    F: Fn(&TokenGrid) -> Result<TokenGrid> + Sync,
{
    match strategy {
        FusionStrategy::None => last(x_penul),
        FusionStrategy::DirectSum => {
            let base = last(x_penul)?;
            if !base.same_shape(ml_sum) {
                return Err(Error::Shape(format!(
                    "direct sum of a {}-wide output with a {}-wide multi-level sum",
                    base.dim(),
                    ml_sum.dim()
                )));
            }
            base.add(ml_sum)
        }
        FusionStrategy::OnePass => {
            ensure_same(x_penul, ml_sum)?;
            last(&x_penul.add(ml_sum)?)
        }
        FusionStrategy::TwoPass => {
            ensure_same(x_penul, ml_sum)?;
            let (a, b) = rayon::join(|| last(x_penul), || last(ml_sum));
            a?.add(&b?)
        }
    }
}

fn ensure_same(a: &TokenGrid, b: &TokenGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "grids {}x{}x{} and {}x{}x{} differ",
            a.h,
            a.w,
            a.dim(),
            b.h,
            b.w,
            b.dim()
        )))
    }
}

/// Mean over tokens of the per-token cosine similarity between two grids.
/// Token pairs where either side has zero norm contribute 0.
pub fn feature_compatibility(a: &TokenGrid, b: &TokenGrid) -> Result<f64> {
    ensure_same(a, b)?;
    if a.n() == 0 {
        return Err(Error::Shape("empty grids".into()));
    }
    let total: f64 = a
        .tokens
        .row_iter()
        .zip(b.tokens.row_iter())
        .map(|(x, y)| {
            let denom = l2_norm(x) * l2_norm(y);
            if denom > 0.0 {
                dot(x, y) / denom
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / a.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2D;

    fn grid(v: &[[f32; 2]]) -> TokenGrid {
        TokenGrid::new(1, v.len(), Tensor2D::from_rows(v).unwrap(), None).unwrap()
    }

    #[test]
    fn compatibility_cases() {
        let a = grid(&[[1.0, 2.0], [3.0, -1.0]]);
        assert!((feature_compatibility(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = grid(&[[-2.0, 1.0], [1.0, 3.0]]);
        assert!(feature_compatibility(&a, &b).unwrap().abs() < 1e-12);
        let c = grid(&[[1.0, 0.0]]);
        assert!(matches!(feature_compatibility(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_sum_reduces_every_strategy() {
        let x = grid(&[[1.0, 2.0], [0.5, -1.0]]);
        let zero = grid(&[[0.0, 0.0], [0.0, 0.0]]);
        let last = |g: &TokenGrid| -> Result<TokenGrid> {
            g.with_tokens(Tensor2D::from_fn(g.n(), 2, |r, c| g.tokens.get(r, c).tanh()))
        };
        let base = fuse(&x, &zero, &last, FusionStrategy::None).unwrap();
        assert_eq!(fuse(&x, &zero, &last, FusionStrategy::DirectSum).unwrap(), base);
        assert_eq!(fuse(&x, &zero, &last, FusionStrategy::OnePass).unwrap(), base);
        // tanh(0) = 0, so the second pass adds nothing.
        assert_eq!(fuse(&x, &zero, &last, FusionStrategy::TwoPass).unwrap(), base);
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate(12).is_ok());
        assert!(FusionConfig::default().validate(11).is_err());
        let empty = FusionConfig { strategy: FusionStrategy::OnePass, level_set: vec![] };
        assert!(empty.validate(12).is_err());
        let none = FusionConfig { strategy: FusionStrategy::None, level_set: vec![] };
        assert!(none.validate(4).is_ok());
    }

    #[test]
    fn canonical_order_dedups() {
        let cfg = FusionConfig { strategy: FusionStrategy::TwoPass, level_set: vec![5, 2, 5, 1] };
        assert_eq!(cfg.canonical_levels(), vec![1, 2, 5]);
    }
}
