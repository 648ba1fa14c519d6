//! Segmentation metrics and the pairwise semantic-coherence analysis.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SimilarityMap;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// A single-channel map of category indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} label map with {} labels",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }
}

/// Ground-truth × prediction pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub ignore_index: u32,
    /// Row-major `gt × pred`.
    pub matrix: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize, ignore_index: u32) -> Self {
        Self {
            num_classes,
            ignore_index,
            matrix: vec![0; num_classes * num_classes],
        }
    }

    /// Adds one image. Nothing is counted if any label is invalid.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let nc = self.num_classes as u32;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == self.ignore_index {
                continue;
            }
            if g >= nc {
                return Err(Error::Data(format!(
                    "ground-truth label {g} at pixel {i} exceeds {} classes",
                    self.num_classes
                )));
            }
            if p >= nc {
                return Err(Error::Data(format!(
                    "predicted label {p} at pixel {i} exceeds {} classes",
                    self.num_classes
                )));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != self.ignore_index {
                self.matrix[g as usize * self.num_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes || other.ignore_index != self.ignore_index {
            return Err(Error::Shape("merging incompatible confusion accumulators".into()));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        Ok(())
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.matrix[gt * self.num_classes + pred]
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                let gt_total: u64 = (0..self.num_classes).map(|p| self.count(c, p)).sum();
                let pred_total: u64 = (0..self.num_classes).map(|g| self.count(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes; NaN when nothing has been counted.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.matrix.iter().sum();
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        if total == 0 {
            f64::NAN
        } else {
            correct as f64 / total as f64
        }
    }

    pub fn report(&self, class_names: &[String]) -> MiouReport {
        let per_class = self
            .per_class_iou()
            .into_iter()
            .enumerate()
            .map(|(i, iou)| ClassIou {
                index: i,
                name: class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}")),
                iou,
            })
            .collect();
        let finite = |v: f64| v.is_finite().then_some(v);
        MiouReport {
            per_class,
            miou: finite(self.miou()),
            pixel_accuracy: finite(self.pixel_accuracy()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub index: usize,
    pub name: String,
    pub iou: Option<f64>,
}

/// mIoU summary; undefined values serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

/// Labels each patch of a `grid.0 × grid.1` grid with its most frequent
/// non-ignored pixel label. Remainder pixels belong to the last patch row or
/// column; ties go to the lower label; all-ignored patches are `None`.
pub fn patch_majority_labels(
    gt: &LabelMap,
    grid: (usize, usize),
    ignore_index: u32,
) -> Vec<Option<u32>> {
    let (gh, gw) = grid;
    let ph = (gt.height / gh.max(1)).max(1);
    let pw = (gt.width / gw.max(1)).max(1);
    let mut votes: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); gh * gw];
    for y in 0..gt.height {
        let pr = (y / ph).min(gh - 1);
        for x in 0..gt.width {
            let label = gt.labels[y * gt.width + x];
            if label == ignore_index {
                continue;
            }
            let pc = (x / pw).min(gw - 1);
            *votes[pr * gw + pc].entry(label).or_insert(0) += 1;
        }
    }
    votes
        .into_iter()
        .map(|v| {
            // BTreeMap iterates in ascending label order, so a strict `>` keeps the lowest on ties.
            let mut best: Option<(u32, u64)> = None;
            for (label, count) in v {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((label, count));
                }
            }
            best.map(|(l, _)| l)
        })
        .collect()
}

/// Pairwise similarity scores with same-category flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSample {
    pub scores: Vec<f64>,
    pub same_category: Vec<bool>,
}

impl CoherenceSample {
    pub fn push(&mut self, score: f64, same: bool) {
        self.scores.push(score);
        self.same_category.push(same);
    }

    pub fn extend(&mut self, other: &CoherenceSample) {
        self.scores.extend_from_slice(&other.scores);
        self.same_category.extend_from_slice(&other.same_category);
    }

    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &same) in self.scores.iter().zip(&self.same_category) {
            if same {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        (pos, neg)
    }

    pub fn auc(&self) -> Option<f64> {
        let (pos, neg) = self.split();
        auc_mann_whitney(&pos, &neg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSampling {
    /// Use every pair when at most this many patches take part.
    pub max_exhaustive_tokens: usize,
    /// Number of random pairs drawn above that size.
    pub sampled_pairs: usize,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            max_exhaustive_tokens: 1024,
            sampled_pairs: 500_000,
            seed: 0,
        }
    }
}

/// Collects unordered off-diagonal patch pairs among labelled patches.
pub fn coherence_pairs(
    simi: &SimilarityMap,
    labels: &[Option<u32>],
    sampling: &PairSampling,
) -> Result<CoherenceSample> {
    if labels.len() != simi.n() {
        return Err(Error::Shape(format!(
            "{} patch labels for a {}-token similarity map",
            labels.len(),
            simi.n()
        )));
    }
    let kept: Vec<(usize, u32)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    let mut sample = CoherenceSample::default();
    if kept.len() < 2 {
        return Ok(sample);
    }
    if kept.len() <= sampling.max_exhaustive_tokens {
        for (a, &(i, li)) in kept.iter().enumerate() {
            for &(j, lj) in &kept[a + 1..] {
                sample.push(f64::from(simi.get(i, j)), li == lj);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let m = kept.len();
        for _ in 0..sampling.sampled_pairs {
            let a = rng.random_range(0..m);
            let mut b = rng.random_range(0..m - 1);
            if b >= a {
                b += 1;
            }
            let ((i, li), (j, lj)) = (kept[a], kept[b]);
            sample.push(f64::from(simi.get(i, j)), li == lj);
        }
    }
    Ok(sample)
}

/// Area under the ROC curve of a similarity map used as a same-category classifier.
/// `None` when the pairs are all positive or all negative.
pub fn coherence_auc(
    simi: &SimilarityMap,
    labels: &[Option<u32>],
    sampling: &PairSampling,
) -> Result<Option<f64>> {
    Ok(coherence_pairs(simi, labels, sampling)?.auc())
}

/// Mann–Whitney AUC, `P(pos > neg) + ½ P(pos = neg)`, via average ranks.
pub fn auc_mann_whitney(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let positives = all[i..j].iter().filter(|(_, p)| *p).count();
        rank_sum_pos += avg * positives as f64;
        i = j;
    }
    let p = pos.len() as f64;
    let n = neg.len() as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2D;

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = vec![0, 1, 2, 2, 1, 0];
        let mut acc = ConfusionAccumulator::new(3, 255);
        acc.accumulate(&gt, &gt).unwrap();
        assert_eq!(acc.miou(), 1.0);
    }

    #[test]
    fn hand_counted_case() {
        let mut acc = ConfusionAccumulator::new(2, 255);
        acc.accumulate(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        let iou = acc.per_class_iou();
        assert_eq!(iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(acc.miou(), 0.25);
    }

    #[test]
    fn all_ignored_is_nan() {
        let mut acc = ConfusionAccumulator::new(3, 255);
        acc.accumulate(&[0, 1], &[255, 255]).unwrap();
        assert!(acc.matrix.iter().all(|&c| c == 0));
        assert!(acc.miou().is_nan());
        assert_eq!(acc.report(&[]).miou, None);
    }

    #[test]
    fn invalid_labels_leave_counts_untouched() {
        let mut acc = ConfusionAccumulator::new(2, 255);
        assert!(matches!(acc.accumulate(&[0, 1], &[0, 7]), Err(Error::Data(_))));
        assert!(matches!(acc.accumulate(&[0, 5], &[0, 1]), Err(Error::Data(_))));
        assert!(matches!(acc.accumulate(&[0], &[0, 1]), Err(Error::Shape(_))));
        assert!(acc.matrix.iter().all(|&c| c == 0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut acc = ConfusionAccumulator::new(4, 255);
        acc.accumulate(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(acc.per_class_iou(), vec![None, Some(1.0), None, None]);
        assert_eq!(acc.miou(), 1.0);
    }

    #[test]
    fn majority_votes() {
        let gt = LabelMap::new(2, 2, vec![3; 4]).unwrap();
        assert_eq!(patch_majority_labels(&gt, (1, 1), 255), vec![Some(3)]);

        // 60% class 2, 40% class 5
        let gt = LabelMap::new(1, 5, vec![2, 5, 2, 5, 2]).unwrap();
        assert_eq!(patch_majority_labels(&gt, (1, 1), 255), vec![Some(2)]);

        // tie 7 vs 4 -> 4
        let gt = LabelMap::new(1, 4, vec![7, 4, 7, 4]).unwrap();
        assert_eq!(patch_majority_labels(&gt, (1, 1), 255), vec![Some(4)]);

        let gt = LabelMap::new(1, 4, vec![255, 255, 1, 255]).unwrap();
        assert_eq!(patch_majority_labels(&gt, (1, 2), 255), vec![None, Some(1)]);
    }

    #[test]
    fn remainder_pixels_join_last_patch() {
        // 5 columns into 2 patches: widths 2 and 3
        let gt = LabelMap::new(1, 5, vec![1, 1, 2, 2, 2]).unwrap();
        assert_eq!(patch_majority_labels(&gt, (1, 2), 255), vec![Some(1), Some(2)]);
        let gt = LabelMap::new(1, 5, vec![1, 1, 1, 2, 2]).unwrap();
        // last patch has {1, 2, 2}
        assert_eq!(patch_majority_labels(&gt, (1, 2), 255), vec![Some(1), Some(2)]);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_mann_whitney(&[1.0, 1.0], &[0.0, 0.0, 0.0]), Some(1.0));
        assert_eq!(auc_mann_whitney(&[0.4; 3], &[0.4; 5]), Some(0.5));
        let auc = auc_mann_whitney(&[0.9, 0.6], &[0.8, 0.3, 0.2, 0.1]).unwrap();
        assert!((auc - 7.0 / 8.0).abs() < 1e-12);
        assert_eq!(auc_mann_whitney(&[], &[1.0]), None);
    }

    #[test]
    fn coherence_uses_labelled_pairs_only() {
        let simi = SimilarityMap::from_matrix(Tensor2D::from_rows(&[
            [1.0, 0.9, 0.1],
            [0.9, 1.0, 0.2],
            [0.1, 0.2, 1.0],
        ]).unwrap())
        .unwrap();
        let labels = [Some(0), Some(0), Some(1)];
        let s = coherence_pairs(&simi, &labels, &PairSampling::default()).unwrap();
        assert_eq!(s.scores.len(), 3);
        assert_eq!(coherence_auc(&simi, &labels, &PairSampling::default()).unwrap(), Some(1.0));
        let single = [Some(0), Some(0), None];
        assert_eq!(coherence_auc(&simi, &single, &PairSampling::default()).unwrap(), None);
    }

    #[test]
    fn sampling_is_seeded() {
        let n = 40;
        let simi = crate::numerics::cosine_similarity_map(&Tensor2D::from_fn(n, 3, |r, c| {
            ((r * 7 + c * 3) % 11) as f32 - 5.0
        }));
        let labels: Vec<Option<u32>> = (0..n).map(|i| Some((i % 3) as u32)).collect();
        let sampling = PairSampling { max_exhaustive_tokens: 10, sampled_pairs: 300, seed: 5 };
        let a = coherence_pairs(&simi, &labels, &sampling).unwrap();
        let b = coherence_pairs(&simi, &labels, &sampling).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores.len(), 300);
    }
}
