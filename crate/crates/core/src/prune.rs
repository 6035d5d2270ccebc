//! Magnitude-based unstructured pruning.
//!
//! A mask keeps `M_ij = 1` for retained weights and `M_ij = 0` for pruned
//! ones; the pruned weights are `W ⊙ M`. The number of pruned entries is
//! exactly `⌊s·n⌋` for sparsity `s` over a scope of `n` weights. Candidates
//! are ranked by `(|w|, layer_id, row-major index)` ascending, so ties in
//! magnitude prune the lower layer id, then the lower index, first. The
//! recorded threshold `τ` is the largest pruned magnitude.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Scope over which the `⌊s·n⌋` count is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// One ranking across every included layer.
    #[default]
    Global,
    /// Each included layer pruned to `s` independently.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub target_sparsity: f64,
    #[serde(default)]
    pub mode: PruneMode,
    #[serde(default)]
    pub excluded_layers: BTreeSet<String>,
}

impl PrunePlan {
    pub fn new(target_sparsity: f64, mode: PruneMode) -> Self {
        PrunePlan {
            target_sparsity,
            mode,
            excluded_layers: BTreeSet::new(),
        }
    }

    pub fn exclude(mut self, layer: impl Into<String>) -> Self {
        self.excluded_layers.insert(layer.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::param(format!(
                "target sparsity must lie in [0, 1), got {}",
                self.target_sparsity
            )));
        }
        Ok(())
    }
}

/// Binary mask for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub layer_id: String,
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    /// Largest pruned magnitude; `None` when nothing was pruned.
    pub threshold: Option<f64>,
    pub target_sparsity: f64,
    pub mode: PruneMode,
}

impl PruneMask {
    pub fn all_ones(layer_id: impl Into<String>, rows: usize, cols: usize, mode: PruneMode) -> Self {
        PruneMask {
            layer_id: layer_id.into(),
            rows,
            cols,
            keep: vec![true; rows * cols],
            threshold: None,
            target_sparsity: 0.0,
            mode,
        }
    }

    /// Builds a mask from explicit keep bits (row-major).
    pub fn from_bits(
        layer_id: impl Into<String>,
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
        threshold: Option<f64>,
        target_sparsity: f64,
        mode: PruneMode,
    ) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::format(format!(
                "mask has {} bits, expected {rows}x{cols}",
                keep.len()
            )));
        }
        Ok(PruneMask {
            layer_id: layer_id.into(),
            rows,
            cols,
            keep,
            threshold,
            target_sparsity,
            mode,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    /// Mask as a 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask shape is positive")
    }
}

/// `⌊s·n⌋`, nudged by a few ulps so that e.g. `0.1 · 10000` counts 1000.
pub fn prune_count(sparsity: f64, n: usize) -> usize {
    let raw = sparsity * n as f64;
    let count = (raw + raw * 4.0 * f64::EPSILON).floor() as usize;
    count.min(n)
}

struct Candidate<'a> {
    magnitude: f64,
    layer: &'a str,
    index: usize,
}

fn rank_smallest<'a>(mut candidates: Vec<Candidate<'a>>, k: usize) -> Vec<Candidate<'a>> {
    candidates.par_sort_unstable_by(|x, y| {
        x.magnitude
            .total_cmp(&y.magnitude)
            .then_with(|| x.layer.cmp(y.layer))
            .then_with(|| x.index.cmp(&y.index))
    });
    candidates.truncate(k);
    candidates
}

fn candidates_of<'a>(layer: &'a str, w: &Matrix) -> Vec<Candidate<'a>> {
    w.as_slice()
        .iter()
        .enumerate()
        .map(|(index, v)| Candidate {
            magnitude: v.abs(),
            layer,
            index,
        })
        .collect()
}

/// Computes one mask per layer. Excluded layers receive all-ones masks.
pub fn compute_masks(weights: &BTreeMap<String, Matrix>, plan: &PrunePlan) -> Result<BTreeMap<String, PruneMask>> {
    plan.validate()?;
    let mut masks: BTreeMap<String, PruneMask> = weights
        .iter()
        .map(|(id, w)| {
            (
                id.clone(),
                PruneMask::all_ones(id.clone(), w.rows(), w.cols(), plan.mode),
            )
        })
        .collect();

    let included: Vec<(&String, &Matrix)> = weights
        .iter()
        .filter(|(id, _)| !plan.excluded_layers.contains(*id))
        .collect();

    let pruned: Vec<Vec<Candidate<'_>>> = match plan.mode {
        PruneMode::Global => {
            let all: Vec<Candidate<'_>> = included.iter().flat_map(|(id, w)| candidates_of(id, w)).collect();
            let k = prune_count(plan.target_sparsity, all.len());
            vec![rank_smallest(all, k)]
        }
        PruneMode::PerLayer => included
            .par_iter()
            .map(|(id, w)| rank_smallest(candidates_of(id, w), prune_count(plan.target_sparsity, w.len())))
            .collect(),
    };

    for (id, _) in &included {
        let mask = masks.get_mut(*id).expect("mask allocated per layer");
        mask.target_sparsity = plan.target_sparsity;
    }
    for group in pruned {
        for c in group {
            let mask = masks.get_mut(c.layer).expect("candidate from known layer");
            mask.keep[c.index] = false;
            mask.threshold = Some(mask.threshold.map_or(c.magnitude, |t: f64| t.max(c.magnitude)));
        }
    }
    Ok(masks)
}

/// `W ⊙ M`.
pub fn apply_mask(w: &Matrix, mask: &PruneMask) -> Result<Matrix> {
    if w.shape() != mask.shape() {
        return Err(Error::shape("apply_mask", w.shape(), mask.shape()));
    }
    let mut out = w.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(&mask.keep) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Re-applies every mask in place. Every layer in `weights` must have a mask;
/// excluded layers carry all-ones masks and pass through unchanged.
pub fn reapply_masks(weights: &mut BTreeMap<String, Matrix>, masks: &BTreeMap<String, PruneMask>) -> Result<()> {
    if let Some(missing) = weights.keys().find(|id| !masks.contains_key(*id)) {
        return Err(Error::consistency(format!("no pruning mask for layer '{missing}'")));
    }
    for (id, w) in weights.iter_mut() {
        *w = apply_mask(w, &masks[id])?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer_id: String,
    pub elements: usize,
    pub masked: usize,
    /// Masked positions that hold an exact zero.
    pub zeros_at_masked: usize,
    pub target: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub total_elements: usize,
    pub total_zeros_at_masked: usize,
    pub global_achieved: f64,
}

/// Achieved sparsity: fraction of elements that are masked and exactly zero.
pub fn sparsity_report(weights: &BTreeMap<String, Matrix>, masks: &BTreeMap<String, PruneMask>) -> SparsityReport {
    let mut report = SparsityReport::default();
    for (id, w) in weights {
        let Some(mask) = masks.get(id) else { continue };
        if mask.shape() != w.shape() {
            continue;
        }
        let zeros = w
            .as_slice()
            .iter()
            .zip(mask.bits())
            .filter(|(v, keep)| !**keep && **v == 0.0)
            .count();
        report.layers.push(LayerSparsity {
            layer_id: id.clone(),
            elements: w.len(),
            masked: mask.pruned_count(),
            zeros_at_masked: zeros,
            target: mask.target_sparsity,
            achieved: zeros as f64 / w.len() as f64,
        });
        report.total_elements += w.len();
        report.total_zeros_at_masked += zeros;
    }
    if report.total_elements > 0 {
        report.global_achieved = report.total_zeros_at_masked as f64 / report.total_elements as f64;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, SeededRng};

    fn layers(entries: &[(&str, Matrix)]) -> BTreeMap<String, Matrix> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn worked() -> Matrix {
        Matrix::from_rows(&[vec![0.1, -0.5], vec![0.3, 0.05]]).unwrap()
    }

    #[test]
    fn per_layer_worked_example() {
        let w = layers(&[("w", worked())]);
        let masks = compute_masks(&w, &PrunePlan::new(0.5, PruneMode::PerLayer)).unwrap();
        assert_eq!(masks["w"].bits(), &[false, true, true, false]);
        assert_eq!(masks["w"].threshold, Some(0.1));
        let pruned = apply_mask(&w["w"], &masks["w"]).unwrap();
        assert_eq!(pruned, Matrix::from_rows(&[vec![0.0, -0.5], vec![0.3, 0.0]]).unwrap());
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let w = layers(&[("w", worked())]);
        let masks = compute_masks(&w, &PrunePlan::new(0.0, PruneMode::Global)).unwrap();
        assert!(masks["w"].bits().iter().all(|&k| k));
        assert_eq!(masks["w"].threshold, None);
        assert_eq!(apply_mask(&w["w"], &masks["w"]).unwrap().checksum(), w["w"].checksum());
    }

    #[test]
    fn global_prunes_across_layers() {
        let w = layers(&[
            ("a", Matrix::from_vec(1, 2, vec![0.1, 0.2]).unwrap()),
            ("b", Matrix::from_vec(1, 2, vec![0.3, 0.4]).unwrap()),
        ]);
        let masks = compute_masks(&w, &PrunePlan::new(0.5, PruneMode::Global)).unwrap();
        assert_eq!(masks["a"].bits(), &[false, false]);
        assert_eq!(masks["b"].bits(), &[true, true]);
    }

    #[test]
    fn sparsity_one_is_rejected() {
        let w = layers(&[("w", worked())]);
        for s in [1.0, 1.5, -0.1] {
            let err = compute_masks(&w, &PrunePlan::new(s, PruneMode::Global)).unwrap_err();
            assert!(matches!(err, Error::Parameter(_)));
        }
    }

    #[test]
    fn all_zero_mask_zeros_matrix() {
        let m = PruneMask::from_bits("w", 2, 2, vec![false; 4], None, 1.0, PruneMode::Global).unwrap();
        assert_eq!(apply_mask(&worked(), &m).unwrap(), Matrix::zeros(2, 2).unwrap());
    }

    #[test]
    fn apply_shape_mismatch() {
        let m = PruneMask::all_ones("w", 3, 1, PruneMode::Global);
        assert!(matches!(apply_mask(&worked(), &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn reapply_restores_zeros_and_is_idempotent() {
        let mut w = layers(&[
            ("w", worked()),
            ("emb", Matrix::from_vec(1, 2, vec![0.01, 0.02]).unwrap()),
        ]);
        let plan = PrunePlan::new(0.5, PruneMode::PerLayer).exclude("emb");
        let masks = compute_masks(&w, &plan).unwrap();
        reapply_masks(&mut w, &masks).unwrap();
        for m in w.values_mut() {
            *m = m.map(|v| v + 0.01).unwrap();
        }
        reapply_masks(&mut w, &masks).unwrap();
        assert_eq!(w["w"].get(0, 0), 0.0);
        assert_eq!(w["w"].get(1, 1), 0.0);
        assert_eq!(w["emb"], Matrix::from_vec(1, 2, vec![0.02, 0.03]).unwrap());
        let once = w.clone();
        reapply_masks(&mut w, &masks).unwrap();
        assert_eq!(once, w);
    }

    #[test]
    fn reapply_requires_masks() {
        let mut w = layers(&[("w", worked())]);
        let err = reapply_masks(&mut w, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn report_levels() {
        let mut rng = SeededRng::new(33);
        let mut w = layers(&[("w", gaussian_matrix(&mut rng, 100, 100, 1.0).unwrap())]);
        for s in [0.05, 0.10] {
            let masks = compute_masks(&w, &PrunePlan::new(s, PruneMode::Global)).unwrap();
            let mut pruned = w.clone();
            reapply_masks(&mut pruned, &masks).unwrap();
            let r = sparsity_report(&pruned, &masks);
            assert!(
                (r.global_achieved - s).abs() <= 1.0 / 10_000.0,
                "{s}: {}",
                r.global_achieved
            );
        }
        w.clear();
        assert_eq!(sparsity_report(&w, &BTreeMap::new()), SparsityReport::default());
    }

    #[test]
    fn tie_break_prefers_lower_layer_then_index() {
        let w = layers(&[
            ("a", Matrix::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap()),
            ("b", Matrix::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap()),
        ]);
        let masks = compute_masks(&w, &PrunePlan::new(0.5, PruneMode::Global)).unwrap();
        assert_eq!(masks["a"].bits(), &[false, false, false]);
        assert_eq!(masks["b"].bits(), &[true, true, true]);
        let masks = compute_masks(&w, &PrunePlan::new(0.34, PruneMode::PerLayer)).unwrap();
        assert_eq!(masks["a"].bits(), &[false, true, true]);
        assert_eq!(masks["b"].bits(), &[false, true, true]);
    }

    #[test]
    fn prune_count_floor() {
        assert_eq!(prune_count(0.05, 10_000), 500);
        assert_eq!(prune_count(0.1, 10_000), 1000);
        assert_eq!(prune_count(0.5, 3), 1);
        assert_eq!(prune_count(0.0, 7), 0);
    }
}
