//! Post-training compression of a fine-tuned model.
//!
//! Adapters are merged into their bases first. The merged weights are then
//! magnitude-pruned and, after that, quantized. Quantizing a pruned zero
//! yields code 0, so pruned positions stay exactly zero after dequantization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::prune::{apply_mask, compute_masks, sparsity_report, PruneMode, PrunePlan, SparsityReport};
use crate::quant::{dequantize, half_precision_footprint, quantize, storage_footprint};
use crate::trainer::{layer_key, FrozenBase, Layer, ToyModel};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompressOptions {
    /// Target sparsity in `[0, 1)`; `None` skips pruning.
    pub prune: Option<f64>,
    #[serde(default)]
    pub prune_mode: PruneMode,
    /// Layer indices kept dense.
    #[serde(default)]
    pub exclude: Vec<usize>,
    /// 4 or 8; `None` keeps full precision.
    pub quant_bits: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    /// Serialized bytes of the stored weight.
    pub bytes: usize,
    pub half_precision_bytes: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressReport {
    /// Stages applied, in order.
    pub stages: Vec<String>,
    pub options: CompressOptions,
    pub sparsity: Option<SparsityReport>,
    pub footprints: Vec<LayerFootprint>,
    pub total_bytes: usize,
    pub total_half_precision_bytes: usize,
    pub total_ratio: f64,
    /// Every pruned position reads back as exactly zero from the stored
    /// weights.
    pub masked_zeros_preserved: bool,
}

/// Returns the compressed model (bases only, masks attached when pruned)
/// and a report of sparsity and storage.
pub fn compress_model(model: &ToyModel, opts: &CompressOptions) -> Result<(ToyModel, CompressReport)> {
    if let Some(&bad) = opts.exclude.iter().find(|&&i| i >= model.layers().len()) {
        return Err(Error::param(format!("excluded layer index {bad} out of range")));
    }
    let mut stages = vec!["merge".to_string()];
    let mut weights: BTreeMap<String, Matrix> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((layer_key(i), l.effective_weight()?)))
        .collect::<Result<_>>()?;

    let masks = match opts.prune {
        Some(s) => {
            let mut plan = PrunePlan::new(s, opts.prune_mode);
            for &i in &opts.exclude {
                plan = plan.exclude(layer_key(i));
            }
            let masks = compute_masks(&weights, &plan)?;
            for (id, w) in weights.iter_mut() {
                *w = apply_mask(w, &masks[id])?;
            }
            stages.push("prune".to_string());
            Some(masks)
        }
        None => None,
    };

    let mut layers = Vec::with_capacity(weights.len());
    let mut footprints = Vec::with_capacity(weights.len());
    let mut stored: BTreeMap<String, Matrix> = BTreeMap::new();
    for i in 0..model.layers().len() {
        let id = layer_key(i);
        let w = &weights[&id];
        let (base, bytes, readback) = match opts.quant_bits {
            Some(bits) => {
                let q = quantize(w, bits)?;
                let back = dequantize(&q)?;
                (FrozenBase::Quantized(q.clone()), storage_footprint(&q), back)
            }
            None => (
                FrozenBase::Full(w.clone()),
                crate::checkpoint::encode_matrix(w).len(),
                w.clone(),
            ),
        };
        let half = half_precision_footprint(w.rows(), w.cols());
        footprints.push(LayerFootprint {
            layer: id.clone(),
            rows: w.rows(),
            cols: w.cols(),
            bytes,
            half_precision_bytes: half,
            ratio: bytes as f64 / half as f64,
        });
        stored.insert(id.clone(), readback);
        layers.push(Layer {
            base,
            adapter: None,
            mask: masks.as_ref().map(|m| m[&id].clone()),
        });
    }
    if opts.quant_bits.is_some() {
        stages.push("quantize".to_string());
    }

    let sparsity = masks.as_ref().map(|m| sparsity_report(&stored, m));
    let masked_zeros_preserved = match &masks {
        Some(m) => m.iter().all(|(id, mask)| {
            stored[id]
                .as_slice()
                .iter()
                .zip(mask.bits())
                .all(|(v, keep)| *keep || *v == 0.0)
        }),
        None => true,
    };
    let total_bytes = footprints.iter().map(|f| f.bytes).sum();
    let total_half = footprints.iter().map(|f| f.half_precision_bytes).sum();
    let report = CompressReport {
        stages,
        options: opts.clone(),
        sparsity,
        footprints,
        total_bytes,
        total_half_precision_bytes: total_half,
        total_ratio: total_bytes as f64 / total_half as f64,
        masked_zeros_preserved,
    };
    Ok((ToyModel::new(layers)?, report))
}
