mod oracles;

use std::collections::{BTreeMap, BTreeSet};

use peft_forge::checkpoint::{decode_mask, decode_quantized, encode_mask, encode_quantized};
use peft_forge::prune::{apply_mask, compute_masks, prune_count, reapply_masks, PruneMode, PrunePlan};
use peft_forge::quant::{dequantize, pack_codes, quantize, quantize_with, unpack_codes, ScaleScheme};
use peft_forge::{gaussian_matrix, Matrix, SeededRng};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

/// Magnitudes drawn from a small set so ties are common.
fn tied_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 * 0.25), r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn bound(absmax: f64, bits: u8) -> f64 {
    let half_step = absmax / (2.0 * ((1u32 << bits) - 1) as f64);
    half_step + 4.0 * f64::EPSILON * absmax
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn quantization_error_is_half_a_step(x in matrix(12), bits in prop::sample::select(vec![4u8, 8])) {
        let q = quantize(&x, bits).unwrap();
        let limit = (1i32 << bits) - 1;
        prop_assert!(q.codes().iter().all(|c| c.abs() <= limit));
        let back = dequantize(&q).unwrap();
        prop_assert!(x.max_abs_diff(&back).unwrap() <= bound(x.abs_max(), bits));
    }

    #[test]
    fn blockwise_error_is_per_block(x in matrix(10), block in 1usize..20) {
        let q = quantize_with(&x, 4, ScaleScheme::Blockwise { block_len: block }).unwrap();
        let back = dequantize(&q).unwrap();
        for (xs, ys) in x.as_slice().chunks(block).zip(back.as_slice().chunks(block)) {
            let absmax = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = xs.iter().zip(ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= bound(absmax, 4));
        }
    }

    #[test]
    fn packing_roundtrips(codes in prop::collection::vec(-15i32..=15, 0..70)) {
        let packed = pack_codes(&codes, 4);
        prop_assert_eq!(unpack_codes(&packed, 4, codes.len()).unwrap(), codes);
    }

    #[test]
    fn quantized_section_roundtrips(x in matrix(9), bits in prop::sample::select(vec![4u8, 8])) {
        let q = quantize(&x, bits).unwrap();
        prop_assert_eq!(decode_quantized(&encode_quantized(&q)).unwrap(), q);
    }

    #[test]
    fn global_mask_is_smallest_magnitudes(
        layers in prop::collection::vec(tied_matrix(8), 1..4),
        s in 0.0f64..0.95,
    ) {
        let weights: BTreeMap<String, Matrix> =
            layers.into_iter().enumerate().map(|(i, m)| (format!("l{i}"), m)).collect();
        let masks = compute_masks(&weights, &PrunePlan::new(s, PruneMode::Global)).unwrap();
        let flat: BTreeMap<String, Vec<f64>> = weights.iter().map(|(k, m)| (k.clone(), m.as_slice().to_vec())).collect();
        let n: usize = weights.values().map(Matrix::len).sum();
        let want = oracles::smallest_k(&flat, prune_count(s, n));
        let got: BTreeSet<(String, usize)> = masks
            .iter()
            .flat_map(|(l, m)| m.bits().iter().enumerate().filter(|(_, k)| !**k).map(move |(i, _)| (l.clone(), i)))
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn per_layer_mask_hits_exact_counts(layers in prop::collection::vec(matrix(8), 1..4), s in 0.0f64..0.95) {
        let weights: BTreeMap<String, Matrix> =
            layers.into_iter().enumerate().map(|(i, m)| (format!("l{i}"), m)).collect();
        let plan = PrunePlan::new(s, PruneMode::PerLayer).exclude("l0");
        let masks = compute_masks(&weights, &plan).unwrap();
        for (id, w) in &weights {
            let m = &masks[id];
            if id == "l0" {
                prop_assert_eq!(m.pruned_count(), 0);
                continue;
            }
            prop_assert_eq!(m.pruned_count(), prune_count(s, w.len()));
            let one: BTreeMap<String, Vec<f64>> = BTreeMap::from([(id.clone(), w.as_slice().to_vec())]);
            let want = oracles::smallest_k(&one, prune_count(s, w.len()));
            let got: BTreeSet<(String, usize)> =
                m.bits().iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| (id.clone(), i)).collect();
            prop_assert_eq!(got, want);
            prop_assert!((m.sparsity() - s).abs() <= 1.0 / w.len() as f64);
        }
    }

    #[test]
    fn mask_section_roundtrips(w in tied_matrix(10), s in 0.0f64..0.9) {
        let weights = BTreeMap::from([("w".to_string(), w)]);
        let mask = compute_masks(&weights, &PrunePlan::new(s, PruneMode::Global)).unwrap().remove("w").unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }
}

#[test]
fn masked_positions_stay_zero_through_updates() {
    let mut rng = SeededRng::new(17);
    let mut weights: BTreeMap<String, Matrix> = (0..3)
        .map(|i| (format!("layer{i}"), gaussian_matrix(&mut rng, 12, 9, 1.0).unwrap()))
        .collect();
    let masks = compute_masks(&weights, &PrunePlan::new(0.1, PruneMode::Global)).unwrap();
    reapply_masks(&mut weights, &masks).unwrap();
    for _ in 0..100 {
        for w in weights.values_mut() {
            let noise = gaussian_matrix(&mut rng, 12, 9, 0.1).unwrap();
            *w = w.add(&noise).unwrap();
        }
        reapply_masks(&mut weights, &masks).unwrap();
        for (id, w) in &weights {
            assert_eq!(apply_mask(w, &masks[id]).unwrap(), *w);
            for (v, keep) in w.as_slice().iter().zip(masks[id].bits()) {
                if !keep {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
