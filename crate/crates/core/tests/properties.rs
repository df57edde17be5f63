use std::collections::BTreeMap;

use fedpriv_core::aggregation::{fedavg, krum_select, weighted_aggregate, WeightVector};
use fedpriv_core::comms::{
    delta_decode, delta_encode, dequantize, entropy_decode, entropy_encode, quantize, topk_sparsify, ClientEncoder,
    CommsConfig, EncodedBlob, ServerDecoder, SparseUpdate,
};
use fedpriv_core::data::{dataset_from_idx, idx_bytes, partition, PartitionKind, PartitionSpec};
use fedpriv_core::model::clip_to_norm;
use fedpriv_core::secure_agg::{encode_fixed, ring_sum, split_shares};
use fedpriv_core::{ClientUpdate, Dataset, ParamVector};
use proptest::prelude::*;

fn pv(values: Vec<f64>) -> ParamVector {
    ParamVector::from_flat(values).unwrap()
}

fn update(id: u32, values: Vec<f64>, samples: usize) -> ClientUpdate {
    ClientUpdate { client_id: id, delta: pv(values), sample_count: samples, loss_delta: 0.0, staleness: 0 }
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 2usize..5, 1usize..60).prop_flat_map(|(dim, classes, n)| {
        (
            proptest::collection::vec(0u8..=255, dim * n),
            proptest::collection::vec(0usize..classes, n),
        )
            .prop_map(move |(pixels, labels)| {
                let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
                Dataset::new(dim, classes, features, labels).unwrap()
            })
    })
}

fn multiset(d: &Dataset) -> BTreeMap<(Vec<u64>, usize), usize> {
    let mut m = BTreeMap::new();
    for i in 0..d.len() {
        let key = (d.row(i).iter().map(|x| x.to_bits()).collect(), d.label(i));
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_conserves_rows(data in dataset_strategy(), clients in 1usize..6, alpha in 0.05f64..3.0, iid in any::<bool>(), seed in any::<u64>()) {
        prop_assume!(clients <= data.len());
        let kind = if iid { PartitionKind::Iid {} } else { PartitionKind::Dirichlet { alpha } };
        let shards = partition(&data, &PartitionSpec { kind, n_clients: clients }, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let mut union = BTreeMap::new();
        for s in &shards {
            prop_assert!(!s.is_empty());
            for (k, c) in multiset(s) {
                *union.entry(k).or_insert(0) += c;
            }
        }
        prop_assert_eq!(union, multiset(&data));
    }

    #[test]
    fn idx_round_trip(data in dataset_strategy()) {
        let max_label = data.labels().iter().copied().max().unwrap();
        prop_assume!(max_label >= 1);
        let data = Dataset::new(data.dim(), max_label + 1, data.features().to_vec(), data.labels().to_vec()).unwrap();
        let (images, labels) = idx_bytes(&data, 1, data.dim()).unwrap();
        prop_assert_eq!(dataset_from_idx(&images, &labels).unwrap(), data);
    }

    #[test]
    fn entropy_round_trip(symbols in proptest::collection::vec(0u16..300, 0..400)) {
        let blob = entropy_encode(&symbols);
        prop_assert_eq!(&entropy_decode(&blob).unwrap(), &symbols);
        let parsed = EncodedBlob::from_bytes(&blob.to_bytes()).unwrap();
        prop_assert_eq!(entropy_decode(&parsed).unwrap(), symbols);
    }

    #[test]
    fn quantizer_error_is_bounded(values in proptest::collection::vec(-10.0f64..10.0, 1..200), bits in 2u8..=16, clip in 0.01f64..20.0) {
        let q = quantize(&values, bits, clip).unwrap();
        let back = dequantize(&q.symbols, bits, clip).unwrap();
        let bound = clip / ((1u32 << bits) - 1) as f64;
        for (v, b) in values.iter().zip(&back) {
            let target = v.clamp(-clip, clip);
            prop_assert!((target - b).abs() <= bound * (1.0 + 1e-12), "{} -> {} (bound {})", v, b, bound);
        }
    }

    #[test]
    fn delta_coding_is_bit_exact(prev in proptest::collection::vec(-5.0f64..5.0, 1..60), cur in proptest::collection::vec(-5.0f64..5.0, 1..60), mask in any::<u64>()) {
        let dim = prev.len().max(cur.len());
        let sparse = |v: &[f64], shift: u32| {
            let (idx, vals): (Vec<u32>, Vec<f64>) =
                v.iter().enumerate().filter(|(i, _)| (mask >> ((*i as u32 + shift) % 64)) & 1 == 1).map(|(i, &x)| (i as u32, x)).unzip();
            SparseUpdate::new(dim, idx, vals).unwrap()
        };
        let previous = sparse(&prev, 0);
        let current = sparse(&cur, 7);
        let payload = delta_encode(&current, &previous).unwrap();
        let back = delta_decode(&payload, &previous).unwrap();
        prop_assert_eq!(back.indices, current.indices.clone());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.values), bits(&current.values));
    }

    #[test]
    fn topk_conserves_mass(values in proptest::collection::vec(-3.0f64..3.0, 1..80), residual in proptest::collection::vec(-1.0f64..1.0, 80), k in 0usize..100) {
        let n = values.len();
        let k = k.min(n);
        let delta = pv(values.clone());
        let res = pv(residual[..n].to_vec());
        let (sparse, rest) = topk_sparsify(&delta, k, &res).unwrap();
        prop_assert_eq!(sparse.nnz(), k);
        let sent = sparse.to_dense();
        for i in 0..n {
            let total = values[i] + residual[i];
            prop_assert!((sent[i] + rest.values()[i] - total).abs() <= 1e-12);
        }
    }

    #[test]
    fn wire_pipeline_stays_in_sync(rounds in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 40), 1..5), full in any::<bool>()) {
        let cfg = if full { CommsConfig::full() } else { CommsConfig::sparse_delta() };
        let mut enc = ClientEncoder::default();
        let mut dec = ServerDecoder::default();
        for (r, v) in rounds.into_iter().enumerate() {
            let delta = pv(v);
            let frame = enc.encode(&delta, &cfg, r as u32, 3).unwrap();
            let (header, got) = dec.decode(&frame, delta.layout()).unwrap();
            prop_assert_eq!(header.round, r as u32);
            prop_assert_eq!(got.len(), 40);
            prop_assert_eq!(got.values().iter().filter(|x| **x != 0.0).count() <= 4, true);
        }
    }

    #[test]
    fn clipping_bounds_the_norm(values in proptest::collection::vec(-100.0f64..100.0, 1..50), bound in 0.001f64..10.0) {
        let mut v = pv(values.clone());
        let before = v.norm_l2();
        clip_to_norm(&mut v, bound);
        prop_assert!(v.norm_l2() <= bound * (1.0 + 1e-12));
        if before <= bound {
            prop_assert_eq!(v.values(), values.as_slice());
        }
    }

    #[test]
    fn shares_sum_to_encoding(values in proptest::collection::vec(-1000.0f64..1000.0, 1..64), m in 1usize..6, seed in any::<u64>()) {
        let v = pv(values);
        let set = split_shares(0, &v, m, seed).unwrap();
        prop_assert_eq!(set.shares.len(), m);
        prop_assert_eq!(ring_sum(&set.shares).unwrap(), encode_fixed(&v).unwrap());
    }

    #[test]
    fn weighted_aggregate_ignores_order(raw in proptest::collection::vec((proptest::collection::vec(-1.0f64..1.0, 6), 0.01f64..1.0), 1..7), rot in 0usize..7) {
        let base = pv(vec![0.5; 6]);
        let updates: Vec<ClientUpdate> = raw.iter().enumerate().map(|(i, (v, _))| update(i as u32, v.clone(), 10)).collect();
        let weights = WeightVector::normalize(raw.iter().map(|(_, w)| *w).collect()).unwrap();
        let a = weighted_aggregate(&updates, &weights, &base).unwrap();
        let r = rot % updates.len();
        let mut shuffled = updates.clone();
        shuffled.rotate_left(r);
        let mut w = weights.as_slice().to_vec();
        w.rotate_left(r);
        let b = weighted_aggregate(&shuffled, &WeightVector::new(w).unwrap(), &base).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn uniform_weights_match_fedavg(raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 1..9)) {
        let base = pv(vec![-0.25; 5]);
        let updates: Vec<ClientUpdate> = raw.into_iter().enumerate().map(|(i, v)| update(i as u32, v, 7)).collect();
        let w = WeightVector::uniform(updates.len()).unwrap();
        prop_assert_eq!(weighted_aggregate(&updates, &w, &base).unwrap(), fedavg(&updates, &base).unwrap());
    }

    #[test]
    fn krum_is_translation_invariant(points in proptest::collection::vec(proptest::collection::vec(-64i32..64, 3), 5..9), shift in proptest::collection::vec(-64i32..64, 3), f in 0usize..3) {
        // dyadic coordinates keep every distance exact under translation
        let n = points.len();
        prop_assume!(n >= 2 * f + 3);
        let mk = |off: &[i32]| -> Vec<ClientUpdate> {
            points.iter().enumerate().map(|(i, p)| update(i as u32, p.iter().zip(off).map(|(&a, &b)| (a + b) as f64 / 8.0).collect(), 1)).collect()
        };
        let m = n - f - 2;
        let plain = krum_select(&mk(&[0, 0, 0]), f, m).unwrap();
        let moved = krum_select(&mk(&shift), f, m).unwrap();
        prop_assert_eq!(plain, moved);
    }
}
