//! Additive secret sharing of fixed-point encoded parameters over `Z/2^64`.
//!
//! Reals are scaled by 2^16, rounded, and stored two's-complement style in a
//! `u64`. Shares are uniform ring elements; only their modular sum carries
//! information, so an aggregator that sums shares from many clients learns
//! the sum and nothing else.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ClientId, Layout, ParamVector};
use crate::rng::rng_from_seed;

pub const FRACTION_BITS: u32 = 16;
pub const SCALE: f64 = (1u64 << FRACTION_BITS) as f64;
/// Magnitudes must stay strictly below 2^40.
pub const VALUE_BOUND: f64 = (1u64 << 40) as f64;

pub type RingVec = Vec<u64>;

pub fn encode_value(x: f64) -> Result<u64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("fixed-point input"));
    }
    if x.abs() >= VALUE_BOUND {
        return Err(Error::Range(format!("|{x}| exceeds the fixed-point bound 2^40")));
    }
    Ok((x * SCALE).round() as i64 as u64)
}

pub fn decode_value(r: u64) -> f64 {
    r as i64 as f64 / SCALE
}

pub fn encode_fixed(v: &ParamVector) -> Result<RingVec> {
    v.values().iter().map(|&x| encode_value(x)).collect()
}

pub fn decode_fixed(r: &[u64], layout: &Layout) -> Result<ParamVector> {
    ParamVector::from_values(layout.clone(), r.iter().map(|&x| decode_value(x)).collect())
}

/// The `m` additive shares held for one client's vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareSet {
    pub client_id: ClientId,
    pub shares: Vec<RingVec>,
}

impl ShareSet {
    pub fn m(&self) -> usize {
        self.shares.len()
    }

    pub fn vector_len(&self) -> usize {
        self.shares.first().map_or(0, Vec::len)
    }

    fn check_lengths(&self) -> Result<usize> {
        let len = self.vector_len();
        if self.shares.iter().any(|s| s.len() != len) {
            return Err(Error::Shape(format!("client {} has shares of unequal length", self.client_id)));
        }
        Ok(len)
    }
}

/// Splits `v` into `m` shares: `m - 1` uniform ring vectors plus one that
/// closes the sum.
pub fn split_shares(client_id: ClientId, v: &ParamVector, m: usize, seed: u64) -> Result<ShareSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("share count must be at least 1".into()));
    }
    let encoded = encode_fixed(v)?;
    let mut rng = rng_from_seed(seed);
    let mut shares: Vec<RingVec> = (0..m - 1)
        .map(|_| (0..encoded.len()).map(|_| rng.random::<u64>()).collect())
        .collect();
    let mut last = encoded;
    for share in &shares {
        for (l, s) in last.iter_mut().zip(share) {
            *l = l.wrapping_sub(*s);
        }
    }
    shares.push(last);
    Ok(ShareSet { client_id, shares })
}

/// Element-wise modular sum of equally long ring vectors.
pub fn ring_sum<'a>(vectors: impl IntoIterator<Item = &'a RingVec>) -> Result<RingVec> {
    let mut iter = vectors.into_iter();
    let mut acc = iter.next().ok_or(Error::Empty("share list"))?.clone();
    for v in iter {
        if v.len() != acc.len() {
            return Err(Error::Shape(format!("share lengths {} and {} differ", acc.len(), v.len())));
        }
        for (a, b) in acc.iter_mut().zip(v) {
            *a = a.wrapping_add(*b);
        }
    }
    Ok(acc)
}

pub fn reconstruct(shares: &ShareSet, layout: &Layout) -> Result<ParamVector> {
    shares.check_lengths()?;
    decode_fixed(&ring_sum(&shares.shares)?, layout)
}

/// Mean of the clients' vectors computed only from the modular sum of all
/// shares: `(1/n) * decode(sum_i sum_j s_ij)`.
pub fn secure_aggregate(share_sets: &[ShareSet], n: usize, layout: &Layout) -> Result<ParamVector> {
    if share_sets.is_empty() || n == 0 {
        return Err(Error::Empty("secure aggregation input"));
    }
    let total = ring_sum(share_sets.iter().flat_map(|s| s.shares.iter()))?;
    let mut mean = decode_fixed(&total, layout)?;
    mean.scale(1.0 / n as f64);
    Ok(mean)
}

/// Per-share-slot partial sums, as an intermediate (edge) aggregator keeps them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareAccumulator {
    slots: Vec<RingVec>,
    clients: usize,
}

impl ShareAccumulator {
    pub fn new(m: usize, len: usize) -> ShareAccumulator {
        ShareAccumulator { slots: vec![vec![0; len]; m], clients: 0 }
    }

    pub fn add(&mut self, set: &ShareSet) -> Result<()> {
        if set.m() != self.slots.len() || set.check_lengths()? != self.slots[0].len() {
            return Err(Error::Shape("share set does not match accumulator shape".into()));
        }
        for (slot, share) in self.slots.iter_mut().zip(&set.shares) {
            for (a, b) in slot.iter_mut().zip(share) {
                *a = a.wrapping_add(*b);
            }
        }
        self.clients += 1;
        Ok(())
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// Packs the partial sums as a share set tagged with `id`.
    pub fn into_share_set(self, id: ClientId) -> ShareSet {
        ShareSet { client_id: id, shares: self.slots }
    }
}

const SHARE_HEADER_LEN: usize = 4 + 2 + 4;

/// Wire form: little-endian `client_id: u32, m: u16, length: u32`, then
/// `m * length` little-endian `u64` words.
pub fn serialize_share_set(set: &ShareSet) -> Result<Vec<u8>> {
    let len = set.check_lengths()?;
    let m = u16::try_from(set.m()).map_err(|_| Error::Range("more than 65535 shares".into()))?;
    let len32 = u32::try_from(len).map_err(|_| Error::Range("share vector too long".into()))?;
    let mut out = Vec::with_capacity(serialized_len(set.m(), len));
    out.extend_from_slice(&set.client_id.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&len32.to_le_bytes());
    for share in &set.shares {
        for w in share {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn serialized_len(m: usize, len: usize) -> usize {
    SHARE_HEADER_LEN + 8 * m * len
}

pub fn deserialize_share_set(bytes: &[u8]) -> Result<ShareSet> {
    if bytes.len() < SHARE_HEADER_LEN {
        return Err(Error::Format("share header truncated".into()));
    }
    let client_id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let m = u16::from_le_bytes(bytes[4..6].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if bytes.len() != serialized_len(m, len) {
        return Err(Error::Format(format!(
            "share payload should be {} bytes, got {}",
            serialized_len(m, len),
            bytes.len()
        )));
    }
    let mut words = bytes[SHARE_HEADER_LEN..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
    let shares = (0..m).map(|_| words.by_ref().take(len).collect()).collect();
    Ok(ShareSet { client_id, shares })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: Vec<f64>) -> ParamVector {
        ParamVector::from_flat(v).unwrap()
    }

    #[test]
    fn fixed_point_examples() {
        assert_eq!(encode_value(0.0).unwrap(), 0);
        assert_eq!(decode_value(0), 0.0);
        assert_eq!(encode_value(1.5).unwrap(), 98304);
        assert_eq!(decode_value(encode_value(-1.5).unwrap()), -1.5);
        assert!(matches!(encode_value(2f64.powi(40)), Err(Error::Range(_))));
        assert!(matches!(encode_value(f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn single_share_is_the_encoding() {
        let v = flat(vec![1.0, -2.5, 3.25]);
        let set = split_shares(3, &v, 1, 9).unwrap();
        assert_eq!(set.shares, vec![encode_fixed(&v).unwrap()]);
        assert_eq!(reconstruct(&set, v.layout()).unwrap(), v);
    }

    #[test]
    fn zero_vector_shares_sum_to_zero() {
        let v = flat(vec![0.0; 6]);
        for m in 1..6 {
            let set = split_shares(0, &v, m, m as u64).unwrap();
            assert_eq!(ring_sum(&set.shares).unwrap(), vec![0; 6]);
        }
        assert!(split_shares(0, &v, 0, 0).is_err());
    }

    #[test]
    fn pooled_shares_reconstruct_the_sum() {
        let a = flat(vec![1.25, -7.0, 100.5]);
        let b = flat(vec![-0.25, 2.0, 0.5]);
        let mut pooled = split_shares(0, &a, 3, 1).unwrap();
        pooled.shares.extend(split_shares(1, &b, 2, 2).unwrap().shares);
        assert_eq!(reconstruct(&pooled, a.layout()).unwrap().values(), &[1.0, -5.0, 101.0]);
    }

    #[test]
    fn reconstruct_errors() {
        let layout = Layout::flat(2);
        let empty = ShareSet { client_id: 0, shares: vec![] };
        assert!(reconstruct(&empty, &layout).is_err());
        let ragged = ShareSet { client_id: 0, shares: vec![vec![1, 2], vec![3]] };
        assert!(reconstruct(&ragged, &layout).is_err());
        assert!(secure_aggregate(&[], 1, &layout).is_err());
    }

    #[test]
    fn opposite_clients_cancel() {
        let v = flat(vec![0.3, -12.7, 5.0]);
        let sets = vec![split_shares(0, &v, 3, 1).unwrap(), split_shares(1, &v.scaled(-1.0), 4, 2).unwrap()];
        let agg = secure_aggregate(&sets, 2, v.layout()).unwrap();
        assert!(agg.values().iter().all(|x| x.abs() <= 2f64.powi(-16)));
    }

    #[test]
    fn accumulator_matches_direct_sum() {
        let vs = [flat(vec![1.0, 2.0]), flat(vec![-3.0, 0.5]), flat(vec![0.25, 0.25])];
        let sets: Vec<_> = vs.iter().enumerate().map(|(i, v)| split_shares(i as u32, v, 3, i as u64).unwrap()).collect();
        let mut acc = ShareAccumulator::new(3, 2);
        for s in &sets {
            acc.add(s).unwrap();
        }
        assert_eq!(acc.clients(), 3);
        let edge = acc.into_share_set(99);
        let via_edge = secure_aggregate(&[edge], 3, vs[0].layout()).unwrap();
        let direct = secure_aggregate(&sets, 3, vs[0].layout()).unwrap();
        assert_eq!(via_edge, direct);
        assert!(ShareAccumulator::new(2, 2).add(&sets[0]).is_err());
    }

    #[test]
    fn wire_round_trip_and_size() {
        let v = flat(vec![1.0, -1.0, 0.5, 8.0]);
        let set = split_shares(77, &v, 3, 5).unwrap();
        let bytes = serialize_share_set(&set).unwrap();
        assert_eq!(bytes.len(), 10 + 8 * 3 * 4);
        assert_eq!(&bytes[0..4], &77u32.to_le_bytes());
        assert_eq!(&bytes[4..6], &3u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &4u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &set.shares[0][0].to_le_bytes());
        assert_eq!(deserialize_share_set(&bytes).unwrap(), set);
        assert!(deserialize_share_set(&bytes[..bytes.len() - 1]).is_err());
    }
}
