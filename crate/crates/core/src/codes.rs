//! Sign quantization, bit-packed code storage and Hamming search.
//!
//! Packed rows are MSB-first with bit 1 meaning +1, each row padded to a
//! byte boundary with zero bits. Because padding is zero in every row it
//! never contributes to an XOR popcount.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::encoder::EncoderParams;
use crate::format::{self, Reader};
use crate::{AdsqError, Result};

const CODES_MAGIC: &[u8; 8] = b"ADSQB001";

/// Elementwise sign with `sign(0) = +1`.
pub fn quantize_sign(v: ArrayView1<'_, f64>) -> Result<Array1<i8>> {
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(AdsqError::Domain(format!("cannot quantize non-finite value {x}")));
    }
    Ok(v.mapv(|x| if x >= 0.0 { 1 } else { -1 }))
}

fn sign_matrix(u: ArrayView2<'_, f64>) -> Array2<i8> {
    u.mapv(|x| if x >= 0.0 { 1 } else { -1 })
}

/// Codes for every row of `x`: `[sign(F_x(x)), sign(F_y(x))]`, the x half
/// first. Width is `2 * k_half`.
pub fn encode(x: ArrayView2<'_, f64>, imgx: &EncoderParams, imgy: &EncoderParams) -> Result<Array2<i8>> {
    if imgx.k_half() != imgy.k_half() || imgx.in_dim() != imgy.in_dim() {
        return Err(AdsqError::Shape(format!(
            "image networks disagree: {:?} vs {:?}",
            imgx.dims(),
            imgy.dims()
        )));
    }
    let ux = imgx.forward(x)?.u;
    let uy = imgy.forward(x)?.u;
    if ux.iter().chain(uy.iter()).any(|v| !v.is_finite()) {
        return Err(AdsqError::Domain("non-finite network output".into()));
    }
    ndarray::concatenate(Axis(1), &[sign_matrix(ux.view()).view(), sign_matrix(uy.view()).view()])
        .map_err(|e| AdsqError::Shape(e.to_string()))
}

/// Code for a single feature vector.
pub fn encode_query(x: ArrayView1<'_, f64>, imgx: &EncoderParams, imgy: &EncoderParams) -> Result<Array1<i8>> {
    let row = x.insert_axis(Axis(0));
    Ok(encode(row, imgx, imgy)?.row(0).to_owned())
}

/// `n` codes of `k_total` bits, packed row by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    k_total: usize,
    row_bytes: usize,
    payload: Vec<u8>,
}

impl PackedCodes {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_total(&self) -> usize {
        self.k_total
    }

    pub fn row_bytes(&self) -> usize {
        self.row_bytes
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.payload[i * self.row_bytes..(i + 1) * self.row_bytes]
    }

    /// Rebuilds from raw parts, checking the payload length and that padding
    /// bits are zero.
    pub fn from_raw(n: usize, k_total: usize, payload: Vec<u8>) -> Result<Self> {
        let row_bytes = k_total.div_ceil(8);
        if payload.len() != n * row_bytes {
            return Err(AdsqError::Format(format!(
                "payload has {} bytes, expected {} rows × {row_bytes}",
                payload.len(),
                n
            )));
        }
        let pad = row_bytes * 8 - k_total;
        if pad > 0 {
            let mask = (1u8 << pad) - 1;
            if let Some(i) = (0..n).find(|i| payload[(i + 1) * row_bytes - 1] & mask != 0) {
                return Err(AdsqError::Format(format!("row {i} has non-zero padding bits")));
            }
        }
        Ok(PackedCodes { n, k_total, row_bytes, payload })
    }

    /// `ADSQB001`: n, k_total, then the packed payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format::header(
            CODES_MAGIC,
            &[format::to_u32(self.n, "n")?, format::to_u32(self.k_total, "k_total")?],
            self.payload.len(),
        );
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, CODES_MAGIC, "codes file")?;
        let n = r.u32()?;
        let k = r.u32()?;
        let len = r.payload_len(n, k.div_ceil(8), 1)?;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        PackedCodes::from_raw(n as usize, k as usize, payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        PackedCodes::from_bytes(&format::read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

/// Packs a ±1 matrix.
pub fn pack(codes: ArrayView2<'_, i8>) -> Result<PackedCodes> {
    let (n, k) = codes.dim();
    let row_bytes = k.div_ceil(8);
    let mut payload = vec![0u8; n * row_bytes];
    for (i, row) in codes.outer_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            match v {
                1 => payload[i * row_bytes + j / 8] |= 0x80 >> (j % 8),
                -1 => {}
                _ => return Err(AdsqError::Domain(format!("code entry ({i}, {j}) = {v} is not ±1"))),
            }
        }
    }
    Ok(PackedCodes { n, k_total: k, row_bytes, payload })
}

pub fn unpack(p: &PackedCodes) -> Array2<i8> {
    Array2::from_shape_fn((p.n, p.k_total), |(i, j)| {
        if p.payload[i * p.row_bytes + j / 8] & (0x80 >> (j % 8)) != 0 {
            1
        } else {
            -1
        }
    })
}

/// Popcount of `a XOR b`.
pub fn hamming_distance(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(AdsqError::Argument(format!("code lengths differ: {} vs {} bytes", a.len(), b.len())));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u8], b: &[u8]) -> u32 {
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut d = 0;
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        d += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        d += (x ^ y).count_ones();
    }
    d
}

/// Distances from `query` to every database row.
pub fn distances(query: &[u8], db: &PackedCodes) -> Result<Vec<u32>> {
    if query.len() != db.row_bytes {
        return Err(AdsqError::Argument(format!(
            "query has {} bytes, database rows have {}",
            query.len(),
            db.row_bytes
        )));
    }
    Ok((0..db.n).map(|i| hamming_unchecked(query, db.row(i))).collect())
}

/// Database indices ordered by ascending distance, ties by ascending index.
///
/// Distances are bounded by `k_total`, so a counting sort gives the full
/// order in linear time with the tie rule for free.
pub fn rank_all(query: &[u8], db: &PackedCodes) -> Result<Vec<usize>> {
    let dist = distances(query, db)?;
    let mut counts = vec![0usize; db.k_total + 2];
    for &d in &dist {
        counts[d as usize + 1] += 1;
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut order = vec![0usize; dist.len()];
    for (i, &d) in dist.iter().enumerate() {
        order[counts[d as usize]] = i;
        counts[d as usize] += 1;
    }
    Ok(order)
}

/// The `k` nearest database rows.
pub fn search_topk(query: &[u8], db: &PackedCodes, k: usize) -> Result<Vec<usize>> {
    if k > db.n {
        return Err(AdsqError::Argument(format!("k = {k} exceeds database size {}", db.n)));
    }
    let mut order = rank_all(query, db)?;
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<i8> {
        Array2::from_shape_fn((n, k), |_| if rng.random_bool(0.5) { 1 } else { -1 })
    }

    #[test]
    fn sign_examples() {
        assert_eq!(quantize_sign(array![0.0, -0.2, 0.7].view()).unwrap(), array![1, -1, 1]);
        assert_eq!(quantize_sign(array![-3.0, -0.1].view()).unwrap(), array![-1, -1]);
        assert_eq!(quantize_sign(array![1.0, -1.0].view()).unwrap(), array![1, -1]);
        assert!(quantize_sign(array![f64::NAN].view()).is_err());
    }

    #[test]
    fn pack_layout() {
        let p = pack(array![[1i8, -1, 1, 1, -1, -1, -1, -1]].view()).unwrap();
        assert_eq!(p.payload(), &[0xB0]);
        let q = pack(array![[1i8, 1, 1]].view()).unwrap();
        assert_eq!(q.payload(), &[0b1110_0000]);
        assert!(matches!(pack(array![[0i8]].view()), Err(AdsqError::Domain(_))));
    }

    #[test]
    fn codes_file_round_trip_and_padding_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = pack(random_codes(&mut rng, 5, 13).view()).unwrap();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(PackedCodes::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() |= 1;
        assert!(PackedCodes::from_bytes(&bad).is_err());
        assert!(PackedCodes::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn hamming_examples() {
        let a = pack(array![[1i8; 12]].view()).unwrap();
        let b = pack(array![[-1i8; 12]].view()).unwrap();
        assert_eq!(hamming_distance(a.row(0), a.row(0)).unwrap(), 0);
        assert_eq!(hamming_distance(a.row(0), b.row(0)).unwrap(), 12);
        let c = pack(array![[1i8, 1, 1, 1]].view()).unwrap();
        let d = pack(array![[1i8, 1, -1, -1]].view()).unwrap();
        assert_eq!(hamming_distance(c.row(0), d.row(0)).unwrap(), 2);
        assert!(hamming_distance(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn topk_ties_and_self() {
        let db = pack(array![[1i8, 1, 1, 1], [1, 1, -1, -1], [-1, -1, 1, 1], [1, 1, 1, -1]].view()).unwrap();
        let q = pack(array![[1i8, 1, -1, -1]].view()).unwrap();
        assert_eq!(search_topk(q.row(0), &db, 1).unwrap(), vec![1]);
        // rows 0 and 3: distances 2 and 1; rows 0 and 2 tie at 2 -> 0 first
        assert_eq!(search_topk(q.row(0), &db, 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(search_topk(q.row(0), &db, 5).is_err());
    }

    #[test]
    fn ranking_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let k = rng.random_range(1..40);
            let db = pack(random_codes(&mut rng, 50, k).view()).unwrap();
            let q = pack(random_codes(&mut rng, 1, k).view()).unwrap();
            let mut oracle: Vec<(u32, usize)> =
                (0..50).map(|i| ((0..db.row_bytes()).map(|b| (db.row(i)[b] ^ q.row(0)[b]).count_ones()).sum(), i)).collect();
            oracle.sort();
            let expect: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
            assert_eq!(search_topk(q.row(0), &db, 50).unwrap(), expect);
        }
    }

    #[test]
    fn encode_concatenates_x_then_y() {
        let imgx = EncoderParams::init(&[3, 4, 2], 1).unwrap();
        let imgy = EncoderParams::init(&[3, 4, 2], 2).unwrap();
        let x = array![[0.3, -1.0, 2.0], [1.0, 0.5, -0.5]];
        let codes = encode(x.view(), &imgx, &imgy).unwrap();
        assert_eq!(codes.ncols(), 4);
        let ux = imgx.forward(x.view()).unwrap().u;
        let uy = imgy.forward(x.view()).unwrap().u;
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(codes[[i, j]], if ux[[i, j]] >= 0.0 { 1 } else { -1 });
                assert_eq!(codes[[i, 2 + j]], if uy[[i, j]] >= 0.0 { 1 } else { -1 });
            }
        }
        let q = encode_query(x.row(1), &imgx, &imgx).unwrap();
        assert_eq!(q.slice(ndarray::s![..2]), q.slice(ndarray::s![2..]));
        assert!(encode_query(array![1.0].view(), &imgx, &imgy).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(seed in 0u64..500, n in 1usize..6, k in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_codes(&mut rng, n, k);
            let p = pack(m.view()).unwrap();
            prop_assert_eq!(p.payload().len(), n * k.div_ceil(8));
            prop_assert_eq!(unpack(&p), m);
        }

        #[test]
        fn hamming_inner_product_identity(seed in 0u64..2000, k in 1usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_codes(&mut rng, 2, k);
            let p = pack(m.view()).unwrap();
            let ip: i64 = m.row(0).iter().zip(m.row(1).iter()).map(|(a, b)| i64::from(*a) * i64::from(*b)).sum();
            let d = i64::from(hamming_distance(p.row(0), p.row(1)).unwrap());
            prop_assert_eq!(2 * d, k as i64 - ip);
        }
    }
}
