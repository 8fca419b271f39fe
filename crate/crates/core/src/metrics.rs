//! Retrieval evaluation over Hamming rankings.
//!
//! Relevance is label overlap: a database item is relevant to a query when
//! they share at least one label. Rankings use ascending Hamming distance
//! with ties broken by database index.

use ndarray::ArrayView2;

use crate::codes::{distances, rank_all, PackedCodes};
use crate::{AdsqError, Result};

/// Decides relevance from query and database label matrices.
#[derive(Debug, Clone)]
pub struct RelevanceJudge {
    words: usize,
    query: Vec<u64>,
    db: Vec<u64>,
    n_query: usize,
    n_db: usize,
}

fn label_bits(l: ArrayView2<'_, u8>, words: usize) -> Vec<u64> {
    let mut bits = vec![0u64; l.nrows() * words];
    for ((i, j), &v) in l.indexed_iter() {
        if v != 0 {
            bits[i * words + j / 64] |= 1 << (j % 64);
        }
    }
    bits
}

impl RelevanceJudge {
    pub fn new(query_labels: ArrayView2<'_, u8>, db_labels: ArrayView2<'_, u8>) -> Result<Self> {
        if query_labels.ncols() != db_labels.ncols() {
            return Err(AdsqError::Shape(format!(
                "query labels have {} classes, database labels {}",
                query_labels.ncols(),
                db_labels.ncols()
            )));
        }
        let words = query_labels.ncols().div_ceil(64).max(1);
        Ok(RelevanceJudge {
            words,
            query: label_bits(query_labels, words),
            db: label_bits(db_labels, words),
            n_query: query_labels.nrows(),
            n_db: db_labels.nrows(),
        })
    }

    #[inline]
    pub fn relevant(&self, q: usize, d: usize) -> bool {
        let a = &self.query[q * self.words..(q + 1) * self.words];
        let b = &self.db[d * self.words..(d + 1) * self.words];
        a.iter().zip(b).any(|(x, y)| x & y != 0)
    }

    pub fn total_relevant(&self, q: usize) -> usize {
        (0..self.n_db).filter(|&d| self.relevant(q, d)).count()
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_db(&self) -> usize {
        self.n_db
    }
}

/// Normalizer of truncated average precision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ApDenominator {
    /// `min(R, total relevant)`: a perfect top-R list scores 1.
    #[default]
    MinCutoffTotal,
    /// All relevant items in the database.
    TotalRelevant,
}

/// Average precision of the top `cutoff` entries of a ranked relevance
/// list: the sum of precision@r over hits at rank r <= cutoff, divided per
/// `denom`. Zero when nothing is relevant.
pub fn average_precision(ranked: &[bool], cutoff: usize, total_relevant: usize, denom: ApDenominator) -> Result<f64> {
    if ranked.is_empty() {
        return Err(AdsqError::Argument("empty ranking".into()));
    }
    if cutoff == 0 {
        return Err(AdsqError::Argument("AP cutoff must be >= 1".into()));
    }
    if total_relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in ranked.iter().take(cutoff).enumerate().filter(|(_, &rel)| rel) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    let d = match denom {
        ApDenominator::MinCutoffTotal => cutoff.min(total_relevant),
        ApDenominator::TotalRelevant => total_relevant,
    };
    Ok(sum / d as f64)
}

fn check_pair(queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge) -> Result<()> {
    if queries.k_total() != db.k_total() {
        return Err(AdsqError::Argument(format!(
            "query codes have {} bits, database codes {}",
            queries.k_total(),
            db.k_total()
        )));
    }
    if judge.n_query() != queries.n() || judge.n_db() != db.n() {
        return Err(AdsqError::Shape(format!(
            "labels cover {} queries / {} database items, codes {} / {}",
            judge.n_query(),
            judge.n_db(),
            queries.n(),
            db.n()
        )));
    }
    Ok(())
}

fn ranked_relevance(q: usize, queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge) -> Result<Vec<bool>> {
    Ok(rank_all(queries.row(q), db)?.into_iter().map(|d| judge.relevant(q, d)).collect())
}

/// Mean of per-query AP@R.
pub fn mean_ap(queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge, cutoff: usize, denom: ApDenominator) -> Result<f64> {
    check_pair(queries, db, judge)?;
    if queries.n() == 0 {
        return Err(AdsqError::Argument("no queries".into()));
    }
    let mut total = 0.0;
    for q in 0..queries.n() {
        let rel = ranked_relevance(q, queries, db, judge)?;
        let n_rel = rel.iter().filter(|&&r| r).count();
        total += average_precision(&rel, cutoff, n_rel, denom)?;
    }
    Ok(total / queries.n() as f64)
}

/// Fraction of database items within Hamming `radius` of query `q` that
/// are relevant; 0 when the ball is empty.
pub fn precision_within_radius(q: usize, queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge, radius: u32) -> Result<f64> {
    check_pair(queries, db, judge)?;
    let dist = distances(queries.row(q), db)?;
    let (mut inside, mut hits) = (0usize, 0usize);
    for (d, _) in dist.iter().enumerate().filter(|(_, &x)| x <= radius) {
        inside += 1;
        hits += usize::from(judge.relevant(q, d));
    }
    Ok(if inside == 0 { 0.0 } else { hits as f64 / inside as f64 })
}

/// Precision within Hamming radius 2 for query `q`.
pub fn precision_at_hamming2(q: usize, queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge) -> Result<f64> {
    precision_within_radius(q, queries, db, judge, 2)
}

/// Mean precision within Hamming radius 2 over all queries.
pub fn mean_precision_at_hamming2(queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge) -> Result<f64> {
    if queries.n() == 0 {
        return Err(AdsqError::Argument("no queries".into()));
    }
    let mut total = 0.0;
    for q in 0..queries.n() {
        total += precision_at_hamming2(q, queries, db, judge)?;
    }
    Ok(total / queries.n() as f64)
}

/// Precision at the first rank whose recall reaches each grid level.
///
/// Queries without any relevant item have no defined recall and are left
/// out of the average.
pub fn pr_curve(queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge, recall_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pair(queries, db, judge)?;
    if let Some(r) = recall_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(AdsqError::Argument(format!("recall level {r} outside (0, 1]")));
    }
    let mut sums = vec![0.0; recall_grid.len()];
    let mut counted = 0usize;
    for q in 0..queries.n() {
        let rel = ranked_relevance(q, queries, db, judge)?;
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        counted += 1;
        for (g, &level) in recall_grid.iter().enumerate() {
            let needed = ((level * total as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut hits = 0usize;
            for (rank, &r) in rel.iter().enumerate() {
                hits += usize::from(r);
                if hits >= needed {
                    sums[g] += hits as f64 / (rank + 1) as f64;
                    break;
                }
            }
        }
    }
    let denom = counted.max(1) as f64;
    Ok(recall_grid.iter().zip(sums).map(|(&r, s)| (r, s / denom)).collect())
}

/// Mean precision of the top-N list for each N.
pub fn precision_at_n(queries: &PackedCodes, db: &PackedCodes, judge: &RelevanceJudge, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    check_pair(queries, db, judge)?;
    if let Some(n) = ns.iter().find(|&&n| n == 0 || n > db.n()) {
        return Err(AdsqError::Argument(format!("N = {n} outside 1..={}", db.n())));
    }
    if queries.n() == 0 {
        return Err(AdsqError::Argument("no queries".into()));
    }
    let mut sums = vec![0.0; ns.len()];
    for q in 0..queries.n() {
        let rel = ranked_relevance(q, queries, db, judge)?;
        for (slot, &n) in sums.iter_mut().zip(ns) {
            *slot += rel[..n].iter().filter(|&&r| r).count() as f64 / n as f64;
        }
    }
    Ok(ns.iter().zip(sums).map(|(&n, s)| (n, s / queries.n() as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::pack;
    use ndarray::{array, Array2};

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[true, false, true, true], 4, 3, ApDenominator::MinCutoffTotal).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-15);
        assert!((ap - 0.805556).abs() < 1e-6);
        assert_eq!(average_precision(&[true; 5], 5, 5, ApDenominator::MinCutoffTotal).unwrap(), 1.0);
        assert_eq!(average_precision(&[false; 3], 3, 0, ApDenominator::MinCutoffTotal).unwrap(), 0.0);
        assert!(average_precision(&[], 3, 0, ApDenominator::MinCutoffTotal).is_err());
    }

    #[test]
    fn ap_denominators_differ_under_truncation() {
        let r = [true, true, false, false, true];
        let a = average_precision(&r, 2, 3, ApDenominator::MinCutoffTotal).unwrap();
        let b = average_precision(&r, 2, 3, ApDenominator::TotalRelevant).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - 2.0 / 3.0).abs() < 1e-15);
    }

    /// db codes at chosen distances from an all-ones 4-bit query.
    fn setup(dists: &[usize], rel: &[bool]) -> (PackedCodes, PackedCodes, RelevanceJudge) {
        let q = pack(array![[1i8, 1, 1, 1]].view()).unwrap();
        let db = Array2::from_shape_fn((dists.len(), 4), |(i, j)| if j < dists[i] { -1i8 } else { 1 });
        let db = pack(db.view()).unwrap();
        let ql = array![[1u8, 0]];
        let dl = Array2::from_shape_fn((rel.len(), 2), |(i, j)| u8::from((j == 0) == rel[i]));
        let judge = RelevanceJudge::new(ql.view(), dl.view()).unwrap();
        (q, db, judge)
    }

    #[test]
    fn hamming2_examples() {
        let (q, db, j) = setup(&[0, 2, 4], &[true, true, false]);
        assert_eq!(precision_at_hamming2(0, &q, &db, &j).unwrap(), 1.0);
        let (q, db, j) = setup(&[1, 2], &[false, true]);
        assert_eq!(precision_at_hamming2(0, &q, &db, &j).unwrap(), 0.5);
        let (q, db, j) = setup(&[3, 4], &[true, true]);
        assert_eq!(precision_at_hamming2(0, &q, &db, &j).unwrap(), 0.0);
    }

    #[test]
    fn pr_examples() {
        let (q, db, j) = setup(&[0, 1, 2], &[true, false, true]);
        let pr = pr_curve(&q, &db, &j, &[0.5, 1.0]).unwrap();
        assert_eq!(pr[0], (0.5, 1.0));
        assert!((pr[1].1 - 2.0 / 3.0).abs() < 1e-15);

        let (q, db, j) = setup(&[0, 1, 2, 3], &[true, true, false, false]);
        let pr = pr_curve(&q, &db, &j, &[0.5, 1.0]).unwrap();
        assert_eq!(pr, vec![(0.5, 1.0), (1.0, 1.0)]);

        // all irrelevant first: recall 1 reached at the last rank
        let (q, db, j) = setup(&[0, 1, 2, 3], &[false, false, true, true]);
        let pr = pr_curve(&q, &db, &j, &[1.0]).unwrap();
        assert_eq!(pr[0].1, 2.0 / 4.0);
    }

    #[test]
    fn precision_at_n_examples() {
        let (q, db, j) = setup(&[0, 1, 2, 3], &[true, false, true, false]);
        let p = precision_at_n(&q, &db, &j, &[1, 4]).unwrap();
        assert_eq!(p, vec![(1, 1.0), (4, 0.5)]);
        assert!(precision_at_n(&q, &db, &j, &[5]).is_err());
    }

    #[test]
    fn duplicate_query_keeps_map() {
        let (q, db, j) = setup(&[0, 1, 2], &[false, true, true]);
        let once = mean_ap(&q, &db, &j, 3, ApDenominator::MinCutoffTotal).unwrap();
        let q2 = pack(array![[1i8, 1, 1, 1], [1, 1, 1, 1]].view()).unwrap();
        let dl = array![[0u8, 1], [1, 0], [1, 0]];
        let j2 = RelevanceJudge::new(array![[1u8, 0], [1, 0]].view(), dl.view()).unwrap();
        let twice = mean_ap(&q2, &db, &j2, 3, ApDenominator::MinCutoffTotal).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bit_width_mismatch() {
        let q = pack(array![[1i8, 1, 1]].view()).unwrap();
        let (_, db, j) = setup(&[0], &[true]);
        assert!(mean_ap(&q, &db, &j, 1, ApDenominator::MinCutoffTotal).is_err());
    }
}
