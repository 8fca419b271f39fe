//! Discrete code update by cyclic coordinate descent.
//!
//! With the network fixed, the codes minimize
//! `||U B^T - K S||_F^2 + eta ||U - B||_F^2` over `B ∈ {-1,+1}^{n×K}`.
//! Up to a constant this is `tr(B M B^T) + <B, P>` with `M = U^T U` and
//! `P = -2K S^T U - 2 eta U`, so for column `c` with all other columns fixed
//! the objective is linear in `B_{*c}` and the exact minimizer is
//! `B_{*c} = -sign(2 B~_c U~_c^T U_{*c} + P_{*c})`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::{AdsqError, Result};

/// Which image network a code matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    X,
    Y,
}

/// An `n × k_half` matrix with entries exactly ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    codes: Array2<f64>,
    pub owner: Owner,
}

impl CodeMatrix {
    pub fn new(codes: Array2<f64>, owner: Owner) -> Result<Self> {
        if let Some(((i, j), v)) = codes.indexed_iter().find(|(_, &v)| v != 1.0 && v != -1.0) {
            return Err(AdsqError::Domain(format!("code entry ({i}, {j}) = {v} is not ±1")));
        }
        Ok(CodeMatrix { codes, owner })
    }

    /// `sign(U)` with `sign(0) = +1`.
    pub fn from_sign(u: ArrayView2<'_, f64>, owner: Owner) -> Self {
        CodeMatrix { codes: u.mapv(sign), owner }
    }

    pub fn codes(&self) -> ArrayView2<'_, f64> {
        self.codes.view()
    }

    pub fn n(&self) -> usize {
        self.codes.nrows()
    }

    pub fn k_half(&self) -> usize {
        self.codes.ncols()
    }

    pub fn to_i8(&self) -> Array2<i8> {
        self.codes.mapv(|v| v as i8)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Network outputs, similarity and the linear coefficient `P` for one
/// B-step.
#[derive(Debug, Clone)]
pub struct BStepWorkspace {
    u: Array2<f64>,
    s_signed: Array2<f64>,
    p: Array2<f64>,
    k: f64,
    eta: f64,
    asym_weight: f64,
}

impl BStepWorkspace {
    /// `k` is the target inner-product scale (bits per network).
    /// `asym_weight` multiplies the `||U B^T - K S||` part; 0 leaves only the
    /// quantization term, whose minimizer is `sign(U)`.
    pub fn new(u: Array2<f64>, s_signed: Array2<f64>, k: f64, eta: f64, asym_weight: f64) -> Result<Self> {
        let p = compute_p_weighted(u.view(), s_signed.view(), k, eta, asym_weight)?;
        Ok(BStepWorkspace { u, s_signed, p, k, eta, asym_weight })
    }

    pub fn u(&self) -> ArrayView2<'_, f64> {
        self.u.view()
    }

    pub fn p(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    /// Replaces `U` and recomputes `P`.
    pub fn set_u(&mut self, u: Array2<f64>) -> Result<()> {
        self.p = compute_p_weighted(u.view(), self.s_signed.view(), self.k, self.eta, self.asym_weight)?;
        self.u = u;
        Ok(())
    }

    /// The discrete objective at `b`.
    pub fn objective(&self, b: ArrayView2<'_, f64>) -> f64 {
        bstep_objective_weighted(self.u.view(), b, self.s_signed.view(), self.k, self.eta, self.asym_weight)
    }

    /// Column-`c` coefficient `q = 2 B~_c U~_c^T U_{*c} + P_{*c}`; the
    /// objective restricted to that column is `q . B_{*c}` + const.
    fn column_coefficient(&self, b: ArrayView2<'_, f64>, c: usize) -> Array1<f64> {
        let k = self.u.ncols();
        let uc = self.u.column(c);
        // m_j = U_{*j} . U_{*c} for j != c
        let mut m = self.u.t().dot(&uc);
        m[c] = 0.0;
        let mut q = b.dot(&m) * (2.0 * self.asym_weight);
        debug_assert_eq!(m.len(), k);
        q += &self.p.column(c);
        q
    }
}

/// `P = -2 K S^T U - 2 eta U`.
pub fn compute_p(u: ArrayView2<'_, f64>, s_signed: ArrayView2<'_, f64>, k: f64, eta: f64) -> Result<Array2<f64>> {
    compute_p_weighted(u, s_signed, k, eta, 1.0)
}

fn compute_p_weighted(u: ArrayView2<'_, f64>, s_signed: ArrayView2<'_, f64>, k: f64, eta: f64, w: f64) -> Result<Array2<f64>> {
    let n = u.nrows();
    if s_signed.dim() != (n, n) {
        return Err(AdsqError::Shape(format!("S is {:?} but U has {n} rows", s_signed.dim())));
    }
    let mut p = s_signed.t().dot(&u) * (-2.0 * k * w);
    p.scaled_add(-2.0 * eta, &u);
    Ok(p)
}

/// `||U B^T - K S||_F^2 + eta ||U - B||_F^2`.
pub fn bstep_objective(u: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, s_signed: ArrayView2<'_, f64>, k: f64, eta: f64) -> f64 {
    bstep_objective_weighted(u, b, s_signed, k, eta, 1.0)
}

fn bstep_objective_weighted(
    u: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    s_signed: ArrayView2<'_, f64>,
    k: f64,
    eta: f64,
    w: f64,
) -> f64 {
    let mut resid = u.dot(&b.t());
    resid.scaled_add(-k, &s_signed);
    let fit: f64 = resid.iter().map(|e| e * e).sum();
    let quant: f64 = (&u - &b).iter().map(|d| d * d).sum();
    w * fit + eta * quant
}

/// Replaces column `c` with its exact minimizer given the other columns.
/// Returns the number of entries that flipped.
pub fn update_column(b: &mut CodeMatrix, c: usize, ws: &BStepWorkspace) -> Result<usize> {
    if c >= b.k_half() {
        return Err(AdsqError::Argument(format!("column {c} out of range for {} bits", b.k_half())));
    }
    if b.codes.dim() != ws.u.dim() {
        return Err(AdsqError::Shape(format!("codes {:?} vs U {:?}", b.codes.dim(), ws.u.dim())));
    }
    let q = ws.column_coefficient(b.codes.view(), c);
    let mut changed = 0;
    for (bi, &qi) in b.codes.slice_mut(s![.., c]).iter_mut().zip(q.iter()) {
        let new = -sign(qi);
        if *bi != new {
            *bi = new;
            changed += 1;
        }
    }
    Ok(changed)
}

/// Outcome of [`bstep_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub sweeps_run: usize,
    /// Entries flipped in each sweep.
    pub changes: Vec<usize>,
    /// Objective before the first update and after every column update.
    /// Only filled when tracing was requested.
    pub trace: Vec<f64>,
    /// Sum of per-column objective changes; never positive.
    pub total_delta: f64,
}

/// Cycles columns `0..k` in ascending order up to `sweeps` times, stopping
/// after a sweep that flips nothing.
///
/// Every column update is checked for descent via its exact objective
/// change `q . (b_new - b_old)`; with `trace` the full objective is also
/// recorded after each update.
pub fn bstep_sweep(b: &mut CodeMatrix, ws: &BStepWorkspace, sweeps: usize, trace: bool) -> Result<SweepReport> {
    let mut report = SweepReport { sweeps_run: 0, changes: Vec::new(), trace: Vec::new(), total_delta: 0.0 };
    if trace {
        report.trace.push(ws.objective(b.codes.view()));
    }
    for _ in 0..sweeps {
        let mut flipped = 0;
        for c in 0..b.k_half() {
            let q = ws.column_coefficient(b.codes.view(), c);
            let old = b.codes.column(c).to_owned();
            flipped += update_column(b, c, ws)?;
            let delta: f64 = q.iter().zip(b.codes.column(c).iter().zip(old.iter())).map(|(q, (n, o))| q * (n - o)).sum();
            if delta > 0.0 {
                return Err(AdsqError::Training(format!("column {c} update increased the objective by {delta}")));
            }
            report.total_delta += delta;
            if trace {
                report.trace.push(ws.objective(b.codes.view()));
            }
        }
        report.sweeps_run += 1;
        report.changes.push(flipped);
        if flipped == 0 {
            break;
        }
    }
    Ok(report)
}

/// Column sums of `B`; zero means every bit is perfectly balanced.
pub fn bit_balance(b: &CodeMatrix) -> Array1<f64> {
    b.codes.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Array2<f64>, Array2<f64>, CodeMatrix) {
        let u = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let s = Array2::from_shape_fn((n, n), |(i, j)| if classes[i] == classes[j] { 1.0 } else { -1.0 });
        let b = CodeMatrix::new(Array2::from_shape_fn((n, k), |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }), Owner::X).unwrap();
        (u, s, b)
    }

    #[test]
    fn p_examples() {
        let p = compute_p(array![[0.5]].view(), array![[1.0]].view(), 1.0, 10.0).unwrap();
        assert_eq!(p, array![[-11.0]]);
        let z = compute_p(Array2::zeros((3, 2)).view(), Array2::ones((3, 3)).view(), 2.0, 10.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let u = array![[0.1, -0.4], [0.7, 0.2]];
        let p = compute_p(u.view(), Array2::eye(2).view(), 1.0, 0.0).unwrap();
        assert_eq!(p, &u * -2.0);
        assert!(matches!(compute_p(u.view(), Array2::eye(3).view(), 1.0, 0.0), Err(AdsqError::Shape(_))));
    }

    #[test]
    fn single_bit_column_from_p() {
        // k = 1: the coefficient is just P. Choose U, S so P = [-11, 3].
        // P_i = -2 (S^T U)_i - 2 eta u_i with eta = 10, S = I: P = -22 u
        let u = array![[0.5], [-3.0 / 22.0]];
        let ws = BStepWorkspace::new(u, Array2::eye(2), 1.0, 10.0, 1.0).unwrap();
        assert!((ws.p()[[0, 0]] + 11.0).abs() < 1e-12 && (ws.p()[[1, 0]] - 3.0).abs() < 1e-12);
        let mut b = CodeMatrix::new(array![[-1.0], [1.0]], Owner::X).unwrap();
        update_column(&mut b, 0, &ws).unwrap();
        assert_eq!(b.codes(), array![[1.0], [-1.0]]);
    }

    #[test]
    fn zero_coefficient_maps_to_minus_one() {
        let ws = BStepWorkspace::new(Array2::zeros((2, 1)), array![[1.0, -1.0], [-1.0, 1.0]], 1.0, 10.0, 1.0).unwrap();
        let mut b = CodeMatrix::new(array![[1.0], [1.0]], Owner::Y).unwrap();
        update_column(&mut b, 0, &ws).unwrap();
        assert_eq!(b.codes(), array![[-1.0], [-1.0]]);
    }

    #[test]
    fn column_out_of_range() {
        let ws = BStepWorkspace::new(Array2::zeros((2, 1)), Array2::eye(2), 1.0, 1.0, 1.0).unwrap();
        let mut b = CodeMatrix::new(array![[1.0], [1.0]], Owner::X).unwrap();
        assert!(matches!(update_column(&mut b, 1, &ws), Err(AdsqError::Argument(_))));
    }

    #[test]
    fn column_update_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n = rng.random_range(1..=10);
            let k = rng.random_range(1..=4);
            let (u, s, mut b) = random_instance(&mut rng, n, k);
            let ws = BStepWorkspace::new(u.clone(), s.clone(), k as f64, 10.0, 1.0).unwrap();
            let c = rng.random_range(0..k);
            update_column(&mut b, c, &ws).unwrap();
            let got = ws.objective(b.codes());
            let mut best = f64::INFINITY;
            let mut cand = b.codes().to_owned();
            for mask in 0u32..(1 << n) {
                for i in 0..n {
                    cand[[i, c]] = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                }
                best = best.min(bstep_objective(u.view(), cand.view(), s.view(), k as f64, 10.0));
            }
            assert!(got <= best + 1e-9 * best.abs().max(1.0), "got {got} best {best}");
        }
    }

    #[test]
    fn sweep_monotone_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, s, mut b) = random_instance(&mut rng, 8, 3);
        let ws = BStepWorkspace::new(u, s, 3.0, 10.0, 1.0).unwrap();
        let report = bstep_sweep(&mut b, &ws, 10, true).unwrap();
        for w in report.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", report.trace);
        }
        assert_eq!(*report.changes.last().unwrap(), 0);
        let before = b.clone();
        let again = bstep_sweep(&mut b, &ws, 1, false).unwrap();
        assert_eq!(again.changes, vec![0]);
        assert_eq!(b, before);
        assert!(b.codes().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn fixed_point_and_zero_sweeps() {
        // U = +-1 with B = sign(U) and S consistent with U: nothing moves
        let u = array![[1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let s = array![[1.0, 1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let ws = BStepWorkspace::new(u.clone(), s, 2.0, 10.0, 1.0).unwrap();
        let mut b = CodeMatrix::from_sign(u.view(), Owner::X);
        let rep = bstep_sweep(&mut b, &ws, 5, false).unwrap();
        assert_eq!(rep.changes, vec![0]);
        assert_eq!(b.codes(), u);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (u, s, mut b) = random_instance(&mut rng, 6, 2);
        let before = b.clone();
        let ws = BStepWorkspace::new(u, s, 2.0, 10.0, 1.0).unwrap();
        bstep_sweep(&mut b, &ws, 0, false).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn zero_asym_weight_gives_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (u, s, mut b) = random_instance(&mut rng, 7, 3);
        let ws = BStepWorkspace::new(u.clone(), s, 3.0, 10.0, 0.0).unwrap();
        bstep_sweep(&mut b, &ws, 3, false).unwrap();
        assert_eq!(b, CodeMatrix::from_sign(u.view(), Owner::X));
    }
}
