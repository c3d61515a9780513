//! Weight salience estimation from calibration activations.
//!
//! Three maps per layer, all d_out×d_in:
//!
//! * `V` — second-order salience: `v_ij = w_ij² / diag(H⁻¹)_j²`, with
//!   `H = 2·XᵀX` accumulated over calibration batches and inverted after
//!   damping. The inverse-Essian diagonal is indexed by the input column
//!   `j`, the dimension H lives in.
//! * `B` — post-binarization activation-range shift: how much the output
//!   channel's range moves when a single weight is flipped to its 1-bit
//!   value. Computed with an exact rank-1 column update of the baseline
//!   `Y = X·Wᵀ`, O(d_out·d_in·N) total.
//! * `M = V + λ·B` — the combined metric that drives salient-weight
//!   selection.

use rayon::prelude::*;

use crate::config::RangeMode;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};

/// Accumulated second-order statistics for one layer.
#[derive(Debug, Clone)]
pub struct HessianState {
    h: Matrix,
    n_samples: usize,
    damping_applied: f64,
}

impl HessianState {
    pub fn new(d_in: usize) -> Self {
        HessianState {
            h: Matrix::zeros(d_in, d_in),
            n_samples: 0,
            damping_applied: 0.0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.h.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn damping_applied(&self) -> f64 {
        self.damping_applied
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }

    /// Fold a batch of activations in: `H += 2·XᵀX`, counting rows as
    /// samples. Batches may arrive in any split; the sum is what matters.
    pub fn accumulate(&mut self, x_batch: &Matrix) -> Result<()> {
        if x_batch.cols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "activation batch has {} columns, Hessian is {}x{}",
                x_batch.cols(),
                self.d_in(),
                self.d_in()
            )));
        }
        let g = x_batch.gram();
        let d = self.d_in();
        for i in 0..d * d {
            self.h.data_mut()[i] += 2.0 * g.data()[i];
        }
        self.n_samples += x_batch.rows();
        Ok(())
    }

    /// Merge a per-shard state accumulated elsewhere.
    pub fn merge(&mut self, other: &HessianState) -> Result<()> {
        if other.d_in() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "merging Hessians of size {} and {}",
                other.d_in(),
                self.d_in()
            )));
        }
        for i in 0..self.d_in() * self.d_in() {
            self.h.data_mut()[i] += other.h.data()[i];
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// SHA-256 hex of the accumulated matrix payload; the pipeline records
    /// this per layer so runs can be compared for exact H equality.
    pub fn digest_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.h.to_le_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Invert `H + δI` with `δ = damping_fraction · mean(diag(H))` via
    /// Cholesky. Records the δ used.
    pub fn invert(&mut self, damping_fraction: f64) -> Result<HessianInverse> {
        if self.n_samples == 0 {
            return Err(Error::ZeroSamples);
        }
        let d = self.d_in();
        let mean_diag = (0..d).map(|i| self.h.get(i, i)).sum::<f64>() / d as f64;
        let damping = damping_fraction * mean_diag;
        self.damping_applied = damping;
        let inverse = Cholesky::factor(&self.h, damping)?.inverse();
        let diag: Vec<f64> = (0..d).map(|i| inverse.get(i, i)).collect();
        Ok(HessianInverse {
            matrix: inverse,
            diag,
            damping,
        })
    }
}

/// `(H + δI)⁻¹` with its diagonal pulled out for the salience formula.
#[derive(Debug, Clone)]
pub struct HessianInverse {
    pub matrix: Matrix,
    pub diag: Vec<f64>,
    pub damping: f64,
}

/// Second-order salience: `v_ij = w_ij² / hinv_diag[j]²`.
pub fn compute_v(w: &Matrix, hinv_diag: &[f64]) -> Result<Matrix> {
    if hinv_diag.len() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "inverse diagonal has {} entries, weights have {} columns",
            hinv_diag.len(),
            w.cols()
        )));
    }
    for (j, &d) in hinv_diag.iter().enumerate() {
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NonPositiveDiagonal { index: j, value: d });
        }
    }
    let mut v = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let wr = w.row(i);
        let vr = v.row_mut(i);
        for j in 0..wr.len() {
            vr[j] = (wr[j] * wr[j]) / (hinv_diag[j] * hinv_diag[j]);
        }
    }
    Ok(v)
}

#[inline]
fn channel_range(lo: f64, hi: f64) -> f64 {
    hi - lo
}

/// Post-binarization activation-range salience.
///
/// `binarize(i, j, w_ij)` supplies the 1-bit value the element would take.
/// Flipping element (i, j) only moves output channel i, so the perturbed
/// column is the baseline plus `(ŵ_ij − w_ij)·X_:,j` — an exact rank-1
/// update, never a full matmul per element.
pub fn compute_b<F>(w: &Matrix, x: &Matrix, binarize: F, range_mode: RangeMode) -> Result<Matrix>
where
    F: Fn(usize, usize, f64) -> f64 + Sync,
{
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch(format!(
            "activations have {} columns, weights have {}",
            x.cols(),
            w.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::DimensionMismatch(
            "activation matrix has no rows".into(),
        ));
    }
    let n = x.rows();
    let d_out = w.rows();
    let d_in = w.cols();
    let y = x.matmul_nt(w); // N×d_out baseline
    let xt = x.transpose(); // d_in×N: contiguous columns for the update scan

    let mut b = Matrix::zeros(d_out, d_in);
    let rows: Vec<(usize, &mut [f64])> = {
        // split B into row slices so rows can be filled independently
        let mut rows = Vec::with_capacity(d_out);
        let mut rest = b.data_mut();
        for i in 0..d_out {
            let (head, tail) = rest.split_at_mut(d_in);
            rows.push((i, head));
            rest = tail;
        }
        rows
    };

    rows.into_par_iter().for_each(|(i, out_row)| {
        let mut y_col = vec![0.0f64; n];
        for (t, slot) in y_col.iter_mut().enumerate() {
            *slot = y.get(t, i);
        }
        for (j, out) in out_row.iter_mut().enumerate() {
            let w_ij = w.get(i, j);
            let delta = binarize(i, j, w_ij) - w_ij;
            let x_col = xt.row(j);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            match range_mode {
                RangeMode::Raw => {
                    for t in 0..n {
                        let v = y_col[t] + delta * x_col[t];
                        if v < lo {
                            lo = v;
                        }
                        if v > hi {
                            hi = v;
                        }
                    }
                }
                RangeMode::Absolute => {
                    for t in 0..n {
                        let v = (y_col[t] + delta * x_col[t]).abs();
                        if v < lo {
                            lo = v;
                        }
                        if v > hi {
                            hi = v;
                        }
                    }
                }
            }
            *out = channel_range(lo, hi);
        }
    });
    Ok(b)
}

/// Combined metric `M = V + λ·B`, element-wise.
pub fn combine_pbar(v: &Matrix, b: &Matrix, lambda: f64) -> Result<Matrix> {
    if v.rows() != b.rows() || v.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "V is {}x{}, B is {}x{}",
            v.rows(),
            v.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut m = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.data().len() {
        m.data_mut()[i] = v.data()[i] + lambda * b.data()[i];
    }
    Ok(m)
}

/// Combined salience for one layer, retained for inspection/export.
#[derive(Debug, Clone)]
pub struct SalienceMaps {
    pub v: Matrix,
    pub b: Matrix,
    pub m: Matrix,
    pub lambda_used: f64,
}

/// The salient/binarized split chosen for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMask {
    /// Row-major, true = salient.
    pub mask: Vec<bool>,
    pub ratio_requested: f64,
    pub count_selected: usize,
}

/// Pick the `round(ratio·total)` largest entries of M layer-wide. Ties break
/// toward the smaller (row, column) index so selection is deterministic.
pub fn select_salient(m: &Matrix, ratio: f64) -> SalienceMask {
    assert!(
        (0.0..=1.0).contains(&ratio),
        "salient ratio {ratio} outside [0, 1]"
    );
    let total = m.data().len();
    let count = ((ratio * total as f64).round() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_unstable_by(|&a, &b| {
        m.data()[b]
            .total_cmp(&m.data()[a])
            .then_with(|| a.cmp(&b))
    });
    let mut mask = vec![false; total];
    for &idx in order.iter().take(count) {
        mask[idx] = true;
    }
    SalienceMask {
        mask,
        ratio_requested: ratio,
        count_selected: count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn hessian_identity_batch() {
        let mut state = HessianState::new(3);
        let eye = Matrix::identity(3);
        state.accumulate(&eye).unwrap();
        let expect = [
            2.0, 0.0, 0.0, //
            0.0, 2.0, 0.0, //
            0.0, 0.0, 2.0,
        ];
        assert_eq!(state.matrix().data(), &expect);
        assert_eq!(state.n_samples(), 3);
    }

    #[test]
    fn hessian_hand_product() {
        let mut state = HessianState::new(2);
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        state.accumulate(&x).unwrap();
        assert_eq!(state.matrix().data(), &[20.0, 28.0, 28.0, 40.0]);
    }

    #[test]
    fn hessian_additive_over_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = rand_matrix(&mut rng, 4, 3);
        let x2 = rand_matrix(&mut rng, 2, 3);
        let mut split = HessianState::new(3);
        split.accumulate(&x1).unwrap();
        split.accumulate(&x2).unwrap();

        let mut concat_data = x1.data().to_vec();
        concat_data.extend_from_slice(x2.data());
        let concat = Matrix::from_vec(6, 3, concat_data);
        let mut whole = HessianState::new(3);
        whole.accumulate(&concat).unwrap();

        let denom = whole.matrix().frobenius_norm();
        assert!(split.matrix().max_abs_diff(whole.matrix()) / denom < 1e-12);
        assert_eq!(split.n_samples(), whole.n_samples());
    }

    #[test]
    fn inverse_of_scaled_identity() {
        let mut state = HessianState::new(3);
        state.accumulate(&Matrix::identity(3)).unwrap();
        let inv = state.invert(0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((inv.matrix.get(i, j) - want).abs() < 1e-12);
            }
        }
        for d in &inv.diag {
            assert!((d - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_2x2_closed_form() {
        let mut state = HessianState::new(2);
        state
            .accumulate(&Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        // H = [[20,28],[28,40]], det 16 → inverse [[2.5,−1.75],[−1.75,1.25]]
        let inv = state.invert(0.0).unwrap();
        let expect = [2.5, -1.75, -1.75, 1.25];
        for (got, want) in inv.matrix.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        // residual check: ‖H·inv − I‖_max
        let prod = state.matrix().matmul_nt(&inv.matrix.transpose());
        assert!(prod.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn rank_deficient_needs_damping() {
        let mut state = HessianState::new(2);
        // single row → rank-1 Hessian
        state
            .accumulate(&Matrix::from_vec(1, 2, vec![1.0, 2.0]))
            .unwrap();
        assert!(matches!(
            state.invert(0.0).unwrap_err(),
            Error::NotPositiveDefinite { .. }
        ));
        assert!(state.invert(0.01).is_ok());
    }

    #[test]
    fn zero_samples_rejected() {
        let mut state = HessianState::new(2);
        assert!(matches!(state.invert(0.01).unwrap_err(), Error::ZeroSamples));
    }

    #[test]
    fn v_scalar_and_zero_cases() {
        let w = Matrix::from_vec(1, 1, vec![2.0]);
        let v = compute_v(&w, &[0.5]).unwrap();
        assert_eq!(v.data(), &[16.0]);

        let w = Matrix::zeros(2, 3);
        let v = compute_v(&w, &[1.0, 2.0, 3.0]).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));

        assert!(matches!(
            compute_v(&w, &[1.0, 0.0, 3.0]).unwrap_err(),
            Error::NonPositiveDiagonal { index: 1, .. }
        ));
    }

    #[test]
    fn v_homogeneous_in_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_matrix(&mut rng, 3, 4);
        let diag: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..2.0)).collect();
        let scaled: Vec<f64> = diag.iter().map(|d| d * 3.0).collect();
        let v1 = compute_v(&w, &diag).unwrap();
        let v2 = compute_v(&w, &scaled).unwrap();
        for (a, b) in v1.data().iter().zip(v2.data()) {
            assert!((a / 9.0 - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    /// Naive reference: rebuild the full output matrix for every (i, j).
    fn naive_b<F>(w: &Matrix, x: &Matrix, binarize: F, mode: RangeMode) -> Matrix
    where
        F: Fn(usize, usize, f64) -> f64,
    {
        let mut b = Matrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let mut wq = w.clone();
                wq.set(i, j, binarize(i, j, w.get(i, j)));
                let y = x.matmul_nt(&wq);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for t in 0..x.rows() {
                    let v = match mode {
                        RangeMode::Raw => y.get(t, i),
                        RangeMode::Absolute => y.get(t, i).abs(),
                    };
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                b.set(i, j, hi - lo);
            }
        }
        b
    }

    #[test]
    fn b_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let d_out = rng.gen_range(1..=4);
            let d_in = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=5);
            let w = rand_matrix(&mut rng, d_out, d_in);
            let x = rand_matrix(&mut rng, n, d_in);
            let bin = |_i: usize, _j: usize, w: f64| if w > 0.0 { 0.8 } else { -0.8 };
            for mode in [RangeMode::Raw, RangeMode::Absolute] {
                let fast = compute_b(&w, &x, bin, mode).unwrap();
                let slow = naive_b(&w, &x, bin, mode);
                assert!(fast.max_abs_diff(&slow) < 1e-9);
            }
        }
    }

    #[test]
    fn b_zero_perturbation_gives_baseline_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = rand_matrix(&mut rng, 3, 3);
        let x = rand_matrix(&mut rng, 6, 3);
        let b = compute_b(&w, &x, |_, _, w| w, RangeMode::Raw).unwrap();
        let y = x.matmul_nt(&w);
        for i in 0..3 {
            let col: Vec<f64> = (0..6).map(|t| y.get(t, i)).collect();
            let range = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - col.iter().cloned().fold(f64::INFINITY, f64::min);
            for j in 0..3 {
                assert!((b.get(i, j) - range).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn b_single_token_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = rand_matrix(&mut rng, 2, 3);
        let x = rand_matrix(&mut rng, 1, 3);
        let b = compute_b(&w, &x, |_, _, w| if w > 0.0 { 1.0 } else { -1.0 }, RangeMode::Raw)
            .unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pbar_combination() {
        let v = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Matrix::from_vec(1, 2, vec![1000.0, 0.0]);
        let m = combine_pbar(&v, &b, 1e-3).unwrap();
        assert_eq!(m.data(), &[2.0, 2.0]);

        // λ = 0 leaves V untouched
        let m0 = combine_pbar(&v, &b, 0.0).unwrap();
        assert_eq!(m0.data(), v.data());

        let bad = Matrix::zeros(2, 2);
        assert!(matches!(
            combine_pbar(&v, &bad, 0.1).unwrap_err(),
            Error::DimensionMismatch(_)
        ));
    }

    #[test]
    fn selection_orders_and_counts() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 1.0, 2.0, 4.0]);
        let sel = select_salient(&m, 0.5);
        assert_eq!(sel.count_selected, 2);
        assert_eq!(sel.mask, vec![true, false, false, true]);

        let all = select_salient(&m, 1.0);
        assert!(all.mask.iter().all(|&b| b));

        // all-equal M: tie-break picks the smallest flat index
        let flat = Matrix::from_vec(2, 2, vec![7.0; 4]);
        let sel = select_salient(&flat, 0.25);
        assert_eq!(sel.count_selected, 1);
        assert_eq!(sel.mask, vec![true, false, false, false]);
    }

    #[test]
    fn selection_count_exact_for_named_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let m = rand_matrix(&mut rng, 5, 7);
        for &ratio in &[0.0, 0.2, 0.5, 1.0] {
            let sel = select_salient(&m, ratio);
            assert_eq!(sel.count_selected, (ratio * 35.0).round() as usize);
            assert_eq!(sel.mask.iter().filter(|&&b| b).count(), sel.count_selected);
        }
    }
}
