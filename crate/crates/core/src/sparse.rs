//! Per-vector outlier detection and dense-and-sparse decomposition.
//!
//! Outliers are selected two-sided by order statistics: the largest
//! `⌈n_out/2⌉` and smallest `⌊n_out/2⌋` values of a vector leave the dense
//! path, and the min/max of the kept elements become that vector's
//! quantization thresholds. Key outlier residuals are stored in CSC (one new
//! column per appended token), Value residuals in CSR (one new row per
//! token), so appends only touch array tails. The sparse matvec partitions
//! nonzeros into fixed-size chunks for balanced work assignment.

use thiserror::Error;

/// Nonzeros per work chunk in the balanced kernels.
pub const DEFAULT_CHUNK: usize = 10;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("outlier fraction {0} outside [0, 0.5)")]
    BadFraction(f32),
    #[error("outlier budget {n_out} would consume the whole vector (d = {d})")]
    BudgetTooLarge { n_out: usize, d: usize },
    #[error("empty vector")]
    EmptyVector,
    #[error("channel {channel} out of range (d = {d})")]
    ChannelOutOfRange { channel: usize, d: usize },
    #[error("append entries must have strictly ascending indices")]
    UnsortedEntries,
    #[error("dense operand has length {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
}

/// Result of splitting one vector: which indices leave the dense path, and
/// the kept range `[lo, hi]` that becomes the quantization thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSplit {
    pub outlier_indices: Vec<usize>,
    pub lo: f32,
    pub hi: f32,
}

/// Number of outliers for a vector of length `d` at fraction `f`
/// (round half up).
pub fn outlier_count(f: f32, d: usize) -> usize {
    (f as f64 * d as f64).round() as usize
}

/// Two-sided order-statistic outlier split.
///
/// The `⌈n_out/2⌉` largest and `⌊n_out/2⌋` smallest elements are outliers;
/// value ties break toward the lower index. `lo`/`hi` are the min/max over
/// kept elements.
pub fn vector_outlier_split(v: &[f32], f: f32) -> Result<OutlierSplit, SparseError> {
    if v.is_empty() {
        return Err(SparseError::EmptyVector);
    }
    if !(0.0..0.5).contains(&f) {
        return Err(SparseError::BadFraction(f));
    }
    let d = v.len();
    let n_out = outlier_count(f, d);
    if n_out >= d {
        return Err(SparseError::BudgetTooLarge { n_out, d });
    }
    let n_upper = n_out.div_ceil(2);
    let n_lower = n_out / 2;

    let mut outliers = Vec::with_capacity(n_out);
    let mut taken = vec![false; d];
    if n_upper > 0 {
        let mut by_desc: Vec<usize> = (0..d).collect();
        by_desc.sort_by(|&a, &b| {
            v[b].partial_cmp(&v[a])
                .expect("finite activations")
                .then(a.cmp(&b))
        });
        for &i in by_desc.iter().take(n_upper) {
            taken[i] = true;
            outliers.push(i);
        }
    }
    if n_lower > 0 {
        let mut by_asc: Vec<usize> = (0..d).collect();
        by_asc.sort_by(|&a, &b| {
            v[a].partial_cmp(&v[b])
                .expect("finite activations")
                .then(a.cmp(&b))
        });
        let mut remaining = n_lower;
        for &i in &by_asc {
            if remaining == 0 {
                break;
            }
            if !taken[i] {
                taken[i] = true;
                outliers.push(i);
                remaining -= 1;
            }
        }
    }
    outliers.sort_unstable();

    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if !taken[i] {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    Ok(OutlierSplit {
        outlier_indices: outliers,
        lo,
        hi,
    })
}

/// Compressed sparse column matrix over channels x tokens; appending a token
/// appends one column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCSC {
    n_rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f32>,
}

impl SparseCSC {
    pub fn new(n_rows: usize) -> Self {
        Self {
            n_rows,
            col_ptr: vec![0],
            row_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn vals(&self) -> &[f32] {
        &self.vals
    }

    /// Nonzeros of column `c` as `(row, value)` pairs.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        self.row_idx[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&r, &v)| (r, v))
    }

    /// Appends one token column. `entries` are `(channel, residual)` with
    /// strictly ascending channels.
    pub fn append_token(&mut self, entries: &[(usize, f32)]) -> Result<(), SparseError> {
        validate_entries(entries, self.n_rows)?;
        for &(channel, residual) in entries {
            self.row_idx.push(channel);
            self.vals.push(residual);
        }
        self.col_ptr.push(self.vals.len());
        Ok(())
    }

    /// Balanced sparse matvec: `y[t] = Σ_{nz in column t} val * x[row]`,
    /// evaluated in fixed-size nonzero chunks with per-chunk partial sums
    /// merged in chunk order.
    pub fn balanced_spmv(&self, x: &[f32]) -> Result<Vec<f32>, SparseError> {
        self.balanced_spmv_chunked(x, DEFAULT_CHUNK)
    }

    pub fn balanced_spmv_chunked(&self, x: &[f32], chunk: usize) -> Result<Vec<f32>, SparseError> {
        if x.len() != self.n_rows {
            return Err(SparseError::DimMismatch {
                expected: self.n_rows,
                found: x.len(),
            });
        }
        let chunk = chunk.max(1);
        let mut y = vec![0.0f64; self.n_cols()];
        let nnz = self.nnz();
        let mut start = 0usize;
        while start < nnz {
            let end = (start + chunk).min(nnz);
            // column containing the chunk's first nonzero
            let mut col = self.col_ptr.partition_point(|&p| p <= start) - 1;
            let mut partial = 0.0f64;
            for i in start..end {
                while i >= self.col_ptr[col + 1] {
                    y[col] += partial;
                    partial = 0.0;
                    col += 1;
                }
                partial += self.vals[i] as f64 * x[self.row_idx[i]] as f64;
            }
            y[col] += partial;
            start = end;
        }
        Ok(y.into_iter().map(|v| v as f32).collect())
    }
}

/// Compressed sparse row matrix over tokens x channels; appending a token
/// appends one row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCSR {
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f32>,
}

impl SparseCSR {
    pub fn new(n_cols: usize) -> Self {
        Self {
            n_cols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn vals(&self) -> &[f32] {
        &self.vals
    }

    /// Nonzeros of row `r` as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// Appends one token row. `entries` are `(channel, residual)` with
    /// strictly ascending channels.
    pub fn append_token(&mut self, entries: &[(usize, f32)]) -> Result<(), SparseError> {
        validate_entries(entries, self.n_cols)?;
        for &(channel, residual) in entries {
            self.col_idx.push(channel);
            self.vals.push(residual);
        }
        self.row_ptr.push(self.vals.len());
        Ok(())
    }

    /// Balanced sparse product with an attention-weight vector over tokens:
    /// `out[c] = Σ_t w[t] * vals[t, c]`, chunked over nonzeros.
    pub fn balanced_spmv(&self, w: &[f32]) -> Result<Vec<f32>, SparseError> {
        self.balanced_spmv_chunked(w, DEFAULT_CHUNK)
    }

    pub fn balanced_spmv_chunked(&self, w: &[f32], chunk: usize) -> Result<Vec<f32>, SparseError> {
        if w.len() != self.n_rows() {
            return Err(SparseError::DimMismatch {
                expected: self.n_rows(),
                found: w.len(),
            });
        }
        let chunk = chunk.max(1);
        let mut out = vec![0.0f64; self.n_cols];
        let nnz = self.nnz();
        let mut start = 0usize;
        while start < nnz {
            let end = (start + chunk).min(nnz);
            let mut row = self.row_ptr.partition_point(|&p| p <= start) - 1;
            for i in start..end {
                while i >= self.row_ptr[row + 1] {
                    row += 1;
                }
                out[self.col_idx[i]] += w[row] as f64 * self.vals[i] as f64;
            }
            start = end;
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }
}

fn validate_entries(entries: &[(usize, f32)], d: usize) -> Result<(), SparseError> {
    let mut prev: Option<usize> = None;
    for &(channel, _) in entries {
        if channel >= d {
            return Err(SparseError::ChannelOutOfRange { channel, d });
        }
        if let Some(p) = prev {
            if channel <= p {
                return Err(SparseError::UnsortedEntries);
            }
        }
        prev = Some(channel);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_zero_fraction() {
        let v = [0.3f32, -0.7, 1.2, 0.0];
        let s = vector_outlier_split(&v, 0.0).unwrap();
        assert!(s.outlier_indices.is_empty());
        assert_eq!(s.lo, -0.7);
        assert_eq!(s.hi, 1.2);
    }

    #[test]
    fn split_two_sided_hand_case() {
        let v = [0.1f32, -0.2, 9.0, 0.3, -8.0, 0.05, 0.15, -0.1];
        let s = vector_outlier_split(&v, 0.25).unwrap();
        assert_eq!(s.outlier_indices, vec![2, 4]);
        assert_eq!(s.lo, -0.2);
        assert_eq!(s.hi, 0.3);
    }

    #[test]
    fn split_all_equal_tie_break() {
        let v = [1.0f32; 8];
        let s = vector_outlier_split(&v, 0.25).unwrap();
        assert_eq!(s.outlier_indices, vec![0, 1]);
        assert_eq!(s.lo, 1.0);
        assert_eq!(s.hi, 1.0);
    }

    #[test]
    fn split_counts_and_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d = rng.gen_range(4usize..64);
            let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
            let f = rng.gen_range(0.0f32..0.4);
            let s = vector_outlier_split(&v, f).unwrap();
            assert_eq!(s.outlier_indices.len(), outlier_count(f, d));
            // kept + outliers == d, and kept elements lie within [lo, hi]
            for (i, &x) in v.iter().enumerate() {
                if !s.outlier_indices.contains(&i) {
                    assert!(x >= s.lo && x <= s.hi);
                }
            }
            // anything strictly outside [lo, hi] must be an outlier
            for (i, &x) in v.iter().enumerate() {
                if x > s.hi || x < s.lo {
                    assert!(s.outlier_indices.contains(&i));
                }
            }
        }
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(matches!(
            vector_outlier_split(&[1.0], 0.5),
            Err(SparseError::BadFraction(_))
        ));
        assert!(matches!(
            vector_outlier_split(&[1.0], -0.1),
            Err(SparseError::BadFraction(_))
        ));
        // f = 0.49 on d = 2 gives n_out = 1 < 2, allowed; d = 1 rounds to 0
        assert!(vector_outlier_split(&[1.0, 2.0], 0.49).is_ok());
        assert!(vector_outlier_split(&[1.0], 0.4).is_ok());
        assert!(matches!(
            vector_outlier_split(&[], 0.1),
            Err(SparseError::EmptyVector)
        ));
    }

    #[test]
    fn csc_append_sequence() {
        let mut s = SparseCSC::new(8);
        s.append_token(&[(3, 0.5)]).unwrap();
        assert_eq!(s.col_ptr(), &[0, 1]);
        assert_eq!(s.row_idx(), &[3]);
        assert_eq!(s.vals(), &[0.5]);

        s.append_token(&[]).unwrap();
        assert_eq!(s.col_ptr(), &[0, 1, 1]);

        s.append_token(&[(0, -1.0), (7, 2.0)]).unwrap();
        assert_eq!(s.col_ptr(), &[0, 1, 1, 3]);
        assert_eq!(s.row_idx(), &[3, 0, 7]);
        assert_eq!(s.vals(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn csr_append_sequence() {
        let mut s = SparseCSR::new(4);
        s.append_token(&[(1, 0.25)]).unwrap();
        assert_eq!(s.row_ptr(), &[0, 1]);
        s.append_token(&[]).unwrap();
        assert_eq!(s.row_ptr(), &[0, 1, 1]);
        s.append_token(&[(0, 1.0), (3, -0.5)]).unwrap();
        assert_eq!(s.row_ptr(), &[0, 1, 1, 3]);
        assert_eq!(s.col_idx(), &[1, 0, 3]);
    }

    #[test]
    fn append_rejects_bad_entries() {
        let mut s = SparseCSC::new(4);
        assert!(matches!(
            s.append_token(&[(4, 1.0)]),
            Err(SparseError::ChannelOutOfRange { channel: 4, d: 4 })
        ));
        assert!(matches!(
            s.append_token(&[(2, 1.0), (2, 1.0)]),
            Err(SparseError::UnsortedEntries)
        ));
        assert!(matches!(
            s.append_token(&[(3, 1.0), (1, 1.0)]),
            Err(SparseError::UnsortedEntries)
        ));
        // failed appends must not modify the matrix
        assert_eq!(s.col_ptr(), &[0]);
        assert_eq!(s.nnz(), 0);
    }

    #[test]
    fn append_only_prefix_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = SparseCSR::new(16);
        let mut snapshot = s.clone();
        for step in 0..30 {
            let mut channels: Vec<usize> = (0..16).filter(|_| rng.gen_bool(0.2)).collect();
            channels.dedup();
            let entries: Vec<(usize, f32)> = channels
                .into_iter()
                .map(|c| (c, rng.gen_range(-1.0..1.0)))
                .collect();
            s.append_token(&entries).unwrap();
            if step == 14 {
                snapshot = s.clone();
            }
        }
        assert_eq!(&s.row_ptr()[..snapshot.row_ptr().len()], snapshot.row_ptr());
        assert_eq!(&s.col_idx()[..snapshot.col_idx().len()], snapshot.col_idx());
        assert_eq!(&s.vals()[..snapshot.vals().len()], snapshot.vals());
    }

    fn naive_csc(s: &SparseCSC, x: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0f64; s.n_cols()];
        for t in 0..s.n_cols() {
            for (r, v) in s.col(t) {
                y[t] += v as f64 * x[r] as f64;
            }
        }
        y.into_iter().map(|v| v as f32).collect()
    }

    fn naive_csr(s: &SparseCSR, w: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f64; s.n_cols()];
        for t in 0..s.n_rows() {
            for (c, v) in s.row(t) {
                out[c] += w[t] as f64 * v as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    #[test]
    fn csc_spmv_empty_and_hand_case() {
        let s = SparseCSC::new(8);
        assert_eq!(s.balanced_spmv(&[0.0; 8]).unwrap(), Vec::<f32>::new());

        let mut s = SparseCSC::new(8);
        s.append_token(&[(3, 0.5)]).unwrap();
        s.append_token(&[]).unwrap();
        s.append_token(&[(0, -1.0), (7, 2.0)]).unwrap();
        let mut x = vec![0.0f32; 8];
        x[3] = 1.0;
        assert_eq!(s.balanced_spmv(&x).unwrap(), vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn csr_spmv_hand_case() {
        let mut s = SparseCSR::new(4);
        s.append_token(&[(1, 0.25)]).unwrap();
        let out = s.balanced_spmv(&[2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn csr_spmv_skewed_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 48;
        let mut s = SparseCSR::new(d);
        // skew most nonzeros into a few channels
        for _ in 0..80 {
            let mut channels: Vec<usize> = (0..rng.gen_range(0usize..6))
                .map(|_| if rng.gen_bool(0.7) { 5 } else { rng.gen_range(0..d) })
                .collect();
            channels.sort_unstable();
            channels.dedup();
            let entries: Vec<(usize, f32)> = channels
                .into_iter()
                .map(|c| (c, rng.gen_range(-3.0..3.0)))
                .collect();
            s.append_token(&entries).unwrap();
        }
        let w: Vec<f32> = (0..80).map(|_| rng.gen_range(0.0..1.0)).collect();
        let err = rel_err(&s.balanced_spmv(&w).unwrap(), &naive_csr(&s, &w));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn csc_spmv_skewed_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 64;
        let mut s = SparseCSC::new(d);
        // skew most nonzeros into one column
        for t in 0..40 {
            let count = if t == 17 { 250 } else { rng.gen_range(0usize..4) };
            let mut channels: Vec<usize> = (0..count.min(d)).map(|_| rng.gen_range(0..d)).collect();
            channels.sort_unstable();
            channels.dedup();
            let entries: Vec<(usize, f32)> = channels
                .into_iter()
                .map(|c| (c, rng.gen_range(-3.0..3.0)))
                .collect();
            s.append_token(&entries).unwrap();
        }
        let x: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = rel_err(&s.balanced_spmv(&x).unwrap(), &naive_csc(&s, &x));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn spmv_chunk_size_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 32;
        let mut csc = SparseCSC::new(d);
        let mut csr = SparseCSR::new(d);
        for _ in 0..60 {
            let mut channels: Vec<usize> =
                (0..rng.gen_range(0usize..8)).map(|_| rng.gen_range(0..d)).collect();
            channels.sort_unstable();
            channels.dedup();
            let entries: Vec<(usize, f32)> = channels
                .iter()
                .map(|&c| (c, rng.gen_range(-2.0..2.0)))
                .collect();
            csc.append_token(&entries).unwrap();
            csr.append_token(&entries).unwrap();
        }
        let x: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y10 = csc.balanced_spmv_chunked(&x, 10).unwrap();
        let o10 = csr.balanced_spmv_chunked(&w, 10).unwrap();
        for &chunk in &[1usize, 3, 64] {
            assert!(rel_err(&csc.balanced_spmv_chunked(&x, chunk).unwrap(), &y10) < 1e-6);
            assert!(rel_err(&csr.balanced_spmv_chunked(&w, chunk).unwrap(), &o10) < 1e-6);
        }
    }

    #[test]
    fn spmv_rejects_dim_mismatch() {
        let s = SparseCSC::new(8);
        assert!(matches!(
            s.balanced_spmv(&[0.0; 7]),
            Err(SparseError::DimMismatch { expected: 8, found: 7 })
        ));
        let mut r = SparseCSR::new(4);
        r.append_token(&[]).unwrap();
        assert!(matches!(
            r.balanced_spmv(&[0.0, 0.0]),
            Err(SparseError::DimMismatch { expected: 1, found: 2 })
        ));
    }
}
