//! Dense kernels shared by the primitive forward and backward passes.

/// Row-major operand of a matrix product, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after the optional transpose.
    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Row and column strides of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `m × n`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides describe in-bounds views of the borrowed slices,
    // whose lengths were checked against the logical shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column means and population standard deviations of a `rows × cols` matrix.
///
/// Both reductions go through [`exact_column_sums`], so the result does not
/// depend on the row order of `x`.
pub(crate) fn column_moments(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let inv = 1.0 / rows as f64;
    let mean: Vec<f64> = exact_column_sums(x, cols).into_iter().map(|s| s * inv).collect();
    let sq: Vec<f64> = x
        .chunks_exact(cols)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
        .collect();
    let std = exact_column_sums(&sq, cols).into_iter().map(|s| (s * inv).sqrt()).collect();
    (mean, std)
}

/// Per-column sums that are invariant under row permutations.
///
/// Every entry is truncated once onto a fixed-point grid scaled to the
/// column's largest magnitude (2⁶² at the top, about 2e-19 relative
/// resolution) and accumulated exactly in `i128`; only the final conversion
/// rounds again.
pub(crate) fn exact_column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut peak = vec![0.0f64; cols];
    for row in x.chunks_exact(cols) {
        for (p, v) in peak.iter_mut().zip(row) {
            *p = p.max(v.abs());
        }
    }
    let scale: Vec<f64> = peak
        .iter()
        .map(|&p| if p > 0.0 { 2f64.powi(62 - (p.log2().floor() as i32 + 1)) } else { 1.0 })
        .collect();
    let mut acc = vec![0i128; cols];
    for row in x.chunks_exact(cols) {
        for ((a, v), s) in acc.iter_mut().zip(row).zip(&scale) {
            *a += (v * s) as i64 as i128;
        }
    }
    acc.iter().zip(&scale).map(|(&a, s)| a as f64 / s).collect()
}

/// Column moments with plain floating-point accumulation.
pub(crate) fn fast_column_moments(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let inv = 1.0 / rows as f64;
    let mean: Vec<f64> = column_sums(x, cols).into_iter().map(|s| s * inv).collect();
    let mut var = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s * inv).sqrt()).collect())
}

pub(crate) fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Pairwise summation keeps reduction error logarithmic in the length.
pub(crate) fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        x.iter().sum()
    } else {
        let mid = x.len() / 2;
        pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
    }
}
