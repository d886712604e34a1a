//! Row-major matrix kernels shared by the forward, backward and decode paths.

/// Row-major `rows x cols` matrix. As a weight it maps a row vector of width
/// `rows` to one of width `cols` (`y = x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `y = x W` for a single row vector.
#[cfg(test)]
pub(crate) fn vecmat(x: &[f64], w: &Mat, y: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    y.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (yo, wo) in y.iter_mut().zip(w.row(i)) {
            *yo += xi * wo;
        }
    }
}

/// `Y = X W` with `X` holding `n` rows. Each weight row is applied to every
/// input row before moving on; per output element the summation order is the
/// same as [`vecmat`].
pub(crate) fn matmul(x: &[f64], n: usize, w: &Mat) -> Vec<f64> {
    let (rows, cols) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), n * rows);
    let mut y = vec![0.0; n * cols];
    for i in 0..rows {
        let wr = w.row(i);
        for t in 0..n {
            let xi = x[t * rows + i];
            if xi == 0.0 {
                continue;
            }
            for (yo, wo) in y[t * cols..(t + 1) * cols].iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    }
    y
}

/// Backward of `Y = X W`: accumulates `X^T dY` into `dw`, returns `dY W^T`.
pub(crate) fn matmul_backward(x: &[f64], dy: &[f64], n: usize, w: &Mat, dw: &mut Mat) -> Vec<f64> {
    let (rows, cols) = (w.rows, w.cols);
    let mut dx = vec![0.0; n * rows];
    for t in 0..n {
        let xr = &x[t * rows..(t + 1) * rows];
        let dyr = &dy[t * cols..(t + 1) * cols];
        let dxr = &mut dx[t * rows..(t + 1) * rows];
        for i in 0..rows {
            let wr = w.row(i);
            let mut acc = 0.0;
            for (a, b) in wr.iter().zip(dyr) {
                acc += a * b;
            }
            dxr[i] = acc;
            let xi = xr[i];
            if xi != 0.0 {
                for (g, d) in dw.row_mut(i).iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
        }
    }
    dx
}

/// RMS-normalizes each of the `n` rows of `x` and scales by `gain`.
/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rmsnorm(x: &[f64], n: usize, gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for t in 0..n {
        let xr = &x[t * d..(t + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv[t] = r;
        for ((yo, xv), g) in y[t * d..(t + 1) * d].iter_mut().zip(xr).zip(gain) {
            *yo = xv * r * g;
        }
    }
    (y, inv)
}

pub(crate) fn rmsnorm_backward(
    x: &[f64],
    inv: &[f64],
    dy: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let n = inv.len();
    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        let r = inv[t];
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let mut proj = 0.0;
        for k in 0..d {
            dgain[k] += dyr[k] * xr[k] * r;
            proj += dyr[k] * gain[k] * xr[k];
        }
        let c = r * r * r * proj / d as f64;
        for k in 0..d {
            dx[t * d + k] = r * gain[k] * dyr[k] - xr[k] * c;
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(sum(exp(row)))`, shifted by the row max.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// In-place softmax over `row`.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
