//! Dense row-major arrays and the row reductions the layer metrics are built
//! from. All sums accumulate in `f64`.

use crate::error::{Error, Result};

/// Rank-N array of finite `f64` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = element_count(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("element count overflows for dims {dims:?}")))
    })
}

/// Per-token view of a `[B, S, D]` tensor: `B*S` rows of width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &TokenMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Restores the `[B, S, D]` tensor this matrix was flattened from.
    pub fn unflatten(&self, batch: usize, seq: usize) -> Result<TensorF> {
        if batch * seq != self.rows {
            return Err(Error::Shape(format!(
                "cannot split {} rows into {batch}x{seq}",
                self.rows
            )));
        }
        TensorF::new(vec![batch, seq, self.cols], self.data.clone())
    }
}

/// Flattens `[B, S, D]` into `B*S` token rows; row `j` is `h[j / S, j % S, :]`.
pub fn flatten_tokens(h: &TensorF) -> Result<TokenMatrix> {
    match *h.dims() {
        [b, s, d] => Ok(TokenMatrix {
            rows: b * s,
            cols: d,
            data: h.data().to_vec(),
        }),
        _ => Err(Error::Shape(format!(
            "flatten_tokens expects 3 dims, got {:?}",
            h.dims()
        ))),
    }
}

fn check_row(a: &TokenMatrix, j: usize) -> Result<()> {
    if j >= a.rows {
        return Err(Error::Shape(format!(
            "row {j} out of range for {} rows",
            a.rows
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn row_dot(a: &TokenMatrix, b: &TokenMatrix, j: usize) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "row_dot on {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    check_row(a, j)?;
    Ok(dot(a.row(j), b.row(j)))
}

pub fn row_l2norm(a: &TokenMatrix, j: usize) -> Result<f64> {
    check_row(a, j)?;
    let r = a.row(j);
    Ok(dot(r, r).sqrt())
}
