use crate::error::{contract, Result};

/// Dense row-major n-dimensional array of f64 values.
///
/// The scalar case is represented by an empty shape and a single element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor. Panics on non-scalars: that is a programming
    /// error, not a data error.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Interpret as a batch of rows: shape [rows, cols].
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(contract(format!("expected rank-2 tensor, got shape {s:?}"))),
        }
    }

    /// Interpret as an image batch: shape [batch, channels, height, width].
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(contract(format!("expected rank-4 tensor, got shape {s:?}"))),
        }
    }

    /// Interpret as a vector: shape [n].
    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            &[n] => Ok(n),
            s => Err(contract(format!("expected rank-1 tensor, got shape {s:?}"))),
        }
    }

    /// Gather whole rows of a rank >= 1 tensor (leading axis) into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(contract("gather_rows on a scalar".to_string()));
        }
        let row_len: usize = self.shape[1..].iter().product();
        let rows = self.shape[0];
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(contract(format!("row index {i} out of range 0..{rows}")));
            }
            out.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, out)
    }
}
