//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// A dense row-major array of doubles with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    /// Compares dims and values. Gradient buffers are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Leading dimension, treated as the batch axis.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.dims[0]
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks batch items `indices` (along axis 0) into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Shape("cannot gather an empty index set".into()));
        }
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::Shape(format!(
                    "index {i} out of range for batch {}",
                    self.batch()
                )));
            }
            data.extend_from_slice(self.item(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor::new(&dims, data)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.dims, t.dims
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(&dims, data)
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Tensor::new(&self.dims, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Per-item L2 norms over all non-batch entries.
    pub fn item_norms(&self) -> Vec<f64> {
        (0..self.batch())
            .map(|b| self.item(b).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Smallest per-sample norm accepted by [`l2_normalize`].
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

/// Scales every batch item to unit L2 norm.
///
/// Fails with [`Error::DegenerateDirection`] naming the first item whose norm
/// is at most [`MIN_DIRECTION_NORM`].
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let mut out = v.clone();
    out.grad = None;
    for (b, norm) in v.item_norms().into_iter().enumerate() {
        if !(norm > MIN_DIRECTION_NORM) {
            return Err(Error::DegenerateDirection { sample: b, norm });
        }
        out.item_mut(b).iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn normalize_three_four_five() {
        let v = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let u = l2_normalize(&v).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15);
        assert!((u.data()[1] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&u).unwrap();
        for (a, b) in again.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_is_per_sample() {
        let v = Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        let u = l2_normalize(&v).unwrap();
        assert_eq!(u.data(), &[0.6, 0.8, 0.0, -1.0]);
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        let v = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        match l2_normalize(&v) {
            Err(Error::DegenerateDirection { sample, .. }) => assert_eq!(sample, 1),
            other => panic!("expected degenerate direction, got {other:?}"),
        }
    }

    #[test]
    fn gather_and_stack() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = t.gather(&[2, 0]).unwrap();
        assert_eq!(g.dims(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = Tensor::stack(&[g.clone(), g]).unwrap();
        assert_eq!(s.dims(), &[2, 2, 2]);
    }
}
