//! Dense row-major `f64` tensors and named tensor collections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching row-major data.
    ///
    /// Panics if `data.len()` does not equal the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, treating a rank-0/1 tensor as a column.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(
            self.data.len(),
            other.data.len(),
            "shape mismatch in accumulation"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at row `r`, column `c` of a rank-2 view.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Matrix product of two rank-2 views.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "inner dimension mismatch {k} vs {k2}");
        Tensor::matrix(m, n, matmul(&self.data, &other.data, m, k, n))
    }
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]` → `[k,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m,n] · b[k,n]ᵀ` → `[m,k]`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// An ordered collection of named tensors. Used both for model parameters
/// and for the gradients flowing back to them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMap(BTreeMap<String, Tensor>);

/// Gradients keyed by parameter name, same shapes as the parameters.
pub type Gradients = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    /// Panicking accessor for names the caller created itself.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Adds `other` entry-wise, inserting names not yet present.
    pub fn accumulate(&mut self, other: &TensorMap) {
        for (k, v) in &other.0 {
            match self.0.get_mut(k) {
                Some(t) => t.add_assign(v),
                None => {
                    self.0.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.scale(factor);
        }
    }

    /// Global Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> TensorMap {
        TensorMap(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        )
    }

    /// First name whose tensor holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.0
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        TensorMap(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let at = a.transposed();
        let tn = matmul_tn(at.data(), b.data(), 3, 2, 2);
        assert_eq!(tn, ab.data());
        let bt = b.transposed();
        let nt = matmul_nt(a.data(), bt.data(), 2, 3, 2);
        assert_eq!(nt, ab.data());
    }

    #[test]
    fn accumulate_inserts_and_adds() {
        let mut m = TensorMap::new();
        m.insert("a", Tensor::scalar(1.0));
        let mut n = TensorMap::new();
        n.insert("a", Tensor::scalar(2.0));
        n.insert("b", Tensor::scalar(5.0));
        m.accumulate(&n);
        assert_eq!(m.expect("a").data(), &[3.0]);
        assert_eq!(m.expect("b").data(), &[5.0]);
        assert!((m.norm() - (9.0f64 + 25.0).sqrt()).abs() < 1e-15);
    }
}
