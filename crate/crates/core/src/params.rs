//! Uniform view over trainable tensors, shared by the optimizer, the
//! checkpoint writer and the gradient checks.

/// Read-only view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Whether the L2 penalty applies (weights yes, biases no).
    pub decay: bool,
}

/// Mutable view of one named tensor.
pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub decay: bool,
}

/// A fixed collection of named tensors. `tensors` and `tensors_mut` must
/// enumerate the same tensors in the same order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    /// Same shapes, every entry zero.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`Parameters::flatten`]. Panics if `flat` has the wrong length.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values(), "flat parameter length mismatch");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Same tensor names and lengths.
    fn same_layout(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.name == y.name && x.data.len() == y.data.len())
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}
