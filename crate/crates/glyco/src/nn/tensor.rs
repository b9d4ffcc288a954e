//! Minimal dense tensor used by the network: row-major f64 storage with
//! an explicit shape. Only the rank-1/rank-2 operations the model needs.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// y = W x for a 2-D weight and 1-D input.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(cols, x.len(), "matvec shape mismatch");
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            y[r] = acc;
        }
        y
    }

    /// y = W^T x: accumulate columns weighted by x.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(rows, x.len(), "matvec_transpose shape mismatch");
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let xv = x[r];
            if xv != 0.0 {
                for (yv, w) in y.iter_mut().zip(row) {
                    *yv += w * xv;
                }
            }
        }
        y
    }

    /// self += a b^T (outer product accumulation for weight gradients).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(rows, a.len());
        assert_eq!(cols, b.len());
        for r in 0..rows {
            let av = a[r];
            if av != 0.0 {
                let row = &mut self.data[r * cols..(r + 1) * cols];
                for (w, bv) in row.iter_mut().zip(b) {
                    *w += av * bv;
                }
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
