//! Not-a-knot cubic splines written as linear functionals of node values, and
//! their tensor products.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One axis: nodes plus the map from node values to second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineAxis {
    nodes: Vec<f64>,
    second: DMatrix<f64>,
}

impl SplineAxis {
    pub fn new(nodes: Vec<f64>) -> Result<SplineAxis> {
        let n = nodes.len();
        if n < 4 {
            return Err(Error::Invalid("a not-a-knot spline needs at least 4 nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("spline nodes must be strictly increasing".into()));
        }
        let h: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        // third derivative continuous across the second and the penultimate node
        a[(0, 0)] = -1.0 / h[0];
        a[(0, 1)] = 1.0 / h[0] + 1.0 / h[1];
        a[(0, 2)] = -1.0 / h[1];
        for i in 1..n - 1 {
            a[(i, i - 1)] = h[i - 1];
            a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
            a[(i, i + 1)] = h[i];
            b[(i, i - 1)] = 6.0 / h[i - 1];
            b[(i, i)] = -6.0 / h[i - 1] - 6.0 / h[i];
            b[(i, i + 1)] = 6.0 / h[i];
        }
        a[(n - 1, n - 3)] = -1.0 / h[n - 3];
        a[(n - 1, n - 2)] = 1.0 / h[n - 3] + 1.0 / h[n - 2];
        a[(n - 1, n - 1)] = -1.0 / h[n - 2];
        let second = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("spline system".into()))?;
        Ok(SplineAxis { nodes, second })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.nodes[0]
    }

    pub fn upper(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Weights `w, dw` with `f(x) = Σ w_j y_j` and `f'(x) = Σ dw_j y_j`.
    /// Outside the node range the end pieces are extended.
    pub fn weights(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes.len();
        let i = match self.nodes.partition_point(|v| *v <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let (x0, x1) = (self.nodes[i], self.nodes[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        let mut w = vec![0.0; n];
        let mut dw = vec![0.0; n];
        w[i] += a / h;
        w[i + 1] += b / h;
        dw[i] -= 1.0 / h;
        dw[i + 1] += 1.0 / h;
        // coefficients multiplying the second derivatives M_i, M_{i+1}
        let ci = (a * a * a / h - h * a) / 6.0;
        let ci1 = (b * b * b / h - h * b) / 6.0;
        let dci = (-3.0 * a * a / h + h) / 6.0;
        let dci1 = (3.0 * b * b / h - h) / 6.0;
        for j in 0..n {
            let (si, si1) = (self.second[(i, j)], self.second[(i + 1, j)]);
            w[j] += ci * si + ci1 * si1;
            dw[j] += dci * si + dci1 * si1;
        }
        (w, dw)
    }
}

/// Tensor-product spline of several outputs over a rectangular grid.
/// Values are stored with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpline {
    axes: Vec<SplineAxis>,
    /// `values[output][flat node index]`
    values: Vec<Vec<f64>>,
}

impl TensorSpline {
    pub fn new(axes: Vec<SplineAxis>, values: Vec<Vec<f64>>) -> Result<TensorSpline> {
        let count: usize = axes.iter().map(|a| a.len()).product();
        if values.iter().any(|v| v.len() != count) {
            return Err(Error::Invalid("spline value table has the wrong size".into()));
        }
        Ok(TensorSpline { axes, values })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn outputs(&self) -> usize {
        self.values.len()
    }

    pub fn axes(&self) -> &[SplineAxis] {
        &self.axes
    }

    /// Values and the gradient matrix (`outputs x dim`) at `x`.
    pub fn eval(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim();
        let ws: Vec<(Vec<f64>, Vec<f64>)> = self.axes.iter().zip(x).map(|(a, v)| a.weights(*v)).collect();
        let mut val = vec![0.0; self.outputs()];
        let mut grad = DMatrix::zeros(self.outputs(), d);
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.len()).collect();
        let total: usize = sizes.iter().product();
        let mut idx = vec![0usize; d];
        for flat in 0..total {
            let mut rem = flat;
            for l in (0..d).rev() {
                idx[l] = rem % sizes[l];
                rem /= sizes[l];
            }
            let w: f64 = (0..d).map(|l| ws[l].0[idx[l]]).product();
            let dws: Vec<f64> = (0..d)
                .map(|l| (0..d).map(|q| if q == l { ws[q].1[idx[q]] } else { ws[q].0[idx[q]] }).product())
                .collect();
            if w == 0.0 && dws.iter().all(|v| *v == 0.0) {
                continue;
            }
            for (o, table) in self.values.iter().enumerate() {
                let y = table[flat];
                val[o] += w * y;
                for l in 0..d {
                    grad[(o, l)] += dws[l] * y;
                }
            }
        }
        (val, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn reproduces_cubics_exactly() {
        let ax = SplineAxis::new(grid(-1.0, 2.0, 7)).unwrap();
        let f = |x: f64| 2.0 * x * x * x - x * x + 0.5 * x - 3.0;
        let df = |x: f64| 6.0 * x * x - 2.0 * x + 0.5;
        let ys: Vec<f64> = ax.nodes().iter().map(|x| f(*x)).collect();
        for x in [-1.0, -0.3, 0.77, 1.999, 2.0, 2.1] {
            let (w, dw) = ax.weights(x);
            let v: f64 = w.iter().zip(&ys).map(|(a, b)| a * b).sum();
            let d: f64 = dw.iter().zip(&ys).map(|(a, b)| a * b).sum();
            assert!((v - f(x)).abs() < 1e-12, "{x}");
            assert!((d - df(x)).abs() < 1e-11, "{x}");
        }
    }

    #[test]
    fn smooth_function_accuracy() {
        let ax = SplineAxis::new(grid(0.1, 2.0, 17)).unwrap();
        let ys: Vec<f64> = ax.nodes().iter().map(|x| x.sin()).collect();
        let s = TensorSpline::new(vec![ax], vec![ys]).unwrap();
        for i in 0..50 {
            let x = 0.1 + 1.9 * i as f64 / 49.0;
            let (v, g) = s.eval(&[x]);
            assert!((v[0] - x.sin()).abs() < 1e-5, "{x} {}", v[0] - x.sin());
            assert!((g[(0, 0)] - x.cos()).abs() < 5e-4, "{x} {}", g[(0, 0)] - x.cos());
        }
    }

    #[test]
    fn tensor_product_bicubic() {
        let a = SplineAxis::new(grid(0.0, 1.0, 5)).unwrap();
        let b = SplineAxis::new(grid(-1.0, 1.0, 6)).unwrap();
        let f = |x: f64, y: f64| x * x * y + y * y * y - 2.0 * x;
        let mut vals = Vec::new();
        for x in a.nodes() {
            for y in b.nodes() {
                vals.push(f(*x, *y));
            }
        }
        let s = TensorSpline::new(vec![a, b], vec![vals]).unwrap();
        let (v, g) = s.eval(&[0.37, 0.41]);
        assert!((v[0] - f(0.37, 0.41)).abs() < 1e-12);
        assert!((g[(0, 0)] - (2.0 * 0.37 * 0.41 - 2.0)).abs() < 1e-11);
        assert!((g[(0, 1)] - (0.37 * 0.37 + 3.0 * 0.41 * 0.41)).abs() < 1e-11);
    }

    #[test]
    fn rejects_short_or_unsorted_axes() {
        assert!(SplineAxis::new(vec![0.0, 1.0, 2.0]).is_err());
        assert!(SplineAxis::new(vec![0.0, 2.0, 1.0, 3.0]).is_err());
    }
}
