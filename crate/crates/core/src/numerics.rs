//! Dense kernels shared by the rest of the crate: row softmax, linear CKA and
//! token distance matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise mean over rows, one value per column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0f64; self.cols];
        for i in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(i)) {
                *m += f64::from(v);
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

/// Numerically stabilised softmax applied independently to every row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for row in out.data.chunks_mut(m.cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += f64::from(e);
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn centered(x: &Matrix) -> Vec<f64> {
    let means = x.column_means();
    let mut out = Vec::with_capacity(x.data.len());
    for i in 0..x.rows {
        out.extend(x.row(i).iter().zip(&means).map(|(&v, m)| f64::from(v) - m));
    }
    out
}

/// `A^T B` for row-major `a` (n x p) and `b` (n x q), returned as p x q.
fn gram_cross(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let ar = &a[i * p..(i + 1) * p];
        let br = &b[i * q..(i + 1) * q];
        for (r, &av) in ar.iter().enumerate() {
            let dst = &mut out[r * q..(r + 1) * q];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    }
    out
}

fn frobenius_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear (dot-product kernel) CKA between two representations of the same
/// samples. Rows are samples; the column counts may differ.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch(format!(
            "CKA needs equal sample counts, got {} and {}",
            x.rows, y.rows
        )));
    }
    if x.rows < 2 {
        return Err(Error::ShapeMismatch("CKA needs at least two samples".into()));
    }
    let n = x.rows;
    let xc = centered(x);
    let yc = centered(y);
    for v in [&xc, &yc] {
        let norm = frobenius_sq(v).sqrt();
        if norm < 1e-9 {
            return Err(Error::DegenerateRepresentation { norm });
        }
    }
    let cross = frobenius_sq(&gram_cross(&yc, y.cols, &xc, x.cols, n));
    let xx = frobenius_sq(&gram_cross(&xc, x.cols, &xc, x.cols, n)).sqrt();
    let yy = frobenius_sq(&gram_cross(&yc, y.cols, &yc, y.cols, n)).sqrt();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Line1d,
    Grid2d,
}

/// Symmetric token-to-token distances; masked tokens have all-zero rows and
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
    geometry: Geometry,
    mask: Vec<bool>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn max_distance(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

/// Distances between token positions. `special_mask[i] == true` removes token
/// `i` from the spatial layout (class token, padding); the remaining tokens
/// are laid out in order on a line or a square unit grid.
pub fn token_distance_matrix(n: usize, geometry: Geometry, special_mask: &[bool]) -> Result<DistanceMatrix> {
    if n == 0 {
        return Err(Error::BadGeometry("token count must be at least 1".into()));
    }
    if special_mask.len() != n {
        return Err(Error::BadGeometry(format!(
            "mask has {} entries for {n} tokens",
            special_mask.len()
        )));
    }
    let positions: Vec<Option<usize>> = {
        let mut next = 0;
        special_mask
            .iter()
            .map(|&masked| {
                (!masked).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let active = special_mask.iter().filter(|m| !**m).count();
    let side = match geometry {
        Geometry::Line1d => 0,
        Geometry::Grid2d => {
            let side = (active as f64).sqrt().round() as usize;
            if side * side != active {
                return Err(Error::BadGeometry(format!(
                    "{active} unmasked tokens do not form a square grid"
                )));
            }
            side
        }
    };
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let Some(pi) = positions[i] else { continue };
        for j in 0..n {
            let Some(pj) = positions[j] else { continue };
            d[i * n + j] = match geometry {
                Geometry::Line1d => pi.abs_diff(pj) as f64,
                Geometry::Grid2d => {
                    let dr = (pi / side).abs_diff(pj / side) as f64;
                    let dc = (pi % side).abs_diff(pj % side) as f64;
                    dr.hypot(dc)
                }
            };
        }
    }
    Ok(DistanceMatrix {
        n,
        d,
        geometry,
        mask: special_mask.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
    }

    /// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
    fn orthogonal(k: usize, seed: u64) -> Matrix {
        let g = gaussian(k, k, seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..k {
            let mut v: Vec<f64> = g.row(i).iter().map(|&x| f64::from(x)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
        Matrix::from_fn(k, k, |i, j| q[i][j] as f32)
    }

    fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols())
                .map(|p| f64::from(a.get(i, p)) * f64::from(b.get(p, j)))
                .sum::<f64>() as f32
        })
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Matrix::zeros(1, 4));
        for &v in s.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let s = softmax_rows(&Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap());
        assert!(s.is_finite());
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.get(0, 1), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn softmax_log_weights() {
        let row = [1.0f64.ln(), 3.0f64.ln()];
        // direct summation: e^ln1 = 1, e^ln3 = 3, total 4
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = row.iter().map(|v| v.exp() / total).collect();
        let s = softmax_rows(&Matrix::from_vec(1, 2, row.map(|v| v as f32).to_vec()).unwrap());
        assert_abs_diff_eq!(f64::from(s.get(0, 0)), expect[0], epsilon = 1e-6);
        assert_abs_diff_eq!(f64::from(s.get(0, 1)), expect[1], epsilon = 1e-6);
        assert_abs_diff_eq!(expect[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn cka_self_and_orthogonal() {
        let x = gaussian(40, 8, 1);
        assert_abs_diff_eq!(linear_cka(&x, &x).unwrap(), 1.0, epsilon = 1e-6);
        let xq = matmul(&x, &orthogonal(8, 2));
        assert_abs_diff_eq!(linear_cka(&x, &xq).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cka_independent_gaussians_low() {
        // Monte-Carlo bound: over 100 seeds the maximum stays well below 0.3.
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let x = gaussian(64, 8, 1000 + seed);
            let y = gaussian(64, 8, 5000 + seed);
            worst = worst.max(linear_cka(&x, &y).unwrap());
        }
        assert!(worst < 0.3, "worst independent CKA {worst}");
    }

    #[test]
    fn cka_rejects_constant_columns() {
        let x = Matrix::from_fn(5, 3, |_, j| j as f32);
        let y = gaussian(5, 3, 3);
        assert!(matches!(
            linear_cka(&x, &y),
            Err(Error::DegenerateRepresentation { .. })
        ));
        assert!(matches!(
            linear_cka(&y, &gaussian(4, 3, 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn line_distances() {
        let d = token_distance_matrix(3, Geometry::Line1d, &[false; 3]).unwrap();
        assert_eq!(d.get(0, 2), 2.0);
        assert_eq!(d.get(2, 0), 2.0);
    }

    #[test]
    fn grid_distances() {
        let d = token_distance_matrix(4, Geometry::Grid2d, &[false; 4]).unwrap();
        assert_abs_diff_eq!(d.get(0, 3), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn grid_with_class_token() {
        let mut mask = [false; 5];
        mask[0] = true;
        let d = token_distance_matrix(5, Geometry::Grid2d, &mask).unwrap();
        // enumeration: tokens 1..=4 sit at (0,0),(0,1),(1,0),(1,1)
        let coords = [(0.0f64, 0.0f64), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        for j in 0..5 {
            assert_eq!(d.get(0, j), 0.0);
            assert_eq!(d.get(j, 0), 0.0);
        }
        for i in 1..5 {
            for j in 1..5 {
                let (a, b) = (coords[i - 1], coords[j - 1]);
                assert_abs_diff_eq!(d.get(i, j), (a.0 - b.0).hypot(a.1 - b.1), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(d.get(1, 4), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn grid_requires_square() {
        assert!(matches!(
            token_distance_matrix(5, Geometry::Grid2d, &[false; 5]),
            Err(Error::BadGeometry(_))
        ));
        assert!(token_distance_matrix(0, Geometry::Line1d, &[]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..12,
            seed in any::<u64>(),
            scale in 0.1f32..200.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0) * scale);
            let s = softmax_rows(&m);
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn cka_symmetric_and_scale_invariant(
            seed in any::<u64>(),
            c in prop_oneof![-50.0f32..-0.01, 0.01f32..50.0],
        ) {
            let x = gaussian(20, 6, seed);
            let y = gaussian(20, 4, seed.wrapping_add(1));
            let a = linear_cka(&x, &y).unwrap();
            let b = linear_cka(&y, &x).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            let cx = Matrix::from_fn(20, 6, |i, j| x.get(i, j) * c);
            prop_assert!((linear_cka(&x, &cx).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn distances_obey_triangle_inequality(
            side in 1usize..5,
            class_token in any::<bool>(),
            line in any::<bool>(),
        ) {
            let active = side * side;
            let n = active + usize::from(class_token);
            let mut mask = vec![false; n];
            if class_token { mask[0] = true; }
            let geometry = if line { Geometry::Line1d } else { Geometry::Grid2d };
            let d = token_distance_matrix(n, geometry, &mask).unwrap();
            let start = usize::from(class_token);
            for i in start..n {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in start..n {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    for k in start..n {
                        prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                    }
                }
            }
        }
    }
}
