//! Symmetric PSD helpers: Gram matrices, cutoff pseudoinverses and
//! pseudo-determinants on top of nalgebra's symmetric eigensolver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `sum_k v_k v_k^T` over the selected vectors, accumulated in index order.
pub fn gram<'a, I>(dim: usize, vectors: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for v in vectors {
        let v = DVector::from_column_slice(v);
        s.syger(1.0, &v, &v, 1.0);
    }
    s.fill_upper_triangle_with_lower_triangle();
    s
}

/// Eigendecomposition of a symmetric PSD matrix with a relative spectral
/// cutoff: eigenvalues at or below `tol * lambda_max` count as zero.
#[derive(Debug, Clone)]
pub struct PsdSpectrum {
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    cutoff: f64,
}

impl PsdSpectrum {
    pub fn new(matrix: DMatrix<f64>, tol: f64) -> Self {
        let eigen = SymmetricEigen::new(matrix);
        let lambda_max = eigen
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &l| a.max(l.abs()));
        PsdSpectrum {
            eigen,
            cutoff: tol * lambda_max,
        }
    }

    fn kept(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let cutoff = self.cutoff;
        self.eigen
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .filter(move |&(_, l)| l > cutoff && l > 0.0)
    }

    pub fn rank(&self) -> usize {
        self.kept().count()
    }

    /// Product of the retained eigenvalues; 1 for the zero matrix.
    pub fn pdet(&self) -> f64 {
        self.kept().map(|(_, l)| l).product()
    }

    pub fn log2_pdet(&self) -> f64 {
        self.kept().map(|(_, l)| l.log2()).sum()
    }

    /// `g^T A^+ g` together with the norm of the component of `g` outside the
    /// retained range.
    pub fn pinv_quadform(&self, g: &[f64]) -> (f64, f64) {
        let g = DVector::from_column_slice(g);
        let mut value = 0.0;
        let mut outside = g.clone();
        for (k, l) in self.kept() {
            let u = self.eigen.eigenvectors.column(k);
            let c = u.dot(&g);
            value += c * c / l;
            outside.axpy(-c, &u, 1.0);
        }
        (value, outside.norm())
    }

    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let n = self.eigen.eigenvalues.len();
        let mut out = DMatrix::<f64>::zeros(n, n);
        for (k, l) in self.kept() {
            let u = self.eigen.eigenvectors.column(k);
            out += (u * u.transpose()) / l;
        }
        out
    }
}

/// Quadratic form `g^T S^+ g` and whether `g` lies in `range(S)`, i.e.
/// `||(I - S S^+) g|| <= tol ||g||`.
pub fn pinv_quadform(s: DMatrix<f64>, g: &[f64], tol: f64) -> (f64, bool) {
    let spectrum = PsdSpectrum::new(s, tol);
    let (value, residual) = spectrum.pinv_quadform(g);
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    (value.max(0.0), residual <= tol * norm)
}
