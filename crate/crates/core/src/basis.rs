//! Principal-component output basis for the emulator and the normal-kernel
//! basis for the discrepancy term.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `η ≈ φ₀ + Φ w`. Columns of `phi` are scaled so that the projected training
/// weights have unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisDecomposition {
    pub phi0: DVector<f64>,
    pub phi: DMatrix<f64>,
    /// `s_k / sqrt(n)`, the factor applied to each unit singular vector.
    pub scale: Vec<f64>,
    /// Fraction of total ensemble variance captured by each retained component.
    pub explained_variance: Vec<f64>,
    /// All singular values of the centered ensemble, descending.
    pub singular_values: Vec<f64>,
    pub n_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedOutputs {
    /// `p_eta × n` basis weights; column `j` belongs to ensemble row `j`.
    pub w_star: DMatrix<f64>,
}

impl BasisDecomposition {
    pub fn weeks(&self) -> usize {
        self.phi0.len()
    }

    pub fn p_eta(&self) -> usize {
        self.phi.ncols()
    }

    /// `φ₀ + Φ w` over all weeks.
    pub fn reconstruct(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.phi0 + &self.phi * w
    }

    /// Mean and basis restricted to the first `n` weeks.
    pub fn truncated(&self, n: usize) -> (DVector<f64>, DMatrix<f64>) {
        (self.phi0.rows(0, n).into_owned(), self.phi.rows(0, n).into_owned())
    }

    /// Total variance of the training ensemble per row (sum over weeks).
    pub fn total_variance(&self) -> f64 {
        self.singular_values.iter().map(|s| s * s).sum::<f64>() / self.n_rows as f64
    }
}

/// Builds the mean curve and the first `p_eta` scaled principal components of
/// the rows of `eta` (one simulated curve per row).
pub fn build_basis(eta: &DMatrix<f64>, p_eta: usize) -> Result<BasisDecomposition> {
    let (n, weeks) = eta.shape();
    if n == 0 || weeks == 0 {
        return Err(Error::invalid("empty ensemble"));
    }
    if p_eta == 0 {
        return Err(Error::invalid("p_eta must be at least 1"));
    }
    let phi0 = DVector::from_fn(weeks, |t, _| eta.column(t).mean());
    let mut centered = eta.clone();
    for t in 0..weeks {
        let mu = phi0[t];
        centered.column_mut(t).iter_mut().for_each(|v| *v -= mu);
    }
    let (singular_values, vectors) = principal_axes(&centered);

    let s_max = singular_values.first().copied().unwrap_or(0.0);
    let magnitude = phi0.amax().max(1.0) * ((n * weeks) as f64).sqrt();
    if !(s_max > 1e-12 * magnitude) {
        return Err(Error::Numerical("ensemble has zero variance; no basis can be built".into()));
    }
    // eigenvalues of the Gram matrix carry absolute error ~ eps * s_max²
    let tol = s_max * (10.0 * n.max(weeks) as f64 * f64::EPSILON).sqrt();
    let rank = singular_values.iter().filter(|&&s| s > tol).count();
    if p_eta > rank {
        return Err(Error::invalid(format!("p_eta = {p_eta} exceeds the ensemble rank {rank}")));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let sqrt_n = (n as f64).sqrt();
    let mut phi = DMatrix::zeros(weeks, p_eta);
    let mut scale = Vec::with_capacity(p_eta);
    let mut explained = Vec::with_capacity(p_eta);
    for c in 0..p_eta {
        let mut v: DVector<f64> = vectors.column(c).into_owned();
        // Sign ambiguity: largest-magnitude entry positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        let s = singular_values[c];
        scale.push(s / sqrt_n);
        explained.push(s * s / total);
        phi.set_column(c, &(v * (s / sqrt_n)));
    }
    Ok(BasisDecomposition { phi0, phi, scale, explained_variance: explained, singular_values, n_rows: n })
}

/// Singular values (descending) and right singular vectors of `a`, from the
/// symmetric eigendecomposition of the smaller Gram matrix.
fn principal_axes(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, t) = a.shape();
    let tall = t <= n;
    let gram = if tall { a.transpose() * a } else { a * a.transpose() };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
    let mut v = DMatrix::zeros(t, order.len());
    for (c, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        if tall {
            v.set_column(c, &col);
        } else if values[c] > 0.0 {
            let mapped = a.transpose() * col;
            let norm = mapped.norm();
            if norm > 0.0 {
                v.set_column(c, &(mapped / norm));
            }
        }
    }
    (values, v)
}

/// Least-squares weights of each row of `eta` given `φ₀` and `Φ`. The columns
/// of `Φ` are orthogonal, so this is a scaled dot product per component.
pub fn project(eta: &DMatrix<f64>, basis: &BasisDecomposition) -> Result<ProjectedOutputs> {
    if eta.ncols() != basis.weeks() {
        return Err(Error::invalid(format!("ensemble has {} weeks but basis has {}", eta.ncols(), basis.weeks())));
    }
    let p = basis.p_eta();
    let norms: Vec<f64> = (0..p).map(|k| basis.phi.column(k).norm_squared()).collect();
    let w_star = DMatrix::from_fn(p, eta.nrows(), |k, j| {
        let resid = eta.row(j).transpose() - &basis.phi0;
        resid.dot(&basis.phi.column(k)) / norms[k]
    });
    Ok(ProjectedOutputs { w_star })
}

/// Normal kernels over the week grid: `δ = D v`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyBasis {
    /// `weeks × p_delta`, each column scaled to a maximum of 1 on the grid.
    pub d: DMatrix<f64>,
    /// Kernel centers in weeks (1-based week numbering).
    pub centers: Vec<f64>,
    pub kernel_sd: f64,
    pub spacing: f64,
}

impl DiscrepancyBasis {
    pub fn p_delta(&self) -> usize {
        self.d.ncols()
    }

    pub fn truncated(&self, n: usize) -> DMatrix<f64> {
        self.d.rows(0, n).into_owned()
    }
}

/// Kernel centers start at `1 - spacing/2` and step by `spacing` until one
/// lies at or beyond `weeks + spacing/2`. With 57 weeks and 12-week spacing
/// that gives 7 kernels. A one-week grid gets a single kernel on that week.
pub fn discrepancy_centers(weeks: usize, spacing: f64) -> Vec<f64> {
    if weeks == 1 {
        return vec![1.0];
    }
    let start = 1.0 - spacing / 2.0;
    let end = weeks as f64 + spacing / 2.0;
    let mut centers = vec![start];
    while *centers.last().unwrap() < end {
        let next = start + centers.len() as f64 * spacing;
        centers.push(next);
    }
    centers
}

pub fn build_discrepancy_basis(weeks: usize, kernel_sd: f64, spacing: f64) -> Result<DiscrepancyBasis> {
    if weeks == 0 {
        return Err(Error::invalid("discrepancy basis needs at least one week"));
    }
    if !(kernel_sd > 0.0) || !(spacing > 0.0) {
        return Err(Error::invalid("kernel sd and spacing must be positive"));
    }
    let centers = discrepancy_centers(weeks, spacing);
    let mut d = DMatrix::from_fn(weeks, centers.len(), |t, k| {
        let z = ((t + 1) as f64 - centers[k]) / kernel_sd;
        (-0.5 * z * z).exp()
    });
    for mut col in d.column_iter_mut() {
        let peak = col.max();
        col /= peak;
    }
    Ok(DiscrepancyBasis { d, centers, kernel_sd, spacing })
}

/// On-disk form of the basis artifacts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BasisFile {
    pub phi0: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub n_rows: usize,
    pub discrepancy_kernel_sd: f64,
    pub discrepancy_spacing: f64,
    pub discrepancy_centers: Vec<f64>,
}

impl BasisFile {
    pub fn new(b: &BasisDecomposition, disc: &DiscrepancyBasis) -> Self {
        Self {
            phi0: b.phi0.iter().copied().collect(),
            phi: b.phi.column_iter().map(|c| c.iter().copied().collect()).collect(),
            scale: b.scale.clone(),
            explained_variance: b.explained_variance.clone(),
            singular_values: b.singular_values.clone(),
            n_rows: b.n_rows,
            discrepancy_kernel_sd: disc.kernel_sd,
            discrepancy_spacing: disc.spacing,
            discrepancy_centers: disc.centers.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(BasisDecomposition, DiscrepancyBasis)> {
        let weeks = self.phi0.len();
        if self.phi.iter().any(|c| c.len() != weeks) {
            return Err(Error::invalid("basis columns do not match phi0 length"));
        }
        let cols: Vec<f64> = self.phi.concat();
        let basis = BasisDecomposition {
            phi0: DVector::from_vec(self.phi0),
            phi: DMatrix::from_column_slice(weeks, self.phi.len(), &cols),
            scale: self.scale,
            explained_variance: self.explained_variance,
            singular_values: self.singular_values,
            n_rows: self.n_rows,
        };
        let disc = build_discrepancy_basis(weeks, self.discrepancy_kernel_sd, self.discrepancy_spacing)?;
        Ok((basis, disc))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })
    }
}
