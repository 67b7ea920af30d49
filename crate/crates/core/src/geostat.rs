//! Gaussian random log-permeability fields and their Karhunen-Loeve
//! parameterization.
//!
//! The covariance is Gaussian-shaped in the cell-center distances. Its
//! eigendecomposition drives both the field sampler and the KLE: with the
//! scaled basis `phi = U sqrt(L)` a unit-variance coefficient vector
//! reproduces the target covariance exactly, and the reduced prior term of
//! the history-matching cost becomes an identity-weighted norm.

use crate::fom::LogPermField;
use crate::grid::Grid2;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Eigenvalues this far below zero (relative to the largest) are clipped;
/// anything worse fails the decomposition.
const PSD_CLIP_REL: f64 = 1e-8;

/// Parameters of the Gaussian-shaped log-permeability covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    /// Standard deviation of log-permeability.
    pub sigma: f64,
    /// Correlation length in x relative to the domain length.
    pub corr_frac_x: f64,
    /// Correlation length in y relative to the domain length.
    pub corr_frac_y: f64,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "covariance sigma must be positive, got {}",
                self.sigma
            )));
        }
        for (name, v) in [
            ("corr_frac_x", self.corr_frac_x),
            ("corr_frac_y", self.corr_frac_y),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Dense covariance matrix over all cell pairs:
/// `sigma^2 exp(-[(dx/chi_x)^2 + (dy/chi_y)^2])`.
pub fn covariance(spec: &CovarianceSpec, grid: &Grid2) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = grid.n_cells();
    let chi_x = spec.corr_frac_x * grid.length_x();
    let chi_y = spec.corr_frac_y * grid.length_y();
    let s2 = spec.sigma * spec.sigma;
    let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.center(c)).collect();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (xi, yi) = centers[i];
            let (xj, yj) = centers[j];
            let ex = (xi - xj).abs() / chi_x;
            let ey = (yi - yj).abs() / chi_y;
            let v = s2 * (-(ex * ex + ey * ey)).exp();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Eigendecomposition of a covariance matrix with PSD repair, eigenvalues
/// sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    /// Nonnegative eigenvalues, descending.
    values: DVector<f64>,
    /// Matching eigenvectors as columns.
    vectors: DMatrix<f64>,
}

impl CovarianceModel {
    pub fn from_spec(spec: &CovarianceSpec, grid: &Grid2) -> Result<Self> {
        Self::from_matrix(covariance(spec, grid)?)
    }

    pub fn from_matrix(cov: DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if n == 0 || cov.ncols() != n {
            return Err(Error::Dimension(
                "covariance must be square and nonempty".into(),
            ));
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lam_max = eig.eigenvalues[order[0]].max(0.0);
        let mut values = DVector::zeros(n);
        let mut vectors = DMatrix::zeros(n, n);
        for (k, &idx) in order.iter().enumerate() {
            let lam = eig.eigenvalues[idx];
            if lam < -PSD_CLIP_REL * lam_max {
                return Err(Error::NotPsd { min_eig: lam });
            }
            values[k] = lam.max(0.0);
            vectors.set_column(k, &eig.eigenvectors.column(idx));
        }
        if values[0] <= 0.0 {
            return Err(Error::Degenerate("covariance has rank zero".into()));
        }
        Ok(Self { values, vectors })
    }

    /// Eigenvalues in decreasing order (the KLE energies).
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.values
    }

    /// Draw `count` fields `mean + U sqrt(L) z`, `z ~ N(0, I)`, using the
    /// full spectrum so the sample covariance converges to the model.
    pub fn sample(
        &self,
        mean: &DVector<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<LogPermField>> {
        let n = self.values.len();
        if mean.len() != n {
            return Err(Error::Dimension(format!(
                "mean has {} cells, covariance {}",
                mean.len(),
                n
            )));
        }
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let sqrt_l = self.values.map(|v| v.sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let scaled = z.component_mul(&sqrt_l);
            out.push(LogPermField::new(mean + &self.vectors * scaled));
        }
        Ok(out)
    }

    /// Truncate to a KLE model at the given energy fraction.
    pub fn kle(&self, mean: DVector<f64>, energy_fraction: f64) -> Result<KleModel> {
        KleModel::from_eigenpairs(mean, &self.vectors, &self.values, energy_fraction)
    }
}

/// Smallest basis size whose cumulative energy reaches `fraction` of the
/// total. `energies` must be nonnegative and sorted in decreasing order.
pub fn energy_truncation(energies: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "energy fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let total: f64 = energies.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("zero total energy".into()));
    }
    // Values at floating-point noise level do not count toward the rank.
    let rank_floor = energies[0] * 1e-14;
    let target = fraction * total;
    let mut acc = 0.0;
    for (k, &e) in energies.iter().enumerate() {
        if e <= rank_floor {
            break;
        }
        acc += e;
        if acc >= target * (1.0 - 1e-12) {
            return Ok(k + 1);
        }
    }
    Ok(energies.iter().filter(|&&e| e > rank_floor).count())
}

/// Truncated, scaled KL expansion of the log-permeability field:
/// `beta = beta_b + phi xi` with `phi = U sqrt(L)`.
///
/// The truncation level counts the covariance eigenvalues as the singular
/// values of the parameter matrix, so the energy criterion compares sums
/// of squared eigenvalues; the column scaling stays `sqrt(lambda)` so that
/// unit-variance coefficients reproduce the covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KleModel {
    beta_b: DVector<f64>,
    /// Scaled basis, `n_cells x l_beta`.
    phi: DMatrix<f64>,
    /// sqrt of the retained eigenvalues (column scales of `phi`).
    mode_scales: DVector<f64>,
    /// Full eigenvalue spectrum the truncation was applied to.
    eigenvalues: Vec<f64>,
    requested_fraction: f64,
    retained_fraction: f64,
}

impl KleModel {
    fn from_eigenpairs(
        beta_b: DVector<f64>,
        vectors: &DMatrix<f64>,
        eigenvalues: &DVector<f64>,
        fraction: f64,
    ) -> Result<Self> {
        if beta_b.len() != vectors.nrows() {
            return Err(Error::Dimension("mean/basis size mismatch".into()));
        }
        let evec: Vec<f64> = eigenvalues.iter().copied().collect();
        let energies: Vec<f64> = evec.iter().map(|l| l * l).collect();
        let l = energy_truncation(&energies, fraction)?;
        let total: f64 = energies.iter().sum();
        let retained: f64 = energies[..l].iter().sum();
        let mut phi = DMatrix::zeros(vectors.nrows(), l);
        let mut mode_scales = DVector::zeros(l);
        for k in 0..l {
            let s = eigenvalues[k].sqrt();
            mode_scales[k] = s;
            phi.set_column(k, &(vectors.column(k) * s));
        }
        Ok(Self {
            beta_b,
            phi,
            mode_scales,
            eigenvalues: evec,
            requested_fraction: fraction,
            retained_fraction: retained / total,
        })
    }

    /// Reassemble a model from persisted parts. The retained fraction is
    /// recomputed from the stored spectrum.
    pub fn from_parts(
        beta_b: DVector<f64>,
        phi: DMatrix<f64>,
        mode_scales: DVector<f64>,
        eigenvalues: Vec<f64>,
        requested_fraction: f64,
    ) -> Result<Self> {
        if phi.nrows() != beta_b.len() || phi.ncols() != mode_scales.len() {
            return Err(Error::Dimension("kle parts do not fit together".into()));
        }
        if eigenvalues.len() < phi.ncols() {
            return Err(Error::Dimension("kle spectrum shorter than the basis".into()));
        }
        let total: f64 = eigenvalues.iter().map(|l| l * l).sum();
        let retained: f64 = eigenvalues[..phi.ncols()].iter().map(|l| l * l).sum();
        Ok(Self {
            beta_b,
            phi,
            mode_scales,
            eigenvalues,
            requested_fraction,
            retained_fraction: retained / total,
        })
    }

    /// KLE of the sample covariance of an ensemble; the background is the
    /// ensemble mean.
    pub fn from_ensemble(fields: &[LogPermField], fraction: f64) -> Result<Self> {
        let count = fields.len();
        if count < 2 {
            return Err(Error::Degenerate(
                "ensemble KLE needs at least 2 members".into(),
            ));
        }
        let n = fields[0].n_cells();
        let mut mean = DVector::zeros(n);
        for f in fields {
            if f.n_cells() != n {
                return Err(Error::Dimension("ensemble members differ in size".into()));
            }
            mean += &f.beta;
        }
        mean /= count as f64;
        let norm = ((count - 1) as f64).sqrt();
        let mut centered = DMatrix::zeros(n, count);
        for (j, f) in fields.iter().enumerate() {
            centered.set_column(j, &((&f.beta - &mean) / norm));
        }
        let svd = centered.svd(true, false);
        let u = svd.u.expect("svd with u requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut energies = DVector::zeros(order.len());
        let mut vectors = DMatrix::zeros(n, order.len());
        for (k, &idx) in order.iter().enumerate() {
            let s = svd.singular_values[idx];
            energies[k] = s * s;
            vectors.set_column(k, &u.column(idx));
        }
        if energies[0] <= 0.0 {
            return Err(Error::Degenerate("ensemble has zero spread".into()));
        }
        Self::from_eigenpairs(mean, &vectors, &energies, fraction)
    }

    pub fn n_cells(&self) -> usize {
        self.beta_b.len()
    }

    /// Number of retained modes.
    pub fn l_beta(&self) -> usize {
        self.phi.ncols()
    }

    pub fn beta_b(&self) -> &DVector<f64> {
        &self.beta_b
    }

    /// Scaled parameter basis (`U sqrt(L)` truncated).
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn mode_scales(&self) -> &DVector<f64> {
        &self.mode_scales
    }

    /// Eigenvalue spectrum the truncation saw (descending); the criterion
    /// weights are the squares of these.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn requested_fraction(&self) -> f64 {
        self.requested_fraction
    }

    /// Exact retained-energy fraction.
    pub fn retained_fraction(&self) -> f64 {
        self.retained_fraction
    }

    /// `beta_b + phi xi`.
    pub fn decode(&self, xi: &DVector<f64>) -> LogPermField {
        assert_eq!(xi.len(), self.l_beta(), "xi length mismatch");
        LogPermField::new(&self.beta_b + &self.phi * xi)
    }

    /// Left inverse of `decode`: project onto the KLE subspace and rescale,
    /// `xi = sqrt(L)^-1 U^T (beta - beta_b)`.
    pub fn encode(&self, field: &LogPermField) -> DVector<f64> {
        assert_eq!(field.n_cells(), self.n_cells(), "field size mismatch");
        let centered = &field.beta - &self.beta_b;
        let mut xi = DVector::zeros(self.l_beta());
        for k in 0..self.l_beta() {
            xi[k] =
                self.phi.column(k).dot(&centered) / (self.mode_scales[k] * self.mode_scales[k]);
        }
        xi
    }
}

/// Draw an ensemble of log-permeability realizations around `mean`.
pub fn sample_realizations(
    spec: &CovarianceSpec,
    grid: &Grid2,
    mean: &DVector<f64>,
    count: usize,
    seed: u64,
) -> Result<Vec<LogPermField>> {
    CovarianceModel::from_spec(spec, grid)?.sample(mean, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec() -> CovarianceSpec {
        CovarianceSpec {
            sigma: 5.0,
            corr_frac_x: 0.2,
            corr_frac_y: 0.2,
        }
    }

    #[test]
    fn covariance_pointwise_values() {
        let grid = Grid2::new(10, 1, 20.0, 20.0, 10.0);
        let cov = covariance(&spec(), &grid).unwrap();
        assert_relative_eq!(cov[(0, 0)], 25.0, max_relative = 1e-14);
        // Two cells separated by exactly one correlation length in x.
        let chi_x = 0.2 * grid.length_x(); // 40 m = 2 cells
        assert_eq!(chi_x, 40.0);
        assert_relative_eq!(cov[(0, 2)], 25.0 * (-1.0f64).exp(), max_relative = 1e-12);
        // Entries decay monotonically with distance.
        for j in 1..10 {
            assert!(cov[(0, j)] < cov[(0, j - 1)]);
        }
        assert!(cov[(0, 9)] > 0.0);
    }

    #[test]
    fn covariance_is_psd_within_tolerance() {
        let grid = Grid2::new(8, 8, 20.0, 20.0, 10.0);
        let model = CovarianceModel::from_spec(&spec(), &grid).unwrap();
        assert!(model.eigenvalues().iter().all(|&l| l >= 0.0));
        assert!(model.eigenvalues()[0] > 0.0);
    }

    #[test]
    fn sampling_reproduces_marginal_std() {
        let grid = Grid2::new(12, 12, 20.0, 20.0, 10.0);
        let n = grid.n_cells();
        let mean = DVector::from_element(n, 5.3);
        let fields = sample_realizations(&spec(), &grid, &mean, 1000, 99).unwrap();
        let mut in_range = 0;
        for c in 0..n {
            let vals: Vec<f64> = fields.iter().map(|f| f.beta[c]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            let std = var.sqrt();
            if (4.5..=5.5).contains(&std) {
                in_range += 1;
            }
        }
        assert!(
            in_range as f64 >= 0.95 * n as f64,
            "only {in_range}/{n} cells within std band"
        );
    }

    #[test]
    fn sampling_is_reproducible_and_degenerates_with_tiny_sigma() {
        let grid = Grid2::new(6, 6, 20.0, 20.0, 10.0);
        let mean = DVector::from_element(36, 5.3);
        let a = sample_realizations(&spec(), &grid, &mean, 3, 7).unwrap();
        let b = sample_realizations(&spec(), &grid, &mean, 3, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.beta, y.beta);
        }

        let tiny = CovarianceSpec {
            sigma: 1e-12,
            ..spec()
        };
        let c = sample_realizations(&tiny, &grid, &mean, 5, 1).unwrap();
        for f in &c {
            assert!((f.beta.clone() - &mean).amax() < 1e-9);
        }
    }

    #[test]
    fn paper_like_spec_retains_about_18_modes() {
        let grid = Grid2::new(25, 25, 40.0, 40.0, 10.0);
        let model = CovarianceModel::from_spec(&spec(), &grid).unwrap();
        let kle = model
            .kle(DVector::from_element(grid.n_cells(), 5.3), 0.95)
            .unwrap();
        let l = kle.l_beta();
        assert!(
            (14..=24).contains(&l),
            "95% energy retained {l} modes, expected about 18"
        );
        assert!(kle.retained_fraction() >= 0.95);
        // The reported fraction is the exact ratio of the retained energies.
        let total: f64 = kle.eigenvalues().iter().map(|v| v * v).sum();
        let retained: f64 = kle.eigenvalues()[..l].iter().map(|v| v * v).sum();
        assert_relative_eq!(
            kle.retained_fraction(),
            retained / total,
            max_relative = 1e-15
        );
    }

    #[test]
    fn equal_variance_diagonal_covariance_keeps_half() {
        let n = 7;
        let cov = DMatrix::<f64>::identity(n, n) * 4.0;
        let model = CovarianceModel::from_matrix(cov).unwrap();
        let kle = model.kle(DVector::zeros(n), 0.5).unwrap();
        assert_eq!(kle.l_beta(), n.div_ceil(2));
    }

    #[test]
    fn ensemble_kle_full_fraction_keeps_rank() {
        let n = 30;
        let mut fields = Vec::new();
        for k in 0..4usize {
            let beta = DVector::from_fn(n, |i, _| (((i + 1) * (k + 1)) % 7) as f64);
            fields.push(LogPermField::new(beta));
        }
        // 4 members centered -> rank 3.
        let kle = KleModel::from_ensemble(&fields, 1.0).unwrap();
        assert_eq!(kle.l_beta(), 3);
    }

    #[test]
    fn encode_decode_round_trip() {
        let grid = Grid2::new(10, 10, 20.0, 20.0, 10.0);
        let model = CovarianceModel::from_spec(&spec(), &grid).unwrap();
        let mean = DVector::from_element(100, 5.3);
        let kle = model.kle(mean.clone(), 0.9).unwrap();
        let l = kle.l_beta();

        // xi = 0 decodes to the background.
        let bg = kle.decode(&DVector::zeros(l));
        assert!((bg.beta.clone() - &mean).amax() < 1e-12);

        // Unit coefficient reproduces the first scaled basis column.
        let mut e1 = DVector::zeros(l);
        e1[0] = 1.0;
        let f1 = kle.decode(&e1);
        let col0: DVector<f64> = kle.phi().column(0).into();
        assert!((f1.beta - &mean - col0).amax() < 1e-12);

        // encode . decode is the identity on the reduced space.
        let mut xi = DVector::zeros(l);
        for k in 0..l {
            xi[k] = ((k as f64) * 0.37).sin();
        }
        let back = kle.encode(&kle.decode(&xi));
        assert!((back - &xi).amax() < 1e-10);
    }

    #[test]
    fn decode_encode_is_subspace_projection() {
        let grid = Grid2::new(8, 8, 20.0, 20.0, 10.0);
        let model = CovarianceModel::from_spec(&spec(), &grid).unwrap();
        let n = grid.n_cells();
        let mean = DVector::from_element(n, 5.3);
        let kle = model.kle(mean.clone(), 0.9).unwrap();
        let truth = model.sample(&mean, 1, 1234).unwrap().remove(0);
        let projected = kle.decode(&kle.encode(&truth));
        // Residual is orthogonal to every retained mode.
        let resid = &truth.beta - &projected.beta;
        for k in 0..kle.l_beta() {
            let dot = kle.phi().column(k).dot(&resid) / kle.mode_scales()[k];
            assert!(dot.abs() < 1e-8, "residual not orthogonal: {dot}");
        }
        // Projecting twice changes nothing.
        let twice = kle.decode(&kle.encode(&projected));
        assert!((twice.beta - &projected.beta).amax() < 1e-9);
    }

    #[test]
    fn projection_error_respects_discarded_energy() {
        let grid = Grid2::new(10, 10, 20.0, 20.0, 10.0);
        let model = CovarianceModel::from_spec(&spec(), &grid).unwrap();
        let n = grid.n_cells();
        let mean = DVector::from_element(n, 5.3);
        let fraction = 0.95;
        let kle = model.kle(mean.clone(), fraction).unwrap();
        let draws = model.sample(&mean, 20, 4321).unwrap();
        let mut sq_rel = 0.0;
        for truth in &draws {
            let projected = kle.decode(&kle.encode(truth));
            let num = (&truth.beta - &projected.beta).norm_squared();
            let den = (&truth.beta - &mean).norm_squared();
            sq_rel += num / den;
        }
        let mean_sq_rel = sq_rel / draws.len() as f64;
        // Field-space variance bookkeeping is in eigenvalue sums: the
        // expected squared projection error is the discarded lambda mass.
        let total: f64 = kle.eigenvalues().iter().sum();
        let kept: f64 = kle.eigenvalues()[..kle.l_beta()].iter().sum();
        let discarded = 1.0 - kept / total;
        assert!(
            mean_sq_rel <= 2.0 * discarded,
            "projection error {mean_sq_rel:.4} vs discarded eigenvalue mass {discarded:.4}"
        );
    }
}
