//! Radial basis function interpolation over reduced coordinates, with
//! analytic differentiation of the interpolant at its training centers.
//!
//! An interpolant is a linear combination of `M` radial kernels centered on
//! the training inputs. Weights are chosen so the interpolant matches the
//! training outputs exactly, which reduces to one symmetric dense solve per
//! fitted model. Differentiating the kernel sum in closed form then yields
//! Jacobian blocks of the interpolated map without touching whatever
//! produced the data.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Relative pairwise-distance threshold below which two centers count as
/// duplicates (relative to the center-cloud diameter).
const DUPLICATE_REL_TOL: f64 = 1e-10;

/// Estimated condition number of the kernel matrix above which a fit is
/// rejected.
const CONDITION_LIMIT: f64 = 1e12;

/// Kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Gaussian,
    Linear,
    Multiquadric,
    InverseQuadric,
    Cubic,
    ThinPlate,
    InverseMultiquadric,
}

impl KernelKind {
    fn uses_shape(self) -> bool {
        !matches!(self, KernelKind::Linear | KernelKind::Cubic | KernelKind::ThinPlate)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Linear => "linear",
            KernelKind::Multiquadric => "multiquadric",
            KernelKind::InverseQuadric => "inverse-quadric",
            KernelKind::Cubic => "cubic",
            KernelKind::ThinPlate => "thin-plate",
            KernelKind::InverseMultiquadric => "inverse-multiquadric",
        }
    }
}

/// A radial kernel with its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    /// Shape parameter; ignored by the polyharmonic kernels.
    pub shape: f64,
}

impl Kernel {
    pub fn new(kind: KernelKind, shape: f64) -> Result<Self> {
        if kind.uses_shape() && !(shape > 0.0) {
            return Err(Error::Config(format!(
                "kernel {} requires a positive shape parameter, got {shape}",
                kind.name()
            )));
        }
        Ok(Self { kind, shape })
    }

    pub fn multiquadric(shape: f64) -> Result<Self> {
        Self::new(KernelKind::Multiquadric, shape)
    }

    /// Kernel value at distance `l >= 0`.
    pub fn value(&self, l: f64) -> f64 {
        let e = self.shape;
        match self.kind {
            KernelKind::Gaussian => (-(l / e).powi(2)).exp(),
            KernelKind::Linear => l,
            KernelKind::Multiquadric => (l * l + e * e).sqrt(),
            KernelKind::InverseQuadric => 1.0 / (l * l + e * e),
            KernelKind::Cubic => l * l * l,
            KernelKind::ThinPlate => {
                if l == 0.0 {
                    0.0
                } else {
                    l * l * l.ln()
                }
            }
            KernelKind::InverseMultiquadric => 1.0 / (l * l + e * e).sqrt(),
        }
    }

    /// `theta'(l) / l`, the chain-rule factor for gradients of
    /// `theta(||z - z_j||)` with respect to `z`. Finite at `l = 0` for every
    /// kernel that is differentiable there.
    fn slope_over_distance(&self, l: f64) -> f64 {
        let e = self.shape;
        match self.kind {
            KernelKind::Gaussian => -2.0 / (e * e) * (-(l / e).powi(2)).exp(),
            KernelKind::Linear => {
                // theta' = 1 so theta'/l blows up at l = 0; callers reject
                // the kernel before differentiating at a center.
                1.0 / l
            }
            KernelKind::Multiquadric => 1.0 / (l * l + e * e).sqrt(),
            KernelKind::InverseQuadric => -2.0 / (l * l + e * e).powi(2),
            KernelKind::Cubic => 3.0 * l,
            KernelKind::ThinPlate => {
                if l == 0.0 {
                    // theta'(l) = 2 l ln l + l -> 0, and the self term of a
                    // gradient at a center vanishes with it.
                    0.0
                } else {
                    2.0 * l.ln() + 1.0
                }
            }
            KernelKind::InverseMultiquadric => -1.0 / (l * l + e * e).powf(1.5),
        }
    }

    /// Whether the gradient of the interpolant is defined at a center.
    pub fn differentiable_at_center(&self) -> bool {
        !matches!(self.kind, KernelKind::Linear)
    }
}

/// Fitted RBF interpolation model with vector-valued outputs.
#[derive(Debug, Clone)]
pub struct RbfModel {
    kernel: Kernel,
    /// `M x dim` center coordinates.
    centers: DMatrix<f64>,
    /// `M x out_dim` weights, one row per center.
    weights: DMatrix<f64>,
    /// Condition estimate of the kernel matrix from the fit.
    cond: f64,
}

/// Symmetric `M x M` kernel matrix `D[i][j] = theta(||c_i - c_j||)`.
pub(crate) fn kernel_matrix(centers: &DMatrix<f64>, kernel: &Kernel) -> DMatrix<f64> {
    let m = centers.nrows();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            d[(i, j)] = kernel.value(row_distance(centers, i, centers.row(j).transpose().as_slice()));
        }
    }
    d
}

fn row_distance(centers: &DMatrix<f64>, i: usize, point: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (k, &p) in point.iter().enumerate() {
        let diff = centers[(i, k)] - p;
        sum += diff * diff;
    }
    sum.sqrt()
}

/// Diameter of the center cloud (max pairwise distance).
fn cloud_diameter(centers: &DMatrix<f64>) -> f64 {
    let m = centers.nrows();
    let mut diam = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = row_distance(centers, i, centers.row(j).transpose().as_slice());
            diam = diam.max(d);
        }
    }
    diam
}

/// Mean nearest-neighbor distance between centers; the default shape
/// parameter before tuning.
pub fn mean_nearest_distance(centers: &DMatrix<f64>) -> f64 {
    let m = centers.nrows();
    if m < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        let mut nearest = f64::INFINITY;
        for j in 0..m {
            if i != j {
                nearest =
                    nearest.min(row_distance(centers, i, centers.row(j).transpose().as_slice()));
            }
        }
        total += nearest;
    }
    total / m as f64
}

impl RbfModel {
    /// Fit weights so the interpolant reproduces `values` at `centers`
    /// exactly. `centers` is `M x dim`, `values` is `M x out_dim`.
    pub fn fit(centers: DMatrix<f64>, values: DMatrix<f64>, kernel: Kernel) -> Result<Self> {
        let m = centers.nrows();
        if m == 0 {
            return Err(Error::Degenerate("rbf fit with zero centers".into()));
        }
        if values.nrows() != m {
            return Err(Error::Dimension(format!(
                "rbf fit: {} centers but {} value rows",
                m,
                values.nrows()
            )));
        }
        let diam = cloud_diameter(&centers);
        for i in 0..m {
            for j in (i + 1)..m {
                let d = row_distance(&centers, i, centers.row(j).transpose().as_slice());
                if d <= DUPLICATE_REL_TOL * diam.max(f64::MIN_POSITIVE) {
                    return Err(Error::DuplicateCenter(format!(
                        "centers {i} and {j} are {d:.3e} apart (cloud diameter {diam:.3e})"
                    )));
                }
            }
        }

        let d = kernel_matrix(&centers, &kernel);
        let svals = d.clone().singular_values();
        let smax = svals.max();
        let smin = svals.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > CONDITION_LIMIT {
            return Err(Error::IllConditioned {
                cond,
                context: format!(
                    "{} kernel, {} centers; increase the shape parameter or deduplicate centers",
                    kernel.kind.name(),
                    m
                ),
            });
        }
        let lu = d.lu();
        let weights = lu.solve(&values).ok_or(Error::IllConditioned {
            cond,
            context: "kernel matrix solve failed".into(),
        })?;

        Ok(Self {
            kernel,
            centers,
            weights,
            cond,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Condition estimate of the kernel matrix reported by the fit.
    pub fn condition(&self) -> f64 {
        self.cond
    }

    pub fn center(&self, i: usize) -> DVector<f64> {
        self.centers.row(i).transpose()
    }

    /// Evaluate the interpolant.
    pub fn eval(&self, point: &DVector<f64>) -> DVector<f64> {
        assert_eq!(point.len(), self.input_dim(), "rbf eval dimension mismatch");
        let mut out = DVector::zeros(self.output_dim());
        for j in 0..self.n_centers() {
            let theta = self
                .kernel
                .value(row_distance(&self.centers, j, point.as_slice()));
            for k in 0..self.output_dim() {
                out[k] += self.weights[(j, k)] * theta;
            }
        }
        out
    }

    /// Analytic Jacobian of the interpolant at training center `i`:
    /// an `out_dim x dim` matrix. The self term vanishes for kernels that
    /// are differentiable at zero distance.
    pub fn grad_at_center(&self, i: usize) -> Result<DMatrix<f64>> {
        if !self.kernel.differentiable_at_center() {
            return Err(Error::NonDifferentiableKernel {
                kernel: self.kernel.kind.name().into(),
            });
        }
        let (m, dim, out) = (self.n_centers(), self.input_dim(), self.output_dim());
        assert!(i < m, "center index out of range");
        let mut g = DMatrix::zeros(out, dim);
        for j in 0..m {
            if j == i {
                continue;
            }
            let l = row_distance(&self.centers, j, self.centers.row(i).transpose().as_slice());
            let factor = self.kernel.slope_over_distance(l);
            for k in 0..dim {
                let dz = self.centers[(i, k)] - self.centers[(j, k)];
                let col = factor * dz;
                for r in 0..out {
                    g[(r, k)] += self.weights[(j, r)] * col;
                }
            }
        }
        Ok(g)
    }

    /// Jacobian columns restricted to one input block.
    pub fn grad_block(&self, i: usize, block: Range<usize>) -> Result<DMatrix<f64>> {
        let full = self.grad_at_center(i)?;
        Ok(full.columns(block.start, block.end - block.start).into())
    }
}

/// Leave-one-out cross-validation error for a kernel choice, via Rippa's
/// closed form: the i-th LOO residual is `w_i / (D^-1)_{ii}`.
fn loo_error(centers: &DMatrix<f64>, values: &DMatrix<f64>, kernel: &Kernel) -> Option<f64> {
    let d = kernel_matrix(centers, kernel);
    let inv = d.clone().try_inverse()?;
    let weights = d.lu().solve(values)?;
    let m = centers.nrows();
    let mut sq = 0.0;
    for i in 0..m {
        let dii = inv[(i, i)];
        if dii == 0.0 || !dii.is_finite() {
            return None;
        }
        for k in 0..values.ncols() {
            let e = weights[(i, k)] / dii;
            sq += e * e;
        }
    }
    let rms = (sq / (m * values.ncols().max(1)) as f64).sqrt();
    rms.is_finite().then_some(rms)
}

/// Pick the shape parameter minimizing the leave-one-out error over a
/// candidate grid, then greedily refine around the best grid point.
/// Candidates that produce singular kernel matrices are skipped; ties keep
/// the earliest candidate.
pub fn tune_shape(
    centers: &DMatrix<f64>,
    values: &DMatrix<f64>,
    kind: KernelKind,
    candidates: &[f64],
) -> Result<f64> {
    if centers.nrows() < 3 {
        return Err(Error::Degenerate(
            "shape tuning needs at least 3 centers".into(),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::Config("empty shape-candidate grid".into()));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let score = |eps: f64| -> Option<f64> {
        let kernel = Kernel::new(kind, eps).ok()?;
        loo_error(centers, values, &kernel)
    };

    let mut best_idx = None;
    let mut best_err = f64::INFINITY;
    for (idx, &eps) in candidates.iter().enumerate() {
        if let Some(err) = score(eps) {
            if err < best_err {
                best_err = err;
                best_idx = Some(idx);
            }
        }
    }
    let best_idx = best_idx.ok_or_else(|| {
        Error::Degenerate("every shape candidate produced a singular kernel matrix".into())
    })?;
    let mut best_eps = candidates[best_idx];

    // Greedy refinement: bisect toward the better neighbor a few times.
    let lo = if best_idx > 0 {
        candidates[best_idx - 1]
    } else {
        best_eps * 0.5
    };
    let hi = if best_idx + 1 < candidates.len() {
        candidates[best_idx + 1]
    } else {
        best_eps * 2.0
    };
    let (mut lo, mut hi) = (lo.min(best_eps), hi.max(best_eps));
    for _ in 0..4 {
        for trial in [0.5 * (lo + best_eps), 0.5 * (best_eps + hi)] {
            if trial > 0.0 {
                if let Some(err) = score(trial) {
                    if err < best_err {
                        best_err = err;
                        best_eps = trial;
                    }
                }
            }
        }
        lo = 0.5 * (lo + best_eps);
        hi = 0.5 * (best_eps + hi);
    }
    Ok(best_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random instance with decently separated centers. Clustered centers
    /// make the kernel matrix ill-conditioned, which blows up the weights
    /// and with them the truncation error of any finite-difference probe;
    /// the pipeline's own fits reject such center sets too.
    fn random_instance(
        rng: &mut ChaCha8Rng,
        m: usize,
        dim: usize,
        out: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let min_sep = 0.5 / (m as f64).powf(1.0 / dim as f64);
        let centers = loop {
            let c = DMatrix::from_fn(m, dim, |_, _| rng.random_range(-1.0..1.0));
            let mut ok = true;
            'outer: for i in 0..m {
                for j in (i + 1)..m {
                    let d = (0..dim)
                        .map(|k| {
                            let diff: f64 = c[(i, k)] - c[(j, k)];
                            diff * diff
                        })
                        .sum::<f64>()
                        .sqrt();
                    if d < min_sep {
                        ok = false;
                        break 'outer;
                    }
                }
            }
            if ok {
                break c;
            }
        };
        let values = DMatrix::from_fn(m, out, |_, _| rng.random_range(-2.0..2.0));
        (centers, values)
    }

    /// Central finite differences of `eval` around a center; the oracle the
    /// analytic gradient is checked against.
    fn fd_jacobian(model: &RbfModel, i: usize, h: f64) -> DMatrix<f64> {
        let dim = model.input_dim();
        let out = model.output_dim();
        let c = model.center(i);
        let mut jac = DMatrix::zeros(out, dim);
        for k in 0..dim {
            let mut plus = c.clone();
            let mut minus = c.clone();
            plus[k] += h;
            minus[k] -= h;
            let diff = (model.eval(&plus) - model.eval(&minus)) / (2.0 * h);
            jac.set_column(k, &diff);
        }
        jac
    }

    pub(crate) fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.amax().max(1e-12);
        (a - b).amax() / scale
    }

    #[test]
    fn single_center_multiquadric_weight() {
        // theta(0) = eps for the multiquadric, so the sole weight is z / eps.
        let centers = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
        let values = DMatrix::from_row_slice(1, 1, &[4.0]);
        let kernel = Kernel::multiquadric(2.0).unwrap();
        let model = RbfModel::fit(centers, values, kernel).unwrap();
        assert_relative_eq!(model.weights[(0, 0)], 4.0 / 2.0, max_relative = 1e-12);
        let at = model.center(0);
        assert_relative_eq!(model.eval(&at)[0], 4.0, max_relative = 1e-12);
        // Gradient at the only center is zero: the self term vanishes.
        let g = model.grad_at_center(0).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn interpolates_training_data_for_all_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kinds = [
            KernelKind::Gaussian,
            KernelKind::Linear,
            KernelKind::Multiquadric,
            KernelKind::InverseQuadric,
            KernelKind::Cubic,
            KernelKind::ThinPlate,
            KernelKind::InverseMultiquadric,
        ];
        for kind in kinds {
            let (centers, values) = random_instance(&mut rng, 12, 3, 2);
            let model = RbfModel::fit(centers, values.clone(), Kernel::new(kind, 1.0).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
            for i in 0..12 {
                let out = model.eval(&model.center(i));
                for k in 0..2 {
                    assert_relative_eq!(out[k], values[(i, k)], max_relative = 1e-8, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn reproduces_linear_function_between_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = |p: &DVector<f64>| 2.0 * p[0] - 0.5 * p[1] + 1.0;
        let centers = DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0));
        let values = DMatrix::from_fn(10, 1, |i, _| f(&centers.row(i).transpose()));
        let model =
            RbfModel::fit(centers, values, Kernel::multiquadric(1.0).unwrap()).unwrap();
        for _ in 0..20 {
            let p = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let got = model.eval(&p)[0];
            let want = f(&p);
            assert!(
                (got - want).abs() <= 0.1 * want.abs().max(1.0),
                "interior interpolation off by more than 10%: {got} vs {want}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [
            KernelKind::Gaussian,
            KernelKind::Multiquadric,
            KernelKind::InverseMultiquadric,
            KernelKind::InverseQuadric,
        ] {
            let (centers, values) = random_instance(&mut rng, 15, 4, 3);
            let model =
                RbfModel::fit(centers, values, Kernel::new(kind, 1.2).unwrap()).unwrap();
            for i in [0, 7, 14] {
                let analytic = model.grad_at_center(i).unwrap();
                let fd = fd_jacobian(&model, i, 1e-5);
                assert!(
                    max_rel_err(&analytic, &fd) < 1e-5,
                    "{}: gradient mismatch {:.3e}",
                    kind.name(),
                    max_rel_err(&analytic, &fd)
                );
            }
        }
    }

    #[test]
    fn antisymmetric_pair_has_opposite_gradients() {
        // Two centers mirrored about the origin with antisymmetric values.
        let centers = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let values = DMatrix::from_row_slice(2, 1, &[-3.0, 3.0]);
        let model =
            RbfModel::fit(centers, values, Kernel::multiquadric(1.0).unwrap()).unwrap();
        let g0 = model.grad_at_center(0).unwrap();
        let g1 = model.grad_at_center(1).unwrap();
        assert_relative_eq!(g0[(0, 0)], g1[(0, 0)], max_relative = 1e-12);
    }

    #[test]
    fn linear_kernel_gradient_rejected() {
        let centers = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let values = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let model =
            RbfModel::fit(centers, values, Kernel::new(KernelKind::Linear, 1.0).unwrap())
                .unwrap();
        assert!(matches!(
            model.grad_at_center(0),
            Err(Error::NonDifferentiableKernel { .. })
        ));
    }

    #[test]
    fn duplicate_centers_rejected() {
        let centers = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let values = DMatrix::zeros(3, 1);
        let err = RbfModel::fit(centers, values, Kernel::multiquadric(1.0).unwrap());
        assert!(matches!(err, Err(Error::DuplicateCenter(_))));
    }

    #[test]
    fn inverse_quadric_decays_far_from_centers() {
        let centers = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let values = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let model = RbfModel::fit(
            centers,
            values,
            Kernel::new(KernelKind::InverseQuadric, 1.0).unwrap(),
        )
        .unwrap();
        let far = model.eval(&DVector::from_element(1, 1e6));
        assert!(far[0].abs() < 1e-9);
    }

    #[test]
    fn tune_shape_zero_values_returns_first_candidate() {
        let centers = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let values = DMatrix::zeros(4, 1);
        let grid = [0.7, 1.3, 2.9];
        let eps = tune_shape(&centers, &values, KernelKind::Multiquadric, &grid).unwrap();
        assert_eq!(eps, 0.7);
    }

    #[test]
    fn tune_shape_single_candidate_is_returned() {
        let centers = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.5]);
        let values = DMatrix::from_row_slice(3, 1, &[1.0, 0.3, -0.4]);
        let eps = tune_shape(&centers, &values, KernelKind::Multiquadric, &[1.7]).unwrap();
        assert_eq!(eps, 1.7);
    }

    #[test]
    fn tune_shape_beats_grid_endpoints_on_smooth_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = DMatrix::from_fn(12, 1, |_, _| rng.random_range(-2.0..2.0));
        let values = DMatrix::from_fn(12, 1, |i, _| {
            let x: f64 = centers[(i, 0)];
            x * x - 0.3 * x
        });
        let grid = [0.05, 0.2, 0.8, 3.2];
        let eps = tune_shape(&centers, &values, KernelKind::Multiquadric, &grid).unwrap();
        let kernel = |e| Kernel::multiquadric(e).unwrap();
        let err_star = loo_error(&centers, &values, &kernel(eps)).unwrap();
        let err_lo = loo_error(&centers, &values, &kernel(grid[0])).unwrap();
        let err_hi = loo_error(&centers, &values, &kernel(grid[3])).unwrap();
        assert!(err_star <= err_lo && err_star <= err_hi);
    }

    #[test]
    fn kernel_matrix_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let centers = DMatrix::from_fn(9, 3, |_, _| rng.random_range(-1.0..1.0));
        let d = kernel_matrix(&centers, &Kernel::multiquadric(0.9).unwrap());
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(d[(i, j)].to_bits(), d[(j, i)].to_bits());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Jointly permuting centers and values leaves eval and grad intact.
        /// A localized Gaussian kernel keeps the system well-conditioned so
        /// the comparison is meaningful at 1e-12.
        #[test]
        fn permutation_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 8;
            let (centers, values) = random_instance(&mut rng, m, 2, 1);
            let kernel = Kernel::new(KernelKind::Gaussian, mean_nearest_distance(&centers)).unwrap();
            let model = RbfModel::fit(centers.clone(), values.clone(), kernel).unwrap();

            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let pcenters = DMatrix::from_fn(m, 2, |i, j| centers[(order[i], j)]);
            let pvalues = DMatrix::from_fn(m, 1, |i, j| values[(order[i], j)]);
            let pmodel = RbfModel::fit(pcenters, pvalues, kernel).unwrap();

            let probe = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let a = model.eval(&probe)[0];
            let b = pmodel.eval(&probe)[0];
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));

            // grad at the same physical center
            let ga = model.grad_at_center(order[0]).unwrap();
            let gb = pmodel.grad_at_center(0).unwrap();
            let scale = ga.amax().max(1.0);
            prop_assert!((ga - gb).amax() <= 1e-12 * scale);
        }

        /// Analytic gradients track the finite-difference oracle on random
        /// small instances, for every differentiable kernel. The shape
        /// parameter follows the pipeline default (mean nearest-neighbor
        /// distance), which keeps the kernel matrix well-conditioned.
        #[test]
        fn gradient_fd_property(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(3..12);
            let dim = rng.random_range(1..5);
            let kind = *[
                KernelKind::Gaussian,
                KernelKind::Multiquadric,
                KernelKind::InverseMultiquadric,
            ].choose(&mut rng).unwrap();
            let model = loop {
                let (centers, values) = random_instance(&mut rng, m, dim, 2);
                let shape = mean_nearest_distance(&centers);
                let model = RbfModel::fit(centers, values, Kernel::new(kind, shape).unwrap()).unwrap();
                if model.condition() < 1e7 {
                    break model;
                }
            };
            let i = rng.random_range(0..m);
            let analytic = model.grad_at_center(i).unwrap();
            let fd = fd_jacobian(&model, i, 1e-5);
            prop_assert!(max_rel_err(&analytic, &fd) < 1e-5);
        }
    }
}

