//! Regularized canonical correlation analysis over paired feature sets.
//!
//! Observation matrices follow the math convention: `d × m` with one
//! column per paired sample. Covariances are mean-centered with 1/(m−1)
//! normalization and ridged by `r·I`; the canonical directions come from
//! the singular value decomposition of `T = Σxx^{−1/2} Σxy Σyy^{−1/2}`,
//! so the projections `W* = Σ^{−1/2}·(U or V)` whiten the regularized
//! covariance on each side. The inverse square roots go through a
//! symmetric eigendecomposition rather than a Cholesky factor so the
//! result is itself symmetric.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, sym_eigen};
use crate::scalar::{cast, Scalar};

/// Ridge added to each auto-covariance diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Fixed value added as-is.
    Absolute(f64),
    /// Factor of the side's mean diagonal entry: `r = factor · trace(Σ)/d`,
    /// so the ridge tracks the feature scale.
    TraceScaled(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::TraceScaled(1e-4)
    }
}

impl Regularization {
    fn resolve<F: Scalar>(&self, sigma: &Array2<F>) -> F {
        match *self {
            Regularization::Absolute(r) => cast::<F>(r),
            Regularization::TraceScaled(factor) => {
                let trace: F = sigma.diag().iter().copied().sum();
                cast::<F>(factor) * trace / cast::<F>(sigma.nrows() as f64)
            }
        }
    }
}

/// Mean-centered second moments of a paired sample, ridge included.
#[derive(Debug, Clone)]
pub struct CovarianceSet<F> {
    /// `d_x × d_x`, with `r_x` already on the diagonal.
    pub sxx: Array2<F>,
    /// `d_y × d_y`, with `r_y` already on the diagonal.
    pub syy: Array2<F>,
    /// `d_x × d_y` cross-covariance.
    pub sxy: Array2<F>,
    pub mean_x: Array1<F>,
    pub mean_y: Array1<F>,
    pub r_x: F,
    pub r_y: F,
    pub m: usize,
}

/// `estimate_covariances(X, Y, reg)` for `X: d_x × m`, `Y: d_y × m` whose
/// columns are paired observations.
pub fn estimate_covariances<F: Scalar>(
    x: &Array2<F>,
    y: &Array2<F>,
    reg: Regularization,
) -> Result<CovarianceSet<F>> {
    let m = x.ncols();
    if y.ncols() != m {
        return Err(Error::ShapeMismatch {
            context: "paired observations".into(),
            expected: format!("{m} columns in both matrices"),
            actual: format!("{} vs {}", m, y.ncols()),
        });
    }
    if m < 2 {
        return Err(Error::NotEnoughSamples { m });
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "covariance estimation input".into(),
        });
    }

    let mean_x = x.mean_axis(Axis(1)).expect("m >= 2");
    let mean_y = y.mean_axis(Axis(1)).expect("m >= 2");
    let xc = x - &mean_x.view().insert_axis(Axis(1));
    let yc = y - &mean_y.view().insert_axis(Axis(1));
    let norm = cast::<F>(1.0 / (m as f64 - 1.0));
    let mut sxx = xc.dot(&xc.t()) * norm;
    let mut syy = yc.dot(&yc.t()) * norm;
    let sxy = xc.dot(&yc.t()) * norm;

    let r_x = reg.resolve(&sxx);
    let r_y = reg.resolve(&syy);
    for i in 0..sxx.nrows() {
        sxx[[i, i]] += r_x;
    }
    for i in 0..syy.nrows() {
        syy[[i, i]] += r_y;
    }
    Ok(CovarianceSet {
        sxx,
        syy,
        sxy,
        mean_x,
        mean_y,
        r_x,
        r_y,
        m,
    })
}

/// Symmetric inverse square root: returns `M` with `M·S·M = I` for
/// symmetric positive-definite `S`, via eigendecomposition
/// `M = V diag(λ^{−1/2}) Vᵀ`.
pub fn inverse_sqrt<F: Scalar>(s: &Array2<F>) -> Result<Array2<F>> {
    let eig = sym_eigen(s)?;
    let tol = F::convergence_tol()
        * eig.values.iter().fold(F::zero(), |a, &v| a.max(v.abs()))
        * cast::<F>(s.nrows() as f64);
    let min = eig.values.iter().copied().fold(F::infinity(), F::min);
    if min <= tol {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: crate::scalar::to_f64(min),
        });
    }
    let scaled = &eig.vectors / &eig.values.mapv(F::sqrt).insert_axis(Axis(0));
    Ok(scaled.dot(&eig.vectors.t()))
}

/// Which side of a fitted model a feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    X,
    Y,
}

/// A fitted CCA: projection matrices with canonical directions as columns,
/// the canonical correlations, and the training means used for centering.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel<F> {
    /// `d_x × k`.
    wx: Array2<F>,
    /// `d_y × k`.
    wy: Array2<F>,
    /// `k` values, sorted non-increasing.
    correlations: Array1<F>,
    mean_x: Array1<F>,
    mean_y: Array1<F>,
    r_x: F,
    r_y: F,
}

impl<F: Scalar> CcaModel<F> {
    pub fn from_parts(
        wx: Array2<F>,
        wy: Array2<F>,
        correlations: Array1<F>,
        mean_x: Array1<F>,
        mean_y: Array1<F>,
        r_x: F,
        r_y: F,
    ) -> Result<Self> {
        let k = correlations.len();
        if wx.ncols() != k || wy.ncols() != k || wx.nrows() != mean_x.len() || wy.nrows() != mean_y.len() {
            return Err(Error::ShapeMismatch {
                context: "CCA model assembly".into(),
                expected: format!("{k} columns and means matching projection rows"),
                actual: format!(
                    "wx {}x{}, wy {}x{}, means {} and {}",
                    wx.nrows(),
                    wx.ncols(),
                    wy.nrows(),
                    wy.ncols(),
                    mean_x.len(),
                    mean_y.len()
                ),
            });
        }
        Ok(CcaModel {
            wx,
            wy,
            correlations,
            mean_x,
            mean_y,
            r_x,
            r_y,
        })
    }

    pub fn wx(&self) -> &Array2<F> {
        &self.wx
    }

    pub fn wy(&self) -> &Array2<F> {
        &self.wy
    }

    pub fn correlations(&self) -> &Array1<F> {
        &self.correlations
    }

    pub fn mean_x(&self) -> &Array1<F> {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &Array1<F> {
        &self.mean_y
    }

    pub fn regularization(&self) -> (F, F) {
        (self.r_x, self.r_y)
    }

    pub fn components(&self) -> usize {
        self.correlations.len()
    }

    pub fn input_dim(&self, side: Side) -> usize {
        match side {
            Side::X => self.wx.nrows(),
            Side::Y => self.wy.nrows(),
        }
    }

    /// Model keeping only the first `k` canonical components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.components() {
            return Err(Error::Config {
                reason: format!(
                    "cannot keep {k} of {} canonical components",
                    self.components()
                ),
            });
        }
        Ok(CcaModel {
            wx: self.wx.slice(ndarray::s![.., ..k]).to_owned(),
            wy: self.wy.slice(ndarray::s![.., ..k]).to_owned(),
            correlations: self.correlations.slice(ndarray::s![..k]).to_owned(),
            mean_x: self.mean_x.clone(),
            mean_y: self.mean_y.clone(),
            r_x: self.r_x,
            r_y: self.r_y,
        })
    }
}

/// Fits CCA on paired `d_x × m` / `d_y × m` observations: the SVD
/// `T = Σxx^{−1/2}·Σxy·Σyy^{−1/2} = UΛVᵀ` gives `W*_x = Σxx^{−1/2}U`,
/// `W*_y = Σyy^{−1/2}V`, and correlations Λ; `min(d_x, d_y)` components
/// are retained.
pub fn fit_cca<F: Scalar>(x: &Array2<F>, y: &Array2<F>, reg: Regularization) -> Result<CcaModel<F>> {
    let cov = estimate_covariances(x, y, reg)?;
    fit_cca_from_covariances(&cov)
}

/// The SVD solve on already-estimated covariances.
pub fn fit_cca_from_covariances<F: Scalar>(cov: &CovarianceSet<F>) -> Result<CcaModel<F>> {
    let isx = inverse_sqrt(&cov.sxx)?;
    let isy = inverse_sqrt(&cov.syy)?;
    let t = isx.dot(&cov.sxy).dot(&isy);
    let dec = svd(&t)?;
    let wx = isx.dot(&dec.u);
    let wy = isy.dot(&dec.vt.t());
    CcaModel::from_parts(wx, wy, dec.s, cov.mean_x.clone(), cov.mean_y.clone(), cov.r_x, cov.r_y)
}

/// Projects a `d × m` feature batch into the joint space:
/// `W*ᵀ·(f − mean)`, giving a `k × m` result.
pub fn project<F: Scalar>(model: &CcaModel<F>, features: &Array2<F>, side: Side) -> Result<Array2<F>> {
    let (w, mean) = match side {
        Side::X => (&model.wx, &model.mean_x),
        Side::Y => (&model.wy, &model.mean_y),
    };
    if features.nrows() != w.nrows() {
        return Err(Error::ShapeMismatch {
            context: "CCA projection".into(),
            expected: format!("{} feature rows", w.nrows()),
            actual: format!("{} feature rows", features.nrows()),
        });
    }
    let centered = features - &mean.view().insert_axis(Axis(1));
    Ok(w.t().dot(&centered))
}

/// Projects a single feature vector; see [`project`].
pub fn project_vec<F: Scalar>(model: &CcaModel<F>, feature: &Array1<F>, side: Side) -> Result<Array1<F>> {
    let m = feature.len();
    let mat = project(model, &feature.view().insert_axis(Axis(1)).to_owned(), side)?;
    debug_assert_eq!(mat.ncols(), 1);
    debug_assert_eq!(m, model.input_dim(side));
    Ok(mat.index_axis(Axis(1), 0).to_owned())
}

/// Largest absolute deviation of `WᵀΣW` from the identity; the whitening
/// residual of one side of a fitted model against its ridged covariance.
pub fn whitening_residual<F: Scalar>(w: &Array2<F>, sigma: &Array2<F>) -> F {
    let prod = w.t().dot(sigma).dot(w);
    let k = prod.nrows();
    let mut worst = F::zero();
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { F::one() } else { F::zero() };
            worst = worst.max((prod[[i, j]] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(d: usize, m: usize, seed: u64, label: &str) -> Array2<f64> {
        let mut rng = substream(seed, label);
        Array2::from_shape_fn((d, m), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn two_point_covariances_match_the_closed_form() {
        // X = Y = {1, 3} in 1-D: mean 2, variance (1² + 1²)/(2−1) = 2.
        let x = Array2::from_shape_vec((1, 2), vec![1.0f64, 3.0]).unwrap();
        let cov = estimate_covariances(&x, &x, Regularization::Absolute(0.25)).unwrap();
        assert!((cov.sxx[[0, 0]] - 2.25).abs() < 1e-15);
        assert!((cov.syy[[0, 0]] - 2.25).abs() < 1e-15);
        assert!((cov.sxy[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((cov.mean_x[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_leaves_only_the_ridge() {
        let x = Array2::from_elem((3, 10), 5.0);
        let y = random_matrix(2, 10, 1, "cov-y");
        let cov = estimate_covariances(&x, &y, Regularization::Absolute(0.5)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.5 } else { 0.0 };
                assert!((cov.sxx[[i, j]] - expected).abs() < 1e-15);
            }
        }
        assert!(cov.sxy.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn covariances_match_a_direct_formula_oracle() {
        let x = random_matrix(3, 50, 2, "cov-x");
        let y = random_matrix(3, 50, 2, "cov-y");
        let cov = estimate_covariances(&x, &y, Regularization::Absolute(0.0)).unwrap();

        // Independent route: explicit loops over the definition.
        let m = 50usize;
        let mean = |a: &Array2<f64>, i: usize| (0..m).map(|s| a[[i, s]]).sum::<f64>() / m as f64;
        for i in 0..3 {
            for j in 0..3 {
                let (mi, mj) = (mean(&x, i), mean(&x, j));
                let direct: f64 = (0..m).map(|s| (x[[i, s]] - mi) * (x[[j, s]] - mj)).sum::<f64>() / (m - 1) as f64;
                assert!((cov.sxx[[i, j]] - direct).abs() < 1e-12);
                let (mi, mj) = (mean(&x, i), mean(&y, j));
                let cross: f64 = (0..m).map(|s| (x[[i, s]] - mi) * (y[[j, s]] - mj)).sum::<f64>() / (m - 1) as f64;
                assert!((cov.sxy[[i, j]] - cross).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_scaling_tracks_the_feature_scale() {
        let x = random_matrix(4, 60, 3, "scale-x");
        let y = random_matrix(4, 60, 3, "scale-y");
        let cov = estimate_covariances(&x, &y, Regularization::TraceScaled(1e-4)).unwrap();
        let raw = estimate_covariances(&x, &y, Regularization::Absolute(0.0)).unwrap();
        let expected = 1e-4 * raw.sxx.diag().sum() / 4.0;
        assert!((cov.r_x - expected).abs() < 1e-15);
        // Scaling X by 10 scales the resolved ridge by 100.
        let cov_scaled = estimate_covariances(&(&x * 10.0), &y, Regularization::TraceScaled(1e-4)).unwrap();
        assert!((cov_scaled.r_x - 100.0 * expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn too_few_samples_are_rejected() {
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            estimate_covariances(&x, &x, Regularization::default()),
            Err(Error::NotEnoughSamples { m: 1 })
        ));
    }

    #[test]
    fn inverse_sqrt_of_identity_and_diagonals() {
        let eye = Array2::<f64>::eye(4);
        let m = inverse_sqrt(&eye).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((m[[i, j]] - expected).abs() < 1e-12);
            }
        }
        let d = Array2::from_diag(&ndarray::arr1(&[4.0f64, 9.0]));
        let m = inverse_sqrt(&d).unwrap();
        assert!((m[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((m[[1, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert!(m[[0, 1]].abs() < 1e-14 && m[[1, 0]].abs() < 1e-14);
    }

    #[test]
    fn inverse_sqrt_satisfies_its_defining_identity() {
        let a = random_matrix(5, 5, 4, "spd-base");
        let spd = a.dot(&a.t()) + Array2::<f64>::eye(5) * 0.1;
        let m = inverse_sqrt(&spd).unwrap();
        // Symmetric by construction.
        for i in 0..5 {
            for j in 0..5 {
                assert!((m[[i, j]] - m[[j, i]]).abs() < 1e-12);
            }
        }
        let prod = m.dot(&spd).dot(&m);
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expected).abs() < 1e-10, "entry ({i},{j}) = {}", prod[[i, j]]);
            }
        }
    }

    #[test]
    fn non_positive_definite_input_is_rejected() {
        let bad = Array2::from_diag(&ndarray::arr1(&[1.0, -0.5]));
        assert!(matches!(inverse_sqrt(&bad), Err(Error::NotPositiveDefinite { .. })));
        let singular = Array2::from_diag(&ndarray::arr1(&[1.0, 0.0]));
        assert!(matches!(inverse_sqrt(&singular), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn identical_modalities_correlate_perfectly() {
        let x = random_matrix(3, 40, 5, "self");
        let model = fit_cca(&x, &x, Regularization::Absolute(1e-6)).unwrap();
        assert_eq!(model.components(), 3);
        for &rho in model.correlations() {
            assert!(rho >= 1.0 - 1e-4, "correlation {rho}");
            assert!(rho <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn sign_flips_do_not_reduce_correlation() {
        let x = random_matrix(1, 30, 6, "sign");
        let y = -&x;
        let model = fit_cca(&x, &y, Regularization::Absolute(1e-8)).unwrap();
        assert!((model.correlations()[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn correlations_match_a_generalized_eigenvalue_oracle() {
        // Implementation route: inverse square roots + Jacobi SVD.
        // Oracle route: ρ² are the eigenvalues of Σxx⁻¹ Σxy Σyy⁻¹ Σyx,
        // solved with a foreign library at full precision.
        let x = random_matrix(3, 50, 7, "geig-x");
        let noise = random_matrix(2, 50, 7, "geig-n");
        let mix = random_matrix(2, 3, 7, "geig-mix");
        let y = mix.dot(&x) + &(noise * 0.5);
        let reg = Regularization::Absolute(1e-5);
        let model = fit_cca(&x, &y, reg).unwrap();
        let cov = estimate_covariances(&x, &y, reg).unwrap();

        let to_na = |a: &Array2<f64>| {
            nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
        };
        let sxx = to_na(&cov.sxx);
        let syy = to_na(&cov.syy);
        let sxy = to_na(&cov.sxy);
        let m = sxx.clone().try_inverse().unwrap()
            * &sxy
            * syy.clone().try_inverse().unwrap()
            * sxy.transpose();
        let mut rho: Vec<f64> = m
            .complex_eigenvalues()
            .iter()
            .map(|c| c.re.max(0.0).sqrt())
            .collect();
        rho.sort_by(|a, b| b.partial_cmp(a).unwrap());

        assert_eq!(model.components(), 2);
        for (k, &got) in model.correlations().iter().enumerate() {
            assert!(
                (got - rho[k]).abs() < 1e-8,
                "component {k}: {got} vs oracle {}",
                rho[k]
            );
        }
    }

    #[test]
    fn projections_whiten_the_regularized_covariance() {
        let x = random_matrix(4, 80, 8, "whiten-x");
        let y = random_matrix(3, 80, 8, "whiten-y");
        let reg = Regularization::default();
        let model = fit_cca(&x, &y, reg).unwrap();
        let cov = estimate_covariances(&x, &y, reg).unwrap();
        assert!(whitening_residual(model.wx(), &cov.sxx) < 1e-6);
        assert!(whitening_residual(model.wy(), &cov.syy) < 1e-6);
    }

    #[test]
    fn training_projections_reproduce_the_stored_correlations() {
        let x = random_matrix(3, 100, 9, "corr-x");
        let drift = random_matrix(3, 100, 9, "corr-d");
        let y = &x * 0.8 + &(drift * 0.6);
        let model = fit_cca(&x, &y, Regularization::Absolute(1e-9)).unwrap();
        let px = project(&model, &x, Side::X).unwrap();
        let py = project(&model, &y, Side::Y).unwrap();
        let m = 100f64;
        for k in 0..model.components() {
            let (a, b) = (px.row(k), py.row(k));
            let (ma, mb) = (a.sum() / m, b.sum() / m);
            let cov_ab: f64 = a.iter().zip(b.iter()).map(|(&u, &v)| (u - ma) * (v - mb)).sum::<f64>() / (m - 1.0);
            let var_a: f64 = a.iter().map(|&u| (u - ma) * (u - ma)).sum::<f64>() / (m - 1.0);
            let var_b: f64 = b.iter().map(|&v| (v - mb) * (v - mb)).sum::<f64>() / (m - 1.0);
            // Unit variance: the whitening constraint seen from the data.
            assert!((var_a - 1.0).abs() < 1e-6, "component {k} var {var_a}");
            assert!((var_b - 1.0).abs() < 1e-6, "component {k} var {var_b}");
            let empirical = cov_ab / (var_a * var_b).sqrt();
            let stored = model.correlations()[k];
            assert!(
                (empirical - stored).abs() < 1e-8,
                "component {k}: empirical {empirical} vs stored {stored}"
            );
        }
    }

    #[test]
    fn projecting_the_training_mean_gives_zero() {
        let x = random_matrix(4, 30, 10, "mean-x");
        let y = random_matrix(2, 30, 10, "mean-y");
        let model = fit_cca(&x, &y, Regularization::default()).unwrap();
        let zx = project_vec(&model, &model.mean_x().clone(), Side::X).unwrap();
        assert!(zx.iter().all(|v| v.abs() < 1e-12));
        let zy = project_vec(&model, &model.mean_y().clone(), Side::Y).unwrap();
        assert!(zy.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn correlations_are_invariant_to_invertible_mixing() {
        let x = random_matrix(3, 120, 11, "mix-x");
        let shared = random_matrix(3, 120, 11, "mix-s");
        let y = &x + &shared;
        let reg = Regularization::Absolute(1e-10);
        let base = fit_cca(&x, &y, reg).unwrap();
        let a = Array2::from_shape_vec(
            (3, 3),
            vec![2.0, 0.3, -0.5, 0.0, 1.5, 0.7, 0.1, 0.0, 0.9],
        )
        .unwrap();
        let mixed = fit_cca(&a.dot(&x), &y, reg).unwrap();
        for k in 0..base.components() {
            let (u, v) = (base.correlations()[k], mixed.correlations()[k]);
            assert!((u - v).abs() < 1e-6, "component {k}: {u} vs {v}");
        }
    }

    #[test]
    fn independent_data_shows_little_correlation() {
        let mut top_sum = 0.0;
        for seed in 0..20u64 {
            let x = random_matrix(4, 2000, 100 + seed, "indep-x");
            let y = random_matrix(4, 2000, 200 + seed, "indep-y");
            let model = fit_cca(&x, &y, Regularization::default()).unwrap();
            let rho = model.correlations();
            for k in 1..rho.len() {
                assert!(rho[k] <= rho[k - 1] + 1e-12, "not sorted at {k}");
            }
            assert!(rho.iter().all(|&r| (0.0..=1.0 + 1e-8).contains(&r)));
            top_sum += rho[0];
        }
        assert!(top_sum / 20.0 < 0.3, "mean top correlation {}", top_sum / 20.0);
    }

    #[test]
    fn truncation_keeps_the_leading_components() {
        let x = random_matrix(4, 50, 12, "trunc-x");
        let y = random_matrix(3, 50, 12, "trunc-y");
        let model = fit_cca(&x, &y, Regularization::default()).unwrap();
        let cut = model.truncated(2).unwrap();
        assert_eq!(cut.components(), 2);
        assert_eq!(cut.correlations()[0], model.correlations()[0]);
        let full = project(&model, &x, Side::X).unwrap();
        let part = project(&cut, &x, Side::X).unwrap();
        assert_eq!(part.nrows(), 2);
        for j in 0..50 {
            assert_eq!(part[[0, j]], full[[0, j]]);
            assert_eq!(part[[1, j]], full[[1, j]]);
        }
        assert!(model.truncated(0).is_err());
        assert!(model.truncated(4).is_err());
    }

    #[test]
    fn projection_rejects_mismatched_dimensions() {
        let x = random_matrix(4, 30, 13, "dim-x");
        let y = random_matrix(2, 30, 13, "dim-y");
        let model = fit_cca(&x, &y, Regularization::default()).unwrap();
        let wrong = random_matrix(3, 5, 13, "dim-w");
        assert!(matches!(project(&model, &wrong, Side::X), Err(Error::ShapeMismatch { .. })));
    }
}
