//! Posterior updates for both inference regimes and the closed-form
//! predictive distributions under null and alternative hypotheses.

use nalgebra::DMatrix;

use crate::core::{
    require_spd, KnownVModel, MatrixSeries, NIWModel, PosteriorKnownV, PosteriorNIW,
};
use crate::error::{Error, Result};
use crate::matdist::{self, MatNormParams, MatTParams};

/// Null and alternative predictive scales under the known-V model.
///
/// `sigma_d = sigma_l + sigma_star` and `sigma_ad = sigma_l + sigma_star /
/// alpha`; at `alpha = 1` the two coincide.
#[derive(Debug, Clone)]
pub struct PredictiveKnownV {
    pub m_star: DMatrix<f64>,
    pub sigma_d: DMatrix<f64>,
    pub sigma_ad: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub alpha: f64,
}

impl PredictiveKnownV {
    pub fn null_logpdf(&self, y: &DMatrix<f64>) -> Result<f64> {
        matdist::matnorm_logpdf(
            y,
            &MatNormParams::new(self.m_star.clone(), self.sigma_d.clone(), self.v.clone())?,
        )
    }

    pub fn alt_logpdf(&self, y: &DMatrix<f64>) -> Result<f64> {
        matdist::matnorm_logpdf(
            y,
            &MatNormParams::new(self.m_star.clone(), self.sigma_ad.clone(), self.v.clone())?,
        )
    }
}

/// Null and alternative matrix Student-t predictives under the NIW model,
/// with the scalar bookkeeping shared by the Bayes factor and its bound.
#[derive(Debug, Clone)]
pub struct PredictiveNIW {
    pub m_star: DMatrix<f64>,
    pub sigma_l: DMatrix<f64>,
    /// Null column scale `L* = Psi* k_d / k*`.
    pub l_star: DMatrix<f64>,
    /// Alternative column scale `L_A* = Psi_A* k_Ad / k_A*`.
    pub l_a_star: DMatrix<f64>,
    pub nu_null: f64,
    pub nu_alt: f64,
    pub k_star: f64,
    pub k_d: f64,
    pub k_a_star: f64,
    pub k_a_d: f64,
    pub m_star_dof: f64,
    pub m_d: f64,
    pub m_a_star: f64,
    pub m_a_d: f64,
    pub alpha: f64,
}

impl PredictiveNIW {
    pub fn null_logpdf(&self, y: &DMatrix<f64>) -> Result<f64> {
        matdist::matt_logpdf(
            y,
            &MatTParams::new(
                self.nu_null,
                self.m_star.clone(),
                self.sigma_l.clone(),
                self.l_star.clone(),
            )?,
        )
    }

    pub fn alt_logpdf(&self, y: &DMatrix<f64>) -> Result<f64> {
        matdist::matt_logpdf(
            y,
            &MatTParams::new(
                self.nu_alt,
                self.m_star.clone(),
                self.sigma_l.clone(),
                self.l_a_star.clone(),
            )?,
        )
    }
}

/// Lower admissible discount for the NIW regime, `(p + 2n) / m_d`.
pub fn alpha_low(p: usize, n: usize, m_d: f64) -> f64 {
    (p as f64 + 2.0 * n as f64) / m_d
}

fn check_series_shape(p: usize, n: usize, data: &MatrixSeries) -> Result<()> {
    if data.p() != p || data.n() != n {
        return Err(Error::shape(format!(
            "series shape {}x{} does not match model {p}x{n}",
            data.p(),
            data.n()
        )));
    }
    Ok(())
}

/// Known-V posterior from sufficient statistics (`y_bar` over `t_count`
/// observations). With prior scale `sigma_l / phi` the posterior is
/// `M* = (phi M + T y_bar) / (phi + T)`, `Sigma* = sigma_l / (phi + T)`.
pub fn update_known_v_from_stats(
    model: &KnownVModel,
    y_bar: Option<&DMatrix<f64>>,
    t_count: usize,
) -> Result<PosteriorKnownV> {
    let phi = model.phi;
    let t = t_count as f64;
    let m_star = match (y_bar, t_count) {
        (_, 0) => model.m.clone(),
        (Some(yb), _) => (&model.m * phi + yb * t) / (phi + t),
        (None, _) => return Err(Error::Degenerate("mean required when t_count > 0".into())),
    };
    let sigma_star = &model.sigma_l / (phi + t);
    PosteriorKnownV::new(m_star, sigma_star, t_count)
}

/// Known-V posterior after absorbing a whole series (empty series returns the
/// prior).
pub fn update_known_v(model: &KnownVModel, data: &MatrixSeries) -> Result<PosteriorKnownV> {
    check_series_shape(model.p(), model.n(), data)?;
    if data.is_empty() {
        return update_known_v_from_stats(model, None, 0);
    }
    let y_bar = data.mean()?;
    update_known_v_from_stats(model, Some(&y_bar), data.len())
}

/// Reference path evaluating the generic stacked-system posterior; cubic in
/// `T p`, retained as a test oracle for small `T`.
pub fn update_known_v_reference(
    model: &KnownVModel,
    data: &MatrixSeries,
) -> Result<PosteriorKnownV> {
    check_series_shape(model.p(), model.n(), data)?;
    let (p, n) = (model.p(), model.n());
    let t = data.len();
    if t == 0 {
        return update_known_v_from_stats(model, None, 0);
    }
    let sigma_p = &model.sigma_l / model.phi;
    // J = iota_T (x) I_p, a (Tp x p) stack of identities
    let mut j = DMatrix::zeros(t * p, p);
    for b in 0..t {
        for i in 0..p {
            j[(b * p + i, i)] = 1.0;
        }
    }
    // big = I_T (x) Sigma_L + J Sigma_P J'
    let mut big = DMatrix::zeros(t * p, t * p);
    for b in 0..t {
        big.view_mut((b * p, b * p), (p, p))
            .copy_from(&model.sigma_l);
    }
    big += &j * &sigma_p * j.transpose();
    let chol = matdist::cholesky(&big, "stacked predictive covariance")?;

    let mut y_stack = DMatrix::zeros(t * p, n);
    for (b, o) in data.obs().iter().enumerate() {
        y_stack.view_mut((b * p, 0), (p, n)).copy_from(&o.y);
        y_stack
            .view_mut((b * p, 0), (p, n))
            .iter_mut()
            .zip(model.m.iter())
            .for_each(|(y, m)| *y -= m);
    }
    let sp_jt = &sigma_p * j.transpose();
    let m_star = &model.m + &sp_jt * chol.solve(&y_stack);
    let sigma_star = &sigma_p - &sp_jt * chol.solve(&(&j * &sigma_p));
    let sigma_star = (&sigma_star + sigma_star.transpose()) / 2.0;
    PosteriorKnownV::new(m_star, sigma_star, t)
}

/// NIW posterior from sufficient statistics. `scatter_total` is the summed
/// column scatter `sum_i (Y_i - y_bar)' Sigma_L^{-1} (Y_i - y_bar)`.
pub fn update_niw_from_stats(
    model: &NIWModel,
    y_bar: Option<&DMatrix<f64>>,
    scatter_total: Option<&DMatrix<f64>>,
    t_count: usize,
) -> Result<PosteriorNIW> {
    let (p, n) = (model.p(), model.n());
    let k = model.k();
    let t = t_count as f64;
    let m_star_dof = model.m_dof + t * p as f64;
    if !(m_star_dof > 2.0 * n as f64) {
        return Err(Error::domain(format!(
            "posterior dof {m_star_dof} must exceed 2n = {}",
            2 * n
        )));
    }
    if t_count == 0 {
        return PosteriorNIW::new(model.m.clone(), k, model.m_dof, model.psi.clone(), 0);
    }
    let y_bar = y_bar.ok_or_else(|| Error::Degenerate("mean required when t_count > 0".into()))?;
    let m_star = (&model.m * k + y_bar * t) / (k + t);
    let chol_l = matdist::cholesky(&model.sigma_l, "likelihood row covariance")?;
    let w = matdist::solve_lower(&chol_l, &(&model.m - y_bar))?;
    let pull = w.transpose() * &w; // (M - y_bar)' Sigma_L^-1 (M - y_bar)
    let mut psi_star = &model.psi + pull * (k * t / (k + t));
    if let Some(s) = scatter_total {
        psi_star += s;
    }
    let psi_star = (&psi_star + psi_star.transpose()) / 2.0;
    require_spd(&psi_star, "posterior Psi (degenerate data)")?;
    PosteriorNIW::new(m_star, k + t, m_star_dof, psi_star, t_count)
}

/// NIW posterior after absorbing a whole series.
pub fn update_niw(model: &NIWModel, data: &MatrixSeries) -> Result<PosteriorNIW> {
    check_series_shape(model.p(), model.n(), data)?;
    if data.is_empty() {
        return update_niw_from_stats(model, None, None, 0);
    }
    let y_bar = data.mean()?;
    let chol_l = matdist::cholesky(&model.sigma_l, "likelihood row covariance")?;
    let n = model.n();
    let mut scatter = DMatrix::zeros(n, n);
    for o in data.obs() {
        let w = matdist::solve_lower(&chol_l, &(&o.y - &y_bar))?;
        scatter += w.transpose() * &w;
    }
    update_niw_from_stats(model, Some(&y_bar), Some(&scatter), data.len())
}

/// Null and alternative matrix-normal predictives under the known-V model.
pub fn predictive_known_v(
    post: &PosteriorKnownV,
    model: &KnownVModel,
    alpha: f64,
) -> Result<PredictiveKnownV> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let sigma_d = &model.sigma_l + &post.sigma_star;
    let sigma_ad = &model.sigma_l + &post.sigma_star / alpha;
    Ok(PredictiveKnownV {
        m_star: post.m_star.clone(),
        sigma_d,
        sigma_ad,
        v: model.v.clone(),
        alpha,
    })
}

/// Null and alternative matrix Student-t predictives under the NIW model.
///
/// Requires `alpha` strictly above the lower bound `(p + 2n) / m_d`; at or
/// below it the alternative normalizer has a multivariate-gamma pole.
pub fn predictive_niw(post: &PosteriorNIW, model: &NIWModel, alpha: f64) -> Result<PredictiveNIW> {
    let (p, n) = (model.p(), model.n());
    let m_d = post.m_star_dof + p as f64;
    let low = alpha_low(p, n, m_d);
    if !(alpha > low && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (alpha_low, 1] with alpha_low = (p + 2n)/m_d = {low}, got {alpha}"
        )));
    }
    let k_star = post.k_star;
    let k_d = k_star + 1.0;
    let k_a_star = alpha * k_star;
    let k_a_d = alpha * k_star + 1.0;
    let m_a_star = alpha * m_d - p as f64;
    let m_a_d = m_a_star + p as f64;
    let psi_a_star = &post.psi_star * alpha;
    let l_star = &post.psi_star * (k_d / k_star);
    let l_a_star = &psi_a_star * (k_a_d / k_a_star);
    Ok(PredictiveNIW {
        m_star: post.m_star.clone(),
        sigma_l: model.sigma_l.clone(),
        l_star,
        l_a_star,
        nu_null: post.m_star_dof - 2.0 * n as f64,
        nu_alt: m_a_star - 2.0 * n as f64,
        k_star,
        k_d,
        k_a_star,
        k_a_d,
        m_star_dof: post.m_star_dof,
        m_d,
        m_a_star,
        m_a_d,
        alpha,
    })
}
