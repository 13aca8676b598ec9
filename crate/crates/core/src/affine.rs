//! Importance weighted moment matching affine maps.
//!
//! Three maps of increasing complexity move a sample so that its plain
//! moments equal importance weighted ones:
//!
//! * level 1 matches the mean,
//! * level 2 additionally matches marginal variances,
//! * level 3 matches the mean and the full covariance.
//!
//! The implicit proposal density of the moved draws is the original density
//! at the preimage divided by the Jacobian determinant, which is constant for
//! affine maps, so only `log|det|` has to be carried along.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::estimators::{DrawMatrix, LogWeights};
use crate::linalg::{cholesky_jittered, log_diag_sum, lower_inverse, lower_mul, solve_lower};

/// Which moment matching map to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Translation,
    DiagonalScale,
    FullLinear,
}

impl MapKind {
    pub fn from_level(level: u8) -> Option<Self> {
        match level {
            1 => Some(Self::Translation),
            2 => Some(Self::DiagonalScale),
            3 => Some(Self::FullLinear),
            _ => None,
        }
    }

    pub fn level(self) -> u8 {
        match self {
            Self::Translation => 1,
            Self::DiagonalScale => 2,
            Self::FullLinear => 3,
        }
    }
}

/// Where the weighted marginal variance of the level-2 map is centered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceCentering {
    /// Around the unweighted sample mean.
    #[default]
    Unweighted,
    /// Around the weighted mean, like the level-3 covariance.
    Weighted,
}

#[derive(Clone, Debug, PartialEq)]
enum Linear {
    Identity,
    Diagonal(Vec<f64>),
    /// `A = upper * lower^{-1}` for two lower-triangular factors.
    Factors { numer: Array2<f64>, denom: Array2<f64> },
}

/// An invertible affine map `x -> A x + b` with cached `log|det A|`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    kind: MapKind,
    linear: Linear,
    shift: Vec<f64>,
    log_det: f64,
}

impl AffineMap {
    pub fn translation(shift: Vec<f64>) -> Self {
        Self { kind: MapKind::Translation, linear: Linear::Identity, shift, log_det: 0.0 }
    }

    /// `x -> scale * x + shift` with strictly positive scales.
    pub fn diagonal(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::DimensionMismatch { expected: shift.len(), got: scale.len() });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::TransformUnavailable("non-positive scale".into()));
        }
        let log_det = scale.iter().map(|s| s.ln()).sum();
        Ok(Self { kind: MapKind::DiagonalScale, linear: Linear::Diagonal(scale), shift, log_det })
    }

    /// `x -> numer denom^{-1} x + shift` for lower-triangular factors with
    /// positive diagonals.
    pub fn from_factors(numer: Array2<f64>, denom: Array2<f64>, shift: Vec<f64>) -> Result<Self> {
        let d = shift.len();
        if numer.dim() != (d, d) || denom.dim() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: numer.nrows() });
        }
        let positive = |m: &Array2<f64>| (0..d).all(|i| m[[i, i]] > 0.0 && m[[i, i]].is_finite());
        if !positive(&numer) || !positive(&denom) {
            return Err(Error::TransformUnavailable("factor diagonal not positive".into()));
        }
        let log_det = log_diag_sum(&numer) - log_diag_sum(&denom);
        Ok(Self { kind: MapKind::FullLinear, linear: Linear::Factors { numer, denom }, shift, log_det })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn log_det_jacobian(&self) -> f64 {
        self.log_det
    }

    fn linear_apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.linear {
            Linear::Identity => x.to_vec(),
            Linear::Diagonal(s) => x.iter().zip(s).map(|(a, b)| a * b).collect(),
            Linear::Factors { numer, denom } => lower_mul(numer, &solve_lower(denom, x)),
        }
    }

    pub fn apply_point(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.linear_apply(x);
        for (yi, bi) in y.iter_mut().zip(&self.shift) {
            *yi += bi;
        }
        y
    }

    pub fn apply(&self, draws: &DrawMatrix) -> Result<DrawMatrix> {
        TransformChain::from_maps(vec![self.clone()])?.apply(draws)
    }

    pub fn inverse(&self) -> AffineMap {
        let linear = match &self.linear {
            Linear::Identity => Linear::Identity,
            Linear::Diagonal(s) => Linear::Diagonal(s.iter().map(|x| 1.0 / x).collect()),
            Linear::Factors { numer, denom } => {
                Linear::Factors { numer: denom.clone(), denom: numer.clone() }
            }
        };
        let mut inv = AffineMap { kind: self.kind, linear, shift: vec![0.0; self.dim()], log_det: -self.log_det };
        inv.shift = inv.linear_apply(&self.shift).into_iter().map(|x| -x).collect();
        inv
    }

    /// The matrix `A` written out densely.
    pub fn dense_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        match &self.linear {
            Linear::Identity => Array2::eye(d),
            Linear::Diagonal(s) => Array2::from_diag(&ndarray::Array1::from(s.clone())),
            Linear::Factors { numer, denom } => numer.dot(&lower_inverse(denom)),
        }
    }
}

/// An ordered composition of affine maps; the first map is applied first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformChain {
    maps: Vec<AffineMap>,
    total_log_det: f64,
}

impl TransformChain {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_maps(maps: Vec<AffineMap>) -> Result<Self> {
        let mut chain = Self::identity();
        for m in maps {
            chain.push(m)?;
        }
        Ok(chain)
    }

    pub fn push(&mut self, map: AffineMap) -> Result<()> {
        if let Some(first) = self.maps.first() {
            if first.dim() != map.dim() {
                return Err(Error::DimensionMismatch { expected: first.dim(), got: map.dim() });
            }
        }
        self.total_log_det += map.log_det;
        self.maps.push(map);
        Ok(())
    }

    /// `other` applied after `self`.
    pub fn then(&self, other: &TransformChain) -> Result<TransformChain> {
        let mut out = self.clone();
        for m in &other.maps {
            out.push(m.clone())?;
        }
        Ok(out)
    }

    pub fn maps(&self) -> &[AffineMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn total_log_det(&self) -> f64 {
        self.total_log_det
    }

    pub fn apply_point(&self, x: &[f64]) -> Vec<f64> {
        self.maps.iter().fold(x.to_vec(), |acc, m| m.apply_point(&acc))
    }

    pub fn apply(&self, draws: &DrawMatrix) -> Result<DrawMatrix> {
        let d = draws.dim();
        if let Some(m) = self.maps.first() {
            if m.dim() != d {
                return Err(Error::DimensionMismatch { expected: m.dim(), got: d });
            }
        }
        let mut out = draws.as_array().clone();
        for mut row in out.rows_mut() {
            let y = self.apply_point(row.as_slice().expect("standard layout"));
            for (r, v) in row.iter_mut().zip(y) {
                *r = v;
            }
        }
        Ok(DrawMatrix::from_array_unchecked(out))
    }

    /// Reversed order with every member inverted.
    pub fn invert(&self) -> TransformChain {
        let maps: Vec<AffineMap> = self.maps.iter().rev().map(AffineMap::inverse).collect();
        let total_log_det = maps.iter().map(|m| m.log_det).sum();
        TransformChain { maps, total_log_det }
    }
}

/// Log density of the implicitly adapted proposal at transformed draws, given
/// the base density at their preimages.
pub fn implicit_log_density(base_log_g_at_preimage: &[f64], chain: &TransformChain) -> Vec<f64> {
    let c = chain.total_log_det();
    base_log_g_at_preimage.iter().map(|g| g - c).collect()
}

fn check_weights(draws: &DrawMatrix, w: &LogWeights) -> Result<Vec<f64>> {
    if w.len() != draws.n_draws() {
        return Err(Error::LengthMismatch { expected: draws.n_draws(), got: w.len() });
    }
    w.self_normalized_abs()
}

fn weighted_mean_with(draws: &DrawMatrix, wn: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; draws.dim()];
    for (row, &ws) in draws.rows().zip(wn) {
        if ws == 0.0 {
            continue;
        }
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += ws * x;
        }
    }
    mean
}

fn require_two_positive(wn: &[f64]) -> Result<()> {
    if wn.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Err(Error::DegenerateMoments("fewer than two draws with positive weight".into()));
    }
    Ok(())
}

/// Self-normalized weighted mean using absolute weights.
pub fn weighted_mean(draws: &DrawMatrix, w: &LogWeights) -> Result<Vec<f64>> {
    let wn = check_weights(draws, w)?;
    Ok(weighted_mean_with(draws, &wn))
}

/// Weighted second central moment per coordinate around `center`.
fn weighted_diag_moment(draws: &DrawMatrix, wn: &[f64], center: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; draws.dim()];
    for (row, &ws) in draws.rows().zip(wn) {
        if ws == 0.0 {
            continue;
        }
        for ((vi, x), c) in v.iter_mut().zip(row.iter()).zip(center) {
            *vi += ws * (x - c) * (x - c);
        }
    }
    v
}

/// Weighted marginal variance. With [`VarianceCentering::Unweighted`] the
/// squared deviations are taken around the unweighted sample mean.
pub fn weighted_marginal_variance(
    draws: &DrawMatrix,
    w: &LogWeights,
    centering: VarianceCentering,
) -> Result<Vec<f64>> {
    let wn = check_weights(draws, w)?;
    require_two_positive(&wn)?;
    let center = match centering {
        VarianceCentering::Unweighted => draws.column_means(),
        VarianceCentering::Weighted => weighted_mean_with(draws, &wn),
    };
    Ok(weighted_diag_moment(draws, &wn, &center))
}

fn weighted_cov_with(draws: &DrawMatrix, wn: &[f64], center: &[f64]) -> Array2<f64> {
    let d = draws.dim();
    let mut cov = Array2::<f64>::zeros((d, d));
    let mut dev = vec![0.0; d];
    for (row, &ws) in draws.rows().zip(wn) {
        if ws == 0.0 {
            continue;
        }
        for ((dv, x), c) in dev.iter_mut().zip(row.iter()).zip(center) {
            *dv = x - c;
        }
        for i in 0..d {
            let a = ws * dev[i];
            for j in 0..=i {
                cov[[i, j]] += a * dev[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[[j, i]] = cov[[i, j]];
        }
    }
    cov
}

/// Self-normalized weighted covariance around the weighted mean.
pub fn weighted_covariance(draws: &DrawMatrix, w: &LogWeights) -> Result<Array2<f64>> {
    let wn = check_weights(draws, w)?;
    require_two_positive(&wn)?;
    let mean = weighted_mean_with(draws, &wn);
    let cov = weighted_cov_with(draws, &wn, &mean);
    if cholesky_jittered(&cov).is_none() {
        return Err(Error::RankDeficient);
    }
    Ok(cov)
}

/// Options for building moment matching maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MomentOptions {
    pub variance_centering: VarianceCentering,
}

/// Builds the moment matching map of the given kind from draws and weights.
pub fn build_transform(
    kind: MapKind,
    draws: &DrawMatrix,
    w: &LogWeights,
    opts: MomentOptions,
) -> Result<AffineMap> {
    let wn = check_weights(draws, w)?;
    let mean = draws.column_means();
    let mean_w = weighted_mean_with(draws, &wn);
    match kind {
        MapKind::Translation => {
            Ok(AffineMap::translation(mean_w.iter().zip(&mean).map(|(a, b)| a - b).collect()))
        }
        MapKind::DiagonalScale => {
            require_two_positive(&wn)
                .map_err(|e| Error::TransformUnavailable(e.to_string()))?;
            let s = draws.n_draws() as f64;
            let ones = vec![1.0 / s; draws.n_draws()];
            let var = weighted_diag_moment(draws, &ones, &mean);
            let center_w = match opts.variance_centering {
                VarianceCentering::Unweighted => &mean,
                VarianceCentering::Weighted => &mean_w,
            };
            let var_w = weighted_diag_moment(draws, &wn, center_w);
            let scale: Vec<f64> = var_w.iter().zip(&var).map(|(vw, v)| (vw / v).sqrt()).collect();
            let shift = mean_w
                .iter()
                .zip(&scale)
                .zip(&mean)
                .map(|((mw, sc), m)| mw - sc * m)
                .collect();
            AffineMap::diagonal(scale, shift)
        }
        MapKind::FullLinear => {
            require_two_positive(&wn)
                .map_err(|e| Error::TransformUnavailable(e.to_string()))?;
            let s = draws.n_draws() as f64;
            let ones = vec![1.0 / s; draws.n_draws()];
            let cov = weighted_cov_with(draws, &ones, &mean);
            let cov_w = weighted_cov_with(draws, &wn, &mean_w);
            let chol = cholesky_jittered(&cov)
                .ok_or_else(|| Error::TransformUnavailable("sample covariance not positive definite".into()))?;
            let chol_w = cholesky_jittered(&cov_w)
                .ok_or_else(|| Error::TransformUnavailable("weighted covariance not positive definite".into()))?;
            let a_mean = lower_mul(&chol_w, &solve_lower(&chol, &mean));
            let shift = mean_w.iter().zip(&a_mean).map(|(a, b)| a - b).collect();
            AffineMap::from_factors(chol_w, chol, shift)
        }
    }
}
