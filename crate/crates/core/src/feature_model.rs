//! Class-conditional emission densities: full-covariance Gaussians and
//! finite mixtures of them, plus the EM clustering used to seed a mixture
//! from labelled training rows.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::logmath::log_sum_exp;
use crate::raster_io::TrainingSet;

/// Rows per block in deterministic parallel reductions. Partial sums are
/// combined in block order, so results do not depend on the thread count.
pub(crate) const REDUCE_BLOCK: usize = 4096;

const GMM_MAX_ITER: usize = 100;
const GMM_TOL: f64 = 1e-6;

/// One multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// Builds a component, adding `eps * I` to the covariance when it is not
    /// comfortably positive definite (`eps = 1e-6 * trace / m`, escalated
    /// tenfold until the factorization succeeds).
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 || cov.len() != m * m {
            return Err(Error::Numeric(format!(
                "component of dimension {m} given {} covariance entries",
                cov.len()
            )));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mean or covariance".into()));
        }
        let mut sym = cov;
        for i in 0..m {
            for j in 0..i {
                let avg = 0.5 * (sym[i * m + j] + sym[j * m + i]);
                sym[i * m + j] = avg;
                sym[j * m + i] = avg;
            }
        }
        let trace: f64 = (0..m).map(|i| sym[i * m + i]).sum();
        let scale = if trace > 0.0 && trace.is_finite() { trace / m as f64 } else { 1.0 };

        if let Some(chol) = cholesky(&sym, m, scale) {
            return Ok(Self::from_parts(mean, sym, chol));
        }
        let mut eps = 1e-6 * scale;
        for _ in 0..16 {
            let mut reg = sym.clone();
            for i in 0..m {
                reg[i * m + i] += eps;
            }
            if let Some(chol) = cholesky(&reg, m, scale) {
                return Ok(Self::from_parts(mean, reg, chol));
            }
            eps *= 10.0;
        }
        Err(Error::Numeric(
            "covariance is not positive definite after regularization".into(),
        ))
    }

    fn from_parts(mean: Vec<f64>, cov: Vec<f64>, chol: Vec<f64>) -> Self {
        let m = mean.len();
        let log_det_half: f64 = (0..m).map(|i| chol[i * m + i].ln()).sum();
        let log_norm = -0.5 * m as f64 * (2.0 * PI).ln() - log_det_half;
        Self {
            mean,
            cov,
            chol,
            log_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major covariance as used for evaluation (after any regularization).
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    /// `ln N(x; mean, cov)`.
    #[inline]
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let m = self.mean.len();
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if m <= 8 {
            &mut z[..m]
        } else {
            heap = vec![0.0; m];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..m {
            let row = &self.chol[i * m..i * m + i];
            let mut s = x[i] - self.mean[i];
            for (l, zj) in row.iter().zip(z.iter()) {
                s -= l * zj;
            }
            let zi = s / self.chol[i * m + i];
            z[i] = zi;
            quad += zi * zi;
        }
        self.log_norm - 0.5 * quad
    }

    /// Draws one vector into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let m = self.mean.len();
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..m {
            let row = &self.chol[i * m..i * m + i + 1];
            out[i] = self.mean[i] + row.iter().zip(&z).map(|(l, v)| l * v).sum::<f64>();
        }
    }
}

/// Lower Cholesky factor, row-major; `None` unless every pivot clears a
/// small floor relative to `scale`.
fn cholesky(a: &[f64], m: usize, scale: f64) -> Option<Vec<f64>> {
    let mat = DMatrix::from_row_slice(m, m, a);
    let chol = mat.cholesky()?;
    let l = chol.l();
    let floor = 1e-10 * scale;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        if !(l[(i, i)] * l[(i, i)] > floor) {
            return None;
        }
        for j in 0..=i {
            out[i * m + j] = l[(i, j)];
        }
    }
    Some(out)
}

/// Emission density of one class: a weighted sum of Gaussian components.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl ClassMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::Validation(format!(
                "mixture needs matching non-empty weights ({}) and components ({})",
                weights.len(),
                components.len()
            )));
        }
        let m = components[0].dim();
        if components.iter().any(|c| c.dim() != m) {
            return Err(Error::Validation("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Validation("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Validation("mixture weights sum to zero".into()));
        }
        let weights = if (total - 1.0).abs() <= 1e-12 {
            weights
        } else {
            weights.iter().map(|w| w / total).collect()
        };
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Writes `ln(phi_i) + ln N_i(x)` for every component into `out` and
    /// returns their log-sum-exp, i.e. the log density.
    #[inline]
    pub fn component_log_terms(&self, x: &[f64], out: &mut [f64]) -> f64 {
        for ((o, w), c) in out.iter_mut().zip(&self.weights).zip(&self.components) {
            *o = if *w > 0.0 { w.ln() + c.log_pdf(x) } else { f64::NEG_INFINITY };
        }
        if out.len() == 1 {
            out[0]
        } else {
            log_sum_exp(&out[..self.components.len()])
        }
    }

    /// Picks a component by weight, then draws from it.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample_into(rng, out);
    }

    /// Writes the block used by the parameter file format.
    pub(crate) fn write_block(&self, out: &mut String) {
        let m = self.dim();
        let _ = writeln!(out, "K {}", self.k());
        let _ = write!(out, "weights");
        for w in &self.weights {
            let _ = write!(out, " {w:.16e}");
        }
        out.push('\n');
        for c in &self.components {
            let _ = write!(out, "mean");
            for v in c.mean() {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
            let _ = write!(out, "cov");
            for v in &c.cov()[..m * m] {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        }
    }
}

/// `ln sum_i phi_i N(x; mu_i, Sigma_i)` via log-sum-exp.
pub fn log_density(mix: &ClassMixture, x: &[f64]) -> f64 {
    let mut terms = vec![0.0; mix.k()];
    mix.component_log_terms(x, &mut terms)
}

/// Component responsibilities for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub gamma: Vec<f64>,
    /// Every component density underflowed; `gamma` fell back to the weights.
    pub underflow: bool,
}

pub fn responsibilities(mix: &ClassMixture, x: &[f64]) -> Responsibilities {
    let mut terms = vec![0.0; mix.k()];
    let lse = mix.component_log_terms(x, &mut terms);
    if !lse.is_finite() {
        return Responsibilities {
            gamma: mix.weights.clone(),
            underflow: true,
        };
    }
    Responsibilities {
        gamma: terms.iter().map(|t| (t - lse).exp()).collect(),
        underflow: false,
    }
}

/// Sum in the same block order as [`weighted_mean_cov`] uses for its weight
/// total, so ratios of the two are exact when the inputs agree.
pub(crate) fn block_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values
        .par_chunks(REDUCE_BLOCK)
        .map(|chunk| chunk.iter().fold(0.0, |acc, v| acc + v))
        .collect();
    partial.iter().fold(0.0, |acc, v| acc + v)
}

/// Weighted mean and covariance of row-major `xs` (`m` columns) under
/// non-negative `weights`. Returns `None` when the weights sum to zero.
pub(crate) fn weighted_mean_cov(xs: &[f64], m: usize, weights: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let rows = weights.len();
    debug_assert_eq!(xs.len(), rows * m);
    let partial: Vec<(f64, Vec<f64>)> = (0..rows.div_ceil(REDUCE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCE_BLOCK;
            let hi = (lo + REDUCE_BLOCK).min(rows);
            let mut sw = 0.0;
            let mut sx = vec![0.0; m];
            for r in lo..hi {
                let w = weights[r];
                sw += w;
                for (s, x) in sx.iter_mut().zip(&xs[r * m..(r + 1) * m]) {
                    *s += w * x;
                }
            }
            (sw, sx)
        })
        .collect();
    let mut sum_w = 0.0;
    let mut sum_x = vec![0.0; m];
    for (sw, sx) in &partial {
        sum_w += sw;
        for (a, b) in sum_x.iter_mut().zip(sx) {
            *a += b;
        }
    }
    if !(sum_w > 0.0) {
        return None;
    }
    let mean: Vec<f64> = sum_x.iter().map(|s| s / sum_w).collect();

    let partial: Vec<Vec<f64>> = (0..rows.div_ceil(REDUCE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCE_BLOCK;
            let hi = (lo + REDUCE_BLOCK).min(rows);
            let mut s = vec![0.0; m * m];
            let mut d = vec![0.0; m];
            for r in lo..hi {
                let w = weights[r];
                if w == 0.0 {
                    continue;
                }
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj = xs[r * m + j] - mean[j];
                }
                for i in 0..m {
                    for j in 0..=i {
                        s[i * m + j] += w * d[i] * d[j];
                    }
                }
            }
            s
        })
        .collect();
    let mut cov = vec![0.0; m * m];
    for s in &partial {
        for (a, b) in cov.iter_mut().zip(s) {
            *a += b;
        }
    }
    for i in 0..m {
        for j in 0..=i {
            let v = cov[i * m + j] / sum_w;
            cov[i * m + j] = v;
            cov[j * m + i] = v;
        }
    }
    Some((sum_w, mean, cov))
}

/// Fits a `k`-component mixture to row-major `data` by EM, with centroids
/// seeded from `k` distinct rows spread by farthest-point selection and every
/// component starting at the pooled covariance.
pub fn fit_gmm(data: &[f64], m: usize, k: usize, seed: u64) -> Result<ClassMixture> {
    let rows = data.len() / m;
    if k == 0 {
        return Err(Error::Initialization("mixture needs K >= 1".into()));
    }
    if rows < k {
        return Err(Error::Initialization(format!(
            "{rows} samples cannot seed {k} mixture components"
        )));
    }
    let ones = vec![1.0; rows];
    let (_, pooled_mean, pooled_cov) =
        weighted_mean_cov(data, m, &ones).expect("non-empty sample");
    if k == 1 {
        let comp = GaussianComponent::new(pooled_mean, pooled_cov)?;
        return Ok(ClassMixture::single(comp));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = farthest_point_seeds(data, m, k, &mut rng);
    let mut components = picks
        .iter()
        .map(|&r| GaussianComponent::new(data[r * m..(r + 1) * m].to_vec(), pooled_cov.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut mix = ClassMixture::new(vec![1.0 / k as f64; k], components.clone())?;

    let mut resp = vec![0.0; rows * k];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..GMM_MAX_ITER {
        let mut ll = 0.0;
        let mut terms = vec![0.0; k];
        for r in 0..rows {
            let lse = mix.component_log_terms(&data[r * m..(r + 1) * m], &mut terms);
            ll += lse;
            for i in 0..k {
                resp[r * k + i] = (terms[i] - lse).exp();
            }
        }
        let mut weights = Vec::with_capacity(k);
        components.clear();
        for i in 0..k {
            let w: Vec<f64> = (0..rows).map(|r| resp[r * k + i]).collect();
            match weighted_mean_cov(data, m, &w) {
                Some((sw, mean, cov)) => {
                    weights.push(sw / rows as f64);
                    components.push(GaussianComponent::new(mean, cov)?);
                }
                None => {
                    // empty component keeps its previous shape with zero weight
                    weights.push(0.0);
                    components.push(mix.components[i].clone());
                }
            }
        }
        mix = ClassMixture::new(weights, components.clone())?;
        if ll - prev_ll < GMM_TOL {
            break;
        }
        prev_ll = ll;
    }
    Ok(mix)
}

/// A random first row, then repeatedly the row farthest (Euclidean) from all
/// rows picked so far; ties go to the lowest index.
fn farthest_point_seeds(data: &[f64], m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rows = data.len() / m;
    let row = |r: usize| &data[r * m..(r + 1) * m];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let first = sample(rng, rows, 1).index(0);
    let mut picks = vec![first];
    let mut nearest: Vec<f64> = (0..rows).map(|r| dist2(row(r), row(first))).collect();
    while picks.len() < k {
        let mut best = None;
        for (r, &d) in nearest.iter().enumerate() {
            if picks.contains(&r) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((r, d));
            }
        }
        let (next, _) = best.expect("rows >= k");
        picks.push(next);
        for (r, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(row(r), row(next)));
        }
    }
    picks
}

/// Seeds one class's mixture from its training rows.
pub fn fit_initial_mixture(train: &TrainingSet, class: u8, k: usize, seed: u64) -> Result<ClassMixture> {
    let data = train.class_features(class);
    fit_gmm(&data, train.dim(), k, seed).map_err(|e| match e {
        Error::Initialization(msg) => Error::Initialization(format!("class {class}: {msg}")),
        other => other,
    })
}
