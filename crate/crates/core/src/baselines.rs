//! Comparison methods: EM on independent cells with elevation as an extra
//! band, and label propagation along the split tree seeded by a maximum
//! likelihood classifier.

use crate::error::{Error, Result};
use crate::feature_model::{block_sum, fit_gmm, weighted_mean_cov, GaussianComponent};
use crate::logmath::ln_prob;
use crate::raster_io::{RasterStack, TrainingSet};
use crate::split_tree::SplitTree;

/// Independent-cell model over `(features, elevation)`. The covariance of
/// each class is block diagonal: no correlation between the feature bands and
/// elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct IidParams {
    pub class_prior: [f64; 2],
    pub classes: [GaussianComponent; 2],
}

impl IidParams {
    /// Feature dimension, not counting elevation.
    pub fn feature_dim(&self) -> usize {
        self.classes[0].dim() - 1
    }

    fn elevation_only(&self, c: usize) -> GaussianComponent {
        let m = self.feature_dim();
        let comp = &self.classes[c];
        let var = comp.cov()[m * (m + 1) + m];
        GaussianComponent::new(vec![comp.mean()[m]], vec![var]).expect("positive variance")
    }
}

fn block_diagonal(mean: Vec<f64>, cov: &[f64]) -> Result<GaussianComponent> {
    let d = mean.len();
    let m = d - 1;
    let mut c = cov.to_vec();
    for j in 0..m {
        c[m * d + j] = 0.0;
        c[j * d + m] = 0.0;
    }
    GaussianComponent::new(mean, c)
}

fn augmented(stack: &RasterStack) -> Vec<f64> {
    let m = stack.dim();
    let mut out = Vec::with_capacity(stack.observed_cells().len() * (m + 1));
    for (i, &cell) in stack.observed_cells().iter().enumerate() {
        out.extend_from_slice(stack.observed_feature(i));
        out.push(stack.elevation.values[cell as usize]);
    }
    out
}

/// Class posteriors `P(c | x)` for every row; exact ties split evenly.
fn posteriors(prior: [f64; 2], comps: [&GaussianComponent; 2], xs: &[f64], d: usize) -> [Vec<f64>; 2] {
    let rows = xs.len() / d;
    let mut out = [vec![0.0; rows], vec![0.0; rows]];
    for r in 0..rows {
        let x = &xs[r * d..(r + 1) * d];
        let a = ln_prob(prior[0]) + comps[0].log_pdf(x);
        let b = ln_prob(prior[1]) + comps[1].log_pdf(x);
        let p1 = if a.is_finite() || b.is_finite() {
            1.0 / (1.0 + (a - b).exp())
        } else {
            0.5
        };
        out[0][r] = 1.0 - p1;
        out[1][r] = p1;
    }
    out
}

fn iid_delta(a: &IidParams, b: &IidParams, scale: &[f64]) -> f64 {
    let d = scale.len();
    let mut delta = (a.class_prior[1] - b.class_prior[1]).abs();
    for (ca, cb) in a.classes.iter().zip(&b.classes) {
        for i in 0..d {
            delta = delta.max((ca.mean()[i] - cb.mean()[i]).abs() / scale[i]);
            for j in 0..d {
                delta = delta.max((ca.cov()[i * d + j] - cb.cov()[i * d + j]).abs() / (scale[i] * scale[j]));
            }
        }
    }
    delta
}

/// EM over the observed cells. The feature block starts from the training
/// moments of each class; the elevation block starts from observed cells
/// weighted by their feature-only class posteriors; priors start at 1/2.
pub fn em_iid_fit(stack: &RasterStack, train: &TrainingSet, max_iter: usize, tol: f64) -> Result<IidParams> {
    let m = stack.dim();
    if train.dim() != m {
        return Err(Error::Validation(format!(
            "training rows have {} features, stack has {m}",
            train.dim()
        )));
    }
    let obs = stack.observed_cells().len();
    if obs == 0 {
        return Err(Error::Validation("no observed cells to learn from".into()));
    }
    let d = m + 1;
    let xs = augmented(stack);
    let feature_models = [
        fit_gmm(&train.class_features(0), m, 1, 0)?.components()[0].clone(),
        fit_gmm(&train.class_features(1), m, 1, 0)?.components()[0].clone(),
    ];
    let feature_post = posteriors(
        [0.5, 0.5],
        [&feature_models[0], &feature_models[1]],
        stack.observed_features(),
        m,
    );
    let elevations: Vec<f64> = stack
        .observed_cells()
        .iter()
        .map(|&c| stack.elevation.values[c as usize])
        .collect();
    let mut init = Vec::with_capacity(2);
    for c in 0..2 {
        let (mean_e, var_e) = match weighted_mean_cov(&elevations, 1, &feature_post[c]) {
            Some((_, mu, var)) => (mu[0], var[0]),
            None => {
                let (_, mu, var) = weighted_mean_cov(&elevations, 1, &vec![1.0; obs]).expect("observed cells");
                (mu[0], var[0])
            }
        };
        let fm = &feature_models[c];
        let mut mean = fm.mean().to_vec();
        mean.push(mean_e);
        let mut cov = vec![0.0; d * d];
        for i in 0..m {
            for j in 0..m {
                cov[i * d + j] = fm.cov()[i * m + j];
            }
        }
        cov[m * d + m] = var_e;
        init.push(GaussianComponent::new(mean, cov)?);
    }
    let c1 = init.pop().unwrap();
    let c0 = init.pop().unwrap();
    let mut params = IidParams {
        class_prior: [0.5, 0.5],
        classes: [c0, c1],
    };

    let scale: Vec<f64> = match weighted_mean_cov(&xs, d, &vec![1.0; obs]) {
        Some((_, _, cov)) => (0..d)
            .map(|j| {
                let s = cov[j * d + j].sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect(),
        None => vec![1.0; d],
    };
    for _ in 0..max_iter {
        let post = posteriors(params.class_prior, [&params.classes[0], &params.classes[1]], &xs, d);
        let mut next = params.clone();
        let p1 = block_sum(&post[1]) / obs as f64;
        next.class_prior = [1.0 - p1, p1];
        for c in 0..2 {
            if let Some((_, mean, cov)) = weighted_mean_cov(&xs, d, &post[c]) {
                next.classes[c] = block_diagonal(mean, &cov)?;
            }
        }
        let delta = iid_delta(&params, &next, &scale);
        params = next;
        if delta < tol {
            break;
        }
    }
    Ok(params)
}

/// Observed cells use the full joint density; the rest use elevation alone.
/// Ties go to class 0.
pub fn em_iid_predict(params: &IidParams, stack: &RasterStack) -> Vec<u8> {
    let m = params.feature_dim();
    let prior = [ln_prob(params.class_prior[0]), ln_prob(params.class_prior[1])];
    let elev = [params.elevation_only(0), params.elevation_only(1)];
    let mut out = vec![0u8; stack.len()];
    for (k, o) in out.iter_mut().enumerate() {
        let e = stack.elevation.values[k];
        let (a, b) = if stack.is_observed(k) {
            let mut x: Vec<f64> = stack.features.iter().map(|band| band.values[k]).collect();
            debug_assert_eq!(x.len(), m);
            x.push(e);
            (
                prior[0] + params.classes[0].log_pdf(&x),
                prior[1] + params.classes[1].log_pdf(&x),
            )
        } else {
            (prior[0] + elev[0].log_pdf(&[e]), prior[1] + elev[1].log_pdf(&[e]))
        };
        *o = u8::from(b > a);
    }
    out
}

/// Maximum likelihood classifier: one Gaussian per class from training rows,
/// priors from class frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlc {
    pub prior: [f64; 2],
    pub classes: [GaussianComponent; 2],
}

impl Mlc {
    pub fn fit(train: &TrainingSet) -> Result<Self> {
        let m = train.dim();
        let total = train.len() as f64;
        let g0 = fit_gmm(&train.class_features(0), m, 1, 0)?.components()[0].clone();
        let g1 = fit_gmm(&train.class_features(1), m, 1, 0)?.components()[0].clone();
        Ok(Self {
            prior: [train.class_count(0) as f64 / total, train.class_count(1) as f64 / total],
            classes: [g0, g1],
        })
    }

    pub fn classify(&self, x: &[f64]) -> u8 {
        let a = ln_prob(self.prior[0]) + self.classes[0].log_pdf(x);
        let b = ln_prob(self.prior[1]) + self.classes[1].log_pdf(x);
        u8::from(b > a)
    }
}

/// Scores for every node after propagation, with `seeds[n] = Some(label)`
/// clamped. Unclamped nodes end at the average of their tree neighbours,
/// solved exactly by elimination along the tree.
pub fn propagate_labels(tree: &SplitTree, seeds: &[Option<u8>]) -> Result<Vec<f64>> {
    let n = tree.len();
    if !seeds.iter().any(Option::is_some) {
        return Err(Error::Validation("label propagation needs at least one seed".into()));
    }
    // s_n = a_n + b_n * s_child
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for &node in tree.order() {
        let k = node as usize;
        if let Some(label) = seeds[k] {
            a[k] = f64::from(label);
            continue;
        }
        let (mut sa, mut sb) = (0.0, 0.0);
        for &p in tree.parents(k) {
            sa += a[p as usize];
            sb += b[p as usize];
        }
        let degree = tree.parents(k).len() + usize::from(tree.child(k).is_some());
        let denom = degree as f64 - sb;
        if denom > 0.0 {
            a[k] = sa / denom;
            b[k] = if tree.child(k).is_some() { 1.0 / denom } else { 0.0 };
        } else {
            // nothing clamped upstream: follows the child
            a[k] = 0.0;
            b[k] = 1.0;
        }
    }
    let mut score = vec![0.0; n];
    for &node in tree.order().iter().rev() {
        let k = node as usize;
        score[k] = match tree.child(k) {
            Some(c) => a[k] + b[k] * score[c],
            None => a[k],
        };
    }
    Ok(score)
}

/// Jacobi sweeps of neighbour averaging until the largest change is below
/// `tol` or `max_sweeps` have run. Unclamped nodes start at 0.5.
pub fn propagate_labels_iterative(
    tree: &SplitTree,
    seeds: &[Option<u8>],
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = tree.len();
    if !seeds.iter().any(Option::is_some) {
        return Err(Error::Validation("label propagation needs at least one seed".into()));
    }
    let mut cur: Vec<f64> = seeds.iter().map(|s| s.map_or(0.5, f64::from)).collect();
    let mut next = cur.clone();
    for sweep in 1..=max_sweeps {
        let mut change: f64 = 0.0;
        for k in 0..n {
            if seeds[k].is_some() {
                continue;
            }
            let mut sum = 0.0;
            let mut count = 0.0;
            for &p in tree.parents(k) {
                sum += cur[p as usize];
                count += 1.0;
            }
            if let Some(c) = tree.child(k) {
                sum += cur[c];
                count += 1.0;
            }
            next[k] = if count > 0.0 { sum / count } else { cur[k] };
            change = change.max((next[k] - cur[k]).abs());
        }
        std::mem::swap(&mut cur, &mut next);
        if change < tol {
            return Ok((cur, sweep));
        }
    }
    Ok((cur, max_sweeps))
}

/// MLC labels at observed cells, propagated over the tree to the rest.
pub fn lp_structure(stack: &RasterStack, tree: &SplitTree, train: &TrainingSet) -> Result<Vec<u8>> {
    if tree.len() != stack.len() {
        return Err(Error::Alignment(format!(
            "tree has {} nodes, stack has {} cells",
            tree.len(),
            stack.len()
        )));
    }
    if stack.observed_cells().is_empty() {
        return Err(Error::Validation("no observed cells to seed label propagation".into()));
    }
    let mlc = Mlc::fit(train)?;
    let mut seeds = vec![None; stack.len()];
    for (i, &cell) in stack.observed_cells().iter().enumerate() {
        seeds[cell as usize] = Some(mlc.classify(stack.observed_feature(i)));
    }
    let score = propagate_labels(tree, &seeds)?;
    Ok(seeds
        .iter()
        .zip(&score)
        .map(|(s, &v)| s.unwrap_or(u8::from(v > 0.5)))
        .collect())
}
