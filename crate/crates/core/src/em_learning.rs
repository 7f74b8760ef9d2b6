//! Parameter learning: model parameters, the closed-form M-step and the EM
//! loop that alternates it with message-passing E-steps.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_model::{
    block_sum, fit_initial_mixture, weighted_mean_cov, ClassMixture, GaussianComponent, REDUCE_BLOCK,
};
use crate::logmath::{ln_prob, xlogy};
use crate::message_passing::{infer_posteriors, Emissions, PosteriorTable};
use crate::raster_io::{RasterStack, TrainingSet};
use crate::split_tree::SplitTree;

pub const RHO_FLOOR: f64 = 1e-6;
pub const PI_FLOOR: f64 = 1e-6;
pub const DEFAULT_PI0: f64 = 0.5;
pub const DEFAULT_RHO0: f64 = 0.999;
pub const DEFAULT_MAX_ITER: usize = 40;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Transition and prior probabilities plus one emission mixture per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `P(y_n = 1 | parent product = 1)`.
    pub rho: f64,
    /// `P(y_n = 1)` at leaves.
    pub pi: f64,
    pub classes: [ClassMixture; 2],
    pub generation: usize,
}

impl ModelParams {
    pub fn new(rho: f64, pi: f64, classes: [ClassMixture; 2]) -> Result<Self> {
        for (name, v) in [("rho", rho), ("pi", pi)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} is not a probability")));
            }
        }
        if classes[0].dim() != classes[1].dim() {
            return Err(Error::Validation(format!(
                "class mixtures have {} and {} features",
                classes[0].dim(),
                classes[1].dim()
            )));
        }
        Ok(Self {
            rho,
            pi,
            classes,
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    /// `ln P(y | v)` where `v` is the parent product.
    #[inline]
    pub fn log_transition(&self, y: usize, v: usize) -> f64 {
        match (v, y) {
            (0, 0) => 0.0,
            (0, _) => f64::NEG_INFINITY,
            (_, 0) => ln_prob(1.0 - self.rho),
            _ => ln_prob(self.rho),
        }
    }

    #[inline]
    pub fn log_prior(&self, y: usize) -> f64 {
        if y == 0 {
            ln_prob(1.0 - self.pi)
        } else {
            ln_prob(self.pi)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "generation {}", self.generation);
        let _ = writeln!(out, "rho {:.16e}", self.rho);
        let _ = writeln!(out, "pi {:.16e}", self.pi);
        for (c, mix) in self.classes.iter().enumerate() {
            let _ = writeln!(out, "class {c}");
            mix.write_block(&mut out);
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .peekable();
        let mut field = |key: &'static str| -> Result<Vec<f64>> {
            let line = lines.next().ok_or(Error::MissingKey(key))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Parse(format!("expected `{key}`, found `{line}`")));
            }
            parts
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number `{t}` in `{key}` line")))
                })
                .collect()
        };
        let scalar = |v: Vec<f64>, key: &str| -> Result<f64> {
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(Error::Parse(format!("`{key}` takes one value"))),
            }
        };
        let generation = scalar(field("generation")?, "generation")? as usize;
        let rho = scalar(field("rho")?, "rho")?;
        let pi = scalar(field("pi")?, "pi")?;
        let mut classes = Vec::with_capacity(2);
        for c in 0..2 {
            let id = scalar(field("class")?, "class")?;
            if id != c as f64 {
                return Err(Error::Parse(format!("expected class {c}, found {id}")));
            }
            let k = scalar(field("K")?, "K")?;
            if !(k >= 1.0) || k.fract() != 0.0 {
                return Err(Error::Parse(format!("invalid component count {k}")));
            }
            let k = k as usize;
            let weights = field("weights")?;
            if weights.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    found: weights.len(),
                });
            }
            let mut comps = Vec::with_capacity(k);
            for _ in 0..k {
                let mean = field("mean")?;
                let cov = field("cov")?;
                if cov.len() != mean.len() * mean.len() {
                    return Err(Error::Dimension {
                        expected: mean.len() * mean.len(),
                        found: cov.len(),
                    });
                }
                comps.push(GaussianComponent::new(mean, cov)?);
            }
            classes.push(ClassMixture::new(weights, comps)?);
        }
        let c1 = classes.pop().unwrap();
        let c0 = classes.pop().unwrap();
        let mut params = Self::new(rho, pi, [c0, c1])?;
        params.generation = generation;
        Ok(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }
}

/// Starting parameters: class mixtures fitted to the training rows, with
/// user-supplied `pi0` and `rho0`.
pub fn initialize(train: &TrainingSet, k0: usize, k1: usize, pi0: f64, rho0: f64, seed: u64) -> Result<ModelParams> {
    for (name, v) in [("pi0", pi0), ("rho0", rho0)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Initialization(format!("{name} = {v} is not a probability")));
        }
    }
    let c0 = fit_initial_mixture(train, 0, k0, seed)?;
    let c1 = fit_initial_mixture(train, 1, k1, seed.wrapping_add(1))?;
    ModelParams::new(rho0, pi0, [c0, c1])
}

/// Output of one M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub params: ModelParams,
    /// Parameters whose update had a zero denominator and kept the old value.
    pub kept_old: Vec<String>,
}

/// Tree part of the update: `(rho, pi)` before clamping, `None` when the
/// corresponding denominator is zero.
fn tree_updates(tree: &SplitTree, post: &PosteriorTable) -> (Option<f64>, Option<f64>) {
    let mut stay = 0.0;
    let mut active = 0.0;
    let mut leaf_one = 0.0;
    let mut leaves = 0usize;
    for n in 0..tree.len() {
        if tree.is_leaf(n) {
            leaf_one += post.marginal[n][1];
            leaves += 1;
        } else {
            let p = &post.pair[n];
            stay += p[1][1];
            active += p[0][1] + p[1][1];
        }
    }
    let rho = (active > 0.0).then(|| stay / active);
    let pi = (leaves > 0).then(|| leaf_one / leaves as f64);
    (rho, pi)
}

fn clamp_prob(v: f64, floor: f64) -> f64 {
    v.clamp(floor, 1.0 - floor)
}

fn class_marginals(post: &PosteriorTable, c: usize) -> Vec<f64> {
    post.observed.iter().map(|&n| post.marginal[n as usize][c]).collect()
}

fn finish(
    old: &ModelParams,
    rho: Option<f64>,
    pi: Option<f64>,
    classes: [ClassMixture; 2],
    mut kept_old: Vec<String>,
) -> Result<MStep> {
    let rho = match rho {
        Some(r) => clamp_prob(r, RHO_FLOOR),
        None => {
            kept_old.push("rho".into());
            old.rho
        }
    };
    let pi = match pi {
        Some(p) => clamp_prob(p, PI_FLOOR),
        None => {
            kept_old.push("pi".into());
            old.pi
        }
    };
    let mut params = ModelParams::new(rho, pi, classes)?;
    params.generation = old.generation + 1;
    Ok(MStep { params, kept_old })
}

/// Closed-form maximizer of the expected complete-data log-likelihood for
/// mixtures of any size. Component weights use the responsibilities stored in
/// `post`, i.e. evaluated under `old`.
pub fn m_step(tree: &SplitTree, stack: &RasterStack, post: &PosteriorTable, old: &ModelParams) -> Result<MStep> {
    let m = stack.dim();
    let feats = stack.observed_features();
    let (rho, pi) = tree_updates(tree, post);
    let mut kept_old = Vec::new();
    let mut classes = Vec::with_capacity(2);
    for c in 0..2 {
        let marg = class_marginals(post, c);
        let total = block_sum(&marg);
        let old_mix = &old.classes[c];
        let k = old_mix.k();
        let mut weights = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for i in 0..k {
            let w: Vec<f64> = marg
                .iter()
                .enumerate()
                .map(|(r, p)| p * post.gamma_row(c, r)[i])
                .collect();
            match weighted_mean_cov(feats, m, &w) {
                Some((sw, mean, cov)) if total > 0.0 => {
                    weights.push(sw / total);
                    comps.push(GaussianComponent::new(mean, cov)?);
                }
                _ => {
                    kept_old.push(format!("class {c} component {i}"));
                    weights.push(old_mix.weights()[i]);
                    comps.push(old_mix.components()[i].clone());
                }
            }
        }
        classes.push(ClassMixture::new(weights, comps)?);
    }
    let c1 = classes.pop().unwrap();
    let c0 = classes.pop().unwrap();
    finish(old, rho, pi, [c0, c1], kept_old)
}

/// The single-Gaussian update written out on its own. It must agree bit for
/// bit with [`m_step`] when every class has one component.
pub fn m_step_single_modal(
    tree: &SplitTree,
    stack: &RasterStack,
    post: &PosteriorTable,
    old: &ModelParams,
) -> Result<MStep> {
    if old.classes.iter().any(|c| c.k() != 1) {
        return Err(Error::Validation("single-modal update needs K = 1 for both classes".into()));
    }
    let m = stack.dim();
    let feats = stack.observed_features();
    let (rho, pi) = tree_updates(tree, post);
    let mut kept_old = Vec::new();
    let mut classes = Vec::with_capacity(2);
    for c in 0..2 {
        let marg = class_marginals(post, c);
        match weighted_mean_cov(feats, m, &marg) {
            Some((_, mean, cov)) => classes.push(ClassMixture::single(GaussianComponent::new(mean, cov)?)),
            None => {
                kept_old.push(format!("class {c} component 0"));
                classes.push(old.classes[c].clone());
            }
        }
    }
    let c1 = classes.pop().unwrap();
    let c0 = classes.pop().unwrap();
    finish(old, rho, pi, [c0, c1], kept_old)
}

/// Expected complete-data log-likelihood of `params` under fixed posteriors.
/// With mixtures the component indicators are part of the complete data and
/// their posteriors are the stored responsibilities.
pub fn expected_log_likelihood(
    tree: &SplitTree,
    stack: &RasterStack,
    post: &PosteriorTable,
    params: &ModelParams,
) -> f64 {
    let mut tree_part = 0.0;
    let prior = [params.log_prior(0), params.log_prior(1)];
    let stay = params.log_transition(1, 1);
    let leave = params.log_transition(0, 1);
    for n in 0..tree.len() {
        if tree.is_leaf(n) {
            let p = post.marginal[n];
            tree_part += xlogy(p[0], prior[0]) + xlogy(p[1], prior[1]);
        } else {
            let p = &post.pair[n];
            tree_part += xlogy(p[0][1], leave) + xlogy(p[1][1], stay);
        }
    }

    let m = stack.dim();
    let feats = stack.observed_features();
    let obs = post.observed.len();
    let partial: Vec<f64> = (0..obs.div_ceil(REDUCE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * REDUCE_BLOCK;
            let hi = (lo + REDUCE_BLOCK).min(obs);
            let mut s = 0.0;
            for r in lo..hi {
                let x = &feats[r * m..(r + 1) * m];
                let marg = post.marginal[post.observed[r] as usize];
                for (c, mix) in params.classes.iter().enumerate() {
                    let g = post.gamma_row(c, r);
                    for (i, comp) in mix.components().iter().enumerate() {
                        let w = marg[c] * g[i];
                        s += xlogy(w, ln_prob(mix.weights()[i]) + comp.log_pdf(x));
                    }
                }
            }
            s
        })
        .collect();
    tree_part + partial.iter().fold(0.0, |a, b| a + b)
}

/// Largest absolute change between two parameter sets. Means are divided by
/// the per-band feature scale and covariance entries by the product of the
/// two band scales.
pub fn max_param_delta(a: &ModelParams, b: &ModelParams, scale: &[f64]) -> f64 {
    let mut d = (a.rho - b.rho).abs().max((a.pi - b.pi).abs());
    let m = scale.len();
    for (ma, mb) in a.classes.iter().zip(&b.classes) {
        for (wa, wb) in ma.weights().iter().zip(mb.weights()) {
            d = d.max((wa - wb).abs());
        }
        for (ca, cb) in ma.components().iter().zip(mb.components()) {
            for j in 0..m {
                d = d.max((ca.mean()[j] - cb.mean()[j]).abs() / scale[j]);
            }
            for i in 0..m {
                for j in 0..m {
                    let v = (ca.cov()[i * m + j] - cb.cov()[i * m + j]).abs();
                    d = d.max(v / (scale[i] * scale[j]));
                }
            }
        }
    }
    d
}

/// Per-band standard deviation of the observed features (1 for constant or
/// absent bands).
pub fn feature_scale(stack: &RasterStack) -> Vec<f64> {
    let m = stack.dim();
    let ones = vec![1.0; stack.observed_cells().len()];
    match weighted_mean_cov(stack.observed_features(), m, &ones) {
        Some((_, _, cov)) => (0..m)
            .map(|j| {
                let s = cov[j * m + j].sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect(),
        None => vec![1.0; m],
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rho: f64,
    pub pi: f64,
    /// Expected complete-data log-likelihood of the updated parameters under
    /// the posteriors of this iteration's E-step.
    pub expected_ll: f64,
    /// `ln P(X_o)` under the parameters entering this iteration.
    pub observed_ll: f64,
    pub max_delta: f64,
    pub kept_old: Vec<String>,
    pub underflow_events: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl EmTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,rho,pi,LL,max_delta,observed_ll,kept_old,underflow\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.iteration,
                r.rho,
                r.pi,
                r.expected_ll,
                r.max_delta,
                r.observed_ll,
                r.kept_old.join(";"),
                r.underflow_events
            );
        }
        out
    }
}

type MStepFn = fn(&SplitTree, &RasterStack, &PosteriorTable, &ModelParams) -> Result<MStep>;

fn run_with(
    tree: &SplitTree,
    stack: &RasterStack,
    init: ModelParams,
    max_iter: usize,
    tol: f64,
    update: MStepFn,
) -> Result<(ModelParams, EmTrace)> {
    if tree.len() != stack.len() {
        return Err(Error::Alignment(format!(
            "tree has {} nodes, stack has {} cells",
            tree.len(),
            stack.len()
        )));
    }
    if stack.observed_cells().is_empty() {
        return Err(Error::Validation("no observed cells to learn from".into()));
    }
    let scale = feature_scale(stack);
    let mut params = init;
    let mut trace = EmTrace::default();
    for iteration in 1..=max_iter {
        let step = || -> Result<(MStep, f64, f64, usize)> {
            let em = Emissions::from_stack(stack, &params)?;
            let post = infer_posteriors(tree, &em, &params)?;
            let next = update(tree, stack, &post, &params)?;
            let q = expected_log_likelihood(tree, stack, &post, &next.params);
            Ok((next, q, post.log_evidence, em.underflow_events()))
        };
        let (next, q, observed_ll, underflow_events) = step().map_err(|e| Error::Iteration {
            iteration,
            source: Box::new(e),
        })?;
        let delta = max_param_delta(&params, &next.params, &scale);
        params = next.params;
        trace.records.push(IterationRecord {
            iteration,
            rho: params.rho,
            pi: params.pi,
            expected_ll: q,
            observed_ll,
            max_delta: delta,
            kept_old: next.kept_old,
            underflow_events,
            params: params.clone(),
        });
        if delta < tol {
            trace.converged = true;
            break;
        }
    }
    Ok((params, trace))
}

/// EM until the largest parameter change drops below `tol` or `max_iter`
/// iterations have run.
pub fn run_em(
    tree: &SplitTree,
    stack: &RasterStack,
    init: ModelParams,
    max_iter: usize,
    tol: f64,
) -> Result<(ModelParams, EmTrace)> {
    run_with(tree, stack, init, max_iter, tol, m_step)
}

/// [`run_em`] driven by [`m_step_single_modal`].
pub fn run_em_single_modal(
    tree: &SplitTree,
    stack: &RasterStack,
    init: ModelParams,
    max_iter: usize,
    tol: f64,
) -> Result<(ModelParams, EmTrace)> {
    run_with(tree, stack, init, max_iter, tol, m_step_single_modal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{chain_params, random_instance, small_scene};

    #[test]
    fn transition_table() {
        let p = chain_params(0.9, 0.2);
        assert_eq!(p.log_transition(0, 0), 0.0);
        assert_eq!(p.log_transition(1, 0), f64::NEG_INFINITY);
        assert!((p.log_transition(1, 1) - 0.9f64.ln()).abs() < 1e-15);
        assert!((p.log_transition(0, 1) - 0.1f64.ln()).abs() < 1e-12);
        assert!((p.log_prior(1) - 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let inst = random_instance(7, 8);
        let mut p = inst.params.clone();
        p.generation = 3;
        let back = ModelParams::parse_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn parse_rejects_truncated_text() {
        let p = chain_params(0.9, 0.2);
        let text = p.to_text();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(ModelParams::parse_text(&cut).is_err());
    }

    #[test]
    fn initialize_defaults_and_determinism() {
        let (_, _, train) = small_scene(3);
        let a = initialize(&train, 1, 1, DEFAULT_PI0, DEFAULT_RHO0, 11).unwrap();
        assert_eq!(a.pi, 0.5);
        assert_eq!(a.rho, 0.999);
        assert_eq!(a.classes[0].k(), 1);
        let b = initialize(&train, 2, 2, 0.5, 0.999, 11).unwrap();
        let c = initialize(&train, 2, 2, 0.5, 0.999, 11).unwrap();
        assert_eq!(b, c);
        assert!(initialize(&train, 1, 1, 1.5, 0.999, 1).is_err());
    }

    #[test]
    fn uniform_leaf_marginals_give_pi() {
        let inst = random_instance(2, 10);
        let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
        let mut post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
        for n in 0..inst.tree.len() {
            if inst.tree.is_leaf(n) {
                post.marginal[n] = [0.7, 0.3];
            }
        }
        let out = m_step(&inst.tree, &inst.stack, &post, &inst.params).unwrap();
        assert!((out.params.pi - 0.3).abs() < 1e-15);
    }

    #[test]
    fn no_leave_mass_clamps_rho() {
        let inst = random_instance(4, 10);
        let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
        let mut post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
        for p in post.pair.iter_mut() {
            let moved = p[0][1];
            p[0][1] = 0.0;
            p[1][1] += moved;
        }
        let out = m_step(&inst.tree, &inst.stack, &post, &inst.params).unwrap();
        assert_eq!(out.params.rho, 1.0 - RHO_FLOOR);
    }

    #[test]
    fn hard_posteriors_give_class_sample_means() {
        let inst = random_instance(5, 12);
        let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
        let mut post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
        let mut by_class: [Vec<&[f64]>; 2] = [Vec::new(), Vec::new()];
        for (r, &cell) in inst.stack.observed_cells().iter().enumerate() {
            let c = r % 2;
            post.marginal[cell as usize] = if c == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
            by_class[c].push(inst.stack.observed_feature(r));
        }
        let single = inst.params.classes.iter().all(|c| c.k() == 1);
        let mut p = inst.params.clone();
        if !single {
            p = chain_params(p.rho, p.pi);
        }
        let k1 = [1usize, 1];
        post.gamma = [vec![1.0; post.observed.len()], vec![1.0; post.observed.len()]];
        post.k = k1;
        let out = m_step(&inst.tree, &inst.stack, &post, &p).unwrap();
        for c in 0..2 {
            if by_class[c].is_empty() {
                continue;
            }
            let m = inst.stack.dim();
            for j in 0..m {
                let mean: f64 = by_class[c].iter().map(|x| x[j]).sum::<f64>() / by_class[c].len() as f64;
                let got = out.params.classes[c].components()[0].mean()[j];
                assert!((got - mean).abs() < 1e-12 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_class_mass_keeps_old_component() {
        let inst = random_instance(6, 9);
        let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
        let mut post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
        for m in post.marginal.iter_mut() {
            *m = [1.0, 0.0];
        }
        let out = m_step(&inst.tree, &inst.stack, &post, &inst.params).unwrap();
        assert_eq!(out.params.classes[1], inst.params.classes[1]);
        assert!(!out.kept_old.is_empty());
    }

    #[test]
    fn huge_tolerance_stops_after_one_iteration() {
        let (tree, stack, train) = small_scene(8);
        let init = initialize(&train, 1, 1, 0.5, 0.999, 1).unwrap();
        let (_, trace) = run_em(&tree, &stack, init, 40, 1e9).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace.converged);
        assert!(trace.to_csv().starts_with("iteration,rho,pi,LL,max_delta"));
    }

    #[test]
    fn single_modal_path_is_bit_identical() {
        let (tree, stack, train) = small_scene(9);
        let init = initialize(&train, 1, 1, 0.5, 0.999, 1).unwrap();
        let (a, ta) = run_em(&tree, &stack, init.clone(), 15, 0.0).unwrap();
        let (b, tb) = run_em_single_modal(&tree, &stack, init, 15, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.to_csv(), tb.to_csv());
        for (ra, rb) in ta.records.iter().zip(&tb.records) {
            assert_eq!(ra.params, rb.params);
        }
    }

    #[test]
    fn em_is_deterministic_and_monotone() {
        let (tree, stack, train) = small_scene(10);
        let init = initialize(&train, 2, 2, 0.5, 0.999, 4).unwrap();
        let (_, t1) = run_em(&tree, &stack, init.clone(), 10, 0.0).unwrap();
        let (_, t2) = run_em(&tree, &stack, init, 10, 0.0).unwrap();
        assert_eq!(t1.to_csv(), t2.to_csv());
        for w in t1.records.windows(2) {
            assert!(w[1].observed_ll >= w[0].observed_ll - 1e-6);
        }
    }

    #[test]
    fn m_step_is_a_local_maximum() {
        for seed in 0..20 {
            let inst = random_instance(seed, 12);
            let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
            let post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
            let best = m_step(&inst.tree, &inst.stack, &post, &inst.params).unwrap().params;
            let q0 = expected_log_likelihood(&inst.tree, &inst.stack, &post, &best);
            for h in [1e-3, -1e-3] {
                for p in crate::test_support::perturbations(&best, h) {
                    let q = expected_log_likelihood(&inst.tree, &inst.stack, &post, &p);
                    assert!(q <= q0 + 1e-9, "seed {seed}: {q} > {q0}");
                }
            }
        }
    }
}
