//! Sum-product message passing on a split tree.
//!
//! Messages are binary log-vectors normalized per node. The transition of a
//! node depends on its parents only through the product of their classes, so
//! the sum over parent (or sibling) configurations collapses to two masses:
//! the mass where the product is 0 and the mass where it is 1. Both are
//! accumulated as sums of non-negative terms, which keeps them accurate when
//! one of them is tiny.

use rayon::prelude::*;

use crate::em_learning::ModelParams;
use crate::error::{Error, Result};
use crate::logmath::{log_add, normalize_pair};
use crate::raster_io::RasterStack;
use crate::split_tree::SplitTree;

/// Per-node class log-likelihoods plus the component responsibilities at
/// observed cells, both evaluated under one parameter set.
#[derive(Debug, Clone)]
pub struct Emissions {
    log_lik: Vec<[f64; 2]>,
    observed: Vec<u32>,
    gamma: [Vec<f64>; 2],
    k: [usize; 2],
    underflow_events: usize,
}

impl Emissions {
    pub fn from_stack(stack: &RasterStack, params: &ModelParams) -> Result<Self> {
        let m = stack.dim();
        if params.dim() != m {
            return Err(Error::Validation(format!(
                "model has {} features, stack has {m}",
                params.dim()
            )));
        }
        let k = [params.classes[0].k(), params.classes[1].k()];
        let cells = stack.observed_cells();
        let feats = stack.observed_features();

        struct CellEval {
            lik: [f64; 2],
            gamma: [Vec<f64>; 2],
            underflow: usize,
        }
        let evals: Vec<CellEval> = (0..cells.len())
            .into_par_iter()
            .map(|i| {
                let x = &feats[i * m..(i + 1) * m];
                let mut lik = [0.0; 2];
                let mut gamma: [Vec<f64>; 2] = [vec![0.0; k[0]], vec![0.0; k[1]]];
                let mut underflow = 0;
                for c in 0..2 {
                    let mix = &params.classes[c];
                    let lse = mix.component_log_terms(x, &mut gamma[c]);
                    lik[c] = lse;
                    if lse.is_finite() {
                        for g in gamma[c].iter_mut() {
                            *g = (*g - lse).exp();
                        }
                    } else {
                        gamma[c].copy_from_slice(mix.weights());
                        underflow += 1;
                    }
                }
                CellEval { lik, gamma, underflow }
            })
            .collect();

        let mut log_lik = vec![[0.0; 2]; stack.len()];
        let mut gamma = [Vec::with_capacity(cells.len() * k[0]), Vec::with_capacity(cells.len() * k[1])];
        let mut underflow_events = 0;
        for (e, &cell) in evals.iter().zip(cells) {
            log_lik[cell as usize] = e.lik;
            gamma[0].extend_from_slice(&e.gamma[0]);
            gamma[1].extend_from_slice(&e.gamma[1]);
            underflow_events += e.underflow;
        }
        Ok(Self {
            log_lik,
            observed: cells.to_vec(),
            gamma,
            k,
            underflow_events,
        })
    }

    /// Emissions given directly as per-node class log-likelihoods; zero
    /// entries stand for unobserved nodes. Responsibilities are trivial.
    pub fn from_log_likelihoods(log_lik: Vec<[f64; 2]>, observed: Vec<u32>) -> Self {
        let n_obs = observed.len();
        Self {
            log_lik,
            observed,
            gamma: [vec![1.0; n_obs], vec![1.0; n_obs]],
            k: [1, 1],
            underflow_events: 0,
        }
    }

    #[inline]
    pub fn log_lik(&self, n: usize) -> [f64; 2] {
        self.log_lik[n]
    }

    pub fn len(&self) -> usize {
        self.log_lik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_lik.is_empty()
    }

    pub fn observed(&self) -> &[u32] {
        &self.observed
    }

    /// Cells where every component density of some class underflowed.
    pub fn underflow_events(&self) -> usize {
        self.underflow_events
    }
}

/// Normalized log-domain messages for every node.
#[derive(Debug, Clone, Default)]
pub struct MessageTable {
    pub fwd_in: Vec<[f64; 2]>,
    pub fwd_out: Vec<[f64; 2]>,
    pub bwd_in: Vec<[f64; 2]>,
    pub bwd_out: Vec<[f64; 2]>,
    /// `ln P(X_o)`: the accumulated forward normalizers.
    pub log_evidence: f64,
}

/// Log masses of a product of binary variables: `(product is 0, product is 1)`.
#[derive(Debug, Clone, Copy)]
struct ProductMass {
    zero: f64,
    one: f64,
}

impl ProductMass {
    const EMPTY: Self = Self {
        zero: f64::NEG_INFINITY,
        one: 0.0,
    };

    #[inline]
    fn from_message(m: [f64; 2]) -> Self {
        Self { zero: m[0], one: m[1] }
    }

    #[inline]
    fn combine(self, other: Self) -> Self {
        let other_all = log_add(other.zero, other.one);
        Self {
            zero: log_add(self.zero + other_all, self.one + other.zero),
            one: self.one + other.one,
        }
    }

    #[inline]
    fn all(self) -> f64 {
        log_add(self.zero, self.one)
    }
}

fn parent_mass(tree: &SplitTree, fwd_out: &[[f64; 2]], n: usize) -> ProductMass {
    tree.parents(n)
        .iter()
        .fold(ProductMass::EMPTY, |acc, &k| {
            acc.combine(ProductMass::from_message(fwd_out[k as usize]))
        })
}

struct LogParams {
    rho: f64,
    not_rho: f64,
    prior: [f64; 2],
}

impl LogParams {
    fn new(p: &ModelParams) -> Self {
        Self {
            rho: p.log_transition(1, 1),
            not_rho: p.log_transition(0, 1),
            prior: [p.log_prior(0), p.log_prior(1)],
        }
    }
}

/// Leaves-to-root pass filling `fwd_in`, `fwd_out` and `log_evidence`.
pub fn forward_pass(tree: &SplitTree, em: &Emissions, params: &ModelParams) -> Result<MessageTable> {
    let n = tree.len();
    if em.len() != n {
        return Err(Error::Alignment(format!("{} emissions for {n} nodes", em.len())));
    }
    let lp = LogParams::new(params);
    let mut fwd_in = vec![[0.0; 2]; n];
    let mut fwd_out = vec![[0.0; 2]; n];
    let mut log_evidence = 0.0;
    for &node in tree.order() {
        let k = node as usize;
        let fi = if tree.is_leaf(k) {
            lp.prior
        } else {
            let mass = parent_mass(tree, &fwd_out, k);
            let mut fi = [log_add(mass.zero, lp.not_rho + mass.one), lp.rho + mass.one];
            normalize_pair(&mut fi);
            fi
        };
        let e = em.log_lik(k);
        let mut fo = [fi[0] + e[0], fi[1] + e[1]];
        let z = normalize_pair(&mut fo);
        if !z.is_finite() {
            return Err(Error::Underflow { node: k, stage: "forward" });
        }
        log_evidence += z;
        fwd_in[k] = fi;
        fwd_out[k] = fo;
    }
    Ok(MessageTable {
        fwd_in,
        fwd_out,
        bwd_in: Vec::new(),
        bwd_out: Vec::new(),
        log_evidence,
    })
}

/// Root-to-leaves pass filling `bwd_in` and `bwd_out`.
pub fn backward_pass(
    tree: &SplitTree,
    em: &Emissions,
    params: &ModelParams,
    mut msgs: MessageTable,
) -> Result<MessageTable> {
    let n = tree.len();
    let lp = LogParams::new(params);
    let mut bwd_in = vec![[0.0; 2]; n];
    let mut bwd_out = vec![[0.0; 2]; n];
    let mut prefix: Vec<ProductMass> = Vec::new();

    for &node in tree.order().iter().rev() {
        let c = node as usize;
        // bwd_in[c] was set when c's child was visited (root keeps (1, 1)).
        let e = em.log_lik(c);
        let mut go = [bwd_in[c][0] + e[0], bwd_in[c][1] + e[1]];
        if !normalize_pair(&mut go).is_finite() {
            return Err(Error::Underflow { node: c, stage: "backward" });
        }
        bwd_out[c] = go;

        let parents = tree.parents(c);
        if parents.is_empty() {
            continue;
        }
        // prefix[i] combines parents[..i]; suffix folded on the way back
        prefix.clear();
        prefix.push(ProductMass::EMPTY);
        for &k in parents {
            let last = *prefix.last().unwrap();
            prefix.push(last.combine(ProductMass::from_message(msgs.fwd_out[k as usize])));
        }
        let mut suffix = ProductMass::EMPTY;
        for (i, &k) in parents.iter().enumerate().rev() {
            let sib = prefix[i].combine(suffix);
            let mut gi = [
                go[0] + sib.all(),
                log_add(
                    go[0] + log_add(lp.not_rho + sib.one, sib.zero),
                    go[1] + lp.rho + sib.one,
                ),
            ];
            if !normalize_pair(&mut gi).is_finite() {
                return Err(Error::Underflow { node: k as usize, stage: "backward" });
            }
            bwd_in[k as usize] = gi;
            suffix = ProductMass::from_message(msgs.fwd_out[k as usize]).combine(suffix);
        }
    }
    msgs.bwd_in = bwd_in;
    msgs.bwd_out = bwd_out;
    Ok(msgs)
}

/// Posterior marginals, parent-product pair marginals and responsibilities.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    /// `P(y_n | X_o)` indexed by class.
    pub marginal: Vec<[f64; 2]>,
    /// `P(y_n, y_{P_n} | X_o)` indexed `[y_n][parent product]`; all zero at
    /// leaves.
    pub pair: Vec<[[f64; 2]; 2]>,
    /// Observed cell indices, aligned with `gamma`.
    pub observed: Vec<u32>,
    /// Per class, row-major `|O| x K_c` component responsibilities.
    pub gamma: [Vec<f64>; 2],
    pub k: [usize; 2],
    pub log_evidence: f64,
}

impl PosteriorTable {
    pub fn gamma_row(&self, class: usize, i: usize) -> &[f64] {
        let k = self.k[class];
        &self.gamma[class][i * k..(i + 1) * k]
    }
}

pub fn posteriors(
    tree: &SplitTree,
    em: &Emissions,
    params: &ModelParams,
    msgs: &MessageTable,
) -> Result<PosteriorTable> {
    let n = tree.len();
    let lp = LogParams::new(params);
    let mut marginal = vec![[0.0; 2]; n];
    let mut pair = vec![[[0.0; 2]; 2]; n];
    for k in 0..n {
        let e = em.log_lik(k);
        let h = [msgs.bwd_in[k][0] + e[0], msgs.bwd_in[k][1] + e[1]];
        let mut m = [msgs.fwd_in[k][0] + h[0], msgs.fwd_in[k][1] + h[1]];
        if !normalize_pair(&mut m).is_finite() {
            return Err(Error::Underflow { node: k, stage: "marginal" });
        }
        marginal[k] = [m[0].exp(), m[1].exp()];

        if !tree.is_leaf(k) {
            let mass = parent_mass(tree, &msgs.fwd_out, k);
            // y = 1 with parent product 0 has zero mass
            let t00 = mass.zero + h[0];
            let t01 = mass.one + lp.not_rho + h[0];
            let t11 = mass.one + lp.rho + h[1];
            let z = log_add(log_add(t00, t01), t11);
            if !z.is_finite() {
                return Err(Error::Underflow { node: k, stage: "pair" });
            }
            pair[k] = [[(t00 - z).exp(), (t01 - z).exp()], [0.0, (t11 - z).exp()]];
        }
    }
    Ok(PosteriorTable {
        marginal,
        pair,
        observed: em.observed.clone(),
        gamma: em.gamma.clone(),
        k: em.k,
        log_evidence: msgs.log_evidence,
    })
}

/// Full E-step: both passes and the posterior tables.
pub fn infer_posteriors(tree: &SplitTree, em: &Emissions, params: &ModelParams) -> Result<PosteriorTable> {
    let fwd = forward_pass(tree, em, params)?;
    let msgs = backward_pass(tree, em, params, fwd)?;
    posteriors(tree, em, params, &msgs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{chain_params, random_instance};
    use crate::synth::enumerate_log_likelihoods;

    fn emissions(lik: &[[f64; 2]], observed: &[u32]) -> Emissions {
        Emissions::from_log_likelihoods(lik.to_vec(), observed.to_vec())
    }

    #[test]
    fn single_unobserved_node() {
        let tree = SplitTree::from_child_links(&[None]).unwrap();
        let p = chain_params(0.9, 0.3);
        let em = emissions(&[[0.0, 0.0]], &[]);
        let f = forward_pass(&tree, &em, &p).unwrap();
        assert!((f.fwd_out[0][0].exp() - 0.7).abs() < 1e-15);
        assert!((f.fwd_out[0][1].exp() - 0.3).abs() < 1e-15);
        let post = infer_posteriors(&tree, &em, &p).unwrap();
        assert!((post.marginal[0][1] - 0.3).abs() < 1e-15);
        let b = backward_pass(&tree, &em, &p, f).unwrap();
        assert_eq!(b.bwd_in[0], [0.0, 0.0]);
    }

    #[test]
    fn observed_leaf_weights_prior_by_density() {
        let tree = SplitTree::from_child_links(&[None]).unwrap();
        let p = chain_params(0.9, 0.4);
        let lik = [(0.2f64).ln(), (0.5f64).ln()];
        let f = forward_pass(&tree, &emissions(&[lik], &[0]), &p).unwrap();
        let (a, b) = (0.6 * 0.2, 0.4 * 0.5);
        assert!((f.fwd_out[0][1].exp() - b / (a + b)).abs() < 1e-14);
        assert!((f.log_evidence - (a + b).ln()).abs() < 1e-14);
    }

    #[test]
    fn two_node_chain_backward() {
        // 0 -> 1 (0 is the parent)
        let tree = SplitTree::from_child_links(&[Some(1), None]).unwrap();
        let rho = 0.8;
        let p = chain_params(rho, 0.5);
        let f = forward_pass(&tree, &emissions(&[[0.0; 2]; 2], &[]), &p).unwrap();
        let b = backward_pass(&tree, &emissions(&[[0.0; 2]; 2], &[]), &p, f).unwrap();
        // g(y) = sum_c P(c | y): (1, 1) before normalization
        assert!((b.bwd_in[0][0] - b.bwd_in[0][1]).abs() < 1e-15);
    }

    #[test]
    fn structural_zero_in_pair() {
        let tree = SplitTree::from_child_links(&[Some(1), None]).unwrap();
        let p = chain_params(1.0 - 1e-6, 0.5);
        let em = emissions(&[[-1.0, -1.2], [-0.3, -2.0]], &[0, 1]);
        let post = infer_posteriors(&tree, &em, &p).unwrap();
        assert_eq!(post.pair[1][1][0], 0.0);
        let total: f64 = post.pair[1].iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn five_node_tree_matches_enumeration() {
        // two leaves feed node 2, which with leaf 3 feeds root 4
        let tree = SplitTree::from_child_links(&[Some(2), Some(2), Some(4), Some(4), None]).unwrap();
        let p = chain_params(0.85, 0.35);
        let lik = [[0.0; 2], [-0.2, -1.7], [0.0; 2], [-2.0, -0.1], [0.0; 2]];
        let em = emissions(&lik, &[1, 3]);
        let table = enumerate_log_likelihoods(&tree, &lik, &p).unwrap();
        let post = infer_posteriors(&tree, &em, &p).unwrap();
        for k in 0..5 {
            let exact = table.marginal(k);
            assert!((post.marginal[k][1] - exact[1]).abs() < 1e-12, "node {k}");
        }
        // root forward message equals the enumerated root marginal weighted by
        // everything upstream (root g = 1)
        let f = forward_pass(&tree, &em, &p).unwrap();
        let root = table.marginal(4);
        assert!((f.fwd_out[4][1].exp() - root[1]).abs() < 1e-12);
        assert!((f.log_evidence - table.log_evidence()).abs() < 1e-12);
        // g at every node against the enumeration: g_n(y) is proportional to
        // P(y_n = y | X_o) / (f_n(y) e_n(y))
        let b = backward_pass(&tree, &em, &p, f.clone()).unwrap();
        for k in 0..5 {
            let exact = table.marginal(k);
            let ratio: Vec<f64> = (0..2)
                .map(|y| exact[y] / (f.fwd_in[k][y] + lik[k][y]).exp())
                .collect();
            let z = ratio[0] + ratio[1];
            let g = b.bwd_in[k];
            let g1 = (g[1] - log_add(g[0], g[1])).exp();
            assert!((g1 - ratio[1] / z).abs() < 1e-12, "node {k}");
        }
    }

    #[test]
    fn random_instances_match_enumeration() {
        for seed in 0..60 {
            let inst = random_instance(seed, 12);
            let em = Emissions::from_stack(&inst.stack, &inst.params).unwrap();
            let lik: Vec<[f64; 2]> = (0..inst.tree.len()).map(|k| em.log_lik(k)).collect();
            let table = enumerate_log_likelihoods(&inst.tree, &lik, &inst.params).unwrap();
            let post = infer_posteriors(&inst.tree, &em, &inst.params).unwrap();
            for k in 0..inst.tree.len() {
                let exact = table.marginal(k);
                assert!((post.marginal[k][0] - exact[0]).abs() < 1e-9);
                if !inst.tree.is_leaf(k) {
                    let ep = table.pair(k);
                    for y in 0..2 {
                        for v in 0..2 {
                            assert!((post.pair[k][y][v] - ep[y][v]).abs() < 1e-9, "seed {seed} node {k}");
                        }
                    }
                    let margin = post.pair[k][1][0] + post.pair[k][1][1];
                    assert!((margin - post.marginal[k][1]).abs() < 1e-9);
                }
            }
        }
    }
}
