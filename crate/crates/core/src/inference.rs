//! Joint MAP labelling by max-sum dynamic programming over the split tree.
//!
//! Each node's upstream score is maximized separately for both values of the
//! parent product. Product 1 forces every parent to 1. Product 0 lets every
//! parent take its own best value; if none of them picks 0, the parent that
//! loses least by switching is forced to 0. Exact ties go to class 0.

use crate::em_learning::ModelParams;
use crate::error::{Error, Result};
use crate::message_passing::Emissions;
use crate::raster_io::{RasterGrid, RasterStack};
use crate::split_tree::SplitTree;

const NO_FLIP: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub classes: Vec<u8>,
    /// `ln P(X_o, Y*)` of the returned labelling.
    pub map_log_score: f64,
}

impl MapResult {
    /// The labels as a class grid shaped like `like`.
    pub fn to_grid(&self, like: &RasterGrid) -> Result<RasterGrid> {
        like.with_values(self.classes.iter().map(|&c| f64::from(c)).collect())
    }
}

/// Max-sum on precomputed emissions.
pub fn max_sum(tree: &SplitTree, em: &Emissions, params: &ModelParams) -> Result<MapResult> {
    let n = tree.len();
    if em.len() != n {
        return Err(Error::Alignment(format!("{} emissions for {n} nodes", em.len())));
    }
    let stay = params.log_transition(1, 1);
    let leave = params.log_transition(0, 1);
    let prior = [params.log_prior(0), params.log_prior(1)];

    // best[n][y]: best score of n and everything upstream with y_n = y
    let mut best = vec![[0.0f64; 2]; n];
    // per node: bit y set when y_n = y prefers parent product 1
    let mut choice = vec![0u8; n];
    let mut flip = vec![NO_FLIP; n];

    for &node in tree.order() {
        let k = node as usize;
        let e = em.log_lik(k);
        if tree.is_leaf(k) {
            best[k] = [prior[0] + e[0], prior[1] + e[1]];
            continue;
        }
        let mut all_one = 0.0;
        let mut free = 0.0;
        let mut has_zero = false;
        let mut min_loss = f64::INFINITY;
        let mut min_parent = NO_FLIP;
        for &p in tree.parents(k) {
            let b = best[p as usize];
            all_one += b[1];
            if b[0] >= b[1] {
                free += b[0];
                has_zero = true;
            } else {
                free += b[1];
                let loss = b[1] - b[0];
                if loss < min_loss {
                    min_loss = loss;
                    min_parent = p;
                }
            }
        }
        let some_zero = if has_zero {
            free
        } else {
            flip[k] = min_parent;
            free - min_loss
        };
        let via_one = leave + all_one;
        let mut bits = 0u8;
        let y0 = if via_one > some_zero {
            bits |= 1;
            via_one
        } else {
            some_zero
        };
        // wet requires every parent wet
        bits |= 2;
        best[k] = [y0 + e[0], stay + all_one + e[1]];
        choice[k] = bits;
    }

    let root = tree.root();
    let (root_class, score) = if best[root][1] > best[root][0] {
        (1u8, best[root][1])
    } else {
        (0u8, best[root][0])
    };
    if !score.is_finite() {
        return Err(Error::Underflow { node: root, stage: "max-sum" });
    }

    let mut classes = vec![0u8; n];
    classes[root] = root_class;
    for &node in tree.order().iter().rev() {
        let k = node as usize;
        let y = classes[k];
        let parents = tree.parents(k);
        if parents.is_empty() {
            continue;
        }
        let product_one = (choice[k] >> y) & 1 == 1;
        if product_one {
            for &p in parents {
                classes[p as usize] = 1;
            }
        } else {
            for &p in parents {
                let b = best[p as usize];
                classes[p as usize] = u8::from(b[1] > b[0]);
            }
            if flip[k] != NO_FLIP {
                classes[flip[k] as usize] = 0;
            }
        }
    }
    Ok(MapResult {
        classes,
        map_log_score: score,
    })
}

/// MAP labelling of every cell of `stack` under `params`.
pub fn max_sum_infer(tree: &SplitTree, stack: &RasterStack, params: &ModelParams) -> Result<MapResult> {
    let em = Emissions::from_stack(stack, params)?;
    max_sum(tree, &em, params)
}

/// Per-cell argmax of the posterior marginals; a debugging aid.
pub fn marginal_decode(marginal: &[[f64; 2]]) -> Vec<u8> {
    marginal.iter().map(|m| u8::from(m[1] > m[0])).collect()
}
