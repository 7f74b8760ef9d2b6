//! Split tree over an elevation grid.
//!
//! Cells are swept in ascending elevation (ties by cell index) and merged
//! with their already-swept 4-neighbours through a union-find. Each merged
//! component contributes its most recently swept cell as a *parent* of the
//! cell being swept, so parents are always lower (downstream) and the leaves
//! are the local minima. Every node has at most one child; the root is the
//! last cell swept.
//!
//! A cell can only be flooded if all of its parents are flooded, which makes
//! the ancestor set of a node exactly the connected sublevel component that
//! the node closes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster_io::RasterGrid;

pub const NO_CHILD: u32 = u32::MAX;

/// Cell indices sorted ascending by `(elevation, index)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellOrder(pub Vec<u32>);

impl CellOrder {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

pub fn sort_cells(elevation: &RasterGrid) -> Result<CellOrder> {
    if let Some(n) = (0..elevation.len()).find(|&n| elevation.is_nodata(n)) {
        return Err(Error::Validation(format!("elevation has nodata at cell {n}")));
    }
    if elevation.len() >= NO_CHILD as usize {
        return Err(Error::Size(format!("{} cells exceed the u32 index space", elevation.len())));
    }
    let values = &elevation.values;
    let mut order: Vec<u32> = (0..elevation.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        values[a as usize]
            .total_cmp(&values[b as usize])
            .then(a.cmp(&b))
    });
    Ok(CellOrder(order))
}

/// Disjoint sets over cells, tracking the last cell merged into each set.
struct Components {
    link: Vec<u32>,
    size: Vec<u32>,
    top: Vec<u32>,
}

impl Components {
    fn new(n: usize) -> Self {
        Self {
            link: (0..n as u32).collect(),
            size: vec![1; n],
            top: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.link[x as usize] != x {
            let next = self.link[self.link[x as usize] as usize];
            self.link[x as usize] = next;
            x = next;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.link[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

/// Dependency tree over cells: parents are downstream, the child upstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitTree {
    child: Vec<u32>,
    parent_offsets: Vec<u32>,
    parent_list: Vec<u32>,
    order: Vec<u32>,
}

impl SplitTree {
    /// Assembles a tree from raw parts without checking any invariant.
    /// `parents[n]` lists the parents of node `n`; `order` must list parents
    /// before children for the message passes to be meaningful. Use
    /// [`validate_tree`] to check the result.
    pub fn from_raw_parts(parents: Vec<Vec<u32>>, child: Vec<Option<u32>>, order: Vec<u32>) -> Self {
        let mut parent_offsets = Vec::with_capacity(parents.len() + 1);
        let mut parent_list = Vec::new();
        parent_offsets.push(0);
        for p in &parents {
            parent_list.extend_from_slice(p);
            parent_offsets.push(parent_list.len() as u32);
        }
        Self {
            child: child.into_iter().map(|c| c.unwrap_or(NO_CHILD)).collect(),
            parent_offsets,
            parent_list,
            order,
        }
    }

    /// Builds a tree from child links alone. Parents are derived (ascending
    /// index) and the order is a topological sort with parents first.
    pub fn from_child_links(child: &[Option<usize>]) -> Result<Self> {
        let n = child.len();
        let mut parents = vec![Vec::new(); n];
        for (k, c) in child.iter().enumerate() {
            if let Some(c) = *c {
                if c >= n || c == k {
                    return Err(Error::Validation(format!("node {k} has invalid child {c}")));
                }
                parents[c].push(k as u32);
            }
        }
        // Kahn's algorithm, smallest ready index first for determinism
        let mut pending: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&k| pending[k] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(k) = ready.pop_first() {
            order.push(k as u32);
            if let Some(c) = child[k] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Validation("child links contain a cycle".into()));
        }
        let tree = Self::from_raw_parts(
            parents,
            child.iter().map(|c| c.map(|c| c as u32)).collect(),
            order,
        );
        let violations = validate_tree(&tree);
        if !violations.is_empty() {
            return Err(Error::Validation(violations[0].to_string()));
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.child.len()
    }

    pub fn is_empty(&self) -> bool {
        self.child.is_empty()
    }

    #[inline]
    pub fn parents(&self, n: usize) -> &[u32] {
        let lo = self.parent_offsets[n] as usize;
        let hi = self.parent_offsets[n + 1] as usize;
        &self.parent_list[lo..hi]
    }

    #[inline]
    pub fn child(&self, n: usize) -> Option<usize> {
        let c = self.child[n];
        (c != NO_CHILD).then_some(c as usize)
    }

    /// Other parents of this node's child.
    pub fn siblings(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let sibs = match self.child(n) {
            Some(c) => self.parents(c),
            None => &[],
        };
        sibs.iter().map(|&k| k as usize).filter(move |&k| k != n)
    }

    #[inline]
    pub fn is_leaf(&self, n: usize) -> bool {
        self.parent_offsets[n] == self.parent_offsets[n + 1]
    }

    /// Parents-before-children traversal order.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// The last node in the traversal order.
    pub fn root(&self) -> usize {
        *self.order.last().expect("tree is non-empty") as usize
    }

    pub fn edge_count(&self) -> usize {
        self.child.iter().filter(|&&c| c != NO_CHILD).count()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&n| self.is_leaf(n))
    }

    /// One line per node: `n child parent_count parents...`, child `-1` for
    /// the root.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for n in 0..self.len() {
            let child = self.child(n).map_or(-1, |c| c as i64);
            let parents = self.parents(n);
            let _ = write!(out, "{n} {child} {}", parents.len());
            for p in parents {
                let _ = write!(out, " {p}");
            }
            out.push('\n');
        }
        out
    }
}

/// Sweeps the grid in ascending elevation and links merging components.
pub fn build_split_tree(elevation: &RasterGrid) -> Result<SplitTree> {
    let order = sort_cells(elevation)?;
    let n = elevation.len();
    let (rows, cols) = (elevation.rows, elevation.cols);

    let mut rank = vec![0u32; n];
    for (r, &cell) in order.0.iter().enumerate() {
        rank[cell as usize] = r as u32;
    }

    let mut comps = Components::new(n);
    let mut child = vec![NO_CHILD; n];
    let mut parent_count = vec![0u8; n];
    let mut parent_slots = vec![[0u32; 4]; n];

    for &cell in &order.0 {
        let c = cell as usize;
        let (row, col) = (c / cols, c % cols);
        let mut roots = [0u32; 4];
        let mut found = 0;
        let mut visit = |nb: usize, comps: &mut Components| {
            if rank[nb] < rank[c] {
                let r = comps.find(nb as u32);
                if !roots[..found].contains(&r) {
                    roots[found] = r;
                    found += 1;
                }
            }
        };
        if row > 0 {
            visit(c - cols, &mut comps);
        }
        if col > 0 {
            visit(c - 1, &mut comps);
        }
        if col + 1 < cols {
            visit(c + 1, &mut comps);
        }
        if row + 1 < rows {
            visit(c + cols, &mut comps);
        }
        let mut merged = cell;
        for &r in &roots[..found] {
            let top = comps.top[r as usize];
            child[top as usize] = cell;
            parent_slots[c][parent_count[c] as usize] = top;
            parent_count[c] += 1;
            merged = comps.union(merged, r);
        }
        let rep = comps.find(cell);
        comps.top[rep as usize] = cell;
        debug_assert_eq!(rep, comps.find(merged));
    }

    let mut parents: Vec<Vec<u32>> = (0..n)
        .map(|k| parent_slots[k][..parent_count[k] as usize].to_vec())
        .collect();

    // Components that never merged hang under the last (highest) cell.
    let root = *order.0.last().expect("grid is non-empty");
    let mut dangling = Vec::new();
    for &cell in &order.0 {
        let k = cell as usize;
        if k != root as usize && child[k] == NO_CHILD {
            dangling.push(cell);
        }
    }
    for cell in dangling {
        child[cell as usize] = root;
        parents[root as usize].push(cell);
    }

    Ok(SplitTree::from_raw_parts(
        parents,
        child
            .into_iter()
            .map(|c| (c != NO_CHILD).then_some(c))
            .collect(),
        order.0,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MultipleChildren { node: usize },
    Reciprocity { node: usize, child: usize },
    SiblingMismatch { node: usize },
    Cycle { node: usize },
    RootCount { roots: usize },
    Unreachable { node: usize },
    OrderNotPermutation,
    OrderParentAfterChild { parent: usize, child: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MultipleChildren { node } => write!(f, "node {node}: multiple children"),
            Violation::Reciprocity { node, child } => {
                write!(f, "node {node}: listed as parent of {child} but child link differs")
            }
            Violation::SiblingMismatch { node } => write!(f, "node {node}: sibling set mismatch"),
            Violation::Cycle { node } => write!(f, "node {node}: lies on a cycle"),
            Violation::RootCount { roots } => write!(f, "expected one root, found {roots}"),
            Violation::Unreachable { node } => write!(f, "node {node}: does not reach the root"),
            Violation::OrderNotPermutation => write!(f, "order is not a permutation of the nodes"),
            Violation::OrderParentAfterChild { parent, child } => {
                write!(f, "order visits parent {parent} after child {child}")
            }
        }
    }
}

/// Checks the structural invariants; an empty list means the tree is sound.
pub fn validate_tree(tree: &SplitTree) -> Vec<Violation> {
    let n = tree.len();
    let mut out = Vec::new();

    let mut listed_under = vec![None::<usize>; n];
    for c in 0..n {
        for &p in tree.parents(c) {
            let p = p as usize;
            match listed_under[p] {
                Some(prev) if prev != c => out.push(Violation::MultipleChildren { node: p }),
                _ => listed_under[p] = Some(c),
            }
            if tree.child(p) != Some(c) {
                out.push(Violation::Reciprocity { node: p, child: c });
            }
        }
    }
    for k in 0..n {
        if let Some(c) = tree.child(k) {
            if !tree.parents(c).contains(&(k as u32)) {
                out.push(Violation::Reciprocity { node: k, child: c });
            }
            let sibs: Vec<usize> = tree.siblings(k).collect();
            let expected: Vec<usize> = tree
                .parents(c)
                .iter()
                .map(|&p| p as usize)
                .filter(|&p| p != k)
                .collect();
            if sibs != expected {
                out.push(Violation::SiblingMismatch { node: k });
            }
        }
    }

    let roots: Vec<usize> = (0..n).filter(|&k| tree.child(k).is_none()).collect();
    if roots.len() != 1 {
        out.push(Violation::RootCount { roots: roots.len() });
    }

    // Follow child links; state 1 = on current path, 2 = reaches a root.
    let mut state = vec![0u8; n];
    for start in 0..n {
        let mut path = Vec::new();
        let mut k = start;
        loop {
            match state[k] {
                2 => break,
                1 => {
                    out.push(Violation::Cycle { node: k });
                    break;
                }
                _ => {}
            }
            state[k] = 1;
            path.push(k);
            match tree.child(k) {
                Some(c) if c < n => k = c,
                _ => break,
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    if roots.len() == 1 {
        let root = roots[0];
        for start in 0..n {
            let mut k = start;
            let mut steps = 0;
            while let Some(c) = tree.child(k) {
                k = c;
                steps += 1;
                if steps > n {
                    break;
                }
            }
            if k != root {
                out.push(Violation::Unreachable { node: start });
            }
        }
    }

    let order = tree.order();
    let mut pos = vec![usize::MAX; n];
    let mut perm_ok = order.len() == n;
    for (i, &k) in order.iter().enumerate() {
        let k = k as usize;
        if k >= n || pos[k] != usize::MAX {
            perm_ok = false;
            break;
        }
        pos[k] = i;
    }
    if !perm_ok {
        out.push(Violation::OrderNotPermutation);
    } else {
        for c in 0..n {
            for &p in tree.parents(c) {
                if pos[p as usize] > pos[c] {
                    out.push(Violation::OrderParentAfterChild {
                        parent: p as usize,
                        child: c,
                    });
                }
            }
        }
    }
    out
}
