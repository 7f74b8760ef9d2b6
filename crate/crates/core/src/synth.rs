//! Synthetic scenes with planted truth, and a brute-force joint enumerator
//! that serves as the reference for the message-passing, learning and MAP
//! code on small trees.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::em_learning::ModelParams;
use crate::error::{Error, Result};
use crate::feature_model::{log_density, ClassMixture, GaussianComponent};
use crate::raster_io::{assemble_stack, RasterGrid, RasterStack, TrainingSet, DEFAULT_NODATA};
use crate::split_tree::SplitTree;

/// Largest tree [`enumerate_joint`] accepts.
pub const MAX_ENUMERATION_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terrain {
    Bowl,
    Ridged,
    /// Diamond-square midpoint displacement; `roughness` in (0, 1) is the
    /// amplitude ratio between successive refinement levels.
    Fractal { roughness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationPattern {
    Random,
    /// A band of contiguous observed columns crossing the flood.
    Swath,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloodLevel {
    Elevation(f64),
    /// Level set at this quantile of the terrain's elevations.
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SingleModal,
    Bimodal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub terrain: Terrain,
    pub flood: FloodLevel,
    /// Emission mixtures used to draw features. The tree parameters are
    /// carried along but the truth comes from level filling.
    pub planted: ModelParams,
    pub observe_fraction: f64,
    pub pattern: ObservationPattern,
    pub seed: u64,
    pub train_per_class: usize,
}

impl SceneSpec {
    pub fn new(rows: usize, cols: usize, terrain: Terrain, preset: Preset, seed: u64) -> Self {
        Self {
            rows,
            cols,
            terrain,
            flood: FloodLevel::Quantile(0.4),
            planted: planted_params(preset),
            observe_fraction: 0.1,
            pattern: ObservationPattern::Random,
            seed,
            train_per_class: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Scene(format!("empty grid {}x{}", self.rows, self.cols)));
        }
        if !(self.observe_fraction > 0.0 && self.observe_fraction <= 1.0) {
            return Err(Error::Scene(format!(
                "observe_fraction {} is outside (0, 1]",
                self.observe_fraction
            )));
        }
        if let Terrain::Fractal { roughness } = self.terrain {
            if !(roughness > 0.0 && roughness < 1.0) {
                return Err(Error::Scene(format!("roughness {roughness} is outside (0, 1)")));
            }
        }
        if let FloodLevel::Quantile(q) = self.flood {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Scene(format!("flood quantile {q} is outside [0, 1]")));
            }
        }
        if self.train_per_class == 0 {
            return Err(Error::Scene("train_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Reads a spec from `key = value` lines. Recognized keys: `rows`,
    /// `cols`, `terrain` (`bowl`, `ridged`, `fractal`), `roughness`,
    /// `flood_level`, `flood_quantile`, `observe_fraction`, `pattern`
    /// (`random`, `swath`), `seed`, `train_per_class`, `preset`
    /// (`single-modal`, `bimodal`). Planted parameters can be replaced after
    /// parsing.
    pub fn from_config(map: &BTreeMap<String, String>) -> Result<Self> {
        let known = [
            "rows",
            "cols",
            "terrain",
            "roughness",
            "flood_level",
            "flood_quantile",
            "observe_fraction",
            "pattern",
            "seed",
            "train_per_class",
            "preset",
            "params",
        ];
        if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown scene key `{k}`")));
        }
        let num = |key: &str| -> Result<Option<f64>> {
            map.get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
                })
                .transpose()
        };
        let int = |key: &str| -> Result<Option<u64>> {
            map.get(key)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
                })
                .transpose()
        };
        let rows = int("rows")?.unwrap_or(100) as usize;
        let cols = int("cols")?.unwrap_or(100) as usize;
        let roughness = num("roughness")?.unwrap_or(0.55);
        let terrain = match map.get("terrain").map(String::as_str).unwrap_or("fractal") {
            "bowl" => Terrain::Bowl,
            "ridged" => Terrain::Ridged,
            "fractal" => Terrain::Fractal { roughness },
            other => return Err(Error::Config(format!("unknown terrain `{other}`"))),
        };
        let preset = match map.get("preset").map(String::as_str).unwrap_or("single-modal") {
            "single-modal" | "single" => Preset::SingleModal,
            "bimodal" | "multi-modal" | "multi" => Preset::Bimodal,
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let mut spec = Self::new(rows, cols, terrain, preset, int("seed")?.unwrap_or(0));
        match (num("flood_level")?, num("flood_quantile")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either flood_level or flood_quantile".into()))
            }
            (Some(l), None) => spec.flood = FloodLevel::Elevation(l),
            (None, Some(q)) => spec.flood = FloodLevel::Quantile(q),
            (None, None) => {}
        }
        if let Some(f) = num("observe_fraction")? {
            spec.observe_fraction = f;
        }
        spec.pattern = match map.get("pattern").map(String::as_str).unwrap_or("random") {
            "random" => ObservationPattern::Random,
            "swath" => ObservationPattern::Swath,
            other => return Err(Error::Config(format!("unknown observation pattern `{other}`"))),
        };
        if let Some(t) = int("train_per_class")? {
            spec.train_per_class = t as usize;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(map)
}

fn correlated_cov(std: &[f64], corr: f64) -> Vec<f64> {
    let m = std.len();
    let mut cov = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let r = if i == j { 1.0 } else { corr };
            cov[i * m + j] = r * std[i] * std[j];
        }
    }
    cov
}

/// Built-in planted parameters.
///
/// `SingleModal` has three bands and one Gaussian per class. `Bimodal` has
/// two bands and two modes per class placed alternately along the diagonal,
/// so the pooled moments of each class sit on top of a mode of the other.
pub fn planted_params(preset: Preset) -> ModelParams {
    let comp = |mean: &[f64], std: &[f64], corr: f64| {
        GaussianComponent::new(mean.to_vec(), correlated_cov(std, corr)).expect("planted covariance")
    };
    let classes = match preset {
        Preset::SingleModal => [
            ClassMixture::single(comp(&[52.0, 55.0, 47.0], &[7.0, 6.0, 8.0], 0.4)),
            ClassMixture::single(comp(&[41.0, 44.0, 38.0], &[6.0, 6.0, 6.0], 0.5)),
        ],
        Preset::Bimodal => [
            ClassMixture::new(
                vec![0.5, 0.5],
                vec![comp(&[20.0, 22.0], &[4.0, 4.0], 0.3), comp(&[60.0, 62.0], &[4.0, 4.0], 0.3)],
            )
            .expect("planted mixture"),
            ClassMixture::new(
                vec![0.5, 0.5],
                vec![comp(&[40.0, 42.0], &[4.0, 4.0], 0.3), comp(&[80.0, 82.0], &[4.0, 4.0], 0.3)],
            )
            .expect("planted mixture"),
        ],
    };
    ModelParams::new(0.999, 0.5, classes).expect("planted parameters")
}

fn normalize_range(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { 100.0 * ((*v - lo) / span) } else { 0.0 };
    }
}

fn diamond_square(rows: usize, cols: usize, roughness: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut size = 2;
    while size + 1 < rows.max(cols) {
        size *= 2;
    }
    let n = size + 1;
    let mut h = vec![0.0; n * n];
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| amp * (2.0 * rng.random::<f64>() - 1.0);
    for &(r, c) in &[(0, 0), (0, size), (size, 0), (size, size)] {
        h[r * n + c] = jitter(rng, 1.0);
    }
    let mut amp = roughness;
    let mut step = size;
    while step > 1 {
        let half = step / 2;
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (h[(r - half) * n + c - half]
                    + h[(r - half) * n + c + half]
                    + h[(r + half) * n + c - half]
                    + h[(r + half) * n + c + half])
                    / 4.0;
                h[r * n + c] = avg + jitter(rng, amp);
            }
        }
        for r in (0..n).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if r >= half {
                    sum += h[(r - half) * n + c];
                    count += 1.0;
                }
                if r + half < n {
                    sum += h[(r + half) * n + c];
                    count += 1.0;
                }
                if c >= half {
                    sum += h[r * n + c - half];
                    count += 1.0;
                }
                if c + half < n {
                    sum += h[r * n + c + half];
                    count += 1.0;
                }
                h[r * n + c] = sum / count + jitter(rng, amp);
            }
        }
        amp *= roughness;
        step = half;
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend_from_slice(&h[r * n..r * n + cols]);
    }
    out
}

/// Terrain values scaled to `[0, 100]`.
pub fn generate_terrain(rows: usize, cols: usize, terrain: Terrain, seed: u64) -> Vec<f64> {
    let mut values = match terrain {
        Terrain::Bowl => {
            let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
            (0..rows * cols)
                .map(|k| {
                    let (r, c) = ((k / cols) as f64, (k % cols) as f64);
                    (r - cr).powi(2) + (c - cc).powi(2)
                })
                .collect()
        }
        Terrain::Ridged => {
            // parallel valleys across the rows, tilted along the columns,
            // with mild fractal relief
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut relief = diamond_square(rows, cols, 0.5, &mut rng);
            normalize_range(&mut relief);
            relief
                .iter()
                .enumerate()
                .map(|(k, z)| {
                    let (r, c) = ((k / cols) as f64, (k % cols) as f64);
                    let phase = 3.0 * std::f64::consts::PI * (r + 0.5) / rows as f64;
                    60.0 * phase.sin().abs() + 40.0 * c / cols as f64 + 0.1 * z
                })
                .collect()
        }
        Terrain::Fractal { roughness } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            diamond_square(rows, cols, roughness, &mut rng)
        }
    };
    normalize_range(&mut values);
    values
}

/// Cells reached from the lowest cell through 4-neighbours at or below
/// `level`. Every such set is closed under split-tree parents.
pub fn flood_fill(elevation: &[f64], rows: usize, cols: usize, level: f64) -> Vec<bool> {
    let mut flooded = vec![false; elevation.len()];
    let Some(start) = (0..elevation.len()).min_by(|&a, &b| elevation[a].total_cmp(&elevation[b]).then(a.cmp(&b)))
    else {
        return flooded;
    };
    if elevation[start] > level {
        return flooded;
    }
    let mut queue = VecDeque::from([start]);
    flooded[start] = true;
    while let Some(k) = queue.pop_front() {
        let (r, c) = (k / cols, k % cols);
        let mut visit = |j: usize| {
            if !flooded[j] && elevation[j] <= level {
                flooded[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(k - cols);
        }
        if r + 1 < rows {
            visit(k + cols);
        }
        if c > 0 {
            visit(k - 1);
        }
        if c + 1 < cols {
            visit(k + 1);
        }
    }
    flooded
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Observed-cell mask. A swath is a band of whole columns placed at random
/// among the positions that cover at least half the widest wet cross-section,
/// so it always crosses the flood.
fn observation_mask(spec: &SceneSpec, flooded: &[bool], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = spec.rows * spec.cols;
    if spec.observe_fraction >= 1.0 {
        return vec![true; n];
    }
    let mut mask = vec![false; n];
    match spec.pattern {
        ObservationPattern::Random => {
            let count = ((spec.observe_fraction * n as f64).round() as usize).clamp(1, n);
            for k in sample(rng, n, count) {
                mask[k] = true;
            }
        }
        ObservationPattern::Swath => {
            let cols = spec.cols;
            let width = ((spec.observe_fraction * cols as f64).round() as usize).clamp(1, cols);
            let mut wet_per_col = vec![0usize; cols];
            for (k, &f) in flooded.iter().enumerate() {
                wet_per_col[k % cols] += usize::from(f);
            }
            let window: Vec<usize> = (0..=cols - width)
                .map(|s| wet_per_col[s..s + width].iter().sum())
                .collect();
            let widest = window.iter().copied().max().unwrap_or(0);
            let total = spec.rows * width;
            let candidates: Vec<usize> = (0..window.len())
                .filter(|&s| 2 * window[s] >= widest && window[s] < total)
                .collect();
            let start = if candidates.is_empty() {
                rng.random_range(0..window.len())
            } else {
                candidates[rng.random_range(0..candidates.len())]
            };
            for r in 0..spec.rows {
                for c in start..start + width {
                    mask[r * cols + c] = true;
                }
            }
        }
    }
    mask
}

/// A generated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub stack: RasterStack,
    pub train: TrainingSet,
    /// Elevation used for level filling.
    pub flood_level: f64,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let n = rows * cols;
    let elevation = generate_terrain(rows, cols, spec.terrain, spec.seed);
    let level = match spec.flood {
        FloodLevel::Elevation(l) => l,
        FloodLevel::Quantile(q) => {
            let mut sorted = elevation.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            let pos = ((q * (n - 1) as f64).round() as usize).min(n - 1);
            sorted[pos]
        }
    };
    let flooded = flood_fill(&elevation, rows, cols, level);
    let wet = flooded.iter().filter(|&&f| f).count();
    if wet == 0 || wet == n {
        return Err(Error::Scene(format!(
            "flood level {level} floods {} of {n} cells",
            wet
        )));
    }

    let m = spec.planted.dim();
    let mut feature_rng = stream_rng(spec.seed, 1);
    let mut bands = vec![vec![0.0; n]; m];
    let mut x = vec![0.0; m];
    for k in 0..n {
        spec.planted.classes[flooded[k] as usize].sample_into(&mut feature_rng, &mut x);
        for (band, v) in bands.iter_mut().zip(&x) {
            band[k] = *v;
        }
    }
    let mask = observation_mask(spec, &flooded, &mut stream_rng(spec.seed, 2));
    for band in bands.iter_mut() {
        for (v, &seen) in band.iter_mut().zip(&mask) {
            if !seen {
                *v = DEFAULT_NODATA;
            }
        }
    }

    let elev_grid = RasterGrid::new(rows, cols, elevation)?;
    let truth = elev_grid.with_values(flooded.iter().map(|&f| f as u8 as f64).collect())?;
    let features = bands
        .into_iter()
        .map(|b| elev_grid.with_values(b))
        .collect::<Result<Vec<_>>>()?;
    let stack = assemble_stack(elev_grid, features, Some(truth))?;

    let mut train_rng = stream_rng(spec.seed, 3);
    let mut feats = Vec::with_capacity(2 * spec.train_per_class * m);
    let mut labels = Vec::with_capacity(2 * spec.train_per_class);
    for c in 0..2u8 {
        for _ in 0..spec.train_per_class {
            spec.planted.classes[c as usize].sample_into(&mut train_rng, &mut x);
            feats.extend_from_slice(&x);
            labels.push(c);
        }
    }
    let train = TrainingSet::new(m, feats, labels)?;
    Ok(Scene {
        stack,
        train,
        flood_level: level,
    })
}

/// Every assignment's log joint `ln P(X_o, Y)` for a small tree.
#[derive(Debug, Clone)]
pub struct JointTable {
    nodes: usize,
    parents: Vec<Vec<usize>>,
    log_joint: Vec<f64>,
    log_evidence: f64,
}

/// `ln P(X_o, Y)` of one labelling given per-node class log-likelihoods
/// (zero for unobserved nodes).
pub fn log_joint(tree: &SplitTree, lik: &[[f64; 2]], params: &ModelParams, labels: &[u8]) -> f64 {
    let mut s = 0.0;
    for n in 0..tree.len() {
        let y = labels[n] as usize;
        s += lik[n][y];
        if tree.is_leaf(n) {
            s += params.log_prior(y);
        } else {
            let v = tree.parents(n).iter().all(|&k| labels[k as usize] == 1) as usize;
            s += params.log_transition(y, v);
        }
    }
    s
}

/// Per-node class log-likelihoods computed directly from the stack.
pub fn node_log_likelihoods(stack: &RasterStack, params: &ModelParams) -> Vec<[f64; 2]> {
    let mut lik = vec![[0.0; 2]; stack.len()];
    for (i, &cell) in stack.observed_cells().iter().enumerate() {
        let x = stack.observed_feature(i);
        lik[cell as usize] = [log_density(&params.classes[0], x), log_density(&params.classes[1], x)];
    }
    lik
}

pub fn enumerate_joint(tree: &SplitTree, stack: &RasterStack, params: &ModelParams) -> Result<JointTable> {
    if tree.len() != stack.len() {
        return Err(Error::Alignment(format!(
            "tree has {} nodes, stack has {} cells",
            tree.len(),
            stack.len()
        )));
    }
    enumerate_log_likelihoods(tree, &node_log_likelihoods(stack, params), params)
}

/// [`enumerate_joint`] with the emission terms given directly.
pub fn enumerate_log_likelihoods(tree: &SplitTree, lik: &[[f64; 2]], params: &ModelParams) -> Result<JointTable> {
    let nodes = tree.len();
    if nodes > MAX_ENUMERATION_NODES {
        return Err(Error::Size(format!(
            "enumeration is limited to {MAX_ENUMERATION_NODES} nodes, tree has {nodes}"
        )));
    }
    let mut labels = vec![0u8; nodes];
    let log_joint: Vec<f64> = (0..1usize << nodes)
        .map(|a| {
            for (k, l) in labels.iter_mut().enumerate() {
                *l = ((a >> k) & 1) as u8;
            }
            log_joint(tree, lik, params, &labels)
        })
        .collect();
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_evidence = max + log_joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(JointTable {
        nodes,
        parents: (0..nodes)
            .map(|n| tree.parents(n).iter().map(|&k| k as usize).collect())
            .collect(),
        log_joint,
        log_evidence,
    })
}

impl JointTable {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `ln sum_Y P(X_o, Y)`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// Log joint of the assignment whose bit `k` is node `k`'s class.
    pub fn log_joint_of(&self, assignment: usize) -> f64 {
        self.log_joint[assignment]
    }

    fn posterior(&self, a: usize) -> f64 {
        (self.log_joint[a] - self.log_evidence).exp()
    }

    pub fn marginal(&self, k: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        for a in 0..self.log_joint.len() {
            out[(a >> k) & 1] += self.posterior(a);
        }
        out
    }

    /// `P(y_k, parent product)` indexed `[y][v]`; zero at leaves.
    pub fn pair(&self, k: usize) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        if self.parents[k].is_empty() {
            return out;
        }
        for a in 0..self.log_joint.len() {
            let v = self.parents[k].iter().all(|&p| (a >> p) & 1 == 1) as usize;
            out[(a >> k) & 1][v] += self.posterior(a);
        }
        out
    }

    /// The most probable labelling and its log joint. Scores within `1e-12`
    /// (relative) count as tied; ties prefer fewer class-1 nodes, then the
    /// lexicographically smallest label vector in node order.
    pub fn map(&self) -> (Vec<u8>, f64) {
        let best = self.log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-12 * best.abs().max(1.0);
        let labels_of = |a: usize| -> Vec<u8> { (0..self.nodes).map(|k| ((a >> k) & 1) as u8).collect() };
        let pick = (0..self.log_joint.len())
            .filter(|&a| self.log_joint[a] >= best - tol)
            .min_by(|&a, &b| {
                a.count_ones()
                    .cmp(&b.count_ones())
                    .then_with(|| labels_of(a).cmp(&labels_of(b)))
            })
            .expect("at least one assignment");
        (labels_of(pick), self.log_joint[pick])
    }
}

/// A small random model for oracle comparisons.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub tree: SplitTree,
    pub stack: RasterStack,
    pub params: ModelParams,
}

fn random_component<R: Rng>(rng: &mut R, m: usize) -> GaussianComponent {
    let mean: Vec<f64> = (0..m).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let a: Vec<f64> = (0..m * m).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut cov = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cov[i * m + j] = (0..m).map(|t| a[i * m + t] * a[j * m + t]).sum::<f64>();
        }
        cov[i * m + i] += 0.3;
    }
    GaussianComponent::new(mean, cov).expect("positive definite by construction")
}

/// Random tree of 4..=`max_nodes` nodes (fewer if `max_nodes < 4`), random
/// feature dimension 1 or 2, random mask with enough observed cells for a
/// full-rank covariance, and random parameters. `k` fixes the mixture size;
/// `None` draws 1 or 2 per class.
pub fn random_instance(seed: u64, max_nodes: usize, k: Option<usize>) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = max_nodes.clamp(1, 4);
    let n = rng.random_range(lo..=max_nodes.max(lo));
    // positions in processing order; each picks a later position as child
    let perm = sample(&mut rng, n, n).into_vec();
    let mut child = vec![None; n];
    for pos in 0..n.saturating_sub(1) {
        let target = rng.random_range(pos + 1..n);
        child[perm[pos]] = Some(perm[target]);
    }
    let tree = SplitTree::from_child_links(&child).expect("valid random tree");

    let m = rng.random_range(1..=2usize);
    let need = (m + 2).min(n);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
    let mut seen = mask.iter().filter(|&&b| b).count();
    for k in sample(&mut rng, n, n) {
        if seen >= need {
            break;
        }
        if !mask[k] {
            mask[k] = true;
            seen += 1;
        }
    }
    let mut rank = vec![0.0; n];
    for (i, &node) in tree.order().iter().enumerate() {
        rank[node as usize] = i as f64;
    }
    let elev = RasterGrid::new(1, n, rank).expect("non-empty");
    let bands = (0..m)
        .map(|_| {
            let vals = (0..n)
                .map(|k| {
                    let v = 2.0 * rng.sample::<f64, _>(StandardNormal);
                    if mask[k] {
                        v
                    } else {
                        DEFAULT_NODATA
                    }
                })
                .collect();
            elev.with_values(vals).expect("same shape")
        })
        .collect();
    let stack = assemble_stack(elev, bands, None).expect("valid stack");

    let mixture = |rng: &mut ChaCha8Rng| {
        let kc = k.unwrap_or_else(|| rng.random_range(1..=2));
        let weights: Vec<f64> = (0..kc).map(|_| rng.random_range(0.2..1.0)).collect();
        let comps = (0..kc).map(|_| random_component(rng, m)).collect();
        ClassMixture::new(weights, comps).expect("valid mixture")
    };
    let c0 = mixture(&mut rng);
    let c1 = mixture(&mut rng);
    let rho = rng.random_range(0.05..0.999);
    let pi = rng.random_range(0.05..0.95);
    let params = ModelParams::new(rho, pi, [c0, c1]).expect("valid parameters");
    RandomInstance { tree, stack, params }
}

/// Copies of `params`, each with one free parameter shifted by `h`: `rho`,
/// `pi`, every mean entry, every covariance entry (kept symmetric) and, for
/// mixtures, adjacent weight pairs moved in opposite directions. Shifts that
/// would leave `[0, 1]` for a probability are skipped.
pub fn single_parameter_perturbations(params: &ModelParams, h: f64) -> Vec<ModelParams> {
    let mut out = Vec::new();
    let prob_ok = |v: f64| v > 0.0 && v < 1.0;
    if prob_ok(params.rho + h) {
        let mut p = params.clone();
        p.rho += h;
        out.push(p);
    }
    if prob_ok(params.pi + h) {
        let mut p = params.clone();
        p.pi += h;
        out.push(p);
    }
    let m = params.dim();
    for c in 0..2 {
        let mix = &params.classes[c];
        let rebuild = |weights: Vec<f64>, comps: Vec<GaussianComponent>| {
            let mut p = params.clone();
            p.classes[c] = ClassMixture::new(weights, comps).expect("perturbed mixture");
            p
        };
        for i in 0..mix.k() {
            let comp = &mix.components()[i];
            for j in 0..m {
                let mut mean = comp.mean().to_vec();
                mean[j] += h;
                let mut comps = mix.components().to_vec();
                comps[i] = GaussianComponent::new(mean, comp.cov().to_vec()).expect("same covariance");
                out.push(rebuild(mix.weights().to_vec(), comps));
            }
            for a in 0..m {
                for b in 0..=a {
                    let mut cov = comp.cov().to_vec();
                    cov[a * m + b] += h;
                    if a != b {
                        cov[b * m + a] += h;
                    }
                    if let Ok(g) = GaussianComponent::new(comp.mean().to_vec(), cov) {
                        let mut comps = mix.components().to_vec();
                        comps[i] = g;
                        out.push(rebuild(mix.weights().to_vec(), comps));
                    }
                }
            }
            if i + 1 < mix.k() {
                let mut w = mix.weights().to_vec();
                w[i] += h;
                w[i + 1] -= h;
                if prob_ok(w[i]) && prob_ok(w[i + 1]) {
                    out.push(rebuild(w, mix.components().to_vec()));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split_tree::build_split_tree;

    fn one_component(mean: f64) -> ClassMixture {
        ClassMixture::single(GaussianComponent::new(vec![mean], vec![1.0]).unwrap())
    }

    fn params(rho: f64, pi: f64) -> ModelParams {
        ModelParams::new(rho, pi, [one_component(0.0), one_component(2.0)]).unwrap()
    }

    #[test]
    fn single_unobserved_node_table() {
        let tree = SplitTree::from_child_links(&[None]).unwrap();
        let t = enumerate_log_likelihoods(&tree, &[[0.0, 0.0]], &params(0.9, 0.3)).unwrap();
        assert!((t.log_joint_of(0).exp() - 0.7).abs() < 1e-15);
        assert!((t.log_joint_of(1).exp() - 0.3).abs() < 1e-15);
        assert!(t.log_evidence().abs() < 1e-15);
    }

    #[test]
    fn chain_with_rho_one_forbids_wet_below_dry() {
        // node 0 is the parent of node 1
        let tree = SplitTree::from_child_links(&[Some(1), None]).unwrap();
        let t = enumerate_log_likelihoods(&tree, &[[0.0; 2]; 2], &params(1.0, 0.4)).unwrap();
        // assignment bits: node 0 = bit 0; child wet (bit 1) with parent dry
        assert_eq!(t.log_joint_of(0b10), f64::NEG_INFINITY);
        assert_eq!(t.pair(1)[1][0], 0.0);
    }

    #[test]
    fn random_tables_are_normalized() {
        for seed in 0..20 {
            let inst = random_instance(seed, 12, None);
            let t = enumerate_joint(&inst.tree, &inst.stack, &inst.params).unwrap();
            assert!(t.log_evidence().is_finite());
            for k in 0..t.nodes() {
                let m = t.marginal(k);
                assert!((m[0] + m[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_rejects_large_trees() {
        let child: Vec<Option<usize>> = (0..13).map(|i| (i < 12).then_some(i + 1)).collect();
        let tree = SplitTree::from_child_links(&child).unwrap();
        let lik = vec![[0.0; 2]; 13];
        assert!(matches!(
            enumerate_log_likelihoods(&tree, &lik, &params(0.9, 0.5)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn map_tie_prefers_dry() {
        let tree = SplitTree::from_child_links(&[None]).unwrap();
        let t = enumerate_log_likelihoods(&tree, &[[0.0, 0.0]], &params(0.9, 0.5)).unwrap();
        assert_eq!(t.map().0, vec![0]);
    }

    #[test]
    fn key_values_parse() {
        let map = parse_key_values("rows = 10 # comment\n\ncols=12\n").unwrap();
        assert_eq!(map["rows"], "10");
        assert_eq!(map["cols"], "12");
        assert!(parse_key_values("rows\n").is_err());
        assert!(parse_key_values("a=1\na=2\n").is_err());
    }

    #[test]
    fn config_builds_spec() {
        let map = parse_key_values(
            "rows=20\ncols=30\nterrain=bowl\nflood_level=40\nobserve_fraction=0.2\npattern=swath\nseed=5\n",
        )
        .unwrap();
        let spec = SceneSpec::from_config(&map).unwrap();
        assert_eq!((spec.rows, spec.cols), (20, 30));
        assert_eq!(spec.terrain, Terrain::Bowl);
        assert_eq!(spec.flood, FloodLevel::Elevation(40.0));
        assert_eq!(spec.pattern, ObservationPattern::Swath);
        let bad = parse_key_values("terrain=volcano\n").unwrap();
        assert!(SceneSpec::from_config(&bad).is_err());
        let unknown = parse_key_values("colour=red\n").unwrap();
        assert!(SceneSpec::from_config(&unknown).is_err());
    }

    #[test]
    fn terrains_span_full_range() {
        for terrain in [Terrain::Bowl, Terrain::Ridged, Terrain::Fractal { roughness: 0.55 }] {
            let v = generate_terrain(17, 23, terrain, 3);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 100.0));
        }
    }

    #[test]
    fn bowl_at_median_floods_connected_basin() {
        let mut spec = SceneSpec::new(15, 15, Terrain::Bowl, Preset::SingleModal, 1);
        spec.flood = FloodLevel::Quantile(0.5);
        let scene = generate_scene(&spec).unwrap();
        let truth = scene.stack.truth.as_ref().unwrap();
        let elev = &scene.stack.elevation.values;
        for k in 0..elev.len() {
            assert_eq!(truth.values[k] == 1.0, elev[k] <= scene.flood_level, "cell {k}");
        }
        let tree = build_split_tree(&scene.stack.elevation).unwrap();
        for n in 0..tree.len() {
            if truth.values[n] == 1.0 {
                assert!(tree.parents(n).iter().all(|&p| truth.values[p as usize] == 1.0));
            }
        }
    }

    #[test]
    fn full_observation_and_swath_masks() {
        let mut spec = SceneSpec::new(20, 40, Terrain::Fractal { roughness: 0.5 }, Preset::SingleModal, 2);
        spec.observe_fraction = 1.0;
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.stack.observed_mask().iter().all(|&b| b));

        spec.observe_fraction = 0.1;
        spec.pattern = ObservationPattern::Swath;
        let scene = generate_scene(&spec).unwrap();
        let cols: Vec<usize> = (0..40).filter(|&c| scene.stack.is_observed(c)).collect();
        assert_eq!(cols.len(), 4);
        assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
        let wet_seen = (0..800).filter(|&k| scene.stack.is_observed(k) && scene.stack.truth_class(k) == Some(1)).count();
        assert!(wet_seen > 0);
        for r in 0..20 {
            for c in 0..40 {
                assert_eq!(scene.stack.is_observed(r * 40 + c), cols.contains(&c));
            }
        }
    }

    #[test]
    fn degenerate_flood_level_is_an_error() {
        let mut spec = SceneSpec::new(10, 10, Terrain::Bowl, Preset::SingleModal, 0);
        spec.flood = FloodLevel::Elevation(-1.0);
        assert!(matches!(generate_scene(&spec), Err(Error::Scene(_))));
        spec.flood = FloodLevel::Elevation(100.0);
        assert!(matches!(generate_scene(&spec), Err(Error::Scene(_))));
    }

    #[test]
    fn bimodal_training_rows_split_per_class() {
        let mut spec = SceneSpec::new(20, 20, Terrain::Fractal { roughness: 0.5 }, Preset::Bimodal, 4);
        spec.train_per_class = 200;
        let scene = generate_scene(&spec).unwrap();
        let train = &scene.train;
        assert_eq!(train.class_count(0), 200);
        assert_eq!(train.class_count(1), 200);
        // class 0 modes sit near 20 and 60 on the first band, nothing near 40
        let first: Vec<f64> = (0..train.len())
            .filter(|&i| train.labels()[i] == 0)
            .map(|i| train.row(i)[0])
            .collect();
        let low = first.iter().filter(|&&v| v < 40.0).count();
        assert!(low > 60 && low < 140);
        assert!(first.iter().filter(|&&v| (v - 40.0).abs() < 4.0).count() < 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::new(30, 30, Terrain::Fractal { roughness: 0.55 }, Preset::Bimodal, 9);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.stack.features, b.stack.features);
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn perturbations_cover_every_parameter() {
        let p = params(0.5, 0.5);
        // rho, pi, and per class one mean and one variance
        assert_eq!(single_parameter_perturbations(&p, 1e-3).len(), 6);
    }
}
