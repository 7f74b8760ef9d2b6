//! Command-line front end. Every command takes the same option set; values
//! may also come from a `key = value` file given with `--config`, and flags
//! win over the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::baselines::{em_iid_fit, em_iid_predict, lp_structure};
use crate::em_learning::{
    initialize, run_em, ModelParams, DEFAULT_MAX_ITER, DEFAULT_PI0, DEFAULT_RHO0, DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::eval::{score, score_labels, MetricsReport};
use crate::inference::max_sum_infer;
use crate::raster_io::{
    assemble_stack, read_ascii_grid, read_training_csv, write_ascii_grid, write_class_grid, write_training_csv,
    RasterGrid, RasterStack, TrainingSet, ValueFormat,
};
use crate::split_tree::build_split_tree;
use crate::synth::{generate_scene, parse_key_values, ObservationPattern, Preset, SceneSpec, Terrain};

#[derive(Debug, Parser)]
#[command(name = "hmt", version, about = "Flood extent mapping with a hidden Markov tree over elevation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the split tree of an elevation grid.
    BuildTree(Opts),
    /// Learn parameters by EM and write them out.
    Train(Opts),
    /// Label every cell by max-sum under given parameters.
    Infer(Opts),
    /// Tree, EM, MAP and metrics end to end.
    Run(Opts),
    /// Run a comparison method (em-iid or lp-mlc).
    Baseline(Opts),
    /// Generate a synthetic scene.
    Synth(Opts),
    /// Score a class grid against truth.
    Eval(Opts),
    /// Time each stage over a range of scene sizes.
    Bench(Opts),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildTree(_) => "build-tree",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Run(_) => "run",
            Command::Baseline(_) => "baseline",
            Command::Synth(_) => "synth",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
        }
    }

    fn opts(&self) -> &Opts {
        match self {
            Command::BuildTree(o)
            | Command::Train(o)
            | Command::Infer(o)
            | Command::Run(o)
            | Command::Baseline(o)
            | Command::Synth(o)
            | Command::Eval(o)
            | Command::Bench(o) => o,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    #[arg(long)]
    pub elevation: Option<PathBuf>,
    /// Feature band grid; repeat once per band.
    #[arg(long)]
    pub features: Vec<PathBuf>,
    /// Grid whose non-zero cells may be treated as observed.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Training CSV: feature columns then a 0/1 label.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Parameter file for `infer`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Class grid for `eval`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// structure-single, structure-multi, em-iid or lp-mlc.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub k0: Option<usize>,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub pi0: Option<f64>,
    #[arg(long)]
    pub rho0: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated cell counts for `bench`.
    #[arg(long)]
    pub sizes: Option<String>,
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    StructureSingle,
    StructureMulti,
    EmIid,
    LpMlc,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "structure-single" => Ok(Method::StructureSingle),
            "structure-multi" => Ok(Method::StructureMulti),
            "em-iid" => Ok(Method::EmIid),
            "lp-mlc" => Ok(Method::LpMlc),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::StructureSingle => "structure-single",
            Method::StructureMulti => "structure-multi",
            Method::EmIid => "em-iid",
            Method::LpMlc => "lp-mlc",
        }
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    pub elevation: Option<PathBuf>,
    pub features: Vec<PathBuf>,
    pub mask: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub method: Method,
    pub k0: usize,
    pub k1: usize,
    pub pi0: f64,
    pub rho0: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub threads: Option<usize>,
    pub sizes: Vec<usize>,
    /// Entries of the config file not consumed here (scene keys for `synth`).
    pub extra: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

const DEFAULT_BENCH_SIZES: [usize; 5] = [250_000, 500_000, 1_000_000, 2_000_000, 4_000_000];

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.remove(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        })
        .transpose()
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid size `{t}`")))
        })
        .collect()
}

impl RunConfig {
    pub fn resolve(command: &str, opts: &Opts) -> Result<Self> {
        let mut file = match &opts.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut map = parse_key_values(&text)?;
                // dashes and underscores are interchangeable in keys
                map = map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
                map
            }
            None => BTreeMap::new(),
        };
        let base = opts
            .config
            .as_ref()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let path_from_file = |map: &mut BTreeMap<String, String>, key: &str| map.remove(key).map(|v| base.join(v));

        let elevation = opts.elevation.clone().or(path_from_file(&mut file, "elevation"));
        let file_features: Vec<PathBuf> = file
            .remove("features")
            .map(|v| v.split(',').map(|s| base.join(s.trim())).collect())
            .unwrap_or_default();
        let features = if opts.features.is_empty() {
            file_features
        } else {
            opts.features.clone()
        };
        let mask = opts.mask.clone().or(path_from_file(&mut file, "mask"));
        let train = opts.train.clone().or(path_from_file(&mut file, "train"));
        let truth = opts.truth.clone().or(path_from_file(&mut file, "truth"));
        let params = opts.params.clone().or(path_from_file(&mut file, "params"));
        let pred = opts.pred.clone().or(path_from_file(&mut file, "pred"));
        let out_dir = opts
            .out_dir
            .clone()
            .or(path_from_file(&mut file, "out_dir"))
            .unwrap_or_else(|| PathBuf::from("."));
        let method_name = opts.method.clone().or(file.remove("method"));
        let method = match (&method_name, command) {
            (Some(m), _) => Method::parse(m)?,
            (None, "baseline") => Method::EmIid,
            (None, _) => Method::StructureSingle,
        };
        let k0_given = opts.k0.or(take(&mut file, "k0")?);
        let k1_given = opts.k1.or(take(&mut file, "k1")?);
        let mut warnings = Vec::new();
        let (k0, k1) = match method {
            Method::StructureSingle => {
                if k0_given.is_some_and(|k| k != 1) || k1_given.is_some_and(|k| k != 1) {
                    warnings.push("structure-single uses one component per class; --k0/--k1 ignored".to_string());
                }
                (1, 1)
            }
            _ => (k0_given.unwrap_or(2), k1_given.unwrap_or(2)),
        };
        if k0 == 0 || k1 == 0 {
            return Err(Error::Config("component counts must be at least 1".into()));
        }
        let pi0 = opts.pi0.or(take(&mut file, "pi0")?).unwrap_or(DEFAULT_PI0);
        let rho0 = opts.rho0.or(take(&mut file, "rho0")?).unwrap_or(DEFAULT_RHO0);
        for (name, v) in [("pi0", pi0), ("rho0", rho0)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is not a probability")));
            }
        }
        let max_iter = opts
            .max_iter
            .or(take(&mut file, "max_iter")?)
            .unwrap_or(DEFAULT_MAX_ITER);
        let tol = opts.tol.or(take(&mut file, "tol")?).unwrap_or(DEFAULT_TOL);
        if !(tol >= 0.0) {
            return Err(Error::Config(format!("tol = {tol} must be non-negative")));
        }
        let seed = opts.seed.or(take(&mut file, "seed")?).unwrap_or(0);
        let threads = opts.threads.or(take(&mut file, "threads")?);
        if threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let sizes = match opts.sizes.clone().or(file.remove("sizes")) {
            Some(s) => parse_sizes(&s)?,
            None => DEFAULT_BENCH_SIZES.to_vec(),
        };

        let cfg = Self {
            command: command.to_string(),
            elevation,
            features,
            mask,
            train,
            truth,
            params,
            pred,
            out_dir,
            method,
            k0,
            k1,
            pi0,
            rho0,
            max_iter,
            tol,
            seed,
            threads,
            sizes,
            extra: file,
            warnings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let need = |present: bool, what: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("`{}` needs --{what}", self.command)))
            }
        };
        let raster_inputs = || -> Result<()> {
            need(self.elevation.is_some(), "elevation")?;
            need(!self.features.is_empty(), "features")
        };
        match self.command.as_str() {
            "build-tree" => need(self.elevation.is_some(), "elevation"),
            "train" => {
                raster_inputs()?;
                need(self.train.is_some(), "train")?;
                if matches!(self.method, Method::EmIid | Method::LpMlc) {
                    return Err(Error::Config("`train` supports the structure methods only".into()));
                }
                Ok(())
            }
            "infer" => {
                raster_inputs()?;
                need(self.params.is_some(), "params")
            }
            "run" | "baseline" => {
                raster_inputs()?;
                need(self.train.is_some(), "train")?;
                if self.command == "baseline"
                    && matches!(self.method, Method::StructureSingle | Method::StructureMulti)
                {
                    return Err(Error::Config("`baseline` takes --method em-iid or lp-mlc".into()));
                }
                Ok(())
            }
            "eval" => {
                need(self.pred.is_some(), "pred")?;
                need(self.truth.is_some(), "truth")
            }
            _ => Ok(()),
        }
    }

    /// Every setting as `key = value` lines.
    pub fn manifest_lines(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "elevation = {}", path(&self.elevation));
        let feats: Vec<String> = self.features.iter().map(|p| p.display().to_string()).collect();
        let _ = writeln!(out, "features = {}", feats.join(","));
        let _ = writeln!(out, "mask = {}", path(&self.mask));
        let _ = writeln!(out, "train = {}", path(&self.train));
        let _ = writeln!(out, "truth = {}", path(&self.truth));
        let _ = writeln!(out, "method = {}", self.method.name());
        let _ = writeln!(out, "k0 = {}", self.k0);
        let _ = writeln!(out, "k1 = {}", self.k1);
        let _ = writeln!(out, "pi0 = {}", self.pi0);
        let _ = writeln!(out, "rho0 = {}", self.rho0);
        let _ = writeln!(out, "max_iter = {}", self.max_iter);
        let _ = writeln!(out, "tol = {}", self.tol);
        let _ = writeln!(out, "seed = {}", self.seed);
        let threads = self.threads.map_or_else(|| "default".to_string(), |t| t.to_string());
        let _ = writeln!(out, "threads = {threads}");
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn training_has_header(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let field = first.split(',').next().unwrap_or("").trim();
    Ok(field.parse::<f64>().is_err())
}

fn load_stack(cfg: &RunConfig) -> Result<RasterStack> {
    let elevation = read_ascii_grid(cfg.elevation.as_ref().expect("validated"))?;
    let features = cfg.features.iter().map(read_ascii_grid).collect::<Result<Vec<_>>>()?;
    let truth = cfg.truth.as_ref().map(read_ascii_grid).transpose()?;
    let mut stack = assemble_stack(elevation, features, truth)?;
    if let Some(mask) = &cfg.mask {
        stack.restrict_observed(&read_ascii_grid(mask)?)?;
    }
    Ok(stack)
}

fn load_training(cfg: &RunConfig, m: usize) -> Result<TrainingSet> {
    let path = cfg.train.as_ref().expect("validated");
    read_training_csv(path, m, training_has_header(path)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Labels, learned parameters, trace and timings of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub classes: Vec<u8>,
    pub params: Option<ModelParams>,
    pub trace_csv: Option<String>,
    pub iterations: usize,
    pub converged: bool,
    pub tree_seconds: f64,
    pub learn_seconds: f64,
    pub infer_seconds: f64,
}

/// Runs one method on an assembled stack. For the structure methods this is
/// tree construction, EM and max-sum.
pub fn run_pipeline(cfg: &RunConfig, stack: &RasterStack, train: &TrainingSet) -> Result<PipelineOutput> {
    let t0 = Instant::now();
    let needs_tree = cfg.method != Method::EmIid;
    let tree = if needs_tree {
        Some(build_split_tree(&stack.elevation)?)
    } else {
        None
    };
    let tree_seconds = t0.elapsed().as_secs_f64();
    match cfg.method {
        Method::StructureSingle | Method::StructureMulti => {
            let tree = tree.expect("built above");
            let t1 = Instant::now();
            let init = initialize(train, cfg.k0, cfg.k1, cfg.pi0, cfg.rho0, cfg.seed)?;
            let (params, trace) = run_em(&tree, stack, init, cfg.max_iter, cfg.tol)?;
            let learn_seconds = t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            let map = max_sum_infer(&tree, stack, &params)?;
            let infer_seconds = t2.elapsed().as_secs_f64();
            Ok(PipelineOutput {
                classes: map.classes,
                params: Some(params),
                iterations: trace.len(),
                converged: trace.converged,
                trace_csv: Some(trace.to_csv()),
                tree_seconds,
                learn_seconds,
                infer_seconds,
            })
        }
        Method::EmIid => {
            let t1 = Instant::now();
            let params = em_iid_fit(stack, train, cfg.max_iter, cfg.tol)?;
            let learn_seconds = t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            let classes = em_iid_predict(&params, stack);
            Ok(PipelineOutput {
                classes,
                params: None,
                trace_csv: None,
                iterations: 0,
                converged: false,
                tree_seconds,
                learn_seconds,
                infer_seconds: t2.elapsed().as_secs_f64(),
            })
        }
        Method::LpMlc => {
            let tree = tree.expect("built above");
            let t2 = Instant::now();
            let classes = lp_structure(stack, &tree, train)?;
            Ok(PipelineOutput {
                classes,
                params: None,
                trace_csv: None,
                iterations: 0,
                converged: false,
                tree_seconds,
                learn_seconds: 0.0,
                infer_seconds: t2.elapsed().as_secs_f64(),
            })
        }
    }
}

fn metrics_for(stack: &RasterStack, classes: &[u8]) -> Option<Result<MetricsReport>> {
    stack.truth.as_ref().map(|t| {
        let truth: Vec<Option<u8>> = (0..t.len()).map(|n| t.class_at(n)).collect();
        score_labels(classes, &truth)
    })
}

fn cmd_build_tree(cfg: &RunConfig) -> Result<String> {
    let elevation = read_ascii_grid(cfg.elevation.as_ref().expect("validated"))?;
    let t0 = Instant::now();
    let tree = build_split_tree(&elevation)?;
    let secs = t0.elapsed().as_secs_f64();
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("tree.txt"), &tree.debug_dump())?;
    Ok(format!(
        "nodes {} leaves {} edges {} seconds {secs:.3}\n",
        tree.len(),
        tree.leaves().count(),
        tree.edge_count()
    ))
}

fn write_run_artifacts(
    cfg: &RunConfig,
    stack: &RasterStack,
    out: &PipelineOutput,
    total_seconds: f64,
) -> Result<String> {
    ensure_dir(&cfg.out_dir)?;
    let grid = stack
        .elevation
        .with_values(out.classes.iter().map(|&c| f64::from(c)).collect())?;
    write_class_grid(&grid, cfg.out_dir.join("classes.asc"))?;
    if let Some(p) = &out.params {
        p.write(&cfg.out_dir.join("params.txt"))?;
    }
    if let Some(csv) = &out.trace_csv {
        write_text(&cfg.out_dir.join("em_trace.csv"), csv)?;
    }
    let mut summary = String::new();
    let mut manifest = cfg.manifest_lines();
    let _ = writeln!(manifest, "cells = {}", stack.len());
    let _ = writeln!(manifest, "observed = {}", stack.observed_cells().len());
    let _ = writeln!(manifest, "iterations = {}", out.iterations);
    let _ = writeln!(manifest, "converged = {}", out.converged);
    if let Some(p) = &out.params {
        let _ = writeln!(manifest, "rho = {:.16e}", p.rho);
        let _ = writeln!(manifest, "pi = {:.16e}", p.pi);
    }
    if let Some(report) = metrics_for(stack, &out.classes) {
        let report = report?;
        write_text(&cfg.out_dir.join("metrics.txt"), &report.to_table())?;
        write_text(&cfg.out_dir.join("metrics.csv"), &report.to_csv())?;
        let _ = writeln!(manifest, "average_f = {}", report.average_f);
        summary.push_str(&report.to_table());
    }
    let _ = writeln!(manifest, "tree_seconds = {:.6}", out.tree_seconds);
    let _ = writeln!(manifest, "learn_seconds = {:.6}", out.learn_seconds);
    let _ = writeln!(manifest, "infer_seconds = {:.6}", out.infer_seconds);
    let _ = writeln!(manifest, "total_seconds = {total_seconds:.6}");
    write_text(&cfg.out_dir.join("manifest.txt"), &manifest)?;
    let _ = writeln!(
        summary,
        "{} cells, {} observed, {} EM iterations, {total_seconds:.3} s",
        stack.len(),
        stack.observed_cells().len(),
        out.iterations
    );
    Ok(summary)
}

fn cmd_run(cfg: &RunConfig) -> Result<String> {
    let t0 = Instant::now();
    let stack = load_stack(cfg)?;
    let train = load_training(cfg, stack.dim())?;
    let out = run_pipeline(cfg, &stack, &train)?;
    write_run_artifacts(cfg, &stack, &out, t0.elapsed().as_secs_f64())
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let stack = load_stack(cfg)?;
    let train = load_training(cfg, stack.dim())?;
    let t0 = Instant::now();
    let tree = build_split_tree(&stack.elevation)?;
    let init = initialize(&train, cfg.k0, cfg.k1, cfg.pi0, cfg.rho0, cfg.seed)?;
    let (params, trace) = run_em(&tree, &stack, init, cfg.max_iter, cfg.tol)?;
    ensure_dir(&cfg.out_dir)?;
    params.write(&cfg.out_dir.join("params.txt"))?;
    write_text(&cfg.out_dir.join("em_trace.csv"), &trace.to_csv())?;
    let mut manifest = cfg.manifest_lines();
    let _ = writeln!(manifest, "iterations = {}", trace.len());
    let _ = writeln!(manifest, "converged = {}", trace.converged);
    let _ = writeln!(manifest, "total_seconds = {:.6}", t0.elapsed().as_secs_f64());
    write_text(&cfg.out_dir.join("manifest.txt"), &manifest)?;
    Ok(format!(
        "rho {:.6} pi {:.6} after {} iterations (converged: {})\n",
        params.rho,
        params.pi,
        trace.len(),
        trace.converged
    ))
}

fn cmd_infer(cfg: &RunConfig) -> Result<String> {
    let stack = load_stack(cfg)?;
    let params = ModelParams::read(cfg.params.as_ref().expect("validated"))?;
    let tree = build_split_tree(&stack.elevation)?;
    let map = max_sum_infer(&tree, &stack, &params)?;
    ensure_dir(&cfg.out_dir)?;
    write_class_grid(&map.to_grid(&stack.elevation)?, cfg.out_dir.join("classes.asc"))?;
    let mut out = format!("map log score {:.6}\n", map.map_log_score);
    if let Some(report) = metrics_for(&stack, &map.classes) {
        out.push_str(&report?.to_table());
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let pred = read_ascii_grid(cfg.pred.as_ref().expect("validated"))?;
    let truth = read_ascii_grid(cfg.truth.as_ref().expect("validated"))?;
    let report = score(&pred, &truth)?;
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("metrics.csv"), &report.to_csv())?;
    Ok(report.to_table())
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let mut keys = cfg.extra.clone();
    keys.entry("seed".into()).or_insert_with(|| cfg.seed.to_string());
    let params_path = keys.remove("params");
    let mut spec = SceneSpec::from_config(&keys)?;
    if let Some(p) = params_path {
        spec.planted = ModelParams::read(Path::new(&p))?;
    }
    let scene = generate_scene(&spec)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let stack = &scene.stack;
    write_ascii_grid(&stack.elevation, dir.join("elevation.asc"), ValueFormat::Float)?;
    for (b, band) in stack.features.iter().enumerate() {
        write_ascii_grid(band, dir.join(format!("feature_{}.asc", b + 1)), ValueFormat::Float)?;
    }
    write_class_grid(stack.truth.as_ref().expect("scenes carry truth"), dir.join("truth.asc"))?;
    let mask = stack
        .elevation
        .with_values(stack.observed_mask().iter().map(|&o| f64::from(u8::from(o))).collect())?;
    write_ascii_grid(&mask, dir.join("mask.asc"), ValueFormat::Integer)?;
    write_training_csv(&scene.train, dir.join("train.csv"))?;
    spec.planted.write(&dir.join("planted_params.txt"))?;
    Ok(format!(
        "{}x{} scene, flood level {:.3}, {} observed cells\n",
        spec.rows,
        spec.cols,
        scene.flood_level,
        stack.observed_cells().len()
    ))
}

/// Per-stage timings of one bench size.
#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub cells: usize,
    pub tree_seconds: f64,
    pub learn_seconds: f64,
    pub infer_seconds: f64,
}

impl BenchRow {
    pub fn total(&self) -> f64 {
        self.tree_seconds + self.learn_seconds + self.infer_seconds
    }
}

/// Times tree construction, learning and inference on a square fractal
/// scene of about `cells` cells with 10% random observation.
pub fn bench_size(cells: usize, cfg: &RunConfig) -> Result<BenchRow> {
    let side = (cells as f64).sqrt().round().max(2.0) as usize;
    let rows = side;
    let cols = cells.div_ceil(side);
    let mut spec = SceneSpec::new(rows, cols, Terrain::Fractal { roughness: 0.55 }, Preset::SingleModal, cfg.seed);
    spec.pattern = ObservationPattern::Random;
    let scene = generate_scene(&spec)?;
    let out = run_pipeline(cfg, &scene.stack, &scene.train)?;
    Ok(BenchRow {
        cells: rows * cols,
        tree_seconds: out.tree_seconds,
        learn_seconds: out.learn_seconds,
        infer_seconds: out.infer_seconds,
    })
}

/// Least-squares slope of `ln total` against `ln cells`.
pub fn log_log_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.cells as f64).ln(), r.total().ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    let mut csv = String::from("cells,tree_seconds,learn_seconds,infer_seconds,total_seconds\n");
    let mut rows = Vec::new();
    for &cells in &cfg.sizes {
        let row = bench_size(cells, cfg)?;
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.cells,
            row.tree_seconds,
            row.learn_seconds,
            row.infer_seconds,
            row.total()
        );
        rows.push(row);
    }
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("bench.csv"), &csv)?;
    if rows.len() >= 2 {
        let _ = writeln!(csv, "log-log slope {:.3}", log_log_slope(&rows));
    }
    Ok(csv)
}

/// Executes a parsed command line and returns the text for stdout.
/// Warnings go to stderr.
pub fn execute(cli: &Cli) -> Result<String> {
    let command = cli.command.name();
    let cfg = RunConfig::resolve(command, cli.command.opts())?;
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    let body = || match &cli.command {
        Command::BuildTree(_) => cmd_build_tree(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Infer(_) => cmd_infer(&cfg),
        Command::Run(_) | Command::Baseline(_) => cmd_run(&cfg),
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Reads a class grid written by `run`, `infer` or `baseline`.
pub fn read_class_grid(path: &Path) -> Result<RasterGrid> {
    read_ascii_grid(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Opts {
        Opts::default()
    }

    #[test]
    fn defaults_follow_documented_values() {
        let mut o = opts();
        o.elevation = Some("e.asc".into());
        o.features = vec!["f.asc".into()];
        o.train = Some("t.csv".into());
        let cfg = RunConfig::resolve("run", &o).unwrap();
        assert_eq!(cfg.method, Method::StructureSingle);
        assert_eq!((cfg.k0, cfg.k1), (1, 1));
        assert_eq!(cfg.pi0, 0.5);
        assert_eq!(cfg.rho0, 0.999);
        assert_eq!(cfg.max_iter, 40);
        assert_eq!(cfg.tol, 1e-4);
    }

    #[test]
    fn single_method_overrides_component_counts_with_warning() {
        let mut o = opts();
        o.elevation = Some("e.asc".into());
        o.features = vec!["f.asc".into()];
        o.train = Some("t.csv".into());
        o.k0 = Some(3);
        let cfg = RunConfig::resolve("train", &o).unwrap();
        assert_eq!((cfg.k0, cfg.k1), (1, 1));
        assert_eq!(cfg.warnings.len(), 1);
        o.method = Some("structure-multi".into());
        let cfg = RunConfig::resolve("train", &o).unwrap();
        assert_eq!((cfg.k0, cfg.k1), (3, 2));
        assert!(cfg.warnings.is_empty());
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        assert!(matches!(RunConfig::resolve("run", &opts()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve("eval", &opts()), Err(Error::Config(_))));
        let mut o = opts();
        o.method = Some("magic".into());
        assert!(matches!(RunConfig::resolve("synth", &o), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "elevation = e.asc\nfeatures = a.asc, b.asc\ntrain = t.csv\nrho0 = 0.99\nseed = 4\n").unwrap();
        let mut o = opts();
        o.config = Some(path);
        o.seed = Some(9);
        let cfg = RunConfig::resolve("run", &o).unwrap();
        assert_eq!(cfg.rho0, 0.99);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.features.len(), 2);
        assert_eq!(cfg.elevation.unwrap(), dir.path().join("e.asc"));
    }

    #[test]
    fn slope_of_linear_timings_is_one() {
        let rows: Vec<BenchRow> = [1000usize, 2000, 4000]
            .iter()
            .map(|&c| BenchRow {
                cells: c,
                tree_seconds: c as f64 * 1e-3,
                learn_seconds: c as f64 * 2e-3,
                infer_seconds: 0.0,
            })
            .collect();
        assert!((log_log_slope(&rows) - 1.0).abs() < 1e-12);
    }
}
