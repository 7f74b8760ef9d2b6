//! Fixtures shared by unit tests.

use crate::em_learning::ModelParams;
use crate::feature_model::{ClassMixture, GaussianComponent};
use crate::raster_io::{RasterStack, TrainingSet};
use crate::split_tree::{build_split_tree, SplitTree};
use crate::synth::{self, generate_scene, ObservationPattern, Preset, RandomInstance, SceneSpec, Terrain};

/// One-band, one-component parameters: dry ~ N(0, 1), wet ~ N(2, 1).
pub(crate) fn chain_params(rho: f64, pi: f64) -> ModelParams {
    let g = |mean: f64| ClassMixture::single(GaussianComponent::new(vec![mean], vec![1.0]).unwrap());
    ModelParams::new(rho, pi, [g(0.0), g(2.0)]).unwrap()
}

pub(crate) fn random_instance(seed: u64, max_nodes: usize) -> RandomInstance {
    synth::random_instance(seed, max_nodes, None)
}

/// A 24x24 fractal scene with 20% random observation.
pub(crate) fn small_scene(seed: u64) -> (SplitTree, RasterStack, TrainingSet) {
    let mut spec = SceneSpec::new(24, 24, Terrain::Fractal { roughness: 0.55 }, Preset::SingleModal, seed);
    spec.observe_fraction = 0.2;
    spec.pattern = ObservationPattern::Random;
    spec.train_per_class = 40;
    let scene = generate_scene(&spec).unwrap();
    let tree = build_split_tree(&scene.stack.elevation).unwrap();
    (tree, scene.stack, scene.train)
}

pub(crate) fn perturbations(params: &ModelParams, h: f64) -> Vec<ModelParams> {
    synth::single_parameter_perturbations(params, h)
}
