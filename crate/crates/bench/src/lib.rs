//! Fixtures shared by the benchmarks.

use convsplat_core::encoder::{Encoder, EncoderConfig};
use convsplat_core::raster::bench::make_bench_scene;
use convsplat_core::scene::{make_synthetic_scene, SynthSpec, DEFAULT_FEATURE_DIM, DEFAULT_IDENTITY_DIM};
use convsplat_core::teacher::{make_synthetic_teacher, TeacherSpec, TeacherTokens};
use convsplat_core::{FeatureMap, Gaussians, Session, TrainConfig};

pub fn raster_scene(n: usize) -> Gaussians {
    make_bench_scene(n, DEFAULT_FEATURE_DIM, DEFAULT_IDENTITY_DIM, 1)
}

/// A smooth feature map of the default width and a randomly initialised
/// encoder to go with it.
pub fn encoder_fixture(res: usize, config: EncoderConfig) -> (Encoder, FeatureMap) {
    let c = config.feature_dim;
    let data = (0..res * res * c).map(|i| ((i as f64) * 0.37).sin()).collect();
    let map = FeatureMap::from_vec(res, res, c, data).expect("fixture shape");
    (Encoder::random(config, 3).expect("encoder config"), map)
}

/// A small labelled scene with a teacher, ready for training steps.
pub fn training_fixture(res: u32) -> (Session, TeacherTokens) {
    let mut spec = SynthSpec::new(2, 120, 5);
    spec.n_cameras = 2;
    spec.width = res;
    spec.height = res;
    let scene = make_synthetic_scene(&spec);
    let cfg = TrainConfig::desk();
    let teacher = make_synthetic_teacher(&scene, &TeacherSpec::new(cfg.encoder.token_dim, cfg.encoder.patch, 6))
        .expect("teacher");
    (Session::new(scene, cfg).expect("session"), teacher)
}
