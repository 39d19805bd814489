#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use convsplat_cli::codebook::planted_codebook;
use convsplat_cli::service::{spawn, AppState, Loaded, ServiceOptions};
use convsplat_core::scene::{make_synthetic_scene, SynthSpec};
use convsplat_core::{Session, TrainConfig};

pub fn session(seed: u64) -> Session {
    let mut spec = SynthSpec::new(2, 60, seed);
    spec.n_cameras = 2;
    spec.width = 56;
    spec.height = 56;
    Session::new(make_synthetic_scene(&spec), TrainConfig::desk()).unwrap()
}

/// A pixel `(x, y)` inside object `m` in camera `cam`, if it is visible.
pub fn pixel_of(loaded: &Loaded, cam: usize, m: usize) -> Option<(i64, i64)> {
    let mask = loaded.session.cached_masks(cam)?.object_mask(m);
    let i = mask.data.iter().position(|&v| v != 0)?;
    Some(((i % mask.width) as i64, (i / mask.width) as i64))
}

/// A background pixel in camera `cam`.
pub fn background_pixel(loaded: &Loaded, cam: usize) -> (i64, i64) {
    let masks = loaded.session.cached_masks(cam).unwrap();
    let i = masks.labels.iter().position(|&l| l == 0).expect("no background");
    ((i % masks.width) as i64, (i / masks.width) as i64)
}

pub fn loaded(seed: u64, with_codebook: bool) -> Loaded {
    let mut l = Loaded::new(session(seed), None);
    if with_codebook {
        l.codebook = Some(planted_codebook(&l.session, &[]).unwrap());
    }
    l
}

pub async fn serve(loaded: Option<Loaded>, options: ServiceOptions) -> (String, Arc<AppState>) {
    let state = AppState::new(options, loaded);
    let (addr, _): (SocketAddr, _) = spawn(state.clone(), "127.0.0.1:0").await.unwrap();
    (format!("http://{addr}"), state)
}
