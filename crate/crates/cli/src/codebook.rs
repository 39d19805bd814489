//! Codebooks planted from a session's own tokens, so the mock backend
//! answers with a known caption for every view, object and the scene.

use convsplat_core::chat::{Codebook, CodebookEntry};
use convsplat_core::{Result, Session};

pub fn object_caption(m: usize) -> String {
    format!("object {m}")
}

pub fn view_caption(cam: usize) -> String {
    format!("view {cam}")
}

pub const SCENE_CAPTION: &str = "the whole scene";

fn entry(mean: Vec<f64>, caption: String) -> CodebookEntry {
    CodebookEntry {
        vector: mean.into_iter().map(|v| v as f32).collect(),
        caption,
    }
}

/// One entry per view, per visible `(view, object)` pair and one for the
/// scene grid over all views. `captions[m]` names object `m`; missing
/// names fall back to [`object_caption`].
pub fn planted_codebook(session: &Session, captions: &[String]) -> Result<Codebook> {
    let n_cams = session.scene.cameras.len();
    let mut entries = Vec::new();
    for c in 0..n_cams {
        entries.push(entry(session.view_tokens(c)?.mean_token(), view_caption(c)));
        let masks = match session.cached_masks(c) {
            Some(m) => m.clone(),
            None => session.compute_masks(c)?,
        };
        for m in 0..session.scene.object_count {
            if masks.object_mask(m).is_empty() {
                continue;
            }
            let caption = captions.get(m).cloned().unwrap_or_else(|| object_caption(m));
            entries.push(entry(session.object_tokens(c, m)?.mean_token(), caption));
        }
    }
    let all: Vec<usize> = (0..n_cams).collect();
    entries.push(entry(session.scene_tokens(&all)?.mean_token(), SCENE_CAPTION.into()));
    Codebook::new(session.token_shape().1, entries)
}
