use rayon::prelude::*;

use super::{splat_alpha, unpack_maps, Contributions, Payload, PixelState, RenderOptions, RenderOutput};
use crate::error::Result;
use crate::projection::{project_all, sort_by_depth};
use crate::scene::{Camera, Gaussians};

/// Per-pixel compositing over every projected splat, without tiling.
///
/// Saturated pixels keep iterating but accept no further contributions, so
/// the result matches [`super::render_tiled`] exactly. Contributions are
/// always recorded.
pub fn render_reference(
    gaussians: &Gaussians,
    cam: &Camera,
    opts: RenderOptions,
) -> Result<RenderOutput> {
    let width = cam.width as usize;
    let height = cam.height as usize;
    let splats = sort_by_depth(project_all(gaussians, cam))?;
    let payload = Payload::pack(gaussians, &splats, opts.channels);
    let stride = payload.stride;

    struct Row {
        values: Vec<f64>,
        alpha: Vec<f64>,
        lists: Vec<Vec<(u32, f64)>>,
        overflow: u64,
    }

    let rows: Vec<Row> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Row {
                values: vec![0.0; width * stride],
                alpha: vec![0.0; width],
                lists: Vec::with_capacity(width),
                overflow: 0,
            };
            let py = y as f64 + 0.5;
            for x in 0..width {
                let px = x as f64 + 0.5;
                let acc = &mut row.values[x * stride..(x + 1) * stride];
                let mut state = PixelState::new();
                let mut list = Vec::new();
                for (pos, splat) in splats.iter().enumerate() {
                    if state.saturated {
                        continue;
                    }
                    let Some(alpha) = splat_alpha(splat, payload.opacity[pos], px, py) else {
                        continue;
                    };
                    let Some(w) = state.step(alpha) else { continue };
                    for (a, v) in acc.iter_mut().zip(payload.row(pos)) {
                        *a += w * v;
                    }
                    if list.len() < opts.contrib_cap {
                        list.push((splat.gaussian_index, w));
                    } else {
                        row.overflow += 1;
                    }
                }
                row.alpha[x] = state.alpha;
                row.lists.push(list);
            }
            row
        })
        .collect();

    let mut packed = Vec::with_capacity(width * height * stride);
    let mut alpha = Vec::with_capacity(width * height);
    let mut lists = Vec::with_capacity(width * height);
    let mut overflow = 0;
    for row in rows {
        packed.extend(row.values);
        alpha.extend(row.alpha);
        lists.extend(row.lists);
        overflow += row.overflow;
    }
    let counts: Vec<u32> = lists.iter().map(|l| l.len() as u32).collect();
    let contrib = Contributions::from_lists(
        width,
        height,
        &counts,
        |p| std::mem::take(&mut lists[p]),
        overflow,
    );
    let [color, feat_view, feat_object, identity] =
        unpack_maps(gaussians, opts.channels, width, height, &packed);
    Ok(RenderOutput {
        width,
        height,
        color,
        feat_view,
        feat_object,
        identity,
        alpha,
        contrib: Some(contrib),
    })
}
