use rayon::prelude::*;

use super::{
    splat_alpha, unpack_maps, Contributions, Payload, PixelState, RenderOptions, RenderOutput,
    TILE_SIZE,
};
use crate::error::Result;
use crate::projection::{project_all, sort_by_depth, ProjectedSplat};
use crate::scene::{Camera, Gaussians};

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize) -> Self {
        Self {
            tiles_x: width.div_ceil(TILE_SIZE),
            tiles_y: height.div_ceil(TILE_SIZE),
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }
}

/// Sorted-splat positions per tile, stored compressed (offsets + flat list),
/// each list in front-to-back order.
struct Bins {
    offsets: Vec<usize>,
    items: Vec<u32>,
}

fn tile_range(splat: &ProjectedSplat, cam: &Camera) -> Option<[usize; 4]> {
    let [x0, y0, x1, y1] = splat.pixel_rect(cam.width, cam.height)?;
    Some([
        x0 as usize / TILE_SIZE,
        y0 as usize / TILE_SIZE,
        x1 as usize / TILE_SIZE,
        y1 as usize / TILE_SIZE,
    ])
}

fn bin_splats(splats: &[ProjectedSplat], cam: &Camera, grid: &TileGrid) -> Bins {
    let ranges: Vec<Option<[usize; 4]>> = splats.iter().map(|s| tile_range(s, cam)).collect();
    let mut counts = vec![0usize; grid.count()];
    for [tx0, ty0, tx1, ty1] in ranges.iter().flatten() {
        for ty in *ty0..=*ty1 {
            for c in &mut counts[ty * grid.tiles_x + tx0..=ty * grid.tiles_x + tx1] {
                *c += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    offsets.push(0);
    for c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut cursor = offsets[..counts.len()].to_vec();
    let mut items = vec![0u32; *offsets.last().unwrap()];
    for (pos, range) in ranges.iter().enumerate() {
        let Some([tx0, ty0, tx1, ty1]) = *range else { continue };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let t = ty * grid.tiles_x + tx;
                items[cursor[t]] = pos as u32;
                cursor[t] += 1;
            }
        }
    }
    Bins { offsets, items }
}

struct TileResult {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    values: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<u32>,
    entries: Vec<(u32, f64)>,
    overflow: u64,
}

/// Tile-based forward rasterization.
pub fn render_tiled(gaussians: &Gaussians, cam: &Camera, opts: RenderOptions) -> Result<RenderOutput> {
    let width = cam.width as usize;
    let height = cam.height as usize;
    let splats = sort_by_depth(project_all(gaussians, cam))?;
    let payload = Payload::pack(gaussians, &splats, opts.channels);
    let stride = payload.stride;
    let grid = TileGrid::new(width, height);
    let bins = bin_splats(&splats, cam, &grid);

    let tiles: Vec<TileResult> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let x0 = (t % grid.tiles_x) * TILE_SIZE;
            let y0 = (t / grid.tiles_x) * TILE_SIZE;
            let w = TILE_SIZE.min(width - x0);
            let h = TILE_SIZE.min(height - y0);
            let list = &bins.items[bins.offsets[t]..bins.offsets[t + 1]];
            let mut res = TileResult {
                x0,
                y0,
                w,
                h,
                values: vec![0.0; w * h * stride],
                alpha: vec![0.0; w * h],
                counts: vec![0; if opts.record_contrib { w * h } else { 0 }],
                entries: Vec::new(),
                overflow: 0,
            };
            for ly in 0..h {
                let py = (y0 + ly) as f64 + 0.5;
                for lx in 0..w {
                    let px = (x0 + lx) as f64 + 0.5;
                    let lp = ly * w + lx;
                    let acc = &mut res.values[lp * stride..(lp + 1) * stride];
                    let mut state = PixelState::new();
                    let mut kept = 0usize;
                    for &pos in list {
                        let pos = pos as usize;
                        let splat = &splats[pos];
                        let Some(alpha) = splat_alpha(splat, payload.opacity[pos], px, py) else {
                            continue;
                        };
                        let Some(wgt) = state.step(alpha) else { break };
                        for (a, v) in acc.iter_mut().zip(payload.row(pos)) {
                            *a += wgt * v;
                        }
                        if opts.record_contrib {
                            if kept < opts.contrib_cap {
                                res.entries.push((splat.gaussian_index, wgt));
                                kept += 1;
                            } else {
                                res.overflow += 1;
                            }
                        }
                    }
                    res.alpha[lp] = state.alpha;
                    if opts.record_contrib {
                        res.counts[lp] = kept as u32;
                    }
                }
            }
            res
        })
        .collect();

    let mut packed = vec![0.0; width * height * stride];
    let mut alpha = vec![0.0; width * height];
    let mut counts = vec![0u32; if opts.record_contrib { width * height } else { 0 }];
    // (tile, offset into tile entries) for every pixel
    let mut pixel_src = vec![(0usize, 0usize); counts.len()];
    for (ti, tile) in tiles.iter().enumerate() {
        let mut entry_off = 0usize;
        for ly in 0..tile.h {
            let row = (tile.y0 + ly) * width + tile.x0;
            let lrow = ly * tile.w;
            packed[row * stride..(row + tile.w) * stride]
                .copy_from_slice(&tile.values[lrow * stride..(lrow + tile.w) * stride]);
            alpha[row..row + tile.w].copy_from_slice(&tile.alpha[lrow..lrow + tile.w]);
            if opts.record_contrib {
                for lx in 0..tile.w {
                    let c = tile.counts[lrow + lx];
                    counts[row + lx] = c;
                    pixel_src[row + lx] = (ti, entry_off);
                    entry_off += c as usize;
                }
            }
        }
    }
    let contrib = opts.record_contrib.then(|| {
        let overflow = tiles.iter().map(|t| t.overflow).sum();
        Contributions::from_lists(
            width,
            height,
            &counts,
            |p| {
                let (ti, off) = pixel_src[p];
                tiles[ti].entries[off..off + counts[p] as usize].to_vec()
            },
            overflow,
        )
    });
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
        contrib,
    })
}
