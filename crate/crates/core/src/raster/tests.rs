use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::projection::project_gaussian;
use crate::scene::{Camera, GaussianGeometry, Gaussians};

fn centered_camera(size: u32) -> Camera {
    let mut cam = Camera::identity(size, size, 40.0);
    cam.cx = 8.5;
    cam.cy = 8.5;
    cam
}

fn point(z: f32, opacity: f32) -> GaussianGeometry {
    GaussianGeometry {
        position: [0.0, 0.0, z],
        rotation: [1.0, 0.0, 0.0, 0.0],
        scale: [0.05, 0.05, 0.05],
        opacity,
        color: [1.0, 0.5, 0.25],
    }
}

pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize, d_feat: usize, d_id: usize) -> Gaussians {
    let mut g = Gaussians::new(d_feat, d_id);
    for _ in 0..n {
        let z: f32 = rng.random_range(1.5..5.0);
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0f32));
        let qn = q.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
        g.push(GaussianGeometry {
            position: [rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z],
            rotation: q.map(|x| x / qn),
            scale: std::array::from_fn(|_| rng.random_range(0.02..0.25f32)),
            opacity: rng.random_range(0.05..1.0),
            color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        });
    }
    for v in g.feat_view.iter_mut().chain(&mut g.feat_object).chain(&mut g.identity) {
        *v = rng.random_range(-2.0..2.0);
    }
    g
}

#[test]
fn single_centered_gaussian_hits_alpha_clamp() {
    let mut g = Gaussians::new(2, 1);
    g.push(point(1.0, 1.0));
    g.feat_view.copy_from_slice(&[2.0, -1.0]);
    let cam = centered_camera(16);
    for out in [
        render_tiled(&g, &cam, RenderOptions::new(Channels::ALL).with_contrib()).unwrap(),
        render_reference(&g, &cam, RenderOptions::new(Channels::ALL)).unwrap(),
    ] {
        let k = 8 * 16 + 8;
        assert_eq!(out.contrib.as_ref().unwrap().pixel(k), &[(0, 0.99)]);
        let fv = out.feat_view.as_ref().unwrap().pixel(8, 8);
        assert_eq!(fv, &[0.99 * 2.0, 0.99 * -1.0]);
        assert_eq!(out.alpha[k], 0.99);
    }
}

#[test]
fn two_coincident_half_opaque_splats() {
    let mut g = Gaussians::new(1, 1);
    g.push(point(1.0, 0.5));
    g.push(point(1.001, 0.5));
    g.feat_view.copy_from_slice(&[3.0, 7.0]);
    let cam = centered_camera(16);
    let out = render_tiled(&g, &cam, RenderOptions::new(Channels::FEAT_VIEW).with_contrib()).unwrap();
    let k = 8 * 16 + 8;
    assert_eq!(out.contrib.unwrap().pixel(k), &[(0, 0.5), (1, 0.25)]);
    let f = out.feat_view.unwrap().pixel(8, 8)[0];
    assert!((f - (0.5 * 3.0 + 0.25 * 7.0)).abs() < 1e-12);
}

#[test]
fn opaque_front_occludes_back() {
    let mut g = Gaussians::new(1, 1);
    g.push(point(2.0, 1.0));
    g.push(point(1.0, 1.0));
    let cam = centered_camera(16);
    let out = render_reference(&g, &cam, RenderOptions::new(Channels::COLOR)).unwrap();
    let list = out.contrib.unwrap();
    let list = list.pixel(8 * 16 + 8);
    assert_eq!(list[0], (1, 0.99));
    assert_eq!(list.len(), 2);
    let t_after = 1.0 - list[0].1;
    assert!((t_after - 0.01f64).abs() < 1e-12);
    assert!(list[1].1 <= 0.01 + 1e-12);
}

#[test]
fn empty_scene_is_zero() {
    let g = Gaussians::new(4, 2);
    let cam = Camera::identity(32, 32, 30.0);
    for out in [
        render_tiled(&g, &cam, RenderOptions::new(Channels::ALL)).unwrap(),
        render_reference(&g, &cam, RenderOptions::new(Channels::ALL)).unwrap(),
    ] {
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        for m in [&out.color, &out.feat_view, &out.feat_object, &out.identity] {
            assert!(m.as_ref().unwrap().data.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn tiled_matches_reference_on_odd_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = random_scene(&mut rng, 300, 3, 2);
    let cam = Camera::look_at([0.1, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, -1.0, 0.0], 50, 37, 70.0);
    let opts = RenderOptions::new(Channels::ALL).with_contrib();
    let a = render_tiled(&g, &cam, opts).unwrap();
    let b = render_reference(&g, &cam, opts).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
    assert_eq!(a.contrib, b.contrib);
}

#[test]
fn weight_law_and_alpha_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_scene(&mut rng, 400, 2, 2);
    let cam = Camera::identity(48, 48, 40.0);
    let out = render_tiled(&g, &cam, RenderOptions::new(Channels::COLOR).with_contrib()).unwrap();
    let contrib = out.contrib.as_ref().unwrap();
    for y in 0..48 {
        for x in 0..48 {
            let k = y * 48 + x;
            let mut t = 1.0;
            let mut sum = 0.0;
            for &(idx, w) in contrib.pixel(k) {
                let s = project_gaussian(&g, idx as usize, &cam).unwrap();
                let alpha = splat_alpha(&s, g.opacities[idx as usize] as f64, x as f64 + 0.5, y as f64 + 0.5)
                    .unwrap();
                assert!(w >= 0.0);
                assert!((w - alpha * t).abs() < 1e-12);
                t *= 1.0 - alpha;
                sum += w;
            }
            assert!((sum - out.alpha[k]).abs() < 1e-5);
            assert!(out.alpha[k] <= 1.0);
            assert!((1.0 - t - out.alpha[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn composite_bounded_by_payload_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = random_scene(&mut rng, 200, 4, 1);
    for v in &mut g.feat_object {
        *v = rng.random_range(0.5..3.0);
    }
    let cam = Camera::identity(32, 32, 30.0);
    let out = render_tiled(&g, &cam, RenderOptions::new(Channels::FEAT_OBJECT)).unwrap();
    let map = out.feat_object.unwrap();
    for p in 0..map.pixel_count() {
        let a = out.alpha[p];
        for &v in &map.data[p * 4..p * 4 + 4] {
            assert!(v >= a * 0.5 - 1e-9 && v <= a * 3.0 + 1e-9);
        }
    }
}

#[test]
fn channel_subset_matches_full_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = random_scene(&mut rng, 250, 5, 3);
    let cam = Camera::identity(32, 32, 30.0);
    let full = render_tiled(&g, &cam, RenderOptions::new(Channels::ALL)).unwrap();
    let only = render_tiled(&g, &cam, RenderOptions::new(Channels::FEAT_VIEW)).unwrap();
    assert!(only.color.is_none() && only.identity.is_none());
    let d = full.feat_view.unwrap().max_abs_diff(only.feat_view.as_ref().unwrap());
    assert!(d <= 1e-7);
}

#[test]
fn occlusion_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cam = centered_camera(16);
    for _ in 0..50 {
        let mut g = Gaussians::new(1, 1);
        g.push(point(1.0, rng.random_range(0.05..0.9)));
        g.push(point(2.0, rng.random_range(0.05..1.0)));
        let back_weight = |g: &Gaussians| {
            let out = render_tiled(g, &cam, RenderOptions::new(Channels::COLOR).with_contrib()).unwrap();
            let c = out.contrib.unwrap();
            (0..256)
                .map(|k| c.pixel(k).iter().filter(|e| e.0 == 1).map(|e| e.1).sum::<f64>())
                .collect::<Vec<_>>()
        };
        let before = back_weight(&g);
        g.opacities[0] = (g.opacities[0] + rng.random_range(0.0..0.5)).min(1.0);
        let after = back_weight(&g);
        for (a, b) in after.iter().zip(&before) {
            assert!(a <= b);
        }
    }
}

#[test]
fn contrib_cap_counts_overflow() {
    let mut g = Gaussians::new(1, 1);
    for i in 0..20 {
        g.push(point(1.0 + i as f32 * 0.01, 0.05));
    }
    let cam = centered_camera(16);
    let mut opts = RenderOptions::new(Channels::COLOR).with_contrib();
    opts.contrib_cap = 5;
    let out = render_tiled(&g, &cam, opts).unwrap();
    let c = out.contrib.unwrap();
    assert_eq!(c.pixel(8 * 16 + 8).len(), 5);
    assert!(c.overflow >= 15);
    let r = render_reference(&g, &cam, opts).unwrap();
    assert_eq!(r.contrib.unwrap().overflow, c.overflow);
}

#[test]
fn feature_rendering_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let base = random_scene(&mut rng, 300, 6, 1);
    let cam = Camera::identity(40, 40, 35.0);
    let f = base.clone();
    let mut h = base.clone();
    for v in &mut h.feat_view {
        *v = rng.random_range(-3.0..3.0);
    }
    let (a, b) = (0.75f64, -1.25f64);
    let mut mix = base.clone();
    for ((m, x), y) in mix.feat_view.iter_mut().zip(&f.feat_view).zip(&h.feat_view) {
        *m = (a * *x as f64 + b * *y as f64) as f32;
    }
    let opts = RenderOptions::new(Channels::FEAT_VIEW);
    let rf = render_tiled(&f, &cam, opts).unwrap().feat_view.unwrap();
    let rh = render_tiled(&h, &cam, opts).unwrap().feat_view.unwrap();
    let rm = render_tiled(&mix, &cam, opts).unwrap().feat_view.unwrap();
    for p in 0..rm.data.len() {
        let want = a * rf.data[p] + b * rh.data[p];
        let got = rm.data[p];
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}
