//! Tile-based front-to-back alpha compositing and its exact reverse pass.

use std::cmp::Ordering;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::gaussian::{GaussianGrad, GaussianMap, PARAMS_PER_GAUSSIAN};
use super::project::{
    project_gaussian, project_gaussian_vjp, Gaussian2D, Grad2D, PoseGrad, MAX_ALPHA, MIN_ALPHA,
};
use crate::camera::Intrinsics;
use crate::image::ImageBuffer;
use crate::lie::PoseSE3;

pub const TILE: usize = 8;
/// Compositing stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub alpha: ImageBuffer,
}

/// Compositing data of one projected Gaussian, copied into each tile it
/// overlaps so the per-pixel loop reads memory sequentially.
#[derive(Clone, Copy)]
struct Splat {
    index: u32,
    mean: [f64; 2],
    /// `(a, b, c)` of the conic `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    /// Exponents below this give an opacity under [`MIN_ALPHA`].
    min_power: f64,
    color: Vector3<f64>,
    depth: f64,
}

/// Projected Gaussians and per-tile depth-sorted splat lists.
struct Prepared {
    tiles: Vec<Vec<Splat>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn prepare(map: &GaussianMap, cam_to_world: &PoseSE3, cam: &Intrinsics) -> Prepared {
    let projected: Vec<Option<Gaussian2D>> = map
        .gaussians()
        .par_iter()
        .map(|g| project_gaussian(g, cam_to_world, cam))
        .collect();
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let (wmax, hmax) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    for (i, p) in projected.iter().enumerate() {
        let Some(p) = p else { continue };
        let u0 = (p.mean2d.x - p.extent.x).ceil().max(0.0);
        let u1 = (p.mean2d.x + p.extent.x).floor().min(wmax);
        let v0 = (p.mean2d.y - p.extent.y).ceil().max(0.0);
        let v1 = (p.mean2d.y + p.extent.y).floor().min(hmax);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let splat = Splat {
            index: i as u32,
            mean: [p.mean2d.x, p.mean2d.y],
            conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
            opacity: p.opacity,
            min_power: (MIN_ALPHA / p.opacity).ln(),
            color: p.color,
            depth: p.depth,
        };
        let (tx0, tx1) = (u0 as usize / TILE, u1 as usize / TILE);
        let (ty0, ty1) = (v0 as usize / TILE, v1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(splat);
            }
        }
    }
    let ids = map.ids();
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|a, b| match a.depth.total_cmp(&b.depth) {
            Ordering::Equal => ids[a.index as usize].cmp(&ids[b.index as usize]),
            o => o,
        })
    });
    Prepared {
        tiles,
        tiles_x,
        tiles_y,
    }
}

/// One composited Gaussian at one pixel.
#[derive(Clone, Copy)]
struct Contribution {
    /// Index into the tile list.
    slot: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
}

/// Composites the tile list at pixel `(u, v)`, returning the final
/// transmittance and optionally recording each contribution.
fn composite_pixel(
    list: &[Splat],
    u: f64,
    v: f64,
    mut record: Option<&mut Vec<Contribution>>,
    color: &mut Vector3<f64>,
    depth: &mut f64,
) -> f64 {
    let mut t = 1.0;
    for (slot, p) in list.iter().enumerate() {
        let dx = u - p.mean[0];
        let dy = v - p.mean[1];
        let [a, b, c] = p.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        if power < p.min_power || power > 0.0 {
            continue;
        }
        let gauss = power.exp();
        let raw = p.opacity * gauss;
        let clamped = raw > MAX_ALPHA;
        let alpha = raw.min(MAX_ALPHA);
        if alpha < MIN_ALPHA {
            continue;
        }
        let next = t * (1.0 - alpha);
        if next < MIN_TRANSMITTANCE {
            break;
        }
        let w = alpha * t;
        *color += p.color * w;
        *depth += p.depth * w;
        if let Some(r) = record.as_deref_mut() {
            r.push(Contribution {
                slot: slot as u32,
                alpha,
                gauss,
                clamped,
                transmittance: t,
            });
        }
        t = next;
    }
    t
}

fn tile_pixels(
    prep: &Prepared,
    tile: usize,
    cam: &Intrinsics,
) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
    let (u0, v0) = (tx * TILE, ty * TILE);
    let (u1, v1) = ((u0 + TILE).min(cam.width), (v0 + TILE).min(cam.height));
    (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
}

/// Per-pixel compositing records of one forward pass, kept so the reverse
/// pass does not have to composite again.
pub struct RenderCache {
    prep: Prepared,
    /// Per tile: contributions of all its pixels, in pixel order.
    contributions: Vec<Vec<Contribution>>,
    /// Per tile: offsets into `contributions`, one more than the pixel count.
    offsets: Vec<Vec<u32>>,
}

struct TileForward {
    pixels: Vec<(usize, Vector3<f64>, f64, f64)>,
    contributions: Vec<Contribution>,
    offsets: Vec<u32>,
}

fn forward(
    map: &GaussianMap,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
    keep: bool,
) -> (RenderOutput, Option<RenderCache>) {
    let prep = prepare(map, cam_to_world, cam);
    let n_tiles = prep.tiles_x * prep.tiles_y;
    let per_tile: Vec<TileForward> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut out = TileForward {
                pixels: Vec::with_capacity(TILE * TILE),
                contributions: Vec::new(),
                offsets: vec![0],
            };
            for (u, v) in tile_pixels(&prep, tile, cam) {
                let mut c = Vector3::zeros();
                let mut d = 0.0;
                let record = keep.then_some(&mut out.contributions);
                let t = composite_pixel(list, u as f64, v as f64, record, &mut c, &mut d);
                out.pixels.push((v * cam.width + u, c, d, 1.0 - t));
                if keep {
                    out.offsets.push(out.contributions.len() as u32);
                }
            }
            out
        })
        .collect();
    let mut color = ImageBuffer::new(cam.width, cam.height, 3);
    let mut depth = ImageBuffer::new(cam.width, cam.height, 1);
    let mut alpha = ImageBuffer::new(cam.width, cam.height, 1);
    let mut contributions = Vec::new();
    let mut offsets = Vec::new();
    for tile in per_tile {
        for (idx, c, d, a) in tile.pixels {
            color.data_mut()[3 * idx..3 * idx + 3].copy_from_slice(c.as_slice());
            depth.data_mut()[idx] = d;
            alpha.data_mut()[idx] = a;
        }
        if keep {
            contributions.push(tile.contributions);
            offsets.push(tile.offsets);
        }
    }
    let output = RenderOutput {
        color,
        depth,
        alpha,
    };
    let cache = keep.then_some(RenderCache {
        prep,
        contributions,
        offsets,
    });
    (output, cache)
}

/// Renders color, depth (`Σ dᵢ αᵢ Tᵢ`), and accumulated opacity from the
/// camera-to-world pose `cam_to_world`. The background is black.
pub fn rasterize(map: &GaussianMap, cam_to_world: &PoseSE3, cam: &Intrinsics) -> RenderOutput {
    forward(map, cam_to_world, cam, false).0
}

/// [`rasterize`], also returning the state needed by
/// [`rasterize_gradients_cached`].
pub fn rasterize_cached(
    map: &GaussianMap,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
) -> (RenderOutput, RenderCache) {
    let (out, cache) = forward(map, cam_to_world, cam, true);
    (out, cache.expect("requested"))
}

/// Upstream gradients of a scalar loss with respect to the rendered images.
#[derive(Debug, Clone, Default)]
pub struct ImageGradients {
    pub color: Option<ImageBuffer>,
    pub depth: Option<ImageBuffer>,
    pub alpha: Option<ImageBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: PoseGrad,
    /// Norm of the screen-space mean gradient per Gaussian.
    pub mean2d_norm: Vec<f64>,
}

impl RasterGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            gaussians: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            pose: PoseGrad::default(),
            mean2d_norm: vec![0.0; n],
        }
    }
}

/// Reverse pass over the recorded contributions of one pixel.
#[allow(clippy::too_many_arguments)]
fn backprop_pixel(
    list: &[Splat],
    contrib: &[Contribution],
    u: f64,
    v: f64,
    gc: Vector3<f64>,
    gd: f64,
    ga: f64,
    acc: &mut [Grad2D],
) {
    let (mut bc, mut bd, mut ba) = (Vector3::zeros(), 0.0, 0.0);
    for k in contrib.iter().rev() {
        let p = &list[k.slot as usize];
        let t = k.transmittance;
        let g = &mut acc[k.slot as usize];
        let w = k.alpha * t;
        g.color += gc * w;
        g.depth += gd * w;
        let d_alpha = t * (gc.dot(&(p.color - bc)) + gd * (p.depth - bd) + ga * (1.0 - ba));
        bc = p.color * k.alpha + bc * (1.0 - k.alpha);
        bd = p.depth * k.alpha + bd * (1.0 - k.alpha);
        ba = k.alpha + ba * (1.0 - k.alpha);
        if k.clamped {
            continue;
        }
        g.opacity += d_alpha * k.gauss;
        let d_power = d_alpha * p.opacity * k.gauss;
        let dx = u - p.mean[0];
        let dy = v - p.mean[1];
        let [a, b, c] = p.conic;
        g.mean2d.x += d_power * (a * dx + b * dy);
        g.mean2d.y += d_power * (b * dx + c * dy);
        g.conic += Vector3::new(-0.5 * dx * dx, -dx * dy, -0.5 * dy * dy) * d_power;
    }
}

fn backward(
    map: &GaussianMap,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
    prep: &Prepared,
    cached: Option<(&[Vec<Contribution>], &[Vec<u32>])>,
    upstream: &ImageGradients,
) -> RasterGradients {
    let n_tiles = prep.tiles_x * prep.tiles_y;
    let per_tile: Vec<Vec<Grad2D>> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut acc = vec![Grad2D::default(); list.len()];
            let mut scratch = Vec::new();
            for (i, (u, v)) in tile_pixels(prep, tile, cam).enumerate() {
                let idx = v * cam.width + u;
                let gc = upstream
                    .color
                    .as_ref()
                    .map_or(Vector3::zeros(), |g| Vector3::from_column_slice(g.pixel(u, v)));
                let gd = upstream.depth.as_ref().map_or(0.0, |g| g.data()[idx]);
                let ga = upstream.alpha.as_ref().map_or(0.0, |g| g.data()[idx]);
                if gc == Vector3::zeros() && gd == 0.0 && ga == 0.0 {
                    continue;
                }
                let (uf, vf) = (u as f64, v as f64);
                let contrib = match cached {
                    Some((contribs, offsets)) => {
                        let o = &offsets[tile];
                        &contribs[tile][o[i] as usize..o[i + 1] as usize]
                    }
                    None => {
                        scratch.clear();
                        let (mut c, mut d) = (Vector3::zeros(), 0.0);
                        composite_pixel(list, uf, vf, Some(&mut scratch), &mut c, &mut d);
                        &scratch[..]
                    }
                };
                backprop_pixel(list, contrib, uf, vf, gc, gd, ga, &mut acc);
            }
            acc
        })
        .collect();

    let n = map.len();
    let mut grad2d = vec![Grad2D::default(); n];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            grad2d[prep.tiles[tile][slot].index as usize].add(g);
        }
    }
    let chained: Vec<Option<(GaussianGrad, PoseGrad)>> = map
        .gaussians()
        .par_iter()
        .zip(grad2d.par_iter())
        .map(|(g, g2)| (!g2.is_zero()).then(|| project_gaussian_vjp(g, cam_to_world, cam, g2)))
        .collect();
    let mut out = RasterGradients::zeros(n);
    for (i, c) in chained.into_iter().enumerate() {
        if let Some((gg, pg)) = c {
            out.gaussians[i] = gg;
            out.pose.add(&pg);
            out.mean2d_norm[i] = grad2d[i].mean2d.norm();
        }
    }
    out
}

/// Exact reverse-mode gradients of `⟨upstream, rasterize(map, pose)⟩`.
///
/// Each tile accumulates into its own buffer; buffers are reduced in tile
/// order, so the result does not depend on scheduling.
pub fn rasterize_gradients(
    map: &GaussianMap,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
    upstream: &ImageGradients,
) -> RasterGradients {
    let prep = prepare(map, cam_to_world, cam);
    backward(map, cam_to_world, cam, &prep, None, upstream)
}

/// [`rasterize_gradients`] reusing the forward pass recorded by
/// [`rasterize_cached`] with the same map, pose, and intrinsics.
pub fn rasterize_gradients_cached(
    map: &GaussianMap,
    cam_to_world: &PoseSE3,
    cam: &Intrinsics,
    cache: &RenderCache,
    upstream: &ImageGradients,
) -> RasterGradients {
    backward(
        map,
        cam_to_world,
        cam,
        &cache.prep,
        Some((&cache.contributions, &cache.offsets)),
        upstream,
    )
}
