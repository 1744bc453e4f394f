//! Forward rasterization of a Gaussian cloud.
//!
//! Every visible Gaussian is projected to a screen-space splat, all splats are
//! sorted front to back by camera depth (ties broken by Gaussian index), binned
//! into 16x16 tiles, and alpha-composited per pixel over a black background.
//! The per-pixel list of contributors is kept as a tape for the backward pass.

use std::ops::Range;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{project_covariance, projection_jacobian, CameraIntrinsics, IntrinsicsError, Z_NEAR};
use crate::image::Image;
use crate::lie::Pose;
use crate::model::{covariance_world, sigmoid, GaussianCloud};
use crate::sh::evaluate_sh_raw;

pub const TILE_SIZE: usize = 16;
/// Upper clamp on a single splat's alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Splats whose screen covariance determinant is below this are dropped.
pub const DET_MIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("cannot render an empty cloud")]
    EmptyCloud,
    #[error(transparent)]
    Intrinsics(#[from] IntrinsicsError),
    #[error("invalid cloud: {0}")]
    InvalidCloud(String),
}

/// A Gaussian projected into the image.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub gaussian: usize,
    /// Pixel-space center.
    pub center: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-frame position; `p_c.z` is the sort key.
    pub p_c: Vector3<f64>,
    /// Unit viewing direction in the object frame (camera center to Gaussian).
    pub view_dir: Vector3<f64>,
    /// Distance from the camera center to the Gaussian, object frame.
    pub view_dist: f64,
    /// Color after clamping at zero.
    pub color: [f64; 3],
    /// Color before the clamp.
    pub color_raw: [f64; 3],
    pub opacity: f64,
    /// Screen-space radius beyond which alpha is below [`ALPHA_MIN`].
    pub radius: f64,
}

impl Splat2D {
    pub fn depth(&self) -> f64 {
        self.p_c.z
    }

    /// Alpha this splat contributes at pixel `(px, py)`, with the Gaussian
    /// falloff value; `None` when skipped.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let dx = px - self.center.x;
        let dy = py - self.center.y;
        let power =
            -0.5 * (self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy);
        if power > 0.0 {
            return None;
        }
        let falloff = power.exp();
        let alpha = (self.opacity * falloff).min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            return None;
        }
        Some((alpha, falloff))
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the support, or `None` when
    /// it misses the image.
    fn pixel_bounds(&self, k: &CameraIntrinsics) -> Option<(usize, usize, usize, usize)> {
        let r = self.radius * (1.0 + 1e-9) + 1e-9;
        let x0 = (self.center.x - r).ceil().max(0.0);
        let y0 = (self.center.y - r).ceil().max(0.0);
        let x1 = (self.center.x + r).floor().min(k.width as f64 - 1.0);
        let y1 = (self.center.y + r).floor().min(k.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// One contributor at one pixel, in composite order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeEntry {
    /// Index into [`RenderOutput::splats`].
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Per-pixel contributor lists.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub entries: Vec<TapeEntry>,
    /// Row-major per-pixel ranges into `entries`.
    pub ranges: Vec<Range<u32>>,
}

impl Tape {
    pub fn pixel(&self, index: usize) -> &[TapeEntry] {
        let r = &self.ranges[index];
        &self.entries[r.start as usize..r.end as usize]
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// RGB in `[0, 1]`.
    pub color: Image,
    /// Composited color before the final clamp.
    pub color_raw: Image,
    pub alpha: Image,
    /// Alpha-weighted mean depth, zero where nothing was composited.
    pub depth: Image,
    /// Visible splats in composite (depth) order.
    pub splats: Vec<Splat2D>,
    pub tape: Tape,
    /// Tiles of `TILE_SIZE` pixels, each listing splat indices in depth order.
    pub(crate) tiles: Vec<Vec<u32>>,
}

impl RenderOutput {
    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE_SIZE)
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of tile `t`.
    pub fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        tile_rect(t, self.width, self.height)
    }

    /// Gaussian index of a tape entry.
    pub fn gaussian_of(&self, e: &TapeEntry) -> usize {
        self.splats[e.splat as usize].gaussian
    }
}

fn tile_rect(t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = width.div_ceil(TILE_SIZE);
    let (bx, by) = (t % tx, t / tx);
    let x0 = bx * TILE_SIZE;
    let y0 = by * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
}

/// Projects every Gaussian, culls, and returns the visible splats in
/// composite order.
pub fn preprocess(cloud: &GaussianCloud, t_cm: &Pose, k: &CameraIntrinsics) -> Result<Vec<Splat2D>, RenderError> {
    if cloud.is_empty() {
        return Err(RenderError::EmptyCloud);
    }
    k.validate()?;
    cloud.check().map_err(RenderError::InvalidCloud)?;
    let cam_center = t_cm.camera_center();
    let mut splats = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mu = &cloud.positions[i];
        let p_c = t_cm.transform_point(mu);
        if p_c.z <= Z_NEAR {
            continue;
        }
        let opacity = sigmoid(cloud.opacity_logits[i]);
        if opacity < ALPHA_MIN {
            continue;
        }
        let j = projection_jacobian(&p_c, k);
        let sigma_m = covariance_world(&cloud.rotations[i], &cloud.log_scales[i]);
        let cov2d = project_covariance(&j, &t_cm.rotation, &sigma_m);
        let det = cov2d.determinant();
        if !(det >= DET_MIN) {
            continue;
        }
        let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let half_diff = 0.5 * (cov2d[(0, 0)] - cov2d[(1, 1)]);
        let lambda_max = mid + (half_diff * half_diff + cov2d[(0, 1)] * cov2d[(0, 1)]).sqrt();
        let radius = (2.0 * (opacity / ALPHA_MIN).ln().max(0.0) * lambda_max).sqrt();

        let v = mu - cam_center;
        let view_dist = v.norm();
        let view_dir = v / view_dist;
        let color_raw = evaluate_sh_raw(&cloud.sh[i], &view_dir);
        let splat = Splat2D {
            gaussian: i,
            center: Vector2::new(k.fx * p_c.x / p_c.z + k.cx, k.fy * p_c.y / p_c.z + k.cy),
            cov2d,
            conic,
            p_c,
            view_dir,
            view_dist,
            color: color_raw.map(|c| c.max(0.0)),
            color_raw,
            opacity,
            radius,
        };
        if splat.pixel_bounds(k).is_some() {
            splats.push(splat);
        }
    }
    splats.sort_by(|a, b| a.p_c.z.total_cmp(&b.p_c.z).then(a.gaussian.cmp(&b.gaussian)));
    Ok(splats)
}

struct PixelResult {
    color: [f64; 3],
    alpha: f64,
    depth: f64,
}

/// Composites `candidates` (already in depth order) at one pixel.
#[inline]
fn composite_pixel(
    splats: &[Splat2D],
    candidates: impl Iterator<Item = u32>,
    px: f64,
    py: f64,
    tape: &mut Vec<TapeEntry>,
) -> PixelResult {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for idx in candidates {
        let s = &splats[idx as usize];
        let Some((alpha, _)) = s.alpha_at(px, py) else {
            continue;
        };
        let w = alpha * t;
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        depth += w * s.p_c.z;
        tape.push(TapeEntry {
            splat: idx,
            alpha,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    let alpha = 1.0 - t;
    PixelResult {
        color,
        alpha,
        depth: if alpha > 0.0 { depth / alpha } else { 0.0 },
    }
}

struct Canvas {
    color_raw: Image,
    alpha: Image,
    depth: Image,
    ranges: Vec<Range<u32>>,
}

impl Canvas {
    fn new(k: &CameraIntrinsics) -> Self {
        Self {
            color_raw: Image::zeros(k.width, k.height, 3),
            alpha: Image::zeros(k.width, k.height, 1),
            depth: Image::zeros(k.width, k.height, 1),
            ranges: vec![0..0; k.pixel_count()],
        }
    }

    fn put(&mut self, x: usize, y: usize, r: &PixelResult, range: Range<u32>) {
        for c in 0..3 {
            self.color_raw.set(x, y, c, r.color[c]);
        }
        self.alpha.set(x, y, 0, r.alpha);
        self.depth.set(x, y, 0, r.depth);
        self.ranges[y * self.color_raw.width + x] = range;
    }

    fn finish(
        self,
        k: &CameraIntrinsics,
        splats: Vec<Splat2D>,
        entries: Vec<TapeEntry>,
        tiles: Vec<Vec<u32>>,
    ) -> RenderOutput {
        RenderOutput {
            width: k.width,
            height: k.height,
            color: self.color_raw.map(|v| v.clamp(0.0, 1.0)),
            color_raw: self.color_raw,
            alpha: self.alpha,
            depth: self.depth,
            splats,
            tape: Tape {
                entries,
                ranges: self.ranges,
            },
            tiles,
        }
    }
}

fn bin_splats(splats: &[Splat2D], k: &CameraIntrinsics) -> Vec<Vec<u32>> {
    let tx = k.width.div_ceil(TILE_SIZE);
    let ty = k.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (idx, s) in splats.iter().enumerate() {
        let Some((x0, y0, x1, y1)) = s.pixel_bounds(k) else {
            continue;
        };
        for by in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for bx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[by * tx + bx].push(idx as u32);
            }
        }
    }
    tiles
}

/// Tiled forward renderer.
pub fn render(cloud: &GaussianCloud, t_cm: &Pose, k: &CameraIntrinsics) -> Result<RenderOutput, RenderError> {
    let splats = preprocess(cloud, t_cm, k)?;
    let tiles = bin_splats(&splats, k);

    struct TileOut {
        pixels: Vec<(usize, usize, PixelResult, Range<u32>)>,
        entries: Vec<TapeEntry>,
    }
    let per_tile: Vec<TileOut> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (x0, y0, x1, y1) = tile_rect(t, k.width, k.height);
            let mut entries = Vec::new();
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let start = entries.len() as u32;
                    let r = composite_pixel(&splats, list.iter().copied(), x as f64, y as f64, &mut entries);
                    let end = entries.len() as u32;
                    pixels.push((x, y, r, start..end));
                }
            }
            TileOut { pixels, entries }
        })
        .collect();

    let total: usize = per_tile.iter().map(|t| t.entries.len()).sum();
    let mut entries = Vec::with_capacity(total);
    let mut canvas = Canvas::new(k);
    for tile in per_tile {
        let base = entries.len() as u32;
        for (x, y, r, range) in &tile.pixels {
            canvas.put(*x, *y, r, range.start + base..range.end + base);
        }
        entries.extend_from_slice(&tile.entries);
    }
    Ok(canvas.finish(k, splats, entries, tiles))
}

/// Untiled oracle: every pixel walks the full depth-sorted splat list.
pub fn render_reference(cloud: &GaussianCloud, t_cm: &Pose, k: &CameraIntrinsics) -> Result<RenderOutput, RenderError> {
    let splats = preprocess(cloud, t_cm, k)?;
    let mut canvas = Canvas::new(k);
    let mut entries = Vec::new();
    for y in 0..k.height {
        for x in 0..k.width {
            let start = entries.len() as u32;
            let r = composite_pixel(&splats, 0..splats.len() as u32, x as f64, y as f64, &mut entries);
            canvas.put(x, y, &r, start..entries.len() as u32);
        }
    }
    // A single tile spanning everything would not match TILE_SIZE; rebuild bins
    // so the output can still drive the tiled backward pass.
    let tiles = bin_splats(&splats, k);
    Ok(canvas.finish(k, splats, entries, tiles))
}
