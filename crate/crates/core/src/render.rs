//! Multi-view orthographic rendering of point clouds.
//!
//! Each view rotates the normalized cloud about the X axis, projects `(a, b)`
//! onto the image plane and z-buffers on `c`. Besides the rendered image the
//! renderer records which pixel every point lands on and whether the point
//! won the depth test there (the visibility mask), plus the rendered ground
//! truth taken from the winning point's label.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud, PointLabels};
use crate::error::{Error, Result};
use crate::export::{create_dir, write_f32_raw, write_pgm, write_text};
use crate::grid::{Grid2, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shading {
    /// Brightness falls off with depth; near points are bright.
    Depth,
    /// Every occupied pixel is 1.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub splat_radius: usize,
    pub shading: Shading,
    /// Fraction of the image left empty on each side of the [-1, 1] frame.
    pub margin: f64,
    /// Explicit view angles in radians, replacing the evenly spaced default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<Vec<f64>>,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            views: 9,
            height: 336,
            width: 336,
            grid_h: 24,
            grid_w: 24,
            splat_radius: 1,
            shading: Shading::Depth,
            margin: 0.05,
            angles: None,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::validation("view count must be at least 1"));
        }
        if self.height == 0 || self.width == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::validation("resolutions must be positive"));
        }
        if !self.height.is_multiple_of(self.grid_h) || !self.width.is_multiple_of(self.grid_w) {
            return Err(Error::validation(format!(
                "rendering {}x{} is not divisible by feature grid {}x{}",
                self.height, self.width, self.grid_h, self.grid_w
            )));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::validation("margin must lie in [0, 0.5)"));
        }
        if let Some(a) = &self.angles {
            if a.len() != self.views || a.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "angle override needs {} finite values, got {}",
                    self.views,
                    a.len()
                )));
            }
        }
        Ok(())
    }

    /// The configured view angles.
    pub fn angles(&self) -> Result<Vec<f64>> {
        match &self.angles {
            Some(a) => Ok(a.clone()),
            None => view_angles(self.views),
        }
    }

    /// Feature-grid cell containing rendering pixel `(u, v)`.
    pub fn feature_cell(&self, u: usize, v: usize) -> (usize, usize) {
        (u * self.grid_h / self.height, v * self.grid_w / self.width)
    }
}

/// Scale of the point-to-feature-grid transform, `h / H`.
pub fn rendering_scale(cfg: &ViewConfig) -> f64 {
    cfg.grid_h as f64 / cfg.height as f64
}

/// Rotation angles for `k` views about the X axis, spaced `2π/(k+1)` apart
/// and centred on 0.
pub fn view_angles(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::validation("view count must be at least 1"));
    }
    let step = 2.0 * PI / (k + 1) as f64;
    let mid = (k as f64 - 1.0) / 2.0;
    Ok((0..k).map(|i| (i as f64 - mid) * step).collect())
}

pub fn rotate_point(p: &Point3, angle: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

/// Right-handed rotation about the X axis. Point order is preserved.
pub fn rotate_cloud(cloud: &PointCloud, angle: f64) -> PointCloud {
    let pts = cloud.points().iter().map(|p| rotate_point(p, angle)).collect();
    PointCloud::new(pts).expect("rotation preserves a valid cloud")
}

const OFFSCREEN: u32 = u32::MAX;

/// Point-to-pixel correspondence of one view: the part of a rendering that
/// scoring and training need.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    height: usize,
    width: usize,
    pixel: Vec<u32>,
    vis: Vec<u8>,
    gt_mask: Mask,
}

impl Projection {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.pixel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel.is_empty()
    }

    /// Pixel `(row, col)` of point `j`, or `None` when it falls off-screen.
    pub fn pixel(&self, j: usize) -> Option<(usize, usize)> {
        let p = self.pixel[j];
        (p != OFFSCREEN).then(|| (p as usize / self.width, p as usize % self.width))
    }

    /// Linear pixel index of point `j`.
    pub fn pixel_index(&self, j: usize) -> Option<usize> {
        let p = self.pixel[j];
        (p != OFFSCREEN).then_some(p as usize)
    }

    pub fn visible(&self, j: usize) -> bool {
        self.vis[j] == 1
    }

    pub fn vis_mask(&self) -> &[u8] {
        &self.vis
    }

    pub fn gt_mask(&self) -> &Mask {
        &self.gt_mask
    }

    /// 1 when any pixel of the rendered ground truth is anomalous.
    pub fn max_label(&self) -> u8 {
        self.gt_mask.as_slice().iter().copied().max().unwrap_or(0)
    }

    /// Build a projection from explicit pixel assignments; visibility and
    /// ground truth are derived with the same z-buffer rule as [`rasterize`].
    /// Used to construct small scenarios directly.
    pub fn from_pixels(
        height: usize,
        width: usize,
        pixels: &[Option<(usize, usize)>],
        depths: &[f64],
        labels: &[u8],
    ) -> Self {
        let pixel: Vec<u32> = pixels
            .iter()
            .map(|p| match p {
                Some((u, v)) if *u < height && *v < width => (u * width + v) as u32,
                _ => OFFSCREEN,
            })
            .collect();
        let (vis, gt_mask, _) = zbuffer(height, width, &pixel, depths, labels);
        Self {
            height,
            width,
            pixel,
            vis,
            gt_mask,
        }
    }
}

/// Everything produced for one view of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub angle: f64,
    /// Grayscale rendering in [0, 1].
    pub image: Grid2<f64>,
    /// Minimum depth per pixel, +inf where empty.
    pub depth: Grid2<f64>,
    pub projection: Projection,
}

impl ViewBundle {
    pub fn occupied_pixels(&self) -> usize {
        self.depth.as_slice().iter().filter(|d| d.is_finite()).count()
    }
}

// Returns (vis, gt_mask, per-pixel winner index or OFFSCREEN).
fn zbuffer(
    height: usize,
    width: usize,
    pixel: &[u32],
    depths: &[f64],
    labels: &[u8],
) -> (Vec<u8>, Mask, Vec<u32>) {
    let mut winner = vec![OFFSCREEN; height * width];
    for (j, &p) in pixel.iter().enumerate() {
        if p == OFFSCREEN {
            continue;
        }
        let w = &mut winner[p as usize];
        // strict comparison: on equal depth the lower index keeps the pixel
        if *w == OFFSCREEN || depths[j] < depths[*w as usize] {
            *w = j as u32;
        }
    }
    let mut vis = vec![0u8; pixel.len()];
    let mut gt = vec![0u8; height * width];
    for (p, &w) in winner.iter().enumerate() {
        if w != OFFSCREEN {
            vis[w as usize] = 1;
            gt[p] = labels.get(w as usize).copied().unwrap_or(0);
        }
    }
    (vis, Grid2::from_vec(height, width, gt), winner)
}

fn project_axis(x: f64, size: usize, margin: f64) -> Option<usize> {
    let s = size as f64;
    let pos = margin * s + (x + 1.0) * 0.5 * (1.0 - 2.0 * margin) * s;
    let idx = pos.floor();
    (idx >= 0.0 && idx < s).then_some(idx as usize)
}

/// Pixel of an already-rotated point under `cfg`.
pub fn project_point(p: &Point3, cfg: &ViewConfig) -> Option<(usize, usize)> {
    Some((
        project_axis(p[0], cfg.height, cfg.margin)?,
        project_axis(p[1], cfg.width, cfg.margin)?,
    ))
}

fn shade(depth: f64, shading: Shading) -> f64 {
    match shading {
        Shading::Constant => 1.0,
        Shading::Depth => {
            // normalized clouds rotate within |c| <= sqrt(2)
            let s = ((SQRT_2 - depth) / (2.0 * SQRT_2)).clamp(0.0, 1.0);
            0.2 + 0.8 * s
        }
    }
}

/// Render one view. `labels` may be all-zero when no ground truth exists.
pub fn rasterize(
    cloud: &PointCloud,
    labels: &PointLabels,
    angle: f64,
    cfg: &ViewConfig,
) -> ViewBundle {
    assert_eq!(cloud.len(), labels.len(), "labels must match cloud size");
    let (h, w) = (cfg.height, cfg.width);
    let rotated: Vec<Point3> = cloud.points().iter().map(|p| rotate_point(p, angle)).collect();
    let pixel: Vec<u32> = rotated
        .iter()
        .map(|p| match project_point(p, cfg) {
            Some((u, v)) => (u * w + v) as u32,
            None => OFFSCREEN,
        })
        .collect();
    let depths: Vec<f64> = rotated.iter().map(|p| p[2]).collect();
    let (vis, gt_mask, winner) = zbuffer(h, w, &pixel, &depths, labels.labels());

    let depth = Grid2::from_vec(
        h,
        w,
        winner
            .iter()
            .map(|&j| if j == OFFSCREEN { f64::INFINITY } else { depths[j as usize] })
            .collect(),
    );

    // Splats widen occupancy in the image only; nearest depth wins overlaps.
    let r = cfg.splat_radius as isize;
    let mut splat = depth.clone();
    if r > 0 {
        for u in 0..h {
            for v in 0..w {
                let d = depth[(u, v)];
                if !d.is_finite() {
                    continue;
                }
                for du in -r..=r {
                    for dv in -r..=r {
                        if du * du + dv * dv > r * r {
                            continue;
                        }
                        let (uu, vv) = (u as isize + du, v as isize + dv);
                        if uu < 0 || vv < 0 || uu >= h as isize || vv >= w as isize {
                            continue;
                        }
                        let cell = &mut splat[(uu as usize, vv as usize)];
                        if d < *cell {
                            *cell = d;
                        }
                    }
                }
            }
        }
    }
    let image = splat.map(|&d| if d.is_finite() { shade(d, cfg.shading) } else { 0.0 });

    ViewBundle {
        angle,
        image,
        depth,
        projection: Projection {
            height: h,
            width: w,
            pixel,
            vis,
            gt_mask,
        },
    }
}

/// Render all views of `cloud` at the given angles. Views are independent
/// and computed in parallel.
pub fn render_views(
    cloud: &PointCloud,
    labels: &PointLabels,
    angles: &[f64],
    cfg: &ViewConfig,
) -> Vec<ViewBundle> {
    use rayon::prelude::*;
    angles
        .par_iter()
        .map(|&a| rasterize(cloud, labels, a, cfg))
        .collect()
}

/// Write a view as `image.pgm`, `gt_mask.pgm`, `depth.f32`, `pixel_map.csv`,
/// `vis_mask.txt` and `view.json` inside `dir`.
pub fn write_view_dir(dir: &Path, view: &ViewBundle) -> Result<()> {
    create_dir(dir)?;
    write_pgm(&dir.join("image.pgm"), &view.image)?;
    let proj = &view.projection;
    write_pgm(&dir.join("gt_mask.pgm"), &proj.gt_mask.map(|&m| m as f64))?;
    write_f32_raw(&dir.join("depth.f32"), view.depth.as_slice())?;

    let mut csv = String::from("index,u,v\n");
    let mut vis = String::with_capacity(proj.len() * 2);
    for j in 0..proj.len() {
        match proj.pixel(j) {
            Some((u, v)) => writeln!(csv, "{j},{u},{v}").unwrap(),
            None => writeln!(csv, "{j},,").unwrap(),
        }
        vis.push(if proj.visible(j) { '1' } else { '0' });
        vis.push('\n');
    }
    write_text(&dir.join("pixel_map.csv"), &csv)?;
    write_text(&dir.join("vis_mask.txt"), &vis)?;
    let meta = serde_json::json!({
        "angle": view.angle,
        "height": view.image.rows(),
        "width": view.image.cols(),
        "points": proj.len(),
        "occupied_pixels": view.occupied_pixels(),
    });
    write_text(
        &dir.join("view.json"),
        &serde_json::to_string_pretty(&meta).expect("json"),
    )
}
