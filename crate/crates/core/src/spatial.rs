//! Uniform-grid spatial index for k-nearest-neighbour and fixed-radius queries.

use crate::cloud::{dist2, Point3};

pub struct PointGrid<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    // CSR layout: points of cell c are indices[starts[c]..starts[c + 1]]
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    /// Build a grid over `points`. Without an explicit `cell` edge the size is
    /// picked for a few points per occupied cell on surface-like clouds; the
    /// total cell count is always bounded by a small multiple of the point count.
    pub fn new(points: &'a [Point3], cell: Option<f64>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|i| (hi[i] - lo[i]).max(0.0)).collect();
        let cell = cell.unwrap_or_else(|| {
            let max_extent = extent.iter().cloned().fold(0.0, f64::max);
            // ~4 points per cell for a surface-like cloud
            let per_axis = ((points.len() as f64 / 4.0).sqrt()).max(1.0);
            max_extent / per_axis
        });
        let mut cell = if cell > 0.0 && cell.is_finite() { cell } else { 1.0 };
        let dims_for = |cell: f64| [0, 1, 2].map(|i| (extent[i] / cell).floor() as usize + 1);
        let budget = 4 * points.len() + 64;
        while dims_for(cell).iter().product::<usize>() > budget {
            cell *= 1.5;
        }
        let dims = dims_for(cell);
        let ncell = dims[0] * dims[1] * dims[2];

        let mut grid = PointGrid {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; ncell + 1],
            indices: vec![0; points.len()],
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for c in 0..ncell {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (j, &k) in keys.iter().enumerate() {
            grid.indices[fill[k]] = j;
            fill[k] += 1;
        }
        grid
    }

    fn cell_of(&self, p: &Point3) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let c = ((p[i] - self.origin[i]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[i] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn visit_shell(&self, center: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let r = r as isize;
        let range = |i: usize| {
            let c = center[i] as isize;
            (c - r).max(0)..=(c + r).min(self.dims[i] as isize - 1)
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let cheb = (x - center[0] as isize)
                        .abs()
                        .max((y - center[1] as isize).abs())
                        .max((z - center[2] as isize).abs());
                    if cheb != r {
                        continue;
                    }
                    let k = self.flat([x as usize, y as usize, z as usize]);
                    for &j in &self.indices[self.starts[k]..self.starts[k + 1]] {
                        f(j);
                    }
                }
            }
        }
    }

    /// The `k` nearest points to `query` as `(squared distance, index)`,
    /// ordered by distance then index.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let center = self.cell_of(query);
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for r in 0..=max_r {
            self.visit_shell(center, r, |j| {
                let d = dist2(query, &self.points[j]);
                let cand = (d, j);
                if best.len() < k || cand < best[k - 1] {
                    let pos = best.partition_point(|b| *b < cand);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            });
            // Unvisited points are at least r cells away along some axis.
            let reach = r as f64 * self.cell;
            if best.len() == k && best[k - 1].0 <= reach * reach {
                break;
            }
        }
        best
    }

    /// Indices of all points within `radius` (inclusive) of `query`, ascending.
    pub fn within(&self, query: &Point3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let rings = (radius / self.cell).ceil() as usize + 1;
        let center = self.cell_of(query);
        let mut out = Vec::new();
        for r in 0..=rings {
            self.visit_shell(center, r, |j| {
                if dist2(query, &self.points[j]) <= r2 {
                    out.push(j);
                }
            });
        }
        out.sort_unstable();
        out
    }
}
