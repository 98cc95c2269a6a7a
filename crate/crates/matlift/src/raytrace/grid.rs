//! Uniform spatial grid with 3D-DDA traversal (Amanatides & Woo).

use nalgebra::Vector3;

use crate::scene::Ray;

pub struct UniformGrid {
    origin: Vector3<f64>,
    cell: Vector3<f64>,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl UniformGrid {
    /// Builds from per-item world AABBs (lo, hi). Items are inserted into
    /// every overlapped cell.
    pub fn build(boxes: &[(Vector3<f64>, Vector3<f64>)]) -> Self {
        if boxes.is_empty() {
            return UniformGrid {
                origin: Vector3::zeros(),
                cell: Vector3::repeat(1.0),
                dims: [1, 1, 1],
                cells: vec![Vec::new()],
            };
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (blo, bhi) in boxes {
            lo = lo.inf(blo);
            hi = hi.sup(bhi);
        }
        // Pad so boundary items fall strictly inside.
        let extent = (hi - lo).map(|v| v.max(1e-9));
        let pad = extent * 1e-6;
        let lo = lo - pad;
        let extent = extent + pad * 2.0;

        let target = ((boxes.len() as f64).cbrt() * 2.0).ceil().max(1.0);
        let max_extent = extent.max();
        let cell_size = max_extent / target;
        let dims = [
            ((extent.x / cell_size).ceil() as usize).clamp(1, 128),
            ((extent.y / cell_size).ceil() as usize).clamp(1, 128),
            ((extent.z / cell_size).ceil() as usize).clamp(1, 128),
        ];
        let cell = Vector3::new(
            extent.x / dims[0] as f64,
            extent.y / dims[1] as f64,
            extent.z / dims[2] as f64,
        );

        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (id, (blo, bhi)) in boxes.iter().enumerate() {
            let c0 = cell_of(&lo, &cell, dims, blo);
            let c1 = cell_of(&lo, &cell, dims, bhi);
            for z in c0[2]..=c1[2] {
                for y in c0[1]..=c1[1] {
                    for x in c0[0]..=c1[0] {
                        cells[(z * dims[1] + y) * dims[0] + x].push(id as u32);
                    }
                }
            }
        }
        UniformGrid {
            origin: lo,
            cell,
            dims,
            cells,
        }
    }

    /// Calls `visit` with the item list of every cell the ray passes through,
    /// front to back starting at the ray origin.
    pub fn traverse(&self, ray: &Ray, mut visit: impl FnMut(&[u32])) {
        let lo = self.origin;
        let hi = self.origin
            + Vector3::new(
                self.cell.x * self.dims[0] as f64,
                self.cell.y * self.dims[1] as f64,
                self.cell.z * self.dims[2] as f64,
            );

        // Slab test for [t_enter, t_exit] against the grid bounds.
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-300 {
                if o < lo[i] || o > hi[i] {
                    return;
                }
            } else {
                let inv = 1.0 / d;
                let (ta, tb) = ((lo[i] - o) * inv, (hi[i] - o) * inv);
                let (ta, tb) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 > t1 {
            return;
        }

        let eps = 1e-12 * (1.0 + t0.abs());
        let start = ray.origin + ray.direction * (t0 + eps);
        let mut idx = [0usize; 3];
        let mut t_max = [0.0f64; 3];
        let mut t_delta = [0.0f64; 3];
        let mut step = [0isize; 3];
        for i in 0..3 {
            let gi = ((start[i] - lo[i]) / self.cell[i]).floor();
            idx[i] = (gi.max(0.0) as usize).min(self.dims[i] - 1);
            let d = ray.direction[i];
            if d > 1e-300 {
                step[i] = 1;
                t_delta[i] = self.cell[i] / d;
                t_max[i] = ((lo[i] + (idx[i] + 1) as f64 * self.cell[i]) - ray.origin[i]) / d;
            } else if d < -1e-300 {
                step[i] = -1;
                t_delta[i] = -self.cell[i] / d;
                t_max[i] = ((lo[i] + idx[i] as f64 * self.cell[i]) - ray.origin[i]) / d;
            } else {
                step[i] = 0;
                t_delta[i] = f64::INFINITY;
                t_max[i] = f64::INFINITY;
            }
        }

        loop {
            let cell = &self.cells[(idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]];
            if !cell.is_empty() {
                visit(cell);
            }
            // Step along the axis with the nearest cell boundary.
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[axis] > t1 {
                return;
            }
            let next = idx[axis] as isize + step[axis];
            if next < 0 || next >= self.dims[axis] as isize {
                return;
            }
            idx[axis] = next as usize;
            t_max[axis] += t_delta[axis];
        }
    }
}

#[inline]
fn cell_of(lo: &Vector3<f64>, cell: &Vector3<f64>, dims: [usize; 3], p: &Vector3<f64>) -> [usize; 3] {
    let mut out = [0usize; 3];
    for i in 0..3 {
        let gi = ((p[i] - lo[i]) / cell[i]).floor();
        out[i] = (gi.max(0.0) as usize).min(dims[i] - 1);
    }
    out
}
