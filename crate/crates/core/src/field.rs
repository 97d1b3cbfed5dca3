//! Tensorized phase grid (spatial cells times velocity nodes) and fields on it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KineticError, Result};
use crate::geometry::{Domain, DomainKind};
use crate::quadrature::pairwise_sum;
use crate::vec3::Vec3;
use crate::velocity::VelocityGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialGridSpec {
    /// Cells across the slab, or per side of the bounding box for bodies.
    pub cells: usize,
}

impl Default for SpatialGridSpec {
    fn default() -> Self {
        SpatialGridSpec { cells: 32 }
    }
}

/// Spatial cells: uniform in `x_1` for the slab, box cells with centres inside the body otherwise.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    pub domain: Domain,
    pub spec: SpatialGridSpec,
    pub centers: Vec<Vec3>,
    /// Cell volumes, rescaled so that they sum to the domain volume.
    pub volumes: Vec<f64>,
    /// Cell width per axis.
    pub dx: Vec3,
    /// Lower corner of the box of cells.
    pub origin: Vec3,
    lookup: Vec<u32>,
    /// Cells with at least one face neighbour outside the active set.
    pub boundary_cells: Vec<usize>,
}

const NONE: u32 = u32::MAX;

impl SpatialGrid {
    pub fn new(domain: Domain, spec: SpatialGridSpec) -> Result<Self> {
        let n = spec.cells;
        if n < 2 {
            return Err(KineticError::invalid("cells", "need at least 2 spatial cells"));
        }
        if domain.is_slab() {
            let dx = 1.0 / n as f64;
            let centers = (0..n).map(|i| Vec3::new((i as f64 + 0.5) * dx, 0.5, 0.5)).collect();
            return Ok(SpatialGrid {
                domain,
                spec,
                centers,
                volumes: vec![dx; n],
                dx: Vec3::new(dx, 1.0, 1.0),
                origin: Vec3::ZERO,
                lookup: (0..n as u32).collect(),
                boundary_cells: vec![0, n - 1],
            });
        }
        let (lo, hi) = domain.bounding_box();
        let dx = (hi - lo) / n as f64;
        let mut lookup = vec![NONE; n * n * n];
        let mut centers = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let c = lo + Vec3::new(
                        (i as f64 + 0.5) * dx.x(),
                        (j as f64 + 0.5) * dx.y(),
                        (k as f64 + 0.5) * dx.z(),
                    );
                    if domain.contains(c) {
                        lookup[(i * n + j) * n + k] = centers.len() as u32;
                        centers.push(c);
                    }
                }
            }
        }
        if centers.is_empty() {
            return Err(KineticError::invalid("cells", "no cell centre falls inside the domain"));
        }
        let vol = domain.volume() / centers.len() as f64;
        let mut grid = SpatialGrid {
            domain,
            spec,
            volumes: vec![vol; centers.len()],
            centers,
            dx,
            origin: lo,
            lookup,
            boundary_cells: Vec::new(),
        };
        grid.boundary_cells = (0..grid.len())
            .filter(|&c| {
                let idx = grid.box_index(c);
                (0..3).any(|ax| {
                    [-1i64, 1].iter().any(|&s| {
                        let mut q = idx;
                        q[ax] += s;
                        grid.cell_at(q).is_none()
                    })
                })
            })
            .collect();
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn is_slab(&self) -> bool {
        self.domain.is_slab()
    }

    pub fn total_volume(&self) -> f64 {
        pairwise_sum(&self.volumes)
    }

    /// Integer box coordinates of an active cell.
    pub fn box_index(&self, c: usize) -> [i64; 3] {
        if self.is_slab() {
            return [c as i64, 0, 0];
        }
        let p = self.centers[c] - self.origin;
        [
            (p.x() / self.dx.x()).floor() as i64,
            (p.y() / self.dx.y()).floor() as i64,
            (p.z() / self.dx.z()).floor() as i64,
        ]
    }

    pub fn cell_at(&self, q: [i64; 3]) -> Option<usize> {
        let n = self.spec.cells as i64;
        if self.is_slab() {
            return (q[0] >= 0 && q[0] < n).then_some(q[0] as usize);
        }
        if q.iter().any(|&a| a < 0 || a >= n) {
            return None;
        }
        match self.lookup[((q[0] * n + q[1]) * n + q[2]) as usize] {
            NONE => None,
            c => Some(c as usize),
        }
    }

    /// Interpolation stencil `(cell, weight)` at a point of the closed domain.
    ///
    /// Slab: linear in `x_1` between cell centres, constant in the half cells next to
    /// the walls. Bodies: trilinear over active cells with the weights of missing
    /// corners redistributed.
    pub fn stencil(&self, x: Vec3) -> Vec<(usize, f64)> {
        let n = self.spec.cells;
        if self.is_slab() {
            let s = (x.x() * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (s.floor() as usize).min(n - 2);
            let f = s - i0 as f64;
            return vec![(i0, 1.0 - f), (i0 + 1, f)];
        }
        let p = x - self.origin;
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let s = (p[k] / self.dx[k] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (s.floor() as i64).min(n as i64 - 2);
            base[k] = i0;
            frac[k] = s - i0 as f64;
        }
        let mut out = Vec::with_capacity(8);
        let mut wsum = 0.0;
        for corner in 0..8 {
            let mut q = base;
            let mut w = 1.0;
            for k in 0..3 {
                let bit = (corner >> k) & 1;
                q[k] += bit as i64;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(c) = self.cell_at(q) {
                out.push((c, w));
                wsum += w;
            }
        }
        if wsum < 1e-12 {
            // no active corner: fall back to the nearest active cell
            return vec![(self.nearest_cell(x), 1.0)];
        }
        out.iter_mut().for_each(|(_, w)| *w /= wsum);
        out
    }

    pub fn nearest_cell(&self, x: Vec3) -> usize {
        if self.is_slab() {
            let n = self.spec.cells;
            return ((x.x() * n as f64).floor().max(0.0) as usize).min(n - 1);
        }
        let mut best = (f64::INFINITY, 0);
        for (c, ctr) in self.centers.iter().enumerate() {
            let d = (*ctr - x).norm_sq();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

/// Spatial grid paired with a shared velocity grid.
#[derive(Clone, Debug)]
pub struct PhaseGrid {
    pub space: SpatialGrid,
    pub velocity: Arc<VelocityGrid>,
}

impl PhaseGrid {
    pub fn new(space: SpatialGrid, velocity: Arc<VelocityGrid>) -> Arc<Self> {
        Arc::new(PhaseGrid { space, velocity })
    }

    pub fn from_kind(kind: DomainKind, cells: usize, velocity: Arc<VelocityGrid>) -> Result<Arc<Self>> {
        let space = SpatialGrid::new(Domain::new(kind)?, SpatialGridSpec { cells })?;
        Ok(PhaseGrid::new(space, velocity))
    }

    pub fn ncell(&self) -> usize {
        self.space.len()
    }

    pub fn nv(&self) -> usize {
        self.velocity.len()
    }
}

/// Phase-space values stored cell-major: `data[c * nv + j] = f(x_c, v_j)`.
#[derive(Clone, Debug)]
pub struct Field {
    pub grid: Arc<PhaseGrid>,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Arc<PhaseGrid>) -> Self {
        let n = grid.ncell() * grid.nv();
        Field { grid, data: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<PhaseGrid>, f: impl Fn(Vec3, Vec3) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.ncell() * grid.nv());
        for x in &grid.space.centers {
            for v in &grid.velocity.nodes {
                data.push(f(*x, *v));
            }
        }
        Field { grid, data }
    }

    /// The same velocity function in every cell.
    pub fn homogeneous(grid: Arc<PhaseGrid>, values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(grid.ncell() * grid.nv());
        for _ in 0..grid.ncell() {
            data.extend_from_slice(values);
        }
        Field { grid, data }
    }

    pub fn maxwellian(grid: Arc<PhaseGrid>) -> Self {
        let mu = grid.velocity.mu.clone();
        Field::homogeneous(grid, &mu)
    }

    pub fn nv(&self) -> usize {
        self.grid.nv()
    }

    pub fn ncell(&self) -> usize {
        self.grid.ncell()
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let nv = self.nv();
        &self.data[c * nv..(c + 1) * nv]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [f64] {
        let nv = self.nv();
        &mut self.data[c * nv..(c + 1) * nv]
    }

    pub fn get(&self, c: usize, j: usize) -> f64 {
        self.data[c * self.nv() + j]
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field {
            grid: self.grid.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `int int psi(v) f dx dv` with deterministic summation.
    pub fn global_moment(&self, psi: impl Fn(Vec3) -> f64) -> f64 {
        let vg = &self.grid.velocity;
        let pv: Vec<f64> = vg.nodes.iter().map(|v| psi(*v)).collect();
        let per_cell: Vec<f64> = (0..self.ncell())
            .map(|c| {
                let t: Vec<f64> = self.cell(c).iter().zip(&pv).map(|(a, b)| a * b).collect();
                self.grid.space.volumes[c] * vg.integrate(&t)
            })
            .collect();
        pairwise_sum(&per_cell)
    }

    /// `int int psi(x, v) f dx dv` with `x` at cell centres.
    pub fn global_moment_at(&self, psi: impl Fn(Vec3, Vec3) -> f64) -> f64 {
        let vg = &self.grid.velocity;
        let per_cell: Vec<f64> = (0..self.ncell())
            .map(|c| {
                let x = self.grid.space.centers[c];
                let t: Vec<f64> = self.cell(c).iter().zip(&vg.nodes).map(|(a, v)| a * psi(x, *v)).collect();
                self.grid.space.volumes[c] * vg.integrate(&t)
            })
            .collect();
        pairwise_sum(&per_cell)
    }

    pub fn mass(&self) -> f64 {
        self.global_moment(|_| 1.0)
    }

    pub fn energy(&self) -> f64 {
        self.global_moment(|v| v.norm_sq())
    }

    pub fn momentum(&self) -> Vec3 {
        Vec3::new(
            self.global_moment(|v| v.x()),
            self.global_moment(|v| v.y()),
            self.global_moment(|v| v.z()),
        )
    }

    /// Angular momentum `int int (x - c) x v . axis f` about an axis through the domain centre.
    pub fn angular_momentum(&self, axis: Vec3) -> f64 {
        let vg = &self.grid.velocity;
        let center = self.grid.space.domain.center();
        let per_cell: Vec<f64> = (0..self.ncell())
            .map(|c| {
                let r = self.grid.space.centers[c] - center;
                let t: Vec<f64> = self
                    .cell(c)
                    .iter()
                    .zip(&vg.nodes)
                    .map(|(a, v)| a * r.cross(v).dot(&axis))
                    .collect();
                self.grid.space.volumes[c] * vg.integrate(&t)
            })
            .collect();
        pairwise_sum(&per_cell)
    }

    /// Value at an arbitrary spatial point and velocity node.
    pub fn eval_at_node(&self, x: Vec3, j: usize) -> f64 {
        self.grid
            .space
            .stencil(x)
            .iter()
            .map(|&(c, w)| w * self.get(c, j))
            .sum()
    }

    /// Value at an arbitrary phase point: spatial stencil, then trilinear in velocity of `f / mu`.
    pub fn eval(&self, x: Vec3, v: Vec3) -> Option<f64> {
        let vg = &self.grid.velocity;
        let st = self.grid.space.stencil(x);
        let ratio: Vec<f64> = (0..self.nv())
            .map(|j| st.iter().map(|&(c, w)| w * self.get(c, j)).sum::<f64>() / vg.mu[j])
            .collect();
        vg.interpolate(&ratio, v).map(|r| r * vg.mu_at(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::VelocityGridSpec;
    use approx::assert_abs_diff_eq;

    fn vgrid() -> Arc<VelocityGrid> {
        Arc::new(VelocityGrid::new(VelocityGridSpec { n_per_dim: 8, v_max: 6.0 }).unwrap())
    }

    #[test]
    fn slab_cells() {
        let g = PhaseGrid::from_kind(DomainKind::Slab, 10, vgrid()).unwrap();
        assert_eq!(g.ncell(), 10);
        assert_abs_diff_eq!(g.space.total_volume(), 1.0, epsilon = 1e-14);
        let f = Field::maxwellian(g.clone());
        assert_abs_diff_eq!(f.mass(), 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(f.energy(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ball_cells_cover_the_volume() {
        let g = PhaseGrid::from_kind(
            DomainKind::Ball { center: Vec3::ZERO, radius: 1.0 },
            8,
            vgrid(),
        )
        .unwrap();
        assert!(g.ncell() > 200 && g.ncell() < 512);
        assert_abs_diff_eq!(g.space.total_volume(), 4.0 / 3.0 * std::f64::consts::PI, epsilon = 1e-12);
        assert!(!g.space.boundary_cells.is_empty());
        for c in 0..g.ncell() {
            assert_eq!(g.space.cell_at(g.space.box_index(c)), Some(c));
        }
    }

    #[test]
    fn stencils_reproduce_linear_profiles() {
        let g = PhaseGrid::from_kind(DomainKind::Slab, 10, vgrid()).unwrap();
        let f = Field::from_fn(g.clone(), |x, _| 2.0 + x.x());
        assert_abs_diff_eq!(f.eval_at_node(Vec3::new(0.43, 0.0, 0.0), 3), 2.43, epsilon = 1e-13);
        let b = PhaseGrid::from_kind(DomainKind::Ball { center: Vec3::ZERO, radius: 1.0 }, 8, vgrid()).unwrap();
        let f = Field::from_fn(b, |x, _| 1.0 + x.x() - 2.0 * x.y());
        let x = Vec3::new(0.1, -0.2, 0.05);
        assert_abs_diff_eq!(f.eval_at_node(x, 0), 1.0 + 0.1 + 0.4, epsilon = 1e-12);
    }
}
