//! Vertex sets on a sphere: geodesic distances, radius-bounded neighbor
//! search, quasi-uniform test meshes and geodesic discs.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Template sphere radius in mm used when none is supplied.
pub const DEFAULT_RADIUS_MM: f64 = 100.0;

const UNIT_TOL: f64 = 1e-9;

/// A fixed vertex set on a sphere of radius `radius` (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalMesh {
    dirs: Vec<[f64; 3]>,
    radius: f64,
    regions: Option<Vec<u32>>,
}

impl SphericalMesh {
    /// Builds a mesh from unit direction vectors.
    pub fn new(dirs: Vec<[f64; 3]>, radius: f64) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::argument("mesh must contain at least one vertex"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::argument(format!("sphere radius must be positive, got {radius}")));
        }
        for (i, u) in dirs.iter().enumerate() {
            let n = norm(u);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::argument(format!("vertex {i} is not a unit direction (norm {n})")));
            }
        }
        Ok(SphericalMesh { dirs, radius, regions: None })
    }

    /// Builds a mesh from arbitrary nonzero points, projecting each onto the unit sphere.
    pub fn from_points(points: &[[f64; 3]], radius: f64) -> Result<Self> {
        let mut dirs = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let n = norm(p);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::argument(format!("vertex {i} has zero or non-finite norm")));
            }
            dirs.push([p[0] / n, p[1] / n, p[2] / n]);
        }
        Self::new(dirs, radius)
    }

    pub fn with_regions(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::argument(format!(
                "region label count {} does not match vertex count {}",
                labels.len(),
                self.len()
            )));
        }
        self.regions = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.dirs
    }

    pub fn direction(&self, i: usize) -> [f64; 3] {
        self.dirs[i]
    }

    pub fn regions(&self) -> Option<&[u32]> {
        self.regions.as_deref()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::argument(format!("vertex index {i} out of range for mesh of {} vertices", self.len())));
        }
        Ok(())
    }

    /// Great-circle distance in mm between vertices `i` and `j`.
    pub fn great_circle_distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.distance(i, j))
    }

    /// Unchecked variant of [`great_circle_distance`](Self::great_circle_distance).
    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.radius * angle_between(&self.dirs[i], &self.dirs[j])
    }

    /// Largest pairwise geodesic distance. O(M²).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.max(self.distance(i, j));
            }
        }
        best
    }

    /// All vertices within `cap_radius` mm of `center`, sorted by distance (ties by index).
    pub fn geodesic_disc(&self, center: usize, cap_radius: f64) -> Result<Vec<usize>> {
        self.check(center)?;
        if !(cap_radius > 0.0) {
            return Err(Error::argument(format!("cap radius must be positive, got {cap_radius}")));
        }
        let mut hits: Vec<(f64, usize)> =
            (0..self.len()).map(|j| (self.distance(center, j), j)).filter(|&(d, _)| d <= cap_radius).collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(hits.into_iter().map(|(_, j)| j).collect())
    }

    /// The `count` vertices closest to `center`, sorted by distance.
    pub fn nearest_disc(&self, center: usize, count: usize) -> Result<Vec<usize>> {
        self.check(center)?;
        if count == 0 || count > self.len() {
            return Err(Error::argument(format!("disc size {count} must be in 1..={}", self.len())));
        }
        let mut all: Vec<(f64, usize)> = (0..self.len()).map(|j| (self.distance(center, j), j)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(all.into_iter().take(count).map(|(_, j)| j).collect())
    }

    /// New mesh restricted to `indices` (in the given order).
    pub fn submesh(&self, indices: &[usize]) -> Result<SphericalMesh> {
        for &i in indices {
            self.check(i)?;
        }
        let dirs = indices.iter().map(|&i| self.dirs[i]).collect();
        let mut mesh = SphericalMesh::new(dirs, self.radius)?;
        if let Some(r) = &self.regions {
            mesh.regions = Some(indices.iter().map(|&i| r[i]).collect());
        }
        Ok(mesh)
    }

    /// Content hash over coordinates and radius (bitwise).
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.radius.to_bits().hash(&mut h);
        for u in &self.dirs {
            for c in u {
                c.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Applies a rotation matrix (row-major) to every direction.
    pub fn rotated(&self, rot: &[[f64; 3]; 3]) -> Result<SphericalMesh> {
        let pts: Vec<[f64; 3]> = self
            .dirs
            .iter()
            .map(|u| {
                [
                    rot[0][0] * u[0] + rot[0][1] * u[1] + rot[0][2] * u[2],
                    rot[1][0] * u[0] + rot[1][1] * u[1] + rot[1][2] * u[2],
                    rot[2][0] * u[0] + rot[2][1] * u[1] + rot[2][2] * u[2],
                ]
            })
            .collect();
        let mut mesh = SphericalMesh::from_points(&pts, self.radius)?;
        mesh.regions = self.regions.clone();
        Ok(mesh)
    }
}

#[inline]
fn norm(u: &[f64; 3]) -> f64 {
    (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
}

/// Angle between two unit vectors. Equal to arccos of the clamped dot
/// product; the atan2 form keeps precision at small separations.
#[inline]
pub fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cx = a[1] * b[2] - a[2] * b[1];
    let cy = a[2] * b[0] - a[0] * b[2];
    let cz = a[0] * b[1] - a[1] * b[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot)
}

/// Deterministic golden-angle lattice of `count` points.
pub fn fibonacci_sphere(count: usize, radius: f64) -> Result<SphericalMesh> {
    if count == 0 {
        return Err(Error::argument("fibonacci_sphere needs at least one point"));
    }
    if count == 1 {
        return SphericalMesh::new(vec![[0.0, 0.0, 1.0]], radius);
    }
    let golden = PI * (3.0 - 5.0f64.sqrt());
    let n = count as f64;
    let pts: Vec<[f64; 3]> = (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [rho * phi.cos(), rho * phi.sin(), z]
        })
        .collect();
    SphericalMesh::from_points(&pts, radius)
}

/// Vertex count giving a golden-angle lattice with roughly `spacing` mm
/// between nearest neighbors (hexagonal packing area per point).
pub fn fibonacci_count_for_spacing(radius: f64, spacing: f64) -> usize {
    let area = 4.0 * PI * radius * radius;
    let per_point = spacing * spacing * 3.0f64.sqrt() / 2.0;
    (area / per_point).round().max(1.0) as usize
}

/// One vertex's neighbors: ids with their geodesic distances, sorted by distance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighbors {
    pub ids: Vec<usize>,
    pub dists: Vec<f64>,
}

/// Exact radius-bounded neighbor lists for every vertex of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    radius: f64,
    mesh_hash: u64,
    lists: Vec<Neighbors>,
}

impl NeighborIndex {
    /// Builds the index with a uniform cell grid on the embedded
    /// coordinates. Cells are sized by the chord bound, and candidates are
    /// filtered on geodesic distance, so the query is exact.
    pub fn build(mesh: &SphericalMesh, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::argument(format!("neighbor radius must be positive, got {r}")));
        }
        let big_r = mesh.radius();
        let chord = if r >= PI * big_r { 2.0 * big_r } else { 2.0 * big_r * (r / (2.0 * big_r)).sin() };
        let cell = chord.max(1e-12 * big_r);
        let key = |p: [f64; 3]| -> (i64, i64, i64) {
            (
                (p[0] * big_r / cell).floor() as i64,
                (p[1] * big_r / cell).floor() as i64,
                (p[2] * big_r / cell).floor() as i64,
            )
        };
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, &u) in mesh.directions().iter().enumerate() {
            grid.entry(key(u)).or_default().push(i);
        }
        let mut lists = Vec::with_capacity(mesh.len());
        for (i, &u) in mesh.directions().iter().enumerate() {
            let (cx, cy, cz) = key(u);
            let mut hits: Vec<(f64, usize)> = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let d = mesh.distance(i, j);
                                if d <= r {
                                    hits.push((d, j));
                                }
                            }
                        }
                    }
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            lists
                .push(Neighbors { ids: hits.iter().map(|h| h.1).collect(), dists: hits.iter().map(|h| h.0).collect() });
        }
        Ok(NeighborIndex { radius: r, mesh_hash: mesh.content_hash(), lists })
    }

    /// O(M²) reference construction.
    pub fn brute_force(mesh: &SphericalMesh, r: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::argument(format!("neighbor radius must be positive, got {r}")));
        }
        let lists = (0..mesh.len())
            .map(|i| {
                let mut hits: Vec<(f64, usize)> = (0..mesh.len())
                    .filter(|&j| j != i)
                    .map(|j| (mesh.distance(i, j), j))
                    .filter(|&(d, _)| d <= r)
                    .collect();
                hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                Neighbors { ids: hits.iter().map(|h| h.1).collect(), dists: hits.iter().map(|h| h.0).collect() }
            })
            .collect();
        Ok(NeighborIndex { radius: r, mesh_hash: mesh.content_hash(), lists })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mesh_hash(&self) -> u64 {
        self.mesh_hash
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &Neighbors {
        &self.lists[i]
    }

    pub fn mean_degree(&self) -> f64 {
        let total: usize = self.lists.iter().map(|l| l.ids.len()).sum();
        total as f64 / self.lists.len().max(1) as f64
    }
}
