//! Radius-based Vecchia (nearest-neighbor GP) approximation of a
//! covariance on a mesh, stored as `C̃⁻¹ = (I - A)ᵀ D⁻¹ (I - A)` with `A`
//! strictly lower triangular in a chosen vertex ordering.
//!
//! Rows of `A` are held in ordering position but reference vertices by
//! their original index, so every public operation takes and returns
//! vectors in original vertex order without permutation copies.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::CorrelationModel;
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::sphere::{NeighborIndex, SphericalMesh};

pub const DEFAULT_MAX_NEIGHBORS: usize = 64;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Vertex ordering for the sequential conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VertexOrdering {
    /// Increasing geodesic distance from vertex 0.
    #[default]
    Sweep,
    /// Greedy max-min distance ordering starting at vertex 0. O(M²).
    MaxMin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VecchiaOptions {
    pub max_neighbors: usize,
    pub ordering: VertexOrdering,
}

impl Default for VecchiaOptions {
    fn default() -> Self {
        VecchiaOptions { max_neighbors: DEFAULT_MAX_NEIGHBORS, ordering: VertexOrdering::Sweep }
    }
}

/// Diagonal term added to the scaled correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum Nugget {
    None,
    Constant(f64),
    PerVertex(Vec<f64>),
}

impl Nugget {
    #[inline]
    fn at(&self, v: usize) -> f64 {
        match self {
            Nugget::None => 0.0,
            Nugget::Constant(c) => *c,
            Nugget::PerVertex(vals) => vals[v],
        }
    }
}

/// Covariance `scale * C(d) + nugget(s) * 1{s = s'}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub kernel: CorrelationModel,
    pub scale: f64,
    pub nugget: Nugget,
}

impl CovarianceSpec {
    pub fn correlation(kernel: CorrelationModel) -> Self {
        CovarianceSpec { kernel, scale: 1.0, nugget: Nugget::None }
    }

    #[inline]
    pub fn cov(&self, mesh: &SphericalMesh, a: usize, b: usize) -> f64 {
        if a == b {
            self.scale + self.nugget.at(a)
        } else {
            self.scale * self.kernel.corr(mesh.distance(a, b))
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::argument(format!("covariance scale must be nonnegative, got {}", self.scale)));
        }
        match &self.nugget {
            Nugget::None => {}
            Nugget::Constant(c) => {
                if !(*c >= 0.0) {
                    return Err(Error::argument("nugget must be nonnegative"));
                }
            }
            Nugget::PerVertex(v) => {
                if v.len() != m {
                    return Err(Error::argument(format!(
                        "per-vertex nugget has length {}, mesh has {m} vertices",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !(*x >= 0.0)) {
                    return Err(Error::argument("nugget must be nonnegative"));
                }
            }
        }
        if self.scale == 0.0 && matches!(self.nugget, Nugget::None) {
            return Err(Error::argument("covariance is identically zero"));
        }
        Ok(())
    }
}

/// Provenance of a built approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct VecchiaMeta {
    pub psi: f64,
    pub nu: f64,
    pub scale: f64,
    pub radius: f64,
    pub mesh_hash: u64,
    pub max_neighbors: usize,
}

/// Sparse factored precision `(I - A)ᵀ diag(cond_var)⁻¹ (I - A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VecchiaPrecision {
    order: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    cond_var: Vec<f64>,
    meta: VecchiaMeta,
}

/// Vertex ordering for `mesh`.
pub fn vertex_ordering(mesh: &SphericalMesh, ordering: VertexOrdering) -> Vec<usize> {
    let m = mesh.len();
    match ordering {
        VertexOrdering::Sweep => {
            let mut idx: Vec<(f64, usize)> = (0..m).map(|j| (mesh.distance(0, j), j)).collect();
            idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            idx.into_iter().map(|(_, j)| j).collect()
        }
        VertexOrdering::MaxMin => {
            let mut order = Vec::with_capacity(m);
            let mut taken = vec![false; m];
            let mut mind = vec![f64::INFINITY; m];
            let mut cur = 0;
            for _ in 0..m {
                order.push(cur);
                taken[cur] = true;
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for j in 0..m {
                    if taken[j] {
                        continue;
                    }
                    mind[j] = mind[j].min(mesh.distance(cur, j));
                    if mind[j] > best.0 {
                        best = (mind[j], j);
                    }
                }
                cur = best.1;
            }
            order
        }
    }
}

struct Row {
    cols: Vec<usize>,
    weights: Vec<f64>,
    cond_var: f64,
}

fn build_row(mesh: &SphericalMesh, spec: &CovarianceSpec, v: usize, nbrs: &[usize]) -> Option<Row> {
    let var = spec.cov(mesh, v, v);
    let n = nbrs.len();
    if n == 0 {
        return (var > 0.0).then(|| Row { cols: vec![], weights: vec![], cond_var: var });
    }
    let mut gram = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..=a {
            let c = spec.cov(mesh, nbrs[a], nbrs[b]);
            gram[a * n + b] = c;
            gram[b * n + a] = c;
        }
    }
    let cross: Vec<f64> = nbrs.iter().map(|&u| spec.cov(mesh, v, u)).collect();
    let mean_diag = (0..n).map(|a| gram[a * n + a]).sum::<f64>() / n as f64;
    let mut jitter = 0.0;
    loop {
        let mut l = gram.clone();
        for a in 0..n {
            l[a * n + a] += jitter * mean_diag;
        }
        if cholesky_in_place(&mut l, n) {
            let mut w = cross.clone();
            cholesky_solve(&l, n, &mut w);
            let explained: f64 = w.iter().zip(&cross).map(|(a, b)| a * b).sum();
            let cv = var - explained;
            if cv > 1e-12 * var && w.iter().all(|x| x.is_finite()) {
                return Some(Row { cols: nbrs.to_vec(), weights: w, cond_var: cv });
            }
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000001 {
            return None;
        }
    }
}

impl VecchiaPrecision {
    /// Builds the approximation for the unit-scale correlation `kernel`.
    pub fn build(mesh: &SphericalMesh, nbrs: &NeighborIndex, kernel: &CorrelationModel) -> Result<Self> {
        Self::build_with(mesh, nbrs, &CovarianceSpec::correlation(*kernel), VecchiaOptions::default())
    }

    /// Builds the approximation for an arbitrary covariance spec.
    pub fn build_with(
        mesh: &SphericalMesh,
        nbrs: &NeighborIndex,
        spec: &CovarianceSpec,
        opts: VecchiaOptions,
    ) -> Result<Self> {
        let m = mesh.len();
        if nbrs.len() != m || nbrs.mesh_hash() != mesh.content_hash() {
            return Err(Error::argument("neighbor index was built on a different mesh"));
        }
        if opts.max_neighbors == 0 {
            return Err(Error::argument("max_neighbors must be positive"));
        }
        spec.validate(m)?;
        let order = vertex_ordering(mesh, opts.ordering);
        let mut position = vec![0usize; m];
        for (k, &v) in order.iter().enumerate() {
            position[v] = k;
        }
        let rows: Vec<std::result::Result<Row, usize>> = order
            .par_iter()
            .enumerate()
            .map(|(k, &v)| {
                let list = nbrs.neighbors(v);
                let prior: Vec<usize> =
                    list.ids.iter().copied().filter(|&u| position[u] < k).take(opts.max_neighbors).collect();
                build_row(mesh, spec, v, &prior).ok_or(v)
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(m + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut cond_var = Vec::with_capacity(m);
        for r in rows {
            let row = r.map_err(|v| {
                Error::numerical(format!("local covariance at vertex {v} is not factorizable after maximum jitter"))
            })?;
            cols.extend_from_slice(&row.cols);
            weights.extend_from_slice(&row.weights);
            row_ptr.push(cols.len());
            cond_var.push(row.cond_var);
        }
        Ok(VecchiaPrecision {
            order,
            row_ptr,
            cols,
            weights,
            cond_var,
            meta: VecchiaMeta {
                psi: spec.kernel.psi(),
                nu: spec.kernel.nu(),
                scale: spec.scale,
                radius: nbrs.radius(),
                mesh_hash: mesh.content_hash(),
                max_neighbors: opts.max_neighbors,
            },
        })
    }

    /// Independent unit-variance field (identity correlation).
    pub fn identity(m: usize) -> Self {
        VecchiaPrecision {
            order: (0..m).collect(),
            row_ptr: vec![0; m + 1],
            cols: vec![],
            weights: vec![],
            cond_var: vec![1.0; m],
            meta: VecchiaMeta { psi: f64::INFINITY, nu: 1.0, scale: 1.0, radius: 0.0, mesh_hash: 0, max_neighbors: 0 },
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Conditional variances in ordering position.
    pub fn cond_var(&self) -> &[f64] {
        &self.cond_var
    }

    pub fn meta(&self) -> &VecchiaMeta {
        &self.meta
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Row at ordering position `k`: (vertex, neighbor vertices, weights, conditional variance).
    pub fn row(&self, k: usize) -> (usize, &[usize], &[f64], f64) {
        let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
        (self.order[k], &self.cols[a..b], &self.weights[a..b], self.cond_var[k])
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::argument(format!("vector length {n} does not match approximation size {}", self.len())));
        }
        Ok(())
    }

    #[inline]
    fn innovation(&self, k: usize, v: &[f64]) -> f64 {
        let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
        let mut e = v[self.order[k]];
        for t in a..b {
            e -= self.weights[t] * v[self.cols[t]];
        }
        e
    }

    /// `vᵀ C̃⁻¹ v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        self.check_len(v.len())?;
        Ok(self.quad_form_unchecked(v))
    }

    pub fn quad_form_unchecked(&self, v: &[f64]) -> f64 {
        (0..self.len())
            .map(|k| {
                let e = self.innovation(k, v);
                e * e / self.cond_var[k]
            })
            .sum()
    }

    /// `log det C̃`.
    pub fn log_det(&self) -> f64 {
        self.cond_var.iter().map(|c| c.ln()).sum()
    }

    pub fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut out = vec![0.0; v.len()];
        self.apply_precision_into(v, &mut out);
        Ok(out)
    }

    /// `out = C̃⁻¹ v`, overwriting `out`.
    pub fn apply_precision_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.len() {
            let e = self.innovation(k, v) / self.cond_var[k];
            out[self.order[k]] += e;
            let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
            for t in a..b {
                out[self.cols[t]] -= self.weights[t] * e;
            }
        }
    }

    pub fn apply_covariance(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        let mut out = v.to_vec();
        self.apply_covariance_in_place(&mut out);
        Ok(out)
    }

    /// `v <- C̃ v` via two sparse triangular solves.
    pub fn apply_covariance_in_place(&self, v: &mut [f64]) {
        let m = self.len();
        // (I - A)ᵀ z = v, upper triangular in ordering: sweep backwards.
        for k in (0..m).rev() {
            let zk = v[self.order[k]];
            let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
            for t in a..b {
                v[self.cols[t]] += self.weights[t] * zk;
            }
        }
        for k in 0..m {
            v[self.order[k]] *= self.cond_var[k];
        }
        self.solve_unit_lower_in_place(v);
    }

    /// `v <- (I - A)⁻¹ v`, forward sweep.
    fn solve_unit_lower_in_place(&self, v: &mut [f64]) {
        for k in 0..self.len() {
            let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
            let mut s = v[self.order[k]];
            for t in a..b {
                s += self.weights[t] * v[self.cols[t]];
            }
            v[self.order[k]] = s;
        }
    }

    /// `out = (I - A)ᵀ diag(cond_var)^(-1/2) eps`, with `eps` indexed by
    /// ordering position. If `eps ~ N(0, I)` then `out ~ N(0, C̃⁻¹)`.
    pub fn precision_sqrt_apply(&self, eps: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.len() {
            let e = eps[k] / self.cond_var[k].sqrt();
            out[self.order[k]] += e;
            let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
            for t in a..b {
                out[self.cols[t]] -= self.weights[t] * e;
            }
        }
    }

    /// Draw from `N(0, scale² C̃)`.
    pub fn sample_gp<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(scale > 0.0) {
            return Err(Error::argument(format!("scale must be positive, got {scale}")));
        }
        let mut v = vec![0.0; self.len()];
        for k in 0..self.len() {
            let e: f64 = rng.sample(StandardNormal);
            v[self.order[k]] = scale * self.cond_var[k].sqrt() * e;
        }
        self.solve_unit_lower_in_place(&mut v);
        Ok(v)
    }

    /// Diagonal of `C̃⁻¹`.
    pub fn precision_diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.len()];
        for k in 0..self.len() {
            let inv = 1.0 / self.cond_var[k];
            d[self.order[k]] += inv;
            let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
            for t in a..b {
                d[self.cols[t]] += self.weights[t] * self.weights[t] * inv;
            }
        }
        d
    }

    /// Dense `C̃⁻¹` (row-major). Test and small-problem use only.
    pub fn dense_precision(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; m];
        for j in 0..m {
            e[j] = 1.0;
            self.apply_precision_into(&e, &mut col);
            for i in 0..m {
                out[i * m + j] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }

    /// Dense `C̃` (row-major). Test and small-problem use only.
    pub fn dense_covariance(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            self.apply_covariance_in_place(&mut e);
            for i in 0..m {
                out[i * m + j] = e[i];
            }
        }
        out
    }

    /// Writes a binary cache of ordering, factor rows and metadata.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"GPVC")?;
        w.write_all(&1u32.to_le_bytes())?;
        for x in [self.meta.psi, self.meta.nu, self.meta.scale, self.meta.radius] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.meta.mesh_hash.to_le_bytes())?;
        w.write_all(&(self.meta.max_neighbors as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for &o in &self.order {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &p in &self.row_ptr {
            w.write_all(&(p as u64).to_le_bytes())?;
        }
        for &c in &self.cols {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for &x in self.weights.iter().chain(&self.cond_var) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GPVC" {
            return Err(Error::Format("not a Vecchia cache file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(Error::Format("unsupported Vecchia cache version".into()));
        }
        let mut f = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let (psi, nu, scale, radius) = (f()?, f()?, f()?, f()?);
        let u = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let mesh_hash = u(&mut r)?;
        let max_neighbors = u(&mut r)? as usize;
        let m = u(&mut r)? as usize;
        let nnz = u(&mut r)? as usize;
        let read_us =
            |n: usize, r: &mut R| -> Result<Vec<usize>> { (0..n).map(|_| u(r).map(|x| x as usize)).collect() };
        let order = read_us(m, &mut r)?;
        let row_ptr = read_us(m + 1, &mut r)?;
        let cols = read_us(nnz, &mut r)?;
        let mut read_fs = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect()
        };
        let weights = read_fs(nnz)?;
        let cond_var = read_fs(m)?;
        if row_ptr.last() != Some(&nnz) || cols.iter().chain(&order).any(|&c| c >= m) {
            return Err(Error::Format("corrupt Vecchia cache".into()));
        }
        Ok(VecchiaPrecision {
            order,
            row_ptr,
            cols,
            weights,
            cond_var,
            meta: VecchiaMeta { psi, nu, scale, radius, mesh_hash, max_neighbors },
        })
    }
}
