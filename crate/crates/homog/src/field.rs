//! Discrete fields on uniform grids and the staggered difference calculus.
//!
//! The gradient takes forward differences anchored at nodes (component `k`
//! of a vector field lives on the edge from `x` to `x + h e_k`); the
//! divergence is its exact negative adjoint (backward differences). On
//! periodic grids indices wrap, on Dirichlet grids out-of-range reads are
//! zero. This pairing makes `-div(a grad u)` symmetric positive definite
//! for symmetric elliptic `a`, which the iterative solvers rely on.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{GridKind, GridSpec, NodeWalker};

#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: GridSpec,
    /// One component per axis, each indexed by its anchor node.
    pub comps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MatrixField {
    pub grid: GridSpec,
    /// Entry (i,j) stored at `entries[i*d + j]`, each indexed by node.
    pub entries: Vec<Vec<f64>>,
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        ScalarField {
            values: vec![0.0; grid.node_count()],
            grid,
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut values = vec![0.0; grid.node_count()];
        let mut w = NodeWalker::new(&grid);
        let mut coord = vec![0.0; grid.dim];
        let mut idx = 0usize;
        while w.advance() {
            for (ax, &k) in w.mi.iter().enumerate() {
                coord[ax] = grid.axis_coord(k);
            }
            values[idx] = f(&coord);
            idx += 1;
        }
        ScalarField { grid, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn shift_to_zero_mean(&mut self) {
        let m = self.mean();
        for v in &mut self.values {
            *v -= m;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |a, &v| a.min(v))
    }
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        VectorField {
            comps: vec![vec![0.0; grid.node_count()]; grid.dim],
            grid,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    /// Euclidean magnitude per node.
    pub fn magnitude(&self) -> ScalarField {
        let mut out = ScalarField::zeros(self.grid);
        for c in &self.comps {
            for (o, &v) in out.values.iter_mut().zip(c.iter()) {
                *o += v * v;
            }
        }
        for o in &mut out.values {
            *o = o.sqrt();
        }
        out
    }
}

impl MatrixField {
    pub fn zeros(grid: GridSpec) -> Self {
        MatrixField {
            entries: vec![vec![0.0; grid.node_count()]; grid.dim * grid.dim],
            grid,
        }
    }

    pub fn identity(grid: GridSpec) -> Self {
        let mut m = MatrixField::zeros(grid);
        for i in 0..grid.dim {
            m.entries[i * grid.dim + i].iter_mut().for_each(|v| *v = 1.0);
        }
        m
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        &self.entries[i * self.grid.dim + j]
    }

    #[inline]
    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut Vec<f64> {
        let d = self.grid.dim;
        &mut self.entries[i * d + j]
    }

    pub fn transpose(&self) -> MatrixField {
        let d = self.grid.dim;
        let mut out = MatrixField::zeros(self.grid);
        for i in 0..d {
            for j in 0..d {
                out.entries[i * d + j] = self.entries[j * d + i].clone();
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.grid.dim;
        for i in 0..d {
            for j in (i + 1)..d {
                let a = &self.entries[i * d + j];
                let b = &self.entries[j * d + i];
                if a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol) {
                    return false;
                }
            }
        }
        true
    }

    pub fn symmetrize(&self) -> MatrixField {
        let d = self.grid.dim;
        let mut out = self.clone();
        for i in 0..d {
            for j in (i + 1)..d {
                let n = self.grid.node_count();
                for idx in 0..n {
                    let s = 0.5 * (self.entries[i * d + j][idx] + self.entries[j * d + i][idx]);
                    out.entries[i * d + j][idx] = s;
                    out.entries[j * d + i][idx] = s;
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.iter().all(|v| v.is_finite()))
    }

    /// Frobenius magnitude per node.
    pub fn magnitude(&self) -> ScalarField {
        let mut out = ScalarField::zeros(self.grid);
        for c in &self.entries {
            for (o, &v) in out.values.iter_mut().zip(c.iter()) {
                *o += v * v;
            }
        }
        for o in &mut out.values {
            *o = o.sqrt();
        }
        out
    }

    /// Node-wise product `(a v)_j = sum_k a_jk v_k` with both factors at
    /// the same node.
    pub fn apply_to(&self, v: &VectorField) -> Result<VectorField> {
        self.grid.require_same(&v.grid, "matrix-vector product")?;
        let d = self.grid.dim;
        let n = self.grid.node_count();
        let mut out = VectorField::zeros(self.grid);
        for j in 0..d {
            let oj = &mut out.comps[j];
            for k in 0..d {
                let a = &self.entries[j * d + k];
                let vk = &v.comps[k];
                for idx in 0..n {
                    oj[idx] += a[idx] * vk[idx];
                }
            }
        }
        Ok(out)
    }
}

/// `out[x] = (u(x+h e_ax) - u(x)) / h`, overwriting `out`.
pub fn forward_diff_into(vals: &[f64], grid: &GridSpec, ax: usize, out: &mut [f64]) {
    let strides = grid.strides();
    let inv_h = 1.0 / grid.spacing();
    let m = grid.nodes_per_axis();
    let stride = strides[ax];
    let periodic = grid.is_periodic();
    let mut w = NodeWalker::new(grid);
    let mut idx = 0usize;
    while w.advance() {
        let up = if w.mi[ax] + 1 < m {
            vals[idx + stride]
        } else if periodic {
            vals[idx + stride - m * stride]
        } else {
            0.0
        };
        out[idx] = (up - vals[idx]) * inv_h;
        idx += 1;
    }
}

/// `out[x] += sign * (v(x) - v(x-h e_ax)) / h`.
pub fn backward_diff_accumulate(
    vals: &[f64],
    grid: &GridSpec,
    ax: usize,
    sign: f64,
    out: &mut [f64],
) {
    let strides = grid.strides();
    let inv_h = sign / grid.spacing();
    let m = grid.nodes_per_axis();
    let stride = strides[ax];
    let periodic = grid.is_periodic();
    let mut w = NodeWalker::new(grid);
    let mut idx = 0usize;
    while w.advance() {
        let down = if w.mi[ax] > 0 {
            vals[idx - stride]
        } else if periodic {
            vals[idx + (m - 1) * stride]
        } else {
            0.0
        };
        out[idx] += (vals[idx] - down) * inv_h;
        idx += 1;
    }
}

/// Forward difference of `u` along `ax`: `(u(x+h e_ax) - u(x)) / h`.
pub fn forward_diff(u: &ScalarField, ax: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.values.len()];
    forward_diff_into(&u.values, &u.grid, ax, &mut out);
    out
}

/// Backward difference of `v` along `ax`: `(v(x) - v(x-h e_ax)) / h`.
pub fn backward_diff(vals: &[f64], grid: &GridSpec, ax: usize) -> Vec<f64> {
    let mut out = vec![0.0; vals.len()];
    backward_diff_accumulate(vals, grid, ax, 1.0, &mut out);
    out
}

/// Staggered gradient: forward differences onto edges.
pub fn gradient(u: &ScalarField) -> VectorField {
    let comps = (0..u.grid.dim).map(|ax| forward_diff(u, ax)).collect();
    VectorField {
        grid: u.grid,
        comps,
    }
}

/// Exact negative adjoint of [`gradient`]: backward differences.
pub fn divergence(v: &VectorField) -> ScalarField {
    let grid = v.grid;
    let mut out = ScalarField::zeros(grid);
    for ax in 0..grid.dim {
        let d = backward_diff(&v.comps[ax], &grid, ax);
        for (o, val) in out.values.iter_mut().zip(d) {
            *o += val;
        }
    }
    out
}

/// Centered second difference `D^2_{ij} u`. Diagonal uses the tight
/// three-point stencil, mixed terms the four-corner cross stencil; both
/// annihilate affine fields and are exact on quadratics.
pub fn second_diff(u: &ScalarField, i: usize, j: usize) -> ScalarField {
    let grid = u.grid;
    let strides = grid.strides();
    let m = grid.nodes_per_axis();
    let periodic = grid.is_periodic();
    let h2 = grid.spacing() * grid.spacing();
    let mut out = ScalarField::zeros(grid);

    let fetch = |vals: &[f64], mi: &[usize], idx: usize, ax: usize, s: isize| -> f64 {
        let k = mi[ax] as isize + s;
        if k >= 0 && (k as usize) < m {
            vals[(idx as isize + s * strides[ax] as isize) as usize]
        } else if periodic {
            let kw = k.rem_euclid(m as isize) as usize;
            vals[idx + kw * strides[ax] - mi[ax] * strides[ax]]
        } else {
            0.0
        }
    };

    let mut w = NodeWalker::new(&grid);
    let mut idx = 0usize;
    if i == j {
        while w.advance() {
            let up = fetch(&u.values, &w.mi, idx, i, 1);
            let dn = fetch(&u.values, &w.mi, idx, i, -1);
            out.values[idx] = (up - 2.0 * u.values[idx] + dn) / h2;
            idx += 1;
        }
    } else {
        // (u(+i,+j) - u(+i,-j) - u(-i,+j) + u(-i,-j)) / (4 h^2)
        while w.advance() {
            let corner = |si: isize, sj: isize| -> f64 {
                let ki = w.mi[i] as isize + si;
                let kj = w.mi[j] as isize + sj;
                let in_i = ki >= 0 && (ki as usize) < m;
                let in_j = kj >= 0 && (kj as usize) < m;
                if (in_i && in_j) || periodic {
                    let kiw = ki.rem_euclid(m as isize) as usize;
                    let kjw = kj.rem_euclid(m as isize) as usize;
                    u.values[idx + kiw * strides[i] - w.mi[i] * strides[i] + kjw * strides[j]
                        - w.mi[j] * strides[j]]
                } else {
                    0.0
                }
            };
            out.values[idx] =
                (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * h2);
            idx += 1;
        }
    }
    out
}

/// Integration region for norms.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// The whole grid (cell or box).
    All,
    /// Euclidean annulus `inner <= |x - center| < outer`.
    Annulus {
        inner: f64,
        outer: f64,
        center: Vec<f64>,
    },
}

impl Region {
    pub fn annulus(inner: f64, outer: f64, center: Vec<f64>) -> Region {
        Region::Annulus {
            inner,
            outer,
            center,
        }
    }

    fn check_fits(&self, grid: &GridSpec) -> Result<()> {
        if let Region::Annulus {
            inner,
            outer,
            center,
        } = self
        {
            let extent = grid.extent();
            // The annulus must fit inside the domain around its center.
            let worst = center
                .iter()
                .map(|c| c.abs())
                .fold(0.0f64, f64::max);
            let domain_center_offset = match grid.kind {
                GridKind::Cell => 0.5,
                GridKind::Box { .. } => 0.0,
                GridKind::Unit => 0.5,
            };
            if *outer + (worst - domain_center_offset).max(0.0) > extent + 1e-12 {
                return Err(Error::TruncationOverflow {
                    inner: *inner,
                    outer: *outer,
                    center: center.clone(),
                    extent,
                });
            }
        }
        Ok(())
    }
}

/// `L^q` norm of per-node magnitudes over a region, `q = inf` gives the max.
/// Quadrature weight is `h^d` per node; summation order is the fixed node
/// order, so results are reproducible bit-for-bit.
pub fn lq_norm_values(
    vals: &ScalarField,
    q: f64,
    region: &Region,
) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::GridMismatch(format!("q must be >= 1, got {q}")));
    }
    region.check_fits(&vals.grid)?;
    let grid = &vals.grid;
    let hd = grid.spacing().powi(grid.dim as i32);
    let mut acc = 0.0f64;
    let mut max = 0.0f64;
    let mut visit = |v: f64| {
        let a = v.abs();
        if q.is_infinite() {
            max = max.max(a);
        } else if q == 1.0 {
            acc += a;
        } else if q == 2.0 {
            acc += a * a;
        } else {
            acc += a.powf(q);
        }
    };
    match region {
        Region::All => {
            for &v in &vals.values {
                visit(v);
            }
        }
        Region::Annulus {
            inner,
            outer,
            center,
        } => {
            let r0 = inner * inner;
            let r1 = outer * outer;
            let mut w = NodeWalker::new(grid);
            let mut idx = 0usize;
            while w.advance() {
                let mut d2 = 0.0;
                for (ax, &k) in w.mi.iter().enumerate() {
                    let dx = grid.axis_coord(k) - center[ax];
                    d2 += dx * dx;
                }
                if d2 >= r0 && d2 < r1 {
                    visit(vals.values[idx]);
                }
                idx += 1;
            }
        }
    }
    if q.is_infinite() {
        Ok(max)
    } else {
        Ok((acc * hd).powf(1.0 / q))
    }
}

pub fn lq_norm_scalar(f: &ScalarField, q: f64, region: &Region) -> Result<f64> {
    lq_norm_values(f, q, region)
}

pub fn lq_norm_vector(f: &VectorField, q: f64, region: &Region) -> Result<f64> {
    lq_norm_values(&f.magnitude(), q, region)
}

pub fn lq_norm_matrix(f: &MatrixField, q: f64, region: &Region) -> Result<f64> {
    lq_norm_values(&f.magnitude(), q, region)
}

/// `h^d`-weighted inner product of scalar fields.
pub fn inner_scalar(a: &ScalarField, b: &ScalarField) -> f64 {
    let hd = a.grid.spacing().powi(a.grid.dim as i32);
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        * hd
}

/// `h^d`-weighted inner product of vector fields.
pub fn inner_vector(a: &VectorField, b: &VectorField) -> f64 {
    let hd = a.grid.spacing().powi(a.grid.dim as i32);
    let mut acc = 0.0;
    for (ca, cb) in a.comps.iter().zip(&b.comps) {
        acc += ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>();
    }
    acc * hd
}

// ---------------------------------------------------------------------------
// Binary serialization: header (d, n, L, component count) as little-endian
// u32, payload 64-bit floats row-major, components outermost. L = 0 encodes
// a periodic cell grid. Unit-domain grids are not dumped in this format.
// ---------------------------------------------------------------------------

fn header_for(grid: &GridSpec, comps: u32) -> Result<[u32; 4]> {
    let l = match grid.kind {
        GridKind::Cell => 0u32,
        GridKind::Box { half_width } => half_width as u32,
        GridKind::Unit => {
            return Err(Error::Format(
                "unit-domain grids have no binary encoding".into(),
            ))
        }
    };
    Ok([grid.dim as u32, grid.n as u32, l, comps])
}

fn write_payload(w: &mut impl Write, header: [u32; 4], parts: &[&[f64]]) -> Result<()> {
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in parts {
        for v in *p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_scalar_binary(f: &ScalarField, w: &mut impl Write) -> Result<()> {
    write_payload(w, header_for(&f.grid, 1)?, &[&f.values])
}

pub fn write_vector_binary(f: &VectorField, w: &mut impl Write) -> Result<()> {
    let parts: Vec<&[f64]> = f.comps.iter().map(|c| c.as_slice()).collect();
    write_payload(w, header_for(&f.grid, f.grid.dim as u32)?, &parts)
}

pub fn write_matrix_binary(f: &MatrixField, w: &mut impl Write) -> Result<()> {
    let parts: Vec<&[f64]> = f.entries.iter().map(|c| c.as_slice()).collect();
    write_payload(
        w,
        header_for(&f.grid, (f.grid.dim * f.grid.dim) as u32)?,
        &parts,
    )
}

pub struct DecodedField {
    pub grid: GridSpec,
    pub components: Vec<Vec<f64>>,
}

/// Decode the flat binary layout, validating the header against the grid
/// invariants before touching the payload.
pub fn read_field_binary(r: &mut impl Read) -> Result<DecodedField> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("short header: {e}")))?;
    let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
    let (d, n, l, comps) = (word(0), word(1), word(2), word(3));
    let grid = if l == 0 {
        GridSpec::cell(d as usize, n as usize)
    } else {
        GridSpec::boxed(d as usize, n as usize, l as usize)
    }
    .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let valid_comps = [1u32, d, d * d];
    if !valid_comps.contains(&comps) {
        return Err(Error::Format(format!(
            "component count {comps} not in {valid_comps:?}"
        )));
    }
    let node_count = grid.node_count();
    // Cap decode size to keep hostile headers from forcing huge allocations.
    let total = (node_count as u64) * (comps as u64);
    if total > (1u64 << 28) {
        return Err(Error::Format(format!("payload too large: {total} values")));
    }
    let mut components = Vec::with_capacity(comps as usize);
    let mut buf = vec![0u8; node_count * 8];
    for _ in 0..comps {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("short payload: {e}")))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        components.push(vals);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(DecodedField { grid, components })
}

/// CSV dump (one row per node: coordinates then component values);
/// intended for small grids.
pub fn write_field_csv(
    grid: &GridSpec,
    parts: &[&[f64]],
    names: &[&str],
    w: &mut impl Write,
) -> Result<()> {
    let mut header: Vec<String> = (0..grid.dim).map(|ax| format!("x{}", ax + 1)).collect();
    header.extend(names.iter().map(|s| s.to_string()));
    crate::report::write_csv_row(w, &header)?;
    let mut walker = NodeWalker::new(grid);
    let mut idx = 0usize;
    while walker.advance() {
        let mut row: Vec<String> = walker
            .mi
            .iter()
            .map(|&k| format!("{:.17e}", grid.axis_coord(k)))
            .collect();
        for p in parts {
            row.push(format!("{:.17e}", p[idx]));
        }
        crate::report::write_csv_row(w, &row)?;
        idx += 1;
    }
    Ok(())
}
