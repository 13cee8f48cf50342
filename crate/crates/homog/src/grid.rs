use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a uniform grid. All grids share the microscale spacing
/// `h = 1/n`; what differs is the extent and the boundary treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// Periodic unit cell `[0,1)^d`, `n` nodes per axis at `k*h`.
    Cell,
    /// Truncated box `[-L, L]^d` with homogeneous Dirichlet boundary,
    /// `2*L*n` cell-centered nodes per axis at `-L + (k+1/2)*h`.
    Box { half_width: usize },
    /// Unit domain `[0,1]^d` with homogeneous Dirichlet boundary,
    /// `n` cell-centered nodes per axis at `(k+1/2)*h`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    /// Cells per period (Cell/Box) or per unit side (Unit); `h = 1/n`.
    pub n: usize,
    pub kind: GridKind,
}

impl GridSpec {
    pub fn cell(dim: usize, n: usize) -> Result<Self> {
        let g = GridSpec {
            dim,
            n,
            kind: GridKind::Cell,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn boxed(dim: usize, n: usize, half_width: usize) -> Result<Self> {
        let g = GridSpec {
            dim,
            n,
            kind: GridKind::Box { half_width },
        };
        g.validate()?;
        Ok(g)
    }

    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        let g = GridSpec {
            dim,
            n,
            kind: GridKind::Unit,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        const MAX_AXIS: usize = 1 << 14;
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::GridMismatch(format!(
                "dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        // cap per-axis sizes so index arithmetic cannot overflow
        let per_axis = match self.kind {
            GridKind::Cell | GridKind::Unit => self.n,
            GridKind::Box { half_width } => half_width
                .checked_mul(2)
                .and_then(|t| t.checked_mul(self.n))
                .unwrap_or(usize::MAX),
        };
        if per_axis > MAX_AXIS {
            return Err(Error::GridMismatch(format!(
                "{per_axis} nodes per axis exceeds the supported {MAX_AXIS}"
            )));
        }
        match self.kind {
            GridKind::Cell | GridKind::Box { .. } => {
                if self.n < 8 {
                    return Err(Error::GridMismatch(format!(
                        "cells per period must be >= 8, got {}",
                        self.n
                    )));
                }
            }
            GridKind::Unit => {
                if self.n < 8 {
                    return Err(Error::GridMismatch(format!(
                        "unit-domain subdivisions must be >= 8, got {}",
                        self.n
                    )));
                }
            }
        }
        if let GridKind::Box { half_width } = self.kind {
            if half_width < 1 {
                return Err(Error::GridMismatch(
                    "box half-width must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn nodes_per_axis(&self) -> usize {
        match self.kind {
            GridKind::Cell => self.n,
            GridKind::Box { half_width } => 2 * half_width * self.n,
            GridKind::Unit => self.n,
        }
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    #[inline]
    pub fn is_periodic(&self) -> bool {
        matches!(self.kind, GridKind::Cell)
    }

    /// Half side length of the domain, measured from its center.
    pub fn extent(&self) -> f64 {
        match self.kind {
            GridKind::Cell => 0.5,
            GridKind::Box { half_width } => half_width as f64,
            GridKind::Unit => 0.5,
        }
    }

    /// Coordinate of node index `k` along one axis. Dirichlet grids are
    /// node-centered: index 0 sits on the lower boundary (pinned to zero)
    /// and the upper boundary is the ghost one step past the last node,
    /// so the zero condition holds exactly on both faces.
    #[inline]
    pub fn axis_coord(&self, k: usize) -> f64 {
        let h = self.spacing();
        match self.kind {
            GridKind::Cell => k as f64 * h,
            GridKind::Box { half_width } => -(half_width as f64) + k as f64 * h,
            GridKind::Unit => k as f64 * h,
        }
    }

    /// True if the multi-index lies in the pinned Dirichlet boundary layer.
    #[inline]
    pub fn on_pinned_layer(&self, mi: &[usize]) -> bool {
        !self.is_periodic() && mi.iter().any(|&k| k == 0)
    }

    /// Zero the pinned boundary layer of a node-indexed array (no-op on
    /// periodic grids).
    pub fn mask_boundary(&self, vals: &mut [f64]) {
        if self.is_periodic() {
            return;
        }
        let m = self.nodes_per_axis();
        let strides = self.strides();
        for ax in 0..self.dim {
            // all nodes with mi[ax] == 0
            let stride = strides[ax];
            let block = stride * m;
            let mut base = 0usize;
            while base < vals.len() {
                for off in 0..stride {
                    vals[base + off] = 0.0;
                }
                base += block;
            }
        }
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let m = self.nodes_per_axis();
        let mut s = vec![1usize; self.dim];
        for ax in (0..self.dim.saturating_sub(1)).rev() {
            s[ax] = s[ax + 1] * m;
        }
        s
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let m = self.nodes_per_axis();
        let mut rem = idx;
        let mut out = vec![0usize; self.dim];
        for ax in (0..self.dim).rev() {
            out[ax] = rem % m;
            rem /= m;
        }
        out
    }

    pub fn flat_index(&self, mi: &[usize]) -> usize {
        let m = self.nodes_per_axis();
        let mut idx = 0usize;
        for &k in mi {
            idx = idx * m + k;
        }
        idx
    }

    pub fn coord(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .map(|&k| self.axis_coord(k))
            .collect()
    }

    /// Squared Euclidean distance from node `idx` to `center`.
    pub fn dist2(&self, idx: usize, center: &[f64]) -> f64 {
        let m = self.nodes_per_axis();
        let mut rem = idx;
        let mut acc = 0.0;
        for ax in (0..self.dim).rev() {
            let k = rem % m;
            rem /= m;
            let dx = self.axis_coord(k) - center[ax];
            acc += dx * dx;
        }
        acc
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self == other
    }

    pub fn require_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// Walks all flat indices while maintaining the multi-index, avoiding a
/// div/mod per node in hot loops.
pub struct NodeWalker {
    pub mi: Vec<usize>,
    m: usize,
    dim: usize,
    first: bool,
}

impl NodeWalker {
    pub fn new(grid: &GridSpec) -> Self {
        NodeWalker {
            mi: vec![0; grid.dim],
            m: grid.nodes_per_axis(),
            dim: grid.dim,
            first: true,
        }
    }

    /// Advance to the next node; returns false once exhausted.
    pub fn advance(&mut self) -> bool {
        if self.first {
            self.first = false;
            return true;
        }
        for ax in (0..self.dim).rev() {
            self.mi[ax] += 1;
            if self.mi[ax] < self.m {
                return true;
            }
            self.mi[ax] = 0;
        }
        false
    }
}
