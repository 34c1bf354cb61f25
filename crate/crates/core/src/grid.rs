//! Rectangular lattice geometry.
//!
//! Nodes are addressed either by their lattice coordinates `(i, j)` or by a
//! row-major linear index `j * nx + i`. Spacing is carried in physical units
//! so that coarser levels of a hierarchy discretize the same continuous domain.

use crate::error::{Error, Result};

/// Boundary treatment for stencil legs that leave the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    /// Values outside the lattice are fixed at zero; crossing legs are dropped.
    Dirichlet,
    /// Lattice wraps around in both directions.
    Periodic,
}

impl Boundary {
    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::Dirichlet => "dirichlet",
            Boundary::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dirichlet" => Ok(Boundary::Dirichlet),
            "periodic" => Ok(Boundary::Periodic),
            other => Err(Error::Parameter(format!("unknown boundary '{other}'"))),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry of a 2D lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    boundary: Boundary,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, boundary: Boundary) -> Result<Self> {
        if nx < 1 || ny < 1 {
            return Err(Error::Grid(format!("dimensions must be positive, got {nx}x{ny}")));
        }
        if nx.checked_mul(ny).is_none() {
            return Err(Error::Grid(format!("{nx}x{ny} overflows the node count")));
        }
        if !(dx.is_finite() && dx > 0.0 && dy.is_finite() && dy > 0.0) {
            return Err(Error::Grid(format!("spacing must be positive and finite, got dx={dx}, dy={dy}")));
        }
        Ok(Self { nx, ny, dx, dy, boundary })
    }

    /// Grid covering the unit square with cell-centred nodes, so `dx = 1/nx`.
    pub fn unit_square(nx: usize, ny: usize, boundary: Boundary) -> Result<Self> {
        if nx < 1 || ny < 1 {
            return Err(Error::Grid(format!("dimensions must be positive, got {nx}x{ny}")));
        }
        Self::new(nx, ny, 1.0 / nx as f64, 1.0 / ny as f64, boundary)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn linear_index(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.nx || j >= self.ny {
            return Err(Error::Index { i, j, nx: self.nx, ny: self.ny });
        }
        Ok(j * self.nx + i)
    }

    /// Inverse of [`linear_index`](Self::linear_index).
    pub fn coords(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.len());
        (index % self.nx, index / self.nx)
    }

    /// Node reached from `(i, j)` by the offset `(di, dj)`, honouring the boundary.
    pub fn neighbor(&self, i: usize, j: usize, di: isize, dj: isize) -> Option<usize> {
        let x = shift(i, di, self.nx, self.boundary)?;
        let y = shift(j, dj, self.ny, self.boundary)?;
        Some(y * self.nx + x)
    }

    /// Halve the resolution, doubling the spacing. Odd sizes round up.
    pub fn coarsen(&self) -> Result<Self> {
        let nx = self.nx.div_ceil(2);
        let ny = self.ny.div_ceil(2);
        if nx < 2 || ny < 2 {
            return Err(Error::Grid(format!("{}x{} grid is too small to coarsen", self.nx, self.ny)));
        }
        Self::new(nx, ny, 2.0 * self.dx, 2.0 * self.dy, self.boundary)
    }

    /// Same lattice geometry (counts and boundary), ignoring spacing.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.boundary == other.boundary
    }
}

fn shift(pos: usize, delta: isize, len: usize, boundary: Boundary) -> Option<usize> {
    let target = pos as isize + delta;
    match boundary {
        Boundary::Dirichlet => (0..len as isize).contains(&target).then_some(target as usize),
        Boundary::Periodic => Some(target.rem_euclid(len as isize) as usize),
    }
}
