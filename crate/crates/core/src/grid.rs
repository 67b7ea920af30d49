//! Structured 2D grid geometry shared by the simulator and the geostatistics.

use serde::{Deserialize, Serialize};

/// Regular 2D grid of `nx * ny` cells with uniform spacing, row-major
/// indexing (`cell = iy * nx + ix`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    /// Cell size in x (m).
    pub dx: f64,
    /// Cell size in y (m).
    pub dy: f64,
    /// Cell thickness (m).
    pub dz: f64,
}

impl Grid2 {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, dz: f64) -> Self {
        Self { nx, ny, dx, dy, dz }
    }

    /// Total number of cells.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        iy * self.nx + ix
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    /// Cell-center coordinates in meters.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (ix, iy) = self.coords(cell);
        ((ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dy)
    }

    /// Domain extent (m).
    pub fn length_x(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn length_y(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    /// Bulk volume of one cell (m^3).
    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }
}
