//! Rectangular domain decomposition with neighbor topology and red-black
//! coloring.

use crate::grid::Grid2;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Non-overlapping cover of the grid by axis-aligned rectangles of
/// near-equal size, arranged in `rows x cols` blocks. Subdomain `d` sits at
/// block row `d / cols`, block column `d % cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdomainLayout {
    rows: usize,
    cols: usize,
    /// Sorted cell indices per subdomain.
    cells: Vec<Vec<usize>>,
    /// Sorted edge-adjacent subdomain ids per subdomain.
    neighbors: Vec<Vec<usize>>,
    /// Checkerboard coloring; neighbors never share a color.
    colors: Vec<u8>,
    cell_to_sub: Vec<usize>,
}

/// Split `n` items into `parts` contiguous chunks whose sizes differ by at
/// most one.
fn chunk_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Partition the grid into `rows x cols` rectangles.
pub fn partition(grid: &Grid2, rows: usize, cols: usize) -> Result<SubdomainLayout> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("partition needs at least 1x1 blocks".into()));
    }
    if rows > grid.ny || cols > grid.nx {
        return Err(Error::Config(format!(
            "partition {rows}x{cols} exceeds grid {}x{}",
            grid.ny, grid.nx
        )));
    }
    let row_bounds = chunk_bounds(grid.ny, rows);
    let col_bounds = chunk_bounds(grid.nx, cols);
    let s = rows * cols;
    let mut cells = vec![Vec::new(); s];
    let mut cell_to_sub = vec![0usize; grid.n_cells()];
    for (r, &(y0, y1)) in row_bounds.iter().enumerate() {
        for (c, &(x0, x1)) in col_bounds.iter().enumerate() {
            let d = r * cols + c;
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let cell = grid.index(ix, iy);
                    cells[d].push(cell);
                    cell_to_sub[cell] = d;
                }
            }
            cells[d].sort_unstable();
        }
    }
    let mut neighbors = vec![Vec::new(); s];
    let mut colors = vec![0u8; s];
    for r in 0..rows {
        for c in 0..cols {
            let d = r * cols + c;
            colors[d] = ((r + c) % 2) as u8;
            if r > 0 {
                neighbors[d].push((r - 1) * cols + c);
            }
            if c > 0 {
                neighbors[d].push(r * cols + (c - 1));
            }
            if c + 1 < cols {
                neighbors[d].push(r * cols + (c + 1));
            }
            if r + 1 < rows {
                neighbors[d].push((r + 1) * cols + c);
            }
            neighbors[d].sort_unstable();
        }
    }
    Ok(SubdomainLayout {
        rows,
        cols,
        cells,
        neighbors,
        colors,
        cell_to_sub,
    })
}

impl SubdomainLayout {
    pub fn n_subdomains(&self) -> usize {
        self.cells.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self, d: usize) -> &[usize] {
        &self.cells[d]
    }

    /// Edge-adjacent subdomains, ascending.
    pub fn neighbors(&self, d: usize) -> &[usize] {
        &self.neighbors[d]
    }

    pub fn color(&self, d: usize) -> u8 {
        self.colors[d]
    }

    pub fn subdomain_of(&self, cell: usize) -> usize {
        self.cell_to_sub[cell]
    }

    /// Subdomain ids grouped by color, ascending within each class.
    pub fn color_classes(&self) -> [Vec<usize>; 2] {
        let mut classes = [Vec::new(), Vec::new()];
        for d in 0..self.n_subdomains() {
            classes[self.colors[d] as usize].push(d);
        }
        classes
    }

    pub fn is_single(&self) -> bool {
        self.n_subdomains() == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_neighbor_counts() {
        let grid = Grid2::new(50, 50, 20.0, 20.0, 10.0);
        let layout = partition(&grid, 3, 3).unwrap();
        assert_eq!(layout.n_subdomains(), 9);
        let counts: Vec<usize> = (0..9).map(|d| layout.neighbors(d).len()).collect();
        // Corners 2, edges 3, center 4.
        assert_eq!(counts, vec![2, 3, 2, 3, 4, 3, 2, 3, 2]);
        for d in 0..9 {
            let n = layout.neighbors(d).len();
            assert!((2..=4).contains(&n));
        }
    }

    #[test]
    fn exact_cover_and_coloring() {
        let grid = Grid2::new(50, 50, 20.0, 20.0, 10.0);
        let layout = partition(&grid, 3, 3).unwrap();
        let mut seen = vec![false; grid.n_cells()];
        for d in 0..layout.n_subdomains() {
            for &c in layout.cells(d) {
                assert!(!seen[c], "cell {c} covered twice");
                seen[c] = true;
                assert_eq!(layout.subdomain_of(c), d);
            }
        }
        assert!(seen.iter().all(|&s| s));
        for d in 0..layout.n_subdomains() {
            for &nb in layout.neighbors(d) {
                assert_ne!(layout.color(d), layout.color(nb));
                assert!(layout.neighbors(nb).contains(&d));
            }
        }
    }

    #[test]
    fn single_subdomain_has_no_neighbors() {
        let grid = Grid2::new(10, 7, 20.0, 20.0, 10.0);
        let layout = partition(&grid, 1, 1).unwrap();
        assert!(layout.is_single());
        assert!(layout.neighbors(0).is_empty());
        assert_eq!(layout.cells(0).len(), 70);
    }

    #[test]
    fn two_by_one_pairs_each_other() {
        let grid = Grid2::new(10, 8, 20.0, 20.0, 10.0);
        let layout = partition(&grid, 2, 1).unwrap();
        assert_eq!(layout.n_subdomains(), 2);
        assert_eq!(layout.neighbors(0), &[1]);
        assert_eq!(layout.neighbors(1), &[0]);
        assert_eq!(layout.cells(0).len(), 40);
    }

    #[test]
    fn near_equal_rectangles_on_uneven_split() {
        let grid = Grid2::new(50, 50, 20.0, 20.0, 10.0);
        let layout = partition(&grid, 3, 3).unwrap();
        let sizes: Vec<usize> = (0..9).map(|d| layout.cells(d).len()).collect();
        let min = sizes.iter().min().unwrap();
        let max = sizes.iter().max().unwrap();
        assert!(max - min <= 50 + 17, "sizes too uneven: {sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 2500);
    }

    #[test]
    fn invalid_partitions_rejected() {
        let grid = Grid2::new(4, 4, 1.0, 1.0, 1.0);
        assert!(partition(&grid, 0, 1).is_err());
        assert!(partition(&grid, 5, 1).is_err());
        assert!(partition(&grid, 1, 5).is_err());
    }
}
