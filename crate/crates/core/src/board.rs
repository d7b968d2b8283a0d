//! Planar calibration board.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

/// A `rows × cols` grid of points on the world plane `Z = 0`.
///
/// Point `r·cols + c` sits at `(r·w, c·h, 0)` for cell size `(w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub rows: usize,
    pub cols: usize,
    /// Cell size `(w, h)` in the length unit of the calibration.
    pub cell: (f64, f64),
}

impl Board {
    pub fn new(rows: usize, cols: usize, cell: (f64, f64)) -> Self {
        Self { rows, cols, cell }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, id: usize) -> Option<Point3<f64>> {
        (id < self.len()).then(|| {
            let (r, c) = (id / self.cols, id % self.cols);
            Point3::new(r as f64 * self.cell.0, c as f64 * self.cell.1, 0.0)
        })
    }

    pub fn points(&self) -> Vec<Point3<f64>> {
        (0..self.len()).filter_map(|id| self.point(id)).collect()
    }

    /// The same board with the cell size multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { cell: (self.cell.0 * factor, self.cell.1 * factor), ..*self }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            (self.rows.saturating_sub(1)) as f64 * self.cell.0 / 2.0,
            (self.cols.saturating_sub(1)) as f64 * self.cell.1 / 2.0,
            0.0,
        )
    }
}
