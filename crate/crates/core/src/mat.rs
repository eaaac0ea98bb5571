//! Minimal dense row-major matrix used by the kernel and MMD modules.

use std::fmt::Write as _;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest absolute asymmetry `|m_ij - m_ji|` over all pairs.
    pub fn max_asymmetry(&self) -> f64 {
        debug_assert!(self.is_square());
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }

    /// Force exact symmetry by copying the upper triangle onto the lower.
    pub fn symmetrize_upper(&mut self) {
        debug_assert!(self.is_square());
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = self.at(i, j);
                self.set(j, i, v);
            }
        }
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let lhs = self.at(i, k);
                if lhs == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += lhs * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.at(i, j));
            }
        }
        t
    }

    /// Render as CSV, one row per line. `f64` Display prints the shortest
    /// decimal that round-trips, so parsing the output recovers every entry
    /// bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.at(i, j));
            }
            out.push('\n');
        }
        out
    }

    /// Parse CSV produced by [`Mat::to_csv`]. Returns `None` on ragged rows
    /// or unparseable fields.
    pub fn from_csv(text: &str) -> Option<Mat> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let row: Option<Vec<f64>> =
                line.split(',').map(|f| f.trim().parse::<f64>().ok()).collect();
            rows.push(row?);
        }
        if rows.is_empty() {
            return Some(Mat::zeros(0, 0));
        }
        let c = rows[0].len();
        if rows.iter().any(|r| r.len() != c) {
            return None;
        }
        Some(Mat::from_rows(&rows))
    }
}
