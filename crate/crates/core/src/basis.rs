//! 2D cosine and Chebyshev series: basis functions, sample grids and design
//! matrices.
//!
//! A filter with `n` harmonics is
//!
//! ```text
//! w(x, y) = sum_{i0 < n} sum_{i1 < n} a[i0 * n + i1] * phi_i0(x) * phi_i1(y)
//! ```
//!
//! with `phi_i(x) = cos(i x)` on `[0, pi]` or `phi_i(x) = T_i(x)` on `[-1, 1]`.
//! The grids are chosen so that the Chebyshev nodes are exactly `cos` of the
//! cosine nodes; since `T_i(cos t) = cos(i t)` both bases then produce the same
//! design matrix.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Cosine,
    Chebyshev,
}

impl BasisKind {
    pub const ALL: [BasisKind; 2] = [BasisKind::Cosine, BasisKind::Chebyshev];

    /// Tag byte used by the `FKC1`/`FKQ1` formats.
    pub fn code(self) -> u8 {
        match self {
            BasisKind::Cosine => 0,
            BasisKind::Chebyshev => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(BasisKind::Cosine),
            1 => Ok(BasisKind::Chebyshev),
            c => Err(Error::format(format!("unknown basis kind byte {c}"))),
        }
    }

    /// One-dimensional basis function `phi_i(x)`.
    #[inline]
    pub fn phi(self, i: usize, x: f64) -> f64 {
        match self {
            BasisKind::Cosine => (i as f64 * x).cos(),
            BasisKind::Chebyshev => chebyshev_t(i, x),
        }
    }
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisKind::Cosine => "cos",
            BasisKind::Chebyshev => "cheb",
        })
    }
}

impl FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cos" | "cosine" => Ok(BasisKind::Cosine),
            "cheb" | "chebyshev" => Ok(BasisKind::Chebyshev),
            _ => Err(Error::argument(format!("unknown basis {s:?}, expected cos or cheb"))),
        }
    }
}

/// Chebyshev polynomial of the first kind, by the three-term recurrence.
pub fn chebyshev_t(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for _ in 2..=n {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// The `K x K` points at which a kernel function is sampled. Point `(a, b)`
/// is `(nodes[a], nodes[b])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    kind: BasisKind,
    nodes: Vec<f64>,
}

impl SampleGrid {
    pub fn new(kind: BasisKind, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::argument("grid side must be at least 1"));
        }
        let nodes = (0..k)
            .map(|a| {
                let theta = (a as f64 + 0.5) * PI / k as f64;
                match kind {
                    BasisKind::Cosine => theta,
                    BasisKind::Chebyshev => theta.cos(),
                }
            })
            .collect();
        Ok(SampleGrid { kind, nodes })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn point(&self, a: usize, b: usize) -> (f64, f64) {
        (self.nodes[a], self.nodes[b])
    }

    /// All points in row-major `(a, b)` order.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes
            .iter()
            .flat_map(move |&x| self.nodes.iter().map(move |&y| (x, y)))
    }
}

pub fn make_grid(kind: BasisKind, k: usize) -> Result<SampleGrid> {
    SampleGrid::new(kind, k)
}

pub(crate) fn check_harmonics(k: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::argument("harmonic count must be at least 1"));
    }
    if n > k {
        return Err(Error::argument(format!("harmonic count {n} exceeds kernel side {k}")));
    }
    Ok(())
}

/// `K^2 x N^2` matrix of basis values at grid points, row-major.
/// Row `a * K + b` is grid point `(a, b)`; column `i0 * N + i1` is harmonic pair
/// `(i0, i1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(kind: BasisKind, k: usize, n: usize) -> Result<Self> {
        check_harmonics(k, n)?;
        let grid = SampleGrid::new(kind, k)?;
        // Separable: tabulate phi_i(node_a) once.
        let table: Vec<f64> = grid
            .nodes()
            .iter()
            .flat_map(|&x| (0..n).map(move |i| kind.phi(i, x)))
            .collect();
        let (rows, cols) = (k * k, n * n);
        let mut entries = Vec::with_capacity(rows * cols);
        for a in 0..k {
            for b in 0..k {
                for i0 in 0..n {
                    for i1 in 0..n {
                        entries.push(table[a * n + i0] * table[b * n + i1]);
                    }
                }
            }
        }
        Ok(DesignMatrix { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }

    /// `Phi * coeffs`: the series evaluated at every grid point.
    pub fn apply(&self, coeffs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.cols);
        self.entries
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(coeffs).map(|(p, c)| p * c).sum())
            .collect()
    }

    /// `Phi^T * v` for a vector over grid points.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &vr) in self.entries.chunks_exact(self.cols).zip(v) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p * vr;
            }
        }
        out
    }

    /// The Gram matrix `Phi^T Phi`, `N^2 x N^2` row-major.
    pub fn gram(&self) -> Vec<f64> {
        let c = self.cols;
        let mut g = vec![0.0; c * c];
        for row in self.entries.chunks_exact(c) {
            for p in 0..c {
                for q in 0..c {
                    g[p * c + q] += row[p] * row[q];
                }
            }
        }
        g
    }
}

pub fn design_matrix(kind: BasisKind, k: usize, n: usize) -> Result<DesignMatrix> {
    DesignMatrix::new(kind, k, n)
}

/// Evaluates one filter's series at `point`. `coeffs.len()` must be a square
/// `n^2`.
pub fn eval_series(kind: BasisKind, coeffs: &[f64], point: (f64, f64)) -> f64 {
    let n = harmonics_of(coeffs.len());
    let (x, y) = point;
    let py: Vec<f64> = (0..n).map(|i| kind.phi(i, y)).collect();
    coeffs
        .chunks_exact(n.max(1))
        .enumerate()
        .map(|(i0, row)| {
            let inner: f64 = row.iter().zip(&py).map(|(a, p)| a * p).sum();
            kind.phi(i0, x) * inner
        })
        .sum()
}

pub(crate) fn harmonics_of(len: usize) -> usize {
    let n = (len as f64).sqrt().round() as usize;
    assert_eq!(n * n, len, "coefficient slice of length {len} is not square");
    n
}
