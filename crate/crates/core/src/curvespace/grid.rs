use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timescale::TimeFactor;

/// Gauss–Legendre abscissae on `[0, 1]`.
const GAUSS2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// One cell `[a, b]` with its weighted measures. Cells never straddle `ξ = 0`.
///
/// Curves are interpolated linearly in original time inside a cell, i.e. in
/// `s = (g(ξ) − g(a)) / (g(b) − g(a))`, so `q' = (q_b − q_a) / (r · int_rinv)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub a: f64,
    pub b: f64,
    pub int_r: f64,
    /// `g(b) − g(a)`, the cell length in original time.
    pub int_rinv: f64,
    /// `ξ` at the time midpoint `s = ½`.
    pub xi_tmid: f64,
    pub r_tmid: f64,
    pub sigma: f64,
    /// `(s, w)` with `s ∈ [0, 1]` the interpolation parameter and `w` the
    /// weight of `∫ · r dξ = ∫ · r² dt`; the two weights sum to `int_r`.
    pub gauss: [(f64, f64); 2],
}

impl Cell {
    fn new(tf: &TimeFactor, a: f64, b: f64) -> Self {
        let mid = 0.5 * (a + b);
        let int_r = tf.int_r(a, b);
        let int_rinv = tf.int_rinv(a, b);
        let ga = tf.g(a);
        let at = |s: f64| tf.g_inv(ga + s * int_rinv).clamp(a, b);
        let raw = GAUSS2.map(|s| {
            let r = tf.r(at(s));
            0.5 * int_rinv * r * r
        });
        let total = raw[0] + raw[1];
        let scale = if total > 0.0 { int_r / total } else { 0.0 };
        let gauss = [(GAUSS2[0], raw[0] * scale), (GAUSS2[1], raw[1] * scale)];
        let xi_tmid = at(0.5);
        Self { a, b, int_r, int_rinv, xi_tmid, r_tmid: tf.r(xi_tmid), sigma: tf.sigma(mid), gauss }
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// `∫ r N_i N_j dξ` for the two hat functions.
    pub fn l2_block(&self) -> [[f64; 2]; 2] {
        let mut m = [[0.0; 2]; 2];
        for (s, w) in self.gauss {
            let n = [1.0 - s, s];
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] += w * n[i] * n[j];
                }
            }
        }
        m
    }

    /// `+1` right of the origin, `−1` left of it.
    pub fn side(&self) -> f64 {
        if self.mid() > 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Graded partition of `Ω_k = [−ξ_k, ξ_k]` containing the origin.
///
/// Nodes equidistribute the measure `dW = (r^{-1} + (r + 1)/2) dξ` on each side,
/// which clusters nodes at the origin where `r^{-1}` is singular and keeps the
/// cells small where `r` is large.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    xi_k: f64,
    nodes: Vec<f64>,
    cells: Vec<Cell>,
    zero: usize,
    dw_minus: f64,
    dw_plus: f64,
}

pub const MIN_CELLS: usize = 16;

/// Signed `W(ξ) = ∫_0^ξ (r^{-1} + (r + 1)/2)`.
fn w_measure(tf: &TimeFactor, xi: f64) -> f64 {
    tf.int_rinv(0.0, xi) + 0.5 * (tf.int_r(0.0, xi) + xi)
}

/// Inverse of `W` on one side by bisection.
fn w_inverse(tf: &TimeFactor, w: f64, hi: f64) -> f64 {
    let sign = w.signum();
    let target = w.abs();
    let (mut lo, mut hi) = (0.0_f64, hi.abs());
    while w_measure(tf, sign * hi).abs() < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if w_measure(tf, sign * mid).abs() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sign * 0.5 * (lo + hi)
}

/// Nodes strictly between `start` and `end` (same side, `|end| > |start|`)
/// stepping `dw` in `W`; a last piece below `0.3 dw` is merged.
fn side_nodes(tf: &TimeFactor, start: f64, end: f64, dw: f64) -> Vec<f64> {
    let sign = if end > 0.0 { 1.0 } else { -1.0 };
    let w_end = w_measure(tf, end).abs();
    let mut w = w_measure(tf, start).abs();
    let mut out = Vec::new();
    loop {
        w += dw;
        if w >= w_end - 0.3 * dw {
            break;
        }
        out.push(w_inverse(tf, sign * w, end));
    }
    out
}

impl WindowGrid {
    /// Builds a grid with `n_cells` cells split evenly between the sides.
    pub fn build(tf: &TimeFactor, xi_k: f64, n_cells: usize) -> Result<Self> {
        if !(xi_k > 0.0) || !xi_k.is_finite() {
            return Err(Error::InvalidArgument(format!("window half-width {xi_k} must be positive")));
        }
        if n_cells < MIN_CELLS {
            return Err(Error::InvalidArgument(format!(
                "{n_cells} cells requested, at least {MIN_CELLS} needed for grading"
            )));
        }
        let n_minus = n_cells / 2;
        let n_plus = n_cells - n_minus;
        let dw_minus = w_measure(tf, -xi_k).abs() / n_minus as f64;
        let dw_plus = w_measure(tf, xi_k).abs() / n_plus as f64;
        let mut left: Vec<f64> =
            (1..n_minus).map(|j| w_inverse(tf, -(j as f64) * dw_minus, xi_k)).collect();
        left.reverse();
        let right: Vec<f64> = (1..n_plus).map(|j| w_inverse(tf, j as f64 * dw_plus, xi_k)).collect();
        let mut nodes = Vec::with_capacity(n_cells + 1);
        nodes.push(-xi_k);
        nodes.extend(left);
        nodes.push(0.0);
        nodes.extend(right);
        nodes.push(xi_k);
        Self::from_nodes(tf, nodes, dw_minus, dw_plus)
    }

    /// Builds a grid whose cells have `W`-measure close to `dw`.
    pub fn with_spacing(tf: &TimeFactor, xi_k: f64, dw: f64) -> Result<Self> {
        if !(dw > 0.0) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        let total = w_measure(tf, xi_k).abs() + w_measure(tf, -xi_k).abs();
        let mut n = (total / dw).ceil() as usize;
        n = n.max(MIN_CELLS);
        n += n % 2;
        Self::build(tf, xi_k, n)
    }

    /// Grid from explicit nodes (e.g. restored from a checkpoint).
    pub fn from_nodes(tf: &TimeFactor, nodes: Vec<f64>, dw_minus: f64, dw_plus: f64) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidArgument("grid needs at least two cells".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("grid nodes must increase strictly".into()));
        }
        let xi_k = nodes[nodes.len() - 1];
        if nodes[0] != -xi_k {
            return Err(Error::InvalidArgument("grid must be symmetric about the origin".into()));
        }
        let zero = nodes
            .iter()
            .position(|v| *v == 0.0)
            .ok_or_else(|| Error::InvalidArgument("grid must contain the origin".into()))?;
        let cells = nodes.windows(2).map(|w| Cell::new(tf, w[0], w[1])).collect();
        Ok(Self { xi_k, nodes, cells, zero, dw_minus, dw_plus })
    }

    /// Nested enlargement to `[−new_xi, new_xi]`: old nodes are kept and new
    /// cells of `W`-measure close to the old spacing are appended on both sides.
    pub fn extend(&self, tf: &TimeFactor, new_xi: f64) -> Result<Self> {
        if new_xi < self.xi_k {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink window from {} to {new_xi}",
                self.xi_k
            )));
        }
        if new_xi == self.xi_k {
            return Ok(self.clone());
        }
        let mut left = side_nodes(tf, -self.xi_k, -new_xi, self.dw_minus);
        left.reverse();
        let right = side_nodes(tf, self.xi_k, new_xi, self.dw_plus);
        let mut nodes = Vec::with_capacity(self.nodes.len() + left.len() + right.len() + 2);
        nodes.push(-new_xi);
        nodes.extend(left);
        nodes.extend_from_slice(&self.nodes);
        nodes.extend(right);
        nodes.push(new_xi);
        Self::from_nodes(tf, nodes, self.dw_minus, self.dw_plus)
    }

    pub fn xi_k(&self) -> f64 {
        self.xi_k
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Index of the node at the origin.
    pub fn zero_index(&self) -> usize {
        self.zero
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.dw_minus, self.dw_plus)
    }

    /// Index of the node located exactly at `xi`, if any.
    pub fn index_of(&self, xi: f64) -> Option<usize> {
        let i = self.nodes.partition_point(|v| *v < xi);
        (i < self.nodes.len() && self.nodes[i] == xi).then_some(i)
    }

    /// `∫ r^{-1}` over the whole window.
    pub fn eta(&self) -> f64 {
        self.cells.iter().map(|c| c.int_rinv).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_weight_gives_uniform_grid() {
        let g = WindowGrid::build(&TimeFactor::unit(), 1.0, 20).unwrap();
        for c in g.cells() {
            assert!((c.width() - 0.1).abs() < 1e-12);
        }
        assert_eq!(g.nodes()[g.zero_index()], 0.0);
    }

    #[test]
    fn power_grid_equidistributes_rinv_within_four() {
        let tf = TimeFactor::power(2).unwrap();
        for n in [16, 40, 200] {
            let g = WindowGrid::build(&tf, 1.0, n).unwrap();
            let exact = |a: f64, b: f64| {
                let s = |x: f64| x.signum() * (2.0 * x.abs()).sqrt();
                s(b) - s(a)
            };
            let v: Vec<f64> = g.cells().iter().map(|c| exact(c.a, c.b)).collect();
            let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), x| (l.min(*x), h.max(*x)));
            assert!(hi / lo <= 4.0, "n = {n}: ratio {}", hi / lo);
            for (c, e) in g.cells().iter().zip(&v) {
                assert!((c.int_rinv - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn origin_always_a_node() {
        for n in [16, 17, 33] {
            let g = WindowGrid::build(&TimeFactor::power(1).unwrap(), 2.5, n).unwrap();
            assert_eq!(g.n_cells(), n);
            assert!(g.index_of(0.0).is_some());
        }
        assert!(WindowGrid::build(&TimeFactor::unit(), 1.0, 15).is_err());
    }

    #[test]
    fn extension_is_nested() {
        let tf = TimeFactor::power(1).unwrap();
        let g = WindowGrid::build(&tf, 1.0, 32).unwrap();
        let h = g.extend(&tf, 3.7).unwrap();
        assert_eq!(h.xi_k(), 3.7);
        for x in g.nodes() {
            assert!(h.index_of(*x).is_some());
        }
        let (_, dw) = g.spacing();
        let w = |x: f64| w_measure(&tf, x);
        for c in h.cells().iter().filter(|c| c.a >= 1.0) {
            let m = w(c.b) - w(c.a);
            assert!(m > 0.29 * dw && m < 1.31 * dw, "{m} vs {dw}");
        }
        assert!(g.extend(&tf, 0.5).is_err());
        assert_eq!(g.extend(&tf, 1.0).unwrap(), g);
    }

    #[test]
    fn gauss_weights_sum_to_int_r() {
        let tf = TimeFactor::power(3).unwrap();
        let g = WindowGrid::build(&tf, 2.0, 64).unwrap();
        for c in g.cells() {
            let s = c.gauss[0].1 + c.gauss[1].1;
            assert!((s - c.int_r).abs() <= 1e-14 * c.int_r.max(1e-300));
            assert!(c.a >= 0.0 || c.b <= 0.0);
        }
    }
}
