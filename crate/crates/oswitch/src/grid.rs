//! Spatial mesh and monotone discretization of the generator.
//!
//! The whole-space problem is localized to a box and meshed uniformly.
//! The generator L = ½ Tr(σσᵀ D²) + b·D is discretized so that the stencil
//! is monotone: all off-diagonal coefficients non-negative, row sums zero.
//! Drift terms are upwinded on the sign of b; second-order terms use
//! central differences; the 2D cross-derivative is absorbed by a
//! direction-decomposition catalog (the classical 7-point arrangement
//! first, wider diagonal stencils as fallback). A node where no catalog
//! entry yields non-negative coefficients aborts assembly — the scheme is
//! never silently non-monotone. For any r > 0 the system matrix
//! (rI - L_h) is then strictly diagonally dominant with positive diagonal,
//! an M-matrix, hence invertible and order-preserving.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::BandMatrix;
use crate::model::{DiffusionSpec, HypothesisCheck, Witness};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("bad bounds on axis {axis}: [{lo}, {hi}]")]
    BadBounds { axis: usize, lo: f64, hi: f64 },
    #[error("unsupported state dimension {dim} (grids are built for k <= 2)")]
    DimensionUnsupported { dim: usize },
    #[error("axis {axis} needs at least 4 cells, got {cells}")]
    TooFewCells { axis: usize, cells: usize },
    #[error("no monotone stencil for node {node} at {point:?}: {detail}")]
    MonotonicityUnachievable {
        node: usize,
        point: Vec<f64>,
        detail: String,
    },
    #[error("monotonicity check failed at node {node}: {detail}")]
    NotMonotone { node: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How boundary rows are closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Boundary nodes become identity rows; values are pinned by the
    /// caller (the solver supplies envelope data from a padded grid).
    DirichletEnvelope,
    /// Out-of-grid stencil references are folded back by mirror
    /// reflection, a zero-flux closure.
    NeumannZero,
}

/// Uniform tensor mesh over a box, k in {1, 2}.
#[derive(Debug, Clone)]
pub struct Grid {
    bounds: Vec<(f64, f64)>,
    cells: Vec<usize>,
    spacing: Vec<f64>,
    policy: BoundaryPolicy,
}

/// Builds a grid; spacing is (hi - lo)/cells per axis.
pub fn build_grid(
    bounds: &[(f64, f64)],
    cells: &[usize],
    policy: BoundaryPolicy,
) -> Result<Grid, GridError> {
    let k = bounds.len();
    if k == 0 || k > 2 || cells.len() != k {
        return Err(GridError::DimensionUnsupported { dim: k });
    }
    let mut spacing = Vec::with_capacity(k);
    for axis in 0..k {
        let (lo, hi) = bounds[axis];
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(GridError::BadBounds { axis, lo, hi });
        }
        if cells[axis] < 4 {
            return Err(GridError::TooFewCells {
                axis,
                cells: cells[axis],
            });
        }
        spacing.push((hi - lo) / cells[axis] as f64);
    }
    Ok(Grid {
        bounds: bounds.to_vec(),
        cells: cells.to_vec(),
        spacing,
        policy,
    })
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn policy(&self) -> BoundaryPolicy {
        self.policy
    }

    /// Points per axis (cells + 1).
    pub fn shape(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.shape().iter().product()
    }

    /// Nodes are ordered lexicographically by multi-index (last axis
    /// fastest): index = i0 * (n1 + 1) + i1 in 2D.
    pub fn index_of(&self, multi: &[usize]) -> usize {
        match self.dim() {
            1 => multi[0],
            _ => multi[0] * (self.cells[1] + 1) + multi[1],
        }
    }

    pub fn multi_of(&self, index: usize) -> Vec<usize> {
        match self.dim() {
            1 => vec![index],
            _ => {
                let n1 = self.cells[1] + 1;
                vec![index / n1, index % n1]
            }
        }
    }

    pub fn node_coords(&self, index: usize) -> Vec<f64> {
        self.multi_of(index)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.bounds[axis].0 + i as f64 * self.spacing[axis])
            .collect()
    }

    pub fn is_boundary(&self, index: usize) -> bool {
        self.multi_of(index)
            .iter()
            .enumerate()
            .any(|(axis, &i)| i == 0 || i == self.cells[axis])
    }

    /// Nearest node to x; the flag reports whether x had to be clamped
    /// into the box.
    pub fn nearest_node(&self, x: &[f64]) -> (usize, bool) {
        let mut clamped = false;
        let multi: Vec<usize> = (0..self.dim())
            .map(|axis| {
                let (lo, hi) = self.bounds[axis];
                let mut v = x[axis];
                if v < lo {
                    v = lo;
                    clamped = true;
                } else if v > hi {
                    v = hi;
                    clamped = true;
                }
                let i = ((v - lo) / self.spacing[axis]).round() as usize;
                i.min(self.cells[axis])
            })
            .collect();
        (self.index_of(&multi), clamped)
    }

    /// Exact node lookup: the index whose coordinates match x to within a
    /// relative tolerance of the spacing.
    pub fn locate_node(&self, x: &[f64]) -> Option<usize> {
        let (idx, clamped) = self.nearest_node(x);
        if clamped {
            return None;
        }
        let c = self.node_coords(idx);
        for axis in 0..self.dim() {
            if (c[axis] - x[axis]).abs() > 1e-9 * self.spacing[axis] {
                return None;
            }
        }
        Some(idx)
    }

    /// Multilinear interpolation of nodal values at x (x clamped to the box).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let k = self.dim();
        let mut base = vec![0usize; k];
        let mut frac = vec![0.0f64; k];
        for axis in 0..k {
            let (lo, hi) = self.bounds[axis];
            let v = x[axis].clamp(lo, hi);
            let t = (v - lo) / self.spacing[axis];
            let i = (t.floor() as usize).min(self.cells[axis] - 1);
            base[axis] = i;
            frac[axis] = t - i as f64;
        }
        match k {
            1 => {
                let i = base[0];
                values[i] * (1.0 - frac[0]) + values[i + 1] * frac[0]
            }
            _ => {
                let mut acc = 0.0;
                for (da, wa) in [(0usize, 1.0 - frac[0]), (1, frac[0])] {
                    for (db, wb) in [(0usize, 1.0 - frac[1]), (1, frac[1])] {
                        let idx = self.index_of(&[base[0] + da, base[1] + db]);
                        acc += wa * wb * values[idx];
                    }
                }
                acc
            }
        }
    }

    /// Grid covering a box `factor` times larger around the same center,
    /// same spacing, bounds snapped outward to whole cells.
    pub fn padded(&self, factor: f64) -> Result<Grid, GridError> {
        assert!(factor >= 1.0);
        let mut bounds = Vec::new();
        let mut cells = Vec::new();
        for axis in 0..self.dim() {
            let (lo, hi) = self.bounds[axis];
            let half = 0.5 * (hi - lo) * factor;
            let center = 0.5 * (lo + hi);
            let h = self.spacing[axis];
            let extra = (((center - half) - lo).abs() / h).ceil() as usize;
            bounds.push((lo - extra as f64 * h, hi + extra as f64 * h));
            cells.push(self.cells[axis] + 2 * extra);
        }
        build_grid(&bounds, &cells, BoundaryPolicy::NeumannZero)
    }

    /// For every node of `sub`, its index in `self` (requires `sub` to be
    /// a node-aligned subgrid: same spacing, bounds offset by whole cells).
    pub fn embedding_of(&self, sub: &Grid) -> Option<Vec<usize>> {
        (0..sub.num_nodes())
            .map(|i| self.locate_node(&sub.node_coords(i)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Stencil assembly
// ---------------------------------------------------------------------------

/// Cross-derivative treatment at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossScheme {
    None,
    SevenPoint,
    WideUpwind,
}

/// Per-node scheme metadata.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeTag {
    pub dirichlet: bool,
    /// Upwind direction per axis: +1 forward, -1 backward, 0 no drift.
    pub upwind: Vec<i8>,
    pub cross: CrossScheme,
    /// Whether mirror folding touched this row.
    pub folded: bool,
}

/// Monotone discretization of the generator on a grid, together with the
/// gradient stencils feeding σᵀ∇v into the running profits.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: Grid,
    /// L_h rows as sorted (column, coefficient) lists; empty at Dirichlet
    /// nodes (their system rows are identities).
    rows: Vec<Vec<(usize, f64)>>,
    dirichlet: Vec<bool>,
    tags: Vec<SchemeTag>,
    /// σ(x_node), row-major k×d, per node.
    sigma: Vec<Vec<f64>>,
    /// Gradient stencil per node and axis: two (column, coefficient) pairs.
    grad: Vec<Vec<[(usize, f64); 2]>>,
    half_bandwidth: usize,
    dim_noise: usize,
}

/// Candidate lattice directions for the second-order decomposition:
/// ½ Tr(a D²) = Σ_e c_e Δ_e with Δ_e the second difference along e.
/// The first two entries are the classical 7-point diagonals.
const CROSS_DIRECTIONS: [(i64, i64); 8] = [
    (1, 1),
    (1, -1),
    (2, 1),
    (1, 2),
    (2, -1),
    (1, -2),
    (1, 0),
    (0, 1),
];

fn moments(e: (i64, i64), h: &[f64]) -> [f64; 3] {
    let p = e.0 as f64 * h[0];
    let q = e.1 as f64 * h[1];
    [p * p, p * q, q * q]
}

/// Finds non-negative weights c_e on three directions matching the
/// second-order moments (a11/2, a12/2, a22/2). Returns the first match in
/// catalog order; `admissible` filters directions whose ±e references
/// leave the grid when folding is not available.
fn decompose_cross(
    a: [f64; 3],
    h: &[f64],
    admissible: &[bool; 8],
) -> Option<(Vec<((i64, i64), f64)>, CrossScheme)> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-13 * (1.0 + scale / (h[0] * h[1]));
    // closed-form 7-point first: axes plus one diagonal
    let diag_idx = if a[1] >= 0.0 { 0 } else { 1 };
    if admissible[diag_idx] && admissible[6] && admissible[7] {
        let c_diag = a[1].abs() / (2.0 * h[0] * h[1]);
        let c_x = a[0] / (2.0 * h[0] * h[0]) - c_diag;
        let c_y = a[2] / (2.0 * h[1] * h[1]) - c_diag;
        if c_x >= -tol && c_y >= -tol {
            let mut out = Vec::new();
            if c_diag > 0.0 {
                out.push((CROSS_DIRECTIONS[diag_idx], c_diag));
            }
            if c_x > 0.0 {
                out.push(((1, 0), c_x.max(0.0)));
            }
            if c_y > 0.0 {
                out.push(((0, 1), c_y.max(0.0)));
            }
            let scheme = if c_diag > 0.0 {
                CrossScheme::SevenPoint
            } else {
                CrossScheme::None
            };
            return Some((out, scheme));
        }
    }
    // Wide catalog: all 3-subsets in fixed order. Solve in spacing units
    // normalized by min(h) so the 3x3 systems stay O(1) on fine grids;
    // the resulting weights are valid as-is because both the moments and
    // the target scale by the same factor.
    let hmin = h[0].min(h[1]);
    let hn = [h[0] / hmin, h[1] / hmin];
    let inv = 1.0 / (2.0 * hmin * hmin);
    let target = [a[0] * inv, a[1] * inv, a[2] * inv];
    let t_scale = target.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let c_tol = 1e-13 * t_scale;
    for i in 0..8 {
        if !admissible[i] {
            continue;
        }
        for j in (i + 1)..8 {
            if !admissible[j] {
                continue;
            }
            for l in (j + 1)..8 {
                if !admissible[l] {
                    continue;
                }
                let cols = [
                    moments(CROSS_DIRECTIONS[i], &hn),
                    moments(CROSS_DIRECTIONS[j], &hn),
                    moments(CROSS_DIRECTIONS[l], &hn),
                ];
                let det = det3(&cols);
                if det.abs() < 1e-10 {
                    continue;
                }
                let c = solve3(&cols, &target, det);
                if c.iter().all(|v| *v >= -c_tol) {
                    let picks = [i, j, l];
                    let out: Vec<_> = picks
                        .iter()
                        .zip(&c)
                        .filter(|(_, v)| **v > 0.0)
                        .map(|(p, v)| (CROSS_DIRECTIONS[*p], *v))
                        .collect();
                    return Some((out, CrossScheme::WideUpwind));
                }
            }
        }
    }
    None
}

fn det3(cols: &[[f64; 3]; 3]) -> f64 {
    let m = cols;
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[1][0] * (m[0][1] * m[2][2] - m[0][2] * m[2][1])
        + m[2][0] * (m[0][1] * m[1][2] - m[0][2] * m[1][1])
}

/// Cramer solve of [cols] c = target (columns are the direction moments).
fn solve3(cols: &[[f64; 3]; 3], target: &[f64; 3], det: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for v in 0..3 {
        let mut m = *cols;
        m[v] = *target;
        out[v] = det3(&m) / det;
    }
    out
}

/// Mirror folding of an out-of-range index.
fn fold(i: i64, n_pts: usize) -> usize {
    let last = (n_pts - 1) as i64;
    let mut v = i;
    if v < 0 {
        v = -v;
    }
    if v > last {
        v = 2 * last - v;
    }
    v as usize
}

/// Assembles the monotone discretization of L for `diffusion` on `grid`.
pub fn discretize_generator(
    diffusion: &DiffusionSpec,
    grid: &Grid,
) -> Result<DiscreteOperator, GridError> {
    let k = grid.dim();
    if diffusion.dim_state != k {
        return Err(GridError::DimensionUnsupported {
            dim: diffusion.dim_state,
        });
    }
    let d = diffusion.dim_noise;
    let n = grid.num_nodes();
    let shape = grid.shape();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut dirichlet = vec![false; n];
    let mut tags = Vec::with_capacity(n);
    let mut sigma_store = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    let mut half_bandwidth = 0usize;

    let mut b = vec![0.0; k];
    let mut sig = vec![0.0; k * d];

    for node in 0..n {
        let multi = grid.multi_of(node);
        let x = grid.node_coords(node);
        diffusion.drift(&x, &mut b);
        diffusion.diffusion(&x, &mut sig);
        sigma_store.push(sig.clone());

        // gradient stencil: central inside, one-sided on the axis faces;
        // both are exact on affine functions
        let mut gnode = Vec::with_capacity(k);
        for axis in 0..k {
            let h = grid.spacing()[axis];
            let i = multi[axis];
            let mut lo = multi.clone();
            let mut hi = multi.clone();
            let pair = if i == 0 {
                hi[axis] = 1;
                [(grid.index_of(&lo), -1.0 / h), (grid.index_of(&hi), 1.0 / h)]
            } else if i == grid.cells()[axis] {
                lo[axis] = i - 1;
                [(grid.index_of(&lo), -1.0 / h), (grid.index_of(&hi), 1.0 / h)]
            } else {
                lo[axis] = i - 1;
                hi[axis] = i + 1;
                [
                    (grid.index_of(&lo), -0.5 / h),
                    (grid.index_of(&hi), 0.5 / h),
                ]
            };
            gnode.push(pair);
        }
        grad.push(gnode);

        let on_boundary = grid.is_boundary(node);
        if on_boundary && grid.policy() == BoundaryPolicy::DirichletEnvelope {
            dirichlet[node] = true;
            rows.push(Vec::new());
            tags.push(SchemeTag {
                dirichlet: true,
                upwind: vec![0; k],
                cross: CrossScheme::None,
                folded: false,
            });
            continue;
        }

        // a = σσᵀ at the node
        let a = {
            let mut a = vec![0.0; k * k];
            for r in 0..k {
                for c in 0..k {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += sig[r * d + j] * sig[c * d + j];
                    }
                    a[r * k + c] = acc;
                }
            }
            a
        };

        // Collect off-diagonal contributions as (multi-offset, weight)
        let mut contributions: Vec<(Vec<i64>, f64)> = Vec::new();
        let mut upwind = vec![0i8; k];
        for axis in 0..k {
            let h = grid.spacing()[axis];
            let bp = b[axis].max(0.0);
            let bm = (-b[axis]).max(0.0);
            if bp > 0.0 {
                upwind[axis] = 1;
                let mut e = vec![0i64; k];
                e[axis] = 1;
                contributions.push((e, bp / h));
            }
            if bm > 0.0 {
                upwind[axis] = -1;
                let mut e = vec![0i64; k];
                e[axis] = -1;
                contributions.push((e, bm / h));
            }
        }
        let mut cross = CrossScheme::None;
        if k == 1 {
            let a11 = a[0];
            if a11 > 0.0 {
                let h = grid.spacing()[0];
                let c = a11 / (2.0 * h * h);
                contributions.push((vec![1], c));
                contributions.push((vec![-1], c));
            }
        } else {
            let amat = [a[0], a[1], a[3]];
            if amat.iter().any(|v| v.abs() > 0.0) {
                let can_fold = grid.policy() == BoundaryPolicy::NeumannZero;
                let mut admissible = [true; 8];
                if !can_fold {
                    for (slot, e) in CROSS_DIRECTIONS.iter().enumerate() {
                        let i0 = multi[0] as i64;
                        let i1 = multi[1] as i64;
                        for s in [-1i64, 1] {
                            let p = i0 + s * e.0;
                            let q = i1 + s * e.1;
                            if p < 0 || q < 0 || p >= shape[0] as i64 || q >= shape[1] as i64 {
                                admissible[slot] = false;
                            }
                        }
                    }
                }
                match decompose_cross(amat, grid.spacing(), &admissible) {
                    Some((parts, scheme)) => {
                        cross = scheme;
                        for (e, c) in parts {
                            contributions.push((vec![e.0, e.1], c));
                            contributions.push((vec![-e.0, -e.1], c));
                        }
                    }
                    None => {
                        return Err(GridError::MonotonicityUnachievable {
                            node,
                            point: x,
                            detail: format!(
                                "cross coefficients (a11, a12, a22) = ({}, {}, {}) \
                                 admit no non-negative stencil in the catalog",
                                amat[0], amat[1], amat[2]
                            ),
                        });
                    }
                }
            }
        }

        // Fold to in-grid columns, merge duplicates, diagonal closes the row
        let mut folded = false;
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for (offset, weight) in contributions {
            if weight == 0.0 {
                continue;
            }
            let mut target = Vec::with_capacity(k);
            for axis in 0..k {
                let raw = multi[axis] as i64 + offset[axis];
                let inside = raw >= 0 && raw < shape[axis] as i64;
                if !inside {
                    folded = true;
                }
                target.push(fold(raw, shape[axis]));
            }
            let col = grid.index_of(&target);
            debug_assert_ne!(col, node, "mirror folding must not hit the center node");
            entries.push((col, weight));
        }
        entries.sort_by_key(|(c, _)| *c);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for (col, w) in entries {
            match row.last_mut() {
                Some((c, acc)) if *c == col => *acc += w,
                _ => row.push((col, w)),
            }
        }
        let neg_sum = -row.iter().map(|(_, w)| *w).sum::<f64>();
        row.push((node, neg_sum));
        row.sort_by_key(|(c, _)| *c);
        for (c, _) in &row {
            half_bandwidth = half_bandwidth.max(c.abs_diff(node));
        }
        rows.push(row);
        tags.push(SchemeTag {
            dirichlet: false,
            upwind,
            cross,
            folded,
        });
    }

    let op = DiscreteOperator {
        grid: grid.clone(),
        rows,
        dirichlet,
        tags,
        sigma: sigma_store,
        grad,
        half_bandwidth,
        dim_noise: d,
    };
    op.verify_m_matrix()?;
    Ok(op)
}

impl DiscreteOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet[node]
    }

    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|i| self.dirichlet[*i]).collect()
    }

    pub fn tag(&self, node: usize) -> &SchemeTag {
        &self.tags[node]
    }

    pub fn row(&self, node: usize) -> &[(usize, f64)] {
        &self.rows[node]
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half_bandwidth
    }

    /// (L_h v) per node; zero at Dirichlet nodes.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for node in 0..self.rows.len() {
            out[node] = self.apply_at(v, node);
        }
    }

    pub fn apply_at(&self, v: &[f64], node: usize) -> f64 {
        self.rows[node].iter().map(|(c, w)| w * v[*c]).sum()
    }

    /// D_x v at a node (length k).
    pub fn gradient_at(&self, v: &[f64], node: usize) -> Vec<f64> {
        self.grad[node]
            .iter()
            .map(|pair| pair.iter().map(|(c, w)| w * v[*c]).sum())
            .collect()
    }

    /// σᵀ(x) D_x v at a node, written into `out` (length d).
    pub fn sigma_t_grad_at(&self, v: &[f64], node: usize, out: &mut [f64]) {
        let k = self.grid.dim();
        let d = self.dim_noise;
        let g = self.gradient_at(v, node);
        let s = &self.sigma[node];
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..k {
                acc += s[r * d + c] * g[r];
            }
            out[c] = acc;
        }
    }

    pub fn sigma_at(&self, node: usize) -> &[f64] {
        &self.sigma[node]
    }

    /// Assembles (rI - L_h + diag(shift)) with identity rows at Dirichlet
    /// nodes. `shift` must be non-negative to preserve the M-matrix
    /// structure; an empty slice means no shift.
    pub fn system_matrix(&self, r: f64, shift: &[f64]) -> BandMatrix {
        let n = self.num_nodes();
        let mut m = BandMatrix::new(n, self.half_bandwidth.max(1));
        for node in 0..n {
            if self.dirichlet[node] {
                m.set(node, node, 1.0).expect("diagonal is always in band");
                continue;
            }
            let extra = if shift.is_empty() { 0.0 } else { shift[node] };
            m.set(node, node, r + extra).expect("diagonal in band");
            for (c, w) in &self.rows[node] {
                m.add(node, *c, -w).expect("stencil entry in band");
            }
        }
        m
    }

    /// Structural check: off-diagonals non-negative (exactly), row sums
    /// non-positive, Dirichlet rows empty. Run at assembly; callers may
    /// re-run it on demand.
    pub fn verify_m_matrix(&self) -> Result<(), GridError> {
        for (node, row) in self.rows.iter().enumerate() {
            if self.dirichlet[node] {
                if !row.is_empty() {
                    return Err(GridError::NotMonotone {
                        node,
                        detail: "Dirichlet node carries a stencil row".into(),
                    });
                }
                continue;
            }
            let mut sum = 0.0;
            for (c, w) in row {
                if *c != node && *w < 0.0 {
                    return Err(GridError::NotMonotone {
                        node,
                        detail: format!("off-diagonal ({node}, {c}) = {w}"),
                    });
                }
                sum += w;
            }
            if sum > 1e-12 * row.iter().map(|(_, w)| w.abs()).sum::<f64>().max(1.0) {
                return Err(GridError::NotMonotone {
                    node,
                    detail: format!("row sum {sum} > 0"),
                });
            }
        }
        Ok(())
    }

    /// Text dump: JSON header line with grid metadata, then one
    /// "row col value" line per stencil entry.
    pub fn dump<W: Write>(&self, out: &mut W) -> Result<(), GridError> {
        #[derive(Serialize)]
        struct Header<'a> {
            dim: usize,
            bounds: &'a [(f64, f64)],
            cells: &'a [usize],
            policy: BoundaryPolicy,
            nodes: usize,
            half_bandwidth: usize,
        }
        let header = Header {
            dim: self.grid.dim(),
            bounds: self.grid.bounds(),
            cells: self.grid.cells(),
            policy: self.grid.policy(),
            nodes: self.num_nodes(),
            half_bandwidth: self.half_bandwidth,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for (node, row) in self.rows.iter().enumerate() {
            for (c, w) in row {
                writeln!(out, "{node} {c} {w}")?;
            }
        }
        Ok(())
    }
}

/// Advisory check of L_h g_ij <= 0 at interior nodes for every cost pair.
/// A failure does not block solving; it flags problems where the cost
/// obstacle can push against the dynamics.
pub fn check_cost_subharmonicity(
    problem: &crate::model::SwitchingProblem,
    op: &DiscreteOperator,
) -> HypothesisCheck {
    let m = problem.num_modes();
    let grid = op.grid();
    let n = grid.num_nodes();
    let mut witnesses = Vec::new();
    let mut g = vec![0.0; n];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            for node in 0..n {
                g[node] = problem.cost(i, j, &grid.node_coords(node));
            }
            for node in 0..n {
                if grid.is_boundary(node) {
                    continue;
                }
                let lg = op.apply_at(&g, node);
                if lg > 1e-8 * (1.0 + g[node].abs()) {
                    witnesses.push(Witness {
                        point: grid.node_coords(node),
                        detail: format!("L_h g[{}][{}] = {lg:.3e}", i + 1, j + 1),
                    });
                }
            }
        }
    }
    if witnesses.is_empty() {
        HypothesisCheck::pass("L_h g_ij <= 0 at all interior nodes")
    } else {
        witnesses.truncate(8);
        HypothesisCheck::fail(
            "cost subharmonicity violated (advisory, does not block solving)",
            witnesses,
        )
    }
}
