//! Uniform P1 finite elements on the unit interval or unit square.
//!
//! The square is triangulated by splitting every grid cell along the same
//! diagonal. Homogeneous Dirichlet conditions are imposed by eliminating
//! boundary nodes, so all interior operators are symmetric positive definite.
//! Products of three P1 functions (the weighted mass matrix and the cubic
//! load) are integrated exactly from nodal values.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::CscMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Width of the Gaussian control-shape bump.
pub const CONTROL_SHAPE_SIGMA: f64 = 0.2;

/// Optional removal of grid cells from the square.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mask {
    #[default]
    None,
    UpperRightQuadrant,
    Cells(Vec<[usize; 2]>),
}

impl Mask {
    fn covers(&self, cx: usize, cy: usize, cells_per_side: usize) -> bool {
        match self {
            Mask::None => false,
            Mask::UpperRightQuadrant => 2 * cx >= cells_per_side && 2 * cy >= cells_per_side,
            Mask::Cells(cells) => cells.contains(&[cx, cy]),
        }
    }
}

/// Description of the computational domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Spatial dimension, 1 or 2.
    pub dimension: usize,
    /// Number of grid cells along each side of the unit domain.
    pub cells_per_side: usize,
    /// Cells removed from the square (2D only).
    #[serde(default)]
    pub mask: Mask,
}

/// Element connectivity, by global node index.
#[derive(Clone, Debug)]
pub enum Cells {
    Segments(Vec<[usize; 2]>),
    Triangles(Vec<[usize; 3]>),
}

/// Uniform grid with Dirichlet boundary nodes eliminated from the dof set.
#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: DomainSpec,
    /// Grid spacing.
    pub h: f64,
    /// Coordinates of every node (second entry zero in 1D).
    pub node_coords: Vec<[f64; 2]>,
    /// Interior dof index of each node, `None` on the Dirichlet boundary.
    pub dof_of_node: Vec<Option<usize>>,
    /// Node index of each interior dof.
    pub node_of_dof: Vec<usize>,
    /// Kept elements.
    pub cells: Cells,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.node_of_dof.len()
    }

    /// Nodal interpolation of `f` on the interior dofs.
    pub fn interpolate_dofs(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(
            self.n_dofs(),
            self.node_of_dof.iter().map(|&n| {
                let [x, y] = self.node_coords[n];
                f(x, y)
            }),
        )
    }

    /// Nodal interpolation of `f` on every node, boundary included.
    pub fn interpolate_nodes(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(
            self.n_nodes(),
            self.node_coords.iter().map(|&[x, y]| f(x, y)),
        )
    }

    /// Extends an interior dof vector by zero to all nodes.
    pub fn extend_by_zero(&self, dofs: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_nodes());
        for (d, &n) in self.node_of_dof.iter().enumerate() {
            out[n] = dofs[d];
        }
        out
    }
}

/// Builds the grid for `spec`, eliminating Dirichlet nodes.
///
/// A node carries a dof when it lies off the outer boundary of the unit
/// domain and touches at least one kept cell; masked cells only drop element
/// contributions. Masks that disconnect the kept cells are rejected.
pub fn build_grid(spec: &DomainSpec) -> Result<Grid> {
    let n = spec.cells_per_side;
    if spec.dimension != 1 && spec.dimension != 2 {
        return Err(Error::Domain(format!(
            "dimension must be 1 or 2, got {}",
            spec.dimension
        )));
    }
    if n < 2 {
        return Err(Error::Domain(format!(
            "cells_per_side must be at least 2, got {n}"
        )));
    }
    let h = 1.0 / n as f64;

    if spec.dimension == 1 {
        if spec.mask != Mask::None {
            return Err(Error::Domain("masks are only supported in 2D".into()));
        }
        let node_coords: Vec<[f64; 2]> = (0..=n).map(|i| [i as f64 * h, 0.0]).collect();
        let mut dof_of_node = vec![None; n + 1];
        let mut node_of_dof = Vec::with_capacity(n - 1);
        for i in 1..n {
            dof_of_node[i] = Some(node_of_dof.len());
            node_of_dof.push(i);
        }
        let cells = Cells::Segments((0..n).map(|i| [i, i + 1]).collect());
        return Ok(Grid {
            spec: spec.clone(),
            h,
            node_coords,
            dof_of_node,
            node_of_dof,
            cells,
        });
    }

    if let Mask::Cells(cells) = &spec.mask {
        if let Some(c) = cells.iter().find(|c| c[0] >= n || c[1] >= n) {
            return Err(Error::Domain(format!(
                "masked cell ({}, {}) lies outside the {n}x{n} cell grid",
                c[0], c[1]
            )));
        }
    }

    let node_id = |i: usize, j: usize| j * (n + 1) + i;
    let kept = |cx: usize, cy: usize| !spec.mask.covers(cx, cy, n);

    let kept_cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|cy| (0..n).map(move |cx| (cx, cy)))
        .filter(|&(cx, cy)| kept(cx, cy))
        .collect();
    if kept_cells.is_empty() {
        return Err(Error::Domain("mask removes every cell".into()));
    }
    check_connected(&kept_cells, n)?;

    let mut node_coords = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            node_coords.push([i as f64 * h, j as f64 * h]);
        }
    }

    let touches_kept_cell = |i: usize, j: usize| {
        let cxs = [i.wrapping_sub(1), i];
        let cys = [j.wrapping_sub(1), j];
        cxs.iter().any(|&cx| {
            cys.iter()
                .any(|&cy| cx < n && cy < n && kept(cx, cy))
        })
    };

    let mut dof_of_node = vec![None; (n + 1) * (n + 1)];
    let mut node_of_dof = Vec::new();
    for j in 1..n {
        for i in 1..n {
            if touches_kept_cell(i, j) {
                let id = node_id(i, j);
                dof_of_node[id] = Some(node_of_dof.len());
                node_of_dof.push(id);
            }
        }
    }
    if node_of_dof.is_empty() {
        return Err(Error::Domain("grid has no interior dofs".into()));
    }

    let mut triangles = Vec::with_capacity(2 * kept_cells.len());
    for &(cx, cy) in &kept_cells {
        let (a, b, c, d) = (
            node_id(cx, cy),
            node_id(cx + 1, cy),
            node_id(cx + 1, cy + 1),
            node_id(cx, cy + 1),
        );
        triangles.push([a, b, c]);
        triangles.push([a, c, d]);
    }

    Ok(Grid {
        spec: spec.clone(),
        h,
        node_coords,
        dof_of_node,
        node_of_dof,
        cells: Cells::Triangles(triangles),
    })
}

fn check_connected(kept: &[(usize, usize)], n: usize) -> Result<()> {
    let idx = |cx: usize, cy: usize| cy * n + cx;
    let mut is_kept = vec![false; n * n];
    for &(cx, cy) in kept {
        is_kept[idx(cx, cy)] = true;
    }
    let mut seen = vec![false; n * n];
    let mut stack = vec![kept[0]];
    seen[idx(kept[0].0, kept[0].1)] = true;
    let mut count = 0;
    while let Some((cx, cy)) = stack.pop() {
        count += 1;
        let mut visit = |nx: usize, ny: usize| {
            if nx < n && ny < n && is_kept[idx(nx, ny)] && !seen[idx(nx, ny)] {
                seen[idx(nx, ny)] = true;
                stack.push((nx, ny));
            }
        };
        visit(cx.wrapping_sub(1), cy);
        visit(cx + 1, cy);
        visit(cx, cy.wrapping_sub(1));
        visit(cx, cy + 1);
    }
    if count != kept.len() {
        return Err(Error::Domain(
            "mask disconnects the domain into separate components".into(),
        ));
    }
    Ok(())
}

/// Inner-product choice: `H` is the mass matrix, `W` the mass-plus-stiffness
/// matrix.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GramTag {
    H,
    W,
}

/// PDE and time-discretization parameters for
/// `dy/dt - a (Laplace y) + b y^3 = F u` with Dirichlet data zero.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    /// Diffusion coefficient, positive.
    pub a: f64,
    /// Cubic-term coefficient, positive.
    pub b: f64,
    /// Time horizon.
    pub t_final: f64,
    /// One-step scheme weight, in [1/2, 1]; 1 is implicit Euler.
    pub theta: f64,
    /// Number of time steps.
    pub k_steps: usize,
}

impl PdeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::Config(format!(
                "diffusion coefficient a must be positive, got {}",
                self.a
            )));
        }
        if !(self.b > 0.0) {
            return Err(Error::Config(format!(
                "cubic coefficient b must be positive, got {}",
                self.b
            )));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::Config(format!(
                "time horizon t_final must be positive, got {}",
                self.t_final
            )));
        }
        if !(self.theta >= 0.5 && self.theta <= 1.0) {
            return Err(Error::Config(format!(
                "theta must lie in [0.5, 1] (got {}); use 1.0 for implicit Euler",
                self.theta
            )));
        }
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.k_steps as f64
    }
}

enum WeightedMassBackend {
    /// Per-entry contributions `values[slot] += coeff * weight[node]` on the
    /// shared interior sparsity pattern.
    Mesh {
        slots: Vec<u32>,
        nodes: Vec<u32>,
        coeffs: Vec<f64>,
    },
    /// Symmetrized diagonal scaling `(M D + D M) / 2` for grid-free
    /// surrogate operators.
    Symmetrized,
}

/// Assembled spatial operators on the interior dofs.
///
/// `m`, `k`, and `g_w` share one sparsity pattern so that linear
/// combinations reduce to combining value arrays.
pub struct SpatialOperators {
    /// Underlying grid; `None` for surrogate operators built from explicit
    /// matrices.
    pub grid: Option<Grid>,
    /// Mass matrix.
    pub m: CscMatrix<f64>,
    /// Stiffness matrix.
    pub k: CscMatrix<f64>,
    /// `m + k`, the Gram matrix of the W-inner product.
    pub g_w: CscMatrix<f64>,
    /// Mass matrix over all nodes, boundary included.
    pub m_full: CscMatrix<f64>,
    /// Stiffness matrix over all nodes, boundary included.
    pub k_full: CscMatrix<f64>,
    /// Nodal control shape on the interior dofs.
    pub f_h: DVector<f64>,
    /// Load vector `m * f_h` of the control shape.
    pub load_f: DVector<f64>,
    wm: WeightedMassBackend,
}

/// Assembles mass, stiffness, and control-shape operators on `grid`.
///
/// The control shape is the Gaussian bump
/// `F(x) = exp(-|x - x_c|^2 / sigma^2)` centered in the unit domain with
/// `sigma = 0.2`.
pub fn assemble_operators(grid: &Grid) -> Result<SpatialOperators> {
    let n_nodes = grid.n_nodes();
    let n_dofs = grid.n_dofs();

    // Keyed (column, row) so iteration order matches CSC layout.
    let mut full: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for_each_element(grid, |nodes, m_e, k_e| {
        for (a, &ga) in nodes.iter().enumerate() {
            for (b, &gb) in nodes.iter().enumerate() {
                let entry = full.entry((gb, ga)).or_insert((0.0, 0.0));
                entry.0 += m_e[a][b];
                entry.1 += k_e[a][b];
            }
        }
    });

    let (m_full, k_full) = csc_pair_from_map(n_nodes, &full);

    let mut interior: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (&(col, row), &v) in &full {
        if let (Some(dc), Some(dr)) = (grid.dof_of_node[col], grid.dof_of_node[row]) {
            interior.insert((dc, dr), v);
        }
    }
    let (m, k) = csc_pair_from_map(n_dofs, &interior);
    let g_w = CscMatrix::try_from_pattern_and_values(
        m.pattern().clone(),
        m.values()
            .iter()
            .zip(k.values())
            .map(|(mv, kv)| mv + kv)
            .collect(),
    )
    .expect("pattern and value lengths agree by construction");

    // Slot lookup for the weighted-mass recipe.
    let mut slot_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (idx, key) in interior.keys().enumerate() {
        slot_of.insert(*key, idx);
    }
    let mut slots = Vec::new();
    let mut nodes_v = Vec::new();
    let mut coeffs = Vec::new();
    for_each_element_triple(grid, |nodes, t_e| {
        for (a, &ga) in nodes.iter().enumerate() {
            for (b, &gb) in nodes.iter().enumerate() {
                let (Some(da), Some(db)) = (grid.dof_of_node[ga], grid.dof_of_node[gb]) else {
                    continue;
                };
                let slot = slot_of[&(db, da)] as u32;
                for (c, &gc) in nodes.iter().enumerate() {
                    slots.push(slot);
                    nodes_v.push(gc as u32);
                    coeffs.push(t_e(a, b, c));
                }
            }
        }
    });

    let center = if grid.spec.dimension == 1 { [0.5, 0.0] } else { [0.5, 0.5] };
    let s2 = CONTROL_SHAPE_SIGMA * CONTROL_SHAPE_SIGMA;
    let f_h = grid.interpolate_dofs(|x, y| {
        let dx = x - center[0];
        let dy = y - center[1];
        (-(dx * dx + dy * dy) / s2).exp()
    });
    let load_f = &m * &f_h;

    Ok(SpatialOperators {
        grid: Some(grid.clone()),
        m,
        k,
        g_w,
        m_full,
        k_full,
        f_h,
        load_f,
        wm: WeightedMassBackend::Mesh {
            slots,
            nodes: nodes_v,
            coeffs,
        },
    })
}

impl SpatialOperators {
    /// Surrogate operators from explicit matrices, for low-dimensional test
    /// problems. The weighted mass of a weight `w` degenerates to the
    /// symmetrized scaling `(M diag(w) + diag(w) M) / 2`.
    pub fn surrogate(m: CscMatrix<f64>, k: CscMatrix<f64>, f_h: DVector<f64>) -> Result<Self> {
        let n = m.nrows();
        if k.nrows() != n || k.ncols() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: k.nrows(),
            });
        }
        if f_h.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: f_h.len(),
            });
        }
        let g_w = &m + &k;
        let load_f = &m * &f_h;
        Ok(SpatialOperators {
            grid: None,
            m_full: m.clone(),
            k_full: k.clone(),
            m,
            k,
            g_w,
            f_h,
            load_f,
            wm: WeightedMassBackend::Symmetrized,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.m.nrows()
    }

    /// Weighted mass matrix for a nodally interpolated weight.
    ///
    /// `weight` has either interior-dof length (extended by zero to the
    /// boundary, the natural choice for functions obeying the Dirichlet
    /// condition) or all-nodes length. Weight identically one on all nodes
    /// reproduces the mass matrix exactly.
    pub fn weighted_mass(&self, weight: &DVector<f64>) -> Result<CscMatrix<f64>> {
        match &self.wm {
            WeightedMassBackend::Mesh { slots, nodes, coeffs } => {
                let grid = self.grid.as_ref().expect("mesh backend implies a grid");
                let wn = node_weights(grid, weight)?;
                let mut values = vec![0.0; self.m.nnz()];
                for ((&slot, &node), &coeff) in slots.iter().zip(nodes).zip(coeffs) {
                    values[slot as usize] += coeff * wn[node as usize];
                }
                Ok(CscMatrix::try_from_pattern_and_values(self.m.pattern().clone(), values)
                    .expect("pattern and value lengths agree by construction"))
            }
            WeightedMassBackend::Symmetrized => {
                let n = self.n_dofs();
                if weight.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: weight.len(),
                    });
                }
                let mut w = self.m.clone();
                let pattern: Vec<(usize, usize)> = w
                    .triplet_iter()
                    .map(|(r, c, _)| (r, c))
                    .collect();
                for ((r, c), v) in pattern.into_iter().zip(w.values_mut()) {
                    *v *= 0.5 * (weight[r] + weight[c]);
                }
                Ok(w)
            }
        }
    }

    /// `c_m * M + c_k * K + c_w * weighted_mass(weight)` on the shared
    /// pattern; the workhorse behind Newton matrices.
    pub fn combined_matrix(
        &self,
        c_m: f64,
        c_k: f64,
        c_w: f64,
        weight: Option<&DVector<f64>>,
    ) -> Result<CscMatrix<f64>> {
        match (&self.wm, weight) {
            (WeightedMassBackend::Mesh { slots, nodes, coeffs }, weight) => {
                let mut values: Vec<f64> = self
                    .m
                    .values()
                    .iter()
                    .zip(self.k.values())
                    .map(|(mv, kv)| c_m * mv + c_k * kv)
                    .collect();
                if let Some(weight) = weight {
                    let grid = self.grid.as_ref().expect("mesh backend implies a grid");
                    let wn = node_weights(grid, weight)?;
                    for ((&slot, &node), &coeff) in slots.iter().zip(nodes).zip(coeffs) {
                        values[slot as usize] += c_w * coeff * wn[node as usize];
                    }
                }
                Ok(CscMatrix::try_from_pattern_and_values(self.m.pattern().clone(), values)
                    .expect("pattern and value lengths agree by construction"))
            }
            (WeightedMassBackend::Symmetrized, None) => Ok(&(&self.m * c_m) + &(&self.k * c_k)),
            (WeightedMassBackend::Symmetrized, Some(weight)) => {
                let wm = self.weighted_mass(weight)?;
                Ok(&(&(&self.m * c_m) + &(&self.k * c_k)) + &(&wm * c_w))
            }
        }
    }

    /// Inner product of two dof vectors in the selected space.
    pub fn inner_product(&self, x: &DVector<f64>, y: &DVector<f64>, which: GramTag) -> f64 {
        let gram = match which {
            GramTag::H => &self.m,
            GramTag::W => &self.g_w,
        };
        x.dot(&(gram * y))
    }

    pub fn h_norm(&self, x: &DVector<f64>) -> f64 {
        self.inner_product(x, x, GramTag::H).max(0.0).sqrt()
    }

    pub fn w_norm(&self, x: &DVector<f64>) -> f64 {
        self.inner_product(x, x, GramTag::W).max(0.0).sqrt()
    }

    pub fn gram(&self, which: GramTag) -> &CscMatrix<f64> {
        match which {
            GramTag::H => &self.m,
            GramTag::W => &self.g_w,
        }
    }

    /// Nodewise cube mapped through the mass matrix: the load vector of the
    /// cubic term.
    pub fn cubic_load(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * &y.map(|v| v * v * v)
    }
}

/// Standalone weighted mass matrix on `grid`; see
/// [`SpatialOperators::weighted_mass`] for the weight conventions.
pub fn weighted_mass(grid: &Grid, weight: &DVector<f64>) -> Result<CscMatrix<f64>> {
    let wn = node_weights(grid, weight)?;
    let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for_each_element_triple(grid, |nodes, t_e| {
        for (a, &ga) in nodes.iter().enumerate() {
            for (b, &gb) in nodes.iter().enumerate() {
                let (Some(da), Some(db)) = (grid.dof_of_node[ga], grid.dof_of_node[gb]) else {
                    continue;
                };
                let mut acc = 0.0;
                for (c, &gc) in nodes.iter().enumerate() {
                    acc += t_e(a, b, c) * wn[gc];
                }
                *map.entry((db, da)).or_insert(0.0) += acc;
            }
        }
    });
    Ok(csc_from_map(grid.n_dofs(), &map))
}

fn node_weights(grid: &Grid, weight: &DVector<f64>) -> Result<DVector<f64>> {
    if weight.len() == grid.n_nodes() {
        Ok(weight.clone())
    } else if weight.len() == grid.n_dofs() {
        Ok(grid.extend_by_zero(weight))
    } else {
        Err(Error::DimensionMismatch {
            expected: grid.n_dofs(),
            got: weight.len(),
        })
    }
}

fn for_each_element(grid: &Grid, mut visit: impl FnMut(&[usize], &[[f64; 3]; 3], &[[f64; 3]; 3])) {
    match &grid.cells {
        Cells::Segments(segments) => {
            for seg in segments {
                let h = (grid.node_coords[seg[1]][0] - grid.node_coords[seg[0]][0]).abs();
                let mut m_e = [[0.0; 3]; 3];
                let mut k_e = [[0.0; 3]; 3];
                for a in 0..2 {
                    for b in 0..2 {
                        m_e[a][b] = h / 6.0 * if a == b { 2.0 } else { 1.0 };
                        k_e[a][b] = (1.0 / h) * if a == b { 1.0 } else { -1.0 };
                    }
                }
                visit(seg, &m_e, &k_e);
            }
        }
        Cells::Triangles(triangles) => {
            for tri in triangles {
                let p: Vec<[f64; 2]> = tri.iter().map(|&i| grid.node_coords[i]).collect();
                let bb = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
                let cc = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
                let area = 0.5 * (bb[0] * cc[1] - bb[1] * cc[0]).abs();
                let mut m_e = [[0.0; 3]; 3];
                let mut k_e = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        m_e[a][b] = area / 12.0 * if a == b { 2.0 } else { 1.0 };
                        k_e[a][b] = (bb[a] * bb[b] + cc[a] * cc[b]) / (4.0 * area);
                    }
                }
                visit(tri, &m_e, &k_e);
            }
        }
    }
}

fn for_each_element_triple(grid: &Grid, mut visit: impl FnMut(&[usize], &dyn Fn(usize, usize, usize) -> f64)) {
    match &grid.cells {
        Cells::Segments(segments) => {
            for seg in segments {
                let h = (grid.node_coords[seg[1]][0] - grid.node_coords[seg[0]][0]).abs();
                let t = move |a: usize, b: usize, c: usize| {
                    if a == b && b == c {
                        h / 4.0
                    } else {
                        h / 12.0
                    }
                };
                visit(seg, &t);
            }
        }
        Cells::Triangles(triangles) => {
            for tri in triangles {
                let p: Vec<[f64; 2]> = tri.iter().map(|&i| grid.node_coords[i]).collect();
                let bb = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
                let cc = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
                let area = 0.5 * (bb[0] * cc[1] - bb[1] * cc[0]).abs();
                let t = move |a: usize, b: usize, c: usize| {
                    if a == b && b == c {
                        area / 10.0
                    } else if a == b || b == c || a == c {
                        area / 30.0
                    } else {
                        area / 60.0
                    }
                };
                visit(tri, &t);
            }
        }
    }
}

fn csc_from_map(n: usize, map: &BTreeMap<(usize, usize), f64>) -> CscMatrix<f64> {
    let mut col_offsets = vec![0usize; n + 1];
    let mut row_indices = Vec::with_capacity(map.len());
    let mut values = Vec::with_capacity(map.len());
    for (&(col, row), &v) in map {
        col_offsets[col + 1] += 1;
        row_indices.push(row);
        values.push(v);
    }
    for c in 0..n {
        col_offsets[c + 1] += col_offsets[c];
    }
    CscMatrix::try_from_csc_data(n, n, col_offsets, row_indices, values)
        .expect("map iteration yields valid CSC data")
}

fn csc_pair_from_map(
    n: usize,
    map: &BTreeMap<(usize, usize), (f64, f64)>,
) -> (CscMatrix<f64>, CscMatrix<f64>) {
    let mut col_offsets = vec![0usize; n + 1];
    let mut row_indices = Vec::with_capacity(map.len());
    let mut first = Vec::with_capacity(map.len());
    let mut second = Vec::with_capacity(map.len());
    for (&(col, row), &(a, b)) in map {
        col_offsets[col + 1] += 1;
        row_indices.push(row);
        first.push(a);
        second.push(b);
    }
    for c in 0..n {
        col_offsets[c + 1] += col_offsets[c];
    }
    let pattern = SparsityPattern::try_from_offsets_and_indices(n, n, col_offsets, row_indices)
        .expect("map iteration yields a valid pattern");
    let a = CscMatrix::try_from_pattern_and_values(pattern.clone(), first)
        .expect("value length matches pattern");
    let b = CscMatrix::try_from_pattern_and_values(pattern, second)
        .expect("value length matches pattern");
    (a, b)
}

/// Dense copy of a sparse matrix, for small-scale checks and the
/// spatial-Gram eigenroute.
pub fn csc_to_dense(a: &CscMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (r, c, v) in a.triplet_iter() {
        out[(r, c)] = *v;
    }
    out
}

/// Identity matrix in CSC form, the Gram matrix of the plain Euclidean
/// product.
pub fn csc_identity(n: usize) -> CscMatrix<f64> {
    CscMatrix::identity(n)
}
