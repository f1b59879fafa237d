//! Periodicity cells, boxes of cells and their discrete Laplacians.
//!
//! Nodes sit at cell centres of a uniform tensor mesh, so every node carries
//! the same quadrature weight and a box of `N` cells is the disjoint union of
//! its cells. Boundary conditions are closed with ghost nodes: the ghost value
//! is `g` times the adjacent node value, which only changes the diagonal.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseHermitian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Layer,
    WholeSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransversalBc {
    Dirichlet,
    Neumann,
}

impl TransversalBc {
    fn ghost_factor(self) -> f64 {
        match self {
            TransversalBc::Dirichlet => -1.0,
            TransversalBc::Neumann => 1.0,
        }
    }
}

/// Geometry and resolution of the periodicity cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lateral_dim: usize,
    /// Edge lengths of the rectangular cell, one per lateral axis.
    pub lateral_cell_lengths: Vec<f64>,
    /// Width of the layer; unused in whole-space mode.
    pub transversal_width: f64,
    pub mesh_lateral: usize,
    pub mesh_transversal: usize,
    /// Conditions on the bottom and top of the layer.
    pub transversal_bc: [TransversalBc; 2],
    pub mode: Mode,
}

pub const MIN_MESH: usize = 8;

impl GridSpec {
    pub fn whole_space(lengths: Vec<f64>, m: usize) -> Self {
        GridSpec {
            lateral_dim: lengths.len(),
            lateral_cell_lengths: lengths,
            transversal_width: 1.0,
            mesh_lateral: m,
            mesh_transversal: 1,
            transversal_bc: [TransversalBc::Neumann; 2],
            mode: Mode::WholeSpace,
        }
    }

    pub fn layer(lengths: Vec<f64>, d: f64, m_lat: usize, m_z: usize, bc: [TransversalBc; 2]) -> Self {
        GridSpec {
            lateral_dim: lengths.len(),
            lateral_cell_lengths: lengths,
            transversal_width: d,
            mesh_lateral: m_lat,
            mesh_transversal: m_z,
            transversal_bc: bc,
            mode: Mode::Layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGrid(m));
        if !(1..=2).contains(&self.lateral_dim) {
            return bad(format!("lateral dimension {} not in {{1, 2}}", self.lateral_dim));
        }
        if self.lateral_cell_lengths.len() != self.lateral_dim {
            return bad("one cell length per lateral axis required".into());
        }
        if self.lateral_cell_lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return bad("cell lengths must be positive".into());
        }
        if self.mesh_lateral < MIN_MESH {
            return bad(format!("lateral mesh {} below {MIN_MESH}", self.mesh_lateral));
        }
        match self.mode {
            Mode::Layer => {
                if !(self.transversal_width > 0.0) || !self.transversal_width.is_finite() {
                    return bad("layer width must be positive".into());
                }
                if self.mesh_transversal < MIN_MESH {
                    return bad(format!("transversal mesh {} below {MIN_MESH}", self.mesh_transversal));
                }
            }
            Mode::WholeSpace => {
                if self.mesh_transversal != 1 {
                    return bad("whole-space mode uses a single transversal node".into());
                }
            }
        }
        Ok(())
    }

    pub fn has_transversal(&self) -> bool {
        self.mode == Mode::Layer
    }

    /// Dimension of the physical domain: n + 1 on the layer, n in whole space.
    pub fn physical_dim(&self) -> usize {
        self.lateral_dim + usize::from(self.has_transversal())
    }

    pub fn lateral_area(&self) -> f64 {
        self.lateral_cell_lengths.iter().product()
    }

    /// |cell| on the layer, |lateral cell| in whole-space mode.
    pub fn cell_volume(&self) -> f64 {
        match self.mode {
            Mode::Layer => self.lateral_area() * self.transversal_width,
            Mode::WholeSpace => self.lateral_area(),
        }
    }

    pub fn lateral_spacing(&self, axis: usize) -> f64 {
        self.lateral_cell_lengths[axis] / self.mesh_lateral as f64
    }

    pub fn transversal_spacing(&self) -> f64 {
        self.transversal_width / self.mesh_transversal as f64
    }

    pub fn min_lattice_length(&self) -> f64 {
        self.lateral_cell_lengths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Same geometry at a different lateral resolution.
    pub fn with_mesh(&self, m_lat: usize) -> Self {
        GridSpec { mesh_lateral: m_lat, ..self.clone() }
    }
}

/// Uniform cell-centred tensor mesh. Lateral axes come first, then the
/// transversal axis when present.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub lateral_axes: usize,
    strides: Vec<usize>,
}

impl Mesh {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>, lateral_axes: usize) -> Self {
        let mut strides = vec![1usize; dims.len()];
        for a in (0..dims.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        Mesh { dims, spacing, origin, lateral_axes, strides }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axes(&self) -> usize {
        self.dims.len()
    }

    /// Quadrature weight shared by every node.
    pub fn weight(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi(&self, mut index: usize) -> Vec<usize> {
        let mut m = vec![0; self.dims.len()];
        for a in 0..self.dims.len() {
            m[a] = index / self.strides[a];
            index %= self.strides[a];
        }
        m
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn coord(&self, index: usize) -> Vec<f64> {
        self.multi(index)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + (i as f64 + 0.5) * self.spacing[a])
            .collect()
    }

    /// Pairs (i, i + e_axis) of nodes joined by a mesh face inside the mesh.
    pub fn faces(&self, axis: usize) -> Vec<(usize, usize)> {
        (0..self.len())
            .filter(|&i| self.multi(i)[axis] + 1 < self.dims[axis])
            .map(|i| (i, i + self.strides[axis]))
            .collect()
    }

    /// Midpoint of the face between node `i` and its upper neighbour along `axis`.
    pub fn face_midpoint(&self, i: usize, axis: usize) -> Vec<f64> {
        let mut c = self.coord(i);
        c[axis] += 0.5 * self.spacing[axis];
        c
    }

    /// Nodes on the low (`high == false`) or high face of `axis`, ordered
    /// row-major over the remaining axes.
    pub fn face_nodes(&self, axis: usize, high: bool) -> Vec<usize> {
        let fixed = if high { self.dims[axis] - 1 } else { 0 };
        (0..self.len()).filter(|&i| self.multi(i)[axis] == fixed).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    Interior,
    TransversalBoundary,
    LateralBoundary,
}

/// Discretised periodicity cell.
#[derive(Clone, Debug)]
pub struct CellGrid {
    pub spec: GridSpec,
    pub mesh: Mesh,
    pub weights: Vec<f64>,
    pub class: Vec<NodeClass>,
    pub interior: Vec<usize>,
    pub transversal_boundary: Vec<usize>,
    /// Nodes adjacent to the lateral boundary of the cell.
    pub lateral_boundary: Vec<usize>,
}

impl CellGrid {
    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn weight(&self) -> f64 {
        self.mesh.weight()
    }

    pub fn coords(&self, i: usize) -> Vec<f64> {
        self.mesh.coord(i)
    }

    /// Transversal coordinate of a node, 0 in whole-space mode.
    pub fn z(&self, i: usize) -> f64 {
        if self.spec.has_transversal() {
            *self.mesh.coord(i).last().unwrap()
        } else {
            0.0
        }
    }

    /// Number of nodes on one lateral face of the cell.
    pub fn face_len(&self) -> usize {
        self.len() / self.spec.mesh_lateral
    }
}

pub fn build_cell_grid(spec: &GridSpec) -> Result<CellGrid> {
    spec.validate()?;
    let n = spec.lateral_dim;
    let mut dims = vec![spec.mesh_lateral; n];
    let mut spacing: Vec<f64> = (0..n).map(|a| spec.lateral_spacing(a)).collect();
    if spec.has_transversal() {
        dims.push(spec.mesh_transversal);
        spacing.push(spec.transversal_spacing());
    }
    let origin = vec![0.0; dims.len()];
    let mesh = Mesh::new(dims, spacing, origin, n);
    let mut class = Vec::with_capacity(mesh.len());
    let (mut interior, mut transversal_boundary, mut lateral_boundary) = (vec![], vec![], vec![]);
    for i in 0..mesh.len() {
        let m = mesh.multi(i);
        let lateral = (0..n).any(|a| m[a] == 0 || m[a] == mesh.dims[a] - 1);
        let transversal = spec.has_transversal() && (m[n] == 0 || m[n] == mesh.dims[n] - 1);
        let c = if lateral {
            lateral_boundary.push(i);
            NodeClass::LateralBoundary
        } else if transversal {
            transversal_boundary.push(i);
            NodeClass::TransversalBoundary
        } else {
            interior.push(i);
            NodeClass::Interior
        };
        class.push(c);
    }
    let weights = vec![mesh.weight(); mesh.len()];
    Ok(CellGrid { spec: spec.clone(), mesh, weights, class, interior, transversal_boundary, lateral_boundary })
}

/// Background potential V0, a function of the transversal variable only.
#[derive(Clone)]
pub struct TransversalPotential {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub label: String,
}

impl fmt::Debug for TransversalPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransversalPotential({})", self.label)
    }
}

impl TransversalPotential {
    pub fn new(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TransversalPotential { f: Arc::new(f), label: label.into() }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// V0 given by an expression in `z`.
    pub fn from_expr(expr: &crate::expr::Expr) -> Result<Self> {
        let e = expr.clone();
        e.eval(crate::expr::Point::default())?;
        Ok(Self::new(e.source().to_string(), move |z| {
            e.eval(crate::expr::Point { z, ..Default::default() }).unwrap_or(f64::NAN)
        }))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), move |_| c)
    }

    pub fn eval(&self, z: f64) -> f64 {
        (self.f)(z)
    }

    /// sup |V0| over the transversal nodes of the spec.
    pub fn sup_abs(&self, spec: &GridSpec) -> f64 {
        if !spec.has_transversal() {
            return self.eval(0.0).abs();
        }
        let h = spec.transversal_spacing();
        (0..spec.mesh_transversal).map(|j| self.eval((j as f64 + 0.5) * h).abs()).fold(0.0, f64::max)
    }
}

/// Values of a boundary density on the lateral faces of one cell, in the
/// face ordering of [`Mesh::face_nodes`]. `faces[a][0]` is the low face of
/// axis `a`, `faces[a][1]` the high face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MezincescuDensity {
    pub faces: Vec<[Vec<f64>; 2]>,
}

impl MezincescuDensity {
    pub fn zero(cell: &CellGrid) -> Self {
        let f = cell.face_len();
        MezincescuDensity { faces: vec![[vec![0.0; f], vec![0.0; f]]; cell.spec.lateral_dim] }
    }

    pub fn sup_abs(&self) -> f64 {
        self.faces.iter().flat_map(|p| p.iter().flatten()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise a*self + b*other.
    pub fn lin_comb(&self, a: f64, other: &MezincescuDensity, b: f64) -> Self {
        let faces = self
            .faces
            .iter()
            .zip(&other.faces)
            .map(|(p, q)| {
                [0, 1].map(|s| p[s].iter().zip(&q[s]).map(|(x, y)| a * x + b * y).collect::<Vec<f64>>())
            })
            .collect();
        MezincescuDensity { faces }
    }
}

/// Lateral boundary condition on the boundary of a cell or box.
#[derive(Clone, Debug, PartialEq)]
pub enum LateralBc {
    Dirichlet,
    Periodic,
    /// Robin condition du/dnu = rho u with the attached density.
    Mezincescu(Option<MezincescuDensity>),
}

impl LateralBc {
    /// Neumann is the Robin closure with zero density.
    pub fn neumann(cell: &CellGrid) -> Self {
        LateralBc::Mezincescu(Some(MezincescuDensity::zero(cell)))
    }
}

/// Ghost factor realising du/dnu = rho u across a face at distance h.
pub fn robin_ghost_factor(rho: f64, h: f64) -> Result<f64> {
    let den = 1.0 - 0.5 * h * rho;
    if !(den > 1e-12) || !rho.is_finite() {
        return Err(Error::DensityUndefined(format!("h*rho/2 = {} leaves no admissible ghost value", 0.5 * h * rho)));
    }
    Ok((1.0 + 0.5 * h * rho) / den)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Closure {
    Periodic,
    Ghost(f64),
}

/// Assembles -Laplacian + V0 on `mesh`; `lateral(axis, high, multi)` closes
/// the lateral faces.
fn assemble_laplacian(
    mesh: &Mesh,
    spec: &GridSpec,
    v0: &TransversalPotential,
    lateral: &dyn Fn(usize, bool, &[usize]) -> Result<Closure>,
) -> Result<SparseHermitian> {
    let n = mesh.len();
    let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(n * (2 * mesh.axes() + 1));
    for i in 0..n {
        let m = mesh.multi(i);
        let z = if spec.has_transversal() { mesh.coord(i)[mesh.lateral_axes] } else { 0.0 };
        let mut diag = v0.eval(z);
        for a in 0..mesh.axes() {
            let h2 = mesh.spacing[a] * mesh.spacing[a];
            diag += 2.0 / h2;
            for high in [false, true] {
                let at_edge = if high { m[a] + 1 == mesh.dims[a] } else { m[a] == 0 };
                if !at_edge {
                    let j = if high { i + mesh.stride(a) } else { i - mesh.stride(a) };
                    t.push((i, j, -1.0 / h2));
                    continue;
                }
                let closure = if a < mesh.lateral_axes {
                    lateral(a, high, &m)?
                } else {
                    Closure::Ghost(spec.transversal_bc[usize::from(high)].ghost_factor())
                };
                match closure {
                    Closure::Periodic => {
                        let wrap = (mesh.dims[a] - 1) * mesh.stride(a);
                        let j = if high { i - wrap } else { i + wrap };
                        t.push((i, j, -1.0 / h2));
                    }
                    Closure::Ghost(g) => diag -= g / h2,
                }
            }
        }
        t.push((i, i, diag));
    }
    Ok(SparseHermitian::from_real_triplets(n, t))
}

/// Position of a boundary node inside the face ordering of a single cell.
fn cell_face_index(cell_dims: &[usize], axis: usize, multi: &[usize]) -> usize {
    let mut idx = 0;
    for (a, &d) in cell_dims.iter().enumerate() {
        if a == axis {
            continue;
        }
        idx = idx * d + multi[a] % d;
    }
    idx
}

fn density_closure(
    density: &Option<MezincescuDensity>,
    cell_dims: &[usize],
    spacing: &[f64],
    axis: usize,
    high: bool,
    multi: &[usize],
) -> Result<Closure> {
    let rho = density.as_ref().ok_or(Error::MissingDensity)?;
    let face = &rho.faces[axis][usize::from(high)];
    let k = cell_face_index(cell_dims, axis, multi);
    Ok(Closure::Ghost(robin_ghost_factor(face[k], spacing[axis])?))
}

/// -Laplacian + V0 on a single cell with the given lateral condition.
pub fn assemble_h0(grid: &CellGrid, v0: &TransversalPotential, lateral_bc: &LateralBc) -> Result<SparseHermitian> {
    let dims = grid.mesh.dims.clone();
    let spacing = grid.mesh.spacing.clone();
    let closure = |a: usize, high: bool, m: &[usize]| -> Result<Closure> {
        match lateral_bc {
            LateralBc::Periodic => Ok(Closure::Periodic),
            LateralBc::Dirichlet => Ok(Closure::Ghost(-1.0)),
            LateralBc::Mezincescu(rho) => density_closure(rho, &dims, &spacing, a, high, m),
        }
    };
    assemble_laplacian(&grid.mesh, &grid.spec, v0, &closure)
}

/// Box of N^n cells with lower corner at the lattice point alpha.
#[derive(Clone, Debug)]
pub struct BoxGrid {
    pub spec: GridSpec,
    pub alpha: Vec<i64>,
    pub n_cells: usize,
    pub lateral_bc: LateralBc,
    pub mesh: Mesh,
    /// Lattice points of the cells, row-major over the local lattice index.
    pub cells: Vec<Vec<i64>>,
    /// For each cell, the box node of every cell-grid node (cell ordering).
    pub cell_nodes: Vec<Vec<usize>>,
    cell_dims: Vec<usize>,
}

impl BoxGrid {
    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn weight(&self) -> f64 {
        self.mesh.weight()
    }

    /// Local lattice offset (k - alpha) of cell `c`.
    pub fn local_cell(&self, c: usize) -> Vec<usize> {
        self.cells[c].iter().zip(&self.alpha).map(|(k, a)| (k - a) as usize).collect()
    }

    /// Cell containing box node `i`.
    pub fn cell_of_node(&self, i: usize) -> usize {
        let m = self.mesh.multi(i);
        let mut c = 0;
        for a in 0..self.spec.lateral_dim {
            c = c * self.n_cells + m[a] / self.cell_dims[a];
        }
        c
    }

    /// Indicator over nodes of the cells selected by `pick(local offset)`.
    pub fn mask_cells(&self, pick: impl Fn(&[usize]) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for c in 0..self.cell_count() {
            if pick(&self.local_cell(c)) {
                for &i in &self.cell_nodes[c] {
                    mask[i] = true;
                }
            }
        }
        mask
    }

    pub fn with_bc(&self, lateral_bc: LateralBc) -> Self {
        BoxGrid { lateral_bc, ..self.clone() }
    }
}

pub fn build_box_grid(spec: &GridSpec, alpha: &[i64], n_cells: usize, lateral_bc: LateralBc) -> Result<BoxGrid> {
    spec.validate()?;
    if n_cells == 0 {
        return Err(Error::InvalidGrid("box side count must be at least 1".into()));
    }
    if alpha.len() != spec.lateral_dim {
        return Err(Error::InvalidGrid("lattice point dimension mismatch".into()));
    }
    let cell = build_cell_grid(spec)?;
    let n = spec.lateral_dim;
    let cell_dims = cell.mesh.dims.clone();
    let mut dims = cell_dims.clone();
    let mut origin = vec![0.0; dims.len()];
    for a in 0..n {
        dims[a] *= n_cells;
        origin[a] = alpha[a] as f64 * spec.lateral_cell_lengths[a];
    }
    let mesh = Mesh::new(dims, cell.mesh.spacing.clone(), origin, n);
    let cell_count = n_cells.pow(n as u32);
    let mut cells = Vec::with_capacity(cell_count);
    let mut cell_nodes = Vec::with_capacity(cell_count);
    for c in 0..cell_count {
        let mut local = vec![0usize; n];
        let mut r = c;
        for a in (0..n).rev() {
            local[a] = r % n_cells;
            r /= n_cells;
        }
        cells.push(local.iter().zip(alpha).map(|(&l, &a)| a + l as i64).collect());
        let nodes = (0..cell.len())
            .map(|j| {
                let mut m = cell.mesh.multi(j);
                for a in 0..n {
                    m[a] += local[a] * cell_dims[a];
                }
                mesh.index(&m)
            })
            .collect();
        cell_nodes.push(nodes);
    }
    Ok(BoxGrid {
        spec: spec.clone(),
        alpha: alpha.to_vec(),
        n_cells,
        lateral_bc,
        mesh,
        cells,
        cell_nodes,
        cell_dims,
    })
}

/// -Laplacian + V0 on a box with its recorded lateral condition.
pub fn assemble_box_h0(grid: &BoxGrid, v0: &TransversalPotential) -> Result<SparseHermitian> {
    let closure = |a: usize, high: bool, m: &[usize]| -> Result<Closure> {
        match &grid.lateral_bc {
            LateralBc::Periodic => Ok(Closure::Periodic),
            LateralBc::Dirichlet => Ok(Closure::Ghost(-1.0)),
            LateralBc::Mezincescu(rho) => density_closure(rho, &grid.cell_dims, &grid.mesh.spacing, a, high, m),
        }
    };
    assemble_laplacian(&grid.mesh, &grid.spec, v0, &closure)
}

/// Sum over mesh faces of w * conj(D u) * D v, where D is the difference
/// quotient across the face. Periodic wrap faces are included when
/// `periodic` is set; faces on the outer boundary are skipped otherwise.
pub fn gradient_form(mesh: &Mesh, periodic: bool, u: &[crate::sparse::C64], v: &[crate::sparse::C64]) -> crate::sparse::C64 {
    let w = mesh.weight();
    let mut s = crate::sparse::C64::new(0.0, 0.0);
    for i in 0..mesh.len() {
        let m = mesh.multi(i);
        for a in 0..mesh.axes() {
            let h = mesh.spacing[a];
            let j = if m[a] + 1 < mesh.dims[a] {
                i + mesh.stride(a)
            } else if periodic && a < mesh.lateral_axes {
                i - (mesh.dims[a] - 1) * mesh.stride(a)
            } else {
                continue;
            };
            s += ((u[j] - u[i]) / h).conj() * ((v[j] - v[i]) / h) * w;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::C64;
    use crate::spectral;

    fn seq(n: usize, seed: u64) -> Vec<C64> {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let a = ((x >> 11) as f64) / (1u64 << 53) as f64 - 0.5;
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let b = ((x >> 11) as f64) / (1u64 << 53) as f64 - 0.5;
                C64::new(a, b)
            })
            .collect()
    }

    #[test]
    fn layer_cell_has_64_nodes_and_area_pi() {
        let spec = GridSpec::layer(vec![1.0], std::f64::consts::PI, 8, 8, [TransversalBc::Dirichlet; 2]);
        let g = build_cell_grid(&spec).unwrap();
        assert_eq!(g.len(), 64);
        let total: f64 = g.weights.iter().sum();
        assert!((total - std::f64::consts::PI).abs() <= 1e-12 * std::f64::consts::PI);
        assert_eq!(g.interior.len() + g.transversal_boundary.len() + g.lateral_boundary.len(), 64);
    }

    #[test]
    fn whole_space_cell_weights_sum_to_one() {
        let g = build_cell_grid(&GridSpec::whole_space(vec![1.0], 16)).unwrap();
        assert_eq!(g.len(), 16);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_layer_weight_sum() {
        // Midpoint quadrature of the constant 1 over (0,1)^2 x (0,pi).
        let spec = GridSpec::layer(vec![1.0, 1.0], std::f64::consts::PI, 8, 8, [TransversalBc::Neumann; 2]);
        let g = build_cell_grid(&spec).unwrap();
        let expected = 3.141592653589793;
        assert!((g.weights.iter().sum::<f64>() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn rejects_small_mesh_and_bad_lengths() {
        assert!(build_cell_grid(&GridSpec::whole_space(vec![1.0], 4)).is_err());
        assert!(build_cell_grid(&GridSpec::whole_space(vec![0.0], 16)).is_err());
        let spec = GridSpec::layer(vec![1.0], -1.0, 8, 8, [TransversalBc::Dirichlet; 2]);
        assert!(build_cell_grid(&spec).is_err());
    }

    #[test]
    fn dirichlet_closed_form_smallest_eigenvalue() {
        let spec = GridSpec::whole_space(vec![1.0], 8);
        let mut g = build_cell_grid(&spec).unwrap();
        // Four-node mesh with h = 1/4 built directly; MIN_MESH only guards user input.
        g.mesh = Mesh::new(vec![4], vec![0.25], vec![0.0], 1);
        let a = assemble_h0(&g, &TransversalPotential::zero(), &LateralBc::Dirichlet).unwrap();
        let ev = spectral::dense_eigenvalues(&a);
        let expected = 32.0 * (1.0 - (std::f64::consts::PI / 4.0).cos());
        assert!((ev[0] - expected).abs() < 1e-10, "{}", ev[0]);
    }

    #[test]
    fn constant_potential_shifts_spectrum() {
        let g = build_cell_grid(&GridSpec::layer(vec![1.0], 1.0, 8, 8, [TransversalBc::Dirichlet; 2])).unwrap();
        let a0 = assemble_h0(&g, &TransversalPotential::zero(), &LateralBc::Periodic).unwrap();
        let a1 = assemble_h0(&g, &TransversalPotential::constant(2.5), &LateralBc::Periodic).unwrap();
        let (e0, e1) = (spectral::dense_eigenvalues(&a0), spectral::dense_eigenvalues(&a1));
        for (x, y) in e0.iter().zip(&e1) {
            assert!((y - x - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn periodic_laplacian_has_constant_ground_state() {
        let g = build_cell_grid(&GridSpec::whole_space(vec![1.0], 16)).unwrap();
        let a = assemble_h0(&g, &TransversalPotential::zero(), &LateralBc::Periodic).unwrap();
        let ones = vec![C64::new(1.0, 0.0); 16];
        assert!(a.matvec(&ones).iter().all(|v| v.norm() < 1e-10));
        assert!(spectral::dense_eigenvalues(&a)[0].abs() < 1e-10);
    }

    #[test]
    fn mezincescu_requires_density() {
        let g = build_cell_grid(&GridSpec::whole_space(vec![1.0], 16)).unwrap();
        let r = assemble_h0(&g, &TransversalPotential::zero(), &LateralBc::Mezincescu(None));
        assert_eq!(r.unwrap_err(), Error::MissingDensity);
    }

    #[test]
    fn box_with_one_periodic_cell_matches_cell() {
        let spec = GridSpec::layer(vec![1.0], 1.0, 8, 8, [TransversalBc::Dirichlet, TransversalBc::Neumann]);
        let g = build_cell_grid(&spec).unwrap();
        let b = build_box_grid(&spec, &[0], 1, LateralBc::Periodic).unwrap();
        let v0 = TransversalPotential::new("z", |z| z);
        let a = assemble_h0(&g, &v0, &LateralBc::Periodic).unwrap();
        let ab = assemble_box_h0(&b, &v0).unwrap();
        assert_eq!(a.to_dense(), ab.to_dense());
        assert_eq!(b.cell_nodes[0], (0..g.len()).collect::<Vec<_>>());
    }

    #[test]
    fn box_cells_partition_nodes() {
        let spec = GridSpec::whole_space(vec![1.0], 8);
        let b = build_box_grid(&spec, &[0], 4, LateralBc::Dirichlet).unwrap();
        assert_eq!(b.cell_count(), 4);
        let mut seen = vec![0; b.len()];
        for nodes in &b.cell_nodes {
            nodes.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
        for (c, nodes) in b.cell_nodes.iter().enumerate() {
            assert!(nodes.iter().all(|&i| b.cell_of_node(i) == c));
        }
    }

    #[test]
    fn planar_box_node_count() {
        let spec = GridSpec::layer(vec![1.0, 2.0], 1.0, 8, 8, [TransversalBc::Dirichlet; 2]);
        let cell = build_cell_grid(&spec).unwrap();
        let b = build_box_grid(&spec, &[2, -1], 3, LateralBc::Periodic).unwrap();
        assert_eq!(b.cell_count(), 9);
        assert_eq!(b.len(), 9 * cell.len());
        assert_eq!(b.cells[0], vec![2, -1]);
        assert_eq!(b.cells[8], vec![4, 1]);
    }

    #[test]
    fn dirichlet_dominates_periodic_on_a_box() {
        let spec = GridSpec::layer(vec![1.0], 1.0, 8, 8, [TransversalBc::Dirichlet; 2]);
        let v0 = TransversalPotential::zero();
        let d = build_box_grid(&spec, &[0], 2, LateralBc::Dirichlet).unwrap();
        let p = d.with_bc(LateralBc::Periodic);
        let ed = spectral::dense_eigenvalues(&assemble_box_h0(&d, &v0).unwrap())[0];
        let ep = spectral::dense_eigenvalues(&assemble_box_h0(&p, &v0).unwrap())[0];
        assert!(ed >= ep - 1e-10);
    }

    #[test]
    fn green_identity_periodic_and_neumann() {
        for (bc, periodic) in [(None, true), (Some(()), false)] {
            let spec = GridSpec::layer(vec![1.0, 1.5], 0.7, 8, 8, [TransversalBc::Neumann; 2]);
            let g = build_cell_grid(&spec).unwrap();
            let lateral = match bc {
                None => LateralBc::Periodic,
                Some(()) => LateralBc::neumann(&g),
            };
            let a = assemble_h0(&g, &TransversalPotential::zero(), &lateral).unwrap();
            let (u, v) = (seq(g.len(), 3), seq(g.len(), 7));
            let w = g.weight();
            let lhs: C64 = a.matvec(&u).iter().zip(&v).map(|(x, y)| x.conj() * y * w).sum();
            let rhs = gradient_form(&g.mesh, periodic, &u, &v);
            let nu = (u.iter().map(|x| x.norm_sqr()).sum::<f64>() * w).sqrt();
            let nv = (v.iter().map(|x| x.norm_sqr()).sum::<f64>() * w).sqrt();
            assert!((lhs - rhs).norm() <= 1e-10 * nu * nv * 1e3, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transversal_refinement_is_second_order() {
        // Dirichlet layer of width 1: continuum ground energy pi^2.
        let mut errs = vec![];
        let ms = [8usize, 16, 32, 64];
        for &m in &ms {
            let spec = GridSpec::layer(vec![1.0], 1.0, 8, m, [TransversalBc::Dirichlet; 2]);
            let g = build_cell_grid(&spec).unwrap();
            let a = assemble_h0(&g, &TransversalPotential::zero(), &LateralBc::Periodic).unwrap();
            let e = spectral::dense_eigenvalues(&a)[0];
            errs.push((e - std::f64::consts::PI.powi(2)).abs());
        }
        let xs: Vec<f64> = ms.iter().map(|&m| (1.0 / m as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let slope = crate::stats::linear_fit(&xs, &ys).slope;
        assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
    }

    #[test]
    fn robin_factor_rejects_blowup() {
        assert!(robin_ghost_factor(0.0, 0.1).unwrap() == 1.0);
        assert!(robin_ghost_factor(40.0, 0.1).is_err());
    }
}
