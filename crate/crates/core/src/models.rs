//! Single-cell perturbation families L(t) = t L₁ + t² L₂ + t³ L₃(t).
//!
//! Every model is stored as two cell-level Hermitian matrices acting on
//! nodal values. First-order and diagonal second-order terms live on mesh
//! faces, which keeps the discrete forms symmetric and confines the
//! operators to the cell. The magnetic model uses the Peierls expansion of
//! |u_j - e^{iθ}u_i|², so L₁ is purely imaginary and antisymmetric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Evaluator, Expr, Point};
use crate::grid::{CellGrid, GridSpec, Mesh, TransversalPotential};
use crate::sparse::{SparseHermitian, C64};

impl Default for Expr {
    fn default() -> Self {
        Expr::constant(0.0)
    }
}

/// Coefficients of a general second-order term: Σ ∂_k Q_kj ∂_j + i Σ (Q_j ∂_j + ∂_j Q_j) + Q_0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    #[serde(default)]
    pub second: Vec<Vec<Expr>>,
    #[serde(default)]
    pub first: Vec<Expr>,
    #[serde(default)]
    pub zeroth: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelParams {
    Potential {
        w1: Expr,
        #[serde(default)]
        w2: Expr,
    },
    Integral {
        k1: Expr,
        #[serde(default)]
        k2: Expr,
    },
    Diffop {
        order1: Coefficients,
        #[serde(default)]
        order2: Coefficients,
    },
    Magnetic {
        a: Vec<Expr>,
        #[serde(default)]
        w1: Expr,
        #[serde(default)]
        w2: Expr,
    },
    Metric {
        q1: Vec<Vec<Expr>>,
        #[serde(default)]
        q2: Vec<Vec<Expr>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Potential,
    Integral,
    Diffop,
    Magnetic,
    Metric,
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Potential { .. } => ModelKind::Potential,
            ModelParams::Integral { .. } => ModelKind::Integral,
            ModelParams::Diffop { .. } => ModelKind::Diffop,
            ModelParams::Magnetic { .. } => ModelKind::Magnetic,
            ModelParams::Metric { .. } => ModelKind::Metric,
        }
    }

    pub fn potential(w1: &str, w2: &str) -> Result<Self> {
        Ok(ModelParams::Potential { w1: Expr::parse(w1)?, w2: Expr::parse(w2)? })
    }
}

/// Sup-norm data of the coefficients, the input to the bound constants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientNorms {
    /// max over orders of sup |zero-order coefficient|
    pub zeroth: f64,
    /// sup of Σ_j |Q_j| (sup |A| for the magnetic model)
    pub first: f64,
    /// sup of Σ_kj |Q_kj|
    pub second: f64,
    /// sup of Σ_kj |∇Q_kj|, estimated on the mesh
    pub second_gradient: f64,
    /// max Hilbert-Schmidt norm of the kernels
    pub kernel_hs: f64,
    /// max Hilbert-Schmidt norm of |x - y| K
    pub kernel_moment: f64,
    /// sup |A|² + sup |W₂| for the magnetic model
    pub magnetic_order2: f64,
    pub max_spacing: f64,
}

/// Constants of the relative-boundedness and commutator hypotheses for one
/// cutoff norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub cutoff_norm: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub c11: f64,
}

#[derive(Clone, Debug)]
pub struct PerturbationModel {
    pub params: ModelParams,
    pub spec: GridSpec,
    pub l1: SparseHermitian,
    pub l2: SparseHermitian,
    /// L₃(t) = l3 · I, a synthetic hook; its Lipschitz constant in t is 0.
    pub l3: f64,
    /// L₂ ≤ 0 as a form, checked on the assembled matrix.
    pub order2_nonpositive: bool,
    pub real: bool,
    pub norms: CoefficientNorms,
}

fn evaluators(list: &[Expr]) -> Result<Vec<Evaluator>> {
    list.iter().map(|e| e.evaluator()).collect()
}

fn point(grid: &CellGrid, c: &[f64]) -> Point {
    Point::from_coords(c, grid.spec.lateral_dim, grid.spec.has_transversal())
}

struct Builder<'a> {
    grid: &'a CellGrid,
    t: Vec<(usize, usize, C64)>,
}

impl<'a> Builder<'a> {
    fn new(grid: &'a CellGrid) -> Self {
        Builder { grid, t: Vec::new() }
    }

    fn mesh(&self) -> &Mesh {
        &self.grid.mesh
    }

    fn diagonal(&mut self, f: &Evaluator) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for i in 0..self.grid.len() {
            let v = f.eval(point(self.grid, &self.grid.coords(i)))?;
            sup = sup.max(v.abs());
            self.t.push((i, i, C64::new(v, 0.0)));
        }
        Ok(sup)
    }

    /// -Dᵀ Q D along `axis` with Q sampled at face midpoints.
    fn face_second(&mut self, axis: usize, q: &Evaluator) -> Result<()> {
        let h2 = self.mesh().spacing[axis].powi(2);
        for (i, j) in self.mesh().faces(axis) {
            let v = q.eval(point(self.grid, &self.mesh().face_midpoint(i, axis)))? / h2;
            let v = C64::new(v, 0.0);
            self.t.extend([(i, i, -v), (j, j, -v), (i, j, v), (j, i, v)]);
        }
        Ok(())
    }

    /// i(Q ∂ + ∂ Q) along `axis` with Q sampled at face midpoints.
    fn face_first(&mut self, axis: usize, q: &Evaluator) -> Result<()> {
        let h = self.mesh().spacing[axis];
        for (i, j) in self.mesh().faces(axis) {
            let v = q.eval(point(self.grid, &self.mesh().face_midpoint(i, axis)))? / h;
            self.t.push((i, j, C64::new(0.0, v)));
            self.t.push((j, i, C64::new(0.0, -v)));
        }
        Ok(())
    }

    /// Second-order Peierls term: Q_f² Re(conj(u_i) u_j) per face.
    fn face_peierls(&mut self, axis: usize, q: &Evaluator) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for (i, j) in self.mesh().faces(axis) {
            let a = q.eval(point(self.grid, &self.mesh().face_midpoint(i, axis)))?;
            sup = sup.max(a * a);
            let v = C64::new(0.5 * a * a, 0.0);
            self.t.extend([(i, j, v), (j, i, v)]);
        }
        Ok(sup)
    }

    /// Rows of the nodal difference along `axis`: centred inside, one-sided at the ends.
    fn centred_row(&self, i: usize, axis: usize) -> Vec<(usize, f64)> {
        let m = self.mesh();
        let h = m.spacing[axis];
        let k = m.multi(i)[axis];
        let s = m.stride(axis);
        let last = m.dims[axis] - 1;
        if k == 0 {
            vec![(i + s, 1.0 / h), (i, -1.0 / h)]
        } else if k == last {
            vec![(i, 1.0 / h), (i - s, -1.0 / h)]
        } else {
            vec![(i + s, 0.5 / h), (i - s, -0.5 / h)]
        }
    }

    /// -C_kᵀ Q C_j for an off-diagonal pair, Q sampled at nodes.
    fn mixed_second(&mut self, k: usize, j: usize, q: &Evaluator) -> Result<()> {
        for n in 0..self.grid.len() {
            let v = q.eval(point(self.grid, &self.grid.coords(n)))?;
            if v == 0.0 {
                continue;
            }
            let rk = self.centred_row(n, k);
            let rj = self.centred_row(n, j);
            for &(p, cp) in &rk {
                for &(r, cr) in &rj {
                    self.t.push((p, r, C64::new(-v * cp * cr, 0.0)));
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> SparseHermitian {
        SparseHermitian::from_triplets(self.grid.len(), self.t)
    }
}

struct Sups {
    zeroth: f64,
    first: f64,
    second: f64,
    second_gradient: f64,
}

/// Nodal sup of Σ|f_j| over a list of expressions, plus a difference-quotient
/// estimate of Σ sup|∇f_j|.
fn node_sups(grid: &CellGrid, fs: &[&Evaluator]) -> Result<(f64, f64)> {
    let mut vals = vec![vec![0.0; grid.len()]; fs.len()];
    for (k, f) in fs.iter().enumerate() {
        for i in 0..grid.len() {
            vals[k][i] = f.eval(point(grid, &grid.coords(i)))?;
        }
    }
    let sup = (0..grid.len()).map(|i| vals.iter().map(|v| v[i].abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut grad = 0.0;
    for v in &vals {
        let mut g: f64 = 0.0;
        for a in 0..grid.mesh.axes() {
            for (i, j) in grid.mesh.faces(a) {
                g = g.max((v[j] - v[i]).abs() / grid.mesh.spacing[a]);
            }
        }
        grad += g;
    }
    Ok((sup, grad))
}

/// Checks that the coefficients vanish on the lateral boundary of the cell.
fn check_lateral_vanishing(grid: &CellGrid, name: &str, fs: &[&Evaluator]) -> Result<()> {
    let n = grid.spec.lateral_dim;
    for a in 0..n {
        for x in [0.0, grid.spec.lateral_cell_lengths[a]] {
            for i in grid.mesh.face_nodes(a, false) {
                let mut c = grid.coords(i);
                c[a] = x;
                for f in fs {
                    let v = f.eval(point(grid, &c))?;
                    if v.abs() > 1e-9 {
                        return Err(Error::InvalidModel(format!(
                            "{name} coefficient equals {v:.3e} on the lateral boundary at {c:?}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn square_matrix(q: &[Vec<Expr>], d: usize, what: &str) -> Result<Vec<Vec<Evaluator>>> {
    if q.is_empty() {
        return Ok(Vec::new());
    }
    if q.len() != d || q.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidModel(format!("{what} must be a {d}x{d} matrix")));
    }
    let m: Vec<Vec<Evaluator>> = q.iter().map(|r| evaluators(r)).collect::<Result<_>>()?;
    for k in 0..d {
        for j in 0..k {
            if q[k][j] != q[j][k] {
                // Distinct sources may still agree numerically; compare on a probe point.
                let p = Point { x: 0.37, y: 0.61, z: 0.29, ..Point::default() };
                if (m[k][j].eval(p)? - m[j][k].eval(p)?).abs() > 1e-12 {
                    return Err(Error::InvalidModel(format!("{what} is not symmetric at ({k},{j})")));
                }
            }
        }
    }
    Ok(m)
}

fn assemble_coefficients(grid: &CellGrid, c: &Coefficients, what: &str) -> Result<(SparseHermitian, Sups)> {
    let d = grid.mesh.axes();
    let second = square_matrix(&c.second, d, what)?;
    if !c.first.is_empty() && c.first.len() != d {
        return Err(Error::InvalidModel(format!("{what} first-order part needs {d} components")));
    }
    let first = evaluators(&c.first)?;
    let zeroth = c.zeroth.evaluator()?;
    let mut b = Builder::new(grid);
    for k in 0..second.len() {
        for j in 0..second.len() {
            if k == j {
                b.face_second(k, &second[k][k])?;
            } else {
                b.mixed_second(k, j, &second[k][j])?;
            }
        }
    }
    for (j, q) in first.iter().enumerate() {
        b.face_first(j, q)?;
    }
    let zeroth_sup = b.diagonal(&zeroth)?;
    let flat2: Vec<&Evaluator> = second.iter().flatten().collect();
    let flat1: Vec<&Evaluator> = first.iter().collect();
    let mut lateral: Vec<&Evaluator> = flat2.clone();
    lateral.extend(flat1.iter().copied());
    check_lateral_vanishing(grid, what, &lateral)?;
    let (s2, g2) = if flat2.is_empty() { (0.0, 0.0) } else { node_sups(grid, &flat2)? };
    let (s1, _) = if flat1.is_empty() { (0.0, 0.0) } else { node_sups(grid, &flat1)? };
    Ok((b.finish(), Sups { zeroth: zeroth_sup, first: s1, second: s2, second_gradient: g2 }))
}

fn kernel_matrix(grid: &CellGrid, k: &Expr) -> Result<(SparseHermitian, f64, f64)> {
    let f = k.evaluator()?;
    let w = grid.weight();
    let n = grid.len();
    let pts: Vec<Point> = (0..n).map(|i| point(grid, &grid.coords(i))).collect();
    let coords: Vec<Vec<f64>> = (0..n).map(|i| grid.coords(i)).collect();
    let (mut hs, mut moment) = (0.0, 0.0);
    let mut t = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v = f.eval(pts[i].with_second(pts[j]))?;
            let dist2: f64 = coords[i].iter().zip(&coords[j]).map(|(a, b)| (a - b).powi(2)).sum();
            hs += v * v * w * w;
            moment += v * v * dist2 * w * w;
            if v != 0.0 {
                t.push((i, j, C64::new(v * w, 0.0)));
            }
        }
    }
    Ok((SparseHermitian::from_triplets(n, t), hs.sqrt(), moment.sqrt()))
}

/// Largest eigenvalue of a Hermitian matrix (dense).
fn max_eigenvalue(a: &SparseHermitian) -> f64 {
    *crate::spectral::dense_eigenvalues(a).last().unwrap_or(&0.0)
}

pub fn build_model(params: &ModelParams, grid: &CellGrid) -> Result<PerturbationModel> {
    let d = grid.mesh.axes();
    let mut norms = CoefficientNorms {
        max_spacing: grid.mesh.spacing.iter().cloned().fold(0.0, f64::max),
        ..CoefficientNorms::default()
    };
    let (l1, l2) = match params {
        ModelParams::Potential { w1, w2 } => {
            let mut b1 = Builder::new(grid);
            let s1 = b1.diagonal(&w1.evaluator()?)?;
            let mut b2 = Builder::new(grid);
            let s2 = b2.diagonal(&w2.evaluator()?)?;
            norms.zeroth = s1.max(s2);
            (b1.finish(), b2.finish())
        }
        ModelParams::Integral { k1, k2 } => {
            let (m1, hs1, mo1) = kernel_matrix(grid, k1)?;
            let (m2, hs2, mo2) = kernel_matrix(grid, k2)?;
            norms.kernel_hs = hs1.max(hs2);
            norms.kernel_moment = mo1.max(mo2);
            (m1, m2)
        }
        ModelParams::Diffop { order1, order2 } => {
            let (m1, s1) = assemble_coefficients(grid, order1, "order-1")?;
            let (m2, s2) = assemble_coefficients(grid, order2, "order-2")?;
            norms.zeroth = s1.zeroth.max(s2.zeroth);
            norms.first = s1.first.max(s2.first);
            norms.second = s1.second.max(s2.second);
            norms.second_gradient = s1.second_gradient.max(s2.second_gradient);
            (m1, m2)
        }
        ModelParams::Metric { q1, q2 } => {
            let c1 = Coefficients { second: q1.clone(), ..Coefficients::default() };
            let c2 = Coefficients { second: q2.clone(), ..Coefficients::default() };
            let (m1, s1) = assemble_coefficients(grid, &c1, "order-1 metric")?;
            let (m2, s2) = assemble_coefficients(grid, &c2, "order-2 metric")?;
            norms.second = s1.second.max(s2.second);
            norms.second_gradient = s1.second_gradient.max(s2.second_gradient);
            (m1, m2)
        }
        ModelParams::Magnetic { a, w1, w2 } => {
            if a.len() != d {
                return Err(Error::InvalidModel(format!("vector potential needs {d} components")));
            }
            let av = evaluators(a)?;
            let refs: Vec<&Evaluator> = av.iter().collect();
            check_lateral_vanishing(grid, "vector potential", &refs)?;
            let mut b1 = Builder::new(grid);
            let mut b2 = Builder::new(grid);
            let mut sup_a2: f64 = 0.0;
            for (axis, q) in av.iter().enumerate() {
                b1.face_first(axis, q)?;
                sup_a2 = sup_a2.max(b2.face_peierls(axis, q)?);
            }
            let sw1 = b1.diagonal(&w1.evaluator()?)?;
            let sw2 = b2.diagonal(&w2.evaluator()?)?;
            let mut sup_a: f64 = 0.0;
            for i in 0..grid.len() {
                let p = point(grid, &grid.coords(i));
                let s: f64 = av.iter().map(|f| f.eval(p).map(|v| v * v)).sum::<Result<f64>>()?;
                sup_a = sup_a.max(s.sqrt());
            }
            for (axis, f) in av.iter().enumerate() {
                for (i, _) in grid.mesh.faces(axis) {
                    sup_a = sup_a.max(f.eval(point(grid, &grid.mesh.face_midpoint(i, axis)))?.abs());
                }
            }
            norms.first = sup_a;
            norms.zeroth = sw1.max(sw2);
            norms.magnetic_order2 = sup_a2.max(sup_a * sup_a) + sw2;
            (b1.finish(), b2.finish())
        }
    };
    for (name, m) in [("L1", &l1), ("L2", &l2)] {
        if !m.hermitian {
            return Err(Error::InvalidModel(format!(
                "{name} symmetry defect {:.3e} above tolerance",
                m.hermitian_defect()
            )));
        }
    }
    let scale = l2.max_abs().max(1.0);
    let order2_nonpositive = max_eigenvalue(&l2) <= 1e-10 * scale;
    let real = l1.real && l2.real;
    Ok(PerturbationModel { params: params.clone(), spec: grid.spec.clone(), l1, l2, l3: 0.0, order2_nonpositive, real, norms })
}

impl PerturbationModel {
    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    pub fn dim(&self) -> usize {
        self.l1.dim()
    }

    pub fn with_synthetic_l3(mut self, c: f64) -> Self {
        self.l3 = c;
        self
    }

    /// True when L(t) is linear in t.
    pub fn is_linear(&self) -> bool {
        self.l2.max_abs() == 0.0 && self.l3 == 0.0
    }

    /// t L₁ u + t² L₂ u + t³ L₃(t) u.
    pub fn apply(&self, t: f64, u: &[C64]) -> Vec<C64> {
        let a = self.l1.matvec(u);
        let b = self.l2.matvec(u);
        a.iter().zip(&b).zip(u).map(|((a, b), u)| a * t + b * (t * t) + u * (self.l3 * t.powi(3))).collect()
    }

    /// Matrix of L(t) on the cell.
    pub fn matrix(&self, t: f64) -> SparseHermitian {
        let m = SparseHermitian::combine(&[(t, &self.l1), (t * t, &self.l2)]);
        if self.l3 != 0.0 {
            m.shifted(self.l3 * t.powi(3))
        } else {
            m
        }
    }

    /// Matrix of t ∂_t L(t) - L(t) = t² L₂ + 2 t³ L₃ (L₃ constant).
    pub fn vector_field_matrix(&self, t: f64) -> SparseHermitian {
        let m = self.l2.scaled(t * t);
        if self.l3 != 0.0 {
            m.shifted(2.0 * self.l3 * t.powi(3))
        } else {
            m
        }
    }

    /// Constants for a cutoff of C² norm `cutoff_norm` and background sup |V₀|.
    pub fn bound_constants(&self, cutoff_norm: f64, v0_sup: f64) -> BoundConstants {
        let phi = cutoff_norm.max(1.0);
        let n = &self.norms;
        let l3 = self.l3.abs();
        let (c6, c7, c8) = match self.kind() {
            ModelKind::Potential => (0.0, n.zeroth + l3, 0.0),
            ModelKind::Integral => (0.0, n.kernel_hs + l3, phi * n.kernel_moment),
            ModelKind::Magnetic => (
                n.first,
                (n.first * (1.0 + phi) + n.zeroth).max(n.magnetic_order2) + l3,
                phi * (2.0 * n.first + n.magnetic_order2 * n.max_spacing),
            ),
            ModelKind::Diffop | ModelKind::Metric => (
                2.0 * n.second + n.first,
                n.second * phi + n.first * (1.0 + phi) + n.zeroth + l3,
                phi * (3.0 * n.second + n.second_gradient + 2.0 * n.first),
            ),
        };
        let min_e = self.spec.min_lattice_length();
        BoundConstants { cutoff_norm: phi, c5: 3.0 / min_e, c6, c7, c8, c11: 2.0 * v0_sup + 2.0 }
    }
}

/// sup |V₀| over the transversal nodes.
pub fn background_sup(v0: &TransversalPotential, spec: &GridSpec) -> f64 {
    v0.sup_abs(spec)
}

/// Smooth tensor-product cutoff equal to 1 on the lateral box [lo, hi] and
/// 0 outside [lo - ramp, hi + ramp], built from the quintic smoothstep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub ramp: f64,
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// sup of the first derivative of the smoothstep.
pub const SMOOTHSTEP_D1: f64 = 15.0 / 8.0;
/// sup of the second derivative of the smoothstep.
pub const SMOOTHSTEP_D2: f64 = 2.886751345948129; // 5/sqrt(3)

impl Cutoff {
    pub fn eval(&self, lateral: &[f64]) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(lateral)
            .map(|((lo, hi), x)| smoothstep((x - lo + self.ramp) / self.ramp) * smoothstep((hi + self.ramp - x) / self.ramp))
            .product()
    }

    /// Bound on sup |∂φ/∂x_i|.
    pub fn derivative_bound(&self) -> f64 {
        SMOOTHSTEP_D1 / self.ramp
    }

    /// sup|φ| + Σ sup|∂φ| + Σ sup|∂²φ| over all first and second partials.
    pub fn c2_norm(&self) -> f64 {
        let n = self.lo.len() as f64;
        let d1 = SMOOTHSTEP_D1 / self.ramp;
        let d2 = SMOOTHSTEP_D2.max(SMOOTHSTEP_D1 * SMOOTHSTEP_D1) / (self.ramp * self.ramp);
        1.0 + n * d1 + n * n * d2
    }

    /// Values at the nodes of a mesh.
    pub fn sample(&self, mesh: &Mesh) -> Vec<f64> {
        (0..mesh.len()).map(|i| self.eval(&mesh.coord(i)[..mesh.lateral_axes])).collect()
    }
}

/// Discrete ‖u‖_{W^{1,2}} with differences across interior faces.
pub fn w12_norm(mesh: &Mesh, u: &[C64]) -> f64 {
    let w = mesh.weight();
    let mut s: f64 = u.iter().map(|x| x.norm_sqr()).sum::<f64>() * w;
    for a in 0..mesh.axes() {
        let h = mesh.spacing[a];
        for (i, j) in mesh.faces(a) {
            s += ((u[j] - u[i]) / h).norm_sqr() * w;
        }
    }
    s.sqrt()
}

/// Discrete ‖u‖_{W^{2,2}} adding second differences along each axis.
pub fn w22_norm(mesh: &Mesh, u: &[C64]) -> f64 {
    let w = mesh.weight();
    let mut s = w12_norm(mesh, u).powi(2);
    for a in 0..mesh.axes() {
        let h2 = mesh.spacing[a].powi(2);
        let st = mesh.stride(a);
        for i in 0..mesh.len() {
            let k = mesh.multi(i)[a];
            if k > 0 && k + 1 < mesh.dims[a] {
                s += ((u[i + st] - u[i] * 2.0 + u[i - st]) / h2).norm_sqr() * w;
            }
        }
    }
    s.sqrt()
}
