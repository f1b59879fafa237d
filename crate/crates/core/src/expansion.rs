//! Single-cell perturbation expansion of the lowest eigenvalue.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{assemble_h0, CellGrid, LateralBc, MezincescuDensity, TransversalPotential};
use crate::models::{ModelParams, PerturbationModel};
use crate::sparse::{SparseHermitian, C64};
use crate::spectral::{self, EigenPair};
use crate::stats;
use crate::expr::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseLabel {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "OTHER")]
    Other,
}

/// Discrete L² inner product on a grid with uniform weight `w`.
pub fn inner(w: f64, u: &[C64], v: &[C64]) -> C64 {
    spectral::dot(u, v) * w
}

pub fn l2_norm(w: f64, u: &[C64]) -> f64 {
    spectral::norm(u) * w.sqrt()
}

fn sub(u: &[C64], v: &[C64]) -> Vec<C64> {
    u.iter().zip(v).map(|(a, b)| a - b).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
    pub case_label: CaseLabel,
    pub b: f64,
    pub tol_case: f64,
    /// (Φ₁ − Ψ₁, L₁Ψ₀) as (re, im).
    pub cross_term: (f64, f64),
    /// Imaginary part discarded when forming Λ₂.
    pub lambda2_imag: f64,
    /// |(Ψ₁,Ψ₀)|, |(Ψ₂,Ψ₀)|, |(Φ₁,Ψ₀)|.
    pub orthogonality: [f64; 3],
    /// L₂ ≤ 0 certificate of the model.
    pub order2_nonpositive: bool,
    /// Fitted Taylor residual order, filled in by [`verify_taylor`] callers.
    pub taylor_slope: Option<f64>,
    pub rho1: Option<MezincescuDensity>,
    pub rho2: Option<MezincescuDensity>,
    #[serde(skip)]
    pub psi0: Vec<C64>,
    #[serde(skip)]
    pub psi1: Vec<C64>,
    #[serde(skip)]
    pub psi2: Vec<C64>,
    #[serde(skip)]
    pub phi1: Vec<C64>,
}

/// Transversal ground state extended constantly in the lateral directions,
/// normalised in L²(cell). Whole-space mode returns (V₀(0), 1/sqrt|cell|).
pub fn ground_state_baseline(grid: &CellGrid, v0: &TransversalPotential) -> Result<(f64, Vec<C64>)> {
    let n = grid.len();
    let w = grid.weight();
    if !grid.spec.has_transversal() {
        let c = 1.0 / grid.spec.cell_volume().sqrt();
        return Ok((v0.eval(0.0), vec![C64::new(c, 0.0); n]));
    }
    let mz = grid.spec.mesh_transversal;
    let h = grid.spec.transversal_spacing();
    let h2 = h * h;
    let mut t = Vec::new();
    for j in 0..mz {
        let z = (j as f64 + 0.5) * h;
        let mut d = 2.0 / h2 + v0.eval(z);
        for (side, at_edge) in [(0, j == 0), (1, j + 1 == mz)] {
            if at_edge {
                let g = match grid.spec.transversal_bc[side] {
                    crate::grid::TransversalBc::Dirichlet => -1.0,
                    crate::grid::TransversalBc::Neumann => 1.0,
                };
                d -= g / h2;
            }
        }
        t.push((j, j, d));
        if j + 1 < mz {
            t.push((j, j + 1, -1.0 / h2));
            t.push((j + 1, j, -1.0 / h2));
        }
    }
    let a = SparseHermitian::from_real_triplets(mz, t);
    let pairs = spectral::dense_eigenpairs(&a, 2.min(mz));
    if pairs.len() > 1 {
        let gap = pairs[1].value - pairs[0].value;
        let threshold = spectral::SIMPLICITY_GAP * (1.0 + pairs[0].value.abs());
        if gap < threshold {
            return Err(Error::DegenerateGroundState { gap, threshold });
        }
    }
    let lambda0 = pairs[0].value;
    let sign = if pairs[0].vector.iter().map(|c| c.re).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let profile: Vec<f64> = pairs[0].vector.iter().map(|c| c.re * sign).collect();
    let mut psi: Vec<C64> = (0..n).map(|i| C64::new(profile[grid.mesh.multi(i)[grid.spec.lateral_dim]], 0.0)).collect();
    let nrm = l2_norm(w, &psi);
    psi.iter_mut().for_each(|x| *x /= nrm);
    Ok((lambda0, psi))
}

/// H⁰ on the cell with lateral periodic and lateral Neumann closures.
pub fn cell_operators(grid: &CellGrid, v0: &TransversalPotential) -> Result<(SparseHermitian, SparseHermitian)> {
    let per = assemble_h0(grid, v0, &LateralBc::Periodic)?;
    let neu = assemble_h0(grid, v0, &LateralBc::neumann(grid))?;
    Ok((per, neu))
}

pub fn tol_case(lambda0: f64) -> f64 {
    1e-8 * (1.0 + lambda0.abs())
}

pub fn classify(lambda0: f64, lambda1: f64, eta: f64, b: f64) -> CaseLabel {
    let tol = tol_case(lambda0);
    if lambda1 < -tol {
        CaseLabel::I
    } else if lambda1.abs() <= tol && b > -1.0 && eta > tol {
        CaseLabel::II
    } else {
        CaseLabel::Other
    }
}

pub fn expand(model: &PerturbationModel, grid: &CellGrid, v0: &TransversalPotential, b: f64) -> Result<ExpansionReport> {
    let w = grid.weight();
    let (h_per, h_neu) = cell_operators(grid, v0)?;
    let (lambda0, psi0) = ground_state_baseline(grid, v0)?;
    let l1psi0 = model.l1.matvec(&psi0);
    let lambda1 = inner(w, &psi0, &l1psi0).re;
    let rhs1: Vec<C64> = l1psi0.iter().zip(&psi0).map(|(l, p)| -l + p * lambda1).collect();
    let psi1 = spectral::solve_reduced(&h_per, lambda0, &psi0, &rhs1)?;
    let l2psi0 = model.l2.matvec(&psi0);
    let lambda2c = inner(w, &psi0, &l2psi0) + inner(w, &psi1, &l1psi0);
    let lambda2 = lambda2c.re;
    let l1psi1 = model.l1.matvec(&psi1);
    let rhs2: Vec<C64> = (0..psi0.len())
        .map(|i| -l1psi1[i] - l2psi0[i] + psi1[i] * lambda1 + psi0[i] * lambda2)
        .collect();
    let psi2 = spectral::solve_reduced(&h_per, lambda0, &psi0, &rhs2)?;
    let phi1 = spectral::solve_reduced(&h_neu, lambda0, &psi0, &rhs1)?;
    let cross = inner(w, &sub(&phi1, &psi1), &l1psi0);
    let eta = -(b + 1.0) * lambda2 + (1.0 - b) * cross.re;
    let case_label = classify(lambda0, lambda1, eta, b);
    let orthogonality = [
        inner(w, &psi1, &psi0).norm(),
        inner(w, &psi2, &psi0).norm(),
        inner(w, &phi1, &psi0).norm(),
    ];
    let (rho1, rho2) = if model.real {
        let (r1, r2) = density_coefficients(grid, &psi0, &psi1, &psi2);
        (Some(r1), Some(r2))
    } else {
        (None, None)
    };
    Ok(ExpansionReport {
        lambda0,
        lambda1,
        lambda2,
        eta,
        case_label,
        b,
        tol_case: tol_case(lambda0),
        cross_term: (cross.re, cross.im),
        lambda2_imag: lambda2c.im,
        orthogonality,
        order2_nonpositive: model.order2_nonpositive,
        taylor_slope: None,
        rho1,
        rho2,
        psi0,
        psi1,
        psi2,
        phi1,
    })
}

/// Lowest eigenpair of the periodic cell operator with L(δ), together with
/// Λ^δ − Λ₀ evaluated through the ground-state representation
/// (fψ₀, (H⁰ − Λ₀) fψ₀) = Σ_faces w ψ₀,i ψ₀,j |f_j − f_i|²/h², which avoids
/// cancellation against Λ₀.
#[derive(Clone, Debug)]
pub struct CellEigen {
    pub pair: EigenPair,
    pub shift: f64,
}

pub fn cell_eigenvalue(model: &PerturbationModel, grid: &CellGrid, v0: &TransversalPotential, delta: f64) -> Result<CellEigen> {
    let (h_per, _) = cell_operators(grid, v0)?;
    let (lambda0, psi0) = ground_state_baseline(grid, v0)?;
    cell_eigen_with(model, grid, &h_per, lambda0, &psi0, delta)
}

fn cell_eigen_with(
    model: &PerturbationModel,
    grid: &CellGrid,
    h_per: &SparseHermitian,
    lambda0: f64,
    psi0: &[C64],
    delta: f64,
) -> Result<CellEigen> {
    let w = grid.weight();
    let h = SparseHermitian::combine(&[(1.0, h_per), (1.0, &model.matrix(delta))]);
    let mut pair = spectral::smallest_eigenpairs(&h, 1, 1e-12)?.remove(0);
    // Unit L² norm, then (Ψ^δ, Ψ₀) real positive.
    let ov = inner(w, psi0, &pair.vector);
    let phase = if ov.norm() > 0.0 { ov.conj() / ov.norm() } else { C64::new(1.0, 0.0) };
    let nrm = l2_norm(w, &pair.vector);
    pair.vector.iter_mut().for_each(|x| *x *= phase / nrm);
    let u = &pair.vector;
    let f: Vec<C64> = u.iter().zip(psi0).map(|(a, p)| a / p.re).collect();
    let mesh = &grid.mesh;
    let mut kinetic = 0.0;
    for a in 0..mesh.axes() {
        let h2 = mesh.spacing[a].powi(2);
        let mut faces = mesh.faces(a);
        if a < mesh.lateral_axes {
            let st = mesh.stride(a);
            let wrap = (mesh.dims[a] - 1) * st;
            faces.extend(mesh.face_nodes(a, true).into_iter().map(|i| (i, i - wrap)));
        }
        for (i, j) in faces {
            kinetic += psi0[i].re * psi0[j].re * (f[j] - f[i]).norm_sqr() / h2;
        }
    }
    kinetic *= w;
    let pert = inner(w, u, &model.apply(delta, u)).re;
    let shift = (kinetic + pert) / (l2_norm(w, u).powi(2));
    pair.value = lambda0 + shift;
    Ok(CellEigen { pair, shift })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaylorFit {
    /// (δ, |Λ^δ − Λ₀ − δΛ₁ − δ²Λ₂|)
    pub residuals: Vec<(f64, f64)>,
    /// (δ, ‖Ψ^δ − Ψ₀ − δΨ₁ − δ²Ψ₂‖) with (Ψ^δ, Ψ₀) = 1
    pub field_residuals: Vec<(f64, f64)>,
    pub slope: Option<f64>,
    pub field_slope: Option<f64>,
    /// True when every eigenvalue residual sits below the noise floor.
    pub exact: bool,
    /// Leading coefficient from the fit, exp(intercept).
    pub coefficient: Option<f64>,
}

/// Residual orders of the eigenvalue and eigenvector expansions on a δ ladder.
pub fn verify_taylor(
    model: &PerturbationModel,
    grid: &CellGrid,
    v0: &TransversalPotential,
    report: &ExpansionReport,
    deltas: &[f64],
) -> Result<TaylorFit> {
    let w = grid.weight();
    let (h_per, _) = cell_operators(grid, v0)?;
    let mut residuals = Vec::new();
    let mut field_residuals = Vec::new();
    let mut above = Vec::new();
    for &d in deltas {
        let ce = cell_eigen_with(model, grid, &h_per, report.lambda0, &report.psi0, d)?;
        let model_shift = d * report.lambda1 + d * d * report.lambda2;
        let r = (ce.shift - model_shift).abs();
        let floor = 64.0 * f64::EPSILON * (ce.shift.abs() + model_shift.abs()) + 1e-300;
        residuals.push((d, r));
        if r > floor {
            above.push((d, r));
        }
        let ov = inner(w, &report.psi0, &ce.pair.vector);
        let scaled: Vec<C64> = ce.pair.vector.iter().map(|x| x / ov).collect();
        let approx: Vec<C64> =
            (0..scaled.len()).map(|i| report.psi0[i] + report.psi1[i] * d + report.psi2[i] * (d * d)).collect();
        field_residuals.push((d, l2_norm(w, &sub(&scaled, &approx))));
    }
    let fit = |pts: &[(f64, f64)]| -> Option<stats::LinearFit> {
        if pts.len() < 2 {
            return None;
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        Some(stats::loglog_fit(&xs, &ys))
    };
    let f = fit(&above);
    let field_pts: Vec<(f64, f64)> = field_residuals.iter().cloned().filter(|p| p.1 > 1e-13).collect();
    Ok(TaylorFit {
        exact: above.is_empty(),
        slope: f.map(|f| f.slope),
        coefficient: f.map(|f| f.intercept.exp()),
        field_slope: fit(&field_pts).map(|f| f.slope),
        residuals,
        field_residuals,
    })
}

/// Grid point of [εb, ε] minimising Λ^δ; the last grid point is ε exactly.
pub fn minimizer_over_delta(
    model: &PerturbationModel,
    grid: &CellGrid,
    v0: &TransversalPotential,
    epsilon: f64,
    b: f64,
    samples: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let samples = samples.max(2);
    let (h_per, _) = cell_operators(grid, v0)?;
    let (lambda0, psi0) = ground_state_baseline(grid, v0)?;
    let mut table = Vec::with_capacity(samples);
    for k in 0..samples {
        let d = if k + 1 == samples { epsilon } else { epsilon * (b + (1.0 - b) * k as f64 / (samples - 1) as f64) };
        let ce = cell_eigen_with(model, grid, &h_per, lambda0, &psi0, d)?;
        table.push((d, ce.shift));
    }
    let best = table.iter().cloned().fold((f64::NAN, f64::INFINITY), |acc, p| if p.1 < acc.1 { p } else { acc });
    Ok((best.0, table))
}

/// Face data of a nodal field on the lateral boundary: for every lateral
/// axis and side, (inside value, outside value) with the outside value taken
/// from the periodic continuation.
fn face_pairs(grid: &CellGrid, u: &[C64], axis: usize, high: bool) -> Vec<(C64, C64)> {
    let mesh = &grid.mesh;
    let wrap = (mesh.dims[axis] - 1) * mesh.stride(axis);
    mesh.face_nodes(axis, high)
        .into_iter()
        .map(|i| {
            let out = if high { i - wrap } else { i + wrap };
            (u[i], u[out])
        })
        .collect()
}

/// Discrete ρ = ∂_ν u / avg(u) of a real positive periodic field.
pub fn density_of(grid: &CellGrid, u: &[C64]) -> Result<MezincescuDensity> {
    let floor = 1e-8 * u.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let mut faces = Vec::new();
    for a in 0..grid.spec.lateral_dim {
        let h = grid.mesh.spacing[a];
        let mut sides: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (s, high) in [(0, false), (1, true)] {
            for (inside, outside) in face_pairs(grid, u, a, high) {
                if inside.re.abs() < floor || outside.re.abs() < floor {
                    return Err(Error::DensityUndefined(format!("eigenfunction below floor {floor:.3e} on the lateral boundary")));
                }
                let avg = 0.5 * (inside.re + outside.re);
                sides[s].push((outside.re - inside.re) / h / avg);
            }
        }
        faces.push(sides);
    }
    Ok(MezincescuDensity { faces })
}

/// ρ₁ = ∂Ψ₁/avgΨ₀ and ρ₂ = ∂Ψ₂/avgΨ₀ − avgΨ₁ ∂Ψ₁/avgΨ₀².
fn density_coefficients(grid: &CellGrid, psi0: &[C64], psi1: &[C64], psi2: &[C64]) -> (MezincescuDensity, MezincescuDensity) {
    let mut f1 = Vec::new();
    let mut f2 = Vec::new();
    for a in 0..grid.spec.lateral_dim {
        let h = grid.mesh.spacing[a];
        let mut s1: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut s2: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (s, high) in [(0, false), (1, true)] {
            let p0 = face_pairs(grid, psi0, a, high);
            let p1 = face_pairs(grid, psi1, a, high);
            let p2 = face_pairs(grid, psi2, a, high);
            for k in 0..p0.len() {
                let a0 = 0.5 * (p0[k].0.re + p0[k].1.re);
                let a1 = 0.5 * (p1[k].0.re + p1[k].1.re);
                let d1 = (p1[k].1.re - p1[k].0.re) / h;
                let d2 = (p2[k].1.re - p2[k].0.re) / h;
                s1[s].push(d1 / a0);
                s2[s].push(d2 / a0 - a1 * d1 / (a0 * a0));
            }
        }
        f1.push(s1);
        f2.push(s2);
    }
    (MezincescuDensity { faces: f1 }, MezincescuDensity { faces: f2 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityReport {
    pub epsilon: f64,
    pub lambda_eps: f64,
    pub rho_eps: MezincescuDensity,
    /// sup |ρ^ε − ερ₁|
    pub residual1: f64,
    /// sup |ρ^ε − ερ₁ − ε²ρ₂|
    pub residual2: f64,
}

/// Mezincescu density ρ^ε of the periodic cell ground state, with the
/// first- and second-order residuals against ρ₁, ρ₂.
pub fn mezincescu_density(
    model: &PerturbationModel,
    grid: &CellGrid,
    v0: &TransversalPotential,
    report: &ExpansionReport,
    epsilon: f64,
) -> Result<DensityReport> {
    if !model.real {
        return Err(Error::DensityUndefined("complex ground state; only real densities are supported".into()));
    }
    let ce = cell_eigenvalue(model, grid, v0, epsilon)?;
    let rho_eps = density_of(grid, &ce.pair.vector)?;
    let (r1, r2) = match (&report.rho1, &report.rho2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::DensityUndefined("expansion carries no density coefficients".into())),
    };
    let d1 = rho_eps.lin_comb(1.0, r1, -epsilon);
    let d2 = d1.lin_comb(1.0, r2, -epsilon * epsilon);
    Ok(DensityReport { epsilon, lambda_eps: ce.pair.value, rho_eps, residual1: d1.sup_abs(), residual2: d2.sup_abs() })
}

/// Discrete right-hand side of the gauge identity for a magnetic model with
/// W₁ = 0: Σ_f w ψ₀,i ψ₀,j (A_f − (Dg)_f)² + (W₂ψ₀, ψ₀), g = Im Ψ₁/Ψ₀.
pub fn magnetic_gauge_lambda2(model: &PerturbationModel, grid: &CellGrid, report: &ExpansionReport) -> Result<f64> {
    let (a, w2) = match &model.params {
        ModelParams::Magnetic { a, w2, .. } => (a, w2),
        _ => return Err(Error::InvalidModel("gauge identity applies to the magnetic model".into())),
    };
    let w = grid.weight();
    let psi0 = &report.psi0;
    let g: Vec<f64> = report.psi1.iter().zip(psi0).map(|(p1, p0)| p1.im / p0.re).collect();
    let mesh = &grid.mesh;
    let mut s = 0.0;
    for (axis, expr) in a.iter().enumerate() {
        let ev = expr.evaluator()?;
        let h = mesh.spacing[axis];
        for (i, j) in mesh.faces(axis) {
            let p = Point::from_coords(&mesh.face_midpoint(i, axis), grid.spec.lateral_dim, grid.spec.has_transversal());
            let af = ev.eval(p)?;
            s += psi0[i].re * psi0[j].re * (af - (g[j] - g[i]) / h).powi(2);
        }
        // Periodic wrap faces sit on γ, where A vanishes.
        if axis < grid.spec.lateral_dim {
            let wrap = (mesh.dims[axis] - 1) * mesh.stride(axis);
            for i in mesh.face_nodes(axis, true) {
                let j = i - wrap;
                s += psi0[i].re * psi0[j].re * ((g[j] - g[i]) / h).powi(2);
            }
        }
    }
    let ev2 = w2.evaluator()?;
    let mut pot = 0.0;
    for i in 0..grid.len() {
        let p = Point::from_coords(&grid.coords(i), grid.spec.lateral_dim, grid.spec.has_transversal());
        pot += ev2.eval(p)? * psi0[i].norm_sqr();
    }
    Ok(w * (s + pot))
}
