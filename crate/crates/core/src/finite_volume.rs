//! Random operators on finite boxes of cells and the deterministic checks
//! built on them.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::DisorderLaw;
use crate::error::{Error, Result};
use crate::expansion::{cell_eigenvalue, density_of, CaseLabel, ExpansionReport};
use crate::grid::{
    assemble_box_h0, build_box_grid, build_cell_grid, BoxGrid, CellGrid, GridSpec, LateralBc, MezincescuDensity,
    TransversalPotential,
};
use crate::models::{BoundConstants, Cutoff, PerturbationModel, SMOOTHSTEP_D1, SMOOTHSTEP_D2};
use crate::sparse::{SparseHermitian, C64};
use crate::spectral::{Decomposition, DENSE_LIMIT};
use crate::stats::{self, LinearFit};

/// Tolerance of the lower bracketing min σ ≥ Λ^ε.
pub const BRACKET_TOL: f64 = 1e-9;

/// Values ξ_k ∈ [b, 1] on the cells of a box, in box cell order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub values: Vec<f64>,
    pub b: f64,
}

impl Configuration {
    pub fn new(values: Vec<f64>, b: f64) -> Result<Self> {
        if !(-1.0..1.0).contains(&b) {
            return Err(Error::InvalidLaw(format!("support endpoint b = {b} outside [-1, 1)")));
        }
        if let Some(v) = values.iter().find(|v| !(b..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("configuration value {v} outside [{b}, 1]")));
        }
        Ok(Configuration { values, b })
    }

    pub fn constant(len: usize, value: f64, b: f64) -> Result<Self> {
        Self::new(vec![value; len], b)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Σ_k (1 − ξ_k).
    pub fn deficit(&self) -> f64 {
        self.values.iter().map(|x| 1.0 - x).sum()
    }

    /// Values on the cells of `inner`, read from the cells of `outer`.
    pub fn restrict(&self, outer: &BoxGrid, inner: &BoxGrid) -> Result<Configuration> {
        let values = inner
            .cells
            .iter()
            .map(|k| {
                outer
                    .cells
                    .iter()
                    .position(|c| c == k)
                    .map(|i| self.values[i])
                    .ok_or_else(|| Error::Precondition(format!("cell {k:?} lies outside the outer box")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Configuration::new(values, self.b)
    }
}

/// H^ε_{α,N}(ξ) assembled on a box.
#[derive(Debug)]
pub struct FiniteVolumeOperator {
    pub grid: BoxGrid,
    pub epsilon: f64,
    pub xi: Configuration,
    pub matrix: SparseHermitian,
    decomposition: OnceLock<Decomposition>,
}

impl FiniteVolumeOperator {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn decomposition(&self) -> Result<&Decomposition> {
        if self.dim() > DENSE_LIMIT {
            return Err(Error::Precondition(format!("box dimension {} exceeds the dense limit", self.dim())));
        }
        Ok(self.decomposition.get_or_init(|| Decomposition::new(&self.matrix)))
    }

    /// Smallest eigenvalue.
    pub fn ground_value(&self) -> Result<f64> {
        Ok(self.decomposition()?.values[0])
    }
}

/// H⁰ on the box plus Σ_k L(εξ_k) acting on the nodes of cell k.
pub fn assemble_box_operator(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    grid: &BoxGrid,
    epsilon: f64,
    xi: &Configuration,
) -> Result<FiniteVolumeOperator> {
    if xi.len() != grid.cell_count() {
        return Err(Error::Precondition(format!(
            "configuration has {} values for {} cells",
            xi.len(),
            grid.cell_count()
        )));
    }
    if model.spec != grid.spec {
        return Err(Error::Precondition("model and box were built on different cell grids".into()));
    }
    let h0 = assemble_box_h0(grid, v0)?;
    let matrix = if epsilon == 0.0 {
        h0
    } else {
        let l = assemble_cellwise(grid, |c| model.matrix(epsilon * xi.values[c]));
        SparseHermitian::combine(&[(1.0, &h0), (1.0, &l)])
    };
    Ok(FiniteVolumeOperator { grid: grid.clone(), epsilon, xi: xi.clone(), matrix, decomposition: OnceLock::new() })
}

/// Σ_k of the cell matrix `per_cell(k)` placed on the nodes of cell k.
pub fn assemble_cellwise(grid: &BoxGrid, per_cell: impl Fn(usize) -> SparseHermitian) -> SparseHermitian {
    let mut t: Vec<(usize, usize, C64)> = Vec::new();
    for (c, nodes) in grid.cell_nodes.iter().enumerate() {
        t.extend(per_cell(c).entries().map(|(r, col, v)| (nodes[r], nodes[col], v)));
    }
    SparseHermitian::from_triplets(grid.len(), t)
}

/// Density ρ^ε of the periodic cell ground state at strength ε.
pub fn mezincescu_rho(model: &PerturbationModel, cell: &CellGrid, v0: &TransversalPotential, epsilon: f64) -> Result<MezincescuDensity> {
    if !model.real {
        return Err(Error::DensityUndefined("complex ground state; only real densities are supported".into()));
    }
    let ce = cell_eigenvalue(model, cell, v0, epsilon)?;
    density_of(cell, &ce.pair.vector)
}

pub fn mezincescu_bc(model: &PerturbationModel, cell: &CellGrid, v0: &TransversalPotential, epsilon: f64) -> Result<LateralBc> {
    Ok(LateralBc::Mezincescu(Some(mezincescu_rho(model, cell, v0, epsilon)?)))
}

/// Configurations of period two in every lattice direction taking the
/// extreme values b and 1.
pub fn two_periodic_configurations(grid: &BoxGrid, b: f64) -> Result<Vec<Configuration>> {
    let n = grid.spec.lateral_dim;
    if grid.n_cells % 2 != 0 {
        return Ok(Vec::new());
    }
    let patterns = 1usize << (1 << n);
    (0..patterns)
        .map(|p| {
            let values = (0..grid.cell_count())
                .map(|c| {
                    let local = grid.local_cell(c);
                    let slot = local.iter().fold(0usize, |acc, k| acc * 2 + k % 2);
                    if p >> slot & 1 == 1 {
                        1.0
                    } else {
                        b
                    }
                })
                .collect();
            Configuration::new(values, b)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub lambda_eps: f64,
    /// Box ground value at ξ ≡ 1.
    pub at_one: f64,
    pub min_random: f64,
    pub min_periodic: Option<f64>,
    /// Minimum over every tested configuration.
    pub min_value: f64,
    /// Configurations with ground value below Λ^ε − tolerance.
    pub violations: usize,
    pub attained_at_one: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralSweep {
    pub n_cells: usize,
    pub samples: usize,
    pub seed: u64,
    pub periodic: bool,
    pub lambda0: f64,
    pub rows: Vec<SweepRow>,
    /// Fit of log(Λ₀ − min) against log ε.
    pub rate: Option<LinearFit>,
}

#[allow(clippy::too_many_arguments)]
pub fn spectral_minimum_sweep(
    model: &PerturbationModel,
    cell: &CellGrid,
    v0: &TransversalPotential,
    lambda0: f64,
    eps_list: &[f64],
    law: &DisorderLaw,
    n_cells: usize,
    samples: usize,
    seed: u64,
    periodic: bool,
) -> Result<SpectralSweep> {
    let alpha = vec![0i64; cell.spec.lateral_dim];
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let lambda_eps = cell_eigenvalue(model, cell, v0, eps)?.pair.value;
        let bc = if periodic { LateralBc::Periodic } else { mezincescu_bc(model, cell, v0, eps)? };
        let grid = build_box_grid(&cell.spec, &alpha, n_cells, bc)?;
        let ground = |xi: &Configuration| -> Result<f64> { assemble_box_operator(model, v0, &grid, eps, xi)?.ground_value() };
        let at_one = ground(&Configuration::constant(grid.cell_count(), 1.0, law.b)?)?;
        let random: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|s| ground(&law.sample_configuration(&grid, seed, s as u64)?))
            .collect::<Result<Vec<f64>>>()?;
        let periodic_vals: Vec<f64> =
            two_periodic_configurations(&grid, law.b)?.iter().map(ground).collect::<Result<Vec<f64>>>()?;
        let floor = lambda_eps - BRACKET_TOL;
        let violations = random.iter().chain(&periodic_vals).filter(|&&v| v < floor).count();
        let min_random = random.iter().cloned().fold(f64::INFINITY, f64::min);
        let min_periodic = periodic_vals.iter().cloned().reduce(f64::min);
        let min_value = min_random.min(min_periodic.unwrap_or(f64::INFINITY)).min(at_one);
        rows.push(SweepRow {
            epsilon: eps,
            lambda_eps,
            at_one,
            min_random,
            min_periodic,
            min_value,
            violations,
            attained_at_one: (at_one - lambda_eps).abs() <= 1e-8 * (1.0 + lambda_eps.abs()),
        });
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| lambda0 - r.min_value > 0.0).map(|r| (r.epsilon, lambda0 - r.min_value)).collect();
    let rate = (pts.len() >= 2).then(|| {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        stats::loglog_fit(&xs, &ys)
    });
    Ok(SpectralSweep { n_cells, samples, seed, periodic, lambda0, rows, rate })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapBound {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Regime edge ε < c₀ N^{-p} with p = 2 (linear case) or 4 (quadratic case).
pub fn regime_edge(case: CaseLabel, c0: f64, n_cells: usize) -> Result<f64> {
    let p = match case {
        CaseLabel::I => 2,
        CaseLabel::II => 4,
        CaseLabel::Other => return Err(Error::CaseOther),
    };
    Ok(c0 / (n_cells as f64).powi(p))
}

/// Λ_{α,N}^ε(ξ) − Λ^ε against the case-dependent lower bound.
pub fn ground_state_gap_bound(op: &FiniteVolumeOperator, lambda_eps: f64, report: &ExpansionReport, c0: f64) -> Result<GapBound> {
    if !matches!(op.grid.lateral_bc, LateralBc::Mezincescu(Some(_))) {
        return Err(Error::Precondition("the ground-state bound needs the Mezincescu closure".into()));
    }
    let n = op.grid.n_cells;
    let edge = regime_edge(report.case_label, c0, n)?;
    if op.epsilon >= edge {
        return Err(Error::Regime(format!("epsilon {} not below c0 N^-p = {edge:.3e}", op.epsilon)));
    }
    let volume = op.grid.cell_count() as f64;
    let deficit = op.xi.deficit();
    let rhs = match report.case_label {
        CaseLabel::I => op.epsilon * report.lambda1.abs() / (4.0 * volume) * deficit,
        _ => report.eta * op.epsilon * op.epsilon / volume * deficit,
    };
    let lhs = op.ground_value()? - lambda_eps;
    let margin = lhs - rhs;
    Ok(GapBound { lhs, rhs, margin, pass: margin >= -1e-9 * (1.0 + lhs.abs()) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct C0Calibration {
    pub c0: f64,
    pub halvings: usize,
    pub pilot: usize,
    /// Smallest box side used in the pilot.
    pub n1: usize,
    pub worst_margin: f64,
}

/// Halves `c0_init` until every pilot configuration satisfies the
/// ground-state bound at ε = c₀N^{-p}·s for s ∈ {1, 1/2, 1/4} and every N.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_c0(
    model: &PerturbationModel,
    cell: &CellGrid,
    v0: &TransversalPotential,
    report: &ExpansionReport,
    law: &DisorderLaw,
    n_list: &[usize],
    c0_init: f64,
    pilot: usize,
    seed: u64,
) -> Result<C0Calibration> {
    if n_list.is_empty() || pilot == 0 {
        return Err(Error::Precondition("calibration needs box sizes and pilot samples".into()));
    }
    let scales = [1.0, 0.5, 0.25];
    let per = pilot.div_ceil(n_list.len() * scales.len());
    let alpha = vec![0i64; cell.spec.lateral_dim];
    let mut c0 = c0_init;
    for halvings in 0..60 {
        let mut worst = f64::INFINITY;
        let mut ok = true;
        'outer: for &n in n_list {
            let edge = regime_edge(report.case_label, c0, n)? * (1.0 - 1e-9);
            for s in scales {
                let eps = edge * s;
                let lambda_eps = cell_eigenvalue(model, cell, v0, eps)?.pair.value;
                let grid = build_box_grid(&cell.spec, &alpha, n, mezincescu_bc(model, cell, v0, eps)?)?;
                let margins = (0..per)
                    .into_par_iter()
                    .map(|k| {
                        let xi = law.sample_configuration(&grid, seed, k as u64)?;
                        let op = assemble_box_operator(model, v0, &grid, eps, &xi)?;
                        ground_state_gap_bound(&op, lambda_eps, report, c0).map(|g| (g.margin, g.pass))
                    })
                    .collect::<Result<Vec<(f64, bool)>>>()?;
                for (m, pass) in margins {
                    worst = worst.min(m);
                    if !pass {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        if ok {
            let n1 = *n_list.iter().min().unwrap_or(&1);
            return Ok(C0Calibration { c0, halvings, pilot: per * n_list.len() * scales.len(), n1, worst_margin: worst });
        }
        c0 *= 0.5;
    }
    Err(Error::NonConvergence(60))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CombesThomas {
    pub energy: f64,
    /// (cell distance, block norm)
    pub points: Vec<(f64, f64)>,
    /// Fitted decay rate; infinite when every block vanishes.
    pub rate: f64,
    pub r_squared: f64,
}

/// Block norms ‖χ_{cell 0}(H − E)⁻¹χ_{cell k}‖ along the first lattice axis
/// and the exponential rate fitted to them.
pub fn combes_thomas_profile(op: &FiniteVolumeOperator, e: f64) -> Result<CombesThomas> {
    let dec = op.decomposition()?;
    let bottom = dec.values[0];
    if e >= bottom {
        return Err(Error::Resonant { energy: e, distance: dec.distance(e) });
    }
    let grid = &op.grid;
    let n = grid.spec.lateral_dim;
    let len0 = grid.spec.lateral_cell_lengths[0];
    let source = grid.mask_cells(|k| k.iter().all(|&x| x == 0));
    let mut points = Vec::new();
    for step in 1..grid.n_cells {
        let target = grid.mask_cells(|k| k[0] == step && k[1..n].iter().all(|&x| x == 0));
        let norm = dec.resolvent_block_norm(e, &source, &target)?;
        points.push(((step - 1) as f64 * len0, norm));
    }
    if points.iter().all(|p| p.1 == 0.0) {
        return Ok(CombesThomas { energy: e, points, rate: f64::INFINITY, r_squared: 1.0 });
    }
    let pos: Vec<&(f64, f64)> = points.iter().filter(|p| p.1 > 0.0).collect();
    if pos.len() < 2 {
        return Err(Error::Precondition("Combes-Thomas fit needs at least two nonzero blocks".into()));
    }
    let xs: Vec<f64> = pos.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pos.iter().map(|p| p.1.ln()).collect();
    let fit = stats::linear_fit(&xs, &ys);
    Ok(CombesThomas { energy: e, points, rate: -fit.slope, r_squared: fit.r_squared })
}

/// θ = (c₆ + 1)² √(2|E| + c₁₁ + 4 n c₅) + 1.
pub fn theta(consts: &BoundConstants, e: f64, n: usize) -> f64 {
    (consts.c6 + 1.0).powi(2) * (2.0 * e.abs() + consts.c11 + 4.0 * n as f64 * consts.c5).sqrt() + 1.0
}

/// Cells of the belt Υ_{N}: offsets in [1, N−1) but not all in [3, N−3).
fn in_belt(k: &[usize], n: usize) -> bool {
    k.iter().all(|&x| x >= 1 && x + 1 < n) && !k.iter().all(|&x| x >= 3 && x + 3 < n)
}

/// Cells of the core Π_{3e₀, N−6}.
fn in_core(k: &[usize], n: usize) -> bool {
    k.iter().all(|&x| x >= 3 && x + 3 < n)
}

/// Map from the nodes of `inner` to the nodes of `outer`.
pub fn embed_nodes(outer: &BoxGrid, inner: &BoxGrid) -> Result<Vec<usize>> {
    let n = outer.spec.lateral_dim;
    let mut shift = vec![0usize; outer.mesh.axes()];
    for a in 0..n {
        let off = inner.alpha[a] - outer.alpha[a];
        let cell_nodes = inner.mesh.dims[a] / inner.n_cells;
        if off < 0 || off as usize + inner.n_cells > outer.n_cells {
            return Err(Error::Precondition("inner box is not contained in the outer box".into()));
        }
        shift[a] = off as usize * cell_nodes;
    }
    Ok((0..inner.len())
        .map(|i| {
            let m: Vec<usize> = inner.mesh.multi(i).iter().zip(&shift).map(|(x, s)| x + s).collect();
            outer.mesh.index(&m)
        })
        .collect())
}

/// Cutoff equal to 1 on Π_{β+3e₀, ℓ−6} and 0 off Π_{β+e₀, ℓ−2}, with its
/// derivative bounds checked against c₅ and c₅².
pub fn inner_cutoff(spec: &GridSpec, beta: &[i64], ell: usize, c5: f64) -> (Cutoff, bool) {
    let e = &spec.lateral_cell_lengths;
    let ramp = 2.0 * spec.min_lattice_length();
    let cut = Cutoff {
        lo: beta.iter().zip(e).map(|(&b, l)| (b as f64 + 3.0) * l).collect(),
        hi: beta.iter().zip(e).map(|(&b, l)| (b as f64 + ell as f64 - 3.0) * l).collect(),
        ramp,
    };
    let ok = SMOOTHSTEP_D1 / ramp <= c5 && SMOOTHSTEP_D2 / (ramp * ramp) <= c5 * c5;
    (cut, ok)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliReport {
    pub energy: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub theta: f64,
    /// ‖χ_{Υβ}(H_β − E)⁻¹χ_U‖
    pub inner_factor: f64,
    /// ‖χ_{Υα}(H_α − E)⁻¹χ_{Υβ}‖
    pub outer_factor: f64,
    pub cutoff_ok: bool,
    pub pass: bool,
}

/// Geometric resolvent inequality between Π_{α,L} and Π_{β,ℓ}, β = α + offset.
#[allow(clippy::too_many_arguments)]
pub fn verify_sli(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    epsilon: f64,
    xi: &Configuration,
    outer: &BoxGrid,
    offset: &[usize],
    ell: usize,
    e: f64,
    consts: &BoundConstants,
) -> Result<SliReport> {
    let big_l = outer.n_cells;
    let n = outer.spec.lateral_dim;
    if big_l < 7 || ell < 7 || offset.len() != n || offset.iter().any(|&o| o < 3 || o + ell + 3 > big_l) {
        return Err(Error::Precondition(format!(
            "inner box (offset {offset:?}, side {ell}) must lie in the core of the outer box of side {big_l}"
        )));
    }
    let beta: Vec<i64> = outer.alpha.iter().zip(offset).map(|(a, &o)| a + o as i64).collect();
    let inner = build_box_grid(&outer.spec, &beta, ell, outer.lateral_bc.clone())?;
    let xi_in = xi.restrict(outer, &inner)?;
    let op_out = assemble_box_operator(model, v0, outer, epsilon, xi)?;
    let op_in = assemble_box_operator(model, v0, &inner, epsilon, &xi_in)?;
    let shifted = |k: &[usize]| -> Option<Vec<usize>> {
        k.iter().zip(offset).map(|(&x, &o)| x.checked_sub(o).filter(|&y| y < ell)).collect()
    };
    let belt_alpha = outer.mask_cells(|k| in_belt(k, big_l));
    let u_outer = outer.mask_cells(|k| shifted(k).is_some_and(|s| in_core(&s, ell)));
    let belt_beta_outer = outer.mask_cells(|k| shifted(k).is_some_and(|s| in_belt(&s, ell)));
    let belt_beta = inner.mask_cells(|k| in_belt(k, ell));
    let u_inner = inner.mask_cells(|k| in_core(k, ell));
    let d_out = op_out.decomposition()?;
    let d_in = op_in.decomposition()?;
    let lhs = d_out.resolvent_block_norm(e, &belt_alpha, &u_outer)?;
    let inner_factor = d_in.resolvent_block_norm(e, &belt_beta, &u_inner)?;
    let outer_factor = d_out.resolvent_block_norm(e, &belt_alpha, &belt_beta_outer)?;
    let th = theta(consts, e, n);
    let rhs = th * inner_factor * outer_factor;
    let (_, cutoff_ok) = inner_cutoff(&outer.spec, &beta, ell, consts.c5);
    Ok(SliReport { energy: e, lhs, rhs, theta: th, inner_factor, outer_factor, cutoff_ok, pass: lhs <= rhs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdiInstance {
    pub energy: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdiReport {
    pub instances: Vec<EdiInstance>,
    /// Eigenpairs skipped as resonant with the small box.
    pub skipped: usize,
    pub skip_rate: f64,
    pub pass: bool,
}

/// Eigenfunction decay inequality on Π_{α,L} ⊂ big box, using the lowest
/// `pairs` eigenfunctions of the big box as generalised eigenfunctions.
#[allow(clippy::too_many_arguments)]
pub fn verify_edi(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    epsilon: f64,
    xi: &Configuration,
    big: &BoxGrid,
    offset: &[usize],
    l: usize,
    inner_bc: LateralBc,
    pairs: usize,
    consts: &BoundConstants,
) -> Result<EdiReport> {
    let n = big.spec.lateral_dim;
    if l < 7 || big.n_cells < 3 * l || offset.len() != n || offset.iter().any(|&o| o + l > big.n_cells) {
        return Err(Error::Precondition(format!("need L_big >= 3L and L >= 7 (L_big {}, L {l})", big.n_cells)));
    }
    let alpha: Vec<i64> = big.alpha.iter().zip(offset).map(|(a, &o)| a + o as i64).collect();
    let inner = build_box_grid(&big.spec, &alpha, l, inner_bc)?;
    let map = embed_nodes(big, &inner)?;
    let xi_in = xi.restrict(big, &inner)?;
    let op_big = assemble_box_operator(model, v0, big, epsilon, xi)?;
    let op_in = assemble_box_operator(model, v0, &inner, epsilon, &xi_in)?;
    let d_big = op_big.decomposition()?;
    let d_in = op_in.decomposition()?;
    let belt = inner.mask_cells(|k| in_belt(k, l));
    let core = inner.mask_cells(|k| in_core(k, l));
    let w = inner.weight();
    let mut instances = Vec::new();
    let mut skipped = 0;
    let count = pairs.min(d_big.dim());
    for k in 0..count {
        let e = d_big.values[k];
        if d_in.distance(e) <= 1e-8 * (1.0 + e.abs()) {
            skipped += 1;
            continue;
        }
        let psi_big = d_big.vector(k);
        let psi: Vec<C64> = map.iter().map(|&j| psi_big[j]).collect();
        let masked = |mask: &[bool]| -> f64 {
            (psi.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x.norm_sqr()).sum::<f64>() * w).sqrt()
        };
        let lhs = masked(&core);
        let block = d_in.resolvent_block_norm(e, &belt, &core)?;
        let rhs = theta(consts, e, n) * block * masked(&belt);
        instances.push(EdiInstance { energy: e, lhs, rhs, pass: lhs <= rhs });
    }
    let pass = instances.iter().all(|i| i.pass);
    Ok(EdiReport { skip_rate: skipped as f64 / count.max(1) as f64, instances, skipped, pass })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeReport {
    pub count: usize,
    pub bound: f64,
    pub threshold: f64,
    pub c_weyl: f64,
    pub pass: bool,
}

/// Weyl term 1 + t^{d/2} |□| Nⁿ, d the physical dimension.
pub fn weyl_factor(spec: &GridSpec, t: f64, n_cells: usize) -> f64 {
    let d = spec.physical_dim() as f64;
    1.0 + t.max(0.0).powf(0.5 * d) * spec.cell_volume() * (n_cells as f64).powi(spec.lateral_dim as i32)
}

/// Eigenvalues of H − Λ₀ up to 4C_b against C_Weyl[1 + (4C_b + ‖V₀ − Λ₀‖)^{d/2}|□|Nⁿ].
pub fn verify_ne(op: &FiniteVolumeOperator, lambda0: f64, c_b: f64, v0_sup: f64, c_weyl: f64) -> Result<NeReport> {
    let threshold = 4.0 * c_b;
    let count = op.decomposition()?.count_leq(lambda0 + threshold)?;
    let bound = c_weyl * weyl_factor(&op.grid.spec, threshold + v0_sup, op.grid.n_cells);
    Ok(NeReport { count, bound, threshold, c_weyl, pass: count as f64 <= bound })
}

/// max over free lateral-Neumann boxes and thresholds t of
/// #{eigenvalues of H⁰ − Λ₀ ≤ t} / (1 + t^{d/2}|□|Nⁿ).
pub fn calibrate_c_weyl(
    spec: &GridSpec,
    v0: &TransversalPotential,
    lambda0: f64,
    n_list: &[usize],
    thresholds: &[f64],
) -> Result<f64> {
    let cell = build_cell_grid(spec)?;
    let alpha = vec![0i64; spec.lateral_dim];
    let mut c: f64 = 0.0;
    for &n in n_list {
        let grid = build_box_grid(spec, &alpha, n, LateralBc::neumann(&cell))?;
        let h = assemble_box_h0(&grid, v0)?;
        if h.dim() > DENSE_LIMIT {
            continue;
        }
        let dec = Decomposition::new(&h);
        for &t in thresholds {
            let count = dec.count_leq(lambda0 + t)?;
            c = c.max(count as f64 / weyl_factor(spec, t, n));
        }
    }
    if c == 0.0 {
        return Err(Error::Precondition("no calibration box fits the dense limit".into()));
    }
    Ok(c)
}

/// Default threshold ladder for [`calibrate_c_weyl`].
pub fn weyl_thresholds() -> Vec<f64> {
    (-6..=10).map(|k| 0.37 * 2f64.powi(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{expand, ground_state_baseline};
    use crate::grid::{assemble_h0, TransversalBc};
    use crate::models::{build_model, ModelParams};
    use crate::spectral;
    use proptest::prelude::*;

    fn fixture(w1: &str, m: usize) -> (CellGrid, PerturbationModel) {
        let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], m)).unwrap();
        let model = build_model(&ModelParams::potential(w1, "0").unwrap(), &cell).unwrap();
        (cell, model)
    }

    fn uniform(b: f64) -> DisorderLaw {
        DisorderLaw::uniform(b).unwrap()
    }

    #[test]
    fn zero_coupling_is_h0() {
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let grid = build_box_grid(&cell.spec, &[0], 3, LateralBc::Dirichlet).unwrap();
        let xi = Configuration::new(vec![0.3, -0.2, 1.0], -0.5).unwrap();
        let op = assemble_box_operator(&model, &v0, &grid, 0.0, &xi).unwrap();
        let h0 = assemble_box_h0(&grid, &v0).unwrap();
        assert_eq!(op.matrix.to_dense(), h0.to_dense());
    }

    #[test]
    fn cellwise_assembly_matches_dense_oracle() {
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let grid = build_box_grid(&cell.spec, &[2], 4, LateralBc::Periodic).unwrap();
        let xi = Configuration::new(vec![0.1, 0.9, 0.4, 0.7], 0.0).unwrap();
        let eps = 0.3;
        let op = assemble_box_operator(&model, &v0, &grid, eps, &xi).unwrap();
        let mut dense = assemble_box_h0(&grid, &v0).unwrap().to_dense();
        for i in 0..grid.len() {
            let x = grid.mesh.coord(i)[0];
            let k = (x.floor() as i64 - 2) as usize;
            dense[(i, i)] += C64::new(eps * xi.values[k] * (2.0 * std::f64::consts::PI * x).cos(), 0.0);
        }
        assert!((op.matrix.to_dense() - dense).iter().all(|d| d.norm() < 1e-12));
    }

    #[test]
    fn configuration_domain_is_checked() {
        let (cell, model) = fixture("-1", 8);
        let grid = build_box_grid(&cell.spec, &[0], 3, LateralBc::Periodic).unwrap();
        let xi = Configuration::constant(2, 1.0, 0.0).unwrap();
        assert!(assemble_box_operator(&model, &TransversalPotential::zero(), &grid, 0.1, &xi).is_err());
        assert!(Configuration::new(vec![1.2], 0.0).is_err());
    }

    #[test]
    fn linear_fixture_box_ground_state() {
        let (cell, model) = fixture("-1", 8);
        let v0 = TransversalPotential::zero();
        let eps = 0.1;
        for n in [1, 3, 5] {
            let grid = build_box_grid(&cell.spec, &[0], n, mezincescu_bc(&model, &cell, &v0, eps).unwrap()).unwrap();
            let op = assemble_box_operator(&model, &v0, &grid, eps, &Configuration::constant(n, 1.0, -0.5).unwrap()).unwrap();
            assert!((op.ground_value().unwrap() + eps).abs() < 1e-12);
        }
    }

    #[test]
    fn mezincescu_consistency_on_cos_model() {
        let (cell, model) = fixture("cos(2*pi()*x) + 0.5*sin(4*pi()*x)", 16);
        let v0 = TransversalPotential::zero();
        let eps = 0.2;
        let lambda_eps = cell_eigenvalue(&model, &cell, &v0, eps).unwrap().pair.value;
        let rho = mezincescu_rho(&model, &cell, &v0, eps).unwrap();
        assert!(rho.sup_abs() > 1e-4);
        for n in [2, 4] {
            let grid = build_box_grid(&cell.spec, &[0], n, LateralBc::Mezincescu(Some(rho.clone()))).unwrap();
            let op = assemble_box_operator(&model, &v0, &grid, eps, &Configuration::constant(n, 1.0, 0.0).unwrap()).unwrap();
            assert!((op.ground_value().unwrap() - lambda_eps).abs() <= 1e-8 * (1.0 + lambda_eps.abs()));
        }
    }

    #[test]
    fn dirichlet_dominates_mezincescu() {
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let law = uniform(0.0);
        let eps = 0.3;
        let mz = build_box_grid(&cell.spec, &[0], 4, mezincescu_bc(&model, &cell, &v0, eps).unwrap()).unwrap();
        let di = mz.with_bc(LateralBc::Dirichlet);
        for s in 0..10 {
            let xi = law.sample_configuration(&mz, 7, s).unwrap();
            let a = assemble_box_operator(&model, &v0, &di, eps, &xi).unwrap().ground_value().unwrap();
            let b = assemble_box_operator(&model, &v0, &mz, eps, &xi).unwrap().ground_value().unwrap();
            assert!(a >= b - 1e-10);
        }
    }

    #[test]
    fn linear_fixture_sweep_and_gap_bound() {
        let (cell, model) = fixture("-1", 8);
        let v0 = TransversalPotential::zero();
        let law = uniform(-0.5);
        let eps: Vec<f64> = vec![0.02, 0.04, 0.06, 0.08, 0.1];
        let sweep = spectral_minimum_sweep(&model, &cell, &v0, 0.0, &eps, &law, 2, 20, 1, true).unwrap();
        for r in &sweep.rows {
            assert_eq!(r.violations, 0);
            assert!(r.attained_at_one);
            assert!((r.min_value + r.epsilon).abs() < 1e-12);
        }
        assert!((sweep.rate.as_ref().unwrap().slope - 1.0).abs() < 1e-9);
        let report = expand(&model, &cell, &v0, -0.5).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 2, LateralBc::neumann(&cell)).unwrap();
        let e = 0.1;
        let op = assemble_box_operator(&model, &v0, &grid, e, &Configuration::constant(2, -0.5, -0.5).unwrap()).unwrap();
        let g = ground_state_gap_bound(&op, -e, &report, 1.0).unwrap();
        assert!((g.lhs - 1.5 * e).abs() < 1e-12 && (g.rhs - 1.5 * e / 4.0).abs() < 1e-12);
        assert!((g.margin - 0.75 * 1.5 * e).abs() < 1e-12);
        let one = assemble_box_operator(&model, &v0, &grid, e, &Configuration::constant(2, 1.0, -0.5).unwrap()).unwrap();
        let g1 = ground_state_gap_bound(&one, -e, &report, 1.0).unwrap();
        assert!(g1.lhs.abs() < 1e-12 && g1.rhs == 0.0);
        assert!(matches!(ground_state_gap_bound(&op, -e, &report, 0.2), Err(Error::Regime(_))));
    }

    #[test]
    fn combes_thomas_rate_grows_with_distance_to_spectrum() {
        let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], 8)).unwrap();
        let model = build_model(&ModelParams::potential("0", "0").unwrap(), &cell).unwrap();
        let v0 = TransversalPotential::zero();
        let grid = build_box_grid(&cell.spec, &[0], 8, LateralBc::neumann(&cell)).unwrap();
        let op = assemble_box_operator(&model, &v0, &grid, 0.0, &Configuration::constant(8, 1.0, 0.0).unwrap()).unwrap();
        let a = combes_thomas_profile(&op, -1.0).unwrap();
        let b = combes_thomas_profile(&op, -4.0).unwrap();
        assert!(a.rate > 0.0 && a.r_squared >= 0.9);
        assert!(b.rate > a.rate);
        assert!((a.rate - 1.0).abs() < 0.1, "free decay rate sqrt(1) = {}", a.rate);
        assert!(combes_thomas_profile(&op, 0.5).is_err());
    }

    #[test]
    fn combes_thomas_diagonal_operator_is_flagged() {
        let h = SparseHermitian::diagonal(&[1.0; 32]);
        let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], 8)).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 4, LateralBc::Periodic).unwrap();
        let op = FiniteVolumeOperator {
            grid,
            epsilon: 0.0,
            xi: Configuration::constant(4, 1.0, 0.0).unwrap(),
            matrix: h,
            decomposition: OnceLock::new(),
        };
        assert!(combes_thomas_profile(&op, 0.0).unwrap().rate.is_infinite());
    }

    #[test]
    fn theta_for_potential_model() {
        let (cell, model) = fixture("-1", 8);
        let c = model.bound_constants(1.0, 0.0);
        assert_eq!(c.c6, 0.0);
        let t = theta(&c, -0.5, 1);
        assert!((t - ((1.0 + 2.0 + 12.0f64).sqrt() + 1.0)).abs() < 1e-14);
        let _ = cell;
    }

    #[test]
    fn sli_holds_deep_below_spectrum() {
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let eps = 0.2;
        let outer = build_box_grid(&cell.spec, &[0], 14, mezincescu_bc(&model, &cell, &v0, eps).unwrap()).unwrap();
        let xi = uniform(0.0).sample_configuration(&outer, 3, 0).unwrap();
        let consts = model.bound_constants(1.0, 0.0);
        let r = verify_sli(&model, &v0, eps, &xi, &outer, &[3], 7, -2.0, &consts).unwrap();
        assert!(r.pass && r.cutoff_ok && r.lhs > 0.0, "{r:?}");
        assert!(verify_sli(&model, &v0, eps, &xi, &outer, &[2], 7, -2.0, &consts).is_err());
    }

    #[test]
    fn edi_on_disordered_box() {
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let big = build_box_grid(&cell.spec, &[0], 24, LateralBc::neumann(&cell)).unwrap();
        let xi = uniform(0.0).sample_configuration(&big, 4, 0).unwrap();
        let consts = model.bound_constants(1.0, 0.0);
        let r = verify_edi(&model, &v0, 0.5, &xi, &big, &[8], 8, LateralBc::Dirichlet, 10, &consts).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.skip_rate < 0.2);
    }

    #[test]
    fn weyl_counting() {
        let spec = GridSpec::whole_space(vec![1.0], 8);
        let c = calibrate_c_weyl(&spec, &TransversalPotential::zero(), 0.0, &[1, 2, 4, 8], &weyl_thresholds()).unwrap();
        assert!(c > 0.5 && c.is_finite());
        let (cell, model) = fixture("cos(2*pi()*x)", 8);
        let v0 = TransversalPotential::zero();
        let counts: Vec<usize> = [4usize, 8]
            .iter()
            .map(|&n| {
                let grid = build_box_grid(&cell.spec, &[0], n, LateralBc::neumann(&cell)).unwrap();
                let xi = uniform(0.0).sample_configuration(&grid, 5, 0).unwrap();
                let op = assemble_box_operator(&model, &v0, &grid, 0.1, &xi).unwrap();
                let r = verify_ne(&op, 0.0, 0.3, 0.0, c).unwrap();
                assert!(r.pass);
                r.count
            })
            .collect();
        assert!(counts[1] as f64 <= 1.2 * 2.0 * counts[0] as f64, "{counts:?}");
        // One free cell: the Neumann modes below the threshold.
        let grid = build_box_grid(&cell.spec, &[0], 1, LateralBc::neumann(&cell)).unwrap();
        let op = assemble_box_operator(&model, &v0, &grid, 0.0, &Configuration::constant(1, 1.0, 0.0).unwrap()).unwrap();
        let free = spectral::dense_eigenvalues(&op.matrix).iter().filter(|&&l| l <= 4.0 * 12.0).count();
        assert_eq!(verify_ne(&op, 0.0, 12.0, 0.0, c).unwrap().count, free);
    }

    #[test]
    fn two_periodic_patterns() {
        let spec = GridSpec::layer(vec![1.0, 1.0], 1.0, 8, 8, [TransversalBc::Dirichlet; 2]);
        let cell = build_cell_grid(&spec).unwrap();
        let grid = build_box_grid(&spec, &[0, 0], 4, LateralBc::Periodic).unwrap();
        let confs = two_periodic_configurations(&grid, -0.5).unwrap();
        assert_eq!(confs.len(), 16);
        assert!(two_periodic_configurations(&build_box_grid(&spec, &[0, 0], 3, LateralBc::Periodic).unwrap(), 0.0)
            .unwrap()
            .is_empty());
        let _ = (cell, assemble_h0, ground_state_baseline);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn periodic_box_bracketed_below(seed in 0u64..1000, eps in 0.02f64..0.2) {
            let (cell, model) = fixture("cos(2*pi()*x)", 8);
            let v0 = TransversalPotential::zero();
            let lambda_eps = cell_eigenvalue(&model, &cell, &v0, eps).unwrap().pair.value;
            let grid = build_box_grid(&cell.spec, &[0], 4, LateralBc::Periodic).unwrap();
            let xi = uniform(0.0).sample_configuration(&grid, seed, 0).unwrap();
            let op = assemble_box_operator(&model, &v0, &grid, eps, &xi).unwrap();
            prop_assert!(op.matrix.hermitian_defect() <= 1e-12);
            prop_assert!(op.ground_value().unwrap() >= lambda_eps - BRACKET_TOL);
        }
    }
}
