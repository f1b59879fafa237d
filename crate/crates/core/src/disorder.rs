//! Disorder laws and the probabilistic checks built on them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{cell_eigenvalue, CaseLabel, ExpansionReport};
use crate::expr::{Expr, Point};
use crate::finite_volume::{
    assemble_box_operator, assemble_cellwise, mezincescu_bc, weyl_factor, Configuration,
};
use crate::grid::{assemble_box_h0, build_box_grid, BoxGrid, CellGrid, TransversalPotential};
use crate::models::PerturbationModel;
use crate::sparse::SparseHermitian;
use crate::spectral::{dense_eigenvalues, Decomposition};
use crate::stats;

/// Simpson intervals used to tabulate a law.
const QUADRATURE_INTERVALS: usize = 1 << 14;

/// Absolutely continuous law on [b, 1] with tabulated CDF.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisorderLaw {
    pub density: Expr,
    pub b: f64,
    /// E|ω₀|
    pub mean_abs: f64,
    /// E(1 − ω₀)
    pub mean_deficit: f64,
    /// ∫|h₀| plus the total variation of h₀ extended by zero.
    pub bv_norm: f64,
    #[serde(skip)]
    cdf: Vec<f64>,
}

fn simpson(h: f64, f: &[f64]) -> f64 {
    let n = f.len() - 1;
    let inner: f64 = (1..n).map(|i| if i % 2 == 1 { 4.0 * f[i] } else { 2.0 * f[i] }).sum();
    h / 3.0 * (f[0] + f[n] + inner)
}

impl DisorderLaw {
    pub fn new(density: Expr, b: f64) -> Result<Self> {
        if !(-1.0..1.0).contains(&b) {
            return Err(Error::InvalidLaw(format!("b = {b} must lie in [-1, 1)")));
        }
        let ev = density.evaluator()?;
        let m = QUADRATURE_INTERVALS;
        let h = (1.0 - b) / m as f64;
        let xs: Vec<f64> = (0..=m).map(|i| b + i as f64 * h).collect();
        let f = xs.iter().map(|&x| ev.eval(Point { x, ..Point::default() })).collect::<Result<Vec<f64>>>()?;
        if let Some((x, v)) = xs.iter().zip(&f).find(|(_, v)| **v < 0.0) {
            return Err(Error::InvalidLaw(format!("density is negative ({v}) at {x}")));
        }
        let total = simpson(h, &f);
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidLaw(format!("density integrates to {total}, not 1")));
        }
        let edge = m / 100;
        if f[..=edge].iter().all(|&v| v == 0.0) || f[m - edge..].iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidLaw(format!("support is not the full interval [{b}, 1]")));
        }
        let weighted = |g: &dyn Fn(f64) -> f64| -> f64 {
            let v: Vec<f64> = xs.iter().zip(&f).map(|(&x, &p)| g(x) * p).collect();
            simpson(h, &v)
        };
        let mean_abs = weighted(&|x: f64| x.abs());
        let mean_deficit = weighted(&|x: f64| 1.0 - x);
        let variation: f64 = f.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() + f[0] + f[m];
        let mut cdf = Vec::with_capacity(m / 2 + 1);
        cdf.push(0.0);
        for k in 0..m / 2 {
            let s = h / 3.0 * (f[2 * k] + 4.0 * f[2 * k + 1] + f[2 * k + 2]);
            cdf.push(cdf[k] + s);
        }
        let last = *cdf.last().unwrap_or(&1.0);
        cdf.iter_mut().for_each(|c| *c /= last);
        Ok(DisorderLaw { density, b, mean_abs, mean_deficit, bv_norm: total + variation, cdf })
    }

    /// Uniform law on [b, 1].
    pub fn uniform(b: f64) -> Result<Self> {
        Self::new(Expr::constant(1.0 / (1.0 - b)), b)
    }

    /// Checks declared moments against quadrature.
    pub fn check_moments(&self, mean_abs: f64, mean_deficit: f64) -> Result<()> {
        if (mean_abs - self.mean_abs).abs() > 1e-8 || (mean_deficit - self.mean_deficit).abs() > 1e-8 {
            return Err(Error::InvalidLaw(format!(
                "declared moments ({mean_abs}, {mean_deficit}) differ from quadrature ({}, {})",
                self.mean_abs, self.mean_deficit
            )));
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.b {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let n = self.cdf.len() - 1;
        let s = (x - self.b) / (1.0 - self.b) * n as f64;
        let k = (s.floor() as usize).min(n - 1);
        let t = s - k as f64;
        self.cdf[k] * (1.0 - t) + self.cdf[k + 1] * t
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let n = self.cdf.len() - 1;
        let k = self.cdf.partition_point(|&c| c <= u).clamp(1, n);
        let (lo, hi) = (self.cdf[k - 1], self.cdf[k]);
        let t = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
        let x = self.b + (1.0 - self.b) * ((k - 1) as f64 + t.clamp(0.0, 1.0)) / n as f64;
        x.clamp(self.b, 1.0)
    }

    /// Draw at lattice point `cell` for sample `sample`.
    pub fn draw(&self, seed: u64, sample: u64, cell: &[i64]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample);
        rng.set_word_pos(2 * lattice_key(cell));
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        self.inverse_cdf(u)
    }

    pub fn sample_configuration(&self, grid: &BoxGrid, seed: u64, sample: u64) -> Result<Configuration> {
        Configuration::new(grid.cells.iter().map(|k| self.draw(seed, sample, k)).collect(), self.b)
    }

    /// `count` draws along the first lattice axis.
    pub fn sample_values(&self, seed: u64, sample: u64, count: usize) -> Vec<f64> {
        (0..count as i64).map(|i| self.draw(seed, sample, &[i])).collect()
    }
}

fn zigzag(x: i64) -> u128 {
    ((x << 1) ^ (x >> 63)) as u64 as u128
}

/// Injective map from lattice points of fixed dimension to stream positions.
fn lattice_key(cell: &[i64]) -> u128 {
    cell.iter().fold(0u128, |acc, &x| {
        let y = zigzag(x);
        (acc + y) * (acc + y + 1) / 2 + y
    })
}

/// Form-bound constants on a reference box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WegnerConstants {
    pub epsilon: f64,
    /// |⟨L^ε(ω)φ, φ⟩| ≤ ¼⟨Hφ, φ⟩ + C_b‖φ‖²
    pub c_b: f64,
    pub d_a: f64,
    /// Bound for the ε² form of 𝔄L − L.
    pub d_b: f64,
    /// 8 D_b
    pub d: f64,
    /// ε³ variant, present when L₂ ≤ 0.
    pub d_b_cubic: Option<f64>,
    pub d_cubic: Option<f64>,
    pub configurations: usize,
}

impl WegnerConstants {
    /// Largest admissible E₀ over the available variants.
    pub fn regime_edge(&self, lambda0: f64) -> f64 {
        let quad = lambda0 - self.d * self.epsilon.powi(2);
        match self.d_cubic {
            Some(d3) => quad.max(lambda0 - d3 * self.epsilon.powi(3)),
            None => quad,
        }
    }

    /// (D, p) of the variant realising [`WegnerConstants::regime_edge`].
    pub fn selected(&self) -> (f64, i32) {
        match self.d_cubic {
            Some(d3) if d3 * self.epsilon.powi(3) <= self.d * self.epsilon.powi(2) => (d3, 3),
            _ => (self.d, 2),
        }
    }
}

/// Extreme configurations plus random draws used in form-bound maximisation.
fn probe_configurations(grid: &BoxGrid, law: &DisorderLaw, samples: usize, seed: u64) -> Result<Vec<Configuration>> {
    let cells = grid.cell_count();
    let mut out = Vec::new();
    if cells <= 12 {
        for mask in 0..1usize << cells {
            let v = (0..cells).map(|c| if mask >> c & 1 == 1 { 1.0 } else { law.b }).collect();
            out.push(Configuration::new(v, law.b)?);
        }
    }
    if law.b < 0.0 {
        out.push(Configuration::constant(cells, 0.0, law.b)?);
    }
    for s in 0..samples {
        out.push(law.sample_configuration(grid, seed, s as u64)?);
    }
    Ok(out)
}

fn lambda_max(m: &SparseHermitian) -> f64 {
    *dense_eigenvalues(m).last().unwrap_or(&0.0)
}

/// max over ± of λ_max(±X − c·A), floored at 0.
fn two_sided_bound(x: &SparseHermitian, a: &SparseHermitian, c: f64) -> f64 {
    if x.max_abs() == 0.0 {
        return 0.0;
    }
    let up = lambda_max(&SparseHermitian::combine(&[(1.0, x), (-c, a)]));
    let down = lambda_max(&SparseHermitian::combine(&[(-1.0, x), (-c, a)]));
    up.max(down).max(0.0)
}

/// C_b and D on a reference box, maximised over extreme and sampled ω.
#[allow(clippy::too_many_arguments)]
pub fn wegner_constants(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    lambda0: f64,
    epsilon: f64,
    law: &DisorderLaw,
    grid: &BoxGrid,
    samples: usize,
    seed: u64,
) -> Result<WegnerConstants> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Regime(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let h = assemble_box_h0(grid, v0)?;
    let shifted = h.shifted(-lambda0);
    let confs = probe_configurations(grid, law, samples, seed)?;
    let cubic = model.order2_nonpositive;
    let per: Vec<(f64, f64, f64)> = confs
        .par_iter()
        .map(|xi| {
            let l = assemble_cellwise(grid, |c| model.matrix(epsilon * xi.values[c]));
            let v = assemble_cellwise(grid, |c| model.vector_field_matrix(epsilon * xi.values[c]))
                .scaled(1.0 / (epsilon * epsilon));
            let c_b = two_sided_bound(&l, &h, 0.25);
            let d_b = two_sided_bound(&v, &shifted, 0.125);
            let d_b3 = if cubic {
                let third = assemble_cellwise(grid, |c| {
                    SparseHermitian::identity(model.dim()).scaled(2.0 * model.l3 * xi.values[c].powi(3))
                });
                two_sided_bound(&third, &shifted, 0.125)
            } else {
                0.0
            };
            (c_b, d_b, d_b3)
        })
        .collect();
    let fold = |f: fn(&(f64, f64, f64)) -> f64| per.iter().map(f).fold(0.0, f64::max);
    let c_b = fold(|p| p.0);
    let d_b = fold(|p| p.1);
    let d_b3 = fold(|p| p.2);
    Ok(WegnerConstants {
        epsilon,
        c_b,
        d_a: 0.125,
        d_b,
        d: 8.0 * d_b,
        d_b_cubic: cubic.then_some(d_b3),
        d_cubic: cubic.then_some(8.0 * d_b3),
        configurations: confs.len(),
    })
}

/// sup ⟨(𝔄L − L)φ, φ⟩ / ⟨(H − E₀)φ, φ⟩ for one configuration.
#[allow(clippy::too_many_arguments)]
pub fn vector_field_check(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    lambda0: f64,
    epsilon: f64,
    omega: &Configuration,
    e0: f64,
    grid: &BoxGrid,
    consts: &WegnerConstants,
) -> Result<f64> {
    let edge = consts.regime_edge(lambda0);
    if e0 > edge + 1e-14 * (1.0 + edge.abs()) {
        return Err(Error::Regime(format!("E0 = {e0} above Lambda0 - D eps^p = {edge}")));
    }
    let v = assemble_cellwise(grid, |c| model.vector_field_matrix(epsilon * omega.values[c]));
    if v.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let a = assemble_box_h0(grid, v0)?.shifted(-e0).to_dense();
    let Some(chol) = a.clone().cholesky() else {
        if lambda_max(&v) <= 0.0 {
            return Ok(0.0);
        }
        return Err(Error::Regime(format!("H - E0 is not positive definite at E0 = {e0}")));
    };
    let l = chol.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&nalgebra::DMatrix::identity(a.nrows(), a.ncols()))
        .ok_or_else(|| Error::Regime("singular Cholesky factor".into()))?;
    let m = &linv * v.to_dense() * linv.adjoint();
    let m = (&m + m.adjoint()) * num_complex::Complex::new(0.5, 0.0);
    Ok(lambda_max(&SparseHermitian::from_dense(&m, 0.0)))
}

/// Vector-field quotients at E₀ over `samples` random configurations.
#[allow(clippy::too_many_arguments)]
pub fn vector_field_sweep(
    model: &PerturbationModel,
    v0: &TransversalPotential,
    lambda0: f64,
    epsilon: f64,
    law: &DisorderLaw,
    e0: f64,
    grid: &BoxGrid,
    consts: &WegnerConstants,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..samples)
        .into_par_iter()
        .map(|s| {
            let xi = law.sample_configuration(grid, seed, s as u64)?;
            vector_field_check(model, v0, lambda0, epsilon, &xi, e0, grid, consts)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WegnerPoint {
    pub energy: f64,
    pub kappa: f64,
    pub count: usize,
    pub frequency: f64,
    pub upper_ci: f64,
    pub bound: f64,
    pub pass: bool,
    /// count(κ) / count(κ/2) when both counts reach 20.
    pub halving_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WegnerReport {
    pub epsilon: f64,
    pub n_cells: usize,
    pub samples: usize,
    pub seed: u64,
    pub lambda0: f64,
    pub regime_edge: f64,
    pub constants: WegnerConstants,
    pub c_weyl: f64,
    pub bv_norm: f64,
    pub v0_sup: f64,
    pub points: Vec<WegnerPoint>,
    pub ratios_ok: bool,
    pub pass: bool,
}

/// Inputs of the Wegner experiment shared by every grid point.
#[derive(Clone, Debug)]
pub struct WegnerSetup<'a> {
    pub model: &'a PerturbationModel,
    pub cell: &'a CellGrid,
    pub v0: &'a TransversalPotential,
    pub lambda0: f64,
    pub v0_sup: f64,
    pub epsilon: f64,
    pub law: &'a DisorderLaw,
    pub constants: &'a WegnerConstants,
    pub c_weyl: f64,
}

/// Assembled bound 24 C_W ‖h₀‖/(Λ₀ − E)·[1 + (4C_b + ‖V₀‖)^{d/2}|□|Nⁿ]·κNⁿ.
pub fn wegner_bound(setup: &WegnerSetup, e: f64, kappa: f64, n_cells: usize) -> f64 {
    let spec = &setup.cell.spec;
    let volume = (n_cells as f64).powi(spec.lateral_dim as i32);
    24.0 * setup.c_weyl * setup.law.bv_norm / (setup.lambda0 - e)
        * weyl_factor(spec, 4.0 * setup.constants.c_b + setup.v0_sup, n_cells)
        * kappa
        * volume
}

/// Empirical P(dist(σ(H^ε), E) ≤ κ) on Mezincescu boxes against the bound.
pub fn wegner_empirical(
    setup: &WegnerSetup,
    grid_points: &[(f64, f64)],
    n_cells: usize,
    samples: usize,
    seed: u64,
) -> Result<WegnerReport> {
    if samples < 200 {
        return Err(Error::Precondition(format!("{samples} samples; at least 200 required")));
    }
    if setup.law.mean_deficit <= 0.0 {
        return Err(Error::InvalidLaw("degenerate law".into()));
    }
    let edge = setup.constants.regime_edge(setup.lambda0);
    for &(e, kappa) in grid_points {
        if e > edge || e >= setup.lambda0 {
            return Err(Error::Regime(format!("E = {e} above the edge {edge}")));
        }
        if !(kappa > 0.0 && kappa <= (setup.lambda0 - e) / 4.0) {
            return Err(Error::Regime(format!("kappa = {kappa} outside (0, (Lambda0 - E)/4]")));
        }
    }
    let alpha = vec![0i64; setup.cell.spec.lateral_dim];
    let bc = mezincescu_bc(setup.model, setup.cell, setup.v0, setup.epsilon)?;
    let grid = build_box_grid(&setup.cell.spec, &alpha, n_cells, bc)?;
    let spectra: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let xi = setup.law.sample_configuration(&grid, seed, s as u64)?;
            let op = assemble_box_operator(setup.model, setup.v0, &grid, setup.epsilon, &xi)?;
            Ok(dense_eigenvalues(&op.matrix))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits = |e: f64, k: f64| spectra.iter().filter(|s| s.iter().any(|l| (l - e).abs() <= k)).count();
    let points: Vec<WegnerPoint> = grid_points
        .iter()
        .map(|&(e, kappa)| {
            let count = hits(e, kappa);
            let half = hits(e, 0.5 * kappa);
            let (_, upper_ci) = stats::wilson_interval(count, samples, 0.99);
            let bound = wegner_bound(setup, e, kappa, n_cells);
            WegnerPoint {
                energy: e,
                kappa,
                count,
                frequency: count as f64 / samples as f64,
                upper_ci,
                bound,
                pass: upper_ci <= bound || bound >= 1.0,
                halving_ratio: (count >= 20 && half >= 20).then(|| count as f64 / half as f64),
            }
        })
        .collect();
    let ratios_ok = points.iter().filter_map(|p| p.halving_ratio).all(|r| (1.5..=2.5).contains(&r));
    let pass = points.iter().all(|p| p.pass);
    Ok(WegnerReport {
        epsilon: setup.epsilon,
        n_cells,
        samples,
        seed,
        lambda0: setup.lambda0,
        regime_edge: edge,
        constants: setup.constants.clone(),
        c_weyl: setup.c_weyl,
        bv_norm: setup.law.bv_norm,
        v0_sup: setup.v0_sup,
        points,
        ratios_ok,
        pass,
    })
}

/// The interval J_N of admissible disorder strengths.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JInterval {
    pub lo: f64,
    pub hi: f64,
    pub tau: u32,
    /// max(N₁^τ, K₁^τ)
    pub n_required: f64,
}

impl JInterval {
    pub fn contains(&self, eps: f64) -> bool {
        self.lo <= eps && eps <= self.hi
    }
}

pub fn default_tau(case: CaseLabel) -> Result<u32> {
    match case {
        CaseLabel::I => Ok(5),
        CaseLabel::II => Ok(17),
        CaseLabel::Other => Err(Error::CaseOther),
    }
}

pub fn j_interval(report: &ExpansionReport, law: &DisorderLaw, c0: f64, n1: usize, n_cells: usize, tau: u32) -> Result<JInterval> {
    let n = n_cells as f64;
    let t = tau as f64;
    let (lead, lo, hi, k1) = match report.case_label {
        CaseLabel::I => {
            if tau < 5 {
                return Err(Error::Precondition(format!("tau = {tau} < 5 in the linear case")));
            }
            let lead = 8.0 / (report.lambda1.abs() * law.mean_abs).sqrt();
            let k1 = if tau > 4 { (lead / c0).powf(2.0 / (t - 4.0)) } else { f64::INFINITY };
            (lead, lead / n.sqrt(), c0 / n.powf(2.0 / t), k1)
        }
        CaseLabel::II => {
            if tau < 17 {
                return Err(Error::Precondition(format!("tau = {tau} < 17 in the quadratic case")));
            }
            let lead = (2.0 / (report.eta * law.mean_abs)).sqrt();
            (lead, lead / n.powf(0.25), c0 / n.powf(4.0 / t), (lead / c0).powf(4.0 / (t - 16.0)))
        }
        CaseLabel::Other => return Err(Error::CaseOther),
    };
    let _ = lead;
    Ok(JInterval { lo, hi, tau, n_required: (n1 as f64).powf(t).max(k1.powf(t)) })
}

/// Geometry and decay constant of the initial-scale event.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IseSample {
    pub bottom: f64,
    /// Largest block norm over the energy grid; infinite when the
    /// spectrum reaches the top energy.
    pub max_norm: f64,
    pub success: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IseReport {
    pub epsilon: f64,
    pub n_cells: usize,
    pub samples: usize,
    pub seed: u64,
    pub j_interval: JInterval,
    pub n_requirement_met: bool,
    pub e_top: f64,
    pub distance: f64,
    pub c2: f64,
    pub threshold_norm: f64,
    pub successes: usize,
    pub frequency: f64,
    pub wilson_lower: f64,
    /// c₁ fitted from the failure frequency; absent without failures.
    pub c1_fit: Option<f64>,
    /// 1 − N^{n(1−1/τ)} exp(−c₁ N^{n/τ}) at the fitted c₁.
    pub success_threshold: Option<f64>,
}

/// Ingredients of the initial-scale experiment.
#[derive(Clone, Debug)]
pub struct IseSetup<'a> {
    pub model: &'a PerturbationModel,
    pub cell: &'a CellGrid,
    pub v0: &'a TransversalPotential,
    pub report: &'a ExpansionReport,
    pub law: &'a DisorderLaw,
    pub c0: f64,
    pub n1: usize,
}

/// Cells of B₁ = Π_{α + N/2 e₀, N/3} and B₂ = Π_{α + e₀, 1}, and their distance.
fn ise_blocks(grid: &BoxGrid) -> (Vec<bool>, Vec<bool>, f64) {
    let n = grid.n_cells;
    let lo = n / 2;
    let hi = lo + (n / 3).max(1);
    let b1 = grid.mask_cells(|k| k.iter().all(|&x| x >= lo && x < hi));
    let b2 = grid.mask_cells(|k| k.iter().all(|&x| x == 1));
    let gap = lo.saturating_sub(2) as f64;
    let dist = grid.spec.lateral_cell_lengths.iter().map(|l| (gap * l).powi(2)).sum::<f64>().sqrt();
    (b1, b2, dist)
}

/// Per-sample maximal block norm on the energy grid below E_top.
fn ise_samples(setup: &IseSetup, epsilon: f64, n_cells: usize, samples: usize, seed: u64) -> Result<(Vec<IseSample>, f64, f64, f64)> {
    let lambda_eps = cell_eigenvalue(setup.model, setup.cell, setup.v0, epsilon)?.pair.value;
    let e_top = lambda_eps + 0.5 / (n_cells as f64).sqrt();
    let alpha = vec![0i64; setup.cell.spec.lateral_dim];
    let bc = mezincescu_bc(setup.model, setup.cell, setup.v0, epsilon)?;
    let grid = build_box_grid(&setup.cell.spec, &alpha, n_cells, bc)?;
    let (b1, b2, dist) = ise_blocks(&grid);
    let energies: Vec<f64> = (0..16).map(|j| e_top - j as f64 * (e_top - lambda_eps + 1.0) / 15.0).collect();
    let out = (0..samples)
        .into_par_iter()
        .map(|s| {
            let xi = setup.law.sample_configuration(&grid, seed, s as u64)?;
            let op = assemble_box_operator(setup.model, setup.v0, &grid, epsilon, &xi)?;
            let dec: &Decomposition = op.decomposition()?;
            let bottom = dec.values[0];
            if bottom <= e_top {
                return Ok(IseSample { bottom, max_norm: f64::INFINITY, success: false });
            }
            let mut max_norm: f64 = 0.0;
            for &e in &energies {
                max_norm = max_norm.max(dec.resolvent_block_norm(e, &b1, &b2)?);
            }
            Ok(IseSample { bottom, max_norm, success: false })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, e_top, dist, lambda_eps))
}

/// Largest c₂ for which 2√N exp(−c₂ d/√N) dominates `norm`.
fn c2_admissible(norm: f64, n_cells: usize, dist: f64) -> f64 {
    let sn = (n_cells as f64).sqrt();
    if dist == 0.0 {
        return if norm <= 2.0 * sn { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    if norm == 0.0 {
        return f64::INFINITY;
    }
    (2.0 * sn / norm).ln() * sn / dist
}

/// c₂ as half the median admissible constant over pilot samples and box sizes.
pub fn calibrate_c2(setup: &IseSetup, epsilon_for: &dyn Fn(usize) -> f64, n_list: &[usize], pilot: usize, seed: u64) -> Result<f64> {
    let mut medians = Vec::new();
    for &n in n_list {
        let (s, _, dist, _) = ise_samples(setup, epsilon_for(n), n, pilot, seed)?;
        let mut c: Vec<f64> = s.iter().filter(|x| x.max_norm.is_finite()).map(|x| c2_admissible(x.max_norm, n, dist)).collect();
        if c.is_empty() {
            continue;
        }
        c.sort_by(|a, b| a.total_cmp(b));
        medians.push(c[c.len() / 2]);
    }
    let m = medians.into_iter().fold(f64::INFINITY, f64::min);
    if !m.is_finite() || m <= 0.0 {
        return Err(Error::Precondition("pilot produced no admissible decay constant".into()));
    }
    Ok(0.5 * m)
}

pub fn ise_empirical(setup: &IseSetup, epsilon: f64, n_cells: usize, tau: u32, c2: f64, samples: usize, seed: u64) -> Result<IseReport> {
    let j = j_interval(setup.report, setup.law, setup.c0, setup.n1, n_cells, tau)?;
    if !j.contains(epsilon) {
        return Err(Error::Precondition(format!("epsilon {epsilon} outside J_N = [{:.4e}, {:.4e}]", j.lo, j.hi)));
    }
    let (mut s, e_top, dist, _) = ise_samples(setup, epsilon, n_cells, samples, seed)?;
    let sn = (n_cells as f64).sqrt();
    let threshold_norm = 2.0 * sn * (-c2 * dist / sn).exp();
    for x in &mut s {
        x.success = x.max_norm <= threshold_norm;
    }
    let successes = s.iter().filter(|x| x.success).count();
    let frequency = successes as f64 / samples as f64;
    let (wilson_lower, _) = stats::wilson_interval(successes, samples, 0.99);
    let n = setup.cell.spec.lateral_dim as f64;
    let t = tau as f64;
    let prefactor = (n_cells as f64).powf(n * (1.0 - 1.0 / t));
    let fail = 1.0 - frequency;
    let c1_fit = (fail > 0.0).then(|| -(fail / prefactor).ln() / (n_cells as f64).powf(n / t));
    let success_threshold = c1_fit.map(|c1| 1.0 - prefactor * (-c1 * (n_cells as f64).powf(n / t)).exp());
    Ok(IseReport {
        epsilon,
        n_cells,
        samples,
        seed,
        j_interval: j,
        n_requirement_met: n_cells as f64 >= j.n_required,
        e_top,
        distance: dist,
        c2,
        threshold_norm,
        successes,
        frequency,
        wilson_lower,
        c1_fit,
        success_threshold,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationWindow {
    pub epsilon: f64,
    pub lambda_eps: f64,
    pub lower: f64,
    pub upper: f64,
    pub d: f64,
    pub p: i32,
    pub width: f64,
    pub nonempty: bool,
}

/// [Λ^ε, min(Λ₀ − Dε^p, Λ^ε + width)] and its non-triviality.
pub fn localization_window(report: &ExpansionReport, lambda_eps: f64, epsilon: f64, consts: &WegnerConstants, law: &DisorderLaw) -> Result<LocalizationWindow> {
    let (d, p, width, gain) = match report.case_label {
        CaseLabel::I => {
            let c1 = 8.0 / (report.lambda1.abs() * law.mean_abs).sqrt();
            (consts.d, 2, epsilon / (4.0 * c1), report.lambda1.abs() * epsilon / 2.0)
        }
        CaseLabel::II => {
            let c2 = (2.0 / (report.eta * law.mean_abs)).sqrt();
            let (d, p) = consts.d_cubic.map_or((consts.d, 2), |d3| (d3, 3));
            (d, p, epsilon * epsilon / (8.0 * c2 * c2), report.lambda2.abs() * epsilon * epsilon / 2.0)
        }
        CaseLabel::Other => return Err(Error::CaseOther),
    };
    let edge = d * epsilon.powi(p);
    let upper = (report.lambda0 - edge).min(lambda_eps + width);
    Ok(LocalizationWindow { epsilon, lambda_eps, lower: lambda_eps, upper, d, p, width, nonempty: gain > edge })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateKind {
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HkFeasibility {
    pub rate_kind: RateKind,
    pub rate_constant: f64,
    pub sup_a_sq: f64,
    /// Right end of the admissible ε interval in the linear case.
    pub epsilon_max: Option<f64>,
    pub feasible: bool,
    /// The fixed-interval reading leaves no window in the quadratic case.
    pub fixed_interval_empty: bool,
}

pub fn hk_feasibility(rate_kind: RateKind, rate_constant: f64, sup_a_sq: f64) -> Result<HkFeasibility> {
    if !(rate_constant > 0.0) || !(sup_a_sq >= 0.0) {
        return Err(Error::Precondition("rate constant must be positive and sup|A|^2 non-negative".into()));
    }
    Ok(match rate_kind {
        RateKind::Linear => HkFeasibility {
            rate_kind,
            rate_constant,
            sup_a_sq,
            epsilon_max: Some(if sup_a_sq == 0.0 { f64::INFINITY } else { rate_constant / (4.0 * sup_a_sq) }),
            feasible: true,
            fixed_interval_empty: false,
        },
        RateKind::Quadratic => HkFeasibility {
            rate_kind,
            rate_constant,
            sup_a_sq,
            epsilon_max: None,
            feasible: 4.0 * sup_a_sq <= rate_constant,
            fixed_interval_empty: true,
        },
    })
}

/// Mean of (1/Nⁿ)Σ(1 − ω_k) over samples and its standard error, for each
/// sample count in `counts`.
pub fn deficit_mean_errors(law: &DisorderLaw, grid: &BoxGrid, counts: &[usize], replicas: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let cells = grid.cell_count() as f64;
    counts
        .iter()
        .map(|&m| {
            let errs: Vec<f64> = (0..replicas)
                .map(|r| {
                    let mean = (0..m)
                        .map(|s| {
                            let xi = law.sample_configuration(grid, seed.wrapping_add(r as u64), s as u64)?;
                            Ok(xi.deficit() / cells)
                        })
                        .sum::<Result<f64>>()?
                        / m as f64;
                    Ok((mean - law.mean_deficit).powi(2))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((m, (errs.iter().sum::<f64>() / replicas as f64).sqrt()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::{expand, ground_state_baseline};
    use crate::grid::{build_cell_grid, GridSpec, LateralBc};
    use crate::models::{build_model, ModelParams};

    fn fixture(w1: &str, w2: &str) -> (CellGrid, PerturbationModel) {
        let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], 8)).unwrap();
        let model = build_model(&ModelParams::potential(w1, w2).unwrap(), &cell).unwrap();
        (cell, model)
    }

    #[test]
    fn uniform_draws_are_reproducible_and_in_range() {
        let law = DisorderLaw::uniform(0.0).unwrap();
        let a = law.sample_values(42, 0, 100);
        assert_eq!(a, law.sample_values(42, 0, 100));
        assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(a, law.sample_values(42, 1, 100));
        let shifted = DisorderLaw::uniform(-0.5).unwrap();
        assert!(shifted.sample_values(3, 0, 10_000).iter().all(|&x| x >= -0.5));
    }

    #[test]
    fn ks_statistic_against_cdf() {
        let law = DisorderLaw::new(Expr::parse("2*(1 - x)").unwrap(), 0.0).unwrap();
        let d = stats::ks_statistic(&law.sample_values(9, 0, 10_000), |x| {
            let x = x.clamp(0.0, 1.0);
            2.0 * x - x * x
        });
        assert!(d < 0.02, "KS {d}");
        assert!((law.mean_abs - 1.0 / 3.0).abs() < 1e-10);
        assert!((law.mean_deficit - 2.0 / 3.0).abs() < 1e-10);
        assert!((law.bv_norm - 5.0).abs() < 1e-10);
        assert!(law.check_moments(1.0 / 3.0, 2.0 / 3.0).is_ok());
        assert!(law.check_moments(0.3, 2.0 / 3.0).is_err());
    }

    #[test]
    fn invalid_laws_are_rejected() {
        assert!(DisorderLaw::new(Expr::parse("2").unwrap(), 0.0).is_err());
        assert!(DisorderLaw::new(Expr::parse("piecewise(x < 0.5, 2, 0)").unwrap(), 0.0).is_err());
        assert!(DisorderLaw::new(Expr::parse("2*x - 1").unwrap(), 0.0).is_err());
        assert!(DisorderLaw::uniform(1.0).is_err());
    }

    #[test]
    fn sampling_depends_on_lattice_point_only() {
        let law = DisorderLaw::uniform(0.0).unwrap();
        let spec = GridSpec::whole_space(vec![1.0], 8);
        let a = build_box_grid(&spec, &[0], 6, LateralBc::Periodic).unwrap();
        let b = build_box_grid(&spec, &[2], 2, LateralBc::Periodic).unwrap();
        let xa = law.sample_configuration(&a, 5, 3).unwrap();
        let xb = law.sample_configuration(&b, 5, 3).unwrap();
        assert_eq!(&xa.values[2..4], &xb.values[..]);
        let keys: std::collections::HashSet<u128> =
            (-5..5).flat_map(|i| (-5..5).map(move |j| lattice_key(&[i, j]))).collect();
        assert_eq!(keys.len(), 100);
    }

    #[test]
    fn linear_fixture_has_vanishing_vector_field() {
        let (cell, model) = fixture("-1", "0");
        let v0 = TransversalPotential::zero();
        let law = DisorderLaw::uniform(0.0).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 2, LateralBc::neumann(&cell)).unwrap();
        let c = wegner_constants(&model, &v0, 0.0, 0.1, &law, &grid, 8, 1).unwrap();
        assert_eq!(c.d, 0.0);
        assert!(c.c_b > 0.0 && c.c_b <= 0.1 + 1e-12);
        let xi = law.sample_configuration(&grid, 1, 0).unwrap();
        assert_eq!(vector_field_check(&model, &v0, 0.0, 0.1, &xi, 0.0, &grid, &c).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_term_gives_positive_d_and_bounded_quotient() {
        let (cell, model) = fixture("cos(2*pi()*x)", "-1");
        let v0 = TransversalPotential::zero();
        let law = DisorderLaw::uniform(-0.5).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 2, LateralBc::neumann(&cell)).unwrap();
        let eps = 0.1;
        let c = wegner_constants(&model, &v0, 0.0, eps, &law, &grid, 8, 1).unwrap();
        assert!(c.d > 0.0 && c.d.is_finite());
        assert_eq!(c.d_cubic, Some(0.0));
        let e0 = -c.d * eps * eps;
        let q = vector_field_sweep(&model, &v0, 0.0, eps, &law, e0, &grid, &c, 10, 2).unwrap();
        assert!(q.iter().all(|&x| x <= 0.25 + 1e-8));
        let (cell2, pos) = fixture("cos(2*pi()*x)", "1");
        let c2 = wegner_constants(&pos, &v0, 0.0, eps, &law, &grid, 8, 1).unwrap();
        assert!(c2.d_cubic.is_none());
        let raised = -c2.d * eps * eps / 16.0;
        let xi = law.sample_configuration(&grid, 1, 0).unwrap();
        assert!(matches!(vector_field_check(&pos, &v0, 0.0, eps, &xi, raised, &grid, &c2), Err(Error::Regime(_))));
        let at_edge = vector_field_check(&pos, &v0, 0.0, eps, &xi, -c2.d * eps * eps, &grid, &c2).unwrap();
        assert!(at_edge > 0.0 && at_edge <= 0.25 + 1e-8);
        let _ = cell2;
    }

    #[test]
    fn hk_feasibility_substitution() {
        let l = hk_feasibility(RateKind::Linear, 1.0, 1.0).unwrap();
        assert_eq!(l.epsilon_max, Some(0.25));
        assert!(hk_feasibility(RateKind::Quadratic, 4.0, 1.0).unwrap().feasible);
        assert!(!hk_feasibility(RateKind::Quadratic, 1.0, 1.0).unwrap().feasible);
        assert!(hk_feasibility(RateKind::Linear, 0.0, 1.0).is_err());
    }

    #[test]
    fn windows_for_linear_and_other() {
        let (cell, model) = fixture("-1", "0");
        let v0 = TransversalPotential::zero();
        let law = DisorderLaw::uniform(0.0).unwrap();
        let report = expand(&model, &cell, &v0, 0.0).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 2, LateralBc::neumann(&cell)).unwrap();
        let c = wegner_constants(&model, &v0, 0.0, 0.05, &law, &grid, 4, 1).unwrap();
        for eps in [0.01, 0.05, 0.1] {
            let w = localization_window(&report, -eps, eps, &c, &law).unwrap();
            assert!(w.nonempty && w.upper > w.lower);
        }
        let (cell2, flipped) = fixture("cos(2*pi()*x)", "1");
        let other = expand(&flipped, &cell2, &v0, 0.0).unwrap();
        assert_eq!(other.case_label, CaseLabel::Other);
        assert!(matches!(localization_window(&other, 0.0, 0.05, &c, &law), Err(Error::CaseOther)));
    }

    #[test]
    fn wegner_far_below_spectrum_is_zero() {
        let (cell, model) = fixture("-1", "0");
        let v0 = TransversalPotential::zero();
        let law = DisorderLaw::uniform(0.0).unwrap();
        let (lambda0, _) = ground_state_baseline(&cell, &v0).unwrap();
        let grid = build_box_grid(&cell.spec, &[0], 2, LateralBc::neumann(&cell)).unwrap();
        let c = wegner_constants(&model, &v0, lambda0, 0.1, &law, &grid, 4, 1).unwrap();
        let setup = WegnerSetup {
            model: &model,
            cell: &cell,
            v0: &v0,
            lambda0,
            v0_sup: 0.0,
            epsilon: 0.1,
            law: &law,
            constants: &c,
            c_weyl: 1.0,
        };
        let r = wegner_empirical(&setup, &[(-5.0, 0.5)], 2, 200, 3).unwrap();
        assert_eq!(r.points[0].count, 0);
        assert!(r.points[0].bound > 0.0 && r.pass);
        assert!(wegner_empirical(&setup, &[(-5.0, 2.0)], 2, 200, 3).is_err());
        assert!(wegner_empirical(&setup, &[(-5.0, 0.5)], 2, 100, 3).is_err());
    }

    #[test]
    fn j_interval_rejects_small_epsilon() {
        let (cell, model) = fixture("-1", "0");
        let v0 = TransversalPotential::zero();
        let law = DisorderLaw::uniform(0.0).unwrap();
        let report = expand(&model, &cell, &v0, 0.0).unwrap();
        let setup = IseSetup { model: &model, cell: &cell, v0: &v0, report: &report, law: &law, c0: 100.0, n1: 2 };
        let j = j_interval(&report, &law, 100.0, 2, 9, 5).unwrap();
        assert!((j.lo - 8.0 / 0.5f64.sqrt() / 3.0).abs() < 1e-12);
        assert!(matches!(ise_empirical(&setup, 0.5 * j.lo, 9, 5, 1.0, 10, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn large_deviation_rate() {
        let law = DisorderLaw::uniform(0.0).unwrap();
        let grid = build_box_grid(&GridSpec::whole_space(vec![1.0], 8), &[0], 4, LateralBc::Periodic).unwrap();
        let counts = [16, 64, 256, 1024];
        let errs = deficit_mean_errors(&law, &grid, &counts, 200, 11).unwrap();
        let xs: Vec<f64> = errs.iter().map(|e| e.0 as f64).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.1).collect();
        let fit = stats::loglog_fit(&xs, &ys);
        assert!((fit.slope + 0.5).abs() <= 0.1, "slope {}", fit.slope);
    }
}
