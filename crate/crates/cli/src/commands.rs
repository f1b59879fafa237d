//! Subcommand pipelines.

use rayon::prelude::*;
use serde_json::json;
use weakloc_core::disorder::{
    calibrate_c2, default_tau, hk_feasibility, ise_empirical, j_interval, localization_window, wegner_constants,
    wegner_empirical, IseSetup, WegnerSetup,
};
use weakloc_core::expansion::{cell_eigenvalue, expand, verify_taylor};
use weakloc_core::finite_volume::{
    assemble_box_operator, calibrate_c0, calibrate_c_weyl, combes_thomas_profile, ground_state_gap_bound,
    mezincescu_bc, regime_edge, spectral_minimum_sweep, theta, verify_edi, verify_ne, verify_sli, weyl_thresholds,
    C0Calibration,
};
use weakloc_core::grid::{build_box_grid, build_cell_grid};
use weakloc_core::models::{background_sup, build_model};
use weakloc_core::{
    CaseLabel, CellGrid, ConstantsLedger, DisorderLaw, Error, ExpansionReport, LateralBc, PerturbationModel, Result,
    TransversalPotential,
};

use crate::config::RunConfig;
use crate::output::{Check, Outcome, RawTable, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Single-cell perturbation expansion and Taylor residuals.
    Expand,
    /// Minimum of the box spectrum over random and 2-periodic configurations.
    SweepSpectrum,
    /// Ground-state lower bound with a calibrated c0.
    LowerBound,
    /// Empirical Wegner probabilities against the assembled bound.
    Wegner,
    /// Initial-scale resolvent decay.
    Ise,
    /// SLI, EDI, NE and Combes-Thomas checks.
    MsaHypotheses,
    /// Disorder-strength feasibility for the magnetic rate inequality.
    HkFeasibility,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Expand => "expand",
            Command::SweepSpectrum => "sweep-spectrum",
            Command::LowerBound => "lower-bound",
            Command::Wegner => "wegner",
            Command::Ise => "ise",
            Command::MsaHypotheses => "msa-hypotheses",
            Command::HkFeasibility => "hk-feasibility",
        }
    }
}

struct Context<'c> {
    cfg: &'c RunConfig,
    cell: CellGrid,
    model: PerturbationModel,
    v0: TransversalPotential,
    v0_sup: f64,
    law: DisorderLaw,
    report: ExpansionReport,
}

impl<'c> Context<'c> {
    fn new(cfg: &'c RunConfig) -> Result<Self> {
        let spec = cfg.grid_spec();
        let cell = build_cell_grid(&spec)?;
        let model = build_model(&cfg.model.params, &cell)?.with_synthetic_l3(cfg.model.l3);
        let v0 = TransversalPotential::from_expr(&cfg.grid.v0)?;
        let v0_sup = background_sup(&v0, &spec);
        let law = cfg.law()?;
        let report = expand(&model, &cell, &v0, law.b)?;
        Ok(Context { cfg, cell, model, v0, v0_sup, law, report })
    }

    fn alpha(&self) -> Vec<i64> {
        vec![0; self.cell.spec.lateral_dim]
    }

    fn calibrate(&self) -> Result<C0Calibration> {
        let x = &self.cfg.experiment;
        calibrate_c0(&self.model, &self.cell, &self.v0, &self.report, &self.law, &x.n_cells, x.c0_init, x.pilot, x.seed)
    }

    fn first_epsilon(&self) -> Result<f64> {
        self.cfg.experiment.epsilons.first().copied().ok_or_else(|| Error::Precondition("experiment.epsilons is empty".into()))
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report is serialisable")
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    if command == Command::HkFeasibility {
        return hk(cfg);
    }
    let ctx = Context::new(cfg)?;
    match command {
        Command::Expand => run_expand(&ctx),
        Command::SweepSpectrum => sweep(&ctx),
        Command::LowerBound => lower_bound(&ctx),
        Command::Wegner => wegner(&ctx),
        Command::Ise => ise(&ctx),
        Command::MsaHypotheses => msa(&ctx),
        Command::HkFeasibility => unreachable!(),
    }
}

fn run_expand(ctx: &Context) -> Result<Outcome> {
    let tol = &ctx.cfg.tolerances;
    let mut report = ctx.report.clone();
    let deltas = &ctx.cfg.experiment.deltas;
    let taylor = if deltas.is_empty() { None } else { Some(verify_taylor(&ctx.model, &ctx.cell, &ctx.v0, &report, deltas)?) };
    report.taylor_slope = taylor.as_ref().and_then(|t| t.slope);
    let orth = report.orthogonality.iter().cloned().fold(0.0, f64::max);
    let mut checks = vec![Check::new("orthogonality", orth <= tol.orthogonality, format!("max {orth:.3e}"))];
    if report.lambda1.abs() <= report.tol_case {
        let (re, im) = report.cross_term;
        checks.push(Check::new(
            "cross-term",
            im.abs() <= tol.cross_term && re <= tol.cross_term,
            format!("re {re:.3e}, im {im:.3e}"),
        ));
    }
    if report.case_label == CaseLabel::II {
        checks.push(Check::new("case-II-sign", report.lambda2 < 0.0, format!("lambda2 {:.6e}", report.lambda2)));
    }
    let rows = taylor.as_ref().map(|t| t.residuals.clone()).unwrap_or_default();
    Ok(Outcome {
        result: json!({ "expansion": to_value(&report), "taylor": to_value(&taylor) }),
        checks,
        ledger: ConstantsLedger::default(),
        tables: vec![Table::new("taylor.csv", ["delta", "residual"], rows)],
        raw: Vec::new(),
    })
}

fn sweep(ctx: &Context) -> Result<Outcome> {
    let x = &ctx.cfg.experiment;
    let mut sweeps = Vec::new();
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    for &n in &x.n_cells {
        let s = spectral_minimum_sweep(
            &ctx.model,
            &ctx.cell,
            &ctx.v0,
            ctx.report.lambda0,
            &x.epsilons,
            &ctx.law,
            n,
            x.samples,
            x.seed,
            x.periodic,
        )?;
        let violations: usize = s.rows.iter().map(|r| r.violations).sum();
        checks.push(Check::new(format!("bracket-N{n}"), violations == 0, format!("{violations} configurations below Lambda^eps")));
        let missed: Vec<String> = s.rows.iter().filter(|r| !r.attained_at_one).map(|r| r.epsilon.to_string()).collect();
        checks.push(Check::new(
            format!("attained-at-one-N{n}"),
            missed.is_empty(),
            if missed.is_empty() { "all epsilons".to_string() } else { format!("missed at eps {}", missed.join(" ")) },
        ));
        let rows = s.rows.iter().map(|r| (r.epsilon, s.lambda0 - r.min_value)).collect();
        tables.push(Table::new(format!("sweep_N{n}.csv"), ["epsilon", "gap"], rows));
        sweeps.push(s);
    }
    Ok(Outcome { result: json!({ "sweeps": to_value(&sweeps) }), checks, ledger: ConstantsLedger::default(), tables, raw: Vec::new() })
}

fn lower_bound(ctx: &Context) -> Result<Outcome> {
    let x = &ctx.cfg.experiment;
    let tol = ctx.cfg.tolerances.gap_margin;
    let cal = ctx.calibrate()?;
    let mut ledger = ConstantsLedger { c0: Some(cal.c0), n1: Some(cal.n1), ..Default::default() };
    ledger.record_bounds(&ctx.model.bound_constants(1.0, ctx.v0_sup));
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut runs = Vec::new();
    let mut instances = Vec::new();
    for &n in &x.n_cells {
        let edge = regime_edge(ctx.report.case_label, cal.c0, n)?;
        let eps_list: Vec<f64> = if x.epsilons.is_empty() { vec![0.5 * edge, 0.25 * edge] } else { x.epsilons.clone() };
        let mut rows = Vec::new();
        let mut failures = 0;
        for &eps in &eps_list {
            if eps >= edge {
                return Err(Error::Regime(format!("epsilon {eps} not below c0 N^-p = {edge:.4e} at N = {n}")));
            }
            let lambda_eps = cell_eigenvalue(&ctx.model, &ctx.cell, &ctx.v0, eps)?.pair.value;
            let bc = mezincescu_bc(&ctx.model, &ctx.cell, &ctx.v0, eps)?;
            let grid = build_box_grid(&ctx.cell.spec, &ctx.alpha(), n, bc)?;
            let gaps = (0..x.samples)
                .into_par_iter()
                .map(|s| {
                    let xi = ctx.law.sample_configuration(&grid, x.seed, s as u64)?;
                    let op = assemble_box_operator(&ctx.model, &ctx.v0, &grid, eps, &xi)?;
                    ground_state_gap_bound(&op, lambda_eps, &ctx.report, cal.c0)
                })
                .collect::<Result<Vec<_>>>()?;
            let worst = gaps.iter().map(|g| g.margin).fold(f64::INFINITY, f64::min);
            for (s, g) in gaps.iter().enumerate() {
                let ok = g.margin >= -tol * (1.0 + g.lhs.abs());
                failures += usize::from(!ok);
                instances.push(vec![
                    s.to_string(),
                    x.seed.to_string(),
                    eps.to_string(),
                    n.to_string(),
                    g.lhs.to_string(),
                    g.rhs.to_string(),
                    g.margin.to_string(),
                    if ok { "PASS" } else { "FAIL" }.to_string(),
                ]);
            }
            rows.push((eps, worst));
            runs.push(json!({ "n_cells": n, "epsilon": eps, "regime_edge": edge, "worst_margin": worst }));
        }
        checks.push(Check::new(format!("lower-bound-N{n}"), failures == 0, format!("{failures} margins below tolerance")));
        tables.push(Table::new(format!("lower_bound_N{n}.csv"), ["epsilon", "min_margin"], rows));
    }
    let raw = vec![RawTable {
        file: "lower_bound_instances.csv".into(),
        header: vec!["instance_id", "seed", "epsilon", "N", "lhs", "rhs", "margin", "status"],
        rows: instances,
    }];
    Ok(Outcome { result: json!({ "calibration": to_value(&cal), "runs": runs }), checks, ledger, tables, raw })
}

fn wegner(ctx: &Context) -> Result<Outcome> {
    let x = &ctx.cfg.experiment;
    let lambda0 = ctx.report.lambda0;
    let mut n_list = x.n_cells.clone();
    n_list.insert(0, 1);
    n_list.dedup();
    let c_weyl = calibrate_c_weyl(&ctx.cell.spec, &ctx.v0, lambda0, &n_list, &weyl_thresholds())?;
    let reference = build_box_grid(&ctx.cell.spec, &ctx.alpha(), 2, LateralBc::neumann(&ctx.cell))?;
    let mut ledger = ConstantsLedger { c_weyl: Some(c_weyl), ..Default::default() };
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut reports = Vec::new();
    for (ie, &eps) in x.epsilons.iter().enumerate() {
        let consts =
            wegner_constants(&ctx.model, &ctx.v0, lambda0, eps, &ctx.law, &reference, x.constant_samples, x.seed)?;
        ledger.c_b = Some(ledger.c_b.unwrap_or(0.0).max(consts.c_b));
        ledger.d = Some(ledger.d.unwrap_or(0.0).max(consts.d));
        let edge = consts.regime_edge(lambda0).min(lambda0);
        let energies: Vec<f64> = if x.energies.is_empty() {
            (1..=4).map(|k| edge - eps * (0.2 * k as f64 + 0.05)).collect()
        } else {
            x.energies.clone()
        };
        let mut points = Vec::new();
        for &e in &energies {
            let cap = (lambda0 - e) / 4.0;
            points.extend(x.kappa_fractions.iter().map(|f| (e, f * cap)));
        }
        let setup = WegnerSetup {
            model: &ctx.model,
            cell: &ctx.cell,
            v0: &ctx.v0,
            lambda0,
            v0_sup: ctx.v0_sup,
            epsilon: eps,
            law: &ctx.law,
            constants: &consts,
            c_weyl,
        };
        for &n in &x.n_cells {
            let r = wegner_empirical(&setup, &points, n, x.samples, x.seed)?;
            let failing = r.points.iter().filter(|p| !p.pass).count();
            checks.push(Check::new(format!("wegner-eps{ie}-N{n}"), r.pass, format!("{failing} points above the bound")));
            checks.push(Check::new(format!("kappa-halving-eps{ie}-N{n}"), r.ratios_ok, "ratios within [1.5, 2.5]"));
            for (j, &e) in energies.iter().enumerate() {
                let rows = r.points.iter().filter(|p| p.energy == e).map(|p| (p.kappa, p.frequency)).collect();
                tables.push(Table::new(format!("wegner_eps{ie}_N{n}_E{j}.csv"), ["kappa", "probability"], rows));
            }
            reports.push(r);
        }
    }
    Ok(Outcome { result: json!({ "reports": to_value(&reports) }), checks, ledger, tables, raw: Vec::new() })
}

fn ise(ctx: &Context) -> Result<Outcome> {
    let x = &ctx.cfg.experiment;
    let cal = ctx.calibrate()?;
    let tau = match x.tau {
        Some(t) => t,
        None => default_tau(ctx.report.case_label)?,
    };
    let setup = IseSetup {
        model: &ctx.model,
        cell: &ctx.cell,
        v0: &ctx.v0,
        report: &ctx.report,
        law: &ctx.law,
        c0: cal.c0,
        n1: cal.n1,
    };
    let mut epsilon_of = Vec::new();
    for &n in &x.n_cells {
        let j = j_interval(&ctx.report, &ctx.law, cal.c0, cal.n1, n, tau)?;
        let eps = match x.epsilons.first() {
            Some(&e) => e,
            None if j.lo < j.hi => (j.lo * j.hi).sqrt(),
            None => return Err(Error::Precondition(format!("J_N empty at N = {n}"))),
        };
        epsilon_of.push((n, eps));
    }
    let lookup = |n: usize| epsilon_of.iter().find(|p| p.0 == n).map_or(f64::NAN, |p| p.1);
    let c2 = calibrate_c2(&setup, &lookup, &x.n_cells, x.pilot, x.seed)?;
    let reports = epsilon_of
        .iter()
        .map(|&(n, eps)| ise_empirical(&setup, eps, n, tau, c2, x.samples, x.seed))
        .collect::<Result<Vec<_>>>()?;
    let freqs: Vec<f64> = reports.iter().map(|r| r.frequency).collect();
    let mut checks = Vec::new();
    if reports.len() >= 3 {
        let monotone = freqs.windows(2).all(|w| w[1] >= w[0]);
        checks.push(Check::new("ise-monotone", monotone, format!("frequencies {freqs:?}")));
    }
    let c1 = reports.iter().filter_map(|r| r.c1_fit).fold(f64::INFINITY, f64::min);
    let ledger = ConstantsLedger {
        c0: Some(cal.c0),
        n1: Some(cal.n1),
        c2_fit: Some(c2),
        c1_fit: c1.is_finite().then_some(c1),
        ..Default::default()
    };
    let rows = reports.iter().map(|r| (r.n_cells as f64, r.frequency)).collect();
    Ok(Outcome {
        result: json!({ "calibration": to_value(&cal), "tau": tau, "reports": to_value(&reports) }),
        checks,
        ledger,
        tables: vec![Table::new("ise.csv", ["n_cells", "frequency"], rows)],
        raw: Vec::new(),
    })
}

fn msa(ctx: &Context) -> Result<Outcome> {
    let x = &ctx.cfg.experiment;
    let g = &x.msa;
    let eps = ctx.first_epsilon()?;
    let n = ctx.cell.spec.lateral_dim;
    let consts = ctx.model.bound_constants(1.0, ctx.v0_sup);
    let bc = mezincescu_bc(&ctx.model, &ctx.cell, &ctx.v0, eps)?;
    let lambda_eps = cell_eigenvalue(&ctx.model, &ctx.cell, &ctx.v0, eps)?.pair.value;
    let mut checks = Vec::new();

    let outer = build_box_grid(&ctx.cell.spec, &ctx.alpha(), g.sli_outer, bc.clone())?;
    let mut sli = Vec::new();
    let mut s = 0u64;
    while sli.len() < g.instances && s < 10 * g.instances as u64 {
        let xi = ctx.law.sample_configuration(&outer, x.seed, s)?;
        let e = lambda_eps - 0.05 - 0.5 * (s % 5) as f64;
        s += 1;
        match verify_sli(&ctx.model, &ctx.v0, eps, &xi, &outer, &vec![g.sli_offset; n], g.sli_inner, e, &consts) {
            Ok(r) => sli.push(r),
            Err(Error::Resonant { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let sli_ok = sli.iter().filter(|r| r.pass && r.cutoff_ok).count();
    checks.push(Check::new("sli", sli_ok == sli.len() && !sli.is_empty(), format!("{sli_ok}/{} instances", sli.len())));

    let big = build_box_grid(&ctx.cell.spec, &ctx.alpha(), g.edi_big, bc.clone())?;
    let mut edi = Vec::new();
    for k in 0..g.instances as u64 {
        let xi = ctx.law.sample_configuration(&big, x.seed.wrapping_add(1), k)?;
        edi.push(verify_edi(
            &ctx.model,
            &ctx.v0,
            eps,
            &xi,
            &big,
            &vec![g.edi_offset; n],
            g.edi_inner,
            LateralBc::Dirichlet,
            1,
            &consts,
        )?);
    }
    let edi_run: usize = edi.iter().map(|r| r.instances.len()).sum();
    let edi_ok: usize = edi.iter().map(|r| r.instances.iter().filter(|i| i.pass).count()).sum();
    checks.push(Check::new("edi", edi_ok == edi_run, format!("{edi_ok}/{edi_run} instances")));

    let lambda0 = ctx.report.lambda0;
    let reference = build_box_grid(&ctx.cell.spec, &ctx.alpha(), 2, LateralBc::neumann(&ctx.cell))?;
    let wc = wegner_constants(&ctx.model, &ctx.v0, lambda0, eps, &ctx.law, &reference, x.constant_samples, x.seed)?;
    let mut n_list = x.n_cells.clone();
    n_list.insert(0, 1);
    n_list.dedup();
    let c_weyl = calibrate_c_weyl(&ctx.cell.spec, &ctx.v0, lambda0, &n_list, &weyl_thresholds())?;
    let mut ne = Vec::new();
    for &nc in &x.n_cells {
        let grid = build_box_grid(&ctx.cell.spec, &ctx.alpha(), nc, bc.clone())?;
        let xi = ctx.law.sample_configuration(&grid, x.seed.wrapping_add(2), 0)?;
        let op = assemble_box_operator(&ctx.model, &ctx.v0, &grid, eps, &xi)?;
        let r = verify_ne(&op, lambda0, wc.c_b, ctx.v0_sup, c_weyl)?;
        checks.push(Check::new(format!("ne-N{nc}"), r.pass, format!("count {} <= {:.3}", r.count, r.bound)));
        ne.push(r);
    }

    let ct_n = x.n_cells.iter().copied().max().unwrap_or(2).max(4);
    let grid = build_box_grid(&ctx.cell.spec, &ctx.alpha(), ct_n, bc)?;
    let xi = ctx.law.sample_configuration(&grid, x.seed.wrapping_add(3), 0)?;
    let op = assemble_box_operator(&ctx.model, &ctx.v0, &grid, eps, &xi)?;
    let bottom = op.ground_value()?;
    let profiles = [0.5, 1.0, 2.0, 4.0].iter().map(|d| combes_thomas_profile(&op, bottom - d)).collect::<Result<Vec<_>>>()?;
    let r2 = profiles.iter().map(|p| p.r_squared).fold(f64::INFINITY, f64::min);
    let monotone = profiles.windows(2).all(|w| w[1].rate > w[0].rate);
    checks.push(Check::new("combes-thomas-fit", r2 >= 0.9, format!("min R^2 {r2:.4}")));
    checks.push(Check::new("combes-thomas-monotone", monotone, "rate increases with spectral distance"));
    let tables = profiles
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let rows = p.points.iter().filter(|q| q.1 > 0.0).map(|q| (q.0, q.1.ln())).collect();
            Table::new(format!("combes_thomas_{j}.csv"), ["distance", "log_block_norm"], rows)
        })
        .collect();

    let mut ledger = ConstantsLedger { c_weyl: Some(c_weyl), c_b: Some(wc.c_b), d: Some(wc.d), ..Default::default() };
    ledger.record_bounds(&consts);
    ledger.theta = Some(theta(&consts, lambda_eps, n));
    let window = match ctx.report.case_label {
        CaseLabel::Other => None,
        _ => Some(localization_window(&ctx.report, lambda_eps, eps, &wc, &ctx.law)?),
    };
    Ok(Outcome {
        result: json!({
            "epsilon": eps,
            "sli": to_value(&sli),
            "edi": to_value(&edi),
            "ne": to_value(&ne),
            "combes_thomas": to_value(&profiles),
            "wegner_constants": to_value(&wc),
            "localization_window": to_value(&window),
        }),
        checks,
        ledger,
        tables,
        raw: Vec::new(),
    })
}

fn hk(cfg: &RunConfig) -> Result<Outcome> {
    let x = &cfg.experiment;
    let r = hk_feasibility(x.rate_kind, x.rate_constant, x.sup_a_sq)?;
    let mut checks = vec![Check::new(
        "feasible",
        r.feasible,
        format!("4 sup|A|^2 = {:.6e}, rate constant {:.6e}", 4.0 * x.sup_a_sq, x.rate_constant),
    )];
    if let Some(m) = r.epsilon_max {
        let over: Vec<String> = x.epsilons.iter().filter(|&&e| e > m).map(|e| e.to_string()).collect();
        checks.push(Check::new(
            "epsilon-ladder-admissible",
            over.is_empty(),
            if over.is_empty() { format!("all epsilons <= {m:.6e}") } else { format!("above {m:.6e}: {}", over.join(" ")) },
        ));
    }
    Ok(Outcome { result: to_value(&r), checks, ledger: ConstantsLedger::default(), tables: Vec::new(), raw: Vec::new() })
}
