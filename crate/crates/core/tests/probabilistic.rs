use weakloc_core::disorder::{calibrate_c2, ise_empirical, j_interval, DisorderLaw, IseSetup};
use weakloc_core::expansion::expand;
use weakloc_core::finite_volume::{calibrate_c0, spectral_minimum_sweep};
use weakloc_core::grid::{build_cell_grid, GridSpec};
use weakloc_core::models::{build_model, ModelParams, PerturbationModel};
use weakloc_core::{CellGrid, TransversalPotential};

fn linear_fixture() -> (CellGrid, PerturbationModel) {
    let cell = build_cell_grid(&GridSpec::whole_space(vec![1.0], 8)).unwrap();
    let model = build_model(&ModelParams::potential("-1", "0").unwrap(), &cell).unwrap();
    (cell, model)
}

#[test]
fn initial_scale_estimate_on_linear_fixture() {
    let (cell, model) = linear_fixture();
    let v0 = TransversalPotential::zero();
    let law = DisorderLaw::uniform(0.0).unwrap();
    let report = expand(&model, &cell, &v0, law.b).unwrap();
    let cal = calibrate_c0(&model, &cell, &v0, &report, &law, &[2, 4], 4096.0, 60, 5).unwrap();
    let setup = IseSetup { model: &model, cell: &cell, v0: &v0, report: &report, law: &law, c0: cal.c0, n1: cal.n1 };
    let ladder = [6usize, 9, 12, 15];
    let eps = 5.0;
    for &n in &ladder {
        assert!(j_interval(&report, &law, cal.c0, cal.n1, n, 5).unwrap().contains(eps));
    }
    let c2 = calibrate_c2(&setup, &|_| eps, &ladder, 40, 99).unwrap();
    assert!(c2 > 0.0);
    let freqs: Vec<f64> =
        ladder.iter().map(|&n| ise_empirical(&setup, eps, n, 5, c2, 100, 7).unwrap().frequency).collect();
    assert!(freqs.iter().all(|&f| f >= 0.95), "{freqs:?}");
    assert!(freqs.windows(2).all(|w| w[1] >= w[0]), "{freqs:?}");
}

#[test]
fn deterministic_ise_deep_below_spectrum() {
    let (cell, model) = linear_fixture();
    let v0 = TransversalPotential::zero();
    let law = DisorderLaw::uniform(0.0).unwrap();
    let report = expand(&model, &cell, &v0, law.b).unwrap();
    let setup = IseSetup { model: &model, cell: &cell, v0: &v0, report: &report, law: &law, c0: 1e4, n1: 1 };
    let r = ise_empirical(&setup, 6.0, 9, 5, 0.5, 20, 1).unwrap();
    assert_eq!(r.successes, 20);
    assert!(r.c1_fit.is_none());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (cell, model) = linear_fixture();
    let v0 = TransversalPotential::zero();
    let law = DisorderLaw::uniform(-0.5).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let s = spectral_minimum_sweep(&model, &cell, &v0, 0.0, &[0.05, 0.1], &law, 3, 24, 17, false).unwrap();
            serde_json::to_string(&s).unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}
