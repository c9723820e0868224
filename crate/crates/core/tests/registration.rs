mod common;

use raymar::fdk::fdk_reconstruct;
use raymar::pipeline::simulate_case;
use raymar::registration::register;

#[test]
fn recovers_the_simulated_motion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(dir.path());
    let case = simulate_case(&cfg).unwrap();
    let grid = cfg.grid.build().unwrap();
    let unc = fdk_reconstruct(&case.unc_sino, &grid, cfg.output.window).unwrap();
    let result = register(&unc, &case.prior, &cfg.registration.build(cfg.seed)).unwrap();

    let want = case.perturbation.inverse().params();
    let got = result.transform.params();
    let dt = ((0..3).map(|d| (got[d] - want[d]).powi(2)).sum::<f64>()).sqrt();
    assert!(dt <= 0.5 * grid.min_spacing(), "translation error {dt} mm");
    for d in 3..6 {
        assert!((got[d] - want[d]).abs().to_degrees() <= 0.5, "rotation {d}: {got:?} vs {want:?}");
    }
    assert!(result.swarm.history.windows(2).all(|w| w[1] <= w[0]));
}
