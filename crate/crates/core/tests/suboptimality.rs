//! Moving the switching levels away from the extracted ones must not raise the
//! Monte Carlo value beyond noise.

use energy_storage::barriers::{extract_barriers, smooth_barriers, SmoothingSpec};
use energy_storage::evaluate::{estimate_j, Scheme, SimulationSpec, SystemState};
use energy_storage::hjb::{backward_solve, GridSpec};
use energy_storage::transform::storage_system_spec;
use energy_storage::ModelParams;

#[test]
fn shifted_levels_do_not_beat_extracted_levels() {
    let params = ModelParams::paper2016();
    let (value, policy) = backward_solve(&params, &GridSpec::default()).unwrap();
    let smooth = smooth_barriers(&extract_barriers(&policy), SmoothingSpec::default()).unwrap();
    let g = &value.grid;
    let starts = [SystemState::new(40.0, 50.0, 0.5, 0.0)];
    let sim = SimulationSpec { n_paths: 400, scheme: Scheme::Plain, ..SimulationSpec::default() };
    let j = |buy_by: f64, sell_by: f64| {
        let system = storage_system_spec(&params, &smooth.shifted(buy_by, sell_by), &g.q, &g.nu, &g.t).unwrap();
        let r = estimate_j(&params, &system, &starts, &sim, 11).unwrap();
        (r.starts[0].mean, r.starts[0].stderr)
    };
    let (base, base_se) = j(0.0, 0.0);
    for (b, s) in [(5.0, 5.0), (-5.0, -5.0), (5.0, -5.0), (-5.0, 5.0)] {
        let (m, se) = j(b, s);
        let bound = base + 3.0 * (base_se * base_se + se * se).sqrt();
        assert!(m <= bound, "levels shifted by ({b}, {s}): {m:.1} against {base:.1}±{base_se:.1}");
    }
}
