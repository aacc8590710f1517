// Scratch probe for the concave-desk scenario (not part of the test suite).
use navkit::config::Config;
use navkit::navigator::ControllerKind;
use navkit::sim::{run_episode, sample_start};
use navkit::trajopt::build_library;

fn main() {
    let cfg = Config::load(std::path::Path::new("configs/concave_desk.toml")).unwrap();
    let t0 = std::time::Instant::now();
    let lib = build_library(&cfg.scenario.start, &cfg.scenario.goal, &cfg.trajopt, &cfg.bounds).unwrap();
    println!("library built in {:.2}s", t0.elapsed().as_secs_f64());
    for e in &lib.entries {
        println!("  path {} offset {:+.1} converged {} iters {} residual {:.2e} time {:.2}s",
            e.path_index, e.lateral_offset, e.converged, e.admm_iterations, e.primal_residual, e.plan_time);
    }
    for controller in [ControllerKind::Mcbf, ControllerKind::Cbf] {
        println!("== {controller:?}");
        for trial in 0..5 {
            let start = sample_start(&cfg.scenario, 0, trial);
            let t1 = std::time::Instant::now();
            let res = run_episode(&cfg.scenario, &lib, controller, &cfg.filter, &cfg.nav, &cfg.bounds, Some(start));
            let min_h = res.trace.rows.iter().map(|r| r.min_h).fold(f64::INFINITY, f64::min);
            let term_dist = (res.final_state.position() - cfg.scenario.goal.position()).norm();
            let fails = res.metrics.qp_failures;
            println!("  trial {trial} start ({:+.2},{:+.2}) -> {:?} minh {:.3} term_dist {:.2} qp_fails {} sim_t {:.1}s wall {:.2}s",
                start.px, start.py, res.outcome, min_h, term_dist, fails,
                res.trace.rows.len() as f64 * 0.01, t1.elapsed().as_secs_f64());
        }
    }
}
