// Scratch: dump one mcbf episode trajectory for inspection.
use navkit::config::Config;
use navkit::navigator::ControllerKind;
use navkit::sim::{run_episode, sample_start};
use navkit::trajopt::build_library;

fn main() {
    let cfg = Config::load(std::path::Path::new("configs/concave_desk.toml")).unwrap();
    let lib = build_library(&cfg.scenario.start, &cfg.scenario.goal, &cfg.trajopt, &cfg.bounds).unwrap();
    // print the routed path 4 reference to check its geometry
    println!("path 4 x*:");
    for (i, x) in lib.entries[4].x_star.iter().enumerate() {
        if i % 4 == 0 { println!("  i={i:2} ({:+.2},{:+.2},th={:+.2})", x.px, x.py, x.theta); }
    }
    let start = sample_start(&cfg.scenario, 0, 0);
    let res = run_episode(&cfg.scenario, &lib, ControllerKind::Mcbf, &cfg.filter, &cfg.nav, &cfg.bounds, Some(start));
    println!("outcome {:?}", res.outcome);
    for (k, r) in res.trace.rows.iter().enumerate() {
        if k % 300 == 0 {
            println!("t={:5.1} pos ({:+.2},{:+.2}) th {:+.2} q {} i {:2} minh {:+.3} qp {} cmd ({:+.2},{:+.2})",
                r.t, r.state.px, r.state.py, r.state.theta, r.path_q, r.ref_i, r.min_h, r.qp_status, r.cmd.v, r.cmd.omega);
        }
    }
}
