// Scratch: manual loop with full diagnostics around the stuck state.
use navkit::config::Config;
use navkit::dynamics::{rk4_step, Input};
use navkit::environment::{ObstacleTrack, WorldSnapshot};
use navkit::navigator::{control_step, ControllerKind, NavigatorState};
use navkit::sim::sample_start;
use navkit::trajopt::build_library;

fn main() {
    let cfg = Config::load(std::path::Path::new("configs/concave_desk.toml")).unwrap();
    let lib = build_library(&cfg.scenario.start, &cfg.scenario.goal, &cfg.trajopt, &cfg.bounds).unwrap();
    let mut s = sample_start(&cfg.scenario, 0, 0);
    let mut nav = NavigatorState::new(&lib);
    let tracks: Vec<ObstacleTrack> = vec![ObstacleTrack::default(); 1];
    let mut meas = Input::ZERO;
    for k in 0..9000 {
        let t = k as f64 * 0.01;
        let world = WorldSnapshot::new(&cfg.scenario.obstacles, t);
        let (cmd, d) = control_step(&s, &lib, &world, &tracks, &mut nav, &cfg.nav,
            cfg.scenario.sensing_radius, &cfg.filter, &cfg.bounds, ControllerKind::Mcbf, 0.01);
        if k % 300 == 0 || (1700..1760).contains(&k) && k % 10 == 0 {
            let f = d.filter.as_ref();
            println!("t={:5.1} pos ({:+.2},{:+.2}) th {:+.2} q{} i{:2} nom ({:+.2},{:+.2}) cmd ({:+.2},{:+.2}) man {} relax {:?}",
                t, s.px, s.py, s.theta, d.q, d.i, d.u_nom.v, d.u_nom.omega, cmd.v, cmd.omega,
                f.map(|f| f.manifold_active).unwrap_or(false),
                f.and_then(|f| f.relaxation));
        }
        meas = navkit::sim::actuator_step(&meas, &cmd, 0.01, cfg.scenario.accel_v, cfg.scenario.accel_omega, &cfg.bounds);
        s = rk4_step(&s, &meas, 0.01);
    }
}
