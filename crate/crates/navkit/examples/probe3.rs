// Scratch: inspect the tail regulation of path 4.
use navkit::config::Config;
use navkit::dynamics::State;
use navkit::navigator::nominal_input;
use navkit::trajopt::build_library;

fn main() {
    let cfg = Config::load(std::path::Path::new("configs/concave_desk.toml")).unwrap();
    let lib = build_library(&cfg.scenario.start, &cfg.scenario.goal, &cfg.trajopt, &cfg.bounds).unwrap();
    let e = &lib.entries[4];
    for i in 28..=32 {
        let x = e.x_star[i];
        println!("x*[{i}] = ({:+.3},{:+.3},{:+.3})", x.px, x.py, x.theta);
    }
    for i in [30usize, 31] {
        println!("K[{i}] = {:?}", e.k_star[i]);
        println!("mu[{i}] = {:?}", e.mu_star[i]);
    }
    // the runaway state from the trace
    let s = State::new(4.36, 2.95, 1.50);
    for i in [30usize, 31, 32] {
        let u = nominal_input(e, i, &s);
        println!("u_nom(i={i}) at runaway = ({:+.3},{:+.3})", u.v, u.omega);
    }
}
