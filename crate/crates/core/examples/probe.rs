//! Prints what this host offers for unprivileged containers.
//!
//! Pass `--json` for the machine-readable profile the planner consumes.

use unsuid::hostprobe::{probe_host, ProbeOptions};

fn main() {
    let json = std::env::args().any(|a| a == "--json");
    let profile = probe_host(&unsuid::host_env(), &ProbeOptions::default());
    if json {
        println!("{}", profile.to_json());
    } else {
        print!("{}", profile.render_human());
    }
}
