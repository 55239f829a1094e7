//! Packs a directory into a CIF image as emulated root, optionally running
//! a setup script inside it first.
//!
//! ```text
//! cargo run --example build -- SANDBOX OUT.sif [SETUP_SCRIPT]
//! ```

use std::path::PathBuf;

use unsuid::build::{build_image, BuildRequest, OutputKind};
use unsuid::hostprobe::{probe_host, ProbeOptions};

fn main() {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let (sandbox, output) = match args.as_slice() {
        [s, o, ..] => (s.clone(), o.clone()),
        _ => {
            eprintln!("usage: build SANDBOX OUT [SETUP_SCRIPT]");
            std::process::exit(1);
        }
    };
    let request = BuildRequest {
        sandbox,
        output,
        output_kind: OutputKind::Cif,
        setup_script: args.get(2).cloned(),
        overlay_size: None,
    };
    let env = unsuid::host_env();
    let profile = probe_host(&env, &ProbeOptions::default());
    match build_image(&request, &profile, &env) {
        Ok(info) => {
            for p in &info.partitions {
                println!("{:?} {:?} at {} ({} bytes)", p.role, p.kind, p.offset, p.size);
            }
        }
        Err(e) => {
            eprintln!("build failed: {e}");
            std::process::exit(2);
        }
    }
}
