//! Writes /proc/PID/gid_map from `PID INSIDE OUTSIDE COUNT...`.

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match unsuid_standins::write_id_map("gid_map", &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("newgidmap: {e}");
            ExitCode::from(1)
        }
    }
}
