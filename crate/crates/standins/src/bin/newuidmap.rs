//! Writes /proc/PID/uid_map from `PID INSIDE OUTSIDE COUNT...`.

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match unsuid_standins::write_id_map("uid_map", &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("newuidmap: {e}");
            ExitCode::from(1)
        }
    }
}
