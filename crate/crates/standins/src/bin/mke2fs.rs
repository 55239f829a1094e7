//! Formats a file as ext2, optionally populated from a directory.

use std::process::ExitCode;

use unsuid_standins::ext2::{format, parse_mke2fs_args};

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().skip(1).collect();
    let args = match parse_mke2fs_args(&args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("mke2fs: {e}");
            return ExitCode::from(1);
        }
    };
    match format(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mke2fs: {}: {e}", args.device.display());
            ExitCode::from(1)
        }
    }
}
