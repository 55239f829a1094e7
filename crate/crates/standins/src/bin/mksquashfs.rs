//! Packs a directory into a squashfs image.

use std::process::ExitCode;

use unsuid_standins::{pack_directory, parse_mksquashfs_args};

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().skip(1).collect();
    let args = match parse_mksquashfs_args(&args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("mksquashfs: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = pack_directory(&args) {
        eprintln!("mksquashfs: {e}");
        let _ = std::fs::remove_file(&args.dest);
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
