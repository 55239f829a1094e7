//! Serves a squashfs image (optionally at a byte offset) over FUSE until
//! unmounted.

use std::process::ExitCode;

use unsuid_standins::{parse_squashfuse_args, ReadOnlyFs, MemTree};

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().skip(1).collect();
    let args = match parse_squashfuse_args(&args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("squashfuse: {e}");
            return ExitCode::from(1);
        }
    };
    let tree = match MemTree::load(&args.image, args.offset) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("squashfuse: {}: {e}", args.image.display());
            return ExitCode::from(1);
        }
    };
    let session = match unsuid::windowfile::mount_fuse_session(ReadOnlyFs(tree), &args.mountpoint, "squashfuse", true) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("squashfuse: mounting {}: {e}", args.mountpoint.display());
            return ExitCode::from(1);
        }
    };
    match session.join() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("squashfuse: {e}");
            ExitCode::from(1)
        }
    }
}
