//! Serves an ext2/3/4 image read-only over FUSE until unmounted.

use std::process::ExitCode;

use unsuid_standins::{parse_fuse2fs_args, MemTree, ReadOnlyFs};

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().skip(1).collect();
    let args = match parse_fuse2fs_args(&args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("fuse2fs: {e}");
            return ExitCode::from(1);
        }
    };
    let tree = match MemTree::load_ext(&args.image) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fuse2fs: {}: {e}", args.image.display());
            return ExitCode::from(1);
        }
    };
    let session = match unsuid::windowfile::mount_fuse_session(ReadOnlyFs(tree), &args.mountpoint, "fuse2fs", true) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("fuse2fs: mounting {}: {e}", args.mountpoint.display());
            return ExitCode::from(1);
        }
    };
    match session.join() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fuse2fs: {e}");
            ExitCode::from(1)
        }
    }
}
