//! Shows the actions that assemble a read-only root from an image tree
//! plus host binds, when no overlay filesystem is available.
//!
//! ```text
//! cargo run --example underlay -- IMAGE_ROOT_DIR [HOST_SRC:/DEST]...
//! ```

use std::path::PathBuf;

use unsuid::mounter::{compose_underlay, DirTree, HostBind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "/".into()));
    let binds: Vec<HostBind> = args
        .map(|a| {
            let (src, dst) = a.split_once(':').unwrap_or((&a, &a));
            let source = PathBuf::from(src);
            HostBind {
                source_is_dir: source.is_dir(),
                source,
                destination: dst.to_string(),
                readonly: false,
            }
        })
        .collect();
    let standard: Vec<String> = ["/proc", "/sys", "/dev", "/tmp"].map(String::from).to_vec();

    for a in compose_underlay(&DirTree { root }, &binds, &standard)? {
        let src = a.source.map(|s| format!(" <- {}", s.display())).unwrap_or_default();
        println!("{:?} /{}{src}", a.kind, a.destination.display());
    }
    Ok(())
}
