//! Plans a writable run of an image without touching the system and
//! prints the mount steps.
//!
//! ```text
//! cargo run --example mount_plan -- image.sif [overlay-dir]
//! ```

use std::path::PathBuf;

use unsuid::hostprobe::{probe_host, ProbeOptions};
use unsuid::imagefmt::detect_image;
use unsuid::planner::{plan, render_plan, BindSpec, OverlayPath, PlanFormat, RuntimeRequest};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args_os().skip(1).map(PathBuf::from);
    let Some(image) = args.next() else {
        eprintln!("usage: mount_plan IMAGE [OVERLAY_DIR]");
        std::process::exit(1);
    };
    let overlay = args.next();

    let profile = probe_host(&unsuid::host_env(), &ProbeOptions::default());
    let info = detect_image(&image)?;
    let mut req = RuntimeRequest::new(&image);
    req.fakeroot_requested = true;
    req.binds.push(BindSpec::new("/etc/resolv.conf", "/etc/resolv.conf", true));
    if let Some(dir) = overlay {
        req.writable = true;
        req.overlay_paths.push(OverlayPath::directory(dir));
    }

    let (identity, mounts) = plan(&profile, &req, &info)?;
    for msg in &identity.info_messages {
        eprintln!("INFO: {msg}");
    }
    print!("{}", render_plan(&identity, &mounts, PlanFormat::Human));
    Ok(())
}
