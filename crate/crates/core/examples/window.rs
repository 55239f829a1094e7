//! Exposes a byte range of a file as its own FUSE file, writes through it
//! and shows that only the range changed. Needs a usable /dev/fuse.

use std::fs;
use std::os::unix::fs::FileExt;

use unsuid::windowfile::{serve_window, WindowSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let backing = dir.path().join("backing");
    fs::write(&backing, vec![b'.'; 64])?;
    let mountpoint = dir.path().join("mnt");
    fs::create_dir(&mountpoint)?;

    let spec = WindowSpec {
        backing: backing.clone(),
        offset: 16,
        size: 32,
        writable: true,
        mountpoint,
    };
    let mut handle = serve_window(&spec)?;
    let part = fs::OpenOptions::new().read(true).write(true).open(handle.part_path())?;
    println!("window length: {}", part.metadata()?.len());

    part.write_at(b"hello", 0)?;
    match part.write_at(b"past the end", 28) {
        Ok(n) => println!("write across the end wrote {n} bytes"),
        Err(e) => println!("write across the end refused: {e}"),
    }
    drop(part);
    handle.shutdown()?;

    println!("backing: {}", String::from_utf8_lossy(&fs::read(&backing)?));
    Ok(())
}
