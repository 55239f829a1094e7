//! Packs two payload files into a single-file image and prints the
//! partition table read back from it.
//!
//! ```text
//! cargo run --example cif_layout -- rootfs.sqfs [overlay.ext] out.sif
//! ```
//!
//! Without arguments a pair of synthetic payloads is used.

use std::path::PathBuf;

use unsuid::imagefmt::{detect_image, write_cif, PartitionKind, PartitionRole, PartitionSource};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let scratch = tempfile::tempdir()?;
    let (sources, out) = match args.as_slice() {
        [rootfs, out] => (vec![PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, rootfs)], out.clone()),
        [rootfs, overlay, out] => (
            vec![
                PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, rootfs),
                PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, overlay),
            ],
            out.clone(),
        ),
        _ => {
            let sq = scratch.path().join("rootfs.sqfs");
            let mut bytes = b"hsqs".to_vec();
            bytes.resize(10_000, 0);
            std::fs::write(&sq, bytes)?;
            let ext = scratch.path().join("overlay.ext");
            let mut e = vec![0u8; 64 << 10];
            e[1080..1082].copy_from_slice(&[0x53, 0xEF]);
            std::fs::write(&ext, e)?;
            (
                vec![
                    PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, sq),
                    PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, ext),
                ],
                scratch.path().join("demo.sif"),
            )
        }
    };

    write_cif(&sources, &out)?;
    let info = detect_image(&out)?;
    println!("{}: {:?}, {} bytes", out.display(), info.kind, info.file_length);
    for p in &info.partitions {
        println!("  {:?} {:?} offset {} size {}", p.role, p.kind, p.offset, p.size);
    }
    Ok(())
}
