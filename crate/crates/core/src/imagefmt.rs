//! Image kind detection and the partitioned single-file image format (CIF).
//!
//! A CIF file is a little-endian header followed by a descriptor table and
//! the partition payloads:
//!
//! ```text
//! 0      8        12         16
//! +------+--------+----------+----------------------------------+
//! |magic |version |count     | count x descriptor (24 bytes)    |
//! +------+--------+----------+----------------------------------+
//! descriptor: kind u32 | role u32 | offset u64 | size u64
//! ```
//!
//! Payloads start at 4096-byte aligned offsets; the gaps are zero.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CIF_MAGIC: &[u8; 8] = b"CIFIMG01";
pub const CIF_VERSION: u32 = 1;
pub const CIF_HEADER_LEN: u64 = 16;
pub const CIF_DESCRIPTOR_LEN: u64 = 24;
pub const PARTITION_ALIGN: u64 = 4096;

pub const SQUASHFS_MAGIC: &[u8; 4] = b"hsqs";
/// Primary superblock at 1024, `s_magic` at +56.
pub const EXT_MAGIC_OFFSET: u64 = 1080;
pub const EXT_MAGIC: u16 = 0xEF53;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: no known image magic (CIF, squashfs or ext)")]
    UnknownFormat(PathBuf),
    #[error("{0}: not a CIF image (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported CIF version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: descriptor table of {count} entries runs past end of file ({file_length} bytes)")]
    Truncated {
        path: PathBuf,
        count: u32,
        file_length: u64,
    },
    #[error("descriptor {index}: unknown {field} code {code}")]
    InvalidDescriptor {
        index: usize,
        field: &'static str,
        code: u32,
    },
    #[error("descriptor {index}: offset {offset} is not a multiple of {PARTITION_ALIGN}")]
    Misaligned { index: usize, offset: u64 },
    #[error("descriptor {index}: zero-length partition")]
    EmptyPartition { index: usize },
    #[error("descriptor {index}: [{offset}, +{size}) exceeds file length {file_length}")]
    DescriptorOutOfBounds {
        index: usize,
        offset: u64,
        size: u64,
        file_length: u64,
    },
    #[error("descriptors {first} and {second} overlap")]
    OverlappingPartitions { first: usize, second: usize },
    #[error("more than one rootfs partition")]
    DuplicateRootfs,
    #[error("image needs exactly one rootfs partition, found none")]
    MissingRootfs,
    #[error("at least one partition is required")]
    NoPartitions,
}

impl ImageError {
    fn io(path: &Path, source: io::Error) -> Self {
        ImageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageKind {
    RawSquashfs,
    RawExtfs,
    Cif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionKind {
    Squashfs,
    Extfs,
}

impl PartitionKind {
    pub fn code(self) -> u32 {
        match self {
            PartitionKind::Squashfs => 1,
            PartitionKind::Extfs => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(PartitionKind::Squashfs),
            2 => Some(PartitionKind::Extfs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionRole {
    Rootfs,
    Overlay,
}

impl PartitionRole {
    pub fn code(self) -> u32 {
        match self {
            PartitionRole::Rootfs => 1,
            PartitionRole::Overlay => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(PartitionRole::Rootfs),
            2 => Some(PartitionRole::Overlay),
            _ => None,
        }
    }
}

/// One filesystem partition inside an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionDescriptor {
    pub kind: PartitionKind,
    pub role: PartitionRole,
    pub offset: u64,
    pub size: u64,
}

impl PartitionDescriptor {
    pub fn end(&self) -> Option<u64> {
        self.offset.checked_add(self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub kind: ImageKind,
    pub partitions: Vec<PartitionDescriptor>,
    pub file_length: u64,
}

impl ImageInfo {
    pub fn rootfs(&self) -> Option<&PartitionDescriptor> {
        self.partitions
            .iter()
            .find(|p| p.role == PartitionRole::Rootfs)
    }

    pub fn overlays(&self) -> impl Iterator<Item = &PartitionDescriptor> {
        self.partitions
            .iter()
            .filter(|p| p.role == PartitionRole::Overlay)
    }

    fn raw(kind: ImageKind, partition_kind: PartitionKind, file_length: u64) -> Self {
        ImageInfo {
            kind,
            partitions: vec![PartitionDescriptor {
                kind: partition_kind,
                role: PartitionRole::Rootfs,
                offset: 0,
                size: file_length,
            }],
            file_length,
        }
    }
}

pub fn round_up(value: u64, align: u64) -> u64 {
    value.div_ceil(align) * align
}

/// Classifies a file as CIF, raw squashfs or raw ext, in that order.
pub fn detect_image(path: &Path) -> Result<ImageInfo, ImageError> {
    let mut file = File::open(path).map_err(|e| ImageError::io(path, e))?;
    let file_length = file.metadata().map_err(|e| ImageError::io(path, e))?.len();

    let mut head = Vec::with_capacity(EXT_MAGIC_OFFSET as usize + 2);
    (&mut file)
        .take(EXT_MAGIC_OFFSET + 2)
        .read_to_end(&mut head)
        .map_err(|e| ImageError::io(path, e))?;

    if head.starts_with(CIF_MAGIC) {
        return parse_cif_from(&mut file, path, file_length);
    }
    if head.starts_with(SQUASHFS_MAGIC) {
        return Ok(ImageInfo::raw(
            ImageKind::RawSquashfs,
            PartitionKind::Squashfs,
            file_length,
        ));
    }
    let m = EXT_MAGIC_OFFSET as usize;
    if head.len() >= m + 2 && u16::from_le_bytes([head[m], head[m + 1]]) == EXT_MAGIC {
        return Ok(ImageInfo::raw(
            ImageKind::RawExtfs,
            PartitionKind::Extfs,
            file_length,
        ));
    }
    Err(ImageError::UnknownFormat(path.to_path_buf()))
}

pub fn parse_cif(path: &Path) -> Result<ImageInfo, ImageError> {
    let mut file = File::open(path).map_err(|e| ImageError::io(path, e))?;
    let file_length = file.metadata().map_err(|e| ImageError::io(path, e))?.len();
    parse_cif_from(&mut file, path, file_length)
}

fn parse_cif_from(file: &mut File, path: &Path, file_length: u64) -> Result<ImageInfo, ImageError> {
    file.seek(SeekFrom::Start(0))
        .map_err(|e| ImageError::io(path, e))?;
    let mut header = Vec::with_capacity(CIF_HEADER_LEN as usize);
    Read::by_ref(file)
        .take(CIF_HEADER_LEN)
        .read_to_end(&mut header)
        .map_err(|e| ImageError::io(path, e))?;
    if !header.starts_with(CIF_MAGIC) {
        return Err(ImageError::BadMagic(path.to_path_buf()));
    }
    if header.len() < CIF_HEADER_LEN as usize {
        return Err(ImageError::Truncated {
            path: path.to_path_buf(),
            count: 0,
            file_length,
        });
    }
    let (count, table_end) = decode_header(&header, path, file_length)?;
    let mut table = vec![0u8; (table_end - CIF_HEADER_LEN) as usize];
    file.read_exact(&mut table)
        .map_err(|e| ImageError::io(path, e))?;
    let partitions = decode_table(&table, count)?;
    validate_partitions(&partitions, table_end, file_length)?;
    Ok(ImageInfo {
        kind: ImageKind::Cif,
        partitions,
        file_length,
    })
}

/// Parses a complete CIF image held in memory.
pub fn parse_cif_bytes(bytes: &[u8]) -> Result<ImageInfo, ImageError> {
    let path = Path::new("<memory>");
    let file_length = bytes.len() as u64;
    if bytes.len() < CIF_HEADER_LEN as usize {
        return Err(if bytes.starts_with(CIF_MAGIC) {
            ImageError::Truncated {
                path: path.to_path_buf(),
                count: 0,
                file_length,
            }
        } else {
            ImageError::BadMagic(path.to_path_buf())
        });
    }
    let (count, table_end) = decode_header(&bytes[..CIF_HEADER_LEN as usize], path, file_length)?;
    let partitions = decode_table(&bytes[CIF_HEADER_LEN as usize..table_end as usize], count)?;
    validate_partitions(&partitions, table_end, file_length)?;
    Ok(ImageInfo {
        kind: ImageKind::Cif,
        partitions,
        file_length,
    })
}

fn decode_header(header: &[u8], path: &Path, file_length: u64) -> Result<(u32, u64), ImageError> {
    if &header[..8] != CIF_MAGIC {
        return Err(ImageError::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != CIF_VERSION {
        return Err(ImageError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let table_end = CIF_HEADER_LEN + u64::from(count) * CIF_DESCRIPTOR_LEN;
    if table_end > file_length {
        return Err(ImageError::Truncated {
            path: path.to_path_buf(),
            count,
            file_length,
        });
    }
    Ok((count, table_end))
}

fn decode_table(table: &[u8], count: u32) -> Result<Vec<PartitionDescriptor>, ImageError> {
    table
        .chunks_exact(CIF_DESCRIPTOR_LEN as usize)
        .take(count as usize)
        .enumerate()
        .map(|(index, rec)| {
            let kind_code = u32::from_le_bytes(rec[0..4].try_into().unwrap());
            let role_code = u32::from_le_bytes(rec[4..8].try_into().unwrap());
            let kind = PartitionKind::from_code(kind_code).ok_or(ImageError::InvalidDescriptor {
                index,
                field: "kind",
                code: kind_code,
            })?;
            let role = PartitionRole::from_code(role_code).ok_or(ImageError::InvalidDescriptor {
                index,
                field: "role",
                code: role_code,
            })?;
            Ok(PartitionDescriptor {
                kind,
                role,
                offset: u64::from_le_bytes(rec[8..16].try_into().unwrap()),
                size: u64::from_le_bytes(rec[16..24].try_into().unwrap()),
            })
        })
        .collect()
}

fn validate_partitions(
    partitions: &[PartitionDescriptor],
    table_end: u64,
    file_length: u64,
) -> Result<(), ImageError> {
    let mut rootfs_seen = false;
    for (index, p) in partitions.iter().enumerate() {
        if p.size == 0 {
            return Err(ImageError::EmptyPartition { index });
        }
        if p.offset % PARTITION_ALIGN != 0 {
            return Err(ImageError::Misaligned {
                index,
                offset: p.offset,
            });
        }
        match p.end() {
            Some(end) if end <= file_length => {}
            _ => {
                return Err(ImageError::DescriptorOutOfBounds {
                    index,
                    offset: p.offset,
                    size: p.size,
                    file_length,
                })
            }
        }
        if p.role == PartitionRole::Rootfs {
            if rootfs_seen {
                return Err(ImageError::DuplicateRootfs);
            }
            rootfs_seen = true;
        }
    }
    // Sorting by offset reduces overlap checks to adjacent pairs.
    let mut order: Vec<usize> = (0..partitions.len()).collect();
    order.sort_by_key(|&i| partitions[i].offset);
    if let Some(&first) = order.first() {
        if partitions[first].offset < table_end {
            // The payload would sit on top of the header or descriptor table.
            return Err(ImageError::OverlappingPartitions {
                first,
                second: first,
            });
        }
    }
    for pair in order.windows(2) {
        let (a, b) = (&partitions[pair[0]], &partitions[pair[1]]);
        if a.offset + a.size > b.offset {
            let (first, second) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            return Err(ImageError::OverlappingPartitions { first, second });
        }
    }
    Ok(())
}

/// A payload to place into a CIF image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSource {
    pub kind: PartitionKind,
    pub role: PartitionRole,
    pub payload: PathBuf,
}

impl PartitionSource {
    pub fn new(kind: PartitionKind, role: PartitionRole, payload: impl Into<PathBuf>) -> Self {
        PartitionSource {
            kind,
            role,
            payload: payload.into(),
        }
    }
}

/// Computes the descriptor table `write_cif` would emit for payloads of the
/// given sizes, in argument order.
pub fn layout_partitions(entries: &[(PartitionKind, PartitionRole, u64)]) -> Vec<PartitionDescriptor> {
    let table_end = CIF_HEADER_LEN + entries.len() as u64 * CIF_DESCRIPTOR_LEN;
    let mut cursor = round_up(table_end, PARTITION_ALIGN);
    entries
        .iter()
        .map(|&(kind, role, size)| {
            let d = PartitionDescriptor {
                kind,
                role,
                offset: cursor,
                size,
            };
            cursor = round_up(cursor + size, PARTITION_ALIGN);
            d
        })
        .collect()
}

pub fn encode_header(partitions: &[PartitionDescriptor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        (CIF_HEADER_LEN + partitions.len() as u64 * CIF_DESCRIPTOR_LEN) as usize,
    );
    out.extend_from_slice(CIF_MAGIC);
    out.extend_from_slice(&CIF_VERSION.to_le_bytes());
    out.extend_from_slice(&(partitions.len() as u32).to_le_bytes());
    for p in partitions {
        out.extend_from_slice(&p.kind.code().to_le_bytes());
        out.extend_from_slice(&p.role.code().to_le_bytes());
        out.extend_from_slice(&p.offset.to_le_bytes());
        out.extend_from_slice(&p.size.to_le_bytes());
    }
    out
}

/// Writes a CIF image containing the given payloads. The output appears
/// atomically: on error no file is left at `out`.
pub fn write_cif(partitions: &[PartitionSource], out: &Path) -> Result<ImageInfo, ImageError> {
    if partitions.is_empty() {
        return Err(ImageError::NoPartitions);
    }
    match partitions
        .iter()
        .filter(|p| p.role == PartitionRole::Rootfs)
        .count()
    {
        0 => return Err(ImageError::MissingRootfs),
        1 => {}
        _ => return Err(ImageError::DuplicateRootfs),
    }

    let mut sizes = Vec::with_capacity(partitions.len());
    for (index, p) in partitions.iter().enumerate() {
        let len = fs::metadata(&p.payload)
            .map_err(|e| ImageError::io(&p.payload, e))?
            .len();
        if len == 0 {
            return Err(ImageError::EmptyPartition { index });
        }
        sizes.push((p.kind, p.role, len));
    }
    let layout = layout_partitions(&sizes);

    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new()
        .prefix(".cif-")
        .tempfile_in(dir)
        .map_err(|e| ImageError::io(out, e))?;
    {
        let f = tmp.as_file_mut();
        f.write_all(&encode_header(&layout))
            .map_err(|e| ImageError::io(out, e))?;
        for (src, desc) in partitions.iter().zip(&layout) {
            // Seeking past EOF leaves a zero-filled gap.
            f.seek(SeekFrom::Start(desc.offset))
                .map_err(|e| ImageError::io(out, e))?;
            let mut payload = File::open(&src.payload).map_err(|e| ImageError::io(&src.payload, e))?;
            let copied = io::copy(&mut payload, f).map_err(|e| ImageError::io(&src.payload, e))?;
            if copied != desc.size {
                return Err(ImageError::io(
                    &src.payload,
                    io::Error::new(io::ErrorKind::UnexpectedEof, "payload changed size while copying"),
                ));
            }
        }
        f.sync_all().map_err(|e| ImageError::io(out, e))?;
    }
    tmp.persist(out).map_err(|e| ImageError::io(out, e.error))?;
    parse_cif(out)
}

/// Copies the bytes of one partition out into a standalone file.
pub fn extract_partition(image: &Path, part: &PartitionDescriptor, out: &Path) -> Result<(), ImageError> {
    let mut src = File::open(image).map_err(|e| ImageError::io(image, e))?;
    src.seek(SeekFrom::Start(part.offset))
        .map_err(|e| ImageError::io(image, e))?;
    let mut dst = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(out)
        .map_err(|e| ImageError::io(out, e))?;
    let copied = io::copy(&mut src.take(part.size), &mut dst).map_err(|e| ImageError::io(out, e))?;
    if copied != part.size {
        return Err(ImageError::io(
            image,
            io::Error::new(io::ErrorKind::UnexpectedEof, "partition truncated"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cif_bytes(descs: &[PartitionDescriptor], file_length: usize) -> Vec<u8> {
        let mut bytes = encode_header(descs);
        bytes.resize(file_length, 0);
        bytes
    }

    fn write_tmp(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_single_squashfs_descriptor() {
        let d = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: 8192,
        };
        let info = parse_cif_bytes(&cif_bytes(&[d], 12288)).unwrap();
        assert_eq!(info.kind, ImageKind::Cif);
        assert_eq!(info.partitions, vec![d]);
        assert_eq!(info.file_length, 12288);
    }

    #[test]
    fn rejects_descriptor_past_end() {
        let d = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: 1 << 40,
        };
        assert!(matches!(
            parse_cif_bytes(&cif_bytes(&[d], 12288)),
            Err(ImageError::DescriptorOutOfBounds { index: 0, .. })
        ));
    }

    #[test]
    fn rejects_offset_plus_size_overflow() {
        let d = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: u64::MAX,
        };
        assert!(matches!(
            parse_cif_bytes(&cif_bytes(&[d], 12288)),
            Err(ImageError::DescriptorOutOfBounds { .. })
        ));
    }

    #[test]
    fn rejects_two_rootfs() {
        let a = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: 4096,
        };
        let b = PartitionDescriptor { offset: 8192, ..a };
        assert!(matches!(
            parse_cif_bytes(&cif_bytes(&[a, b], 12288)),
            Err(ImageError::DuplicateRootfs)
        ));
    }

    #[test]
    fn rejects_overlap_and_misalignment() {
        let a = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: 8192,
        };
        let b = PartitionDescriptor {
            kind: PartitionKind::Extfs,
            role: PartitionRole::Overlay,
            offset: 8192,
            size: 4096,
        };
        assert!(matches!(
            parse_cif_bytes(&cif_bytes(&[a, b], 16384)),
            Err(ImageError::OverlappingPartitions { first: 0, second: 1 })
        ));
        let c = PartitionDescriptor { offset: 100, ..a };
        assert!(matches!(
            parse_cif_bytes(&cif_bytes(&[c], 16384)),
            Err(ImageError::Misaligned { .. })
        ));
    }

    #[test]
    fn rejects_bad_version_and_codes() {
        let d = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: PartitionRole::Rootfs,
            offset: 4096,
            size: 4096,
        };
        let mut bytes = cif_bytes(&[d], 8192);
        bytes[8] = 2;
        assert!(matches!(parse_cif_bytes(&bytes), Err(ImageError::BadVersion { version: 2, .. })));
        let mut bytes = cif_bytes(&[d], 8192);
        bytes[16] = 9;
        assert!(matches!(
            parse_cif_bytes(&bytes),
            Err(ImageError::InvalidDescriptor { field: "kind", code: 9, .. })
        ));
    }

    #[test]
    fn truncated_table_is_reported() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CIF_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1000u32.to_le_bytes());
        bytes.resize(4096, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "t.cif", &bytes);
        assert!(matches!(detect_image(&p), Err(ImageError::Truncated { count: 1000, .. })));
    }

    #[test]
    fn zero_file_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "zeros", &[0u8; 10]);
        assert!(matches!(detect_image(&p), Err(ImageError::UnknownFormat(_))));
    }

    #[test]
    fn detects_raw_kinds_by_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut sq = b"hsqs".to_vec();
        sq.resize(300, 7);
        let p = write_tmp(dir.path(), "sq", &sq);
        let info = detect_image(&p).unwrap();
        assert_eq!(info.kind, ImageKind::RawSquashfs);
        assert_eq!(
            info.partitions,
            vec![PartitionDescriptor {
                kind: PartitionKind::Squashfs,
                role: PartitionRole::Rootfs,
                offset: 0,
                size: 300
            }]
        );

        let mut ext = vec![0u8; 4096];
        ext[1080] = 0x53;
        ext[1081] = 0xEF;
        let p = write_tmp(dir.path(), "ext", &ext);
        let info = detect_image(&p).unwrap();
        assert_eq!(info.kind, ImageKind::RawExtfs);
        assert_eq!(info.partitions[0].size, 4096);

        // Too short to hold an ext superblock magic.
        let p = write_tmp(dir.path(), "short", &ext[..1081]);
        assert!(matches!(detect_image(&p), Err(ImageError::UnknownFormat(_))));
    }

    #[test]
    fn cif_magic_wins_over_embedded_magics() {
        let dir = tempfile::tempdir().unwrap();
        let mut payload = b"hsqs".to_vec();
        payload.resize(5000, 1);
        let pp = write_tmp(dir.path(), "payload", &payload);
        let out = dir.path().join("img.cif");
        write_cif(&[PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &pp)], &out)
            .unwrap();
        // Plant ext magic at 1080 as well; the header must still win.
        let mut bytes = fs::read(&out).unwrap();
        bytes[1080] = 0x53;
        bytes[1081] = 0xEF;
        fs::write(&out, &bytes).unwrap();
        assert_eq!(detect_image(&out).unwrap().kind, ImageKind::Cif);
    }

    #[test]
    fn write_places_payloads_at_aligned_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_tmp(dir.path(), "a", &vec![0xAA; 5000]);
        let b = write_tmp(dir.path(), "b", &vec![0xBB; 100]);
        let out = dir.path().join("img.cif");
        let info = write_cif(
            &[
                PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &a),
                PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, &b),
            ],
            &out,
        )
        .unwrap();
        assert_eq!(info.partitions[0].offset, 4096);
        assert_eq!(info.partitions[0].size, 5000);
        assert_eq!(info.partitions[1].offset, 12288);
        assert_eq!(info.partitions[1].size, 100);
        let bytes = fs::read(&out).unwrap();
        assert_eq!(bytes.len(), 12288 + 100);
        let header_end = (CIF_HEADER_LEN + 2 * CIF_DESCRIPTOR_LEN) as usize;
        assert!(bytes[header_end..4096].iter().all(|&b| b == 0));
        assert!(bytes[4096..9096].iter().all(|&b| b == 0xAA));
        assert!(bytes[9096..12288].iter().all(|&b| b == 0));
        assert!(bytes[12288..].iter().all(|&b| b == 0xBB));
        assert_eq!(detect_image(&out).unwrap(), info);
    }

    #[test]
    fn write_preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("img.cif");
        assert!(matches!(write_cif(&[], &out), Err(ImageError::NoPartitions)));
        assert!(!out.exists());
        let a = write_tmp(dir.path(), "a", &[1; 10]);
        let two = [
            PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &a),
            PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &a),
        ];
        assert!(matches!(write_cif(&two, &out), Err(ImageError::DuplicateRootfs)));
        let none = [PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, &a)];
        assert!(matches!(write_cif(&none, &out), Err(ImageError::MissingRootfs)));
        assert!(!out.exists());
    }

    #[test]
    fn extracted_partition_matches_payload() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..9000u32).map(|i| (i % 251) as u8).collect();
        let a = write_tmp(dir.path(), "a", &payload);
        let out = dir.path().join("img.cif");
        let info = write_cif(
            &[PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &a)],
            &out,
        )
        .unwrap();
        let x = dir.path().join("x");
        extract_partition(&out, &info.partitions[0], &x).unwrap();
        assert_eq!(fs::read(&x).unwrap(), payload);
    }

    fn kind_strategy() -> impl Strategy<Value = PartitionKind> {
        prop_oneof![Just(PartitionKind::Squashfs), Just(PartitionKind::Extfs)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cif_round_trip(
            rootfs_at in 0usize..4,
            parts in prop::collection::vec((kind_strategy(), 1usize..20_000), 1..4),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let rootfs_at = rootfs_at % parts.len();
            let mut sources = Vec::new();
            let mut expected = Vec::new();
            for (i, (kind, size)) in parts.iter().enumerate() {
                let role = if i == rootfs_at { PartitionRole::Rootfs } else { PartitionRole::Overlay };
                let bytes: Vec<u8> = (0..*size).map(|j| (j * 31 + i) as u8).collect();
                let p = write_tmp(dir.path(), &format!("p{i}"), &bytes);
                sources.push(PartitionSource::new(*kind, role, p));
                expected.push((*kind, role, *size as u64));
            }
            let out = dir.path().join("img.cif");
            let written = write_cif(&sources, &out).unwrap();
            let parsed = parse_cif(&out).unwrap();
            prop_assert_eq!(&written, &parsed);
            prop_assert_eq!(parsed.partitions, layout_partitions(&expected));
            for (src, d) in sources.iter().zip(&written.partitions) {
                let x = dir.path().join("extract");
                extract_partition(&out, d, &x).unwrap();
                prop_assert_eq!(fs::read(&x).unwrap(), fs::read(&src.payload).unwrap());
            }
        }
    }
}
