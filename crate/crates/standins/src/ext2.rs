//! A small ext2 image writer standing in for `mke2fs -d`.
//!
//! Produces revision-1 ext2 with 1 KiB blocks, 128-byte inodes, classic
//! block maps and the `filetype` feature only, optionally populated from a
//! host directory. No journal is written even when ext3 is requested, so
//! the result is also a valid ext3 filesystem without a journal.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{FileExt, FileTypeExt, MetadataExt};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const BLOCK: u64 = 1024;
const INODE_SIZE: u64 = 128;
const BLOCKS_PER_GROUP: u64 = 8192;
const ROOT_INO: u32 = 2;
const FIRST_INO: u32 = 11;
const PTRS: u64 = BLOCK / 4;
const MAGIC: u16 = 0xEF53;
const INCOMPAT_FILETYPE: u32 = 0x2;

/// Options accepted by the `mke2fs` stand-in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mke2fsArgs {
    pub device: PathBuf,
    pub root_dir: Option<PathBuf>,
    /// Size in 1 KiB blocks; the existing file length when absent.
    pub blocks: Option<u64>,
    pub label: Option<String>,
}

/// Parses `[-q] [-F] [-t TYPE] [-b 1024] [-L LABEL] [-m N] [-d DIR] DEVICE [BLOCKS]`.
pub fn parse_mke2fs_args(args: &[OsString]) -> Result<Mke2fsArgs, String> {
    let mut root_dir = None;
    let mut label = None;
    let mut positional: Vec<&OsString> = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("-q" | "-F") => {}
            Some("-t") => match it.next().and_then(|t| t.to_str()) {
                Some("ext2" | "ext3" | "ext4") => {}
                other => return Err(format!("unsupported filesystem type {other:?}")),
            },
            Some("-b") => match it.next().and_then(|t| t.to_str()) {
                Some("1024") => {}
                other => return Err(format!("only 1024-byte blocks are supported, got {other:?}")),
            },
            Some("-m") => {
                it.next().ok_or("-m needs an argument")?;
            }
            Some("-L") => label = Some(it.next().ok_or("-L needs an argument")?.to_string_lossy().into_owned()),
            Some("-d") => root_dir = Some(PathBuf::from(it.next().ok_or("-d needs an argument")?)),
            Some(s) if s.starts_with('-') => return Err(format!("unsupported option {s}")),
            _ => positional.push(a),
        }
    }
    let (device, blocks) = match positional.as_slice() {
        [d] => (PathBuf::from(d), None),
        [d, n] => {
            let n = n.to_str().and_then(|s| s.parse().ok()).ok_or("bad block count")?;
            (PathBuf::from(d), Some(n))
        }
        _ => return Err("usage: mke2fs [-t ext3] [-d DIR] DEVICE [BLOCKS]".into()),
    };
    Ok(Mke2fsArgs {
        device,
        root_dir,
        blocks,
        label,
    })
}

enum Content {
    Dir(Vec<usize>),
    File(PathBuf),
    Symlink(Vec<u8>),
    Device(u64),
    Other,
}

struct Node {
    name: OsString,
    parent: usize,
    ino: u32,
    mode: u16,
    uid: u32,
    gid: u32,
    mtime: u32,
    content: Content,
}

impl Node {
    fn dir_type(&self) -> u8 {
        match (self.mode as u32) & libc::S_IFMT {
            libc::S_IFREG => 1,
            libc::S_IFDIR => 2,
            libc::S_IFCHR => 3,
            libc::S_IFBLK => 4,
            libc::S_IFIFO => 5,
            libc::S_IFSOCK => 6,
            libc::S_IFLNK => 7,
            _ => 0,
        }
    }
}

fn now() -> u32 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as u32)
        .unwrap_or(0)
}

fn node_from(path: &Path, name: OsString, parent: usize) -> io::Result<Node> {
    let m = path.symlink_metadata()?;
    let ft = m.file_type();
    let content = if ft.is_dir() {
        Content::Dir(Vec::new())
    } else if ft.is_file() {
        Content::File(path.to_path_buf())
    } else if ft.is_symlink() {
        Content::Symlink(fs::read_link(path)?.as_os_str().as_bytes().to_vec())
    } else if ft.is_char_device() || ft.is_block_device() {
        Content::Device(m.rdev())
    } else {
        Content::Other
    };
    Ok(Node {
        name,
        parent,
        ino: 0,
        mode: m.mode() as u16,
        uid: m.uid(),
        gid: m.gid(),
        mtime: m.mtime().clamp(0, u32::MAX.into()) as u32,
        content,
    })
}

/// Nodes in breadth-first order; index 0 is the root, 1 is `lost+found`.
fn collect(root_dir: Option<&Path>) -> io::Result<Vec<Node>> {
    let mut root = match root_dir {
        Some(d) => node_from(d, OsString::new(), 0)?,
        None => Node {
            name: OsString::new(),
            parent: 0,
            ino: 0,
            mode: libc::S_IFDIR as u16 | 0o755,
            uid: nix_uid(),
            gid: nix_gid(),
            mtime: now(),
            content: Content::Dir(Vec::new()),
        },
    };
    if !matches!(root.content, Content::Dir(_)) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "-d needs a directory"));
    }
    root.ino = ROOT_INO;
    let lost = Node {
        name: "lost+found".into(),
        parent: 0,
        ino: FIRST_INO,
        mode: libc::S_IFDIR as u16 | 0o700,
        uid: 0,
        gid: 0,
        mtime: now(),
        content: Content::Dir(Vec::new()),
    };
    let mut nodes = vec![root, lost];
    let mut paths: Vec<Option<PathBuf>> = vec![root_dir.map(Path::to_path_buf), None];
    let mut i = 0;
    while i < nodes.len() {
        if let Some(dir) = paths[i].clone().filter(|_| matches!(nodes[i].content, Content::Dir(_))) {
            let mut names: Vec<OsString> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
            names.sort();
            for name in names {
                if i == 0 && name == "lost+found" {
                    continue;
                }
                if name.len() > 255 {
                    return Err(io::Error::new(io::ErrorKind::InvalidInput, "file name longer than 255 bytes"));
                }
                let p = dir.join(&name);
                nodes.push(node_from(&p, name, i)?);
                paths.push(Some(p));
            }
        }
        i += 1;
    }
    let mut next = FIRST_INO + 1;
    for idx in 2..nodes.len() {
        nodes[idx].ino = next;
        next += 1;
        let parent = nodes[idx].parent;
        if let Content::Dir(kids) = &mut nodes[parent].content {
            kids.push(idx);
        }
    }
    if let Content::Dir(kids) = &mut nodes[0].content {
        kids.insert(0, 1);
    }
    Ok(nodes)
}

fn nix_uid() -> u32 {
    // SAFETY: no preconditions.
    unsafe { libc::geteuid() }
}

fn nix_gid() -> u32 {
    // SAFETY: no preconditions.
    unsafe { libc::getegid() }
}

struct Geometry {
    blocks: u64,
    groups: u64,
    gdt_blocks: u64,
    inodes_per_group: u64,
}

impl Geometry {
    fn new(total: u64, inodes_needed: u64) -> io::Result<Self> {
        let too_small = || io::Error::new(io::ErrorKind::InvalidInput, "device too small for the requested contents");
        let mut blocks = total.min(u32::MAX as u64);
        let mut groups = (blocks.saturating_sub(1)).div_ceil(BLOCKS_PER_GROUP);
        if groups == 0 {
            return Err(too_small());
        }
        let per_group_wanted = (blocks / 4).max(inodes_needed + 16).div_ceil(groups);
        let inodes_per_group = (per_group_wanted.div_ceil(8) * 8).clamp(16, BLOCKS_PER_GROUP);
        let gdt_blocks = (groups * 32).div_ceil(BLOCK);
        let g = Geometry {
            blocks,
            groups,
            gdt_blocks,
            inodes_per_group,
        };
        let last = blocks - g.group_start(groups - 1);
        if last < g.meta_blocks() + 1 {
            groups -= 1;
            blocks = g.group_start(groups);
        }
        if groups == 0 || inodes_per_group * groups < inodes_needed + FIRST_INO as u64 {
            return Err(too_small());
        }
        Ok(Geometry { blocks, groups, ..g })
    }

    fn group_start(&self, g: u64) -> u64 {
        1 + g * BLOCKS_PER_GROUP
    }

    fn group_len(&self, g: u64) -> u64 {
        (self.blocks - self.group_start(g)).min(BLOCKS_PER_GROUP)
    }

    fn table_blocks(&self) -> u64 {
        self.inodes_per_group * INODE_SIZE / BLOCK
    }

    /// Superblock copy, descriptors, two bitmaps and the inode table.
    fn meta_blocks(&self) -> u64 {
        1 + self.gdt_blocks + 2 + self.table_blocks()
    }

    fn block_bitmap(&self, g: u64) -> u64 {
        self.group_start(g) + 1 + self.gdt_blocks
    }

    fn inode_bitmap(&self, g: u64) -> u64 {
        self.block_bitmap(g) + 1
    }

    fn inode_table(&self, g: u64) -> u64 {
        self.block_bitmap(g) + 2
    }
}

struct Writer {
    file: File,
    geo: Geometry,
    used: Vec<Vec<bool>>,
    next: u64,
}

impl Writer {
    fn alloc(&mut self) -> io::Result<u32> {
        while self.next < self.geo.blocks {
            let g = (self.next - 1) / BLOCKS_PER_GROUP;
            let rel = self.next - self.geo.group_start(g);
            if rel < self.geo.meta_blocks() {
                self.next = self.geo.group_start(g) + self.geo.meta_blocks();
                continue;
            }
            self.used[g as usize][rel as usize] = true;
            let b = self.next;
            self.next += 1;
            return Ok(b as u32);
        }
        Err(io::Error::new(io::ErrorKind::StorageFull, "no free blocks left in the image"))
    }

    fn write_block(&self, block: u32, data: &[u8]) -> io::Result<()> {
        let mut buf = [0u8; BLOCK as usize];
        buf[..data.len()].copy_from_slice(data);
        self.file.write_all_at(&buf, block as u64 * BLOCK)
    }

    /// Writes one pointer block per `PTRS^(level-1)` chunk, recursively.
    fn indirect(&mut self, data: &[u32], level: u32, extra: &mut u64) -> io::Result<u32> {
        let span = PTRS.pow(level - 1) as usize;
        let mut ptrs = Vec::with_capacity(PTRS as usize);
        for chunk in data.chunks(span) {
            ptrs.push(if level == 1 { chunk[0] } else { self.indirect(chunk, level - 1, extra)? });
        }
        let b = self.alloc()?;
        *extra += 1;
        let bytes: Vec<u8> = ptrs.iter().flat_map(|p| p.to_le_bytes()).collect();
        self.write_block(b, &bytes)?;
        Ok(b)
    }

    /// `i_block` contents and the total block count including pointer blocks.
    fn block_map(&mut self, data: &[u32]) -> io::Result<([u32; 15], u64)> {
        let mut map = [0u32; 15];
        let direct = data.len().min(12);
        map[..direct].copy_from_slice(&data[..direct]);
        let mut rest = &data[direct..];
        let mut extra = 0;
        for level in 1..=3u32 {
            if rest.is_empty() {
                break;
            }
            let cap = PTRS.pow(level) as usize;
            let (now, later) = rest.split_at(rest.len().min(cap));
            map[11 + level as usize] = self.indirect(now, level, &mut extra)?;
            rest = later;
        }
        if !rest.is_empty() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "file too large"));
        }
        Ok((map, data.len() as u64 + extra))
    }

    fn store(&mut self, bytes: &[u8]) -> io::Result<Vec<u32>> {
        let mut out = Vec::with_capacity(bytes.len().div_ceil(BLOCK as usize));
        for chunk in bytes.chunks(BLOCK as usize) {
            let b = self.alloc()?;
            self.write_block(b, chunk)?;
            out.push(b);
        }
        Ok(out)
    }

    fn write_inode(&self, ino: u32, raw: &[u8; INODE_SIZE as usize]) -> io::Result<()> {
        let idx = (ino - 1) as u64;
        let g = idx / self.geo.inodes_per_group;
        let pos = self.geo.inode_table(g) * BLOCK + (idx % self.geo.inodes_per_group) * INODE_SIZE;
        self.file.write_all_at(raw, pos)
    }
}

fn dir_blocks(nodes: &[Node], idx: usize) -> Vec<u8> {
    let node = &nodes[idx];
    let parent_ino = nodes[node.parent].ino;
    let mut entries: Vec<(u32, u8, &[u8])> = vec![(node.ino, 2, b"."), (parent_ino, 2, b"..")];
    if let Content::Dir(kids) = &node.content {
        for &k in kids {
            entries.push((nodes[k].ino, nodes[k].dir_type(), nodes[k].name.as_bytes()));
        }
    }
    let mut out: Vec<u8> = Vec::new();
    let mut block_start = 0;
    let mut last: Option<usize> = None;
    for (ino, ty, name) in entries {
        let len = (8 + name.len()).div_ceil(4) * 4;
        if out.len() + len > block_start + BLOCK as usize {
            // Stretch the previous entry to the end of its block.
            if let Some(l) = last {
                let rec = (block_start + BLOCK as usize - l) as u16;
                out[l + 4..l + 6].copy_from_slice(&rec.to_le_bytes());
            }
            out.resize(block_start + BLOCK as usize, 0);
            block_start += BLOCK as usize;
        }
        let at = out.len();
        out.extend_from_slice(&ino.to_le_bytes());
        out.extend_from_slice(&(len as u16).to_le_bytes());
        out.push(name.len() as u8);
        out.push(ty);
        out.extend_from_slice(name);
        out.resize(at + len, 0);
        last = Some(at);
    }
    if let Some(l) = last {
        let rec = (block_start + BLOCK as usize - l) as u16;
        out[l + 4..l + 6].copy_from_slice(&rec.to_le_bytes());
    }
    out.resize(block_start + BLOCK as usize, 0);
    out
}

fn inode_bytes(n: &Node, size: u64, links: u16, blocks: u64, map: &[u32; 15]) -> [u8; INODE_SIZE as usize] {
    let mut r = [0u8; INODE_SIZE as usize];
    r[0..2].copy_from_slice(&n.mode.to_le_bytes());
    r[2..4].copy_from_slice(&(n.uid as u16).to_le_bytes());
    r[4..8].copy_from_slice(&(size as u32).to_le_bytes());
    for off in [8, 12, 16] {
        r[off..off + 4].copy_from_slice(&n.mtime.to_le_bytes());
    }
    r[24..26].copy_from_slice(&(n.gid as u16).to_le_bytes());
    r[26..28].copy_from_slice(&links.to_le_bytes());
    r[28..32].copy_from_slice(&((blocks * (BLOCK / 512)) as u32).to_le_bytes());
    for (i, p) in map.iter().enumerate() {
        r[40 + i * 4..44 + i * 4].copy_from_slice(&p.to_le_bytes());
    }
    r[120..122].copy_from_slice(&((n.uid >> 16) as u16).to_le_bytes());
    r[122..124].copy_from_slice(&((n.gid >> 16) as u16).to_le_bytes());
    r
}

fn new_encode_dev(rdev: u64) -> u32 {
    let (major, minor) = (libc::major(rdev), libc::minor(rdev));
    (minor & 0xff) | (major << 8) | ((minor & !0xff) << 12)
}

/// Formats `args.device`, creating or resizing it when a block count is
/// given, and copies `args.root_dir` into the new filesystem.
pub fn format(args: &Mke2fsArgs) -> io::Result<()> {
    let file = OpenOptions::new().read(true).write(true).create(args.blocks.is_some()).truncate(false).open(&args.device)?;
    if let Some(n) = args.blocks {
        file.set_len(n * BLOCK)?;
    }
    let total = file.metadata()?.len() / BLOCK;
    let nodes = collect(args.root_dir.as_deref())?;
    let geo = Geometry::new(total, nodes.len() as u64)?;
    let used = (0..geo.groups).map(|g| vec![false; geo.group_len(g) as usize]).collect();
    let first = geo.group_start(0) + geo.meta_blocks();
    let mut w = Writer {
        file,
        geo,
        used,
        next: first,
    };

    // Zero the metadata regions; data blocks are written whole.
    let zero = vec![0u8; BLOCK as usize];
    w.file.write_all_at(&zero, 0)?;
    for g in 0..w.geo.groups {
        for b in w.geo.group_start(g)..w.geo.group_start(g) + w.geo.meta_blocks() {
            w.file.write_all_at(&zero, b * BLOCK)?;
        }
    }

    let mut dirs_per_group = vec![0u64; w.geo.groups as usize];
    for (idx, n) in nodes.iter().enumerate() {
        let empty = [0u32; 15];
        let (size, links, blocks, map) = match &n.content {
            Content::Dir(kids) => {
                let bytes = dir_blocks(&nodes, idx);
                let data = w.store(&bytes)?;
                let (map, blocks) = w.block_map(&data)?;
                let subdirs = kids.iter().filter(|&&k| matches!(nodes[k].content, Content::Dir(_))).count();
                dirs_per_group[((n.ino - 1) as u64 / w.geo.inodes_per_group) as usize] += 1;
                (bytes.len() as u64, 2 + subdirs as u16, blocks, map)
            }
            Content::File(p) => {
                let bytes = fs::read(p)?;
                if bytes.len() as u64 > u32::MAX as u64 {
                    return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("{} is too large", p.display())));
                }
                let data = w.store(&bytes)?;
                let (map, blocks) = w.block_map(&data)?;
                (bytes.len() as u64, 1, blocks, map)
            }
            Content::Symlink(target) if target.len() < 60 => {
                let mut map = [0u32; 15];
                let mut raw = [0u8; 60];
                raw[..target.len()].copy_from_slice(target);
                for (i, c) in raw.chunks(4).enumerate() {
                    map[i] = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                }
                (target.len() as u64, 1, 0, map)
            }
            Content::Symlink(target) => {
                let data = w.store(target)?;
                let (map, blocks) = w.block_map(&data)?;
                (target.len() as u64, 1, blocks, map)
            }
            Content::Device(rdev) => {
                let mut map = [0u32; 15];
                map[1] = new_encode_dev(*rdev);
                (0, 1, 0, map)
            }
            Content::Other => (0, 1, 0, empty),
        };
        w.write_inode(n.ino, &inode_bytes(n, size, links, blocks, &map))?;
    }

    let last_ino = nodes.iter().map(|n| n.ino).max().unwrap_or(FIRST_INO);
    let ipg = w.geo.inodes_per_group;
    let mut descriptors = Vec::new();
    let (mut free_blocks, mut free_inodes) = (0u64, 0u64);
    for g in 0..w.geo.groups {
        let mut bitmap = vec![0xffu8; BLOCK as usize];
        let len = w.geo.group_len(g) as usize;
        let mut group_free = 0u64;
        for i in 0..len {
            let in_use = (i as u64) < w.geo.meta_blocks() || w.used[g as usize][i];
            if !in_use {
                bitmap[i / 8] &= !(1 << (i % 8));
                group_free += 1;
            }
        }
        w.file.write_all_at(&bitmap, w.geo.block_bitmap(g) * BLOCK)?;

        let mut ibitmap = vec![0xffu8; BLOCK as usize];
        let mut group_free_inodes = 0u64;
        for i in 0..ipg {
            let ino = g * ipg + i + 1;
            if ino > last_ino as u64 {
                ibitmap[(i / 8) as usize] &= !(1 << (i % 8));
                group_free_inodes += 1;
            }
        }
        w.file.write_all_at(&ibitmap, w.geo.inode_bitmap(g) * BLOCK)?;

        let mut d = [0u8; 32];
        d[0..4].copy_from_slice(&(w.geo.block_bitmap(g) as u32).to_le_bytes());
        d[4..8].copy_from_slice(&(w.geo.inode_bitmap(g) as u32).to_le_bytes());
        d[8..12].copy_from_slice(&(w.geo.inode_table(g) as u32).to_le_bytes());
        d[12..14].copy_from_slice(&(group_free as u16).to_le_bytes());
        d[14..16].copy_from_slice(&(group_free_inodes as u16).to_le_bytes());
        d[16..18].copy_from_slice(&(dirs_per_group[g as usize] as u16).to_le_bytes());
        descriptors.extend_from_slice(&d);
        free_blocks += group_free;
        free_inodes += group_free_inodes;
    }

    let t = now();
    let mut sb = [0u8; BLOCK as usize];
    let put32 = |sb: &mut [u8], off: usize, v: u32| sb[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put16 = |sb: &mut [u8], off: usize, v: u16| sb[off..off + 2].copy_from_slice(&v.to_le_bytes());
    put32(&mut sb, 0, (ipg * w.geo.groups) as u32);
    put32(&mut sb, 4, w.geo.blocks as u32);
    put32(&mut sb, 12, free_blocks as u32);
    put32(&mut sb, 16, free_inodes as u32);
    put32(&mut sb, 20, 1);
    put32(&mut sb, 32, BLOCKS_PER_GROUP as u32);
    put32(&mut sb, 36, BLOCKS_PER_GROUP as u32);
    put32(&mut sb, 40, ipg as u32);
    put32(&mut sb, 48, t);
    put16(&mut sb, 54, 0xffff);
    put16(&mut sb, 56, MAGIC);
    put16(&mut sb, 58, 1);
    put16(&mut sb, 60, 1);
    put32(&mut sb, 64, t);
    put32(&mut sb, 76, 1);
    put32(&mut sb, 84, FIRST_INO);
    put16(&mut sb, 88, INODE_SIZE as u16);
    put32(&mut sb, 96, INCOMPAT_FILETYPE);
    let seed = (t as u64) << 32 ^ std::process::id() as u64 ^ SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.subsec_nanos() as u64).unwrap_or(0);
    sb[104..112].copy_from_slice(&seed.to_le_bytes());
    sb[112..120].copy_from_slice(&seed.rotate_left(17).to_le_bytes());
    if let Some(label) = &args.label {
        let b = label.as_bytes();
        let n = b.len().min(16);
        sb[120..120 + n].copy_from_slice(&b[..n]);
    }
    put32(&mut sb, 264, t);

    // Every group carries a superblock and descriptor copy (no sparse_super).
    for g in 0..w.geo.groups {
        put16(&mut sb, 90, g as u16);
        let start = w.geo.group_start(g);
        w.file.write_all_at(&sb, start * BLOCK)?;
        w.file.write_all_at(&descriptors, (start + 1) * BLOCK)?;
    }
    w.file.sync_all()
}

/// Convenience for tests: formats a fresh image of `blocks` KiB at `out`
/// holding a copy of `root`.
pub fn pack_ext2(root: &Path, out: &Path, blocks: u64) -> io::Result<()> {
    format(&Mke2fsArgs {
        device: out.to_path_buf(),
        root_dir: Some(root.to_path_buf()),
        blocks: Some(blocks),
        label: None,
    })
}
