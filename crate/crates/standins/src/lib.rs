//! Minimal pure-Rust replacements for `squashfuse`, `mksquashfs`,
//! `fuse2fs`, `mke2fs`, `newuidmap` and `newgidmap`, so the runtime can be
//! exercised on hosts without the real tools. They accept the argument
//! forms the runtime uses and nothing more.

pub mod ext2;

use std::collections::HashMap;
use std::ffi::{OsStr, OsString};
use std::fs::{self, File};
use std::io::{self, BufReader, Read};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use backhand::compression::Compressor;
use backhand::{FilesystemCompressor, FilesystemReader, FilesystemWriter, InnerNode, NodeHeader};
use fuser::{
    Errno, FileAttr, FileHandle, FileType, Filesystem, FopenFlags, Generation, INodeNo, LockOwner, OpenFlags,
    ReplyAttr, ReplyData, ReplyDirectory, ReplyEntry, ReplyOpen, ReplyStatfs, Request,
};

const TTL: Duration = Duration::from_secs(60);

/// Kind of a filesystem entry, with what is needed to serve it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Dir,
    File(Vec<u8>),
    Symlink(PathBuf),
    CharDevice(u32),
    BlockDevice(u32),
    Fifo,
    Socket,
}

#[derive(Debug, Clone)]
pub struct TreeEntry {
    pub name: OsString,
    pub parent: u64,
    pub kind: NodeKind,
    pub mode: u16,
    pub uid: u32,
    pub gid: u32,
    pub mtime: u32,
}

/// A filesystem image loaded fully into memory. Inode 1 is the root.
#[derive(Debug, Clone)]
pub struct MemTree {
    pub entries: Vec<TreeEntry>,
    children: HashMap<u64, Vec<u64>>,
}

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

impl MemTree {
    /// Reads the squashfs starting `offset` bytes into `image`.
    pub fn load(image: &Path, offset: u64) -> io::Result<Self> {
        let reader = BufReader::new(File::open(image)?);
        let fs = FilesystemReader::from_reader_with_offset(reader, offset).map_err(invalid)?;
        let mut by_path: HashMap<PathBuf, u64> = HashMap::new();
        let mut entries = Vec::new();
        for node in fs.files() {
            let ino = entries.len() as u64 + 1;
            let path = node.fullpath.clone();
            let parent = match path.parent() {
                Some(p) => *by_path.get(p).ok_or_else(|| invalid(format!("orphan {}", path.display())))?,
                None => 1,
            };
            let kind = match &node.inner {
                InnerNode::Dir(_) => NodeKind::Dir,
                InnerNode::File(f) => {
                    let mut data = Vec::with_capacity(f.file_len());
                    fs.file(f).reader().read_to_end(&mut data)?;
                    NodeKind::File(data)
                }
                InnerNode::Symlink(s) => NodeKind::Symlink(s.link.clone()),
                InnerNode::CharacterDevice(d) => NodeKind::CharDevice(d.device_number),
                InnerNode::BlockDevice(d) => NodeKind::BlockDevice(d.device_number),
                InnerNode::NamedPipe => NodeKind::Fifo,
                InnerNode::Socket => NodeKind::Socket,
            };
            entries.push(TreeEntry {
                name: path.file_name().map(OsStr::to_os_string).unwrap_or_default(),
                parent,
                kind,
                mode: node.header.permissions,
                uid: node.header.uid,
                gid: node.header.gid,
                mtime: node.header.mtime,
            });
            by_path.insert(path, ino);
        }
        Ok(Self::with_entries(entries))
    }

    fn with_entries(entries: Vec<TreeEntry>) -> Self {
        let mut children: HashMap<u64, Vec<u64>> = HashMap::new();
        for (i, e) in entries.iter().enumerate().skip(1) {
            children.entry(e.parent).or_default().push(i as u64 + 1);
        }
        MemTree { entries, children }
    }

    /// Reads an ext2/3/4 filesystem that starts at byte 0 of `image`.
    pub fn load_ext(image: &Path) -> io::Result<Self> {
        let fs = ext4_view::Ext4::load_from_path(image).map_err(invalid)?;
        let meta = fs.symlink_metadata("/").map_err(invalid)?;
        let mut entries = vec![ext_entry(OsString::new(), 1, NodeKind::Dir, &meta)];
        let mut queue = vec![(PathBuf::from("/"), 1u64)];
        while let Some((dir, ino)) = queue.pop() {
            let mut kids = Vec::new();
            for e in fs.read_dir(dir.as_os_str().as_bytes()).map_err(invalid)? {
                let e = e.map_err(invalid)?;
                let name = OsStr::from_bytes(e.file_name().as_ref()).to_os_string();
                if name == "." || name == ".." {
                    continue;
                }
                kids.push((name, e));
            }
            kids.sort_by(|a, b| a.0.cmp(&b.0));
            for (name, e) in kids {
                let path = dir.join(&name);
                let p = path.as_os_str().as_bytes();
                let meta = e.metadata().map_err(invalid)?;
                let ft = meta.file_type();
                let kind = if ft.is_dir() {
                    NodeKind::Dir
                } else if ft.is_regular_file() {
                    NodeKind::File(fs.read(p).map_err(invalid)?)
                } else if ft.is_symlink() {
                    let target = fs.read_link(p).map_err(invalid)?;
                    NodeKind::Symlink(PathBuf::from(OsStr::from_bytes(target.as_ref())))
                } else if ft.is_char_dev() {
                    NodeKind::CharDevice(0)
                } else if ft.is_block_dev() {
                    NodeKind::BlockDevice(0)
                } else if ft.is_fifo() {
                    NodeKind::Fifo
                } else {
                    NodeKind::Socket
                };
                let child = entries.len() as u64 + 1;
                if kind == NodeKind::Dir {
                    queue.push((path, child));
                }
                entries.push(ext_entry(name, ino, kind, &meta));
            }
        }
        Ok(Self::with_entries(entries))
    }

    pub fn entry(&self, ino: u64) -> Option<&TreeEntry> {
        self.entries.get(ino.checked_sub(1)? as usize)
    }

    pub fn children(&self, ino: u64) -> &[u64] {
        self.children.get(&ino).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lookup(&self, parent: u64, name: &OsStr) -> Option<u64> {
        self.children(parent)
            .iter()
            .copied()
            .find(|&c| self.entries[c as usize - 1].name == name)
    }

    fn attr(&self, ino: u64) -> Option<FileAttr> {
        let e = self.entry(ino)?;
        let (kind, size, rdev) = match &e.kind {
            NodeKind::Dir => (FileType::Directory, 0, 0),
            NodeKind::File(d) => (FileType::RegularFile, d.len() as u64, 0),
            NodeKind::Symlink(l) => (FileType::Symlink, l.as_os_str().len() as u64, 0),
            NodeKind::CharDevice(r) => (FileType::CharDevice, 0, *r),
            NodeKind::BlockDevice(r) => (FileType::BlockDevice, 0, *r),
            NodeKind::Fifo => (FileType::NamedPipe, 0, 0),
            NodeKind::Socket => (FileType::Socket, 0, 0),
        };
        let t = UNIX_EPOCH + Duration::from_secs(e.mtime.into());
        Some(FileAttr {
            ino: INodeNo(ino),
            size,
            blocks: size.div_ceil(512),
            atime: t,
            mtime: t,
            ctime: t,
            crtime: t,
            kind,
            perm: e.mode & 0o7777,
            nlink: if kind == FileType::Directory { 2 } else { 1 },
            uid: e.uid,
            gid: e.gid,
            rdev,
            blksize: 4096,
            flags: 0,
        })
    }

    fn file_type(&self, ino: u64) -> FileType {
        self.attr(ino).map(|a| a.kind).unwrap_or(FileType::RegularFile)
    }
}

fn ext_entry(name: OsString, parent: u64, kind: NodeKind, meta: &ext4_view::Metadata) -> TreeEntry {
    TreeEntry {
        name,
        parent,
        kind,
        mode: meta.mode(),
        uid: meta.uid(),
        gid: meta.gid(),
        mtime: meta.modified().seconds().clamp(0, u32::MAX.into()) as u32,
    }
}

/// Read-only FUSE view of a [`MemTree`].
pub struct ReadOnlyFs(pub MemTree);

impl Filesystem for ReadOnlyFs {
    fn lookup(&self, _req: &Request, parent: INodeNo, name: &OsStr, reply: ReplyEntry) {
        match self.0.lookup(parent.0, name).and_then(|i| self.0.attr(i)) {
            Some(a) => reply.entry(&TTL, &a, Generation(0)),
            None => reply.error(Errno::ENOENT),
        }
    }

    fn getattr(&self, _req: &Request, ino: INodeNo, _fh: Option<FileHandle>, reply: ReplyAttr) {
        match self.0.attr(ino.0) {
            Some(a) => reply.attr(&TTL, &a),
            None => reply.error(Errno::ENOENT),
        }
    }

    fn readlink(&self, _req: &Request, ino: INodeNo, reply: ReplyData) {
        match self.0.entry(ino.0).map(|e| &e.kind) {
            Some(NodeKind::Symlink(l)) => reply.data(l.as_os_str().as_bytes()),
            _ => reply.error(Errno::EINVAL),
        }
    }

    fn open(&self, _req: &Request, ino: INodeNo, flags: OpenFlags, reply: ReplyOpen) {
        if self.0.entry(ino.0).is_none() {
            return reply.error(Errno::ENOENT);
        }
        if flags.acc_mode() != fuser::OpenAccMode::O_RDONLY {
            return reply.error(Errno::EROFS);
        }
        reply.opened(FileHandle(0), FopenFlags::empty());
    }

    fn read(
        &self,
        _req: &Request,
        ino: INodeNo,
        _fh: FileHandle,
        offset: u64,
        size: u32,
        _flags: OpenFlags,
        _lock_owner: Option<LockOwner>,
        reply: ReplyData,
    ) {
        match self.0.entry(ino.0).map(|e| &e.kind) {
            Some(NodeKind::File(d)) => {
                let start = (offset as usize).min(d.len());
                let end = start.saturating_add(size as usize).min(d.len());
                reply.data(&d[start..end]);
            }
            Some(NodeKind::Dir) => reply.error(Errno::EISDIR),
            _ => reply.error(Errno::EINVAL),
        }
    }

    fn readdir(&self, _req: &Request, ino: INodeNo, _fh: FileHandle, offset: u64, mut reply: ReplyDirectory) {
        let Some(e) = self.0.entry(ino.0) else {
            return reply.error(Errno::ENOENT);
        };
        let mut list: Vec<(u64, FileType, &OsStr)> = vec![
            (ino.0, FileType::Directory, OsStr::new(".")),
            (e.parent.max(1), FileType::Directory, OsStr::new("..")),
        ];
        for &c in self.0.children(ino.0) {
            list.push((c, self.0.file_type(c), &self.0.entries[c as usize - 1].name));
        }
        for (i, (child, kind, name)) in list.into_iter().enumerate().skip(offset as usize) {
            if reply.add(INodeNo(child), (i + 1) as u64, kind, name) {
                break;
            }
        }
        reply.ok();
    }

    fn statfs(&self, _req: &Request, _ino: INodeNo, reply: ReplyStatfs) {
        let bytes: u64 = self
            .0
            .entries
            .iter()
            .map(|e| match &e.kind {
                NodeKind::File(d) => d.len() as u64,
                _ => 0,
            })
            .sum();
        reply.statfs(bytes.div_ceil(4096), 0, 0, self.0.entries.len() as u64, 0, 4096, 255, 4096);
    }
}

/// Options accepted by the squashfuse stand-in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquashfuseArgs {
    pub image: PathBuf,
    pub mountpoint: PathBuf,
    pub offset: u64,
}

/// Parses `[-f] [-o opt,...] image mountpoint`. Unknown `-o` options are
/// ignored, like the real tool ignores options it hands to the kernel.
pub fn parse_squashfuse_args(args: &[OsString]) -> Result<SquashfuseArgs, String> {
    let mut offset = 0;
    let mut positional = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("-f") | Some("-d") => {}
            Some("-o") => {
                let opts = it.next().ok_or("-o needs an argument")?;
                for opt in opts.to_string_lossy().split(',') {
                    if let Some(v) = opt.strip_prefix("offset=") {
                        offset = v.parse().map_err(|_| format!("bad offset {v:?}"))?;
                    }
                }
            }
            _ => positional.push(PathBuf::from(a)),
        }
    }
    match <[PathBuf; 2]>::try_from(positional) {
        Ok([image, mountpoint]) => Ok(SquashfuseArgs {
            image,
            mountpoint,
            offset,
        }),
        Err(_) => Err("usage: squashfuse [-f] [-o offset=N] IMAGE MOUNTPOINT".into()),
    }
}

/// Options accepted by the fuse2fs stand-in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fuse2fsArgs {
    pub image: PathBuf,
    pub mountpoint: PathBuf,
}

/// Parses `IMAGE MOUNTPOINT [-f] [-o opt,...]`. Only read-only mounts are
/// served; asking for anything else is an error rather than a silent
/// downgrade.
pub fn parse_fuse2fs_args(args: &[OsString]) -> Result<Fuse2fsArgs, String> {
    let mut positional = Vec::new();
    let mut read_only = false;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("-f") => {}
            Some("-o") => {
                let opts = it.next().ok_or("-o needs an argument")?;
                for opt in opts.to_string_lossy().split(',') {
                    match opt {
                        "ro" => read_only = true,
                        "fakeroot" | "rw" => read_only = false,
                        _ => {}
                    }
                }
            }
            Some(s) if s.starts_with('-') => return Err(format!("unsupported option {s}")),
            _ => positional.push(PathBuf::from(a)),
        }
    }
    if !read_only {
        return Err("this fuse2fs only supports read-only mounts (-o ro)".into());
    }
    match <[PathBuf; 2]>::try_from(positional) {
        Ok([image, mountpoint]) => Ok(Fuse2fsArgs { image, mountpoint }),
        Err(_) => Err("usage: fuse2fs IMAGE MOUNTPOINT -o ro [-f]".into()),
    }
}

/// Options accepted by the mksquashfs stand-in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MksquashfsArgs {
    pub source: PathBuf,
    pub dest: PathBuf,
    pub exclude: Vec<PathBuf>,
}

/// Parses `SOURCE DEST [-noappend] [-no-xattrs] [-quiet] [-e PATH...]`.
pub fn parse_mksquashfs_args(args: &[OsString]) -> Result<MksquashfsArgs, String> {
    let mut positional = Vec::new();
    let mut exclude = Vec::new();
    let mut in_exclude = false;
    for a in args {
        match a.to_str() {
            Some("-noappend" | "-no-xattrs" | "-quiet" | "-no-progress") => in_exclude = false,
            Some("-e") => in_exclude = true,
            Some(s) if s.starts_with('-') => return Err(format!("unsupported option {s}")),
            _ if in_exclude => exclude.push(PathBuf::from(a)),
            _ => positional.push(PathBuf::from(a)),
        }
    }
    match <[PathBuf; 2]>::try_from(positional) {
        Ok([source, dest]) => Ok(MksquashfsArgs { source, dest, exclude }),
        Err(_) => Err("usage: mksquashfs SOURCE DEST [-noappend] [-no-xattrs] [-e PATH...]".into()),
    }
}

fn header(meta: &fs::Metadata) -> NodeHeader {
    NodeHeader::new(
        (meta.mode() & 0o7777) as u16,
        meta.uid(),
        meta.gid(),
        meta.mtime().clamp(0, u32::MAX.into()) as u32,
    )
}

/// Packs `source` into a gzip squashfs at `dest`, keeping modes, owners
/// (as this process sees them) and mtimes.
pub fn pack_directory(args: &MksquashfsArgs) -> io::Result<()> {
    let mut w = FilesystemWriter::default();
    w.set_compressor(FilesystemCompressor::new(Compressor::Gzip, None).map_err(invalid)?);
    w.set_time(
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as u32)
            .unwrap_or(0),
    );
    let root_meta = fs::metadata(&args.source)?;
    w.set_root_mode((root_meta.mode() & 0o7777) as u16);
    w.set_root_uid(root_meta.uid());
    w.set_root_gid(root_meta.gid());

    let walker = walkdir::WalkDir::new(&args.source)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            let rel = e.path().strip_prefix(&args.source).unwrap_or(e.path());
            !args.exclude.iter().any(|x| x == rel)
        });
    for entry in walker {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(&args.source).unwrap_or(entry.path());
        let inside = Path::new("/").join(rel);
        let meta = entry.path().symlink_metadata()?;
        let h = header(&meta);
        let ft = meta.file_type();
        let r = if ft.is_dir() {
            w.push_dir(&inside, h)
        } else if ft.is_symlink() {
            w.push_symlink(fs::read_link(entry.path())?, &inside, h)
        } else if ft.is_file() {
            w.push_file_from_path(entry.path(), &inside, h)
        } else if ft.is_char_device() {
            w.push_char_device(meta.rdev() as u32, &inside, h)
        } else if ft.is_block_device() {
            w.push_block_device(meta.rdev() as u32, &inside, h)
        } else if ft.is_fifo() {
            w.push_fifo(&inside, h)
        } else {
            w.push_socket(&inside, h)
        };
        r.map_err(invalid)?;
    }
    let out = File::create(&args.dest)?;
    w.write(out).map_err(invalid)?;
    Ok(())
}

/// Writes an id map for `<pid> <inside> <outside> <count>...`, the way
/// `newuidmap`/`newgidmap` do. `file` is `uid_map` or `gid_map`.
pub fn write_id_map(file: &str, args: &[String]) -> Result<(), String> {
    let (pid, rest) = args.split_first().ok_or("missing pid")?;
    let pid: u32 = pid.parse().map_err(|_| format!("bad pid {pid:?}"))?;
    if rest.is_empty() || rest.len() % 3 != 0 {
        return Err("expected triples of <inside> <outside> <count>".into());
    }
    let mut text = String::new();
    for t in rest.chunks(3) {
        for v in t {
            v.parse::<u32>().map_err(|_| format!("bad id {v:?}"))?;
        }
        text.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
    }
    let path = format!("/proc/{pid}/{file}");
    fs::write(&path, text).map_err(|e| format!("write {path}: {e}"))
}
