//! A FUSE filesystem with exactly one file, `part`, whose bytes are the
//! range `[offset, offset + size)` of a backing file. This gives tools
//! that cannot start at an offset (fuse2fs) a view of one partition.

use std::ffi::{CString, OsStr};
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::fd::{AsRawFd, OwnedFd};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use fuser::{
    BackgroundSession, Config, Errno, FileAttr, FileHandle, FileType, Filesystem, FopenFlags, Generation, INodeNo,
    LockOwner, OpenAccMode, OpenFlags, ReplyAttr, ReplyData, ReplyDirectory, ReplyEmpty, ReplyEntry, ReplyOpen,
    ReplyStatfs, ReplyWrite, Request, SessionACL, TimeOrNow, WriteFlags,
};
use log::debug;
use thiserror::Error;

use crate::sys;

/// Name of the single file exposed at the mount root.
pub const EXPOSED_NAME: &str = "part";

const ROOT_INO: u64 = 1;
const PART_INO: u64 = 2;
const TTL: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("/dev/fuse is not usable: {0}")]
    FuseUnavailable(#[source] io::Error),
    #[error("mounting the window at {mountpoint} failed: {source}")]
    MountFailed {
        mountpoint: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("window {offset}+{size} exceeds backing file length {backing_len}")]
    SpecOutOfBounds { offset: u64, size: u64, backing_len: u64 },
    #[error("window size must be positive")]
    EmptyWindow,
    #[error("mountpoint {0} is not an empty directory")]
    BadMountpoint(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub backing: PathBuf,
    pub offset: u64,
    pub size: u64,
    pub writable: bool,
    pub mountpoint: PathBuf,
}

/// Maps a window position to a backing position and clamps the length to
/// what is left of the window. Past the end the length is 0.
pub fn translate_io(window_position: u64, length: u64, offset: u64, size: u64) -> (u64, u64) {
    let clamped = size.saturating_sub(window_position).min(length);
    (offset.saturating_add(window_position), clamped)
}

/// The byte range itself, independent of FUSE. All access is positional,
/// so one instance can be shared between threads.
#[derive(Debug)]
pub struct Window {
    file: File,
    offset: u64,
    size: u64,
    writable: bool,
}

impl Window {
    pub fn open(backing: &Path, offset: u64, size: u64, writable: bool) -> Result<Self, WindowError> {
        if size == 0 {
            return Err(WindowError::EmptyWindow);
        }
        let io_err = |source| WindowError::Io {
            path: backing.to_path_buf(),
            source,
        };
        let file = OpenOptions::new()
            .read(true)
            .write(writable)
            .open(backing)
            .map_err(io_err)?;
        let backing_len = file.metadata().map_err(io_err)?.len();
        if offset.checked_add(size).is_none_or(|end| end > backing_len) {
            return Err(WindowError::SpecOutOfBounds {
                offset,
                size,
                backing_len,
            });
        }
        Ok(Window {
            file,
            offset,
            size,
            writable,
        })
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn writable(&self) -> bool {
        self.writable
    }

    /// Reads up to `len` bytes at window position `pos`; short at the end.
    pub fn read_at(&self, pos: u64, len: u64) -> io::Result<Vec<u8>> {
        let (backing_pos, n) = translate_io(pos, len, self.offset, self.size);
        let mut buf = vec![0u8; n as usize];
        let mut done = 0;
        while done < buf.len() {
            match self.file.read_at(&mut buf[done..], backing_pos + done as u64) {
                Ok(0) => break,
                Ok(k) => done += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        buf.truncate(done);
        Ok(buf)
    }

    /// Writes all of `data` at `pos`. Writes reaching past the window are
    /// rejected whole (`EFBIG`); nothing outside the window is ever touched.
    pub fn write_at(&self, pos: u64, data: &[u8]) -> io::Result<usize> {
        if !self.writable {
            return Err(io::Error::from_raw_os_error(libc::EROFS));
        }
        let (backing_pos, n) = translate_io(pos, data.len() as u64, self.offset, self.size);
        if n != data.len() as u64 {
            return Err(io::Error::from_raw_os_error(libc::EFBIG));
        }
        self.file.write_all_at(data, backing_pos)?;
        Ok(data.len())
    }

    pub fn sync(&self) -> io::Result<()> {
        self.file.sync_data()
    }
}

struct WindowFs {
    window: Window,
    uid: u32,
    gid: u32,
    mtime: SystemTime,
}

impl WindowFs {
    fn attr(&self, ino: u64) -> Option<FileAttr> {
        let (kind, perm, size, nlink) = match ino {
            ROOT_INO => (FileType::Directory, 0o755, 0, 2),
            PART_INO => {
                let perm = if self.window.writable { 0o644 } else { 0o444 };
                (FileType::RegularFile, perm, self.window.size, 1)
            }
            _ => return None,
        };
        Some(FileAttr {
            ino: INodeNo(ino),
            size,
            blocks: size.div_ceil(512),
            atime: self.mtime,
            mtime: self.mtime,
            ctime: self.mtime,
            crtime: self.mtime,
            kind,
            perm,
            nlink,
            uid: self.uid,
            gid: self.gid,
            rdev: 0,
            blksize: 4096,
            flags: 0,
        })
    }
}

fn errno(e: &io::Error) -> Errno {
    Errno::from_i32(e.raw_os_error().unwrap_or(libc::EIO))
}

impl Filesystem for WindowFs {
    fn lookup(&self, _req: &Request, parent: INodeNo, name: &OsStr, reply: ReplyEntry) {
        match (parent.0, name.to_str()) {
            (ROOT_INO, Some(EXPOSED_NAME)) => {
                reply.entry(&TTL, &self.attr(PART_INO).expect("part attr"), Generation(0))
            }
            _ => reply.error(Errno::ENOENT),
        }
    }

    fn getattr(&self, _req: &Request, ino: INodeNo, _fh: Option<FileHandle>, reply: ReplyAttr) {
        match self.attr(ino.0) {
            Some(a) => reply.attr(&TTL, &a),
            None => reply.error(Errno::ENOENT),
        }
    }

    fn setattr(
        &self,
        _req: &Request,
        ino: INodeNo,
        _mode: Option<u32>,
        _uid: Option<u32>,
        _gid: Option<u32>,
        size: Option<u64>,
        _atime: Option<TimeOrNow>,
        _mtime: Option<TimeOrNow>,
        _ctime: Option<SystemTime>,
        _fh: Option<FileHandle>,
        _crtime: Option<SystemTime>,
        _chgtime: Option<SystemTime>,
        _bkuptime: Option<SystemTime>,
        _flags: Option<fuser::BsdFileFlags>,
        reply: ReplyAttr,
    ) {
        let Some(attr) = self.attr(ino.0) else {
            return reply.error(Errno::ENOENT);
        };
        // The window never changes length.
        if size.is_some_and(|s| s != attr.size) {
            return reply.error(Errno::EPERM);
        }
        reply.attr(&TTL, &attr)
    }

    fn open(&self, _req: &Request, ino: INodeNo, flags: OpenFlags, reply: ReplyOpen) {
        if ino.0 != PART_INO {
            return reply.error(Errno::EISDIR);
        }
        let wants_write = !matches!(flags.acc_mode(), OpenAccMode::O_RDONLY);
        if wants_write && !self.window.writable {
            return reply.error(Errno::EROFS);
        }
        if flags.0 & libc::O_TRUNC != 0 {
            return reply.error(Errno::EPERM);
        }
        reply.opened(FileHandle(0), FopenFlags::FOPEN_DIRECT_IO)
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
        if ino.0 != PART_INO {
            return reply.error(Errno::EISDIR);
        }
        match self.window.read_at(offset, u64::from(size)) {
            Ok(buf) => reply.data(&buf),
            Err(e) => reply.error(errno(&e)),
        }
    }

    fn write(
        &self,
        _req: &Request,
        ino: INodeNo,
        _fh: FileHandle,
        offset: u64,
        data: &[u8],
        _write_flags: WriteFlags,
        _flags: OpenFlags,
        _lock_owner: Option<LockOwner>,
        reply: ReplyWrite,
    ) {
        if ino.0 != PART_INO {
            return reply.error(Errno::EISDIR);
        }
        match self.window.write_at(offset, data) {
            Ok(n) => reply.written(n as u32),
            Err(e) => reply.error(errno(&e)),
        }
    }

    fn flush(&self, _req: &Request, _ino: INodeNo, _fh: FileHandle, _lock_owner: LockOwner, reply: ReplyEmpty) {
        reply.ok()
    }

    fn fsync(&self, _req: &Request, _ino: INodeNo, _fh: FileHandle, _datasync: bool, reply: ReplyEmpty) {
        match self.window.sync() {
            Ok(()) => reply.ok(),
            Err(e) => reply.error(errno(&e)),
        }
    }

    fn readdir(&self, _req: &Request, ino: INodeNo, _fh: FileHandle, offset: u64, mut reply: ReplyDirectory) {
        if ino.0 != ROOT_INO {
            return reply.error(Errno::ENOTDIR);
        }
        let entries = [
            (ROOT_INO, FileType::Directory, "."),
            (ROOT_INO, FileType::Directory, ".."),
            (PART_INO, FileType::RegularFile, EXPOSED_NAME),
        ];
        for (i, (ino, kind, name)) in entries.iter().enumerate().skip(offset as usize) {
            if reply.add(INodeNo(*ino), (i + 1) as u64, *kind, name) {
                break;
            }
        }
        reply.ok()
    }

    fn statfs(&self, _req: &Request, _ino: INodeNo, reply: ReplyStatfs) {
        let blocks = self.window.size.div_ceil(4096);
        reply.statfs(blocks, 0, 0, 2, 0, 4096, 255, 4096)
    }

    fn access(&self, _req: &Request, _ino: INodeNo, _mask: fuser::AccessFlags, reply: ReplyEmpty) {
        reply.ok()
    }
}

/// Mounts `fs` at `target` by talking to `/dev/fuse` directly (no
/// fusermount) and serves it from a background thread. Works as real root
/// or with `CAP_SYS_ADMIN` in the user namespace owning the mount namespace.
pub fn mount_fuse_session<FS: Filesystem>(
    fs: FS,
    target: &Path,
    fsname: &str,
    read_only: bool,
) -> io::Result<BackgroundSession> {
    let dev: OwnedFd = OpenOptions::new()
        .read(true)
        .write(true)
        .open("/dev/fuse")?
        .into();
    let meta = fs::metadata(target)?;
    let rootmode = {
        use std::os::unix::fs::MetadataExt;
        meta.mode() & libc::S_IFMT
    };
    let data = CString::new(format!(
        "fd={},rootmode={:o},user_id={},group_id={},allow_other",
        dev.as_raw_fd(),
        rootmode,
        nix::unistd::geteuid(),
        nix::unistd::getegid()
    ))?;
    let source = CString::new(fsname)?;
    let ctarget = sys::cstring(target)?;
    let mut flags = libc::MS_NOSUID | libc::MS_NODEV;
    if read_only {
        flags |= libc::MS_RDONLY;
    }
    // SAFETY: all pointers are valid NUL-terminated strings.
    let r = unsafe {
        libc::mount(
            source.as_ptr(),
            ctarget.as_ptr(),
            c"fuse".as_ptr(),
            flags,
            data.as_ptr().cast(),
        )
    };
    if r != 0 {
        return Err(io::Error::last_os_error());
    }
    let mut config = Config::default();
    config.acl = SessionACL::All;
    let session = match fuser::Session::from_fd(fs, dev, SessionACL::All, config) {
        Ok(s) => s,
        Err(e) => {
            unmount_detach(target);
            return Err(e);
        }
    };
    session.spawn()
}

fn unmount_detach(target: &Path) -> bool {
    let Ok(c) = sys::cstring(target) else { return false };
    // SAFETY: NUL-terminated path.
    unsafe { libc::umount2(c.as_ptr(), libc::MNT_DETACH) == 0 }
}

/// A served window; unmounts and stops the server thread on shutdown or drop.
#[derive(Debug)]
pub struct WindowHandle {
    mountpoint: PathBuf,
    session: Option<BackgroundSession>,
}

impl WindowHandle {
    pub fn mountpoint(&self) -> &Path {
        &self.mountpoint
    }

    /// Path of the exposed file.
    pub fn part_path(&self) -> PathBuf {
        self.mountpoint.join(EXPOSED_NAME)
    }

    pub fn is_running(&self) -> bool {
        self.session.is_some()
    }

    /// Unmounts and joins the server thread. Idempotent.
    pub fn shutdown(&mut self) -> io::Result<()> {
        let Some(session) = self.session.take() else {
            return Ok(());
        };
        let detached = unmount_detach(&self.mountpoint);
        if !detached {
            let e = io::Error::last_os_error();
            if e.raw_os_error() != Some(libc::EINVAL) {
                return Err(e);
            }
        }
        session.join()
    }
}

impl Drop for WindowHandle {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            debug!("window at {} shut down with error: {e}", self.mountpoint.display());
        }
    }
}

/// Mounts the window described by `spec` at `spec.mountpoint`.
pub fn serve_window(spec: &WindowSpec) -> Result<WindowHandle, WindowError> {
    let window = Window::open(&spec.backing, spec.offset, spec.size, spec.writable)?;
    let empty_dir = fs::read_dir(&spec.mountpoint)
        .map(|mut d| d.next().is_none())
        .unwrap_or(false);
    if !empty_dir {
        return Err(WindowError::BadMountpoint(spec.mountpoint.clone()));
    }
    OpenOptions::new()
        .read(true)
        .write(true)
        .open("/dev/fuse")
        .map_err(WindowError::FuseUnavailable)?;
    let mtime = fs::metadata(&spec.backing)
        .and_then(|m| m.modified())
        .unwrap_or(SystemTime::UNIX_EPOCH);
    let fs = WindowFs {
        window,
        uid: nix::unistd::geteuid().as_raw(),
        gid: nix::unistd::getegid().as_raw(),
        mtime,
    };
    let session = mount_fuse_session(fs, &spec.mountpoint, "unsuid-window", !spec.writable).map_err(|source| {
        WindowError::MountFailed {
            mountpoint: spec.mountpoint.clone(),
            source,
        }
    })?;
    debug!(
        "serving {}[{}..+{}] at {}",
        spec.backing.display(),
        spec.offset,
        spec.size,
        spec.mountpoint.display()
    );
    Ok(WindowHandle {
        mountpoint: spec.mountpoint.clone(),
        session: Some(session),
    })
}
