//! Carrying out mount steps: FUSE helper processes, kernel overlay and bind
//! mounts, the underlay root, and orderly teardown.
//!
//! Steps run strictly one after another. Helpers stay in the foreground as
//! children of the caller so their exit status is observable.

use std::collections::BTreeMap;
use std::ffi::{CString, OsStr, OsString};
use std::fs::{self, File};
use std::io::{self, Read, Seek};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::FileTypeExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::imagefmt::{PartitionDescriptor, PartitionKind};
use crate::planner::{BindSource, Location, MountPlan, MountStep, RootStrategy};
use crate::sys;
use crate::windowfile::{self, WindowError, WindowHandle, WindowSpec};

/// Upper bound on waiting for a helper's mount to appear.
pub const MOUNT_WAIT_CEILING: Duration = Duration::from_secs(10);

const REPROBE_HINT: &str = "the host profile may be stale; re-run `unsuid probe`";

#[derive(Debug, Error)]
pub enum MountError {
    #[error("helper {0} is not installed")]
    HelperMissing(String),
    #[error("{helper} exited with status {status}: {stderr}")]
    HelperFailed {
        helper: String,
        status: i32,
        stderr: String,
    },
    #[error("{helper} did not mount {target} within {ceiling:?}")]
    MountTimeout {
        helper: String,
        target: PathBuf,
        ceiling: Duration,
    },
    #[error("starting {helper}: {source}")]
    Spawn {
        helper: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error("kernel rejected the overlay mount on {target}: {source} ({hint})")]
    OverlayRejectedByKernel {
        target: PathBuf,
        #[source]
        source: io::Error,
        hint: &'static str,
    },
    #[error("overlay layer path {0:?} contains ':' or ','")]
    UnsupportedLayerPath(PathBuf),
    #[error("partition at offset {offset} is {found:?}, expected {expected:?}")]
    WrongPartitionKind {
        offset: u64,
        found: PartitionKind,
        expected: PartitionKind,
    },
    #[error("two binds target {0}")]
    BindDestinationConflict(String),
    #[error("bind destination {0} lies inside a non-directory of the image")]
    DestinationInsideFile(String),
    #[error("bind destination {0:?} must be absolute and not /")]
    BadDestination(String),
    #[error("mounting {source_path} on {target}: {err}")]
    MountFailed {
        source_path: PathBuf,
        target: PathBuf,
        #[source]
        err: io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("plan step {0} refers to a window that was never served")]
    MissingWindow(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> MountError + '_ {
    move |source| MountError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelperState {
    Starting,
    Serving,
    Exited(i32),
}

/// A supervised FUSE helper serving one mountpoint.
#[derive(Debug)]
pub struct HelperProcess {
    pub helper: String,
    pub mountpoint: PathBuf,
    state: HelperState,
    child: Child,
    stderr: File,
}

impl HelperProcess {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn state(&self) -> HelperState {
        self.state
    }

    /// Collects the exit status without blocking.
    pub fn poll(&mut self) -> HelperState {
        if let Ok(Some(status)) = self.child.try_wait() {
            self.state = HelperState::Exited(exit_code(status));
        }
        self.state
    }

    pub fn stderr_text(&mut self) -> String {
        let mut s = String::new();
        if self.stderr.rewind().is_ok() {
            let _ = self.stderr.read_to_string(&mut s);
        }
        s.trim().to_string()
    }

    /// Waits up to `grace` for the helper to exit, then kills it. Reaps in
    /// either case.
    fn stop(&mut self, grace: Duration) -> HelperState {
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let HelperState::Exited(_) = self.poll() {
                return self.state;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        if let Ok(status) = self.child.wait() {
            self.state = HelperState::Exited(exit_code(status));
        }
        self.state
    }
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Starts `program args...` in the foreground and waits until `target`
/// gains a mount-table entry (or the helper dies).
pub fn spawn_helper(program: &Path, args: &[OsString], target: &Path) -> Result<HelperProcess, MountError> {
    let name = program
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| program.display().to_string());
    if !program.is_file() {
        return Err(MountError::HelperMissing(name));
    }
    let stderr = tempfile::tempfile().map_err(io_at(Path::new("/tmp")))?;
    let child_err = stderr.try_clone().map_err(io_at(Path::new("/tmp")))?;
    let before = sys::count_mounts_at(target);
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(child_err));
    // SAFETY: only async-signal-safe syscalls run in the child.
    unsafe {
        cmd.pre_exec(|| {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGTERM);
            // Non-root helpers need CAP_SYS_ADMIN across exec to mount.
            if libc::geteuid() != 0 {
                let _ = sys::raise_ambient_caps();
            }
            Ok(())
        });
    }
    debug!("spawning {} {:?}", program.display(), args);
    let child = cmd.spawn().map_err(|source| MountError::Spawn {
        helper: name.clone(),
        source,
    })?;
    let mut helper = HelperProcess {
        helper: name,
        mountpoint: target.to_path_buf(),
        state: HelperState::Starting,
        child,
        stderr,
    };
    wait_for_mount(&mut helper, before)?;
    Ok(helper)
}

fn wait_for_mount(helper: &mut HelperProcess, before: usize) -> Result<(), MountError> {
    let start = Instant::now();
    let mut delay = Duration::from_millis(1);
    loop {
        if sys::count_mounts_at(&helper.mountpoint) > before {
            helper.state = HelperState::Serving;
            return Ok(());
        }
        if let HelperState::Exited(status) = helper.poll() {
            return Err(MountError::HelperFailed {
                helper: helper.helper.clone(),
                status,
                stderr: helper.stderr_text(),
            });
        }
        if start.elapsed() >= MOUNT_WAIT_CEILING {
            helper.stop(Duration::ZERO);
            return Err(MountError::MountTimeout {
                helper: helper.helper.clone(),
                target: helper.mountpoint.clone(),
                ceiling: MOUNT_WAIT_CEILING,
            });
        }
        std::thread::sleep(delay);
        delay = (delay * 2).min(Duration::from_millis(200));
    }
}

/// Argument vector for squashfuse: `-f -o offset=N image target`.
pub fn squashfuse_args(image: &Path, offset: u64, target: &Path) -> Vec<OsString> {
    vec![
        "-f".into(),
        "-o".into(),
        format!("offset={offset}").into(),
        image.into(),
        target.into(),
    ]
}

/// Argument vector for fuse2fs on a window file.
pub fn fuse2fs_args(part: &Path, target: &Path, writable: bool) -> Vec<OsString> {
    let opt = if writable { "fakeroot" } else { "ro" };
    vec![part.into(), target.into(), "-o".into(), opt.into(), "-f".into()]
}

fn check_layer_path(p: &Path) -> Result<(), MountError> {
    if p.as_os_str().as_bytes().iter().any(|b| *b == b':' || *b == b',') {
        return Err(MountError::UnsupportedLayerPath(p.to_path_buf()));
    }
    Ok(())
}

/// The overlay option string; `lower` is lowest first, the kernel wants
/// the top-most layer first.
pub fn overlay_options(lower: &[PathBuf], upper: &Path, work: &Path) -> Result<String, MountError> {
    for p in lower.iter().map(PathBuf::as_path).chain([upper, work]) {
        check_layer_path(p)?;
    }
    let lowers: Vec<String> = lower.iter().rev().map(|p| p.display().to_string()).collect();
    Ok(format!(
        "lowerdir={},upperdir={},workdir={}",
        lowers.join(":"),
        upper.display(),
        work.display()
    ))
}

pub fn mount_squash_partition(
    helper: &Path,
    image: &Path,
    part: &PartitionDescriptor,
    target: &Path,
) -> Result<HelperProcess, MountError> {
    if part.kind != PartitionKind::Squashfs {
        return Err(MountError::WrongPartitionKind {
            offset: part.offset,
            found: part.kind,
            expected: PartitionKind::Squashfs,
        });
    }
    spawn_helper(helper, &squashfuse_args(image, part.offset, target), target)
}

/// Serves a window over the partition at `window_dir`, then runs fuse2fs on
/// its `part` file.
pub fn mount_ext_partition(
    helper: &Path,
    image: &Path,
    part: &PartitionDescriptor,
    window_dir: &Path,
    target: &Path,
    writable: bool,
) -> Result<(WindowHandle, HelperProcess), MountError> {
    if part.kind != PartitionKind::Extfs {
        return Err(MountError::WrongPartitionKind {
            offset: part.offset,
            found: part.kind,
            expected: PartitionKind::Extfs,
        });
    }
    let window = windowfile::serve_window(&WindowSpec {
        backing: image.to_path_buf(),
        offset: part.offset,
        size: part.size,
        writable,
        mountpoint: window_dir.to_path_buf(),
    })?;
    let helper = spawn_helper(helper, &fuse2fs_args(&window.part_path(), target, writable), target)?;
    Ok((window, helper))
}

/// Mounts the union of `lower` (lowest first) and `upper` at `target`,
/// with the kernel or with fuse-overlayfs as the strategy says. There is no
/// fallback between the two.
pub fn mount_overlay(
    strategy: &RootStrategy,
    fuse_overlayfs: Option<&Path>,
    lower: &[PathBuf],
    upper: &Path,
    work: &Path,
    target: &Path,
) -> Result<Option<HelperProcess>, MountError> {
    let opts = overlay_options(lower, upper, work)?;
    match strategy {
        RootStrategy::KernelOverlay { .. } => {
            kernel_overlay(&opts, target)?;
            Ok(None)
        }
        RootStrategy::FuseOverlay { .. } => {
            let helper = fuse_overlayfs.ok_or_else(|| MountError::HelperMissing("fuse-overlayfs".into()))?;
            let args: Vec<OsString> = vec!["-f".into(), "-o".into(), opts.into(), target.into()];
            spawn_helper(helper, &args, target).map(Some)
        }
        RootStrategy::ReadOnlyUnderlay => Err(MountError::OverlayRejectedByKernel {
            target: target.to_path_buf(),
            source: io::Error::from(io::ErrorKind::InvalidInput),
            hint: "underlay strategy has no overlay mount",
        }),
    }
}

fn kernel_overlay(opts: &str, target: &Path) -> Result<(), MountError> {
    let rejected = |source| MountError::OverlayRejectedByKernel {
        target: target.to_path_buf(),
        source,
        hint: REPROBE_HINT,
    };
    let ctarget = sys::cstring(target).map_err(rejected)?;
    let mut last = None;
    // Inside a user namespace overlayfs must keep its metadata in user.* xattrs.
    for extra in ["", ",userxattr"] {
        let data = CString::new(format!("{opts}{extra}")).map_err(|e| rejected(e.into()))?;
        // SAFETY: NUL-terminated arguments.
        let r = unsafe {
            libc::mount(
                c"overlay".as_ptr(),
                ctarget.as_ptr(),
                c"overlay".as_ptr(),
                0,
                data.as_ptr().cast(),
            )
        };
        if r == 0 {
            return Ok(());
        }
        last = Some(io::Error::last_os_error());
    }
    Err(rejected(last.expect("tried at least once")))
}

/// Type of an image entry as far as underlay composition cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryType {
    Dir,
    File,
    Symlink,
    Other,
}

/// Read access to the image tree for [`compose_underlay`].
pub trait ImageTree {
    /// Entries of the directory at `rel` (relative to the image root, empty
    /// for the root itself).
    fn children(&self, rel: &Path) -> io::Result<Vec<(OsString, EntryType)>>;
}

/// An [`ImageTree`] backed by a mounted or unpacked directory.
#[derive(Debug, Clone)]
pub struct DirTree {
    pub root: PathBuf,
}

impl ImageTree for DirTree {
    fn children(&self, rel: &Path) -> io::Result<Vec<(OsString, EntryType)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join(rel))? {
            let entry = entry?;
            let ft = entry.file_type()?;
            let t = if ft.is_dir() {
                EntryType::Dir
            } else if ft.is_symlink() {
                EntryType::Symlink
            } else if ft.is_file() {
                EntryType::File
            } else {
                EntryType::Other
            };
            out.push((entry.file_name(), t));
        }
        Ok(out)
    }
}

/// A host path bound into the container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostBind {
    pub source: PathBuf,
    pub destination: String,
    pub readonly: bool,
    pub source_is_dir: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnderlayActionKind {
    BindFromImage,
    BindFromHost,
    MakeDir,
    MakeFile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnderlayAction {
    pub kind: UnderlayActionKind,
    /// Image-relative path for `BindFromImage`, host path for `BindFromHost`.
    pub source: Option<PathBuf>,
    /// Relative to the scratch root.
    pub destination: PathBuf,
    pub readonly: bool,
}

impl UnderlayAction {
    fn make(kind: UnderlayActionKind, dest: &Path) -> Self {
        UnderlayAction {
            kind,
            source: None,
            destination: dest.to_path_buf(),
            readonly: false,
        }
    }
}

/// A bind or standard destination split into path components.
struct Dest<'a> {
    parts: Vec<&'a str>,
    bind: Option<&'a HostBind>,
}

fn split_destination(dest: &str) -> Result<Vec<&str>, MountError> {
    if !dest.starts_with('/') {
        return Err(MountError::BadDestination(dest.to_string()));
    }
    let parts: Vec<&str> = dest.split('/').filter(|c| !c.is_empty() && *c != ".").collect();
    if parts.is_empty() || parts.contains(&"..") {
        return Err(MountError::BadDestination(dest.to_string()));
    }
    Ok(parts)
}

/// Computes how to assemble a root from an image tree plus binds without an
/// overlay: image entries that no destination shadows are bound in whole;
/// directories on a destination's path are recreated one level at a time.
///
/// Standard targets only get a directory made; their mounts happen
/// separately. A destination below another destination is bound after it
/// without creating anything, so its mount point must already exist in
/// the outer bind's source.
pub fn compose_underlay(
    tree: &dyn ImageTree,
    binds: &[HostBind],
    standard_targets: &[String],
) -> Result<Vec<UnderlayAction>, MountError> {
    let mut dests = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (dest, bind) in binds
        .iter()
        .map(|b| (b.destination.as_str(), Some(b)))
        .chain(standard_targets.iter().map(|s| (s.as_str(), None)))
    {
        let parts = split_destination(dest)?;
        if !seen.insert(parts.join("/")) {
            return Err(MountError::BindDestinationConflict(format!("/{}", parts.join("/"))));
        }
        dests.push(Dest { parts, bind });
    }
    let mut out = Vec::new();
    let refs: Vec<&Dest> = dests.iter().collect();
    walk_level(tree, Some(Path::new("")), Path::new(""), &refs, 0, &mut out)?;
    Ok(out)
}

fn host_bind_action(bind: &HostBind, dest: &Path) -> UnderlayAction {
    UnderlayAction {
        kind: UnderlayActionKind::BindFromHost,
        source: Some(bind.source.clone()),
        destination: dest.to_path_buf(),
        readonly: bind.readonly,
    }
}

fn walk_level(
    tree: &dyn ImageTree,
    image_dir: Option<&Path>,
    rel: &Path,
    dests: &[&Dest],
    depth: usize,
    out: &mut Vec<UnderlayAction>,
) -> Result<(), MountError> {
    let entries: BTreeMap<OsString, EntryType> = match image_dir {
        Some(dir) => tree.children(dir).map_err(io_at(dir))?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let mut by_name: BTreeMap<OsString, Vec<&Dest>> = BTreeMap::new();
    for d in dests {
        by_name.entry(OsString::from(d.parts[depth])).or_default().push(d);
    }
    let mut names: Vec<&OsStr> = entries.keys().map(OsString::as_os_str).collect();
    names.extend(by_name.keys().map(OsString::as_os_str));
    names.sort();
    names.dedup();

    for name in names {
        let path = rel.join(name);
        let entry = entries.get(name).copied();
        let Some(here) = by_name.get(name) else {
            out.push(UnderlayAction {
                kind: UnderlayActionKind::BindFromImage,
                source: Some(path.clone()),
                destination: path,
                readonly: false,
            });
            continue;
        };
        let terminal = here.iter().find(|d| d.parts.len() == depth + 1);
        if let Some(t) = terminal {
            match t.bind {
                Some(b) => {
                    let kind = if b.source_is_dir {
                        UnderlayActionKind::MakeDir
                    } else {
                        UnderlayActionKind::MakeFile
                    };
                    out.push(UnderlayAction::make(kind, &path));
                    out.push(host_bind_action(b, &path));
                }
                None => out.push(UnderlayAction::make(UnderlayActionKind::MakeDir, &path)),
            }
            // Anything deeper lands inside the outer bind's source.
            let mut nested: Vec<&&Dest> = here.iter().filter(|d| d.parts.len() > depth + 1).collect();
            nested.sort_by(|a, b| a.parts.cmp(&b.parts));
            for d in nested {
                if let Some(b) = d.bind {
                    let dest: PathBuf = d.parts.iter().collect();
                    out.push(host_bind_action(b, &dest));
                }
            }
            continue;
        }
        let sub_image = match entry {
            Some(EntryType::Dir) => Some(image_dir.map(|d| d.join(name)).unwrap_or_else(|| path.clone())),
            None => None,
            Some(_) => {
                return Err(MountError::DestinationInsideFile(format!("/{}", path.display())));
            }
        };
        out.push(UnderlayAction::make(UnderlayActionKind::MakeDir, &path));
        walk_level(tree, sub_image.as_deref(), &path, here, depth + 1, out)?;
    }
    Ok(())
}

fn raw_mount(source: &Path, target: &Path, fstype: Option<&CStr>, flags: libc::c_ulong) -> Result<(), MountError> {
    let err = |err| MountError::MountFailed {
        source_path: source.to_path_buf(),
        target: target.to_path_buf(),
        err,
    };
    let csrc = sys::cstring(source).map_err(err)?;
    let ctgt = sys::cstring(target).map_err(err)?;
    // SAFETY: NUL-terminated arguments.
    let r = unsafe {
        libc::mount(
            csrc.as_ptr(),
            ctgt.as_ptr(),
            fstype.map_or(std::ptr::null(), CStr::as_ptr),
            flags,
            std::ptr::null(),
        )
    };
    if r != 0 {
        return Err(err(io::Error::last_os_error()));
    }
    Ok(())
}

use std::ffi::CStr;

/// Bind-mounts `source` on `target` (recursively), then makes it read-only
/// if asked, keeping the flags the kernel locks for unprivileged mounts.
pub fn bind_mount(source: &Path, target: &Path, readonly: bool) -> Result<(), MountError> {
    raw_mount(source, target, None, libc::MS_BIND | libc::MS_REC)?;
    if readonly {
        let st = nix::sys::statvfs::statvfs(target).map_err(|e| MountError::MountFailed {
            source_path: source.to_path_buf(),
            target: target.to_path_buf(),
            err: e.into(),
        })?;
        let locked = st.flags().bits() as libc::c_ulong
            & (libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC | libc::MS_NOATIME | libc::MS_NODIRATIME | libc::MS_RELATIME);
        raw_mount(
            Path::new("none"),
            target,
            None,
            libc::MS_BIND | libc::MS_REMOUNT | libc::MS_RDONLY | locked,
        )?;
    }
    Ok(())
}

/// Creates an empty mount point of the right type at `path`.
fn make_mount_point(path: &Path, dir: bool) -> Result<(), MountError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() == dir && !m.file_type().is_symlink() => Ok(()),
        Ok(_) => Err(MountError::Io {
            path: path.to_path_buf(),
            source: io::Error::from(io::ErrorKind::AlreadyExists),
        }),
        Err(_) if dir => fs::create_dir(path).map_err(io_at(path)),
        Err(_) => File::create(path).map(drop).map_err(io_at(path)),
    }
}

/// Carries out underlay actions into `root`. Returns the mount targets
/// created, in order.
pub fn apply_underlay(
    actions: &[UnderlayAction],
    image_root: &Path,
    root: &Path,
    skip_host_binds: bool,
) -> Result<Vec<PathBuf>, MountError> {
    let mut mounted = Vec::new();
    for a in actions {
        let dest = root.join(&a.destination);
        match a.kind {
            UnderlayActionKind::MakeDir => {
                if !dest.is_dir() {
                    fs::create_dir(&dest).map_err(io_at(&dest))?;
                }
            }
            UnderlayActionKind::MakeFile => {
                File::create(&dest).map_err(io_at(&dest))?;
            }
            UnderlayActionKind::BindFromImage => {
                let src = image_root.join(a.source.as_deref().unwrap_or(&a.destination));
                let meta = fs::symlink_metadata(&src).map_err(io_at(&src))?;
                let ft = meta.file_type();
                if ft.is_symlink() {
                    let link = fs::read_link(&src).map_err(io_at(&src))?;
                    std::os::unix::fs::symlink(link, &dest).map_err(io_at(&dest))?;
                    continue;
                }
                if ft.is_socket() || ft.is_fifo() || ft.is_char_device() || ft.is_block_device() {
                    debug!("skipping special file {}", src.display());
                }
                make_mount_point(&dest, ft.is_dir())?;
                bind_mount(&src, &dest, false)?;
                mounted.push(dest);
            }
            UnderlayActionKind::BindFromHost => {
                if skip_host_binds {
                    continue;
                }
                let src = a.source.clone().unwrap_or_default();
                bind_mount(&src, &dest, a.readonly)?;
                mounted.push(dest);
            }
        }
    }
    Ok(mounted)
}

/// Something teardown has to undo.
#[derive(Debug)]
pub enum MountHandle {
    Mount(PathBuf),
    Helper(HelperProcess),
    Window(WindowHandle),
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct TeardownReport {
    /// Busy mounts that had to be lazily detached.
    pub lazily_detached: Vec<PathBuf>,
    /// Mounts that could not be removed at all.
    pub residual: Vec<PathBuf>,
    pub errors: Vec<String>,
}

impl TeardownReport {
    pub fn is_clean(&self) -> bool {
        self.lazily_detached.is_empty() && self.residual.is_empty() && self.errors.is_empty()
    }
}

fn unmount(target: &Path, report: &mut TeardownReport) {
    if !sys::is_mount_point(target) {
        return;
    }
    // Recursive binds carry submounts; detaching those is expected.
    let nested = sys::mount_points()
        .map(|ms| ms.iter().any(|m| m != target && m.starts_with(target)))
        .unwrap_or(false);
    let Ok(c) = sys::cstring(target) else { return };
    // SAFETY: NUL-terminated path.
    if unsafe { libc::umount2(c.as_ptr(), 0) } == 0 {
        return;
    }
    let err = io::Error::last_os_error();
    // SAFETY: NUL-terminated path.
    if err.raw_os_error() == Some(libc::EBUSY) && unsafe { libc::umount2(c.as_ptr(), libc::MNT_DETACH) } == 0 {
        if !nested {
            warn!("{} was busy; detached lazily", target.display());
            report.lazily_detached.push(target.to_path_buf());
        }
        return;
    }
    report.errors.push(format!("unmounting {}: {err}", target.display()));
    report.residual.push(target.to_path_buf());
}

/// Undoes `handles` in reverse order: unmounts, stops and reaps helpers,
/// stops windows. Empties the list, so calling it again does nothing.
pub fn teardown(handles: &mut Vec<MountHandle>) -> TeardownReport {
    let mut report = TeardownReport::default();
    while let Some(h) = handles.pop() {
        match h {
            MountHandle::Mount(target) => unmount(&target, &mut report),
            MountHandle::Helper(mut helper) => {
                if helper.poll() == HelperState::Serving {
                    unmount(&helper.mountpoint.clone(), &mut report);
                }
                match helper.stop(Duration::from_secs(2)) {
                    HelperState::Exited(0) | HelperState::Exited(143) => {}
                    HelperState::Exited(code) => debug!("{} exited with {code}", helper.helper),
                    _ => report.errors.push(format!("{} could not be reaped", helper.helper)),
                }
            }
            MountHandle::Window(mut w) => {
                if let Err(e) = w.shutdown() {
                    report.errors.push(format!("window {}: {e}", w.mountpoint().display()));
                }
            }
        }
    }
    for p in &report.residual {
        warn!("mount left behind at {}", p.display());
    }
    report
}

/// State of an executed plan: the scratch tree and everything to undo.
#[derive(Debug)]
pub struct MountSession {
    pub scratch: PathBuf,
    pub root: PathBuf,
    pub handles: Vec<MountHandle>,
}

impl MountSession {
    pub fn teardown(&mut self) -> TeardownReport {
        let report = teardown(&mut self.handles);
        if report.residual.is_empty() {
            let _ = fs::remove_dir_all(&self.scratch);
        }
        report
    }
}

impl Drop for MountSession {
    fn drop(&mut self) {
        if !self.handles.is_empty() {
            self.teardown();
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), MountError> {
    fs::create_dir_all(path).map_err(io_at(path))
}

/// Executes every step before `PivotIntoRoot`, with the scratch tree at
/// `scratch` (created if missing). Must run inside a private mount
/// namespace. On error everything already mounted is torn down.
pub fn execute_plan(plan: &MountPlan, scratch: &Path, fuse_overlayfs: Option<&Path>) -> Result<MountSession, MountError> {
    let mut session = MountSession {
        scratch: scratch.to_path_buf(),
        root: scratch.join("root"),
        handles: Vec::new(),
    };
    match run_steps(plan, &mut session, fuse_overlayfs) {
        Ok(()) => Ok(session),
        Err(e) => {
            let report = session.teardown();
            if !report.is_clean() {
                warn!("cleanup after failed plan: {report:?}");
            }
            Err(e)
        }
    }
}

fn run_steps(plan: &MountPlan, session: &mut MountSession, fuse_overlayfs: Option<&Path>) -> Result<(), MountError> {
    let scratch = session.scratch.clone();
    let resolve = |l: &Location| l.resolve(&scratch);
    let mut windows: BTreeMap<Location, PathBuf> = BTreeMap::new();

    for step in &plan.steps {
        debug!("step: {step}");
        match step {
            MountStep::MakeScratchRoot { root } => {
                ensure_dir(&scratch)?;
                raw_mount(Path::new("tmpfs"), &scratch, Some(c"tmpfs"), libc::MS_NOSUID | libc::MS_NODEV)?;
                session.handles.push(MountHandle::Mount(scratch.clone()));
                session.root = resolve(root);
                ensure_dir(&session.root)?;
            }
            MountStep::MountSquashPartition {
                helper,
                image,
                offset,
                size,
                target,
            } => {
                let target = resolve(target);
                ensure_dir(&target)?;
                let part = PartitionDescriptor {
                    kind: PartitionKind::Squashfs,
                    role: crate::imagefmt::PartitionRole::Rootfs,
                    offset: *offset,
                    size: *size,
                };
                let h = mount_squash_partition(helper, image, &part, &target)?;
                session.handles.push(MountHandle::Helper(h));
            }
            MountStep::ServeWindowFile {
                backing,
                offset,
                size,
                writable,
                mountpoint,
            } => {
                let dir = resolve(mountpoint);
                ensure_dir(&dir)?;
                let w = windowfile::serve_window(&WindowSpec {
                    backing: backing.clone(),
                    offset: *offset,
                    size: *size,
                    writable: *writable,
                    mountpoint: dir,
                })?;
                windows.insert(mountpoint.clone(), w.part_path());
                session.handles.push(MountHandle::Window(w));
            }
            MountStep::MountExtPartition {
                helper,
                window,
                target,
                writable,
            } => {
                let part = windows
                    .get(window)
                    .cloned()
                    .ok_or_else(|| MountError::MissingWindow(window.to_string()))?;
                let target = resolve(target);
                ensure_dir(&target)?;
                let h = spawn_helper(helper, &fuse2fs_args(&part, &target, *writable), &target)?;
                session.handles.push(MountHandle::Helper(h));
            }
            MountStep::MountKernelOverlay {
                lower,
                upper,
                work,
                target,
            }
            | MountStep::MountFuseOverlay {
                lower,
                upper,
                work,
                target,
                ..
            } => {
                let (upper, work, target) = (resolve(upper), resolve(work), resolve(target));
                ensure_dir(&upper)?;
                ensure_dir(&work)?;
                ensure_dir(&target)?;
                let lower: Vec<PathBuf> = lower.iter().map(resolve).collect();
                let (strategy, helper) = match step {
                    MountStep::MountFuseOverlay { helper, .. } => (
                        RootStrategy::FuseOverlay {
                            upper: Location::Host(upper.clone()),
                            work: Location::Host(work.clone()),
                        },
                        Some(helper.as_path()).or(fuse_overlayfs),
                    ),
                    _ => (
                        RootStrategy::KernelOverlay {
                            upper: Location::Host(upper.clone()),
                            work: Location::Host(work.clone()),
                        },
                        None,
                    ),
                };
                match mount_overlay(&strategy, helper, &lower, &upper, &work, &target)? {
                    Some(h) => session.handles.push(MountHandle::Helper(h)),
                    None => session.handles.push(MountHandle::Mount(target)),
                }
            }
            MountStep::BindEntry {
                source: BindSource::Underlay { image_root },
                ..
            } => {
                let image_root = resolve(image_root);
                let (binds, standard) = later_destinations(plan);
                let actions = compose_underlay(&DirTree { root: image_root.clone() }, &binds, &standard)?;
                let root = session.root.clone();
                let mounted = apply_underlay(&actions, &image_root, &root, true);
                let mounted = mounted?;
                session.handles.extend(mounted.into_iter().map(MountHandle::Mount));
            }
            MountStep::BindEntry {
                source: BindSource::Host { path },
                destination,
                readonly,
            } => {
                let dest = session.root.join(destination.trim_start_matches('/'));
                let is_dir = fs::metadata(path).map_err(io_at(path))?.is_dir();
                if !dest.exists() {
                    make_mount_point(&dest, is_dir)?;
                }
                bind_mount(path, &dest, *readonly)?;
                session.handles.push(MountHandle::Mount(dest));
            }
            MountStep::MountStandard {
                source, destination, ..
            } => {
                let dest = session.root.join(destination.trim_start_matches('/'));
                if !dest.exists() {
                    make_mount_point(&dest, true)?;
                }
                bind_mount(source, &dest, false)?;
                session.handles.push(MountHandle::Mount(dest));
            }
            MountStep::PivotIntoRoot { root } => {
                session.root = resolve(root);
            }
        }
    }
    info!("container root assembled at {}", session.root.display());
    Ok(())
}

/// Host binds and standard destinations that follow an underlay step.
fn later_destinations(plan: &MountPlan) -> (Vec<HostBind>, Vec<String>) {
    let mut binds = Vec::new();
    let mut standard = Vec::new();
    for s in &plan.steps {
        match s {
            MountStep::BindEntry {
                source: BindSource::Host { path },
                destination,
                readonly,
            } => binds.push(HostBind {
                source: path.clone(),
                destination: destination.clone(),
                readonly: *readonly,
                source_is_dir: path.is_dir(),
            }),
            MountStep::MountStandard { destination, .. } => standard.push(destination.clone()),
            _ => {}
        }
    }
    (binds, standard)
}

/// Checks that squashfuse honours `offset=` by mounting a generated image
/// prefixed with 4096 bytes of padding. Forks; call while single-threaded.
pub fn verify_squashfuse_offset(squashfuse: &Path, mksquashfs: &Path, uid: u32, gid: u32) -> io::Result<()> {
    let dir = tempfile::Builder::new().prefix("unsuid-sqcheck-").tempdir()?;
    let content = dir.path().join("content");
    fs::create_dir(&content)?;
    fs::write(content.join("probe"), b"offset-ok\n")?;
    let raw = dir.path().join("raw.sqfs");
    let out = Command::new(mksquashfs)
        .arg(&content)
        .arg(&raw)
        .args(["-noappend", "-no-xattrs"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .output()?;
    if !out.status.success() {
        return Err(io::Error::other(format!(
            "mksquashfs failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let padded = dir.path().join("padded.img");
    let mut bytes = vec![0u8; 4096];
    bytes.extend(fs::read(&raw)?);
    fs::write(&padded, bytes)?;
    let mnt = dir.path().join("mnt");
    fs::create_dir(&mnt)?;

    let maps = crate::nsexec::RawMaps::root_mapped(uid, gid);
    let squashfuse = squashfuse.to_path_buf();
    let code = sys::fork_and_wait(|| {
        if maps.enter(libc::CLONE_NEWUSER | libc::CLONE_NEWNS).is_err() {
            return 3;
        }
        let part = PartitionDescriptor {
            kind: PartitionKind::Squashfs,
            role: crate::imagefmt::PartitionRole::Rootfs,
            offset: 4096,
            size: 0,
        };
        let mut handles = match mount_squash_partition(&squashfuse, &padded, &part, &mnt) {
            Ok(h) => vec![MountHandle::Helper(h)],
            Err(_) => return 4,
        };
        let ok = fs::read(mnt.join("probe")).map(|b| b == b"offset-ok\n").unwrap_or(false);
        teardown(&mut handles);
        if ok {
            0
        } else {
            5
        }
    })?;
    match code {
        0 => Ok(()),
        3 => Err(io::Error::other("could not enter a user namespace")),
        4 => Err(io::Error::other("squashfuse refused the offset= option")),
        _ => Err(io::Error::other("content read through offset= mount did not match")),
    }
}
