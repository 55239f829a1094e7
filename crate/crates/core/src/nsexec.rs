//! Turning an [`IdentityPlan`] into reality: user and mount namespaces, id
//! maps, no-new-privs, entering the assembled root and running the command.
//!
//! Namespace creation must happen while the process is single-threaded.
//! Network, UTS, IPC and PID namespaces are never created.

use std::ffi::{CStr, CString};
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use log::{debug, warn};
use thiserror::Error;

use crate::idmap::{self, IdMapEntry};
use crate::planner::{IdentityMode, IdentityPlan};
use crate::sys;
use crate::EnvMap;

#[derive(Debug, Error)]
pub enum NsError {
    #[error("creating a user namespace was refused: {0}")]
    UsernsDenied(#[source] io::Error),
    #[error("writing {file}: {source}")]
    IdMapWriteFailed {
        file: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("{helper} failed ({status}): {stderr}")]
    HelperIdMapFailed {
        helper: String,
        status: i32,
        stderr: String,
    },
    #[error("multi-range id maps need newuidmap and newgidmap")]
    IdMapHelpersMissing,
    #[error("mode {0} needs a setuid-root installation, which this runtime never is")]
    ModeRequiresSetuidHost(IdentityMode),
    #[error("setting no-new-privs failed: {0}")]
    PrctlFailed(#[source] io::Error),
    #[error("entering the container root {root} failed: {source}")]
    PivotFailed {
        root: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: command not found")]
    CommandNotFound(String),
    #[error("executing {cmd}: {source}")]
    ExecFailed {
        cmd: String,
        #[source]
        source: io::Error,
    },
}

/// Id-map text prepared ahead of time so it can be written from a freshly
/// forked child without allocating.
#[derive(Debug, Clone)]
pub(crate) struct RawMaps {
    uid: Vec<u8>,
    gid: Vec<u8>,
}

/// Which write of [`RawMaps::enter`] failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EnterStage {
    Unshare,
    Setgroups,
    GidMap,
    UidMap,
}

impl RawMaps {
    pub(crate) fn from_entries(uid: &[IdMapEntry], gid: &[IdMapEntry]) -> Self {
        RawMaps {
            uid: idmap::format_id_map(uid).into_bytes(),
            gid: idmap::format_id_map(gid).into_bytes(),
        }
    }

    pub(crate) fn root_mapped(uid: u32, gid: u32) -> Self {
        Self::from_entries(&[IdMapEntry::new(0, uid, 1)], &[IdMapEntry::new(0, gid, 1)])
    }

    /// Unshares `flags` (which must include `CLONE_NEWUSER`) and writes the
    /// maps directly: setgroups, then gid_map, then uid_map.
    pub(crate) fn enter_staged(&self, flags: libc::c_int) -> Result<(), (EnterStage, io::Error)> {
        // SAFETY: unshare has no memory-safety preconditions.
        if unsafe { libc::unshare(flags) } != 0 {
            return Err((EnterStage::Unshare, io::Error::last_os_error()));
        }
        sys::write_file_once(c"/proc/self/setgroups", b"deny").map_err(|e| (EnterStage::Setgroups, e))?;
        sys::write_file_once(c"/proc/self/gid_map", &self.gid).map_err(|e| (EnterStage::GidMap, e))?;
        sys::write_file_once(c"/proc/self/uid_map", &self.uid).map_err(|e| (EnterStage::UidMap, e))?;
        Ok(())
    }

    pub(crate) fn enter(&self, flags: libc::c_int) -> io::Result<()> {
        self.enter_staged(flags).map_err(|(_, e)| e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamespaceSetup {
    pub uid_map_entries: Vec<IdMapEntry>,
    pub gid_map_entries: Vec<IdMapEntry>,
    pub deny_setgroups: bool,
    pub use_newidmap_helpers: bool,
    pub no_new_privs: bool,
    pub newuidmap: Option<PathBuf>,
    pub newgidmap: Option<PathBuf>,
}

fn needs_helpers(map: &[IdMapEntry]) -> bool {
    map.len() > 1 || map.iter().any(|e| e.count > 1)
}

impl NamespaceSetup {
    pub fn from_identity(identity: &IdentityPlan) -> Result<Self, NsError> {
        if identity.mode == IdentityMode::FakerootCmdOnly {
            return Err(NsError::ModeRequiresSetuidHost(identity.mode));
        }
        let helpers = needs_helpers(&identity.uid_map_entries) || needs_helpers(&identity.gid_map_entries);
        if helpers && (identity.newuidmap.is_none() || identity.newgidmap.is_none()) {
            return Err(NsError::IdMapHelpersMissing);
        }
        Ok(NamespaceSetup {
            uid_map_entries: identity.uid_map_entries.clone(),
            gid_map_entries: identity.gid_map_entries.clone(),
            deny_setgroups: !helpers,
            use_newidmap_helpers: helpers,
            no_new_privs: true,
            newuidmap: identity.newuidmap.clone(),
            newgidmap: identity.newgidmap.clone(),
        })
    }
}

fn helper_args(pid: libc::pid_t, map: &[IdMapEntry]) -> Vec<String> {
    let mut args = vec![pid.to_string()];
    for e in map {
        args.extend([e.inside.to_string(), e.outside.to_string(), e.count.to_string()]);
    }
    args
}

/// Terminates the process: the namespace is half set up and unusable.
fn abort_half_configured(err: &NsError) -> ! {
    eprintln!("unsuid: fatal: {err}");
    // SAFETY: exiting without unwinding is the intent.
    unsafe { libc::_exit(2) }
}

/// Moves the calling process into new user and mount namespaces and
/// installs the id maps.
///
/// Must be called while single-threaded. If the namespaces were created but
/// the maps could not be written the process exits with status 2 instead of
/// returning half-configured.
pub fn enter_namespaces(setup: &NamespaceSetup) -> Result<(), NsError> {
    let flags = libc::CLONE_NEWUSER | libc::CLONE_NEWNS;
    if !setup.use_newidmap_helpers {
        let raw = RawMaps::from_entries(&setup.uid_map_entries, &setup.gid_map_entries);
        return match raw.enter_staged(flags) {
            Ok(()) => Ok(()),
            Err((EnterStage::Unshare, e)) => Err(NsError::UsernsDenied(e)),
            Err((stage, source)) => {
                let file = match stage {
                    EnterStage::Setgroups => "/proc/self/setgroups",
                    EnterStage::GidMap => "/proc/self/gid_map",
                    _ => "/proc/self/uid_map",
                };
                abort_half_configured(&NsError::IdMapWriteFailed { file, source })
            }
        };
    }

    let uidmap = setup.newuidmap.clone().ok_or(NsError::IdMapHelpersMissing)?;
    let gidmap = setup.newgidmap.clone().ok_or(NsError::IdMapHelpersMissing)?;
    let parent = std::process::id() as libc::pid_t;
    let uid_args = helper_args(parent, &setup.uid_map_entries);
    let gid_args = helper_args(parent, &setup.gid_map_entries);

    let (go_r, go_w) = nix::unistd::pipe().map_err(|e| NsError::UsernsDenied(e.into()))?;
    let (res_r, res_w) = nix::unistd::pipe().map_err(|e| NsError::UsernsDenied(e.into()))?;
    // SAFETY: the caller guarantees a single-threaded process.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(NsError::UsernsDenied(io::Error::last_os_error()));
    }
    if pid == 0 {
        drop(go_w);
        drop(res_r);
        let mut byte = [0u8; 1];
        let mut go = fs::File::from(go_r);
        if go.read(&mut byte).unwrap_or(0) != 1 {
            unsafe { libc::_exit(3) };
        }
        let mut report = fs::File::from(res_w);
        for (helper, args) in [(&uidmap, &uid_args), (&gidmap, &gid_args)] {
            match Command::new(helper).args(args).stdin(Stdio::null()).output() {
                Ok(out) if out.status.success() => {}
                Ok(out) => {
                    let _ = write!(report, "{}\0", helper.display());
                    let _ = report.write_all(&out.stderr);
                    unsafe { libc::_exit(out.status.code().unwrap_or(1).max(1)) };
                }
                Err(e) => {
                    let _ = write!(report, "{}\0{e}", helper.display());
                    unsafe { libc::_exit(127) };
                }
            }
        }
        unsafe { libc::_exit(0) };
    }
    drop(go_r);
    drop(res_w);

    // SAFETY: unshare has no memory-safety preconditions.
    let unshared = unsafe { libc::unshare(flags) } == 0;
    let unshare_err = io::Error::last_os_error();
    let mut go = fs::File::from(go_w);
    if unshared {
        let _ = go.write_all(b"g");
    }
    drop(go);
    let mut report = Vec::new();
    let _ = fs::File::from(res_r).read_to_end(&mut report);
    let status = sys::wait_pid(pid).unwrap_or(1);
    if !unshared {
        return Err(NsError::UsernsDenied(unshare_err));
    }
    if status != 0 {
        let text = String::from_utf8_lossy(&report);
        let (helper, stderr) = text.split_once('\0').unwrap_or(("newuidmap", &text));
        abort_half_configured(&NsError::HelperIdMapFailed {
            helper: helper.to_string(),
            status,
            stderr: stderr.trim().to_string(),
        });
    }
    Ok(())
}

/// Sets `PR_SET_NO_NEW_PRIVS` for this process and everything it spawns.
pub fn apply_no_new_privs() -> Result<(), NsError> {
    // SAFETY: prctl with integer arguments only.
    let r = unsafe { libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) };
    if r != 0 {
        return Err(NsError::PrctlFailed(io::Error::last_os_error()));
    }
    match no_new_privs_set() {
        Ok(true) => Ok(()),
        Ok(false) => Err(NsError::PrctlFailed(io::Error::other("NoNewPrivs still 0 after prctl"))),
        Err(e) => Err(NsError::PrctlFailed(e)),
    }
}

/// Reads the `NoNewPrivs` field of `/proc/self/status`.
pub fn no_new_privs_set() -> io::Result<bool> {
    let status = fs::read_to_string("/proc/self/status")?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("NoNewPrivs:"))
        .map(|v| v.trim() == "1")
        .ok_or_else(|| io::Error::other("no NoNewPrivs line in /proc/self/status"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PivotOutcome {
    Pivoted,
    /// pivot_root was refused and chroot was used; the old root may still
    /// be reachable through open descriptors.
    ChrootFallback { warning: String },
}

const CHROOT_WARNING: &str = "pivot_root is not supported here, entered the root with chroot instead";

/// Makes `root` (a mount point) the process root. Allocation-free so it can
/// run between fork and exec. Returns true when the chroot fallback was used.
pub(crate) fn pivot_raw(root: &CStr) -> io::Result<bool> {
    // SAFETY: raw syscalls on NUL-terminated strings.
    unsafe {
        if libc::chdir(root.as_ptr()) != 0 {
            return Err(io::Error::last_os_error());
        }
        let dot = c".";
        if libc::syscall(libc::SYS_pivot_root, dot.as_ptr(), dot.as_ptr()) == 0 {
            // The old root is now stacked under "."; detach it.
            if libc::umount2(dot.as_ptr(), libc::MNT_DETACH) != 0 {
                return Err(io::Error::last_os_error());
            }
            if libc::chdir(c"/".as_ptr()) != 0 {
                return Err(io::Error::last_os_error());
            }
            return Ok(false);
        }
        let err = io::Error::last_os_error();
        if err.raw_os_error() != Some(libc::EINVAL) {
            return Err(err);
        }
        if libc::chroot(dot.as_ptr()) != 0 || libc::chdir(c"/".as_ptr()) != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(true)
    }
}

/// Enters `root` via pivot_root, falling back to chroot where pivoting is
/// unsupported. `root` must be a mount point in a private mount namespace.
pub fn pivot_into(root: &Path) -> Result<PivotOutcome, NsError> {
    let failed = |source| NsError::PivotFailed {
        root: root.to_path_buf(),
        source,
    };
    let c = sys::cstring(root).map_err(failed)?;
    match pivot_raw(&c) {
        Ok(false) => Ok(PivotOutcome::Pivoted),
        Ok(true) => {
            warn!("{CHROOT_WARNING}");
            Ok(PivotOutcome::ChrootFallback {
                warning: CHROOT_WARNING.to_string(),
            })
        }
        Err(e) => Err(failed(e)),
    }
}

/// Variables always copied from the host environment when set.
pub const ENV_ALLOWLIST: [&str; 3] = ["PATH", "HOME", "TERM"];
const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

/// Builds the container environment: the allowlist plus `passthrough`.
pub fn container_env(host: &EnvMap, passthrough: &[String]) -> EnvMap {
    let mut env = EnvMap::new();
    for name in ENV_ALLOWLIST.iter().copied().chain(passthrough.iter().map(String::as_str)) {
        if let Some(v) = host.get(name) {
            env.insert(name.to_string(), v.clone());
        }
    }
    env.entry("PATH".to_string()).or_insert_with(|| DEFAULT_PATH.to_string());
    env
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecSpec {
    pub argv: Vec<String>,
    pub working_dir: PathBuf,
    pub env: EnvMap,
    pub fakeroot_wrap: Option<PathBuf>,
    /// Host file fed to the command's stdin; inherited when `None`.
    pub stdin: Option<PathBuf>,
    /// Host file that receives the command's stderr; inherited when `None`.
    pub stderr_to: Option<PathBuf>,
}

impl ExecSpec {
    pub fn new(argv: Vec<String>) -> Self {
        ExecSpec {
            argv,
            working_dir: "/".into(),
            env: EnvMap::new(),
            fakeroot_wrap: None,
            stdin: None,
            stderr_to: None,
        }
    }

    /// The argument vector actually executed.
    pub fn final_argv(&self) -> Vec<String> {
        let mut argv = Vec::with_capacity(self.argv.len() + 1);
        if let Some(w) = &self.fakeroot_wrap {
            argv.push(w.to_string_lossy().into_owned());
        }
        argv.extend(self.argv.iter().cloned());
        argv
    }

    fn command(&self) -> Result<Command, NsError> {
        let argv = self.final_argv();
        let Some(program) = argv.first() else {
            return Err(NsError::CommandNotFound(String::new()));
        };
        let mut cmd = Command::new(program);
        cmd.args(&argv[1..]).env_clear().envs(&self.env);
        let exec_failed = |source| NsError::ExecFailed {
            cmd: program.clone(),
            source,
        };
        if let Some(p) = &self.stdin {
            cmd.stdin(fs::File::open(p).map_err(exec_failed)?);
        }
        if let Some(p) = &self.stderr_to {
            let f = fs::OpenOptions::new().create(true).append(true).open(p).map_err(exec_failed)?;
            cmd.stderr(f);
        }
        Ok(cmd)
    }
}

fn wait_command(mut cmd: Command, name: &str) -> Result<i32, NsError> {
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(NsError::CommandNotFound(name.to_string())),
        Err(e) => {
            return Err(NsError::ExecFailed {
                cmd: name.to_string(),
                source: e,
            })
        }
    };
    let status = child.wait().map_err(|e| NsError::ExecFailed {
        cmd: name.to_string(),
        source: e,
    })?;
    Ok(status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0)))
}

/// Runs the command in the current root and returns its exit status.
pub fn exec_in_container(spec: &ExecSpec) -> Result<i32, NsError> {
    let mut cmd = spec.command()?;
    let wd = if spec.working_dir.is_dir() {
        spec.working_dir.clone()
    } else {
        PathBuf::from("/")
    };
    cmd.current_dir(wd);
    let name = spec.final_argv()[0].clone();
    wait_command(cmd, &name)
}

/// Writes to stderr without allocating.
fn raw_stderr(parts: &[&[u8]]) {
    for p in parts {
        // SAFETY: writing a borrowed buffer to fd 2.
        unsafe { libc::write(2, p.as_ptr().cast(), p.len()) };
    }
}

/// Spawns the command inside `root`: the child gets its own mount namespace,
/// pivots into `root` there and execs, so the caller's view (and any FUSE
/// helpers sharing it) is untouched. Returns the command's exit status.
pub fn run_in_root(spec: &ExecSpec, root: &Path) -> Result<i32, NsError> {
    let mut cmd = spec.command()?;
    let name = spec.final_argv()[0].clone();
    let croot = sys::cstring(root).map_err(|source| NsError::PivotFailed {
        root: root.to_path_buf(),
        source,
    })?;
    let inside_wd = root.join(spec.working_dir.strip_prefix("/").unwrap_or(&spec.working_dir));
    let wd = if inside_wd.is_dir() {
        CString::new(spec.working_dir.as_os_str().as_bytes()).unwrap_or_else(|_| c"/".into())
    } else {
        c"/".into()
    };
    debug!("running {:?} in {} (cwd {:?})", spec.final_argv(), root.display(), wd);
    // SAFETY: the closure only issues raw syscalls on prepared buffers.
    unsafe {
        cmd.pre_exec(move || {
            if libc::unshare(libc::CLONE_NEWNS) != 0 {
                return Err(io::Error::last_os_error());
            }
            if libc::mount(
                c"none".as_ptr(),
                c"/".as_ptr(),
                std::ptr::null(),
                libc::MS_REC | libc::MS_PRIVATE,
                std::ptr::null(),
            ) != 0
            {
                return Err(io::Error::last_os_error());
            }
            // pivot_root needs the new root to be a mount point.
            if libc::mount(
                croot.as_ptr(),
                croot.as_ptr(),
                std::ptr::null(),
                libc::MS_BIND | libc::MS_REC,
                std::ptr::null(),
            ) != 0
            {
                return Err(io::Error::last_os_error());
            }
            match pivot_raw(&croot) {
                Ok(false) => {}
                Ok(true) => raw_stderr(&[b"unsuid: warning: ", CHROOT_WARNING.as_bytes(), b"\n"]),
                Err(e) => {
                    raw_stderr(&[b"unsuid: entering the container root failed\n"]);
                    return Err(e);
                }
            }
            if libc::chdir(wd.as_ptr()) != 0 {
                libc::chdir(c"/".as_ptr());
            }
            Ok(())
        });
    }
    wait_command(cmd, &name)
}
