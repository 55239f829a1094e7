//! Building images without privileges: run an optional setup script in a
//! sandbox directory as emulated root, pack it with mksquashfs from inside
//! the same user namespace, and wrap the result.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, Read};
use std::os::unix::fs::{FileTypeExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use log::{info, warn};
use thiserror::Error;

use crate::hostprobe::{Helper, HelperSearch, HostProfile};
use crate::imagefmt::{self, ImageError, ImageInfo, PartitionKind, PartitionRole, PartitionSource};
use crate::mounter;
use crate::nsexec::{self, ExecSpec};
use crate::planner::{self, IdentityPlan, PlanError, RuntimeRequest, FAKEROOT_CONTAINER_PATH};
use crate::runtime::{self, RuntimeError};
use crate::EnvMap;

/// Smallest overlay image accepted.
pub const MIN_OVERLAY_SIZE: u64 = 1 << 20;

const SCRIPT_STAGE: &str = "setup-script";
const PACK_STAGE: &str = "mksquashfs";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    RawSquashfs,
    Cif,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildRequest {
    pub sandbox: PathBuf,
    pub output: PathBuf,
    pub output_kind: OutputKind,
    pub setup_script: Option<PathBuf>,
    /// Adds an ext overlay partition of this size (CIF output only).
    pub overlay_size: Option<u64>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid build request: {0}")]
    BadRequest(String),
    #[error("{0} is not installed")]
    HelperMissing(String),
    #[error(transparent)]
    Identity(#[from] PlanError),
    #[error("setup script exited with status {code}: {stderr}")]
    SetupScriptFailed { code: i32, stderr: String },
    #[error("packaging failed: {0}")]
    PackagingFailed(String),
    #[error("overlay size {size} is below the minimum of {MIN_OVERLAY_SIZE} bytes")]
    SizeTooSmall { size: u64 },
    #[error("formatting the overlay failed: {0}")]
    FormatFailed(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> BuildError + '_ {
    move |source| BuildError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl BuildRequest {
    pub fn validate(&self) -> Result<(), BuildError> {
        if !self.sandbox.is_dir() {
            return Err(BuildError::BadRequest(format!("{} is not a directory", self.sandbox.display())));
        }
        if self.overlay_size.is_some() && self.output_kind != OutputKind::Cif {
            return Err(BuildError::BadRequest("an overlay partition needs CIF output".into()));
        }
        if let Some(size) = self.overlay_size {
            if size < MIN_OVERLAY_SIZE {
                return Err(BuildError::SizeTooSmall { size });
            }
        }
        if let Some(script) = &self.setup_script {
            if !script.is_file() {
                return Err(BuildError::BadRequest(format!("setup script {} not found", script.display())));
            }
        }
        let parent = output_parent(&self.output);
        if !parent.is_dir() {
            return Err(BuildError::BadRequest(format!("{} does not exist", parent.display())));
        }
        Ok(())
    }
}

fn output_parent(output: &Path) -> &Path {
    match output.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// The identity a build runs under: the fakeroot lattice, always.
pub fn build_identity(profile: &HostProfile) -> Result<IdentityPlan, PlanError> {
    let mut request = RuntimeRequest::new("");
    request.build_mode = true;
    planner::select_identity(profile, &request)
}

/// Device nodes under `root`, relative to it. They cannot be recreated in a
/// user namespace, so they are left out of the image.
pub fn find_device_nodes(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(root.join(&rel))? {
            let entry = entry?;
            let ft = entry.file_type()?;
            let path = rel.join(entry.file_name());
            if ft.is_dir() {
                stack.push(path);
            } else if ft.is_char_device() || ft.is_block_device() {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// `mksquashfs` arguments for packing `sandbox` into `payload`.
pub fn mksquashfs_args(sandbox: &Path, payload: &Path, exclude: &[PathBuf]) -> Vec<OsString> {
    let mut args: Vec<OsString> = vec![
        sandbox.into(),
        payload.into(),
        "-noappend".into(),
        "-no-xattrs".into(),
    ];
    if !exclude.is_empty() {
        args.push("-e".into());
        args.extend(exclude.iter().map(OsString::from));
    }
    args
}

/// Temporary mounts made inside the sandbox for the setup script.
struct SandboxMounts {
    mounted: Vec<PathBuf>,
    created: Vec<PathBuf>,
}

impl SandboxMounts {
    fn prepare(sandbox: &Path, fakeroot: Option<&Path>) -> Result<Self, RuntimeError> {
        let mut s = SandboxMounts {
            mounted: Vec::new(),
            created: Vec::new(),
        };
        let fail = |e: mounter::MountError| RuntimeError::Mount(e);
        for (src, name) in [("/proc", "proc"), ("/dev", "dev")] {
            let target = sandbox.join(name);
            s.make(&target, true)?;
            mounter::bind_mount(Path::new(src), &target, false).map_err(fail)?;
            s.mounted.push(target);
        }
        let tmp = sandbox.join("tmp");
        s.make(&tmp, true)?;
        mount_tmpfs(&tmp)?;
        s.mounted.push(tmp);
        if let Some(fakeroot) = fakeroot {
            let target = sandbox.join(FAKEROOT_CONTAINER_PATH.trim_start_matches('/'));
            s.make(&target, false)?;
            mounter::bind_mount(fakeroot, &target, true).map_err(fail)?;
            s.mounted.push(target);
        }
        Ok(s)
    }

    /// Creates `path` (and missing parents), remembering what was new.
    fn make(&mut self, path: &Path, dir: bool) -> Result<(), RuntimeError> {
        let mut missing = Vec::new();
        let mut p = path;
        while !p.exists() {
            missing.push(p.to_path_buf());
            match p.parent() {
                Some(parent) => p = parent,
                None => break,
            }
        }
        for m in missing.iter().rev() {
            let r = if m == path && !dir {
                File::create(m).map(drop)
            } else {
                fs::create_dir(m)
            };
            r.map_err(|source| RuntimeError::Io {
                context: format!("creating {}", m.display()),
                source,
            })?;
            self.created.push(m.clone());
        }
        Ok(())
    }

    /// Detaches the mounts and removes what `make` created, deepest first.
    fn release(&mut self) {
        for m in self.mounted.drain(..).rev() {
            if let Ok(c) = std::ffi::CString::new(m.as_os_str().as_encoded_bytes()) {
                // SAFETY: NUL-terminated path.
                unsafe { libc::umount2(c.as_ptr(), libc::MNT_DETACH) };
            }
        }
        for c in self.created.drain(..).rev() {
            let _ = fs::remove_dir(&c).or_else(|_| fs::remove_file(&c));
        }
    }
}

fn mount_tmpfs(target: &Path) -> Result<(), RuntimeError> {
    let c = std::ffi::CString::new(target.as_os_str().as_encoded_bytes()).map_err(|e| RuntimeError::Io {
        context: target.display().to_string(),
        source: e.into(),
    })?;
    // SAFETY: NUL-terminated arguments.
    let r = unsafe {
        libc::mount(
            c"tmpfs".as_ptr(),
            c.as_ptr(),
            c"tmpfs".as_ptr(),
            libc::MS_NOSUID | libc::MS_NODEV,
            std::ptr::null(),
        )
    };
    if r != 0 {
        return Err(RuntimeError::Io {
            context: format!("mounting tmpfs on {}", target.display()),
            source: io::Error::last_os_error(),
        });
    }
    Ok(())
}

fn stage_error(stage: &str, code: i32, message: String) -> RuntimeError {
    RuntimeError::Failed {
        stage: stage.to_string(),
        code,
        message,
    }
}

struct BuildJob<'a> {
    identity: &'a IdentityPlan,
    sandbox: &'a Path,
    script: Option<&'a Path>,
    script_stderr: &'a Path,
    mksquashfs: &'a Path,
    payload: &'a Path,
    exclude: &'a [PathBuf],
    env: EnvMap,
}

/// Runs in the forked supervisor: namespaces, setup script, mksquashfs.
fn run_build_job(job: &BuildJob<'_>) -> Result<i32, RuntimeError> {
    runtime::enter_container_context(job.identity)?;
    if let Some(script) = job.script {
        let fakeroot = job.identity.fakeroot_cmd.as_deref().filter(|_| {
            job.identity.mode == planner::IdentityMode::RootMappedNsPlusFakerootCmd
        });
        let mut mounts = SandboxMounts::prepare(job.sandbox, fakeroot)?;
        let mut spec = ExecSpec::new(vec!["/bin/sh".into(), "-s".into()]);
        spec.env = job.env.clone();
        spec.stdin = Some(script.to_path_buf());
        spec.stderr_to = Some(job.script_stderr.to_path_buf());
        if fakeroot.is_some() {
            spec.fakeroot_wrap = Some(FAKEROOT_CONTAINER_PATH.into());
        }
        let status = nsexec::run_in_root(&spec, job.sandbox);
        mounts.release();
        match status {
            Ok(0) => {}
            Ok(code) => return Err(stage_error(SCRIPT_STAGE, code, format!("setup script exited with {code}"))),
            Err(e) => return Err(stage_error(SCRIPT_STAGE, 127, e.to_string())),
        }
    }
    let out = Command::new(job.mksquashfs)
        .args(mksquashfs_args(job.sandbox, job.payload, job.exclude))
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .output()
        .map_err(|e| stage_error(PACK_STAGE, 1, e.to_string()))?;
    if !out.status.success() {
        let msg = String::from_utf8_lossy(&out.stderr).trim().to_string();
        return Err(stage_error(PACK_STAGE, out.status.code().unwrap_or(1), msg));
    }
    Ok(0)
}

/// Builds an image from `request.sandbox`. Nothing is written at
/// `request.output` unless every step succeeds.
///
/// Forks a supervisor that enters user namespaces, so call it while the
/// process is single-threaded.
pub fn build_image(request: &BuildRequest, profile: &HostProfile, host_env: &EnvMap) -> Result<ImageInfo, BuildError> {
    request.validate()?;
    let mksquashfs = profile
        .helper(Helper::Mksquashfs)
        .ok_or_else(|| BuildError::HelperMissing("mksquashfs".into()))?
        .to_path_buf();
    let identity = build_identity(profile)?;
    for msg in &identity.info_messages {
        info!("{msg}");
    }

    let work = tempfile::Builder::new()
        .prefix(".unsuid-build-")
        .tempdir_in(output_parent(&request.output))
        .map_err(io_at(output_parent(&request.output)))?;
    let payload = work.path().join("rootfs.sqfs");
    let script_stderr = work.path().join("script.stderr");
    let sandbox = fs::canonicalize(&request.sandbox).map_err(io_at(&request.sandbox))?;
    let exclude = find_device_nodes(&sandbox).map_err(io_at(&sandbox))?;
    for d in &exclude {
        warn!("skipping device node {}", d.display());
    }

    let job = BuildJob {
        identity: &identity,
        sandbox: &sandbox,
        script: request.setup_script.as_deref(),
        script_stderr: &script_stderr,
        mksquashfs: &mksquashfs,
        payload: &payload,
        exclude: &exclude,
        env: nsexec::container_env(host_env, &[]),
    };
    match runtime::supervise(|| run_build_job(&job)) {
        Ok(0) => {}
        Ok(code) => return Err(BuildError::PackagingFailed(format!("supervisor exited with {code}"))),
        Err(RuntimeError::Failed { stage, code, message }) if stage == SCRIPT_STAGE => {
            let mut stderr = String::new();
            if let Ok(mut f) = File::open(&script_stderr) {
                let _ = f.read_to_string(&mut stderr);
            }
            if stderr.trim().is_empty() {
                stderr = message;
            }
            return Err(BuildError::SetupScriptFailed {
                code,
                stderr: stderr.trim().to_string(),
            });
        }
        Err(RuntimeError::Failed { stage, message, .. }) if stage == PACK_STAGE => {
            return Err(BuildError::PackagingFailed(message));
        }
        Err(e) => return Err(e.into()),
    }
    if let Ok(text) = fs::read_to_string(&script_stderr) {
        if !text.is_empty() {
            eprint!("{text}");
        }
    }

    let staged = work.path().join("image");
    match request.output_kind {
        OutputKind::RawSquashfs => fs::rename(&payload, &staged).map_err(io_at(&staged))?,
        OutputKind::Cif => {
            let mut parts = vec![PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &payload)];
            if let Some(size) = request.overlay_size {
                let overlay = work.path().join("overlay.ext3");
                create_overlay_image(&overlay, size, &HelperSearch::from_env(host_env))?;
                parts.push(PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, overlay));
            }
            imagefmt::write_cif(&parts, &staged)?;
        }
    }
    fs::set_permissions(&staged, fs::Permissions::from_mode(0o644)).map_err(io_at(&staged))?;
    fs::rename(&staged, &request.output).map_err(io_at(&request.output))?;
    Ok(imagefmt::detect_image(&request.output)?)
}

/// Locates an ext3 formatter: `mkfs.ext3`, else `mke2fs`.
pub fn find_ext_formatter(search: &HelperSearch) -> Option<(PathBuf, Vec<OsString>)> {
    if let Some(p) = search.find("mkfs.ext3") {
        return Some((p, vec!["-q".into(), "-F".into()]));
    }
    search
        .find("mke2fs")
        .map(|p| (p, vec!["-q".into(), "-F".into(), "-t".into(), "ext3".into()]))
}

/// Creates a sparse file of `size` bytes at `path` and formats it as ext3.
/// On failure no file is left behind.
pub fn create_overlay_image(path: &Path, size: u64, search: &HelperSearch) -> Result<(), BuildError> {
    if size < MIN_OVERLAY_SIZE {
        return Err(BuildError::SizeTooSmall { size });
    }
    let (mkfs, mut args) = find_ext_formatter(search).ok_or_else(|| BuildError::HelperMissing("mkfs.ext3".into()))?;
    if path.exists() {
        return Err(BuildError::BadRequest(format!("{} already exists", path.display())));
    }
    let file = File::create(path).map_err(io_at(path))?;
    let formatted = file
        .set_len(size)
        .map_err(|e| BuildError::FormatFailed(e.to_string()))
        .and_then(|()| {
            args.push(path.into());
            let out = Command::new(&mkfs)
                .args(&args)
                .stdin(Stdio::null())
                .output()
                .map_err(|e| BuildError::FormatFailed(format!("{}: {e}", mkfs.display())))?;
            if out.status.success() {
                Ok(())
            } else {
                Err(BuildError::FormatFailed(String::from_utf8_lossy(&out.stderr).trim().to_string()))
            }
        });
    if formatted.is_err() {
        let _ = fs::remove_file(path);
    }
    formatted
}
