//! Running a planned container: a forked supervisor enters the namespaces,
//! assembles the root, runs the command and tears everything down.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, warn};
use thiserror::Error;

use crate::mounter::{self, MountError};
use crate::nsexec::{self, ExecSpec, NamespaceSetup, NsError};
use crate::planner::{IdentityMode, IdentityPlan, MountPlan, FAKEROOT_CONTAINER_PATH};
use crate::sys;
use crate::EnvMap;

/// Exit status used when namespace or mount setup fails.
pub const SETUP_FAILURE_CODE: i32 = 2;
/// Exit status for a command that does not exist in the container.
pub const NOT_FOUND_CODE: i32 = 127;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Namespace(#[from] NsError),
    #[error(transparent)]
    Mount(#[from] MountError),
    /// A failure inside the supervisor process, tagged with the stage that
    /// failed.
    #[error("{message}")]
    Failed { stage: String, code: i32, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl RuntimeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Namespace(NsError::CommandNotFound(_)) => NOT_FOUND_CODE,
            RuntimeError::Failed { code, .. } => *code,
            _ => SETUP_FAILURE_CODE,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> RuntimeError {
        let context = context.into();
        move |source| RuntimeError::Io { context, source }
    }
}

/// The argument vector, working directory and environment for the
/// container command under `identity`.
pub fn exec_spec_for(identity: &IdentityPlan, argv: Vec<String>, host_env: &EnvMap, passthrough: &[String]) -> ExecSpec {
    let mut spec = ExecSpec::new(argv);
    spec.env = nsexec::container_env(host_env, passthrough);
    if let Some(home) = host_env.get("HOME") {
        spec.working_dir = PathBuf::from(home);
    }
    if identity.mode == IdentityMode::RootMappedNsPlusFakerootCmd && identity.fakeroot_cmd.is_some() {
        spec.fakeroot_wrap = Some(PathBuf::from(FAKEROOT_CONTAINER_PATH));
    }
    spec
}

/// Everything needed to run one container.
#[derive(Debug, Clone)]
pub struct ContainerRun {
    pub identity: IdentityPlan,
    pub mounts: MountPlan,
    pub exec: ExecSpec,
    /// Directory under which the per-run scratch tree is created.
    pub scratch_base: PathBuf,
}

/// Runs `f` in a forked child and returns its exit status. A child that
/// fails before producing a status writes a message to the report pipe,
/// which comes back as [`RuntimeError::Failed`].
///
/// The caller must be single-threaded: the child creates user namespaces.
pub fn supervise<F>(f: F) -> Result<i32, RuntimeError>
where
    F: FnOnce() -> Result<i32, RuntimeError>,
{
    let (r, w) = nix::unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC).map_err(|e| RuntimeError::io("pipe")(e.into()))?;
    let mut report = File::from(w);
    let code = sys::fork_and_wait(move || match f() {
        Ok(code) => code,
        Err(e) => {
            let stage = match &e {
                RuntimeError::Failed { stage, .. } => stage.as_str(),
                RuntimeError::Namespace(_) => "namespace",
                RuntimeError::Mount(_) => "mount",
                RuntimeError::Io { .. } => "io",
            };
            let _ = write!(report, "{}\n{stage}\n{e}", e.exit_code());
            e.exit_code()
        }
    })
    .map_err(RuntimeError::io("fork"))?;
    let mut text = String::new();
    let _ = File::from(r).read_to_string(&mut text);
    let mut parts = text.splitn(3, '\n');
    if let (Some(code_str), Some(stage), Some(message)) = (parts.next(), parts.next(), parts.next()) {
        return Err(RuntimeError::Failed {
            stage: stage.to_string(),
            code: code_str.parse().unwrap_or(code),
            message: message.to_string(),
        });
    }
    Ok(code)
}

/// Makes every mount in the current namespace private.
pub fn make_mounts_private() -> io::Result<()> {
    // SAFETY: constant arguments.
    let r = unsafe {
        libc::mount(
            c"none".as_ptr(),
            c"/".as_ptr(),
            std::ptr::null(),
            libc::MS_REC | libc::MS_PRIVATE,
            std::ptr::null(),
        )
    };
    if r != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Enters the namespaces for `identity`, sets no-new-privs and makes the
/// mount tree private. Call in a single-threaded child.
pub fn enter_container_context(identity: &IdentityPlan) -> Result<(), RuntimeError> {
    let setup = NamespaceSetup::from_identity(identity)?;
    nsexec::enter_namespaces(&setup)?;
    nsexec::apply_no_new_privs()?;
    make_mounts_private().map_err(RuntimeError::io("making mounts private"))?;
    Ok(())
}

/// Body of the supervisor: namespaces, mounts, command, teardown.
fn run_supervised(run: &ContainerRun, scratch: &Path) -> Result<i32, RuntimeError> {
    enter_container_context(&run.identity)?;
    let mut session = mounter::execute_plan(&run.mounts, scratch, None)?;
    debug!("no_new_privs before exec: {:?}", nsexec::no_new_privs_set());
    let result = nsexec::run_in_root(&run.exec, &session.root);
    let report = session.teardown();
    if !report.is_clean() {
        warn!("teardown: {report:?}");
    }
    Ok(result?)
}

/// Runs the container and returns the command's exit status.
pub fn run_container(run: &ContainerRun) -> Result<i32, RuntimeError> {
    let scratch_dir = tempfile::Builder::new()
        .prefix("unsuid-session-")
        .tempdir_in(&run.scratch_base)
        .map_err(RuntimeError::io(format!("creating scratch under {}", run.scratch_base.display())))?;
    let scratch = scratch_dir.path().to_path_buf();
    supervise(|| run_supervised(run, &scratch))
}
