//! Command-line front end: `probe`, `plan`, `exec`, `build` and
//! `overlay-create`.
//!
//! `plan` never touches the system when given `--profile`, which makes the
//! whole decision logic testable on any host. Informational messages go to
//! stderr so stdout belongs to the container.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::debug;

use crate::build::{self, BuildRequest, OutputKind};
use crate::hostprobe::{self, HelperSearch, HostProfile, ProbeOptions};
use crate::imagefmt::{self, ImageInfo};
use crate::planner::{self, BindSpec, OverlayPath, PlanFormat, RuntimeRequest};
use crate::runtime::{self, ContainerRun};
use crate::EnvMap;

/// Exit status for planner and validation errors.
pub const EXIT_PLAN: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "unsuid", version, about = "Run and build single-file container images without setuid root")]
pub struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report what this host supports.
    Probe {
        #[arg(long)]
        json: bool,
    },
    /// Print the identity and mount plan for a run without executing it.
    Plan {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        json: bool,
    },
    /// Run a command in an image.
    Exec {
        #[command(flatten)]
        run: RunFlags,
        image: PathBuf,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Pack a sandbox directory into an image, as emulated root.
    Build {
        /// Host profile to use instead of probing (JSON, as printed by `probe --json`).
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Shell script run in the sandbox before packing.
        #[arg(long)]
        setup: Option<PathBuf>,
        /// Output format; defaults to raw squashfs for .sqfs/.squashfs names, CIF otherwise.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Add an ext3 overlay partition of this many bytes.
        #[arg(long)]
        overlay_size: Option<u64>,
        /// Print the identity plan and stop.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        json: bool,
        output: PathBuf,
        sandbox: PathBuf,
    },
    /// Create an ext3 overlay image file.
    OverlayCreate {
        #[arg(long)]
        size: u64,
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Raw,
    Cif,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Host profile to use instead of probing (JSON, as printed by `probe --json`).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Run as emulated root.
    #[arg(long)]
    pub fakeroot: bool,
    /// Make the root writable through an overlay.
    #[arg(long)]
    pub writable: bool,
    /// Writable root with a throwaway upper layer.
    #[arg(long)]
    pub writable_tmpfs: bool,
    /// Overlay directory or ext image, lowest first; the last one takes writes.
    #[arg(long = "overlay", value_name = "PATH")]
    pub overlays: Vec<PathBuf>,
    /// SRC[:DST[:ro|rw]]
    #[arg(long = "bind", value_name = "SPEC")]
    pub binds: Vec<BindSpec>,
    /// Use the read-only underlay root.
    #[arg(long)]
    pub underlay: bool,
    /// Plan as a build would (implies root emulation).
    #[arg(long)]
    pub build: bool,
    /// Pass a host environment variable into the container.
    #[arg(long = "env", value_name = "NAME")]
    pub env: Vec<String>,
    /// Do not bind the home directory.
    #[arg(long)]
    pub no_home: bool,
}

impl RunFlags {
    fn request(&self, image: &Path, command: Vec<String>, env: &EnvMap) -> Result<RuntimeRequest, String> {
        let mut r = RuntimeRequest::new(image);
        r.command = command;
        r.writable = self.writable;
        r.writable_tmpfs = self.writable_tmpfs;
        r.fakeroot_requested = self.fakeroot;
        r.build_mode = self.build;
        r.force_underlay = self.underlay;
        r.binds = self.binds.clone();
        r.env_passthrough = self.env.clone();
        for p in &self.overlays {
            r.overlay_paths.push(overlay_path(p)?);
        }
        if !self.no_home {
            // A home that coincides with another mount is already visible.
            let taken = |h: &Path| {
                ["/", "/proc", "/sys", "/dev", "/tmp"].iter().any(|s| h == Path::new(s))
                    || r.binds.iter().any(|b| Path::new(&b.destination) == h)
            };
            r.home = env
                .get("HOME")
                .map(PathBuf::from)
                .filter(|h| h.is_absolute() && h.is_dir() && !taken(h));
        }
        Ok(r)
    }
}

/// Directories are overlays as they are; files must be ext images.
fn overlay_path(p: &Path) -> Result<OverlayPath, String> {
    let meta = fs::metadata(p).map_err(|e| format!("overlay {}: {e}", p.display()))?;
    if meta.is_dir() {
        return Ok(OverlayPath::directory(p));
    }
    match imagefmt::detect_image(p) {
        Ok(info) if info.kind == imagefmt::ImageKind::RawExtfs => Ok(OverlayPath::ext_image(p, meta.len())),
        Ok(_) => Err(format!("overlay {} is not an ext image", p.display())),
        Err(e) => Err(format!("overlay {}: {e}", p.display())),
    }
}

fn load_profile(path: Option<&Path>, env: &EnvMap) -> Result<HostProfile, String> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("profile {}: {e}", p.display()))?;
            HostProfile::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
        None => Ok(hostprobe::probe_host(env, &ProbeOptions::default())),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .format_timestamp(None)
        .try_init();
}

/// Entry point for the binary.
pub fn run_cli(args: Vec<String>, env: &EnvMap) -> i32 {
    run_cli_with(args, env, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing to `out` and `err`. Returns the process exit status.
pub fn run_cli_with(args: Vec<String>, env: &EnvMap, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PLAN } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command, env, out, err) {
        Ok(code) => code,
        Err(Failure(code, msg)) => {
            let _ = writeln!(err, "unsuid: error: {msg}");
            code
        }
    }
}

struct Failure(i32, String);

fn plan_err(msg: impl ToString) -> Failure {
    Failure(EXIT_PLAN, msg.to_string())
}

fn emit_info(err: &mut dyn Write, messages: &[String]) {
    for m in messages {
        let _ = writeln!(err, "{m}");
    }
}

fn dispatch(command: Command, env: &EnvMap, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Probe { json } => {
            let profile = hostprobe::probe_host(env, &ProbeOptions::default());
            let text = if json { profile.to_json() } else { profile.render_human() };
            let _ = out.write_all(text.as_bytes());
            Ok(0)
        }
        Command::Plan { image, run, json } => {
            let profile = load_profile(run.profile.as_deref(), env).map_err(plan_err)?;
            let request = run.request(&image, Vec::new(), env).map_err(plan_err)?;
            // Identity problems are reported even when the image is unreadable.
            planner::select_identity(&profile, &request).map_err(plan_err)?;
            let info = image_info(&image)?;
            let (identity, mounts) = planner::plan(&profile, &request, &info).map_err(plan_err)?;
            emit_info(err, &identity.info_messages);
            let format = if json { PlanFormat::Json } else { PlanFormat::Human };
            let _ = out.write_all(planner::render_plan(&identity, &mounts, format).as_bytes());
            Ok(0)
        }
        Command::Exec { run, image, command } => {
            let profile = load_profile(run.profile.as_deref(), env).map_err(plan_err)?;
            let request = run.request(&image, command.clone(), env).map_err(plan_err)?;
            let info = image_info(&image)?;
            let (identity, mounts) = planner::plan(&profile, &request, &info).map_err(plan_err)?;
            emit_info(err, &identity.info_messages);
            let _ = err.flush();
            debug!("plan:\n{}", planner::render_plan(&identity, &mounts, PlanFormat::Human));
            let exec = runtime::exec_spec_for(&identity, command, env, &request.env_passthrough);
            let run = ContainerRun {
                identity,
                mounts,
                exec,
                scratch_base: std::env::temp_dir(),
            };
            let _ = out.flush();
            runtime::run_container(&run).map_err(|e| Failure(e.exit_code(), e.to_string()))
        }
        Command::Build {
            profile,
            setup,
            format,
            overlay_size,
            dry_run,
            json,
            output,
            sandbox,
        } => {
            let profile = load_profile(profile.as_deref(), env).map_err(plan_err)?;
            let identity = build::build_identity(&profile).map_err(plan_err)?;
            emit_info(err, &identity.info_messages);
            if dry_run {
                let format = if json { PlanFormat::Json } else { PlanFormat::Human };
                let text = planner::render_plan(&identity, &Default::default(), format);
                let _ = out.write_all(text.as_bytes());
                return Ok(0);
            }
            let output_kind = match format {
                Some(FormatArg::Raw) => OutputKind::RawSquashfs,
                Some(FormatArg::Cif) => OutputKind::Cif,
                None => default_output_kind(&output),
            };
            let request = BuildRequest {
                sandbox,
                output,
                output_kind,
                setup_script: setup,
                overlay_size,
            };
            let info = build::build_image(&request, &profile, env).map_err(build_failure)?;
            let _ = writeln!(out, "built {} ({:?}, {} bytes)", request.output.display(), info.kind, info.file_length);
            Ok(0)
        }
        Command::OverlayCreate { size, path } => {
            build::create_overlay_image(&path, size, &HelperSearch::from_env(env)).map_err(build_failure)?;
            Ok(0)
        }
    }
}

fn build_failure(e: build::BuildError) -> Failure {
    use build::BuildError as B;
    let code = match &e {
        B::SetupScriptFailed { .. } | B::Runtime(_) => runtime::SETUP_FAILURE_CODE,
        _ => EXIT_PLAN,
    };
    Failure(code, e.to_string())
}

/// `.sqfs` and `.squashfs` names get raw squashfs, anything else CIF.
pub fn default_output_kind(output: &Path) -> OutputKind {
    match output.extension().and_then(|e| e.to_str()) {
        Some("sqfs" | "squashfs") => OutputKind::RawSquashfs,
        _ => OutputKind::Cif,
    }
}

fn image_info(image: &Path) -> Result<ImageInfo, Failure> {
    imagefmt::detect_image(image).map_err(plan_err)
}

