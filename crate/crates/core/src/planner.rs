//! Pure decision logic: picks the root-emulation mode and the way the
//! container root is assembled, and lays both out as a serializable plan.
//!
//! Nothing in here touches the filesystem or spawns processes; every input
//! arrives through [`HostProfile`], [`RuntimeRequest`] and [`ImageInfo`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hostprobe::{Helper, HostProfile};
use crate::idmap::IdMapEntry;
use crate::imagefmt::{ImageInfo, PartitionDescriptor, PartitionKind, PartitionRole};

/// Where a fakeroot command is made visible inside the container.
pub const FAKEROOT_CONTAINER_PATH: &str = "/.unsuid/bin/fakeroot";

pub const INFO_ROOT_MAPPED: &str =
    "INFO: using a root-mapped user namespace: only the invoking user id is mapped to root";
pub const INFO_ROOT_MAPPED_FAKEROOT: &str =
    "INFO: using the fakeroot command combined with a root-mapped user namespace";
pub const INFO_FAKEROOT_ONLY: &str =
    "INFO: user namespaces unavailable: running the fakeroot command by itself";
pub const NOTE_SUBID_NESTED: &str = "INFO: subordinate id mapping chosen although already running in a root-mapped \
     namespace; it may fail if the outer container disallows elevating privileges";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("no root emulation method available: {}", .failed.join("; "))]
    NoRootEmulationAvailable { failed: Vec<String> },
    #[error("writable root requested but neither unprivileged overlayfs nor fuse-overlayfs is usable (re-run `probe` to refresh the host profile)")]
    WritableButNoOverlayBackend,
    #[error("--writable needs an overlay: pass --overlay, use an image with an overlay partition, or add --writable-tmpfs")]
    WritableWithoutOverlaySource,
    #[error("--underlay cannot be combined with writable or overlay options")]
    UnderlayWithOverlay,
    #[error("two binds target {0}")]
    BindDestinationConflict(String),
    #[error("bind destination {0:?} is not absolute")]
    RelativeDestination(String),
    #[error("image has no rootfs partition")]
    MissingRootfs,
    #[error("required helper {0} not found")]
    HelperMissing(Helper),
    #[error("invalid bind specification {0:?} (expected SRC[:DST[:ro|rw]])")]
    BadBindSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindSpec {
    pub source: PathBuf,
    pub destination: String,
    pub readonly: bool,
}

impl BindSpec {
    pub fn new(source: impl Into<PathBuf>, destination: impl Into<String>, readonly: bool) -> Self {
        BindSpec {
            source: source.into(),
            destination: destination.into(),
            readonly,
        }
    }
}

impl FromStr for BindSpec {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlanError::BadBindSpec(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        let (src, dst, ro) = match parts.as_slice() {
            [src] => (*src, *src, false),
            [src, dst] => (*src, *dst, false),
            [src, dst, "ro"] => (*src, *dst, true),
            [src, dst, "rw"] => (*src, *dst, false),
            _ => return Err(bad()),
        };
        if src.is_empty() || dst.is_empty() {
            return Err(bad());
        }
        Ok(BindSpec::new(src, dst, ro))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayKind {
    Directory,
    ExtImage,
}

/// An `--overlay` argument, classified by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayPath {
    pub path: PathBuf,
    pub kind: OverlayKind,
    /// File length for ext images.
    pub size: u64,
}

impl OverlayPath {
    pub fn directory(path: impl Into<PathBuf>) -> Self {
        OverlayPath {
            path: path.into(),
            kind: OverlayKind::Directory,
            size: 0,
        }
    }

    pub fn ext_image(path: impl Into<PathBuf>, size: u64) -> Self {
        OverlayPath {
            path: path.into(),
            kind: OverlayKind::ExtImage,
            size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuntimeRequest {
    pub image: PathBuf,
    pub command: Vec<String>,
    pub writable: bool,
    /// Lowest first; with `writable` the last one is the writable upper.
    pub overlay_paths: Vec<OverlayPath>,
    pub binds: Vec<BindSpec>,
    pub fakeroot_requested: bool,
    pub build_mode: bool,
    pub env_passthrough: Vec<String>,
    /// Use a throwaway tmpfs upper layer.
    pub writable_tmpfs: bool,
    /// Insist on the read-only underlay root.
    pub force_underlay: bool,
    /// Invoking user's home directory, bound when present.
    pub home: Option<PathBuf>,
}

impl RuntimeRequest {
    pub fn new(image: impl Into<PathBuf>) -> Self {
        RuntimeRequest {
            image: image.into(),
            ..Default::default()
        }
    }

    fn wants_overlay(&self) -> bool {
        self.writable || self.writable_tmpfs || !self.overlay_paths.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IdentityMode {
    SubIdMapped,
    RootMappedNs,
    RootMappedNsPlusFakerootCmd,
    FakerootCmdOnly,
    PlainUser,
}

impl fmt::Display for IdentityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityPlan {
    pub mode: IdentityMode,
    #[serde(rename = "uid_map")]
    pub uid_map_entries: Vec<IdMapEntry>,
    #[serde(rename = "gid_map")]
    pub gid_map_entries: Vec<IdMapEntry>,
    pub fakeroot_cmd: Option<PathBuf>,
    pub requires_setuid_host: bool,
    pub info_messages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newuidmap: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newgidmap: Option<PathBuf>,
}

impl IdentityPlan {
    /// Single-entry maps; `root` maps the ids to 0 inside, otherwise onto themselves.
    fn single(mode: IdentityMode, root: bool, uid: u32, gid: u32) -> Self {
        let (uid_in, gid_in) = if root { (0, 0) } else { (uid, gid) };
        IdentityPlan {
            mode,
            uid_map_entries: vec![IdMapEntry::new(uid_in, uid, 1)],
            gid_map_entries: vec![IdMapEntry::new(gid_in, gid, 1)],
            fakeroot_cmd: None,
            requires_setuid_host: false,
            info_messages: Vec::new(),
            newuidmap: None,
            newgidmap: None,
        }
    }
}

/// Chooses how root is emulated, trying the four methods in priority order.
pub fn select_identity(profile: &HostProfile, request: &RuntimeRequest) -> Result<IdentityPlan, PlanError> {
    let uid = profile.invoking_uid;
    let gid = profile.invoking_gid;
    let fakeroot_requested = request.fakeroot_requested || request.build_mode;
    if !fakeroot_requested {
        return Ok(IdentityPlan::single(IdentityMode::PlainUser, false, uid, gid));
    }

    // Inside an outer root-mapped namespace the fakeroot command is never used.
    let fakeroot = profile
        .helper(Helper::Fakeroot)
        .filter(|_| !profile.already_root_mapped)
        .map(Path::to_path_buf);
    let idmap_helpers = profile.has_helper(Helper::Newuidmap) && profile.has_helper(Helper::Newgidmap);

    if profile.subid_mapped && (idmap_helpers || profile.setuid_installed) {
        let (su, sg) = (profile.subuid_ranges[0], profile.subgid_ranges[0]);
        let mut plan = IdentityPlan::single(IdentityMode::SubIdMapped, true, uid, gid);
        plan.uid_map_entries.push(IdMapEntry::new(1, su.start, su.count));
        plan.gid_map_entries.push(IdMapEntry::new(1, sg.start, sg.count));
        if idmap_helpers {
            plan.newuidmap = profile.helper(Helper::Newuidmap).map(Path::to_path_buf);
            plan.newgidmap = profile.helper(Helper::Newgidmap).map(Path::to_path_buf);
        }
        // Multi-range maps are only ever written by a privileged party.
        plan.requires_setuid_host = true;
        if profile.already_root_mapped {
            plan.info_messages.push(NOTE_SUBID_NESTED.to_string());
        }
        return Ok(plan);
    }

    if profile.userns_available {
        return Ok(match fakeroot {
            Some(cmd) => {
                let mut plan = IdentityPlan::single(IdentityMode::RootMappedNsPlusFakerootCmd, true, uid, gid);
                plan.fakeroot_cmd = Some(cmd);
                plan.info_messages.push(INFO_ROOT_MAPPED_FAKEROOT.to_string());
                plan
            }
            _ => {
                let mut plan = IdentityPlan::single(IdentityMode::RootMappedNs, true, uid, gid);
                plan.info_messages.push(INFO_ROOT_MAPPED.to_string());
                plan
            }
        });
    }

    if profile.setuid_installed {
        if let Some(cmd) = fakeroot {
            return Ok(IdentityPlan {
                mode: IdentityMode::FakerootCmdOnly,
                uid_map_entries: Vec::new(),
                gid_map_entries: Vec::new(),
                fakeroot_cmd: Some(cmd),
                requires_setuid_host: true,
                info_messages: vec![INFO_FAKEROOT_ONLY.to_string()],
                newuidmap: None,
                newgidmap: None,
            });
        }
    }

    let mut failed = Vec::new();
    if !profile.subid_mapped {
        failed.push("no /etc/subuid and /etc/subgid mapping for this user".to_string());
    } else {
        failed.push("newuidmap/newgidmap not found".to_string());
    }
    failed.push("user namespaces unavailable".to_string());
    if !profile.setuid_installed {
        failed.push("not installed setuid-root".to_string());
    }
    if profile.already_root_mapped {
        failed.push("fakeroot command skipped inside a root-mapped namespace".to_string());
    } else if fakeroot.is_none() {
        failed.push("fakeroot command not found".to_string());
    }
    Err(PlanError::NoRootEmulationAvailable { failed })
}

/// A path either inside the per-run scratch directory or on the host.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Scratch(String),
    Host(PathBuf),
}

impl Location {
    pub fn scratch(name: impl Into<String>) -> Self {
        Location::Scratch(name.into())
    }

    pub fn resolve(&self, scratch: &Path) -> PathBuf {
        match self {
            Location::Scratch(rel) => scratch.join(rel),
            Location::Host(p) => p.clone(),
        }
    }

    pub fn join(&self, name: &str) -> Location {
        match self {
            Location::Scratch(rel) => Location::Scratch(format!("{rel}/{name}")),
            Location::Host(p) => Location::Host(p.join(name)),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Scratch(rel) => write!(f, "scratch:{rel}"),
            Location::Host(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy")]
pub enum RootStrategy {
    ReadOnlyUnderlay,
    KernelOverlay { upper: Location, work: Location },
    FuseOverlay { upper: Location, work: Location },
}

/// Where the upper layer comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
enum UpperSource {
    Tmpfs,
    OverlayPath(usize),
    ImagePartition(usize),
}

fn upper_source(request: &RuntimeRequest, image: &ImageInfo) -> Result<UpperSource, PlanError> {
    if !request.writable {
        return Ok(UpperSource::Tmpfs);
    }
    if let Some(last) = request.overlay_paths.len().checked_sub(1) {
        return Ok(UpperSource::OverlayPath(last));
    }
    if let Some(i) = image
        .partitions
        .iter()
        .position(|p| p.role == PartitionRole::Overlay && p.kind == PartitionKind::Extfs)
    {
        return Ok(UpperSource::ImagePartition(i));
    }
    if request.writable_tmpfs {
        return Ok(UpperSource::Tmpfs);
    }
    Err(PlanError::WritableWithoutOverlaySource)
}

fn overlay_mount_location(index: usize) -> Location {
    Location::scratch(format!("overlay-{index}"))
}

fn partition_location(index: usize) -> Location {
    Location::scratch(format!("part-{index}"))
}

/// Directory holding the `upper` and `work` trees of an overlay source.
fn overlay_base(request: &RuntimeRequest, index: usize) -> Location {
    let o = &request.overlay_paths[index];
    match o.kind {
        OverlayKind::Directory => Location::Host(o.path.clone()),
        OverlayKind::ExtImage => overlay_mount_location(index),
    }
}

pub fn select_root_strategy(
    profile: &HostProfile,
    request: &RuntimeRequest,
    image: &ImageInfo,
) -> Result<RootStrategy, PlanError> {
    if !request.wants_overlay() {
        return Ok(RootStrategy::ReadOnlyUnderlay);
    }
    if request.force_underlay {
        return Err(PlanError::UnderlayWithOverlay);
    }
    let (upper, work) = match upper_source(request, image)? {
        UpperSource::Tmpfs => (Location::scratch("upper"), Location::scratch("work")),
        UpperSource::OverlayPath(i) => {
            let base = overlay_base(request, i);
            (base.join("upper"), base.join("work"))
        }
        UpperSource::ImagePartition(i) => {
            let base = partition_location(i);
            (base.join("upper"), base.join("work"))
        }
    };
    if profile.unpriv_overlayfs {
        Ok(RootStrategy::KernelOverlay { upper, work })
    } else if profile.has_helper(Helper::FuseOverlayfs) {
        Ok(RootStrategy::FuseOverlay { upper, work })
    } else {
        Err(PlanError::WritableButNoOverlayBackend)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardMount {
    Proc,
    Sys,
    Dev,
    Tmp,
    Home,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BindSource {
    /// Compose the scratch root from this image tree, leaving room for every
    /// later bind and standard mount.
    Underlay { image_root: Location },
    Host { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step")]
pub enum MountStep {
    MakeScratchRoot {
        root: Location,
    },
    MountSquashPartition {
        helper: PathBuf,
        image: PathBuf,
        offset: u64,
        size: u64,
        target: Location,
    },
    ServeWindowFile {
        backing: PathBuf,
        offset: u64,
        size: u64,
        writable: bool,
        mountpoint: Location,
    },
    MountExtPartition {
        helper: PathBuf,
        window: Location,
        target: Location,
        writable: bool,
    },
    MountKernelOverlay {
        /// Lowest layer first.
        lower: Vec<Location>,
        upper: Location,
        work: Location,
        target: Location,
    },
    MountFuseOverlay {
        helper: PathBuf,
        lower: Vec<Location>,
        upper: Location,
        work: Location,
        target: Location,
    },
    BindEntry {
        source: BindSource,
        destination: String,
        readonly: bool,
    },
    MountStandard {
        kind: StandardMount,
        source: PathBuf,
        destination: String,
    },
    PivotIntoRoot {
        root: Location,
    },
}

impl fmt::Display for MountStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lowers = |l: &[Location]| l.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match self {
            MountStep::MakeScratchRoot { root } => write!(f, "MakeScratchRoot root={root}"),
            MountStep::MountSquashPartition {
                helper,
                image,
                offset,
                size,
                target,
            } => write!(
                f,
                "MountSquashPartition helper={} image={} offset={offset} size={size} target={target}",
                helper.display(),
                image.display()
            ),
            MountStep::ServeWindowFile {
                backing,
                offset,
                size,
                writable,
                mountpoint,
            } => write!(
                f,
                "ServeWindowFile backing={} offset={offset} size={size} writable={writable} mountpoint={mountpoint}",
                backing.display()
            ),
            MountStep::MountExtPartition {
                helper,
                window,
                target,
                writable,
            } => write!(
                f,
                "MountExtPartition helper={} window={window} target={target} writable={writable}",
                helper.display()
            ),
            MountStep::MountKernelOverlay {
                lower,
                upper,
                work,
                target,
            } => write!(
                f,
                "MountKernelOverlay lower={} upper={upper} work={work} target={target}",
                lowers(lower)
            ),
            MountStep::MountFuseOverlay {
                helper,
                lower,
                upper,
                work,
                target,
            } => write!(
                f,
                "MountFuseOverlay helper={} lower={} upper={upper} work={work} target={target}",
                helper.display(),
                lowers(lower)
            ),
            MountStep::BindEntry {
                source,
                destination,
                readonly,
            } => {
                let ro = if *readonly { " ro" } else { "" };
                match source {
                    BindSource::Underlay { image_root } => {
                        write!(f, "BindEntry underlay image_root={image_root} -> {destination}{ro}")
                    }
                    BindSource::Host { path } => {
                        write!(f, "BindEntry host {} -> {destination}{ro}", path.display())
                    }
                }
            }
            MountStep::MountStandard {
                kind,
                source,
                destination,
            } => write!(f, "MountStandard {kind:?} {} -> {destination}", source.display()),
            MountStep::PivotIntoRoot { root } => write!(f, "PivotIntoRoot root={root}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountPlan {
    pub steps: Vec<MountStep>,
}

impl MountPlan {
    /// Container paths that receive a host bind or standard mount, in plan order.
    pub fn bind_destinations(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                MountStep::BindEntry {
                    source: BindSource::Host { .. },
                    destination,
                    ..
                }
                | MountStep::MountStandard { destination, .. } => Some(destination.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Both halves of a plan, in the serialized shape the CLI prints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullPlan {
    pub identity: IdentityPlan,
    pub mounts: Vec<MountStep>,
}

/// Normalizes a container path: absolute, no `.`/`..`, no trailing slash.
pub fn normalize_destination(dest: &str) -> Result<String, PlanError> {
    if !dest.starts_with('/') {
        return Err(PlanError::RelativeDestination(dest.to_string()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for c in dest.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    Ok(format!("/{}", parts.join("/")))
}

fn helper_path(profile: &HostProfile, helper: Helper) -> Result<PathBuf, PlanError> {
    profile
        .helper(helper)
        .map(Path::to_path_buf)
        .ok_or(PlanError::HelperMissing(helper))
}

fn push_partition_mount(
    steps: &mut Vec<MountStep>,
    profile: &HostProfile,
    image: &Path,
    part: &PartitionDescriptor,
    index: usize,
    writable: bool,
) -> Result<Location, PlanError> {
    let target = partition_location(index);
    match part.kind {
        PartitionKind::Squashfs => steps.push(MountStep::MountSquashPartition {
            helper: helper_path(profile, Helper::Squashfuse)?,
            image: image.to_path_buf(),
            offset: part.offset,
            size: part.size,
            target: target.clone(),
        }),
        PartitionKind::Extfs => {
            let window = Location::scratch(format!("window-{index}"));
            steps.push(MountStep::ServeWindowFile {
                backing: image.to_path_buf(),
                offset: part.offset,
                size: part.size,
                writable,
                mountpoint: window.clone(),
            });
            steps.push(MountStep::MountExtPartition {
                helper: helper_path(profile, Helper::Fuse2fs)?,
                window,
                target: target.clone(),
                writable,
            });
        }
    }
    Ok(target)
}

/// Builds the identity and mount plans. Deterministic for equal inputs.
pub fn plan(
    profile: &HostProfile,
    request: &RuntimeRequest,
    image: &ImageInfo,
) -> Result<(IdentityPlan, MountPlan), PlanError> {
    let identity = select_identity(profile, request)?;
    let strategy = select_root_strategy(profile, request, image)?;

    let mut binds = Vec::with_capacity(request.binds.len());
    for b in &request.binds {
        binds.push((b, normalize_destination(&b.destination)?));
    }
    let mut standard = vec![
        (StandardMount::Proc, PathBuf::from("/proc"), "/proc".to_string()),
        (StandardMount::Sys, PathBuf::from("/sys"), "/sys".to_string()),
        (StandardMount::Dev, PathBuf::from("/dev"), "/dev".to_string()),
        (StandardMount::Tmp, PathBuf::from("/tmp"), "/tmp".to_string()),
    ];
    if let Some(home) = &request.home {
        let dest = normalize_destination(&home.to_string_lossy())?;
        standard.push((StandardMount::Home, home.clone(), dest));
    }
    let fakeroot_bind = identity
        .fakeroot_cmd
        .as_ref()
        .filter(|_| identity.mode == IdentityMode::RootMappedNsPlusFakerootCmd)
        .map(|p| (p.clone(), FAKEROOT_CONTAINER_PATH.to_string()));

    let mut seen = std::collections::BTreeSet::new();
    let all_dests = binds
        .iter()
        .map(|(_, d)| d)
        .chain(standard.iter().map(|(_, _, d)| d))
        .chain(fakeroot_bind.iter().map(|(_, d)| d));
    for d in all_dests {
        if !seen.insert(d.clone()) {
            return Err(PlanError::BindDestinationConflict(d.clone()));
        }
    }

    let root = Location::scratch("root");
    let mut steps = vec![MountStep::MakeScratchRoot { root: root.clone() }];

    let (root_index, rootfs) = image
        .partitions
        .iter()
        .enumerate()
        .find(|(_, p)| p.role == PartitionRole::Rootfs)
        .ok_or(PlanError::MissingRootfs)?;
    let image_root = push_partition_mount(&mut steps, profile, &request.image, rootfs, root_index, false)?;

    match &strategy {
        RootStrategy::ReadOnlyUnderlay => {
            steps.push(MountStep::BindEntry {
                source: BindSource::Underlay { image_root },
                destination: "/".to_string(),
                readonly: true,
            });
        }
        RootStrategy::KernelOverlay { upper, work } | RootStrategy::FuseOverlay { upper, work } => {
            let upper_src = upper_source(request, image)?;
            let mut lower = vec![image_root];
            for (i, o) in request.overlay_paths.iter().enumerate() {
                let is_upper = upper_src == UpperSource::OverlayPath(i);
                if o.kind == OverlayKind::ExtImage {
                    let window = Location::scratch(format!("window-overlay-{i}"));
                    steps.push(MountStep::ServeWindowFile {
                        backing: o.path.clone(),
                        offset: 0,
                        size: o.size,
                        writable: is_upper,
                        mountpoint: window.clone(),
                    });
                    steps.push(MountStep::MountExtPartition {
                        helper: helper_path(profile, Helper::Fuse2fs)?,
                        window,
                        target: overlay_mount_location(i),
                        writable: is_upper,
                    });
                }
                if !is_upper {
                    lower.push(overlay_base(request, i).join("upper"));
                }
            }
            if let UpperSource::ImagePartition(i) = upper_src {
                push_partition_mount(&mut steps, profile, &request.image, &image.partitions[i], i, true)?;
            }
            let (upper, work, target) = (upper.clone(), work.clone(), root.clone());
            steps.push(match strategy {
                RootStrategy::KernelOverlay { .. } => MountStep::MountKernelOverlay {
                    lower,
                    upper,
                    work,
                    target,
                },
                _ => MountStep::MountFuseOverlay {
                    helper: helper_path(profile, Helper::FuseOverlayfs)?,
                    lower,
                    upper,
                    work,
                    target,
                },
            });
        }
    }

    for (b, dest) in &binds {
        steps.push(MountStep::BindEntry {
            source: BindSource::Host { path: b.source.clone() },
            destination: dest.clone(),
            readonly: b.readonly,
        });
    }
    if let Some((path, dest)) = fakeroot_bind {
        // TODO: fakeroot also needs faked and libfakeroot from the host.
        steps.push(MountStep::BindEntry {
            source: BindSource::Host { path },
            destination: dest,
            readonly: true,
        });
    }
    for (kind, source, destination) in standard {
        steps.push(MountStep::MountStandard {
            kind,
            source,
            destination,
        });
    }
    steps.push(MountStep::PivotIntoRoot { root });
    Ok((identity, MountPlan { steps }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanFormat {
    Human,
    Json,
}

pub fn render_plan(identity: &IdentityPlan, mounts: &MountPlan, format: PlanFormat) -> String {
    match format {
        PlanFormat::Json => {
            let full = FullPlan {
                identity: identity.clone(),
                mounts: mounts.steps.clone(),
            };
            let mut s = serde_json::to_string_pretty(&full).expect("plan serializes");
            s.push('\n');
            s
        }
        PlanFormat::Human => {
            let maps = |m: &[IdMapEntry]| {
                if m.is_empty() {
                    "(none)".to_string()
                } else {
                    m.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
                }
            };
            let mut out = format!("identity: {}\n", identity.mode);
            out.push_str(&format!("  uid map: {}\n", maps(&identity.uid_map_entries)));
            out.push_str(&format!("  gid map: {}\n", maps(&identity.gid_map_entries)));
            if let Some(f) = &identity.fakeroot_cmd {
                out.push_str(&format!("  fakeroot command: {}\n", f.display()));
            }
            for (name, p) in [("newuidmap", &identity.newuidmap), ("newgidmap", &identity.newgidmap)] {
                if let Some(p) = p {
                    out.push_str(&format!("  {name}: {}\n", p.display()));
                }
            }
            out.push_str(&format!(
                "  requires setuid host: {}\n",
                if identity.requires_setuid_host { "yes" } else { "no" }
            ));
            for m in &identity.info_messages {
                out.push_str(m);
                out.push('\n');
            }
            out.push_str("mounts:\n");
            for (i, s) in mounts.steps.iter().enumerate() {
                out.push_str(&format!("  {:>2}. {s}\n", i + 1));
            }
            out
        }
    }
}

/// Parses the JSON form produced by [`render_plan`].
pub fn parse_plan_json(text: &str) -> Result<FullPlan, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hostprobe::SubIdRange;
    use crate::imagefmt::ImageKind;
    use proptest::prelude::*;

    fn squash_image(len: u64) -> ImageInfo {
        ImageInfo {
            kind: ImageKind::RawSquashfs,
            partitions: vec![PartitionDescriptor {
                kind: PartitionKind::Squashfs,
                role: PartitionRole::Rootfs,
                offset: 0,
                size: len,
            }],
            file_length: len,
        }
    }

    fn cif_with_overlay() -> ImageInfo {
        ImageInfo {
            kind: ImageKind::Cif,
            partitions: vec![
                PartitionDescriptor {
                    kind: PartitionKind::Squashfs,
                    role: PartitionRole::Rootfs,
                    offset: 4096,
                    size: 8192,
                },
                PartitionDescriptor {
                    kind: PartitionKind::Extfs,
                    role: PartitionRole::Overlay,
                    offset: 12288,
                    size: 1 << 20,
                },
            ],
            file_length: 12288 + (1 << 20),
        }
    }

    fn base_profile() -> HostProfile {
        let mut p = HostProfile::bare(1000, 1000);
        p.userns_available = true;
        p.fuse_device_usable = true;
        for h in [Helper::Squashfuse, Helper::Fuse2fs] {
            p.set_helper(h, Some(format!("/usr/bin/{h}").into()));
        }
        p
    }

    fn fakeroot_request() -> RuntimeRequest {
        RuntimeRequest {
            fakeroot_requested: true,
            ..RuntimeRequest::new("/img.sqfs")
        }
    }

    fn with_subids(mut p: HostProfile) -> HostProfile {
        p.subid_mapped = true;
        p.subuid_ranges = vec![SubIdRange { start: 100000, count: 65536 }];
        p.subgid_ranges = vec![SubIdRange { start: 100000, count: 65536 }];
        p
    }

    #[test]
    fn subid_mode_wins_when_available() {
        let mut p = with_subids(base_profile());
        for h in [Helper::Newuidmap, Helper::Newgidmap, Helper::Fakeroot] {
            p.set_helper(h, Some(format!("/usr/bin/{h}").into()));
        }
        let id = select_identity(&p, &fakeroot_request()).unwrap();
        assert_eq!(id.mode, IdentityMode::SubIdMapped);
        assert_eq!(
            id.uid_map_entries,
            vec![IdMapEntry::new(0, 1000, 1), IdMapEntry::new(1, 100000, 65536)]
        );
        assert!(id.fakeroot_cmd.is_none());
    }

    #[test]
    fn root_mapped_without_fakeroot_binary() {
        let id = select_identity(&base_profile(), &fakeroot_request()).unwrap();
        assert_eq!(id.mode, IdentityMode::RootMappedNs);
        assert_eq!(id.uid_map_entries, vec![IdMapEntry::new(0, 1000, 1)]);
        assert_eq!(id.info_messages, vec![INFO_ROOT_MAPPED.to_string()]);
    }

    #[test]
    fn fakeroot_skipped_when_already_root_mapped() {
        let mut p = base_profile();
        p.set_helper(Helper::Fakeroot, Some("/usr/bin/fakeroot".into()));
        p.already_root_mapped = true;
        let id = select_identity(&p, &fakeroot_request()).unwrap();
        assert_eq!(id.mode, IdentityMode::RootMappedNs);
        p.already_root_mapped = false;
        let id = select_identity(&p, &fakeroot_request()).unwrap();
        assert_eq!(id.mode, IdentityMode::RootMappedNsPlusFakerootCmd);
        assert_eq!(id.fakeroot_cmd.as_deref(), Some(Path::new("/usr/bin/fakeroot")));
    }

    #[test]
    fn fakeroot_only_needs_setuid_install() {
        let mut p = base_profile();
        p.userns_available = false;
        p.set_helper(Helper::Fakeroot, Some("/usr/bin/fakeroot".into()));
        assert!(matches!(
            select_identity(&p, &fakeroot_request()),
            Err(PlanError::NoRootEmulationAvailable { .. })
        ));
        p.setuid_installed = true;
        let id = select_identity(&p, &fakeroot_request()).unwrap();
        assert_eq!(id.mode, IdentityMode::FakerootCmdOnly);
        assert!(id.requires_setuid_host);
    }

    #[test]
    fn build_mode_implies_fakeroot() {
        let req = RuntimeRequest {
            build_mode: true,
            ..RuntimeRequest::new("/x")
        };
        assert_eq!(select_identity(&base_profile(), &req).unwrap().mode, IdentityMode::RootMappedNs);
        let plain = select_identity(&base_profile(), &RuntimeRequest::new("/x")).unwrap();
        assert_eq!(plain.mode, IdentityMode::PlainUser);
        assert_eq!(plain.uid_map_entries, vec![IdMapEntry::new(1000, 1000, 1)]);
    }

    #[test]
    fn read_only_run_uses_underlay() {
        let mut req = RuntimeRequest::new("/img.sqfs");
        req.binds = vec![BindSpec::new("/data", "/data", true), BindSpec::new("/x", "/y", false)];
        let s = select_root_strategy(&base_profile(), &req, &squash_image(4096)).unwrap();
        assert_eq!(s, RootStrategy::ReadOnlyUnderlay);
    }

    #[test]
    fn writable_prefers_kernel_overlay_then_fuse() {
        let mut p = base_profile();
        let req = RuntimeRequest {
            writable: true,
            writable_tmpfs: true,
            ..RuntimeRequest::new("/img.sqfs")
        };
        p.unpriv_overlayfs = true;
        assert!(matches!(
            select_root_strategy(&p, &req, &squash_image(4096)),
            Ok(RootStrategy::KernelOverlay { .. })
        ));
        p.unpriv_overlayfs = false;
        assert_eq!(
            select_root_strategy(&p, &req, &squash_image(4096)),
            Err(PlanError::WritableButNoOverlayBackend)
        );
        p.set_helper(Helper::FuseOverlayfs, Some("/usr/bin/fuse-overlayfs".into()));
        assert!(matches!(
            select_root_strategy(&p, &req, &squash_image(4096)),
            Ok(RootStrategy::FuseOverlay { .. })
        ));
    }

    #[test]
    fn writable_needs_an_overlay_source() {
        let mut p = base_profile();
        p.unpriv_overlayfs = true;
        let req = RuntimeRequest {
            writable: true,
            ..RuntimeRequest::new("/img.sqfs")
        };
        assert_eq!(
            select_root_strategy(&p, &req, &squash_image(4096)),
            Err(PlanError::WritableWithoutOverlaySource)
        );
        let s = select_root_strategy(&p, &req, &cif_with_overlay()).unwrap();
        assert_eq!(
            s,
            RootStrategy::KernelOverlay {
                upper: Location::scratch("part-1/upper"),
                work: Location::scratch("part-1/work"),
            }
        );
    }

    #[test]
    fn underlay_plan_shape() {
        let mut req = RuntimeRequest::new("/img.sqfs");
        req.binds = vec![BindSpec::new("/data", "/data", true)];
        req.home = Some("/home/alice".into());
        let (_, mp) = plan(&base_profile(), &req, &squash_image(8192)).unwrap();
        let names: Vec<String> = mp
            .steps
            .iter()
            .map(|s| s.to_string().split(' ').next().unwrap().to_string())
            .collect();
        assert_eq!(
            names,
            [
                "MakeScratchRoot",
                "MountSquashPartition",
                "BindEntry",
                "BindEntry",
                "MountStandard",
                "MountStandard",
                "MountStandard",
                "MountStandard",
                "MountStandard",
                "PivotIntoRoot"
            ]
        );
        assert!(matches!(mp.steps[1], MountStep::MountSquashPartition { offset: 0, .. }));
    }

    #[test]
    fn cif_overlay_partition_is_windowed_before_ext_mount() {
        let mut p = base_profile();
        p.unpriv_overlayfs = true;
        let req = RuntimeRequest {
            writable: true,
            ..RuntimeRequest::new("/img.cif")
        };
        let (_, mp) = plan(&p, &req, &cif_with_overlay()).unwrap();
        let serve = mp
            .steps
            .iter()
            .position(|s| matches!(s, MountStep::ServeWindowFile { offset: 12288, writable: true, .. }))
            .unwrap();
        let ext = mp
            .steps
            .iter()
            .position(|s| matches!(s, MountStep::MountExtPartition { writable: true, .. }))
            .unwrap();
        let ovl = mp
            .steps
            .iter()
            .position(|s| matches!(s, MountStep::MountKernelOverlay { .. }))
            .unwrap();
        assert!(serve < ext && ext < ovl);
        assert!(matches!(mp.steps[1], MountStep::MountSquashPartition { offset: 4096, .. }));
    }

    #[test]
    fn overlay_layers_keep_request_order() {
        let mut p = base_profile();
        p.unpriv_overlayfs = true;
        let req = RuntimeRequest {
            writable: true,
            overlay_paths: vec![
                OverlayPath::directory("/o/a"),
                OverlayPath::ext_image("/o/b.img", 1 << 20),
                OverlayPath::directory("/o/c"),
            ],
            ..RuntimeRequest::new("/img.sqfs")
        };
        let (_, mp) = plan(&p, &req, &squash_image(4096)).unwrap();
        let ovl = mp
            .steps
            .iter()
            .find_map(|s| match s {
                MountStep::MountKernelOverlay { lower, upper, .. } => Some((lower.clone(), upper.clone())),
                _ => None,
            })
            .unwrap();
        assert_eq!(
            ovl.0,
            vec![
                Location::scratch("part-0"),
                Location::Host("/o/a/upper".into()),
                Location::scratch("overlay-1/upper"),
            ]
        );
        assert_eq!(ovl.1, Location::Host("/o/c/upper".into()));
    }

    #[test]
    fn duplicate_bind_destinations_conflict() {
        let mut req = RuntimeRequest::new("/img.sqfs");
        req.binds = vec![BindSpec::new("/a", "/data", true), BindSpec::new("/b", "/data/", false)];
        assert_eq!(
            plan(&base_profile(), &req, &squash_image(4096)).unwrap_err(),
            PlanError::BindDestinationConflict("/data".into())
        );
        req.binds = vec![BindSpec::new("/a", "/proc", true)];
        assert!(plan(&base_profile(), &req, &squash_image(4096)).is_err());
    }

    #[test]
    fn bind_spec_parsing() {
        assert_eq!("/a:/b:ro".parse::<BindSpec>().unwrap(), BindSpec::new("/a", "/b", true));
        assert_eq!("/a:/b".parse::<BindSpec>().unwrap(), BindSpec::new("/a", "/b", false));
        assert_eq!("/a".parse::<BindSpec>().unwrap(), BindSpec::new("/a", "/a", false));
        assert!("/a:/b:xx".parse::<BindSpec>().is_err());
        assert!(":/b".parse::<BindSpec>().is_err());
    }

    #[test]
    fn human_render_has_info_message_once() {
        let mut req = fakeroot_request();
        req.binds.clear();
        let (id, mp) = plan(&base_profile(), &req, &squash_image(4096)).unwrap();
        let text = render_plan(&id, &mp, PlanFormat::Human);
        assert_eq!(text.matches(INFO_ROOT_MAPPED).count(), 1);
        let host_binds = text.lines().filter(|l| l.contains("BindEntry host")).count();
        assert_eq!(host_binds, 0);
    }

    fn arb_profile() -> impl Strategy<Value = HostProfile> {
        (any::<[bool; 9]>()).prop_map(|f| {
            let mut p = base_profile();
            p.userns_available = f[0];
            if f[1] {
                p = with_subids(p);
            }
            p.setuid_installed = f[2];
            p.already_root_mapped = f[3];
            p.unpriv_overlayfs = f[4];
            let set = |p: &mut HostProfile, h: Helper, on: bool| {
                p.set_helper(h, on.then(|| PathBuf::from(format!("/bin/{h}"))))
            };
            set(&mut p, Helper::Fakeroot, f[5]);
            set(&mut p, Helper::Newuidmap, f[6]);
            set(&mut p, Helper::Newgidmap, f[7]);
            set(&mut p, Helper::FuseOverlayfs, f[8]);
            p
        })
    }

    proptest! {
        #[test]
        fn plans_are_deterministic_and_never_mention_network(p in arb_profile(), writable: bool, ro: bool) {
            let req = RuntimeRequest {
                fakeroot_requested: true,
                writable,
                writable_tmpfs: writable,
                binds: vec![BindSpec::new("/srv", "/srv", ro)],
                ..RuntimeRequest::new("/img.cif")
            };
            let a = plan(&p, &req, &cif_with_overlay());
            let b = plan(&p, &req, &cif_with_overlay());
            prop_assert_eq!(&a, &b);
            if let Ok((id, mp)) = a {
                let json = render_plan(&id, &mp, PlanFormat::Json);
                prop_assert!(!json.to_lowercase().contains("net"));
                let back = parse_plan_json(&json).unwrap();
                prop_assert_eq!(back.identity, id.clone());
                prop_assert_eq!(back.mounts, mp.steps.clone());
                if p.already_root_mapped {
                    prop_assert!(!json.contains("/bin/fakeroot"));
                    prop_assert!(id.fakeroot_cmd.is_none());
                }
                if !id.requires_setuid_host {
                    prop_assert!(!json.contains("newuidmap") && !json.contains("newgidmap"));
                }
            }
        }
    }
}
