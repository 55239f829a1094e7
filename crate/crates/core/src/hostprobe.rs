//! Host capability snapshot: which unprivileged container features this
//! host and user actually have, found by trying them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idmap::{self, MalformedIdMap};
use crate::nsexec;
use crate::sys;
use crate::EnvMap;

/// Environment variable whose directories are searched for helpers before
/// `PATH`.
pub const HELPER_PATH_ENV: &str = "UNSUID_HELPER_PATH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Helper {
    #[serde(rename = "squashfuse")]
    Squashfuse,
    #[serde(rename = "fuse2fs")]
    Fuse2fs,
    #[serde(rename = "fuse-overlayfs")]
    FuseOverlayfs,
    #[serde(rename = "fakeroot")]
    Fakeroot,
    #[serde(rename = "newuidmap")]
    Newuidmap,
    #[serde(rename = "newgidmap")]
    Newgidmap,
    #[serde(rename = "mksquashfs")]
    Mksquashfs,
}

impl Helper {
    pub const ALL: [Helper; 7] = [
        Helper::Squashfuse,
        Helper::Fuse2fs,
        Helper::FuseOverlayfs,
        Helper::Fakeroot,
        Helper::Newuidmap,
        Helper::Newgidmap,
        Helper::Mksquashfs,
    ];

    pub fn binary_name(self) -> &'static str {
        match self {
            Helper::Squashfuse => "squashfuse",
            Helper::Fuse2fs => "fuse2fs",
            Helper::FuseOverlayfs => "fuse-overlayfs",
            Helper::Fakeroot => "fakeroot",
            Helper::Newuidmap => "newuidmap",
            Helper::Newgidmap => "newgidmap",
            Helper::Mksquashfs => "mksquashfs",
        }
    }
}

impl fmt::Display for Helper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.binary_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubIdRange {
    pub start: u32,
    pub count: u32,
}

impl SubIdRange {
    pub fn new(start: u32, count: u32) -> Option<Self> {
        (count >= 1 && u64::from(start) + u64::from(count) <= 1 << 32)
            .then_some(SubIdRange { start, count })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostProfile {
    pub userns_available: bool,
    pub unpriv_overlayfs: bool,
    pub fuse_device_usable: bool,
    pub subid_mapped: bool,
    pub subuid_ranges: Vec<SubIdRange>,
    pub subgid_ranges: Vec<SubIdRange>,
    pub helper_paths: BTreeMap<Helper, Option<PathBuf>>,
    /// Only ever true in synthetic profiles; this runtime is never installed setuid.
    pub setuid_installed: bool,
    pub already_root_mapped: bool,
    pub invoking_uid: u32,
    pub invoking_gid: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile: subid_mapped={flag} but subuid ranges={uids} and subgid ranges={gids}")]
    SubIdMismatch { flag: bool, uids: usize, gids: usize },
    #[error("profile: invalid subordinate id range {start}+{count}")]
    BadRange { start: u32, count: u32 },
}

impl HostProfile {
    /// A profile with every capability off, for building synthetic profiles.
    pub fn bare(uid: u32, gid: u32) -> Self {
        HostProfile {
            userns_available: false,
            unpriv_overlayfs: false,
            fuse_device_usable: false,
            subid_mapped: false,
            subuid_ranges: Vec::new(),
            subgid_ranges: Vec::new(),
            helper_paths: Helper::ALL.iter().map(|&h| (h, None)).collect(),
            setuid_installed: false,
            already_root_mapped: false,
            invoking_uid: uid,
            invoking_gid: gid,
            diagnostics: Vec::new(),
        }
    }

    pub fn helper(&self, helper: Helper) -> Option<&Path> {
        self.helper_paths.get(&helper).and_then(|p| p.as_deref())
    }

    pub fn has_helper(&self, helper: Helper) -> bool {
        self.helper(helper).is_some()
    }

    pub fn set_helper(&mut self, helper: Helper, path: Option<PathBuf>) {
        self.helper_paths.insert(helper, path);
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        for r in self.subuid_ranges.iter().chain(&self.subgid_ranges) {
            if SubIdRange::new(r.start, r.count).is_none() {
                return Err(ProfileError::BadRange {
                    start: r.start,
                    count: r.count,
                });
            }
        }
        let both = !self.subuid_ranges.is_empty() && !self.subgid_ranges.is_empty();
        if self.subid_mapped != both {
            return Err(ProfileError::SubIdMismatch {
                flag: self.subid_mapped,
                uids: self.subuid_ranges.len(),
                gids: self.subgid_ranges.len(),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let mut profile: HostProfile = serde_json::from_str(text)?;
        for h in Helper::ALL {
            profile.helper_paths.entry(h).or_insert(None);
        }
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn render_human(&self) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" };
        let ranges = |r: &[SubIdRange]| {
            if r.is_empty() {
                "none".to_string()
            } else {
                r.iter()
                    .map(|r| format!("{}+{}", r.start, r.count))
                    .collect::<Vec<_>>()
                    .join(", ")
            }
        };
        let mut out = String::new();
        out.push_str(&format!("invoking uid/gid:       {}/{}\n", self.invoking_uid, self.invoking_gid));
        out.push_str(&format!("user namespaces:        {}\n", yn(self.userns_available)));
        out.push_str(&format!("unprivileged overlayfs: {}\n", yn(self.unpriv_overlayfs)));
        out.push_str(&format!("/dev/fuse usable:       {}\n", yn(self.fuse_device_usable)));
        out.push_str(&format!("subid mapped:           {}\n", yn(self.subid_mapped)));
        out.push_str(&format!("  subuid:               {}\n", ranges(&self.subuid_ranges)));
        out.push_str(&format!("  subgid:               {}\n", ranges(&self.subgid_ranges)));
        out.push_str(&format!("already root-mapped:    {}\n", yn(self.already_root_mapped)));
        out.push_str(&format!("setuid install:         {}\n", yn(self.setuid_installed)));
        out.push_str("helpers:\n");
        for (h, p) in &self.helper_paths {
            match p {
                Some(p) => out.push_str(&format!("  {:<15} {}\n", h.binary_name(), p.display())),
                None => out.push_str(&format!("  {:<15} (not found)\n", h.binary_name())),
            }
        }
        for d in &self.diagnostics {
            out.push_str(&format!("note: {d}\n"));
        }
        out
    }
}

/// Ordered list of directories searched for helper programs.
#[derive(Debug, Clone, Default)]
pub struct HelperSearch {
    dirs: Vec<PathBuf>,
}

impl HelperSearch {
    pub fn from_env(env: &EnvMap) -> Self {
        let mut dirs = Vec::new();
        for var in [HELPER_PATH_ENV, "PATH"] {
            if let Some(v) = env.get(var) {
                dirs.extend(v.split(':').filter(|s| !s.is_empty()).map(PathBuf::from));
            }
        }
        HelperSearch { dirs }
    }

    pub fn find(&self, name: &str) -> Option<PathBuf> {
        if name.contains('/') {
            let p = PathBuf::from(name);
            return is_executable(&p).then_some(p);
        }
        self.dirs
            .iter()
            .map(|d| d.join(name))
            .find(|p| is_executable(p))
    }
}

fn is_executable(path: &Path) -> bool {
    fs::metadata(path)
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

/// Result of scanning a subuid/subgid file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubIdParse {
    pub ranges: Vec<SubIdRange>,
    pub diagnostics: Vec<String>,
}

/// Extracts the ranges belonging to `user_name` (or the decimal
/// `numeric_id`) from `/etc/subuid`-style content.
pub fn parse_subid(content: &str, user_name: &str, numeric_id: u32) -> SubIdParse {
    let numeric = numeric_id.to_string();
    let mut out = SubIdParse::default();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() != 3 {
            out.diagnostics
                .push(format!("line {}: expected name:start:count, got {line:?}", i + 1));
            continue;
        }
        let name = fields[0].trim();
        if name.is_empty() || (name != user_name && name != numeric) {
            continue;
        }
        let start = fields[1].trim().parse::<u32>();
        let count = fields[2].trim().parse::<u32>();
        match (start, count) {
            (Ok(start), Ok(count)) => match SubIdRange::new(start, count) {
                Some(r) => out.ranges.push(r),
                None => out
                    .diagnostics
                    .push(format!("line {}: unusable range {start}+{count}", i + 1)),
            },
            _ => out
                .diagnostics
                .push(format!("line {}: non-numeric start or count in {line:?}", i + 1)),
        }
    }
    out
}

/// True when running as uid 0 inside a user namespace that maps root to
/// someone else, i.e. not real root.
pub fn detect_root_mapped_env(uid_map: &str, euid: u32) -> Result<bool, MalformedIdMap> {
    let entries = idmap::parse_id_map(uid_map)?;
    Ok(euid == 0 && !idmap::is_identity_map(&entries))
}

/// Where the probe reads host configuration from.
#[derive(Debug, Clone)]
pub struct HostPaths {
    pub subuid: PathBuf,
    pub subgid: PathBuf,
    pub uid_map: PathBuf,
    pub fuse_device: PathBuf,
}

impl Default for HostPaths {
    fn default() -> Self {
        HostPaths {
            subuid: "/etc/subuid".into(),
            subgid: "/etc/subgid".into(),
            uid_map: "/proc/self/uid_map".into(),
            fuse_device: "/dev/fuse".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub paths: HostPaths,
    /// Mount a generated fixture to check the squashfuse `offset=` option.
    pub verify_squashfuse_offset: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            paths: HostPaths::default(),
            verify_squashfuse_offset: true,
        }
    }
}

/// Probes the host. Forks throwaway children, so call it before the
/// embedding program starts threads. Never fails: anything that cannot be
/// determined is reported as unavailable with a diagnostic.
pub fn probe_host(env: &EnvMap, options: &ProbeOptions) -> HostProfile {
    let uid = nix::unistd::getuid().as_raw();
    let gid = nix::unistd::getgid().as_raw();
    let euid = nix::unistd::geteuid().as_raw();
    let mut profile = HostProfile::bare(uid, gid);
    let diag = &mut profile.diagnostics;

    match probe_userns(uid, gid) {
        Ok(true) => profile.userns_available = true,
        Ok(false) => diag.push("creating a user namespace with a root mapping failed".into()),
        Err(e) => diag.push(format!("user namespace probe could not run: {e}")),
    }
    if profile.userns_available {
        match probe_overlay(uid, gid) {
            Ok(true) => profile.unpriv_overlayfs = true,
            Ok(false) => diag.push("kernel refused an overlay mount inside a user namespace".into()),
            Err(e) => diag.push(format!("overlay probe could not run: {e}")),
        }
    }

    profile.fuse_device_usable = match OpenOptions::new()
        .read(true)
        .write(true)
        .open(&options.paths.fuse_device)
    {
        Ok(_) => true,
        Err(e) => {
            diag.push(format!("{}: {e}", options.paths.fuse_device.display()));
            false
        }
    };

    let search = HelperSearch::from_env(env);
    for h in Helper::ALL {
        profile.helper_paths.insert(h, search.find(h.binary_name()));
    }

    let user_name = nix::unistd::User::from_uid(nix::unistd::Uid::from_raw(uid))
        .ok()
        .flatten()
        .map(|u| u.name)
        .unwrap_or_default();
    let group_name = nix::unistd::Group::from_gid(nix::unistd::Gid::from_raw(gid))
        .ok()
        .flatten()
        .map(|g| g.name)
        .unwrap_or_default();
    for (path, name, id, is_uid) in [
        (&options.paths.subuid, &user_name, uid, true),
        (&options.paths.subgid, &user_name, uid, false),
    ] {
        // subgid is keyed by user name too; fall back to the group name.
        let content = match fs::read_to_string(path) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let mut parsed = parse_subid(&content, name, id);
        if !is_uid && parsed.ranges.is_empty() && !group_name.is_empty() {
            parsed = parse_subid(&content, &group_name, gid);
        }
        profile
            .diagnostics
            .extend(parsed.diagnostics.into_iter().map(|d| format!("{}: {d}", path.display())));
        if is_uid {
            profile.subuid_ranges = parsed.ranges;
        } else {
            profile.subgid_ranges = parsed.ranges;
        }
    }
    profile.subid_mapped = !profile.subuid_ranges.is_empty() && !profile.subgid_ranges.is_empty();

    match fs::read_to_string(&options.paths.uid_map) {
        Ok(text) => match detect_root_mapped_env(&text, euid) {
            Ok(v) => profile.already_root_mapped = v,
            Err(e) => profile.diagnostics.push(e.to_string()),
        },
        Err(e) => profile
            .diagnostics
            .push(format!("{}: {e}", options.paths.uid_map.display())),
    }

    if options.verify_squashfuse_offset && profile.userns_available && profile.fuse_device_usable {
        if let (Some(sq), Some(mk)) = (
            profile.helper(Helper::Squashfuse).map(Path::to_path_buf),
            profile.helper(Helper::Mksquashfs).map(Path::to_path_buf),
        ) {
            let note = match crate::mounter::verify_squashfuse_offset(&sq, &mk, uid, gid) {
                Ok(()) => "squashfuse offset= option verified against a generated fixture".to_string(),
                Err(e) => format!("squashfuse offset= option check failed: {e}"),
            };
            profile.diagnostics.push(note);
        }
    }
    profile
}

/// Creates a user namespace in a throwaway child and writes a root mapping.
fn probe_userns(uid: u32, gid: u32) -> std::io::Result<bool> {
    let maps = nsexec::RawMaps::root_mapped(uid, gid);
    let code = sys::fork_and_wait(|| match maps.enter(libc::CLONE_NEWUSER) {
        Ok(()) => 0,
        Err(_) => 1,
    })?;
    Ok(code == 0)
}

/// Mounts an overlay over scratch directories inside a fresh user+mount
/// namespace.
fn probe_overlay(uid: u32, gid: u32) -> std::io::Result<bool> {
    let dir = tempfile::Builder::new().prefix("unsuid-probe-").tempdir()?;
    for d in ["lower", "upper", "work", "merged"] {
        fs::create_dir(dir.path().join(d))?;
    }
    fs::write(dir.path().join("lower/probe"), b"1")?;
    let target = sys::cstring(&dir.path().join("merged"))?;
    let probe_file = sys::cstring(&dir.path().join("merged/probe"))?;
    let opts = std::ffi::CString::new(format!(
        "lowerdir={},upperdir={},workdir={}",
        dir.path().join("lower").display(),
        dir.path().join("upper").display(),
        dir.path().join("work").display()
    ))?;
    let maps = nsexec::RawMaps::root_mapped(uid, gid);
    let code = sys::fork_and_wait(|| {
        if maps.enter(libc::CLONE_NEWUSER | libc::CLONE_NEWNS).is_err() {
            return 2;
        }
        // SAFETY: raw mount calls with prepared NUL-terminated buffers.
        unsafe {
            if libc::mount(
                c"none".as_ptr(),
                c"/".as_ptr(),
                std::ptr::null(),
                libc::MS_REC | libc::MS_PRIVATE,
                std::ptr::null(),
            ) != 0
            {
                return 3;
            }
            if libc::mount(
                c"overlay".as_ptr(),
                target.as_ptr(),
                c"overlay".as_ptr(),
                0,
                opts.as_ptr().cast(),
            ) != 0
            {
                return 1;
            }
            if libc::access(probe_file.as_ptr(), libc::R_OK) != 0 {
                return 1;
            }
        }
        0
    })?;
    Ok(code == 0)
}
