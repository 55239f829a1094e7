//! A container runtime that needs no setuid-root installation.
//!
//! Images are single files holding squashfs and ext partitions at byte
//! offsets. They are mounted with unprivileged FUSE helpers from inside a
//! user namespace, assembled into a root with kernel overlayfs,
//! fuse-overlayfs or a bind-mount underlay, and entered with `pivot_root`.
//! Root is emulated in one of several ways depending on what the host
//! offers; [`planner::select_identity`] picks the first that works.
//!
//! The pieces:
//!
//! * [`imagefmt`] reads and writes the image container format.
//! * [`hostprobe`] records what the host supports in a [`hostprobe::HostProfile`].
//! * [`planner`] turns a profile and a request into identity and mount plans
//!   without touching the system.
//! * [`windowfile`] exposes a byte range of a file as a FUSE file, for
//!   helpers that cannot start at an offset.
//! * [`mounter`] executes mount plans and tears them down.
//! * [`nsexec`] enters namespaces, pivots and runs the command.
//! * [`build`] packs directories into images.
//! * [`cli`] is the command-line front end.

use std::collections::BTreeMap;

pub mod build;
pub mod cli;
pub mod hostprobe;
pub mod idmap;
pub mod imagefmt;
pub mod mounter;
pub mod nsexec;
pub mod planner;
pub mod runtime;
pub(crate) mod sys;
pub mod windowfile;

pub use sys::{count_mounts_at, is_mount_point, mount_points, parse_mount_points};

/// Environment variables, sorted so output stays deterministic.
pub type EnvMap = BTreeMap<String, String>;

/// Snapshot of the current process environment.
pub fn host_env() -> EnvMap {
    std::env::vars_os()
        .filter_map(|(k, v)| Some((k.into_string().ok()?, v.into_string().ok()?)))
        .collect()
}
