//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fs;
use std::io::{self, Read};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use unsuid::hostprobe::{Helper, HostProfile, SubIdRange};
use unsuid::imagefmt::{self, PartitionKind, PartitionRole, PartitionSource};

/// Unprivileged uid/gid used when the tests run as root.
pub const TEST_UID: u32 = 1000;
pub const TEST_GID: u32 = 1000;

pub fn is_root() -> bool {
    nix::unistd::geteuid().is_root()
}

/// A world-readable scratch directory. `/root` may not be traversable for
/// other users or from inside a user namespace, so everything the
/// container side touches lives here.
pub fn open_tempdir() -> tempfile::TempDir {
    let d = tempfile::Builder::new().prefix("unsuid-test-").tempdir().unwrap();
    fs::set_permissions(d.path(), fs::Permissions::from_mode(0o755)).unwrap();
    d
}

fn target_dir() -> PathBuf {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_unsuid"));
    exe.parent().unwrap().to_path_buf()
}

const STANDINS: [&str; 6] = ["squashfuse", "mksquashfs", "fuse2fs", "mke2fs", "newuidmap", "newgidmap"];

/// Directory holding `unsuid` plus stand-ins for missing host tools,
/// copied somewhere every user can execute them from.
pub fn helper_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let bins = target_dir();
        if STANDINS.iter().any(|b| !bins.join(b).exists()) {
            let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
            let st = Command::new(cargo)
                .args(["build", "-q", "-p", "unsuid-standins", "--bins"])
                .status()
                .expect("cargo build stand-ins");
            assert!(st.success(), "building stand-in helpers failed");
        }
        let dir = PathBuf::from(format!("/tmp/unsuid-test-helpers-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::set_permissions(&dir, fs::Permissions::from_mode(0o755)).unwrap();
        for b in STANDINS.iter().chain(["unsuid"].iter()) {
            let dst = dir.join(b);
            fs::copy(bins.join(b), &dst).unwrap();
            fs::set_permissions(&dst, fs::Permissions::from_mode(0o755)).unwrap();
        }
        dir
    })
}

pub fn unsuid_bin() -> PathBuf {
    helper_dir().join("unsuid")
}

/// Real tool on PATH if installed, else the stand-in.
pub fn tool(name: &str) -> PathBuf {
    if let Some(p) = which(name) {
        return p;
    }
    helper_dir().join(name)
}

pub fn which(name: &str) -> Option<PathBuf> {
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|d| d.join(name))
            .find(|p| p.metadata().map(|m| m.is_file() && m.mode() & 0o111 != 0).unwrap_or(false))
    })
}

/// PATH-like list for `UNSUID_HELPER_PATH`: real tools win over stand-ins.
pub fn helper_path_env() -> String {
    let mut dirs: Vec<String> = std::env::var("PATH")
        .unwrap_or_default()
        .split(':')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    dirs.push(helper_dir().display().to_string());
    dirs.join(":")
}

/// A character device node usable as `/dev/fuse` by anyone, for giving the
/// unprivileged test user FUSE access on hosts where the node is 0600.
fn open_fuse_node() -> Option<&'static CString> {
    static NODE: OnceLock<Option<(tempfile::TempDir, CString)>> = OnceLock::new();
    NODE.get_or_init(|| {
        let d = open_tempdir();
        let p = d.path().join("fuse");
        let c = CString::new(p.as_os_str().as_encoded_bytes()).unwrap();
        let dev = libc::makedev(10, 229);
        // SAFETY: valid path.
        if unsafe { libc::mknod(c.as_ptr(), libc::S_IFCHR | 0o666, dev) } != 0 {
            return None;
        }
        fs::set_permissions(&p, fs::Permissions::from_mode(0o666)).ok()?;
        Some((d, c))
    })
    .as_ref()
    .map(|(_, c)| c)
}

/// Arranges for `cmd` to run as [`TEST_UID`] when the tests run as root,
/// with `/dev/fuse` usable by that user in a private mount namespace.
/// Without root it runs as the current user.
pub fn as_test_user(cmd: &mut Command) -> &mut Command {
    if !is_root() {
        return cmd;
    }
    let node = open_fuse_node().cloned();
    // SAFETY: only raw syscalls on prepared buffers run in the child.
    unsafe {
        cmd.pre_exec(move || {
            if let Some(node) = &node {
                if libc::unshare(libc::CLONE_NEWNS) != 0 {
                    return Err(io::Error::last_os_error());
                }
                let none = c"none";
                if libc::mount(
                    none.as_ptr(),
                    c"/".as_ptr(),
                    std::ptr::null(),
                    libc::MS_REC | libc::MS_PRIVATE,
                    std::ptr::null(),
                ) != 0
                {
                    return Err(io::Error::last_os_error());
                }
                if libc::mount(
                    node.as_ptr(),
                    c"/dev/fuse".as_ptr(),
                    std::ptr::null(),
                    libc::MS_BIND,
                    std::ptr::null(),
                ) != 0
                {
                    return Err(io::Error::last_os_error());
                }
            }
            if libc::setgroups(0, std::ptr::null()) != 0
                || libc::setresgid(TEST_GID, TEST_GID, TEST_GID) != 0
                || libc::setresuid(TEST_UID, TEST_UID, TEST_UID) != 0
            {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
    cmd
}

/// The uid the container side runs as.
pub fn test_uid() -> u32 {
    if is_root() {
        TEST_UID
    } else {
        nix::unistd::getuid().as_raw()
    }
}

pub fn test_gid() -> u32 {
    if is_root() {
        TEST_GID
    } else {
        nix::unistd::getgid().as_raw()
    }
}

/// Hands `path` (recursively) to the test user.
pub fn give_to_test_user(path: &Path) {
    if !is_root() {
        return;
    }
    for e in walk(path) {
        let _ = std::os::unix::fs::lchown(&e, Some(TEST_UID), Some(TEST_GID));
    }
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![root.to_path_buf()];
    let mut i = 0;
    while i < out.len() {
        let p = out[i].clone();
        if p.symlink_metadata().map(|m| m.is_dir()).unwrap_or(false) {
            let mut kids: Vec<_> = fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()).collect();
            kids.sort();
            out.extend(kids);
        }
        i += 1;
    }
    out
}

/// Runs the `unsuid` binary as the test user with a minimal environment.
pub fn run_unsuid(args: &[&str], cwd: &Path) -> Output {
    let mut cmd = Command::new(unsuid_bin());
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("HOME", cwd)
        .env("UNSUID_HELPER_PATH", helper_path_env())
        .stdin(Stdio::null());
    as_test_user(&mut cmd).output().expect("running unsuid")
}

/// Copies host programs and the shared libraries they need into `root`,
/// so the sandbox can run them.
pub fn install_programs(root: &Path, programs: &[&str]) {
    // Mirror merged-/usr links such as /bin -> usr/bin.
    for top in ["bin", "sbin", "lib", "lib64"] {
        let host = Path::new("/").join(top);
        if let Ok(target) = fs::read_link(&host) {
            let dst = root.join(top);
            if dst.symlink_metadata().is_err() {
                fs::create_dir_all(root.join(&target)).unwrap();
                std::os::unix::fs::symlink(target, dst).unwrap();
            }
        }
    }
    for prog in programs {
        let path = which(prog).unwrap_or_else(|| panic!("{prog} not found on the host"));
        let out = Command::new("ldd").arg(&path).output().expect("ldd");
        let text = String::from_utf8_lossy(&out.stdout);
        let mut files = vec![path.clone()];
        for tok in text.split_whitespace() {
            if tok.starts_with('/') {
                files.push(PathBuf::from(tok));
            }
        }
        for f in files {
            // Keep the name the program was found under; resolve links for content.
            let dst = root.join(f.strip_prefix("/").unwrap());
            fs::create_dir_all(dst.parent().unwrap()).unwrap();
            if !dst.exists() {
                fs::copy(&f, &dst).unwrap();
            }
        }
    }
}

/// A fake squashfs payload: the magic and some bytes. Enough for the
/// planner, which never reads past the header.
pub fn fake_cif(dir: &Path, name: &str, with_overlay: bool) -> PathBuf {
    let payload = dir.join(format!("{name}.payload"));
    let mut bytes = b"hsqs".to_vec();
    bytes.resize(8192, 0);
    fs::write(&payload, &bytes).unwrap();
    let mut parts = vec![PartitionSource::new(PartitionKind::Squashfs, PartitionRole::Rootfs, &payload)];
    if with_overlay {
        let ext = dir.join(format!("{name}.ext"));
        let mut e = vec![0u8; 1 << 16];
        e[1080] = 0x53;
        e[1081] = 0xEF;
        fs::write(&ext, e).unwrap();
        parts.push(PartitionSource::new(PartitionKind::Extfs, PartitionRole::Overlay, ext));
    }
    let out = dir.join(name);
    imagefmt::write_cif(&parts, &out).unwrap();
    out
}

/// Builds a real squashfs of `src` with the chosen mksquashfs.
pub fn mksquashfs(src: &Path, out: &Path) {
    let st = Command::new(tool("mksquashfs"))
        .arg(src)
        .arg(out)
        .args(["-noappend", "-no-xattrs"])
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.success(), "mksquashfs failed");
}

/// A synthetic profile with the given helper paths present.
pub fn profile_with(helpers: &[Helper]) -> HostProfile {
    let mut p = HostProfile::bare(TEST_UID, TEST_GID);
    for h in helpers {
        p.set_helper(*h, Some(PathBuf::from(format!("/usr/bin/{}", h.binary_name()))));
    }
    p
}

pub fn with_subids(mut p: HostProfile) -> HostProfile {
    p.subid_mapped = true;
    p.subuid_ranges = vec![SubIdRange::new(100000, 65536).unwrap()];
    p.subgid_ranges = vec![SubIdRange::new(100000, 65536).unwrap()];
    p
}

/// What a tree looks like from inside, for comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Dir,
    File(Vec<u8>),
    Symlink(PathBuf),
    Other,
}

/// Path (relative) -> node, following nothing.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Node> {
    let mut out = BTreeMap::new();
    for p in walk(root).into_iter().skip(1) {
        let rel = p.strip_prefix(root).unwrap().to_path_buf();
        let m = p.symlink_metadata().unwrap();
        let n = if m.is_dir() {
            Node::Dir
        } else if m.file_type().is_symlink() {
            Node::Symlink(fs::read_link(&p).unwrap())
        } else if m.is_file() {
            let mut buf = Vec::new();
            fs::File::open(&p).unwrap().read_to_end(&mut buf).unwrap();
            Node::File(buf)
        } else {
            Node::Other
        };
        out.insert(rel, n);
    }
    out
}

/// Owner ids of every entry, relative path -> (uid, gid).
pub fn ownership(root: &Path) -> BTreeMap<PathBuf, (u32, u32)> {
    walk(root)
        .into_iter()
        .skip(1)
        .map(|p| {
            let m = p.symlink_metadata().unwrap();
            (p.strip_prefix(root).unwrap().to_path_buf(), (m.uid(), m.gid()))
        })
        .collect()
}

/// Drops the current (forked) process to the test user when running as
/// root. Keeps the process dumpable so `/proc/self` stays writable by it.
pub fn become_test_user() -> Result<(), String> {
    if !is_root() {
        return Ok(());
    }
    // SAFETY: plain syscalls in a forked child.
    unsafe {
        if libc::setgroups(0, std::ptr::null()) != 0
            || libc::setresgid(TEST_GID, TEST_GID, TEST_GID) != 0
            || libc::setresuid(TEST_UID, TEST_UID, TEST_UID) != 0
        {
            return Err(format!("dropping to {TEST_UID}: {}", io::Error::last_os_error()));
        }
        libc::prctl(libc::PR_SET_DUMPABLE, 1, 0, 0, 0);
    }
    Ok(())
}

/// Runs `f` in a forked child and returns what it reported. A panic in the
/// child comes back as an error. The caller must be single-threaded.
pub fn in_fork(f: impl FnOnce() -> Result<String, String>) -> Result<String, String> {
    use std::io::Write;
    let (r, w) = nix::unistd::pipe().map_err(|e| e.to_string())?;
    // SAFETY: the caller guarantees a single-threaded process.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(format!("fork: {}", io::Error::last_os_error()));
    }
    if pid == 0 {
        drop(r);
        let mut out = fs::File::from(w);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panic: {msg}"))
            });
        let text = match result {
            Ok(s) => format!("O{s}"),
            Err(e) => format!("E{e}"),
        };
        let _ = out.write_all(text.as_bytes());
        drop(out);
        // SAFETY: leave without running the parent's destructors.
        unsafe { libc::_exit(0) };
    }
    drop(w);
    let mut text = String::new();
    let _ = fs::File::from(r).read_to_string(&mut text);
    let mut status = 0;
    // SAFETY: waiting on our own child.
    unsafe { libc::waitpid(pid, &mut status, 0) };
    match text.split_at_checked(1) {
        Some(("O", s)) => Ok(s.to_string()),
        Some((_, e)) => Err(e.to_string()),
        None => Err(format!("child died without reporting (wait status {status:#x})")),
    }
}
