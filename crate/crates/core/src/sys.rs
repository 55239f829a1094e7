//! Thin wrappers over raw syscalls shared by the probing, mounting and
//! namespace code. Everything reachable from a forked child avoids heap
//! allocation so it stays safe when the parent had other threads.

use std::ffi::{CStr, CString, OsStr};
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

pub(crate) fn cstring(path: &Path) -> io::Result<CString> {
    CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "path contains NUL"))
}

/// Writes `data` to `path` with one `write(2)`. Id-map files reject
/// anything but a single write.
pub(crate) fn write_file_once(path: &CStr, data: &[u8]) -> io::Result<()> {
    // SAFETY: plain syscalls on a NUL-terminated path and a borrowed buffer.
    unsafe {
        let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CLOEXEC);
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        let n = libc::write(fd, data.as_ptr().cast(), data.len());
        let err = io::Error::last_os_error();
        libc::close(fd);
        if n < 0 {
            return Err(err);
        }
        if n as usize != data.len() {
            return Err(io::Error::new(io::ErrorKind::WriteZero, "short write"));
        }
    }
    Ok(())
}

/// Forks, runs `child` in the child process and `_exit`s with its return
/// value. Returns the child's exit status as a shell-style code.
pub(crate) fn fork_and_wait(child: impl FnOnce() -> i32) -> io::Result<i32> {
    // SAFETY: the child only runs `child` and then `_exit`s; callers keep
    // the closure to async-signal-safe work or accept the usual fork caveats.
    let pid = unsafe { libc::fork() };
    if pid < 0 {
        return Err(io::Error::last_os_error());
    }
    if pid == 0 {
        let code = child();
        unsafe { libc::_exit(code) };
    }
    wait_pid(pid)
}

pub(crate) fn wait_pid(pid: libc::pid_t) -> io::Result<i32> {
    let mut status = 0;
    loop {
        // SAFETY: waiting on our own child.
        let r = unsafe { libc::waitpid(pid, &mut status, 0) };
        if r == pid {
            return Ok(status_to_code(status));
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
}

/// Exit code for a raw wait status; signals map to 128 + signo.
pub(crate) fn status_to_code(status: libc::c_int) -> i32 {
    if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else if libc::WIFSIGNALED(status) {
        128 + libc::WTERMSIG(status)
    } else {
        1
    }
}

/// Decodes the octal escapes (`\040` etc.) the kernel uses in mountinfo.
fn unescape_mount_field(field: &str) -> PathBuf {
    let bytes = field.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' && i + 3 < bytes.len() && bytes[i + 1..i + 4].iter().all(|b| (b'0'..=b'7').contains(b)) {
            let v = (bytes[i + 1] - b'0') * 64 + (bytes[i + 2] - b'0') * 8 + (bytes[i + 3] - b'0');
            out.push(v);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    PathBuf::from(OsStr::from_bytes(&out))
}

/// Mount points listed in mountinfo text, in table order.
pub fn parse_mount_points(mountinfo: &str) -> Vec<PathBuf> {
    mountinfo
        .lines()
        .filter_map(|l| l.split(' ').nth(4))
        .map(unescape_mount_field)
        .collect()
}

pub fn mount_points() -> io::Result<Vec<PathBuf>> {
    Ok(parse_mount_points(&fs::read_to_string("/proc/self/mountinfo")?))
}

pub fn is_mount_point(path: &Path) -> bool {
    let target = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    mount_points()
        .map(|m| m.iter().any(|p| *p == target))
        .unwrap_or(false)
}

pub fn count_mounts_at(path: &Path) -> usize {
    let target = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    mount_points()
        .map(|m| m.iter().filter(|p| **p == target).count())
        .unwrap_or(0)
}

#[repr(C)]
struct CapHeader {
    version: u32,
    pid: libc::c_int,
}

#[repr(C)]
#[derive(Clone, Copy, Default)]
struct CapData {
    effective: u32,
    permitted: u32,
    inheritable: u32,
}

const CAP_VERSION_3: u32 = 0x2008_0522;

/// Copies the permitted capability set into the inheritable and ambient
/// sets so a non-root exec keeps it. Used for FUSE helpers that must mount
/// from inside a user namespace where they are not uid 0. Allocation-free.
pub(crate) fn raise_ambient_caps() -> io::Result<()> {
    let mut hdr = CapHeader {
        version: CAP_VERSION_3,
        pid: 0,
    };
    let mut data = [CapData::default(); 2];
    // SAFETY: capget/capset with correctly sized v3 structures.
    unsafe {
        if libc::syscall(libc::SYS_capget, &mut hdr as *mut CapHeader, data.as_mut_ptr()) != 0 {
            return Err(io::Error::last_os_error());
        }
        data[0].inheritable = data[0].permitted;
        data[1].inheritable = data[1].permitted;
        if libc::syscall(libc::SYS_capset, &mut hdr as *mut CapHeader, data.as_ptr()) != 0 {
            return Err(io::Error::last_os_error());
        }
        for cap in 0..64u32 {
            let word = data[(cap / 32) as usize].permitted;
            if word & (1 << (cap % 32)) != 0 {
                // Capabilities unknown to the kernel fail with EINVAL; skip them.
                libc::prctl(
                    libc::PR_CAP_AMBIENT,
                    libc::PR_CAP_AMBIENT_RAISE as libc::c_ulong,
                    cap as libc::c_ulong,
                    0 as libc::c_ulong,
                    0 as libc::c_ulong,
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mountinfo_fields_are_unescaped() {
        let info = "36 35 98:0 /mnt1 /mnt/with\\040space rw,noatime master:1 - ext3 /dev/root rw\n\
                    37 35 0:5 / /proc rw - proc proc rw\n";
        assert_eq!(
            parse_mount_points(info),
            vec![PathBuf::from("/mnt/with space"), PathBuf::from("/proc")]
        );
    }

    #[test]
    fn fork_reports_exit_code_and_signal() {
        assert_eq!(fork_and_wait(|| 7).unwrap(), 7);
        let code = fork_and_wait(|| unsafe {
            libc::raise(libc::SIGKILL);
            0
        })
        .unwrap();
        assert_eq!(code, 128 + libc::SIGKILL);
    }

    #[test]
    fn root_is_a_mount_point() {
        assert!(is_mount_point(Path::new("/")));
    }
}
