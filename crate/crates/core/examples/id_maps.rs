//! Reads this process's uid map and the subordinate id ranges granted to
//! a user.
//!
//! ```text
//! cargo run --example id_maps -- [USER]
//! ```

use std::fs;

use unsuid::hostprobe::{detect_root_mapped_env, parse_subid};
use unsuid::idmap::{is_identity_map, map_to_outside, parse_id_map};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = fs::read_to_string("/proc/self/uid_map")?;
    let map = parse_id_map(&text)?;
    let euid = nix::unistd::geteuid().as_raw();
    println!("uid map: {} row(s), identity: {}", map.len(), is_identity_map(&map));
    println!("uid {euid} is {:?} outside", map_to_outside(&map, euid));
    println!("root-mapped namespace already: {}", detect_root_mapped_env(&text, euid)?);

    let user = std::env::args().nth(1).unwrap_or_else(|| std::env::var("USER").unwrap_or_else(|_| nix::unistd::getuid().to_string()));
    let uid = nix::unistd::getuid().as_raw();
    let content = fs::read_to_string("/etc/subuid").unwrap_or_default();
    let parsed = parse_subid(&content, &user, uid);
    for r in &parsed.ranges {
        println!("subuid range for {user}: {r:?}");
    }
    for d in &parsed.diagnostics {
        println!("note: {d}");
    }
    if parsed.ranges.is_empty() {
        println!("no subordinate uids for {user}");
    }
    Ok(())
}
