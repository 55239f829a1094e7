//! Walks a few host configurations through identity selection and shows
//! which root-emulation method each one ends up with.

use unsuid::hostprobe::{Helper, HostProfile, SubIdRange};
use unsuid::planner::{select_identity, RuntimeRequest};

fn host(name: &str, edit: impl FnOnce(&mut HostProfile)) -> (String, HostProfile) {
    let mut p = HostProfile::bare(1000, 1000);
    edit(&mut p);
    (name.to_string(), p)
}

fn main() {
    let hosts = [
        host("subuid entries + newuidmap", |p| {
            p.subid_mapped = true;
            p.subuid_ranges = SubIdRange::new(100000, 65536).into_iter().collect();
            p.subgid_ranges = p.subuid_ranges.clone();
            p.set_helper(Helper::Newuidmap, Some("/usr/bin/newuidmap".into()));
            p.set_helper(Helper::Newgidmap, Some("/usr/bin/newgidmap".into()));
        }),
        host("user namespaces + fakeroot", |p| {
            p.userns_available = true;
            p.set_helper(Helper::Fakeroot, Some("/usr/bin/fakeroot".into()));
        }),
        host("user namespaces only", |p| p.userns_available = true),
        host("setuid install + fakeroot", |p| {
            p.setuid_installed = true;
            p.set_helper(Helper::Fakeroot, Some("/usr/bin/fakeroot".into()));
        }),
        host("nothing", |_| {}),
    ];

    let mut req = RuntimeRequest::new("image.sif");
    req.fakeroot_requested = true;
    for (name, profile) in &hosts {
        match select_identity(profile, &req) {
            Ok(id) => {
                let maps: Vec<String> = id.uid_map_entries.iter().map(|e| e.to_string()).collect();
                println!("{name:28} {} [{}]", id.mode, maps.join(", "));
            }
            Err(e) => println!("{name:28} error: {e}"),
        }
    }
}
