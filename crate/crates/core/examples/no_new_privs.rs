//! Sets no_new_privs in a child process and shows that the flag sticks
//! while the parent is unaffected.

use unsuid::nsexec::{apply_no_new_privs, no_new_privs_set};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("parent before: {}", no_new_privs_set()?);
    // SAFETY: single-threaded at this point.
    match unsafe { nix::unistd::fork() }? {
        nix::unistd::ForkResult::Child => {
            let ok = apply_no_new_privs().is_ok() && no_new_privs_set().unwrap_or(false);
            println!("child after:   {ok}");
            std::process::exit(if ok { 0 } else { 1 });
        }
        nix::unistd::ForkResult::Parent { child } => {
            nix::sys::wait::waitpid(child, None)?;
        }
    }
    println!("parent after:  {}", no_new_privs_set()?);
    Ok(())
}
