//! Runs a command in an image with emulated root, as the command-line tool
//! would.
//!
//! ```text
//! cargo run --example run -- image.sif id
//! ```

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(image) = args.next() else {
        eprintln!("usage: run IMAGE COMMAND...");
        std::process::exit(1);
    };
    let mut argv = vec!["unsuid".to_string(), "exec".into(), "--fakeroot".into(), image];
    argv.extend(args);
    let code = unsuid::cli::run_cli_with(argv, &unsuid::host_env(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
