use std::io::{stderr, stdout};

fn main() {
    if let Some(n) = upright::cli::thread_cap() {
        // Only fails if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let code = upright::cli::run(std::env::args_os(), &mut stdout().lock(), &mut stderr().lock());
    std::process::exit(code);
}
