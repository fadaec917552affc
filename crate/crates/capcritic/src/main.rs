use std::process::exit;

fn main() {
    if let Err(e) = capcritic::cli::run() {
        eprintln!("error: {e}");
        exit(e.exit_code() as i32);
    }
}
