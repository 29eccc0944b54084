use clap::Parser;
use topk_uncert::cli::{run, with_worker_pool, Cli};

fn main() {
    let cli = Cli::parse();
    let result = with_worker_pool(|| run(cli)).and_then(|r| r);
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
