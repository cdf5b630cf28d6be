use clap::Parser;
use conledger_node::bench::PeakAlloc;
use conledger_node::cli::{self, Cli};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(cli::run(Cli::parse()));
}
