use clap::Parser;
use vanish::cli::{run, Cli, Status};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match run(Cli::parse()) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e:#}");
            Status::Error
        }
    };
    std::process::exit(code as i32);
}
