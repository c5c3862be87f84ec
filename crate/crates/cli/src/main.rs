use clap::Parser;
use safcov_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            print!("{}", summary.text);
            println!("manifest: {}", summary.manifest.display());
        }
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            std::process::exit(e.exit_code());
        }
    }
}
