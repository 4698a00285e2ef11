use clap::Parser;
use interprompt::cli::{run, Cli, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0.
            if e.use_stderr() {
                let _ = e.print();
                std::process::exit(EXIT_USAGE);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    std::process::exit(run(cli));
}
