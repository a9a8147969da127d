use clap::Parser;

fn main() {
    let cli = fp8fed::cli::Cli::parse();
    let code = match fp8fed::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    };
    std::process::exit(code);
}
