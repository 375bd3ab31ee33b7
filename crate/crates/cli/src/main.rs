use clap::Parser;

fn main() {
    let cli = cellfree_cli::Cli::parse();
    if let Err(f) = cellfree_cli::execute(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
