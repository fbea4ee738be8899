use clap::Parser;

fn main() {
    let cli = axvec_workbench::Cli::parse();
    if let Err(e) = axvec_workbench::run(cli) {
        eprintln!("axvec: error: {e}");
        std::process::exit(1);
    }
}
