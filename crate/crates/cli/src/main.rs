use clap::Parser;
use predattn_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    for path in run(&cli)? {
        println!("{}", path.display());
    }
    Ok(())
}
