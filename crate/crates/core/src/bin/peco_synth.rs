//! Writes the synthetic shapes dataset to disk, as a class-per-folder image
//! directory or as one packed binary file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use peco::pipeline::{save_image_directory, save_packed};
use peco::numerics::rng::seeded_rng;
use peco::synth;

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    /// PNG files under one subdirectory per class
    ImageDirectory,
    /// Single packed binary file with labels
    PackedBinary,
}

#[derive(Parser)]
#[command(name = "peco-synth", about = "Generate the synthetic shapes dataset", version)]
struct Cli {
    /// Number of images
    #[arg(long, default_value_t = 5000)]
    count: usize,
    /// Square image size in pixels
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::PackedBinary)]
    format: OutFormat,
    /// Output directory or file
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut rng = seeded_rng(cli.seed);
    let result = synth::generate(cli.count, cli.size, &mut rng).and_then(|(images, labels)| {
        match cli.format {
            OutFormat::ImageDirectory => {
                save_image_directory(&cli.out, &images, Some(&labels), Some(&synth::CLASS_NAMES))
            }
            OutFormat::PackedBinary => save_packed(&cli.out, &images, Some(&labels)),
        }
    });
    match result {
        Ok(()) => {
            println!(
                "{} images, {}x{}, {} classes -> {}",
                cli.count,
                cli.size,
                cli.size,
                synth::NUM_CLASSES,
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
