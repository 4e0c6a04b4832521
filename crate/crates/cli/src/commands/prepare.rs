use anyhow::Context;

use dpua_core::annotation::{dataset_stats, generate_synthetic, write_dataset, SynthProfile};
use dpua_core::DatasetStats;

use super::{format_table, read_dataset};
use crate::cli::PrepareArgs;
use crate::error::{CliResult, ResultExt};
use crate::run::write_atomic;

pub fn prepare(args: &PrepareArgs) -> CliResult<()> {
    let samples = match (&args.input, args.synth) {
        (Some(path), _) => read_dataset(path, args.task, args.lenient).input()?,
        (None, Some(task)) => generate_synthetic(args.n, &SynthProfile::desk(task), args.seed)
            .context("generating synthetic corpus")
            .input()?,
        (None, None) => unreachable!("clap requires --input or --synth"),
    };
    let stats = dataset_stats(&samples).input()?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .input()?;
    }
    write_dataset(&args.output, &samples).input()?;
    if let Some(path) = &args.stats_json {
        let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
        write_atomic(path, json.as_bytes()).input()?;
    }

    let name = args.name.clone().unwrap_or_else(|| {
        args.output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let header: Vec<String> = DatasetStats::HEADER.iter().map(|s| s.to_string()).collect();
    print!("{}", format_table(&header, &[stats.row(&name)]));
    println!("wrote {} samples to {}", samples.len(), args.output.display());
    Ok(())
}
