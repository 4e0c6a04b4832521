mod eval;
mod prepare;
mod report;
mod train;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context};

use dpua_core::annotation::{parse_dataset, FieldPolicy};
use dpua_core::{AnnotatedSample, TaskKind};

use crate::cli::{Cli, Command};
use crate::error::CliResult;

pub use eval::{evaluate_parallel, eval};
pub use prepare::prepare;
pub use report::report;
pub use train::{train_dp, train_ua};

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::TrainDp(a) => train_dp(&a),
        Command::TrainUa(a) => train_ua(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

/// Load a dataset file. Without a task, the records' own task field is used
/// and must be the same on every line.
pub fn read_dataset(
    path: &Path,
    task: Option<TaskKind>,
    lenient: bool,
) -> anyhow::Result<Vec<AnnotatedSample>> {
    let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    let policy = if lenient {
        FieldPolicy::Lenient
    } else {
        FieldPolicy::Strict
    };
    let samples = parse_dataset(BufReader::new(file), task, policy)
        .with_context(|| format!("invalid dataset {}", path.display()))?;
    if let Some(first) = samples.first() {
        if let Some(other) = samples.iter().find(|s| s.task != first.task) {
            bail!(
                "dataset {} mixes tasks `{}` and `{}`",
                path.display(),
                first.task.name(),
                other.task.name()
            );
        }
    }
    Ok(samples)
}

/// Left-aligned plain-text table.
pub fn format_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
