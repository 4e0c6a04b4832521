use std::path::PathBuf;
use std::thread;

use anyhow::Context;

use dpua_core::metrics::{evaluate_sample, EvalOptions, EvalRecord, EvalReport, MetricsError};
use dpua_core::policy::{load_checkpoint, ReferencePolicy};
use dpua_core::{AnnotatedSample, Split};

use super::{format_table, read_dataset};
use crate::cli::EvalArgs;
use crate::config::RunConfig;
use crate::error::{input_error, CliError, CliResult, Failure, ResultExt};
use crate::run::{read_manifest, Stage};

/// Score the test split on `workers` threads. Records come back in dataset
/// order, so the result does not depend on the thread count.
pub fn evaluate_parallel(
    policy: &ReferencePolicy,
    samples: &[AnnotatedSample],
    opts: &EvalOptions,
    workers: usize,
) -> Result<Vec<EvalRecord>, MetricsError> {
    let test: Vec<&AnnotatedSample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let chunk = test.len().div_ceil(workers.max(1));
    thread::scope(|scope| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| evaluate_sample(policy, s, opts))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(test.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn parse_stage(name: &str) -> CliResult<Stage> {
    match name {
        "base" => Ok(Stage::Base),
        "dp" => Ok(Stage::Dp),
        "ua" => Ok(Stage::Ua),
        other => Err(input_error(format!("unknown stage `{other}` (base, dp or ua)"))),
    }
}

struct Target {
    policy: ReferencePolicy,
    /// Report label: run id plus stage, or the checkpoint directory name.
    label: String,
    config: Option<RunConfig>,
    report_dir: Option<PathBuf>,
}

fn resolve(args: &EvalArgs) -> CliResult<Target> {
    if let Some(ckpt) = &args.checkpoint {
        if args.stage.is_some() {
            return Err(input_error("--stage only applies to --run-dir"));
        }
        let policy = load_checkpoint(ckpt)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))
            .input()?;
        let label = ckpt
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let run_cfg = args
            .run_dir
            .as_ref()
            .and_then(|r| read_manifest(r).ok())
            .map(|m| m.latest_config().clone());
        return Ok(Target {
            policy,
            label,
            config: run_cfg,
            report_dir: args.run_dir.as_ref().map(|r| r.join("reports")),
        });
    }
    let root = args.run_dir.as_ref().expect("clap requires --run-dir or --checkpoint");
    let manifest = read_manifest(root).input()?;
    let entry = match &args.stage {
        Some(name) => {
            let stage = parse_stage(name)?;
            manifest
                .entry(stage)
                .ok_or_else(|| input_error(format!("run has no {name} checkpoint")))?
        }
        None => manifest
            .latest()
            .ok_or_else(|| input_error("run has no checkpoints"))?,
    };
    let policy = manifest.load_stage(root, entry.stage).input()?;
    let config = if entry.stage == Stage::Ua {
        manifest.latest_config().clone()
    } else {
        manifest.config.clone()
    };
    Ok(Target {
        policy,
        label: format!("{}.{}", manifest.run_id, entry.stage.name()),
        config: Some(config),
        report_dir: Some(root.join("reports")),
    })
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let target = resolve(args)?;
    let config = match &args.config {
        Some(path) => Some(RunConfig::load(path).input()?.effective()),
        None => target.config.clone(),
    };
    let opts = config.as_ref().map(|c| c.eval).unwrap_or_default();
    let workers = args
        .workers
        .or(config.as_ref().map(|c| c.run.workers))
        .unwrap_or(1);
    if workers == 0 {
        return Err(input_error("--workers must be positive"));
    }
    let dataset = args
        .dataset
        .clone()
        .or_else(|| config.as_ref().map(|c| c.data.path.clone()))
        .ok_or_else(|| input_error("no dataset: pass --dataset or a config with data.path"))?;
    let lenient = config.as_ref().is_some_and(|c| c.data.lenient);
    let samples = read_dataset(&dataset, args.task, lenient).input()?;
    let task = samples
        .first()
        .map(|s| s.task)
        .ok_or_else(|| input_error(format!("dataset {} is empty", dataset.display())))?;
    let report_dir = args
        .report_dir
        .clone()
        .or(target.report_dir)
        .ok_or_else(|| input_error("no report directory: pass --report-dir"))?;

    let records = evaluate_parallel(&target.policy, &samples, &opts, workers).map_err(|e| {
        let failure = match e {
            MetricsError::EmptyEvalSet => Failure::Input,
            _ => Failure::Training,
        };
        CliError {
            failure,
            error: anyhow::Error::new(e)
                .context(format!("evaluating on {}", dataset.display())),
        }
    })?;
    let source = args.transfer_from.unwrap_or(task);
    let report = EvalReport::build(
        &records,
        &target.label,
        source.name(),
        task.name(),
        opts.histogram_bins,
    )
    .input()?;
    let (json, csv) = report.write(&report_dir).input()?;

    println!("{}", report.summary_row());
    let h = &report.histogram;
    let rows: Vec<Vec<String>> = (0..h.model.len())
        .map(|i| {
            vec![
                format!("[{:.2}, {:.2}{}", h.edges[i], h.edges[i + 1], if i + 1 == h.model.len() { "]" } else { ")" }),
                h.model[i].to_string(),
                h.human[i].to_string(),
            ]
        })
        .collect();
    let header = ["p_pos bin", "model", "human"].map(String::from);
    print!("{}", format_table(&header, &rows));
    println!(
        "outer-bin mass: model {:.3}, human {:.3}; parse-valid {:.3}",
        report.outer_mass_model, report.outer_mass_human, report.parse_valid_rate
    );
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}
