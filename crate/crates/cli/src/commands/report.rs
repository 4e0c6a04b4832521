use std::fs;

use anyhow::Context;

use dpua_core::metrics::EvalReport;

use super::format_table;
use crate::cli::ReportArgs;
use crate::error::{input_error, CliResult, ResultExt};
use crate::run::write_atomic;

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let mut paths: Vec<_> = fs::read_dir(&args.reports)
        .with_context(|| format!("reading {}", args.reports.display()))
        .input()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p).input()?;
        // other JSON files may share the directory
        if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
            reports.push(r);
        }
    }
    if reports.is_empty() {
        return Err(input_error(format!(
            "no evaluation reports in {}",
            args.reports.display()
        )));
    }

    let header: Vec<String> = ["Run", "Data", "Acc.", "F1", "MAE", "Coef.", "Unan. Acc.", "Outer (model/human)"]
        .map(String::from)
        .to_vec();
    let row = |r: &EvalReport| {
        let data = if r.source == r.target {
            r.target.clone()
        } else {
            format!("{}->{}", r.source, r.target)
        };
        vec![
            r.run_id.clone(),
            data,
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.macro_f1),
            format!("{:.4}", r.mean_mae),
            opt(r.pearson_coef),
            opt(r.unanimous_accuracy),
            format!("{:.3}/{:.3}", r.outer_mass_model, r.outer_mass_human),
        ]
    };
    let in_task: Vec<Vec<String>> = reports.iter().filter(|r| r.source == r.target).map(row).collect();
    let transfer: Vec<Vec<String>> = reports.iter().filter(|r| r.source != r.target).map(row).collect();

    let mut md = String::from("# Evaluation summary\n");
    if !in_task.is_empty() {
        print!("{}", format_table(&header, &in_task));
        md.push_str("\n## In-task\n\n");
        md.push_str(&markdown(&header, &in_task));
    }
    if !transfer.is_empty() {
        println!("\ntransfer:");
        print!("{}", format_table(&header, &transfer));
        md.push_str("\n## Transfer\n\n");
        md.push_str(&markdown(&header, &transfer));
    }

    md.push_str("\n## Confidence histograms (p_pos, model/human counts)\n\n");
    let bins = &reports[0].histogram.edges;
    let mut hist_header = vec!["Run".to_string(), "Data".to_string()];
    let same_bins = reports.iter().all(|r| &r.histogram.edges == bins);
    if same_bins {
        hist_header.extend(bins.windows(2).map(|w| format!("{:.1}-{:.1}", w[0], w[1])));
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                let mut v = vec![r.run_id.clone(), format!("{}->{}", r.source, r.target)];
                v.extend(
                    r.histogram
                        .model
                        .iter()
                        .zip(&r.histogram.human)
                        .map(|(m, h)| format!("{m}/{h}")),
                );
                v
            })
            .collect();
        md.push_str(&markdown(&hist_header, &rows));
    } else {
        md.push_str("(reports use different bin counts; see the per-report CSV files)\n");
    }

    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.reports.join("summary.md"));
    write_atomic(&out, md.as_bytes()).input()?;
    println!("wrote {}", out.display());
    Ok(())
}
