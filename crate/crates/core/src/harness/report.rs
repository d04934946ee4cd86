use std::fs;
use std::path::{Path, PathBuf};

use super::run::{read_status, RunStatus, METRICS_CSV};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Stand-in for a metric a run did not report.
pub const MISSING: &str = "NA";

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

const COLUMNS: [&str; 6] = ["Test-Acc", "Val-Acc", "Test-MSE", "Fea-MSE", "SSIM", "PSNR"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub run: String,
    /// One entry per metric column; `None` when the run lacks it.
    pub values: Vec<Option<String>>,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

fn read_row(dir: &Path, warnings: &mut Vec<String>) -> Result<Option<ReportRow>> {
    match read_status(dir) {
        Ok(s) if s.status == RunStatus::Ok => {}
        Ok(s) => {
            warnings.push(format!("skipping {}: run status {:?}", dir.display(), s.status));
            return Ok(None);
        }
        Err(_) => {
            warnings.push(format!("skipping {}: no completed run status", dir.display()));
            return Ok(None);
        }
    }
    let path = dir.join(METRICS_CSV);
    let mut rdr = match csv::Reader::from_path(&path) {
        Ok(r) => r,
        Err(_) => {
            warnings.push(format!("skipping {}: {} missing", dir.display(), METRICS_CSV));
            return Ok(None);
        }
    };
    let headers = rdr.headers()?.clone();
    let Some(record) = rdr.records().next().transpose()? else {
        warnings.push(format!("skipping {}: {} is empty", dir.display(), METRICS_CSV));
        return Ok(None);
    };
    let field = |name: &str| headers.iter().position(|h| h == name).and_then(|i| record.get(i)).map(str::to_string);
    let run = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut values = Vec::new();
    for name in MetricReport::HEADER {
        let v = field(name);
        if v.is_none() {
            warnings.push(format!("{run}: column {name} missing, filled with {MISSING}"));
        }
        values.push(v);
    }
    Ok(Some(ReportRow {
        dataset: field("dataset").unwrap_or_else(|| MISSING.into()),
        method: field("method").unwrap_or_else(|| MISSING.into()),
        run,
        values,
    }))
}

/// Collects the metrics of finished runs into `report.csv` and an aligned
/// `report.txt` under `out`, one row per run ordered by dataset then method.
pub fn render_report(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    let mut report = Report::default();
    for dir in run_dirs {
        if let Some(row) = read_row(dir, &mut report.warnings)? {
            report.rows.push(row);
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.rows.is_empty() {
        return Err(Error::MissingArtifact("no completed runs to report".into()));
    }
    report
        .rows
        .sort_by(|a, b| (&a.dataset, &a.method, &a.run).cmp(&(&b.dataset, &b.method, &b.run)));

    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let path = out.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["dataset", "method"];
    header.extend(MetricReport::HEADER);
    header.push("run");
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![r.dataset.clone(), r.method.clone()];
        rec.extend(r.values.iter().map(|v| v.clone().unwrap_or_else(|| MISSING.into())));
        rec.push(r.run.clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let path = out.join(REPORT_TXT);
    fs::write(&path, text_table(&report.rows)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(report)
}

fn short(v: &Option<String>) -> String {
    match v {
        None => MISSING.into(),
        Some(s) => match s.parse::<f64>() {
            Ok(x) if x.is_finite() => format!("{x:.4}"),
            _ => s.clone(),
        },
    }
}

/// Aligned table: text columns left-justified, numbers right-justified.
pub fn text_table(rows: &[ReportRow]) -> String {
    let mut cells: Vec<Vec<String>> = vec![];
    let mut head = vec!["Dataset".to_string(), "Method".to_string()];
    head.extend(COLUMNS.iter().map(|s| s.to_string()));
    head.push("Run".into());
    cells.push(head);
    for r in rows {
        let mut line = vec![r.dataset.clone(), r.method.clone()];
        line.extend(r.values.iter().map(short));
        line.push(r.run.clone());
        cells.push(line);
    }
    let ncol = cells[0].len();
    let widths: Vec<usize> = (0..ncol).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, line) in cells.iter().enumerate() {
        let parts: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c < 2 || c == ncol - 1 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (ncol - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
