use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;
use smope::continual::{median, AblationStage};

use crate::config::CliError;

/// Rows of a comma-separated file with a header line.
struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Csv { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("missing column {}", name)))
    }

    fn float(row: &[String], i: usize) -> Option<f64> {
        row.get(i).and_then(|v| v.parse().ok())
    }
}

fn required_files(mode: Option<&str>) -> Vec<&'static str> {
    let mut files = vec!["config.toml", "summary.json"];
    files.extend_from_slice(match mode {
        Some("continual") => &["metrics.jsonl", "accuracy.csv", "usage.csv"][..],
        Some("ablation") => &["metrics.jsonl", "ablation.csv"][..],
        Some("noise-sweep") => &["metrics.jsonl", "sweep.csv"][..],
        Some("rate") => &["rate.csv"][..],
        _ => &[][..],
    });
    files
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.4}", v))
}

/// `seed layer head expert_1 ...` rows from a usage CSV with a leading seed column.
fn usage_heatmap(path: &Path) -> Result<String, CliError> {
    let csv = Csv::read(path)?;
    let (s, l, h, e, f) = (
        csv.column("seed")?,
        csv.column("layer")?,
        csv.column("head")?,
        csv.column("expert")?,
        csv.column("frequency")?,
    );
    let mut cells: BTreeMap<(u64, usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    let mut experts = 0;
    for row in &csv.rows {
        let key = |i: usize| row[i].parse::<usize>().unwrap_or(0);
        let expert = key(e);
        experts = experts.max(expert + 1);
        cells
            .entry((row[s].parse().unwrap_or(0), key(l), key(h)))
            .or_default()
            .insert(expert, Csv::float(row, f).unwrap_or(f64::NAN));
    }
    let mut out = String::from("seed\tlayer\thead");
    for j in 0..experts {
        let _ = write!(out, "\texpert_{}", j);
    }
    out.push('\n');
    for ((seed, layer, head), row) in &cells {
        let _ = write!(out, "{}\t{}\t{}", seed, layer, head);
        for j in 0..experts {
            let _ = write!(out, "\t{}", row.get(&j).map_or(String::new(), |v| format!("{:.6}", v)));
        }
        out.push('\n');
    }
    Ok(out)
}

fn continual_report(dir: &Path, text: &mut String, files: &mut Vec<(String, String)>) -> Result<(), CliError> {
    let mut curve = String::from("seed\ttask\taverage_accuracy\n");
    let metrics = fs::read_to_string(dir.join("metrics.jsonl"))?;
    let mut finals = Vec::new();
    for line in metrics.lines().filter(|l| !l.is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("metrics.jsonl: {}", e)))?;
        match v["kind"].as_str() {
            Some("task") => {
                let _ = writeln!(curve, "{}\t{}\t{:.6}", v["seed"], v["task"], v["average"].as_f64().unwrap_or(f64::NAN));
            }
            Some("final") => finals.push((v["seed"].clone(), v["faa"].as_f64(), v["caa"].as_f64())),
            _ => {}
        }
    }
    let _ = writeln!(text, "seed      FAA      CAA");
    for (seed, faa, caa) in &finals {
        let _ = writeln!(text, "{:<8} {:>7} {:>8}", seed.to_string(), fmt_opt(*faa), fmt_opt(*caa));
    }
    let faa: Vec<f64> = finals.iter().filter_map(|f| f.1).collect();
    let caa: Vec<f64> = finals.iter().filter_map(|f| f.2).collect();
    let _ = writeln!(text, "median   {:>7} {:>8}", fmt_opt(median(&faa)), fmt_opt(median(&caa)));
    files.push(("average_accuracy.tsv".into(), curve));
    files.push(("usage_heatmap.tsv".into(), usage_heatmap(&dir.join("usage.csv"))?));
    Ok(())
}

fn ablation_report(dir: &Path, text: &mut String, files: &mut Vec<(String, String)>) -> Result<(), CliError> {
    let csv = Csv::read(&dir.join("ablation.csv"))?;
    let (st, faa, caa) = (csv.column("stage")?, csv.column("faa")?, csv.column("caa")?);
    let mut tsv = String::from("stage\tmedian_faa\tmedian_caa\truns\n");
    let _ = writeln!(text, "{:<30} {:>10} {:>10} {:>5}", "Training strategy", "FAA", "CAA", "runs");
    for stage in AblationStage::ALL {
        let key = serde_json::to_value(stage)?;
        let rows: Vec<&Vec<String>> = csv.rows.iter().filter(|r| Some(r[st].as_str()) == key.as_str()).collect();
        if rows.is_empty() {
            continue;
        }
        let f: Vec<f64> = rows.iter().filter_map(|r| Csv::float(r, faa)).collect();
        let c: Vec<f64> = rows.iter().filter_map(|r| Csv::float(r, caa)).collect();
        let (mf, mc) = (fmt_opt(median(&f)), fmt_opt(median(&c)));
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}", stage.label(), mf, mc, rows.len());
        let _ = writeln!(text, "{:<30} {:>10} {:>10} {:>5}", stage.label(), mf, mc, rows.len());
    }
    files.push(("ablation.tsv".into(), tsv));
    Ok(())
}

fn sweep_report(dir: &Path, text: &mut String, files: &mut Vec<(String, String)>) -> Result<(), CliError> {
    let csv = Csv::read(&dir.join("sweep.csv"))?;
    let (ep, faa, caa, ent) = (
        csv.column("epsilon")?,
        csv.column("faa")?,
        csv.column("caa")?,
        csv.column("mean_entropy")?,
    );
    let mut order: Vec<String> = Vec::new();
    for r in &csv.rows {
        if !order.contains(&r[ep]) {
            order.push(r[ep].clone());
        }
    }
    order.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse().unwrap_or(0.0)));
    let mut tsv = String::from("epsilon\tmedian_faa\tmedian_caa\tmedian_entropy\n");
    let _ = writeln!(text, "{:<8} {:>10} {:>10} {:>10}", "epsilon", "FAA", "CAA", "entropy");
    for eps in &order {
        let rows: Vec<&Vec<String>> = csv.rows.iter().filter(|r| &r[ep] == eps).collect();
        let col = |i: usize| -> Vec<f64> { rows.iter().filter_map(|r| Csv::float(r, i)).collect() };
        let (f, c, e) = (fmt_opt(median(&col(faa))), fmt_opt(median(&col(caa))), fmt_opt(median(&col(ent))));
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}", eps, f, c, e);
        let _ = writeln!(text, "{:<8} {:>10} {:>10} {:>10}", eps, f, c, e);
        let usage = dir.join(format!("eps_{}", eps)).join("usage.csv");
        if usage.exists() {
            files.push((format!("usage_heatmap_eps_{}.tsv", eps), usage_heatmap(&usage)?));
        }
    }
    files.push(("noise_sweep.tsv".into(), tsv));
    Ok(())
}

fn rate_report(dir: &Path, text: &mut String, files: &mut Vec<(String, String)>) -> Result<(), CliError> {
    let csv = Csv::read(&dir.join("rate.csv"))?;
    let (n_col, v_col) = (csv.column("n")?, csv.column("voronoi_loss")?);
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &csv.rows {
        if let (Ok(n), Some(v)) = (r[n_col].parse(), Csv::float(r, v_col)) {
            by_n.entry(n).or_default().push(v);
        }
    }
    let mut tsv = String::from("n\tmedian_voronoi_loss\truns\n");
    let _ = writeln!(text, "{:<8} {:>14} {:>5}", "n", "median loss", "runs");
    for (n, v) in &by_n {
        let m = median(v).unwrap_or(f64::NAN);
        let _ = writeln!(tsv, "{}\t{:.6e}\t{}", n, m, v.len());
        let _ = writeln!(text, "{:<8} {:>14.6e} {:>5}", n, m, v.len());
    }
    files.push(("rate.tsv".into(), tsv));
    Ok(())
}

/// Writes `report.txt` and the TSV files into `dir`; returns the report text.
pub fn emit_report(dir: &Path) -> Result<String, CliError> {
    let summary_path = dir.join("summary.json");
    let summary: Option<Value> = fs::read_to_string(&summary_path)
        .ok()
        .map(|t| serde_json::from_str(&t))
        .transpose()
        .map_err(|e| CliError::Config(format!("{}: {}", summary_path.display(), e)))?;
    let mode = summary.as_ref().and_then(|s| s["mode"].as_str().map(str::to_string));
    let failed = summary.as_ref().is_some_and(|s| s["status"] != "ok");
    let expected = if failed { required_files(None) } else { required_files(mode.as_deref()) };
    let missing: Vec<&str> = expected.into_iter().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "{} is missing: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let summary = summary.unwrap_or(Value::Null);
    let mode = mode.unwrap_or_default();
    let mut text = format!("mode: {}\nstatus: {}\n", mode, summary["status"].as_str().unwrap_or("unknown"));
    let mut files = Vec::new();
    if failed {
        let _ = writeln!(text, "error: {}", summary["error"].as_str().unwrap_or("unknown"));
    } else {
        text.push('\n');
        match mode.as_str() {
            "continual" => continual_report(dir, &mut text, &mut files)?,
            "ablation" => ablation_report(dir, &mut text, &mut files)?,
            "noise-sweep" => sweep_report(dir, &mut text, &mut files)?,
            "rate" => {
                rate_report(dir, &mut text, &mut files)?;
                let slope = summary["slope"].as_f64();
                let _ = writeln!(
                    text,
                    "\nlog-log slope: {}",
                    slope.map_or("undefined (degenerate)".into(), |s| format!("{:.4}", s))
                );
                let _ = writeln!(text, "failed fits: {}", summary["failures"]);
            }
            other => return Err(CliError::Config(format!("unknown mode {:?} in summary.json", other))),
        }
    }
    for (name, content) in &files {
        fs::write(dir.join(name), content)?;
    }
    fs::write(dir.join("report.txt"), &text)?;
    Ok(text)
}
