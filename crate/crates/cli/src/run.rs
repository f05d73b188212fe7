use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};
use smope::continual::{
    median, pretrain_backbone, run_continual, with_epsilon, AblationStage, ContinualConfig,
    MetricsRecord, RunOutput,
};
use smope::model::save_checkpoint;
use smope::routing::write_usage_csv;
use smope::theory::{rate_experiment, write_rate_csv};

use crate::config::{CliError, ExperimentMode, LoadedConfig};

/// Appends JSON lines and flushes after each, so partial runs stay parseable.
struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self, CliError> {
        Ok(JsonLines {
            out: BufWriter::new(File::create(path)?),
        })
    }

    fn write(&mut self, record: &MetricsRecord, tag: Option<(&str, Value)>) -> smope::Result<()> {
        let mut v = serde_json::to_value(record)?;
        if let (Some((k, tv)), Value::Object(map)) = (tag, &mut v) {
            map.insert(k.to_string(), tv);
        }
        serde_json::to_writer(&mut self.out, &v)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Prefixes every row of a CSV (header included) with one column.
fn with_leading_column(csv: &str, name: &str, value: &str, header: bool) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if header {
                out.push_str(&format!("{},{}\n", name, line));
            }
        } else {
            out.push_str(&format!("{},{}\n", value, line));
        }
    }
    out
}

fn usage_csv(run: &RunOutput) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write_usage_csv(&run.prompts, &mut buf)?;
    String::from_utf8(buf).map_err(|e| CliError::Runtime(e.to_string()))
}

fn run_record(run: &RunOutput) -> Value {
    json!({
        "seed": run.seed,
        "faa": run.faa,
        "caa": run.caa,
        "mean_entropy": run.mean_entropy,
    })
}

fn medians(runs: &[RunOutput]) -> Value {
    let faa: Vec<f64> = runs.iter().map(|r| r.faa).collect();
    let caa: Vec<f64> = runs.iter().map(|r| r.caa).collect();
    let ent: Vec<f64> = runs.iter().filter_map(|r| r.mean_entropy).collect();
    json!({
        "median_faa": median(&faa),
        "median_caa": median(&caa),
        "median_entropy": median(&ent),
    })
}

fn merge(mut a: Value, b: Value) -> Value {
    if let (Value::Object(x), Value::Object(y)) = (&mut a, b) {
        x.extend(y);
    }
    a
}

fn epsilon_dir(eps: f64) -> String {
    format!("eps_{}", eps)
}

fn continual(cfg: &ContinualConfig, seeds: &[u64], out: &Path) -> Result<Value, CliError> {
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"))?;
    let mut accuracy = String::new();
    let mut usage = String::new();
    let mut runs = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let backbone = pretrain_backbone(cfg, seed)?;
        let run = run_continual(cfg, seed, &backbone, &mut |r| metrics.write(r, None))?;
        accuracy.push_str(&with_leading_column(&run.accuracy.to_csv(), "seed", &seed.to_string(), i == 0));
        usage.push_str(&with_leading_column(&usage_csv(&run)?, "seed", &seed.to_string(), i == 0));
        fs::write(out.join("accuracy.csv"), &accuracy)?;
        fs::write(out.join("usage.csv"), &usage)?;
        save_checkpoint(&run.model, &out.join(format!("model_seed{}.ckpt", seed)))?;
        println!("seed {}: FAA {:.4}  CAA {:.4}", seed, run.faa, run.caa);
        runs.push(run);
    }
    Ok(merge(
        json!({ "runs": runs.iter().map(run_record).collect::<Vec<_>>() }),
        medians(&runs),
    ))
}

fn ablation(cfg: &ContinualConfig, seeds: &[u64], out: &Path) -> Result<Value, CliError> {
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"))?;
    let mut table = String::from("stage,seed,faa,caa,mean_entropy\n");
    let mut per_stage: Vec<Vec<RunOutput>> = AblationStage::ALL.iter().map(|_| Vec::new()).collect();
    for &seed in seeds {
        let backbone = pretrain_backbone(cfg, seed)?;
        for (k, stage) in AblationStage::ALL.iter().enumerate() {
            let stage_cfg = stage.configure(cfg);
            let tag = serde_json::to_value(stage)?;
            let run = run_continual(&stage_cfg, seed, &backbone, &mut |r| {
                metrics.write(r, Some(("stage", tag.clone())))
            })?;
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                tag.as_str().unwrap_or_default(),
                seed,
                run.faa,
                run.caa,
                run.mean_entropy.map(|e| e.to_string()).unwrap_or_default()
            ));
            fs::write(out.join("ablation.csv"), &table)?;
            println!("seed {} {:<28} FAA {:.4}", seed, stage.label(), run.faa);
            per_stage[k].push(run);
        }
    }
    let stages: Vec<Value> = AblationStage::ALL
        .iter()
        .zip(&per_stage)
        .map(|(stage, runs)| {
            merge(
                json!({
                    "stage": stage,
                    "label": stage.label(),
                    "runs": runs.iter().map(run_record).collect::<Vec<_>>(),
                }),
                medians(runs),
            )
        })
        .collect();
    Ok(json!({ "stages": stages }))
}

fn noise_sweep(
    cfg: &ContinualConfig,
    seeds: &[u64],
    epsilons: &[f64],
    out: &Path,
) -> Result<Value, CliError> {
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"))?;
    let mut table = String::from("epsilon,seed,faa,caa,mean_entropy\n");
    let mut per_eps: Vec<Vec<RunOutput>> = epsilons.iter().map(|_| Vec::new()).collect();
    let mut usage: Vec<String> = epsilons.iter().map(|_| String::new()).collect();
    for (si, &seed) in seeds.iter().enumerate() {
        let backbone = pretrain_backbone(cfg, seed)?;
        for (k, &eps) in epsilons.iter().enumerate() {
            let run = run_continual(&with_epsilon(cfg, eps), seed, &backbone, &mut |r| {
                metrics.write(r, Some(("epsilon", json!(eps))))
            })?;
            table.push_str(&format!(
                "{},{},{},{},{}\n",
                eps,
                seed,
                run.faa,
                run.caa,
                run.mean_entropy.map(|e| e.to_string()).unwrap_or_default()
            ));
            fs::write(out.join("sweep.csv"), &table)?;
            let dir = out.join(epsilon_dir(eps));
            fs::create_dir_all(&dir)?;
            usage[k].push_str(&with_leading_column(&usage_csv(&run)?, "seed", &seed.to_string(), si == 0));
            fs::write(dir.join("usage.csv"), &usage[k])?;
            println!(
                "seed {} epsilon {:<5} FAA {:.4}  entropy {}",
                seed,
                eps,
                run.faa,
                run.mean_entropy.map_or("-".into(), |e| format!("{:.4}", e))
            );
            per_eps[k].push(run);
        }
    }
    let points: Vec<Value> = epsilons
        .iter()
        .zip(&per_eps)
        .map(|(eps, runs)| {
            merge(
                json!({
                    "epsilon": eps,
                    "usage": format!("{}/usage.csv", epsilon_dir(*eps)),
                    "runs": runs.iter().map(run_record).collect::<Vec<_>>(),
                }),
                medians(runs),
            )
        })
        .collect();
    Ok(json!({ "points": points }))
}

fn rate(cfg: &smope::theory::RateConfig, out: &Path) -> Result<Value, CliError> {
    let result = rate_experiment(cfg)?;
    write_rate_csv(&result.runs, BufWriter::new(File::create(out.join("rate.csv"))?))?;
    let s = &result.summary;
    for (n, m) in s.sample_sizes.iter().zip(&s.medians) {
        println!("n = {:<6} median Voronoi loss {:.6}", n, m);
    }
    match s.slope {
        Some(slope) => println!("log-log slope {:.4}", slope),
        None => println!("log-log slope undefined (degenerate medians)"),
    }
    if s.failures > 0 {
        println!("{} fits failed and were excluded", s.failures);
    }
    Ok(serde_json::to_value(s)?)
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn output_dir(loaded: &LoadedConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| loaded.experiment.output_dir.clone()).unwrap_or_else(|| {
        let stem = loaded
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        PathBuf::from("runs").join(stem)
    })
}

/// Runs the configured experiment into `out`, always leaving `config.toml` and `summary.json`.
pub fn execute(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    let exp = &loaded.experiment;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", out.display(), e)))?;
    fs::write(out.join("config.toml"), &loaded.text)?;
    info!("running {} into {}", exp.mode.name(), out.display());
    let cfg = exp.continual();
    let result = match exp.mode {
        ExperimentMode::Continual => continual(&cfg, &exp.seeds, out),
        ExperimentMode::Ablation => ablation(&cfg, &exp.seeds, out),
        ExperimentMode::NoiseSweep => noise_sweep(&cfg, &exp.seeds, &exp.epsilons, out),
        ExperimentMode::Rate => rate(&exp.rate, out),
    };
    let head = json!({ "mode": exp.mode.name(), "seeds": exp.seeds });
    let summary = match &result {
        Ok(body) => merge(merge(head, json!({ "status": "ok" })), body.clone()),
        Err(e) => merge(head, json!({ "status": "failed", "error": e.to_string() })),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    result.map(|_| ())
}
