//! Subcommand drivers: dataset generation, single estimation runs, replicate
//! experiments, and asymptotics reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use ips_core::asymptotics::{clt_diagnostic, plugin_precision, CltReport};
use ips_core::contrast::{estimate, Method, ObservationMode};
use ips_core::dispatch_builtin;
use ips_core::sim::{simulate_ips_replicate, write_dataset};
use ips_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::summary::{
    read_estimates, render_boxplot_csv, render_estimates_csv, summarize, EstimateRecord,
};

/// Exit code 3: every attempted estimation or simulation failed numerically.
pub const EXIT_ALL_FAILED: i32 = 3;

#[derive(Debug, Clone, Serialize)]
pub struct FailureEntry {
    pub replicate: usize,
    pub method: Option<Method>,
    pub mode: Option<ObservationMode>,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub attempted: usize,
    pub succeeded: usize,
    pub failures: Vec<FailureEntry>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("config.resolved.json"), cfg)
}

/// Generate one dataset per replicate (`rep{k}.csv` + sidecar). Blow-ups are
/// recorded in the manifest and the run continues.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    echo_config(cfg, out)?;
    let design = cfg.full_design();
    let theta = cfg.theta_template()?;
    let mut manifest = RunManifest {
        attempted: cfg.replicates,
        succeeded: 0,
        failures: Vec::new(),
    };
    for k in 0..cfg.replicates {
        let sim = dispatch_builtin!(cfg.model.as_str(), |m| {
            simulate_ips_replicate(m, &theta, &design, k as u64)
        })
        .expect("config validation guarantees a built-in model");
        match sim.and_then(|ds| write_dataset(&ds, &out.join(format!("rep{k}.csv")))) {
            Ok(()) => manifest.succeeded += 1,
            Err(e) => manifest.failures.push(FailureEntry {
                replicate: k,
                method: None,
                mode: None,
                error: e.to_string(),
            }),
        }
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    if cfg.replicates > 0 && manifest.succeeded == 0 {
        return Ok(EXIT_ALL_FAILED);
    }
    Ok(0)
}

struct TaskOutcome {
    record: Option<EstimateRecord>,
    failure: Option<FailureEntry>,
    wall_seconds: f64,
    method: Method,
    mode: ObservationMode,
    replicate: usize,
}

/// Run every (method, mode) estimation for one replicate, simulating the
/// dataset for each mode inline. Trajectories depend only on (seed,
/// replicate), never on the worker that runs them.
fn run_replicate(cfg: &ExperimentConfig, replicate: usize) -> Vec<TaskOutcome> {
    let theta = cfg.theta_template().expect("validated at resolve time");
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        let design = cfg.design_for(mode);
        let dataset = dispatch_builtin!(cfg.model.as_str(), |m| {
            simulate_ips_replicate(m, &theta, &design, replicate as u64)
        })
        .expect("config validation guarantees a built-in model");
        for &method in &cfg.methods {
            let start = Instant::now();
            let result = dataset.as_ref().map_err(|e| e.to_string()).and_then(|ds| {
                dispatch_builtin!(cfg.model.as_str(), |m| {
                    estimate(m, ds, method, mode, &cfg.adam, &theta)
                })
                .unwrap()
                .map_err(|e| e.to_string())
            });
            let wall_seconds = start.elapsed().as_secs_f64();
            match result {
                Ok(r) => out.push(TaskOutcome {
                    record: Some(EstimateRecord {
                        replicate,
                        method,
                        mode,
                        theta_hat: r.theta_hat.flatten(),
                        final_contrast: r.final_contrast,
                    }),
                    failure: None,
                    wall_seconds,
                    method,
                    mode,
                    replicate,
                }),
                Err(error) => out.push(TaskOutcome {
                    record: None,
                    failure: Some(FailureEntry {
                        replicate,
                        method: Some(method),
                        mode: Some(mode),
                        error,
                    }),
                    wall_seconds,
                    method,
                    mode,
                    replicate,
                }),
            }
        }
    }
    out
}

fn method_str(m: Method) -> &'static str {
    match m {
        Method::Lg => "lg",
        Method::Em => "em",
    }
}

fn mode_str(m: ObservationMode) -> &'static str {
    match m {
        ObservationMode::Complete => "complete",
        ObservationMode::Partial => "partial",
    }
}

/// Replicate experiment: estimates.csv, timings.csv, summary.json,
/// boxplot.csv, manifest.json. Replicates run on a worker pool; results are
/// written in replicate order, so the data files are byte-identical for any
/// worker count.
pub fn cmd_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<i32> {
    echo_config(cfg, out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<Vec<TaskOutcome>> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|k| run_replicate(cfg, k))
            .collect()
    });
    let outcomes: Vec<TaskOutcome> = outcomes.into_iter().flatten().collect();

    let records: Vec<EstimateRecord> = outcomes.iter().filter_map(|o| o.record.clone()).collect();
    let failures: Vec<FailureEntry> = outcomes.iter().filter_map(|o| o.failure.clone()).collect();
    let names = cfg.component_names();
    write_text(&out.join("estimates.csv"), &render_estimates_csv(&names, &records))?;

    let mut timings = String::from("replicate,method,mode,wall_seconds\n");
    for o in &outcomes {
        timings.push_str(&format!(
            "{},{},{},{:.6}\n",
            o.replicate,
            method_str(o.method),
            mode_str(o.mode),
            o.wall_seconds
        ));
    }
    write_text(&out.join("timings.csv"), &timings)?;

    write_json(
        &out.join("manifest.json"),
        &RunManifest {
            attempted: outcomes.len(),
            succeeded: records.len(),
            failures,
        },
    )?;

    // The summary is regenerated from the written estimates file rather than
    // the in-memory records, so the file alone always reproduces it.
    let (names_back, records_back) = read_estimates(&out.join("estimates.csv"))?;
    let truth = cfg.theta_template()?.flatten();
    let table = summarize(&names_back, &records_back, &truth)?;
    write_json(&out.join("summary.json"), &table)?;
    write_text(&out.join("boxplot.csv"), &render_boxplot_csv(&table))?;

    if !outcomes.is_empty() && records.is_empty() {
        return Ok(EXIT_ALL_FAILED);
    }
    Ok(0)
}

/// Single estimation run on the replicate-0 dataset for each configured
/// (method, mode); writes estimate.json.
pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    echo_config(cfg, out)?;
    let outcomes = run_replicate(cfg, 0);

    #[derive(Serialize)]
    struct EstimateOut<'a> {
        method: Method,
        mode: ObservationMode,
        theta_hat: Option<&'a [f64]>,
        final_contrast: Option<f64>,
        wall_seconds: f64,
        error: Option<&'a str>,
    }
    let report: Vec<EstimateOut> = outcomes
        .iter()
        .map(|o| EstimateOut {
            method: o.method,
            mode: o.mode,
            theta_hat: o.record.as_ref().map(|r| r.theta_hat.as_slice()),
            final_contrast: o.record.as_ref().map(|r| r.final_contrast),
            wall_seconds: o.wall_seconds,
            error: o.failure.as_ref().map(|f| f.error.as_str()),
        })
        .collect();
    write_json(&out.join("estimate.json"), &report)?;
    if !outcomes.is_empty() && outcomes.iter().all(|o| o.record.is_none()) {
        return Ok(EXIT_ALL_FAILED);
    }
    Ok(0)
}

#[derive(Serialize)]
struct CltGroup {
    method: Method,
    mode: ObservationMode,
    report: CltReport,
}

/// Precision plug-in (and optionally the CLT diagnostic over an existing
/// estimates.csv); writes asymptotics.json.
pub fn cmd_asymptotics(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    echo_config(cfg, out)?;
    let theta = cfg.theta_template()?;
    let design = cfg.full_design();
    let precision = dispatch_builtin!(cfg.model.as_str(), |m| {
        plugin_precision(m, &theta, &design, cfg.mc_replicas)
    })
    .expect("config validation guarantees a built-in model")?;
    let report = dispatch_builtin!(cfg.model.as_str(), |m| {
        precision.report(m, &design, cfg.mc_replicas)
    })
    .unwrap();

    let clt_groups = if cfg.clt {
        let estimates_path = out.join("estimates.csv");
        if !estimates_path.exists() {
            return Err(Error::Config(format!(
                "CLT diagnostic needs {}; run the `experiment` subcommand into the same output directory first",
                estimates_path.display()
            )));
        }
        let (_, records) = read_estimates(&estimates_path)?;
        let mut groups: Vec<(Method, ObservationMode)> = Vec::new();
        for r in &records {
            if !groups.contains(&(r.method, r.mode)) {
                groups.push((r.method, r.mode));
            }
        }
        let mut out_groups = Vec::new();
        for (method, mode) in groups {
            let estimates: Vec<_> = records
                .iter()
                .filter(|r| (r.method, r.mode) == (method, mode))
                .map(|r| theta.with_flat(&r.theta_hat))
                .collect::<Result<_>>()?;
            let report = dispatch_builtin!(cfg.model.as_str(), |m| {
                clt_diagnostic(m, &estimates, &theta, &design, &precision)
            })
            .unwrap()?;
            out_groups.push(CltGroup {
                method,
                mode,
                report,
            });
        }
        Some(out_groups)
    } else {
        None
    };

    #[derive(Serialize)]
    struct AsymptoticsOut<T: Serialize> {
        precision: T,
        clt: Option<Vec<CltGroup>>,
    }
    write_json(
        &out.join("asymptotics.json"),
        &AsymptoticsOut {
            precision: report,
            clt: clt_groups,
        },
    )?;
    Ok(0)
}

/// Map an error to the documented exit codes: configuration and input
/// problems exit 2.
pub fn exit_code_for(err: &Error) -> i32 {
    let _ = err;
    2
}

pub fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.ok_or_else(|| Error::Config("--out <dir> is required".into()))
}
