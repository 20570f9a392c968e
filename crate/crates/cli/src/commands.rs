use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use curesimex::rng::{stream, Domain};
use curesimex::sim::{generate_with_c, resolve_censoring, run_cell, CellResult, GeneratorConfig, McMetrics, MetricsRow, StudyCell, StudyConfig};
use curesimex::{read_sample, run_fit, write_sample, FitConfig, FitFlags, FitReport};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, parse_json, read_text, CliError};
use crate::manifest::{manifest_path, write_json, ManifestBuilder};
use crate::report;
use crate::{FitArgs, McArgs, ReportArgs, SimulateArgs};

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn simulate(args: &SimulateArgs, seed: Option<u64>, argv: &[String]) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("simulate", argv);
    let mut cfg: GeneratorConfig = parse_json(&args.config, &read_text(&args.config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let c = resolve_censoring(&cfg)?;
    info!("censoring bound c = {c:.6}");
    let mut rng = stream(cfg.seed, Domain::Generate, &[0]);
    let (sample, latent) = generate_with_c(&cfg, c, &mut rng)?;
    write_sample(create(&args.out)?, &sample, args.latent.then_some(latent.as_slice()))?;

    let mut snapshot = cfg.clone();
    snapshot.censoring_c = Some(c);
    let m = manifest.finish(
        to_value(&snapshot)?,
        cfg.seed,
        vec![args.config.clone()],
        vec![args.out.clone()],
        Vec::new(),
    );
    write_json(&manifest_path(&args.out), &m)
}

pub fn fit(args: &FitArgs, seed: Option<u64>, argv: &[String]) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("fit", argv);
    let mut cfg: FitConfig = parse_json(&args.config, &read_text(&args.config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let file = File::open(&args.data).map_err(io_err(&args.data))?;
    let (sample, _) = read_sample(file)?;
    info!("loaded {} subjects, {} event times", sample.n(), sample.events().times.len());
    let flags = FitFlags { naive_only: args.naive_only, no_variance: args.no_variance };
    let report = run_fit(&sample, &cfg, flags)?;
    for w in &report.convergence.warnings {
        warn!("{w}");
    }
    write_json(&args.out, &report)?;
    let m = manifest.finish(
        to_value(&cfg)?,
        cfg.seed,
        vec![args.data.clone(), args.config.clone()],
        vec![args.out.clone()],
        report.convergence.warnings.clone(),
    );
    write_json(&manifest_path(&args.out), &m)
}

/// What a finished cell leaves on disk; `study` is the config it ran under,
/// minus the cell list, so adding cells does not invalidate finished ones.
#[derive(Debug, Serialize, Deserialize)]
struct CellRecord {
    study: serde_json::Value,
    result: CellResult,
}

fn study_snapshot(cfg: &StudyConfig) -> Result<serde_json::Value, CliError> {
    let mut v = to_value(cfg)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("cells");
    }
    Ok(v)
}

fn load_finished(path: &Path, snapshot: &serde_json::Value, cell: &StudyCell) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    let record: CellRecord = serde_json::from_str(&text).ok()?;
    (record.study == *snapshot && record.result.cell == *cell).then_some(record.result)
}

fn failed_rows(cfg: &StudyConfig, cell: &StudyCell) -> Vec<MetricsRow> {
    let names = curesimex::config::coordinate_names(cfg.theta0.beta.len(), cfg.theta0.gamma.len());
    let mut rows = Vec::new();
    for &method in &cfg.estimators {
        for name in &names {
            rows.push(MetricsRow {
                model: cell.model,
                cr: cell.cr,
                sigma_eta: cell.sigma_eta,
                method,
                coordinate: name.clone(),
                bias: f64::NAN,
                var: f64::NAN,
                mse: f64::NAN,
                cp: f64::NAN,
                mve: f64::NAN,
                n_ok: 0,
                n_fail: cfg.reps,
                valid: false,
            });
        }
    }
    rows
}

pub fn mc(args: &McArgs, seed: Option<u64>, argv: &[String]) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("mc", argv);
    let mut cfg: StudyConfig = parse_json(&args.config, &read_text(&args.config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if args.full_scale {
        cfg = cfg.full_scale();
    }
    cfg.validate()?;
    let cells_dir = args.out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(io_err(&cells_dir))?;
    let snapshot = study_snapshot(&cfg)?;

    let mut rows = Vec::new();
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut warnings = Vec::new();
    for cell in &cfg.cells {
        let path = cells_dir.join(format!("{}.json", cell.key()));
        if !args.fresh {
            if let Some(done) = load_finished(&path, &snapshot, cell) {
                info!("cell {}: reusing {}", cell.key(), path.display());
                rows.extend(done.rows);
                outputs.push(path);
                continue;
            }
        }
        let cell_manifest = ManifestBuilder::start("mc-cell", argv);
        match run_cell(&cfg, cell) {
            Ok(result) => {
                for r in result.rows.iter().filter(|r| !r.valid) {
                    warnings.push(format!("cell {} {} {}: invalid ({} failures)", cell.key(), r.method, r.coordinate, r.n_fail));
                }
                rows.extend(result.rows.iter().cloned());
                write_json(&path, &CellRecord { study: snapshot.clone(), result })?;
                let m = cell_manifest.finish(
                    to_value(cell)?,
                    cfg.seed,
                    vec![args.config.clone()],
                    vec![path.clone()],
                    Vec::new(),
                );
                write_json(&manifest_path(&path), &m)?;
                outputs.push(path);
            }
            Err(e) => {
                warn!("cell {} failed: {e}", cell.key());
                warnings.push(format!("cell {} failed: {e}", cell.key()));
                rows.extend(failed_rows(&cfg, cell));
            }
        }
    }

    let metrics_path = args.out.join("metrics.csv");
    McMetrics { rows }.write_csv(create(&metrics_path)?)?;
    outputs.push(metrics_path);
    let m = manifest.finish(to_value(&cfg)?, cfg.seed, vec![args.config.clone()], outputs, warnings);
    write_json(&args.out.join("manifest.json"), &m)
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut fits: Vec<(String, FitReport)> = Vec::new();
    for path in &args.inputs {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            let file = File::open(path).map_err(io_err(path))?;
            let metrics = McMetrics::read_csv(file)?;
            print!("{}", report::render_table(&metrics));
        } else {
            let fit: FitReport = parse_json(path, &read_text(path)?)?;
            print!("{}", report::render_fit(&path.display().to_string(), &fit));
            fits.push((path.display().to_string(), fit));
        }
    }
    if let Some(svg) = &args.svg {
        let traces: Vec<report::TraceInput> = fits
            .iter()
            .filter_map(|(label, f)| {
                f.trace.as_ref().map(|t| report::TraceInput { label, coordinates: &f.coordinates, trace: t })
            })
            .collect();
        if traces.is_empty() {
            return Err(CliError::Usage("--svg needs at least one fit JSON with an extrapolation trace".into()));
        }
        fs::write(svg, report::render_svg(&traces)).map_err(io_err(svg))?;
    }
    Ok(())
}
