use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use qrmix_core::data::PanelDataset;
use qrmix_core::inference::{self, ModelData, RunConfig, RunManifest};
use qrmix_core::simgen::{self, StudySpec, TruthSidecar};
use qrmix_core::Error;

/// Failure of a command; validation failures exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Data(_) | Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::Json(_) | Error::Csv(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read_data(path: &Path) -> Result<PanelDataset, Failure> {
    if !path.exists() {
        return Err(Failure::Runtime(format!("{}: no such file", path.display())));
    }
    Ok(PanelDataset::from_path(path)?)
}

/// A run configuration, or the configuration recorded in a run manifest.
fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    if value.get("format_version").is_some() && value.get("config").is_some() {
        let manifest: RunManifest = serde_json::from_value(value).map_err(|e| Failure::Validation(e.to_string()))?;
        return Ok(manifest.config);
    }
    Ok(RunConfig::from_json(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn validate(data: &Path, config: Option<&Path>) -> CmdResult {
    let dataset = read_data(data)?;
    let report = dataset.validate();
    print!("{report}");
    if !report.is_ok() {
        return Err(Failure::Validation(format!("{} violation(s) in {}", report.errors.len(), data.display())));
    }
    if let Some(path) = config {
        let config = read_config(path)?;
        config.validate()?;
        let prepared = ModelData::prepare(&dataset, &config.model)?;
        println!(
            "config ok: {} response(s), {} fixed effect(s), {} random effect(s), {} subject(s) in the model",
            prepared.descriptor.num_responses(),
            prepared.descriptor.num_covariates() - 1,
            prepared.descriptor.num_random(),
            prepared.num_subjects()
        );
    }
    Ok(())
}

pub fn fit(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let dataset = read_data(data)?;
    let report = dataset.validate();
    if !report.is_ok() {
        print!("{report}");
        return Err(Failure::Validation(format!("{} violation(s) in {}", report.errors.len(), data.display())));
    }
    let mut config = read_config(config)?;
    if let Some(s) = seed {
        config.mcmc.seed = s;
    }
    let fit = match inference::fit(&dataset, &config) {
        Ok(f) => f,
        Err(e @ Error::Sampler { .. }) => {
            fs::create_dir_all(out)?;
            let dump = out.join("sampler_failure.txt");
            fs::write(&dump, format!("{e}\n"))?;
            return Err(Failure::Runtime(format!("{e}\nstate dump written to {}", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let manifest = inference::write_run(out, &config, &fit.data.data_hash, &fit.chains)?;

    let pooled = fit.pooled()?;
    let summary = inference::summarize(&pooled, &config.report_grid, None)?;
    write_json(&out.join("summary.json"), &summary)?;
    let diagnostics = inference::diagnostics(&fit.chains)?;
    write_json(&out.join("diagnostics.json"), &diagnostics)?;
    let lpml = match inference::lpml(&pooled) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("LPML not computed: {e}");
            None
        }
    };
    write_json(&out.join("lpml.json"), &lpml)?;

    let flagged: Vec<&str> = diagnostics.iter().filter(|d| d.flagged).map(|d| d.name.as_str()).collect();
    let acceptance_flags: Vec<&str> =
        fit.chains.iter().flat_map(|c| &c.meta.acceptance).filter(|a| a.flagged).map(|a| a.block.as_str()).collect();
    println!("run written to {}", out.display());
    println!("draws: {} over {} chain(s)", pooled.len(), fit.chains.len());
    match &lpml {
        Some(r) => println!("LPML: {:.3}", r.lpml),
        None => println!("LPML: not available"),
    }
    if !flagged.is_empty() {
        println!("convergence flags: {}", flagged.join(", "));
    }
    if !acceptance_flags.is_empty() {
        println!("acceptance outside [0.1, 0.7]: {}", acceptance_flags.join(", "));
    }
    println!("manifest sha256: {}", manifest.digest()?);
    Ok(())
}

struct RunRow {
    dir: PathBuf,
    model: String,
    lpml: f64,
    flagged: usize,
}

fn model_label(manifest: &RunManifest) -> String {
    let d = &manifest.descriptor;
    let family = match d.basis.family {
        qrmix_core::FamilyConfig::Gaussian => "gaussian".to_string(),
        qrmix_core::FamilyConfig::StudentT { .. } => "t".to_string(),
    };
    let dependence = serde_json::to_value(d.dependence).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!("{dependence}/{family}/M={}", d.basis.num_basis)
}

pub fn compare(runs: &[PathBuf]) -> CmdResult {
    let mut rows = Vec::new();
    let mut data_hash: Option<(String, &Path)> = None;
    for dir in runs {
        let run = inference::read_run(dir)?;
        match &data_hash {
            None => data_hash = Some((run.manifest.data_hash.clone(), dir)),
            Some((h, first)) if *h != run.manifest.data_hash => {
                return Err(Failure::Validation(format!(
                    "{} was fitted to different data than {} (data hash mismatch)",
                    dir.display(),
                    first.display()
                )));
            }
            Some(_) => {}
        }
        let pooled = qrmix_core::inference::PosteriorDraws::pool(&run.chains)?;
        let report = inference::lpml(&pooled)?;
        rows.push(RunRow { dir: dir.clone(), model: model_label(&run.manifest), lpml: report.lpml, flagged: report.flagged.len() });
    }
    rows.sort_by(|a, b| b.lpml.total_cmp(&a.lpml));
    let many = rows.len() > 1;
    println!("{:<4} {:<40} {:<28} {:>14} {:>8} ", "rank", "run", "model", "lpml", "flagged");
    for (k, r) in rows.iter().enumerate() {
        let mark = if many && k == 0 { "winner" } else { "" };
        println!(
            "{:<4} {:<40} {:<28} {:>14.3} {:>8} {}",
            k + 1,
            r.dir.display(),
            r.model,
            r.lpml,
            r.flagged,
            mark
        );
    }
    Ok(())
}

pub fn study(spec_path: &Path, out: &Path, seed: Option<u64>, datasets: bool) -> CmdResult {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure::Runtime(format!("{}: {e}", spec_path.display())))?;
    let mut spec: StudySpec =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.mcmc.seed = s;
        for (k, arm) in spec.arms.iter_mut().enumerate() {
            arm.seed = s.wrapping_add(k as u64);
        }
    }
    for arm in &spec.arms {
        arm.validate()?;
    }
    fs::create_dir_all(out)?;
    if datasets {
        let dir = out.join("datasets");
        fs::create_dir_all(&dir)?;
        for arm in &spec.arms {
            for rep in 0..arm.replications {
                let sim = simgen::gen_dataset(arm, rep)?;
                let stem = format!("{}_rep{rep:03}", arm.label());
                sim.dataset.to_path(&dir.join(format!("{stem}.csv")))?;
                write_json(&dir.join(format!("{stem}.truth.json")), &TruthSidecar::new(arm, rep, &sim, &spec.grid))?;
            }
        }
    }
    let report = spec.run()?;
    let file = fs::File::create(out.join("table.csv"))?;
    simgen::write_table_csv(&report.rows, std::io::BufWriter::new(file))?;
    write_json(&out.join("replicates.json"), &report.replicates)?;
    write_json(&out.join("spec.json"), &spec)?;
    let failed = report.replicates.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} arm(s), {} fit(s), {failed} failed; table written to {}",
        spec.arms.len(),
        report.replicates.len(),
        out.join("table.csv").display()
    );
    Ok(())
}

fn parse_profile(text: &str, names: &[String], centers: &[f64]) -> Result<Vec<f64>, Failure> {
    let mut profile = centers.to_vec();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("profile entry `{item}` is not `name=value`")))?;
        let k = names
            .iter()
            .position(|n| n == name.trim())
            .ok_or_else(|| Failure::Validation(format!("unknown covariate `{}`; model has {}", name.trim(), names.join(", "))))?;
        profile[k] = value
            .trim()
            .parse()
            .map_err(|_| Failure::Validation(format!("profile value `{}` is not a number", value.trim())))?;
    }
    Ok(profile)
}

pub fn curves(run_dir: &Path, profile: &str, points: usize, out: Option<&Path>) -> CmdResult {
    if points == 0 {
        return Err(Failure::Validation("at least one grid point is required".into()));
    }
    let run = inference::read_run(run_dir)?;
    let d = &run.manifest.descriptor;
    let names = &d.fixed_names[1..];
    let centers: Vec<f64> = d.x_scaling.columns.iter().map(|c| c.center).collect();
    let profile = parse_profile(profile, names, &centers)?;
    let grid: Vec<f64> = (1..=points).map(|k| k as f64 / (points + 1) as f64).collect();
    let pooled = qrmix_core::inference::PosteriorDraws::pool(&run.chains)?;
    let summary = inference::summarize(&pooled, &grid, Some(&profile))?;

    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["tau", "estimate", "lower", "upper", "parameter"]).map_err(io)?;
    for q in &summary.quantiles {
        let i = q.interval;
        w.write_record([q.tau.to_string(), i.mean.to_string(), i.lower.to_string(), i.upper.to_string(), format!("Q[{}]", q.response)])
            .map_err(io)?;
    }
    for e in &summary.effects {
        let i = e.interval;
        w.write_record([
            e.tau.to_string(),
            i.mean.to_string(),
            i.lower.to_string(),
            i.upper.to_string(),
            format!("beta[{},{}]", e.response, e.covariate),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
