//! Run directories: `manifest.json`, `draws.csv`, `subject_loglik.csv` and
//! `latent.csv`. Floats are written in shortest round-trip form, so reading a
//! run back reproduces the draws bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::draws::{CellEstimate, PosteriorDraws, RunMeta, Sample};
use super::model::ModelDescriptor;

pub const MANIFEST: &str = "manifest.json";
pub const DRAWS: &str = "draws.csv";
pub const SUBJECT_LOGLIK: &str = "subject_loglik.csv";
pub const LATENT: &str = "latent.csv";

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub package_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub descriptor: ModelDescriptor,
    pub subjects: Vec<String>,
    pub chains: Vec<RunMeta>,
}

/// A run read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutputs {
    pub manifest: RunManifest,
    pub chains: Vec<PosteriorDraws>,
}

impl RunManifest {
    /// SHA-256 of the manifest as written to disk.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string_pretty(self)? + "\n";
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn parse(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Data(format!("cannot parse `{s}` as a number")))
}

/// Write every chain of a run plus its manifest into `dir` (created if needed).
pub fn write_run(dir: &Path, config: &RunConfig, data_hash: &str, chains: &[PosteriorDraws]) -> Result<RunManifest> {
    let first = chains.first().ok_or_else(|| Error::Config("no chains to write".into()))?;
    fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config.hash(),
        data_hash: data_hash.to_string(),
        descriptor: first.descriptor.clone(),
        subjects: first.subjects.clone(),
        chains: chains.iter().map(|c| c.meta.clone()).collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let mut w = csv::Writer::from_path(dir.join(DRAWS))?;
    w.write_record(draw_header(first))?;
    for c in chains {
        for (k, s) in c.samples.iter().enumerate() {
            let mut row = vec![c.meta.chain.to_string(), k.to_string()];
            row.extend(s.theta_star.iter().map(|v| fmt(*v)));
            row.push(s.shape.map(fmt).unwrap_or_default());
            row.push(fmt(s.alpha));
            row.extend(s.cross.iter().map(|v| fmt(*v)));
            row.extend(s.delta.iter().map(|v| fmt(*v)));
            row.extend(s.mu.iter().map(|v| fmt(*v)));
            row.extend(s.iota2.iter().map(|v| fmt(*v)));
            row.push(s.censored_u_mean.map(fmt).unwrap_or_default());
            row.extend(s.gamma.iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(SUBJECT_LOGLIK))?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(first.subjects.iter().cloned());
    w.write_record(&header)?;
    for c in chains {
        for (k, s) in c.samples.iter().enumerate() {
            let mut row = vec![c.meta.chain.to_string(), k.to_string()];
            row.extend(s.subject_loglik.iter().map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(LATENT))?;
    w.write_record(["kind", "chain", "record", "subject", "mean_y", "mean_u"])?;
    for c in chains {
        for (kind, cells) in [("censored", &c.censored), ("imputed", &c.imputed)] {
            for e in cells.iter() {
                w.write_record([
                    kind.to_string(),
                    c.meta.chain.to_string(),
                    e.record.to_string(),
                    e.subject.clone(),
                    fmt(e.mean_y),
                    fmt(e.mean_u),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(manifest)
}

fn draw_header(d: &PosteriorDraws) -> Vec<String> {
    let desc = &d.descriptor;
    let (h, m, p, r) = (desc.num_responses(), desc.num_basis(), desc.num_covariates(), desc.num_random());
    let mut out = vec!["chain".to_string(), "draw".to_string()];
    for hh in 0..h {
        for mm in 0..m {
            for pp in 0..p {
                out.push(format!("theta_star[{hh},{mm},{pp}]"));
            }
        }
    }
    out.push("shape".into());
    out.push("alpha".into());
    for a in 0..h {
        for b in 0..h {
            out.push(format!("cross[{a},{b}]"));
        }
    }
    for hh in 0..h {
        for rr in 0..r {
            out.push(format!("delta[{hh},{rr}]"));
        }
    }
    let shrink = d.samples.first().map_or(0, |s| s.mu.len());
    for k in 0..shrink {
        out.push(format!("mu[{},{}]", k / p, k % p));
    }
    for k in 0..shrink {
        out.push(format!("iota2[{},{}]", k / p, k % p));
    }
    out.push("censored_u_mean".into());
    let gamma = d.samples.first().map_or(0, |s| s.gamma.len());
    for k in 0..gamma {
        out.push(format!("gamma[{},{},{}]", k / (h * r), (k / r) % h, k % r));
    }
    out
}

/// Read a run directory written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<RunOutputs> {
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported run format {}", manifest.format_version)));
    }
    let mut chains: Vec<PosteriorDraws> = manifest
        .chains
        .iter()
        .map(|meta| PosteriorDraws {
            descriptor: manifest.descriptor.clone(),
            meta: meta.clone(),
            subjects: manifest.subjects.clone(),
            samples: Vec::new(),
            censored: Vec::new(),
            imputed: Vec::new(),
        })
        .collect();
    let chain_index = |id: &str| -> Result<usize> {
        let id: usize = id.parse().map_err(|_| Error::Data(format!("bad chain id `{id}`")))?;
        manifest
            .chains
            .iter()
            .position(|m| m.chain == id)
            .ok_or_else(|| Error::Data(format!("chain {id} not in manifest")))
    };

    let mut rdr = csv::Reader::from_path(dir.join(DRAWS))?;
    let header = rdr.headers()?.clone();
    let group = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, name)| name.split('[').next() == Some(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let cols = [
        group("theta_star"),
        group("shape"),
        group("alpha"),
        group("cross"),
        group("delta"),
        group("mu"),
        group("iota2"),
        group("censored_u_mean"),
        group("gamma"),
    ];
    for rec in rdr.records() {
        let rec = rec?;
        let values = |idx: &[usize]| -> Result<Vec<f64>> { idx.iter().map(|&i| parse(&rec[i])).collect() };
        let optional = |idx: &[usize]| -> Result<Option<f64>> {
            match idx.first().map(|&i| &rec[i]) {
                Some(s) if !s.is_empty() => parse(s).map(Some),
                _ => Ok(None),
            }
        };
        let sample = Sample {
            theta_star: values(&cols[0])?,
            shape: optional(&cols[1])?,
            alpha: optional(&cols[2])?.unwrap_or(0.0),
            cross: values(&cols[3])?,
            delta: values(&cols[4])?,
            mu: values(&cols[5])?,
            iota2: values(&cols[6])?,
            gamma: values(&cols[8])?,
            subject_loglik: Vec::new(),
            censored_u_mean: optional(&cols[7])?,
        };
        chains[chain_index(&rec[0])?].samples.push(sample);
    }

    let mut rdr = csv::Reader::from_path(dir.join(SUBJECT_LOGLIK))?;
    let mut cursor = vec![0usize; chains.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let c = chain_index(&rec[0])?;
        let ll = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>>>()?;
        let slot = chains[c]
            .samples
            .get_mut(cursor[c])
            .ok_or_else(|| Error::Data("subject log-likelihood rows exceed draws".into()))?;
        slot.subject_loglik = ll;
        cursor[c] += 1;
    }

    let mut rdr = csv::Reader::from_path(dir.join(LATENT))?;
    for rec in rdr.records() {
        let rec = rec?;
        let c = chain_index(&rec[1])?;
        let e = CellEstimate {
            record: rec[2].parse().map_err(|_| Error::Data("bad record index".into()))?,
            subject: rec[3].to_string(),
            mean_y: parse(&rec[4])?,
            mean_u: parse(&rec[5])?,
        };
        match &rec[0] {
            "censored" => chains[c].censored.push(e),
            _ => chains[c].imputed.push(e),
        }
    }
    Ok(RunOutputs { manifest, chains })
}
