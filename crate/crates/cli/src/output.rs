//! File writers. Metrics use six significant digits; wall-clock time never
//! reaches a file so reruns are byte-identical.

use std::fs;
use std::path::Path;

use sbpu::{FederationConfig, GlobalHistory, Manifest, RoundRecord};

use crate::commands::CliError;

pub fn sci(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn write_manifest(dir: &Path, cfg: &FederationConfig) -> Result<(), CliError> {
    let manifest = Manifest {
        version: sbpu::VERSION.to_string(),
        seed: cfg.seed,
        config: cfg.resolved()?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(sbpu::Error::from)?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

pub fn write_checkpoint(dir: &Path, h: &GlobalHistory) -> Result<(), CliError> {
    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck)?;
    let text = serde_json::to_string(h).map_err(sbpu::Error::from)?;
    fs::write(ck.join(format!("round_{:06}.json", h.round)), text + "\n")?;
    Ok(())
}

pub struct Csv(csv::Writer<fs::File>);

impl Csv {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        Ok(Csv(w))
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.0.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.0.flush()?;
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "global_loss",
    "divergence",
    "client_loss_min",
    "client_loss_mean",
    "client_loss_max",
    "bound_checks",
    "bound_violations",
];

pub fn metrics_row(rec: &RoundRecord) -> Vec<String> {
    let losses = &rec.client_losses;
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let violations = rec.bound_reports.iter().filter(|b| !b.holds).count();
    vec![
        rec.round.to_string(),
        sci(rec.global_loss),
        sci(rec.divergence),
        sci(min),
        sci(mean),
        sci(max),
        rec.bound_reports.len().to_string(),
        violations.to_string(),
    ]
}

pub const BOUNDS_HEADER: [&str; 7] = [
    "round", "client", "dist_sq", "delta_sq", "lower", "upper", "holds",
];

pub fn bound_rows(rec: &RoundRecord) -> impl Iterator<Item = Vec<String>> + '_ {
    rec.bound_reports.iter().enumerate().map(move |(k, b)| {
        vec![
            rec.round.to_string(),
            k.to_string(),
            sci(b.dist_sq),
            sci(b.delta_sq),
            sci(b.lower),
            sci(b.upper),
            b.holds.to_string(),
        ]
    })
}
