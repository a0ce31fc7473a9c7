//! Dataset CSV and model JSON formats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::AggregateRow;
use crate::shapley::{AttributionResult, DependenceTable};
use crate::likelihood::{ipw_weight, ObservedRecord};
use crate::train::{FitResult, Hyperparameters};
use crate::grad::Model;
use crate::transform::{BernsteinHazard, CovariateNetwork, TransformationSpec};

const FIXED_COLUMNS: [&str; 5] = ["L", "R", "delta_L", "delta_I", "observed"];

fn flag(field: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::Parse(format!("line {line}: expected 0/1, got {other:?}"))),
    }
}

fn number(field: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {line}: bad number {field:?}")))
}

/// Reads `L,R,delta_L,delta_I,observed,z1..zp`; weights come from `(p_s, p_c)`.
pub fn read_dataset<R: Read>(reader: R, p_s: f64, p_c: f64) -> Result<Vec<ObservedRecord>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = csv.headers()?.clone();
    if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(h, want)| h.trim() != want) {
        return Err(Error::Parse(format!("dataset header must start with {}", FIXED_COLUMNS.join(","))));
    }
    let p = header.len() - FIXED_COLUMNS.len();
    let mut out = Vec::new();
    for (k, row) in csv.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let observed = flag(&row[4], line)?;
        let (delta_l, delta_i) = (flag(&row[2], line)?, flag(&row[3], line)?);
        let cells: Vec<&str> = (0..p).map(|j| row[FIXED_COLUMNS.len() + j].trim()).collect();
        let z = if cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            Some(cells.iter().map(|c| number(c, line)).collect::<Result<Vec<f64>>>()?)
        };
        let weight = ipw_weight(delta_l, delta_i, observed, p_s, p_c)?;
        let rec = ObservedRecord::new(number(&row[0], line)?, number(&row[1], line)?, delta_l, delta_i, observed, z, weight)
            .map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, p_s: f64, p_c: f64) -> Result<Vec<ObservedRecord>> {
    read_dataset(std::fs::File::open(path)?, p_s, p_c)
}

pub fn write_dataset<W: Write>(writer: W, records: &[ObservedRecord]) -> Result<()> {
    let p = records.iter().find_map(|r| r.z.as_ref().map(Vec::len)).unwrap_or(0);
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|j| format!("z{j}")));
    csv.write_record(&header)?;
    for rec in records {
        let mut row = vec![
            rec.l.to_string(),
            rec.r.to_string(),
            (rec.delta_l as u8).to_string(),
            (rec.delta_i as u8).to_string(),
            (rec.observed as u8).to_string(),
        ];
        match &rec.z {
            Some(z) => row.extend(z.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, records: &[ObservedRecord]) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, records)
}

/// On-disk form of a fitted model. Floats use shortest round-trip formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub r: f64,
    pub hazard: BernsteinHazard,
    pub network: CovariateNetwork,
    pub center: f64,
}

impl From<&FitResult> for ModelFile {
    fn from(fit: &FitResult) -> Self {
        Self { r: fit.spec.r(), hazard: fit.model.hazard.clone(), network: fit.model.net.clone(), center: fit.center }
    }
}

impl ModelFile {
    pub fn into_fit(self) -> Result<FitResult> {
        let spec = TransformationSpec::new(self.r)?;
        let hazard = BernsteinHazard::new(self.hazard.m, self.hazard.c, self.hazard.u, self.hazard.eta)?;
        let net = CovariateNetwork::from_layers(self.network.widths, self.network.layers, self.network.dropout_rate)?;
        if !self.center.is_finite() {
            return Err(Error::Parse("model center must be finite".into()));
        }
        Ok(FitResult {
            model: Model { hazard, net },
            spec,
            center: self.center,
            train_curve: Vec::new(),
            monitor_curve: Vec::new(),
            epochs_run: 0,
            best_epoch: 0,
            floor_events: 0,
        })
    }
}

pub fn save_model(path: &Path, fit: &FitResult) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&ModelFile::from(fit))?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FitResult> {
    let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    file.into_fit()
}

/// Monte Carlo table as CSV: `design,p_e,n,case,method,metric,mean,sd,count`.
pub fn write_aggregate<W: Write>(writer: W, rows: &[AggregateRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// One row per sample: covariates, attributions, prediction and base value.
pub fn write_attributions<W: Write>(writer: W, result: &AttributionResult, covariates: &[Vec<f64>]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let names = &result.feature_names;
    let mut header = vec!["sample".to_string()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("phi_{n}")));
    header.extend(["prediction".to_string(), "base".to_string()]);
    csv.write_record(&header)?;
    for (i, (z, phi)) in covariates.iter().zip(&result.phi).enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(z.iter().map(f64::to_string));
        row.extend(phi.iter().map(f64::to_string));
        row.push(result.predictions[i].to_string());
        row.push(result.base.to_string());
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// `value,phi,partner,partner_value` per sample; partner columns empty when none was chosen.
pub fn write_dependence<W: Write>(writer: W, table: &DependenceTable, names: &[String]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["value", "phi", "partner", "partner_value"])?;
    let partner = table.partner.map(|k| names[k].clone()).unwrap_or_default();
    for row in &table.rows {
        csv.write_record([
            row.value.to_string(),
            row.phi.to_string(),
            partner.clone(),
            row.partner_value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GridFile {
    grid: Vec<Hyperparameters>,
}

/// Tuning grid from TOML: an array of `[[grid]]` tables in declaration order.
pub fn load_grid(path: &Path) -> Result<Vec<Hyperparameters>> {
    let file: GridFile =
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::config(format!("grid: {e}")))?;
    if file.grid.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    for hp in &file.grid {
        hp.validate()?;
    }
    Ok(file.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::draw_case_cohort;
    use crate::simulate::{gen_cohort, SimConfig};
    use crate::transform::DenseLayer;

    #[test]
    fn dataset_round_trip_with_missing_covariates() {
        let cfg = SimConfig { n: 200, tau: Some(5.0), ..SimConfig::default() };
        let cohort = gen_cohort(&cfg, 9).unwrap();
        let sample = draw_case_cohort(&cohort, 0.2, 0.5, 4).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sample.records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("L,R,delta_L,delta_I,observed,z1,z2,z3,z4,z5\n"));
        assert!(text.contains(",inf,"));
        let back = read_dataset(&buf[..], 0.2, 0.5).unwrap();
        assert_eq!(back, sample.records);
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(read_dataset("a,b\n1,2\n".as_bytes(), 0.2, 1.0).is_err());
        let bad_flag = "L,R,delta_L,delta_I,observed,z1\n0,1,2,0,1,0.5\n";
        assert!(read_dataset(bad_flag.as_bytes(), 0.2, 1.0).is_err());
        let both = "L,R,delta_L,delta_I,observed,z1\n0,1,1,1,1,0.5\n";
        assert!(read_dataset(both.as_bytes(), 0.2, 1.0).is_err());
    }

    #[test]
    fn grid_file_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.toml");
        let entry = |w: usize| {
            format!("[[grid]]\nbatch_size = 32\nhidden_layers = 1\nhidden_width = {w}\ndropout_rate = 0.1\nlr_hazard = 0.01\nlr_net = 0.0001\nmax_epochs = 50\npatience = 5\nm = 5\nr = 0.0\n")
        };
        std::fs::write(&path, entry(50) + &entry(100)).unwrap();
        let grid = load_grid(&path).unwrap();
        assert_eq!(grid.iter().map(|h| h.hidden_width).collect::<Vec<_>>(), vec![50, 100]);
        std::fs::write(&path, "grid = []").unwrap();
        assert!(load_grid(&path).is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let hazard = BernsteinHazard::new(3, 0.0, 2.5, vec![-1.234567890123, 0.1, 1.0 / 3.0, -2.0]).unwrap();
        let layers = vec![
            DenseLayer { rows: 2, cols: 2, weights: vec![0.1, -0.7, std::f64::consts::PI, 1e-300], bias: vec![0.3, -0.2] },
            DenseLayer { rows: 1, cols: 2, weights: vec![0.9, 1.0 / 7.0], bias: vec![0.0] },
        ];
        let net = CovariateNetwork::from_layers(vec![2, 2, 1], layers, 0.2).unwrap();
        let fit = ModelFile { r: 0.5, hazard, network: net, center: 0.123456789 }.into_fit().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &fit).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, fit);
    }
}
