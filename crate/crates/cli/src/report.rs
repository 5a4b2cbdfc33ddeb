use std::fs;
use std::path::Path;

use fedvalue_core::federation::ValuationRun;
use fedvalue_core::shapley::{Method, ShapleyReport};
use fedvalue_core::tabular::PartyId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Format, RunConfig, Unit};
use crate::CliError;

/// Rounds to 12 significant digits.
pub fn round_sig(value: f64) -> f64 {
    if value == 0.0 || !value.is_finite() {
        return value;
    }
    format!("{value:.11e}").parse().unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyValue {
    pub party: PartyId,
    pub phi: f64,
}

/// A valuation result together with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub unit: Unit,
    pub total_cmi: f64,
    pub phi_sum: f64,
    pub permutations: usize,
    pub cmi_evaluations: usize,
    pub cache_hits: usize,
    pub method: Method,
    pub phi: Vec<PartyValue>,
    pub run: ValuationRun,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Summary {
        unit: Unit,
        total_cmi: f64,
        phi_sum: f64,
        permutations: usize,
        cmi_evaluations: usize,
        cache_hits: usize,
        method: Method,
    },
    Phi(PartyValue),
    Run(ValuationRun),
    Config(RunConfig),
}

impl ReportFile {
    pub fn new(config: RunConfig, report: &ShapleyReport, run: ValuationRun) -> Self {
        let scale = match config.unit {
            Unit::Nats => 1.0,
            Unit::Bits => 1.0 / std::f64::consts::LN_2,
        };
        let phi: Vec<PartyValue> =
            report.phi.iter().map(|(&party, &v)| PartyValue { party, phi: round_sig(v * scale) }).collect();
        Self {
            unit: config.unit,
            total_cmi: round_sig(report.total_cmi * scale),
            phi_sum: round_sig(report.phi_sum() * scale),
            permutations: report.permutations,
            cmi_evaluations: report.cmi_evaluations,
            cache_hits: report.cache_hits,
            method: report.method,
            phi,
            run,
            config,
        }
    }

    pub fn phi_of(&self, party: PartyId) -> Option<f64> {
        self.phi.iter().find(|p| p.party == party).map(|p| p.phi)
    }

    pub fn to_text(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Report(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Report(e.to_string()))
    }

    pub fn to_jsonl(&self) -> Result<String, CliError> {
        let mut records = vec![Record::Summary {
            unit: self.unit,
            total_cmi: self.total_cmi,
            phi_sum: self.phi_sum,
            permutations: self.permutations,
            cmi_evaluations: self.cmi_evaluations,
            cache_hits: self.cache_hits,
            method: self.method,
        }];
        records.extend(self.phi.iter().copied().map(Record::Phi));
        records.push(Record::Run(self.run.clone()));
        records.push(Record::Config(self.config.clone()));
        jsonl(&records)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CliError> {
        let mut summary = None;
        let mut phi = Vec::new();
        let mut run = None;
        let mut config = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line).map_err(|e| CliError::Report(e.to_string()))? {
                s @ Record::Summary { .. } => summary = Some(s),
                Record::Phi(p) => phi.push(p),
                Record::Run(r) => run = Some(r),
                Record::Config(c) => config = Some(c),
            }
        }
        let missing = |what: &str| CliError::Report(format!("report has no {what} record"));
        let Some(Record::Summary { unit, total_cmi, phi_sum, permutations, cmi_evaluations, cache_hits, method }) = summary
        else {
            return Err(missing("summary"));
        };
        Ok(Self {
            unit,
            total_cmi,
            phi_sum,
            permutations,
            cmi_evaluations,
            cache_hits,
            method,
            phi,
            run: run.ok_or_else(|| missing("run"))?,
            config: config.ok_or_else(|| missing("config"))?,
        })
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Text => self.to_text(),
            Format::Jsonl => self.to_jsonl(),
        }
    }

    pub fn parse(text: &str, format: Format) -> Result<Self, CliError> {
        match format {
            Format::Text => Self::from_text(text),
            Format::Jsonl => Self::from_jsonl(text),
        }
    }

    pub fn read(path: &Path, format: Format) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path)?, format)
    }
}

pub fn jsonl<T: Serialize>(records: &[T]) -> Result<String, CliError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).map_err(|e| CliError::Report(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Text form of any report: a TOML document.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String, CliError> {
    toml::to_string(value).map_err(|e| CliError::Report(e.to_string()))
}

pub fn from_toml<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Report(e.to_string()))
}

/// Writes `text` to `path`, or to standard output when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
