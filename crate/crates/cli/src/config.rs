use std::path::PathBuf;

use clap::ValueEnum;
use fedvalue_core::federation::{FederationOptions, Mode, Transport};
use fedvalue_core::psi::{PsiConfig, ServerBehavior};
use fedvalue_core::shapley::Method;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SHARED_KEY_ENV: &str = "FEDVALUE_SHARED_KEY";
pub const GROUP_KEY_ENV: &str = "FEDVALUE_GROUP_KEY";

const DEFAULT_SHARED_KEY: &str = "fedvalue-default-shared-key";
const DEFAULT_GROUP_KEY: &str = "fedvalue-default-group-key";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Centralized,
    Federated,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Centralized => Mode::Centralized,
            ModeArg::Federated => Mode::Federated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Exact,
    Permutations,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Text,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Nats,
    Bits,
}

fn honest() -> ServerBehavior {
    ServerBehavior::Honest
}

/// Everything a run depends on. Keys are never serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    pub bins: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_parties: Option<usize>,
    pub features_per_party: usize,
    /// Sample count for generated data when no input is given.
    pub n_samples: usize,
    pub seed: u64,
    pub mode: ModeArg,
    pub method: MethodArg,
    pub samples: usize,
    pub q: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nr_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nr_max: Option<u32>,
    pub transport: TransportArg,
    /// Behavior of the in-process computation server, for simulations.
    #[serde(default = "honest")]
    pub server_behavior: ServerBehavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub format: Format,
    pub unit: Unit,
    #[serde(skip)]
    pub shared_key: Option<Vec<u8>>,
    #[serde(skip)]
    pub group_key: Option<Vec<u8>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            label: None,
            id_column: None,
            bins: 5,
            pca_components: None,
            n_parties: None,
            features_per_party: 1,
            n_samples: 1000,
            seed: 0,
            mode: ModeArg::Centralized,
            method: MethodArg::Exact,
            samples: 1000,
            q: 3,
            nr_min: None,
            nr_max: None,
            transport: TransportArg::Inproc,
            server_behavior: ServerBehavior::Honest,
            connect: None,
            out: None,
            format: Format::Text,
            unit: Unit::Nats,
            shared_key: None,
            group_key: None,
        }
    }
}

/// Default adversarial range when none is configured: nine adversarial
/// samples per real one, the mix used for the efficiency benchmarks.
pub const DEFAULT_ADVERSARIAL_RATIO: u32 = 9;

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.bins == 0 {
            return bad("--bins must be at least 1".into());
        }
        if self.features_per_party == 0 {
            return bad("--features-per-party must be at least 1".into());
        }
        if self.n_parties == Some(0) {
            return bad("--parties must be at least 1".into());
        }
        if self.pca_components == Some(0) {
            return bad("--pca must be at least 1".into());
        }
        if self.q == 0 {
            return bad("--q must be at least 1".into());
        }
        if self.method == MethodArg::Sampled && self.samples == 0 {
            return bad("--samples must be at least 1".into());
        }
        if let (Some(lo), Some(hi)) = (self.nr_min, self.nr_max) {
            if lo > hi {
                return bad(format!("--nr-min {lo} exceeds --nr-max {hi}"));
            }
        }
        if self.input.is_some() && self.label.is_none() {
            return bad("--label is required with --input".into());
        }
        if !self.server_behavior.is_honest() && self.connect.is_some() {
            return bad("--server-behavior only applies to servers this process starts".into());
        }
        if self.connect.is_some() && self.transport != TransportArg::Tcp {
            return bad("--connect needs --transport tcp".into());
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        match self.method {
            MethodArg::Exact => Method::Exact,
            MethodArg::Permutations => Method::Permutations,
            MethodArg::Sampled => Method::Sampled { k: self.samples, seed: self.seed },
        }
    }

    /// The environment overrides configured keys; built-in defaults come last.
    pub fn keys(&self) -> (Vec<u8>, Vec<u8>) {
        let pick = |explicit: &Option<Vec<u8>>, env: &str, default: &str| {
            std::env::var(env)
                .ok()
                .filter(|v| !v.is_empty())
                .map(String::into_bytes)
                .or_else(|| explicit.clone())
                .unwrap_or_else(|| default.as_bytes().to_vec())
        };
        (
            pick(&self.shared_key, SHARED_KEY_ENV, DEFAULT_SHARED_KEY),
            pick(&self.group_key, GROUP_KEY_ENV, DEFAULT_GROUP_KEY),
        )
    }

    pub fn nr_range(&self, n_samples: usize) -> (u32, u32) {
        let default = DEFAULT_ADVERSARIAL_RATIO.saturating_mul(n_samples as u32);
        match (self.nr_min, self.nr_max) {
            (Some(lo), Some(hi)) => (lo, hi),
            (Some(lo), None) => (lo, lo.max(default)),
            (None, Some(hi)) => (hi.min(default), hi),
            (None, None) => (default, default),
        }
    }

    pub fn psi_config(&self, n_samples: usize) -> Result<PsiConfig, CliError> {
        let (shared, group) = self.keys();
        let (lo, hi) = self.nr_range(n_samples);
        Ok(PsiConfig::new(self.q, lo, hi, &shared, &group)?)
    }

    pub fn transport(&self) -> Result<Transport, CliError> {
        Ok(match (self.transport, &self.connect) {
            (TransportArg::Inproc, _) => Transport::InProcess,
            (TransportArg::Tcp, None) => Transport::LocalTcp,
            (TransportArg::Tcp, Some(spec)) => {
                let (computation, validation) = spec
                    .split_once(',')
                    .ok_or_else(|| CliError::Config("--connect expects COMPUTATION_ADDR,VALIDATION_ADDR".into()))?;
                Transport::Tcp { computation: computation.trim().into(), validation: validation.trim().into() }
            }
        })
    }

    pub fn federation(&self, n_samples: usize, behavior: ServerBehavior) -> Result<FederationOptions, CliError> {
        Ok(FederationOptions {
            psi: self.psi_config(n_samples)?,
            behavior,
            transport: self.transport()?,
            seed: self.seed,
        })
    }
}
