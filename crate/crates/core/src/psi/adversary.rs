//! Computation-server misbehaviors, for attack simulation and tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncryptedId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum ServerBehavior {
    Honest,
    /// Reports `n` and forwards `n` fabricated tags to the validator.
    ForgeCardinality(usize),
    /// Silently drops each intersected tag with the given probability.
    DropRandom(f64),
    /// Pads the intersection with `n` fabricated tags.
    InjectRandom(usize),
    /// Claims the intersection is empty.
    ReportZero,
}

impl ServerBehavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, ServerBehavior::Honest)
    }
}

impl fmt::Display for ServerBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerBehavior::Honest => write!(f, "honest"),
            ServerBehavior::ForgeCardinality(n) => write!(f, "forge:{n}"),
            ServerBehavior::DropRandom(p) => write!(f, "drop:{p}"),
            ServerBehavior::InjectRandom(n) => write!(f, "inject:{n}"),
            ServerBehavior::ReportZero => write!(f, "report-zero"),
        }
    }
}

impl FromStr for ServerBehavior {
    type Err = Error;

    /// `honest`, `forge:N`, `drop:P`, `inject:N` or `report-zero`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let bad = || Error::Domain(format!("unknown server behavior {s:?}"));
        let count = |p: Option<&str>| p.ok_or_else(bad)?.parse::<usize>().map_err(|_| bad());
        match name {
            "honest" => Ok(ServerBehavior::Honest),
            "report-zero" | "zero" => Ok(ServerBehavior::ReportZero),
            "forge" => Ok(ServerBehavior::ForgeCardinality(count(param)?)),
            "inject" => Ok(ServerBehavior::InjectRandom(count(param)?)),
            "drop" => {
                let p: f64 = param.ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Domain(format!("drop fraction {p} outside [0, 1]")));
                }
                Ok(ServerBehavior::DropRandom(p))
            }
            _ => Err(bad()),
        }
    }
}

fn random_tag(rng: &mut impl Rng) -> EncryptedId {
    EncryptedId(rng.gen())
}

/// Turns the honest intersection into what a server with `behavior` would
/// forward to the validator, and the `n_c` it would report to the parties.
pub fn apply_behavior(behavior: ServerBehavior, honest: Vec<EncryptedId>, rng: &mut impl Rng) -> (Vec<EncryptedId>, i64) {
    let forwarded = match behavior {
        ServerBehavior::Honest => honest,
        ServerBehavior::ForgeCardinality(n) => (0..n).map(|_| random_tag(rng)).collect(),
        ServerBehavior::DropRandom(p) => honest.into_iter().filter(|_| !rng.gen_bool(p)).collect(),
        ServerBehavior::InjectRandom(n) => {
            let mut out = honest;
            out.extend((0..n).map(|_| random_tag(rng)));
            out.sort_unstable();
            out
        }
        ServerBehavior::ReportZero => Vec::new(),
    };
    let n_c = forwarded.len() as i64;
    (forwarded, n_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_round_trip() {
        for b in [
            ServerBehavior::Honest,
            ServerBehavior::ForgeCardinality(12),
            ServerBehavior::DropRandom(0.5),
            ServerBehavior::InjectRandom(3),
            ServerBehavior::ReportZero,
        ] {
            assert_eq!(b.to_string().parse::<ServerBehavior>().unwrap(), b);
        }
        assert!("drop:1.5".parse::<ServerBehavior>().is_err());
        assert!("forge".parse::<ServerBehavior>().is_err());
        assert!("lie".parse::<ServerBehavior>().is_err());
    }

    #[test]
    fn behaviors_shape_the_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let honest: Vec<EncryptedId> = (0..10u8).map(|i| EncryptedId([i; 32])).collect();
        assert_eq!(apply_behavior(ServerBehavior::Honest, honest.clone(), &mut rng).1, 10);
        assert_eq!(apply_behavior(ServerBehavior::ReportZero, honest.clone(), &mut rng), (vec![], 0));
        assert_eq!(apply_behavior(ServerBehavior::InjectRandom(2), honest.clone(), &mut rng).1, 12);
        let (forged, n) = apply_behavior(ServerBehavior::ForgeCardinality(4), honest.clone(), &mut rng);
        assert_eq!(n, 4);
        assert!(forged.iter().all(|t| !honest.contains(t)));
        assert_eq!(apply_behavior(ServerBehavior::DropRandom(1.0), honest, &mut rng).1, 0);
    }
}
