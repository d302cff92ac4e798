//! The method grid: each arm pairs a training recipe (loss, single vs.
//! peer-taught, member count) with a prediction rule.

use anyhow::{bail, Result};
use evicore::coteach::LossKind;

use crate::config::FileConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Evidential head, single model; confidence from total evidence.
    Edl,
    /// Evidential head with small-loss peer teaching.
    EdlCoteach,
    /// Cross-entropy single model; confidence from predictive entropy.
    Ce,
    CeCoteach,
    /// Cross-entropy model queried with dropout left on at test time.
    McDropout,
    McDropoutCoteach,
    /// Independently initialized cross-entropy models, probabilities averaged.
    Ensemble,
    EnsembleCoteach,
}

pub const ALL_METHODS: [Method; 8] = [
    Method::Edl,
    Method::EdlCoteach,
    Method::Ce,
    Method::CeCoteach,
    Method::McDropout,
    Method::McDropoutCoteach,
    Method::Ensemble,
    Method::EnsembleCoteach,
];

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "edl" => Self::Edl,
            "edl-coteach" => Self::EdlCoteach,
            "ce" => Self::Ce,
            "ce-coteach" => Self::CeCoteach,
            "mc-dropout" => Self::McDropout,
            "mc-dropout-coteach" => Self::McDropoutCoteach,
            "ensemble" => Self::Ensemble,
            "ensemble-coteach" => Self::EnsembleCoteach,
            other => bail!(
                "unknown method {other:?}; expected one of {}",
                ALL_METHODS
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Edl => "edl",
            Self::EdlCoteach => "edl-coteach",
            Self::Ce => "ce",
            Self::CeCoteach => "ce-coteach",
            Self::McDropout => "mc-dropout",
            Self::McDropoutCoteach => "mc-dropout-coteach",
            Self::Ensemble => "ensemble",
            Self::EnsembleCoteach => "ensemble-coteach",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Self::Edl | Self::EdlCoteach => LossKind::Edl,
            _ => LossKind::CrossEntropy,
        }
    }

    /// Whether training uses the two-peer small-loss exchange.
    pub fn coteach(self) -> bool {
        matches!(
            self,
            Self::EdlCoteach
                | Self::CeCoteach
                | Self::McDropoutCoteach
                | Self::EnsembleCoteach
        )
    }

    /// Independently trained models this arm needs.
    pub fn members(self, config: &FileConfig) -> usize {
        match self {
            Self::Ensemble | Self::EnsembleCoteach => config.train.ensemble_members,
            _ => 1,
        }
    }

    /// Monte Carlo dropout needs stochastic units at prediction time.
    pub fn needs_dropout(self) -> bool {
        matches!(self, Self::McDropout | Self::McDropoutCoteach)
    }
}

/// Parses the full method list up front so a typo fails before any training.
pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut methods = Vec::with_capacity(names.len());
    for name in names {
        let method = Method::parse(name)?;
        if methods.contains(&method) {
            bail!("method {:?} listed twice", method.name());
        }
        methods.push(method);
    }
    Ok(methods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for method in ALL_METHODS {
            assert_eq!(Method::parse(method.name()).unwrap(), method);
        }
        assert!(Method::parse("edl_coteach").is_err());
        assert!(Method::parse("softmax").is_err());
    }

    #[test]
    fn recipe_flags_match_the_grid() {
        assert_eq!(Method::Edl.loss_kind(), LossKind::Edl);
        assert_eq!(Method::McDropout.loss_kind(), LossKind::CrossEntropy);
        assert!(!Method::Edl.coteach());
        assert!(Method::EnsembleCoteach.coteach());
        assert!(Method::McDropoutCoteach.needs_dropout());
        assert!(!Method::Ensemble.needs_dropout());

        let mut config = FileConfig::default();
        config.train.ensemble_members = 4;
        assert_eq!(Method::Ensemble.members(&config), 4);
        assert_eq!(Method::EdlCoteach.members(&config), 1);
    }

    #[test]
    fn duplicate_or_unknown_methods_fail_in_one_pass() {
        assert!(parse_methods(&["edl".into(), "edl".into()]).is_err());
        assert!(parse_methods(&["edl".into(), "bogus".into()]).is_err());
        let parsed = parse_methods(&["ensemble".into(), "ce".into()]).unwrap();
        assert_eq!(parsed, vec![Method::Ensemble, Method::Ce]);
    }
}
