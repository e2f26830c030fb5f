//! Network description files.
//!
//! ```json
//! {
//!   "L": 2,
//!   "modules": [{ "from": 1, "to": 2, "num": [0, 0.5], "den": [1, -0.3] }],
//!   "noise": [
//!     { "node": 1, "num": [1], "den": [1], "variance": 0 },
//!     { "node": 2, "num": [1], "den": [1], "variance": 0.1 }
//!   ],
//!   "references": [1]
//! }
//! ```
//!
//! Coefficients ascend in `q⁻¹`, nodes are numbered from 1, and every node
//! has exactly one noise entry.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use netident::network::{NetworkModel, NoiseModel};
use netident::poly::RationalTF;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(rename = "L")]
    pub nodes: usize,
    pub modules: Vec<ModuleEntry>,
    pub noise: Vec<NoiseEntry>,
    pub references: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleEntry {
    pub from: usize,
    pub to: usize,
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    pub node: usize,
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    pub variance: f64,
}

impl NetworkConfig {
    pub fn from_model(net: &NetworkModel) -> Self {
        NetworkConfig {
            nodes: net.nodes(),
            modules: net
                .modules()
                .iter()
                .map(|(&(to, from), g)| ModuleEntry {
                    from,
                    to,
                    num: g.num().coeffs().to_vec(),
                    den: g.den().coeffs().to_vec(),
                })
                .collect(),
            noise: net
                .noise_models()
                .iter()
                .enumerate()
                .map(|(j, n)| NoiseEntry {
                    node: j + 1,
                    num: n.filter.num().coeffs().to_vec(),
                    den: n.filter.den().coeffs().to_vec(),
                    variance: n.variance,
                })
                .collect(),
            references: net.references().iter().copied().collect(),
        }
    }

    /// Builds the model and runs [`NetworkModel::validate`] on it.
    pub fn to_model(&self) -> Result<NetworkModel, CliError> {
        let mut problems = Vec::new();
        let monic = |den: &[f64], what: String, problems: &mut Vec<String>| {
            if den.first() != Some(&1.0) {
                problems.push(format!("{what}: denominator must start with 1"));
            }
        };
        let mut modules = BTreeMap::new();
        for m in &self.modules {
            let what = format!("module G{},{}", m.to, m.from);
            monic(&m.den, what.clone(), &mut problems);
            match RationalTF::from_coeffs(&m.num, &m.den) {
                Ok(tf) => {
                    if modules.insert((m.to, m.from), tf).is_some() {
                        problems.push(format!("{what} listed twice"));
                    }
                }
                Err(e) => problems.push(format!("{what}: {e}")),
            }
        }
        let mut noise: Vec<Option<NoiseModel>> = vec![None; self.nodes];
        for n in &self.noise {
            let what = format!("noise model H{}", n.node);
            if n.node == 0 || n.node > self.nodes {
                problems.push(format!("{what}: node out of range 1..={}", self.nodes));
                continue;
            }
            monic(&n.den, what.clone(), &mut problems);
            if n.num.first() != Some(&1.0) {
                problems.push(format!("{what} is not monic"));
            }
            let filter = match RationalTF::from_coeffs(&n.num, &n.den) {
                Ok(tf) => tf,
                Err(e) => {
                    problems.push(format!("{what}: {e}"));
                    continue;
                }
            };
            if noise[n.node - 1].is_some() {
                problems.push(format!("{what} listed twice"));
            }
            noise[n.node - 1] = Some(NoiseModel {
                filter,
                variance: n.variance,
            });
        }
        for (j, n) in noise.iter().enumerate() {
            if n.is_none() {
                problems.push(format!("node {} has no noise entry", j + 1));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Validation(problems.join("; ")));
        }
        let net = NetworkModel::new(
            self.nodes,
            modules,
            noise.into_iter().map(|n| n.expect("checked above")).collect(),
            self.references.iter().copied().collect::<BTreeSet<_>>(),
        );
        let report = net.validate();
        if !report.is_valid() {
            return Err(CliError::Validation(report.to_string()));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub fn parse_network_config_str(text: &str) -> Result<NetworkModel, CliError> {
    let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    cfg.to_model()
}

pub fn parse_network_config(path: &Path) -> Result<NetworkModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_network_config_str(&text).map_err(|e| e.in_file(path))
}
