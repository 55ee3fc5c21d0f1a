// SPDX-License-Identifier: Apache-2.0

//! Optional top-level config file. Every value is a default that a command
//! line flag overrides.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub window_ms: Option<u64>,
    pub idle_timeout_ms: Option<u64>,
    pub ports: Option<Vec<u16>>,
    pub top_n: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub seed: Option<u64>,
}

impl Defaults {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}
