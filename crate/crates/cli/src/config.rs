//! Run settings: read from TOML, overridden by flags, written next to every
//! output so a run can be repeated from its config alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use catt_core::model::Variant;
use catt_core::synth::GenParams;
use catt_core::table::BoxMode;
use catt_core::train::TrainConfig;
use catt_core::Error;
use serde::{Deserialize, Serialize};

use crate::GlobalArgs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub profile: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rows: Option<(u32, u32)>,
    pub cols: Option<(u32, u32)>,
    pub span_prob: Option<f64>,
    pub empty_prob: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            profile: "A".into(),
            train: 200,
            val: 25,
            test: 50,
            rows: None,
            cols: None,
            span_prob: None,
            empty_prob: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Subcommand that produced this record.
    pub command: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub split: Option<String>,
    pub oracle: bool,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub variant: Option<Variant>,
    pub bbox_mode: Option<BoxMode>,
    pub jobs: Option<usize>,
}

impl Overrides {
    pub fn from_global(g: &GlobalArgs) -> anyhow::Result<Self> {
        Ok(Self {
            seed: g.seed,
            k: g.k,
            variant: g.variant.as_deref().map(str::parse::<Variant>).transpose().map_err(anyhow::Error::msg)?,
            bbox_mode: g.bbox_mode.as_deref().map(str::parse::<BoxMode>).transpose().map_err(anyhow::Error::msg)?,
            jobs: g.jobs,
        })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("malformed config file {}", path.display()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string(self).context("serializing run config")?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(k) = o.k {
            self.train.k = k;
        }
        if let Some(v) = o.variant {
            self.train.model.variant = v;
        }
        if let Some(m) = o.bbox_mode {
            self.train.bbox_mode = m;
        }
        if o.jobs.is_some() {
            self.jobs = o.jobs;
        }
    }

    pub fn record(&mut self, command: &str, inputs: &[(&str, &Path)]) {
        self.command = Some(command.into());
        self.inputs = inputs
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect();
    }

    pub fn gen_params(&self) -> anyhow::Result<GenParams> {
        let s = &self.synth;
        let mut p = GenParams::profile(&s.profile, self.seed)?;
        if let Some(r) = s.rows {
            p.rows = r;
        }
        if let Some(c) = s.cols {
            p.cols = c;
        }
        if let Some(v) = s.span_prob {
            p.span_prob = v;
        }
        if let Some(v) = s.empty_prob {
            p.empty_prob = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_flag_precedence() {
        let text = "seed = 3\n[train]\nk = 7\nepochs = 2\n[train.model]\nvariant = \"no_attention\"\n[synth]\nrows = [2, 3]\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.train.k, cfg.train.epochs), (3, 3, 7, 2));
        assert_eq!(cfg.train.model.variant, Variant::NoAttention);
        cfg.apply(&Overrides {
            seed: Some(9),
            k: Some(4),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.train.seed, cfg.train.k), (9, 9, 4));
        assert_eq!(cfg.gen_params().unwrap().rows, (2, 3));
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
