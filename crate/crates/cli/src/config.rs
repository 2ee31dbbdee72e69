//! `key = value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dff_core::align::AlignConfig;
use dff_core::descent::RegressionConfig;
use dff_core::net::{Method, NetConfig, OptimConfig};
use dff_core::render::DatasetConfig;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("image_size", "64"),
    ("model_vertices", "1500"),
    ("id_components", "8"),
    ("exp_components", "6"),
    ("max_yaw_deg", "90"),
    ("max_pitch_deg", "20"),
    ("max_roll_deg", "20"),
    ("feature_dim", "32"),
    ("net_depth", "2"),
    ("channels", "16,32,32"),
    ("patches", "32"),
    ("segmentations", "8"),
    ("epochs", "20"),
    ("optimizer", "adam"),
    ("learning_rate", "0.01"),
    ("momentum", "0.9"),
    ("batch_size", "4"),
    ("cascade_stages", "3"),
    ("omega_lan", "1"),
    ("omega_reg", "0.001"),
    ("lambda1", "auto"),
    ("lambda2", "auto"),
    ("box_margin", "0.1"),
    ("boxes_per_image", "5"),
    ("box_jitter", "0.05"),
    ("visibility_resolution", "128"),
    ("sparse_threshold_deg", "30"),
    ("dense_threshold_deg", "12"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected `key = value`", n + 1);
            };
            cfg.set(k.trim(), v.trim()).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key).parse().map_err(|_| anyhow::anyhow!("config `{key}`: cannot parse `{}`", self.raw(key)))
    }

    fn lambda(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            "auto" => Ok(None),
            _ => self.num(key).map(Some),
        }
    }

    /// Parses every typed view once so bad values fail early.
    pub fn validate(&self) -> Result<()> {
        self.net()?.validate()?;
        self.optim(0)?;
        self.align()?.validate()?;
        self.regression()?;
        self.dataset()?;
        self.model_sizes()?;
        self.bank()?;
        self.thresholds()?;
        Ok(())
    }

    pub fn image_size(&self) -> Result<usize> {
        self.num("image_size")
    }

    /// `(vertices, identity components, expression components)`.
    pub fn model_sizes(&self) -> Result<(usize, usize, usize)> {
        Ok((self.num("model_vertices")?, self.num("id_components")?, self.num("exp_components")?))
    }

    /// `(segmentation count, patches per segmentation)`.
    pub fn bank(&self) -> Result<(usize, usize)> {
        Ok((self.num("segmentations")?, self.num("patches")?))
    }

    /// `(sparse, dense)` matching thresholds in degrees.
    pub fn thresholds(&self) -> Result<(f64, f64)> {
        Ok((self.num("sparse_threshold_deg")?, self.num("dense_threshold_deg")?))
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        let s = self.image_size()?;
        Ok(DatasetConfig {
            width: s,
            height: s,
            max_yaw_deg: self.num("max_yaw_deg")?,
            max_pitch_deg: self.num("max_pitch_deg")?,
            max_roll_deg: self.num("max_roll_deg")?,
            ..DatasetConfig::default()
        })
    }

    pub fn net(&self) -> Result<NetConfig> {
        let s = self.image_size()?;
        let channels = self
            .raw("channels")
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| anyhow::anyhow!("config `channels`: bad entry `{c}`")))
            .collect::<Result<Vec<usize>>>()?;
        Ok(NetConfig {
            height: s,
            width: s,
            feature_dim: self.num("feature_dim")?,
            depth: self.num("net_depth")?,
            channels,
            seed: 0,
        })
    }

    pub fn optim(&self, seed: u64) -> Result<OptimConfig> {
        let method = match self.raw("optimizer") {
            "adam" => Method::Adam,
            "sgd" => Method::SgdMomentum,
            other => anyhow::bail!("config `optimizer`: expected `adam` or `sgd`, got `{other}`"),
        };
        Ok(OptimConfig {
            method,
            learning_rate: self.num("learning_rate")?,
            momentum: self.num("momentum")?,
            batch_size: self.num("batch_size")?,
            epochs: self.num("epochs")?,
            seed,
            seg_weights: Vec::new(),
        })
    }

    pub fn align(&self) -> Result<AlignConfig> {
        Ok(AlignConfig {
            omega_lan: self.num("omega_lan")?,
            omega_reg: self.num("omega_reg")?,
            iterations: self.num("cascade_stages")?,
            visibility_resolution: self.num("visibility_resolution")?,
            ..AlignConfig::default()
        })
    }

    pub fn regression(&self) -> Result<RegressionConfig> {
        let r = RegressionConfig {
            lambda1: self.lambda("lambda1")?,
            lambda2: self.lambda("lambda2")?,
            stages: self.num("cascade_stages")?,
            box_margin: self.num("box_margin")?,
            boxes_per_image: self.num("boxes_per_image")?,
            box_jitter: self.num("box_jitter")?,
            seed: 0,
        };
        if r.boxes_per_image == 0 || !(0.0..1.0).contains(&r.box_jitter) {
            anyhow::bail!("config: boxes_per_image must be positive and box_jitter in [0, 1)");
        }
        Ok(r)
    }

    /// One `key=value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Header echoed into every output: command, seed and full configuration.
pub fn provenance(command: &str, seed: Option<u64>, inputs: &[&Path], cfg: &RunConfig) -> String {
    let mut s = format!("command={command}\n");
    if let Some(seed) = seed {
        s += &format!("seed={seed}\n");
    }
    for p in inputs {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        s += &format!("input={name}\n");
    }
    s + &cfg.to_text()
}

/// Provenance as `# `-prefixed comment lines for text outputs.
pub fn comment_block(provenance: &str) -> String {
    provenance.lines().map(|l| format!("# {l}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("# comment\nepochs = 3\n\npatches=16 # trailing\n").unwrap();
        assert_eq!(cfg.optim(1).unwrap().epochs, 3);
        assert_eq!(cfg.bank().unwrap(), (8, 16));
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
        assert!(RunConfig::parse("epochs = many").unwrap().validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn lambdas_default_to_auto() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.regression().unwrap().lambda1, None);
        let cfg = RunConfig::parse("lambda2 = 5").unwrap();
        assert_eq!(cfg.regression().unwrap().lambda2, Some(5.0));
    }

    #[test]
    fn provenance_lists_everything() {
        let p = provenance("gen-data", Some(7), &[Path::new("/tmp/x/model.dfft")], &RunConfig::default());
        assert!(p.starts_with("command=gen-data\nseed=7\ninput=model.dfft\n"));
        assert_eq!(p.lines().count(), 3 + DEFAULTS.len());
        assert!(comment_block(&p).lines().all(|l| l.starts_with("# ")));
    }
}
