//! Run configuration: one JSON document, overridable field by field with
//! dotted paths (`model.d_model=64`).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stworld::model::{Variant, WorldModelConfig};
use stworld::rollout::SamplingPolicy;
use stworld::tokenizer::TokenizerConfig;
use stworld::world::WorldParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: WorldParams,
    pub tokenizer: TokenizerConfig,
    /// World-model settings, including pose binning and ablation switches.
    pub model: WorldModelConfig,
    pub data_dir: Option<PathBuf>,
    pub tokenizer_checkpoint: Option<PathBuf>,
    pub sampling: SamplingPolicy,
}

impl RunConfig {
    /// Loads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data_dir, &self.tokenizer_checkpoint].into_iter().flatten() {
            if !p.exists() {
                bail!("configured path {} does not exist", p.display());
            }
        }
        self.tokenizer.validate()?;
        self.model.validate()?;
        if self.model.variant == Variant::Vanilla && !self.model.internal_ar {
            bail!("the vanilla baseline has no internal-AR switch; drop --no-internal-ar");
        }
        let w = self.world.sanitized();
        if (w.height, w.width, w.channels) != (self.tokenizer.height, self.tokenizer.width, self.tokenizer.channels) {
            bail!(
                "world raster {}x{}x{} differs from tokenizer input {}x{}x{}",
                w.height,
                w.width,
                w.channels,
                self.tokenizer.height,
                self.tokenizer.width,
                self.tokenizer.channels
            );
        }
        check_model_fits_tokenizer(&self.model, &self.tokenizer)
    }
}

/// Errors naming the first dimension in which the world model's image
/// tokens disagree with the tokenizer's.
pub fn check_model_fits_tokenizer(model: &WorldModelConfig, tok: &TokenizerConfig) -> Result<()> {
    let (gh, gw) = tok.grid();
    if model.grid_height != gh {
        bail!("world-model grid_height {} does not match tokenizer grid height {gh}", model.grid_height);
    }
    if model.grid_width != gw {
        bail!("world-model grid_width {} does not match tokenizer grid width {gw}", model.grid_width);
    }
    if model.image_vocab != tok.codebook_size {
        bail!(
            "world-model image_vocab {} does not match tokenizer codebook_size {}",
            model.image_vocab,
            tok.codebook_size
        );
    }
    Ok(())
}

/// Sets the field at a dotted path. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) =
        assignment.split_once('=').ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            bail!("override path `{path}` has an empty segment");
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path `{path}`: `{}` is not an object", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// Seed precedence: command line (or `DW_SEED`), then config, then 0.
pub fn resolve_seed(cli: Option<u64>, cfg: &RunConfig) -> u64 {
    cli.or(cfg.seed).unwrap_or(0)
}
