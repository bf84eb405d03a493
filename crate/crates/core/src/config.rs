//! Run configuration.
//!
//! The file format is TOML with one table per concern. Every key is unique
//! across tables, so command-line overrides can name keys without their
//! section (`lambda2=0.5`). Unknown keys are rejected both in files and in
//! overrides. Precedence is override > file > default.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TasBranch {
    Cutout,
    Jigsaw,
    Intensity,
}

impl TasBranch {
    pub const ALL: [TasBranch; 3] = [TasBranch::Cutout, TasBranch::Jigsaw, TasBranch::Intensity];
}

impl fmt::Display for TasBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TasBranch::Cutout => "Cutout",
            TasBranch::Jigsaw => "Jigsaw",
            TasBranch::Intensity => "Intensity",
        })
    }
}

/// Prediction branch: `I` = cutout input, `J` = jigsaw input, `K` = intensity input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    I,
    J,
    K,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::I, Branch::J, Branch::K];

    pub fn index(self) -> usize {
        match self {
            Branch::I => 0,
            Branch::J => 1,
            Branch::K => 2,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::I => "y_i",
            Branch::J => "y_j",
            Branch::K => "y_k",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlFusion {
    LossWeighted,
    Average,
    Random,
}

impl fmt::Display for PlFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlFusion::LossWeighted => "PL",
            PlFusion::Average => "Average",
            PlFusion::Random => "Random",
        })
    }
}

/// Reduction of the partial cross-entropy over annotated pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeReduction {
    Mean,
    Sum,
}

/// How the boundary Dice sums over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryReduction {
    /// One Dice per map, sums running over all channels and pixels.
    Joint,
    /// One Dice per channel, averaged.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epsilon: f64,
    pub ce_reduction: CeReduction,
    pub boundary_reduction: BoundaryReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.1,
            epsilon: 1e-5,
            ce_reduction: CeReduction::Mean,
            boundary_reduction: BoundaryReduction::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.95,
            epochs: 1000,
            batch_size: 8,
            seed: 42,
            val_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jigsaw_grid: usize,
    pub intensity_alpha_range: [f64; 2],
    pub intensity_beta_range: [f64; 2],
    pub cutout_margin: usize,
    pub cutout_fill: f64,
    /// Augmentations that are active; inactive branches see the original image.
    pub tas_branches: Vec<TasBranch>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jigsaw_grid: 4,
            intensity_alpha_range: [0.7, 1.3],
            intensity_beta_range: [-0.2, 0.2],
            cutout_margin: 5,
            cutout_fill: 0.0,
            tas_branches: TasBranch::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BapConfig {
    pub pl_branches: Vec<Branch>,
    pub pl_fusion: PlFusion,
    pub boundary_pool_size: usize,
}

impl Default for BapConfig {
    fn default() -> Self {
        Self {
            pl_branches: vec![Branch::J, Branch::K],
            pl_fusion: PlFusion::LossWeighted,
            boundary_pool_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub ignore_label: i32,
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            ignore_label: 4,
            image_size: 224,
            base_width: 16,
            depth: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub bap: BapConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.optim.learning_rate * self.optim.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let l = &self.loss;
        for (name, v) in [("lambda1", l.lambda1), ("lambda2", l.lambda2), ("lambda3", l.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(l.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", l.epsilon));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", o.learning_rate));
        }
        if !(o.lr_decay > 0.0 && o.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", o.lr_decay));
        }
        if o.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if o.val_every == 0 {
            return bad("val_every must be positive".into());
        }
        let a = &self.augment;
        if a.jigsaw_grid == 0 {
            return bad("jigsaw_grid must be >= 1".into());
        }
        for (name, [lo, hi]) in [
            ("intensity_alpha_range", a.intensity_alpha_range),
            ("intensity_beta_range", a.intensity_beta_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} must be an ordered finite interval, got [{lo}, {hi}]"));
            }
        }
        let b = &self.bap;
        if b.boundary_pool_size == 0 || b.boundary_pool_size.is_multiple_of(2) {
            return bad(format!(
                "boundary_pool_size must be odd, got {}",
                b.boundary_pool_size
            ));
        }
        if b.pl_branches.is_empty() {
            return bad("pl_branches must name at least one branch".into());
        }
        let m = &self.model;
        if m.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if m.ignore_label >= 0 && (m.ignore_label as usize) < m.num_classes {
            return bad(format!(
                "ignore_label {} collides with the class range",
                m.ignore_label
            ));
        }
        if m.base_width == 0 || m.depth == 0 {
            return bad("base_width and depth must be positive".into());
        }
        let stride = 1usize << m.depth;
        if m.image_size == 0 || !m.image_size.is_multiple_of(stride) {
            return bad(format!(
                "image_size {} must be divisible by 2^depth = {stride}",
                m.image_size
            ));
        }
        if !m.image_size.is_multiple_of(a.jigsaw_grid) {
            return bad(format!(
                "image_size {} must be divisible by jigsaw_grid {}",
                m.image_size, a.jigsaw_grid
            ));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (Some(s), n),
        None => (None, key),
    };
    let slot = table
        .iter_mut()
        .filter(|(s, _)| section.is_none_or(|want| want == s.as_str()))
        .find_map(|(_, v)| v.as_table_mut().and_then(|t| t.get_mut(name)))
        .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    *slot = parse_value(raw, slot)?;
    Ok(())
}

fn parse_value(raw: &str, current: &toml::Value) -> Result<toml::Value> {
    let parse_literal = |s: &str| -> Option<toml::Value> {
        let doc: toml::Table = toml::from_str(&format!("v = {s}")).ok()?;
        doc.get("v").cloned()
    };
    let value = match current {
        toml::Value::String(_) => {
            parse_literal(raw).unwrap_or_else(|| toml::Value::String(raw.to_string()))
        }
        toml::Value::Array(_) if !raw.starts_with('[') => {
            let items = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_literal(s).unwrap_or_else(|| toml::Value::String(s.to_string())))
                .collect();
            toml::Value::Array(items)
        }
        toml::Value::Float(_) => match parse_literal(raw) {
            Some(toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            Some(v) => v,
            None => return Err(Error::Config(format!("cannot parse `{raw}` as a number"))),
        },
        _ => parse_literal(raw)
            .ok_or_else(|| Error::Config(format!("cannot parse value `{raw}`")))?,
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3), (1.0, 0.3, 0.1));
        assert_eq!(cfg.optim.learning_rate, 1e-4);
        assert_eq!(cfg.optim.lr_decay, 0.95);
        assert_eq!(cfg.loss.epsilon, 1e-5);
        assert_eq!(cfg.model.num_classes, 4);
        assert_eq!(cfg.model.ignore_label, 4);
        assert_eq!(cfg.bap.pl_branches, vec![Branch::J, Branch::K]);
        cfg.validate().unwrap();
    }

    #[test]
    fn lr_schedule_is_geometric() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at_epoch(10) - 5.987369392383789e-5).abs() < 1e-15);
        assert_eq!(cfg.lr_at_epoch(0), 1e-4);
    }

    #[test]
    fn file_then_override_precedence() {
        let file = "[loss]\nlambda2 = 0.8\n[optim]\nepochs = 3\n";
        let cfg = TrainConfig::from_toml_str(file).unwrap();
        assert_eq!(cfg.loss.lambda2, 0.8);
        assert_eq!(cfg.loss.lambda1, 1.0);
        let cfg = cfg
            .with_overrides(&["lambda2=0.3".into(), "pl_branches=i,j,k".into(), "pl_fusion=average".into()])
            .unwrap();
        assert_eq!(cfg.loss.lambda2, 0.3);
        assert_eq!(cfg.optim.epochs, 3);
        assert_eq!(cfg.bap.pl_branches, vec![Branch::I, Branch::J, Branch::K]);
        assert_eq!(cfg.bap.pl_fusion, PlFusion::Average);
        let cfg = cfg.with_overrides(&["loss.lambda3=1".into()]).unwrap();
        assert_eq!(cfg.loss.lambda3, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            TrainConfig::default().with_overrides(&["lamda2=0.3".into()]),
            Err(Error::UnknownKey(k)) if k == "lamda2"
        ));
        assert!(TrainConfig::from_toml_str("[loss]\nlamda2 = 0.3\n").is_err());
        assert!(TrainConfig::from_toml_str("[wat]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = TrainConfig::default();
        assert!(cfg.with_overrides(&["boundary_pool_size=4".into()]).is_err());
        assert!(cfg.with_overrides(&["lambda1=-1".into()]).is_err());
        assert!(cfg.with_overrides(&["image_size=100".into()]).is_err());
        assert!(cfg.with_overrides(&["jigsaw_grid=3".into(), "image_size=64".into()]).is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = TrainConfig::default()
            .with_overrides(&["seed=7".into(), "tas_branches=jigsaw".into()])
            .unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }
}
