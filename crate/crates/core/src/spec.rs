//! Architectural description of a dual encoder: tower layout, stems, and
//! where MoE layers sit.
//!
//! [`ModelSpec`] is the single source of truth for building parameters,
//! performing upcycling surgery, and estimating cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which towers receive MoE layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeModality {
    Image,
    Text,
    #[default]
    Both,
}

impl MoeModality {
    pub fn covers(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (MoeModality::Both, _) | (MoeModality::Image, Modality::Image) | (MoeModality::Text, Modality::Text)
        )
    }
}

impl std::str::FromStr for MoeModality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Self::Image),
            "text" => Ok(Self::Text),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown modality `{other}` (expected image, text or both)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    #[default]
    Separated,
    Shared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Dense first, then sparse: 0-based odd layers are MoE.
    #[default]
    AlternatingDenseSparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerSpec {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub max_tokens: usize,
}

impl Default for TowerSpec {
    fn default() -> Self {
        Self::new(2, 64, 4, 16)
    }
}

impl TowerSpec {
    /// Tower with the conventional 4× MLP expansion.
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, max_tokens: usize) -> Self {
        Self { num_layers, model_dim, num_heads, mlp_hidden_dim: 4 * model_dim, max_tokens }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Parameters in one dense MLP block (two projections with biases).
    pub fn mlp_params(&self) -> usize {
        2 * self.model_dim * self.mlp_hidden_dim + self.mlp_hidden_dim + self.model_dim
    }

    fn validate(&self, name: &str) -> Result<()> {
        for (field, v) in [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("max_tokens", self.max_tokens),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name}.{field} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{name}.model_dim ({}) must be divisible by {name}.num_heads ({})",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSpec {
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity_factor_image: f64,
    pub capacity_factor_text: f64,
    /// Load-balance loss weight (α).
    pub balance_weight: f64,
    /// Router z-loss weight (β).
    pub router_z_weight: f64,
    pub normalize_gates_after_routing: bool,
    pub placement: Placement,
}

impl Default for MoeSpec {
    fn default() -> Self {
        Self {
            num_experts: 8,
            top_k: 2,
            capacity_factor_image: 2.0,
            capacity_factor_text: 2.0,
            balance_weight: 0.01,
            router_z_weight: 0.001,
            normalize_gates_after_routing: false,
            placement: Placement::AlternatingDenseSparse,
        }
    }
}

impl MoeSpec {
    pub fn capacity_factor(&self, m: Modality) -> f64 {
        match m {
            Modality::Image => self.capacity_factor_image,
            Modality::Text => self.capacity_factor_text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("moe.num_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "moe.top_k ({}) must be in 1..=num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        for (field, v) in [
            ("capacity_factor_image", self.capacity_factor_image),
            ("capacity_factor_text", self.capacity_factor_text),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("moe.{field} must be a positive number, got {v}")));
            }
        }
        for (field, v) in [("balance_weight", self.balance_weight), ("router_z_weight", self.router_z_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("moe.{field} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Layer indices (0-based) that become MoE layers under alternating
/// [dense, sparse] placement: 1, 3, 5, ...
pub fn select_moe_layers(num_layers: usize) -> Vec<usize> {
    (1..num_layers).step_by(2).collect()
}

/// Name prefix of a transformer trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trunk {
    Image,
    Text,
    Shared,
}

impl Trunk {
    pub fn prefix(self) -> &'static str {
        match self {
            Trunk::Image => "image",
            Trunk::Text => "text",
            Trunk::Shared => "shared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone_mode: BackboneMode,
    pub image_tower: TowerSpec,
    /// Ignored (apart from `max_tokens`) in shared mode.
    pub text_tower: TowerSpec,
    pub channels: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    pub moe_modality: MoeModality,
    pub temperature_init: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelSpec {
    /// Desk-scale default: 2 layers, width 64, 32×32 images in 8×8 patches.
    pub fn tiny() -> Self {
        Self {
            backbone_mode: BackboneMode::Separated,
            image_tower: TowerSpec::new(2, 64, 4, 17),
            text_tower: TowerSpec::new(2, 64, 4, 16),
            channels: 3,
            patch_size: 8,
            image_size: 32,
            vocab_size: 64,
            embed_dim: 32,
            moe: None,
            moe_modality: MoeModality::Both,
            temperature_init: 0.07,
            layer_norm_eps: 1e-5,
        }
    }

    fn clip(image: TowerSpec, text: TowerSpec, patch_size: usize, embed_dim: usize) -> Self {
        Self {
            backbone_mode: BackboneMode::Separated,
            image_tower: image,
            text_tower: text,
            channels: 3,
            patch_size,
            image_size: 224,
            vocab_size: 49408,
            embed_dim,
            moe: None,
            moe_modality: MoeModality::Both,
            temperature_init: 0.07,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn clip_b32() -> Self {
        Self::clip(TowerSpec::new(12, 768, 12, 50), TowerSpec::new(12, 512, 8, 77), 32, 512)
    }

    pub fn clip_b16() -> Self {
        Self::clip(TowerSpec::new(12, 768, 12, 197), TowerSpec::new(12, 512, 8, 77), 16, 512)
    }

    pub fn clip_l14() -> Self {
        Self::clip(TowerSpec::new(24, 1024, 16, 257), TowerSpec::new(12, 768, 12, 77), 14, 768)
    }

    pub fn with_moe(mut self, moe: MoeSpec, modality: MoeModality) -> Self {
        self.moe = Some(moe);
        self.moe_modality = modality;
        self
    }

    pub fn dense(&self) -> Self {
        Self { moe: None, ..self.clone() }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Image tokens including the class token.
    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn text_tokens(&self) -> usize {
        self.text_tower.max_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn trunk(&self, m: Modality) -> Trunk {
        match (self.backbone_mode, m) {
            (BackboneMode::Shared, _) => Trunk::Shared,
            (BackboneMode::Separated, Modality::Image) => Trunk::Image,
            (BackboneMode::Separated, Modality::Text) => Trunk::Text,
        }
    }

    /// Transformer stack used by modality `m`.
    pub fn tower(&self, m: Modality) -> &TowerSpec {
        match (self.backbone_mode, m) {
            (BackboneMode::Shared, _) | (_, Modality::Image) => &self.image_tower,
            (BackboneMode::Separated, Modality::Text) => &self.text_tower,
        }
    }

    /// Trunks to build, in a fixed order.
    pub fn trunks(&self) -> Vec<Trunk> {
        match self.backbone_mode {
            BackboneMode::Separated => vec![Trunk::Image, Trunk::Text],
            BackboneMode::Shared => vec![Trunk::Shared],
        }
    }

    pub fn trunk_tower(&self, t: Trunk) -> &TowerSpec {
        match t {
            Trunk::Image | Trunk::Shared => &self.image_tower,
            Trunk::Text => &self.text_tower,
        }
    }

    /// MoE layer indices of a trunk (empty for dense models).
    pub fn moe_layers(&self, t: Trunk) -> Vec<usize> {
        if self.moe.is_none() {
            return Vec::new();
        }
        let covered = match t {
            Trunk::Image => self.moe_modality.covers(Modality::Image),
            Trunk::Text => self.moe_modality.covers(Modality::Text),
            Trunk::Shared => true,
        };
        if covered {
            select_moe_layers(self.trunk_tower(t).num_layers)
        } else {
            Vec::new()
        }
    }

    pub fn is_moe_layer(&self, t: Trunk, layer: usize) -> bool {
        self.moe_layers(t).contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        self.image_tower.validate("model.image_tower")?;
        self.text_tower.validate("model.text_tower")?;
        for (field, v) in [
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{field} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "model.image_size ({}) must be divisible by model.patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        if self.image_tower.max_tokens < self.image_tokens() {
            return Err(Error::Config(format!(
                "model.image_tower.max_tokens ({}) is below the {} image tokens",
                self.image_tower.max_tokens,
                self.image_tokens()
            )));
        }
        if self.backbone_mode == BackboneMode::Shared {
            if self.text_tower.model_dim != self.image_tower.model_dim {
                return Err(Error::Config(format!(
                    "shared backbone needs equal widths: image {} vs text {}",
                    self.image_tower.model_dim, self.text_tower.model_dim
                )));
            }
            if self.moe.is_some() && self.moe_modality != MoeModality::Both {
                return Err(Error::Config(
                    "shared backbone MoE layers serve both modalities; moe_modality must be `both`".into(),
                ));
            }
        }
        if !(self.temperature_init >= 0.01) {
            return Err(Error::Config(format!(
                "model.temperature_init must be at least 0.01, got {}",
                self.temperature_init
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be positive".into()));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }
}
