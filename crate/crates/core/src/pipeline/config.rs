//! Run configuration: one TOML document layered over profile defaults,
//! with a stable SHA-256 hash and per-stage hashes chained through the
//! artifacts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneParams;
use crate::error::{validate, Error, Result};
use crate::features::{FeatureConfig, WindowKind};
use crate::models::{hex, AutoencoderConfig, BackboneConfig, Profile, ReferenceConfig};
use crate::training::{FinetuneConfig, HeadConfig, LossMode, StageConfig};

pub const SEED_ENV: &str = "RLLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Observation vector length `N`.
    pub n: usize,
    pub m_target: usize,
    pub m_clutter: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Number of synthesized (target, clutter) cell pairs.
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub n_pulses: usize,
    pub prf_hz: f64,
    pub clutter_shape_nu: f64,
    pub clutter_power: f64,
    pub target_amplitude: f64,
    pub target_doppler_hz: f64,
    pub doppler_jitter_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scr_db: Option<f64>,
    pub texture_coherence: usize,
    pub doppler_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub window: WindowKind,
    pub window_len: usize,
    pub hop: usize,
    /// Patch length `L`.
    pub patch_len: usize,
    /// Z-score each channel with statistics of the training split.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub head_hidden: usize,
    pub causal: bool,
    pub trainable_positions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub loss_mode: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub ladder: Vec<usize>,
    pub fc_hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub learn_sigma: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Autoencoder classifier probability after head retraining.
    Head,
    /// Token-averaged backbone probability.
    Backbone,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Scorer::Head),
            "backbone" => Ok(Scorer::Backbone),
            _ => Err(Error::Validation(format!("unknown scorer `{s}` (expected head or backbone)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub pfa: f64,
    pub scorer: Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataSection,
    pub scene: SceneSection,
    pub features: FeatureSection,
    pub reference: ReferenceSection,
    pub backbone: BackboneSection,
    pub finetune: FinetuneSection,
    pub head: HeadSection,
    pub detect: DetectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let scene = SceneParams::default();
        let feat = FeatureConfig::default();
        let refm = ReferenceConfig::default();
        let bb = BackboneConfig::profile(profile, 55, 48);
        let ae = AutoencoderConfig::profile(profile, 55);
        let ft = FinetuneConfig::default();
        let hd = HeadConfig::default();
        let desk = profile == Profile::Desk;
        Self {
            profile,
            seed: 0,
            data: DataSection {
                n: 512,
                m_target: 32,
                m_clutter: 128,
                train_frac: 0.2,
                val_frac: 0.15,
                scenes: 1,
            },
            scene: SceneSection {
                n_pulses: if desk { 16_384 } else { scene.n_pulses },
                prf_hz: scene.prf_hz,
                clutter_shape_nu: scene.clutter_shape_nu,
                clutter_power: scene.clutter_power,
                target_amplitude: scene.target_amplitude,
                target_doppler_hz: scene.target_doppler_hz,
                doppler_jitter_hz: scene.doppler_jitter_hz,
                scr_db: scene.scr_db,
                texture_coherence: scene.texture_coherence,
                doppler_block: scene.doppler_block,
            },
            features: FeatureSection {
                window: feat.window,
                window_len: feat.window_len,
                hop: feat.hop,
                patch_len: 48,
                normalize: true,
            },
            reference: ReferenceSection {
                d_model: refm.d_model,
                heads: refm.heads,
                layers: refm.layers,
                ffn_hidden: refm.ffn_hidden,
                head_hidden: refm.head_hidden,
                epochs: 100,
                batch_size: 16,
                lr: 1e-4,
            },
            backbone: BackboneSection {
                width: bb.width,
                layers: bb.layers,
                heads: bb.heads,
                ffn_hidden: bb.ffn_hidden,
                lora_rank: bb.lora_rank,
                lora_scale: bb.lora_scale,
                head_hidden: bb.head_hidden,
                causal: bb.causal,
                trainable_positions: bb.trainable_positions,
            },
            finetune: FinetuneSection {
                epochs: if desk { ft.stage.epochs } else { 500 },
                batch_size: ft.stage.batch_size,
                lr: ft.stage.lr,
                beta1: ft.stage.beta1,
                beta2: ft.stage.beta2,
                alpha: ft.alpha,
                loss_mode: ft.loss_mode,
                early_stop_patience: ft.early_stop_patience,
            },
            head: HeadSection {
                ladder: ae.ladder,
                fc_hidden: ae.fc_hidden,
                latent: ae.latent,
                epochs: if desk { hd.stage.epochs } else { 300 },
                batch_size: hd.stage.batch_size,
                lr: hd.stage.lr,
                learn_sigma: hd.learn_sigma,
            },
            detect: DetectSection {
                pfa: 0.005,
                scorer: Scorer::Head,
            },
        }
    }

    /// Parses a TOML document over the defaults of its `profile` (desk when
    /// absent). Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(text, None, &[])
    }

    /// Layers, in increasing precedence: profile defaults, the TOML text,
    /// a seed from the environment, then `key.path=value` overrides.
    pub fn resolve(text: &str, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            doc.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, parse_scalar(value))?;
        }
        let profile = match doc.get("profile") {
            None => Profile::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, doc);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        validate(d.n >= 1 && d.m_target >= 1 && d.m_clutter >= 1, || {
            "data.n, data.m_target and data.m_clutter must be >= 1".into()
        })?;
        validate(
            d.train_frac > 0.0 && d.val_frac > 0.0 && d.train_frac + d.val_frac < 1.0,
            || "data fractions must satisfy 0 < train_frac, val_frac and train_frac + val_frac < 1".into(),
        )?;
        validate(d.scenes >= 1, || "data.scenes must be >= 1".into())?;
        validate(self.scene.n_pulses >= d.n, || {
            format!("scene.n_pulses = {} is shorter than data.n = {}", self.scene.n_pulses, d.n)
        })?;
        self.scene_params(0).validate()?;
        let f = &self.features;
        validate(f.patch_len >= 1, || "features.patch_len must be >= 1".into())?;
        validate(f.window_len >= 1 && f.window_len <= d.n && f.hop >= 1, || {
            format!("STFT window {} / hop {} do not fit N = {}", f.window_len, f.hop, d.n)
        })?;
        validate((0.0..=1.0).contains(&self.finetune.alpha), || {
            format!("finetune.alpha = {} must lie in [0, 1]", self.finetune.alpha)
        })?;
        validate(self.detect.pfa > 0.0 && self.detect.pfa <= 1.0, || {
            format!("detect.pfa = {} must lie in (0, 1]", self.detect.pfa)
        })?;
        validate(self.head.latent >= 1 && !self.head.ladder.is_empty(), || {
            "head.ladder must be nonempty and head.latent >= 1".into()
        })?;
        for s in [self.reference_stage(), self.finetune_config().stage, self.head_config().stage] {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Token count `K = 5 * ceil(N / L)`.
    pub fn tokens(&self) -> usize {
        5 * self.data.n.div_ceil(self.features.patch_len)
    }

    pub fn scene_params(&self, index: usize) -> SceneParams {
        let s = &self.scene;
        SceneParams {
            n_pulses: s.n_pulses,
            prf_hz: s.prf_hz,
            clutter_shape_nu: s.clutter_shape_nu,
            clutter_power: s.clutter_power,
            target_amplitude: s.target_amplitude,
            target_doppler_hz: s.target_doppler_hz,
            doppler_jitter_hz: s.doppler_jitter_hz,
            scr_db: s.scr_db,
            seed: self.seed.wrapping_add((index as u64) << 32),
            texture_coherence: s.texture_coherence,
            doppler_block: s.doppler_block,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            window: self.features.window,
            window_len: self.features.window_len,
            hop: self.features.hop,
        }
    }

    pub fn reference_model(&self) -> ReferenceConfig {
        let r = &self.reference;
        ReferenceConfig {
            tokens: self.tokens(),
            patch_len: self.features.patch_len,
            d_model: r.d_model,
            heads: r.heads,
            layers: r.layers,
            ffn_hidden: r.ffn_hidden,
            head_hidden: r.head_hidden,
            seed: self.seed,
            ..ReferenceConfig::default()
        }
    }

    pub fn reference_stage(&self) -> StageConfig {
        StageConfig::new(self.reference.epochs, self.reference.batch_size, self.reference.lr, self.seed)
    }

    pub fn backbone_model(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            width: b.width,
            layers: b.layers,
            heads: b.heads,
            ffn_hidden: b.ffn_hidden,
            lora_rank: b.lora_rank,
            lora_scale: b.lora_scale,
            head_hidden: b.head_hidden,
            causal: b.causal,
            trainable_positions: b.trainable_positions,
            seed: self.seed,
            ..BackboneConfig::profile(self.profile, self.tokens(), self.features.patch_len)
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            stage: StageConfig {
                beta1: f.beta1,
                beta2: f.beta2,
                ..StageConfig::new(f.epochs, f.batch_size, f.lr, self.seed)
            },
            alpha: f.alpha,
            loss_mode: f.loss_mode,
            eval_pfa: self.detect.pfa,
            early_stop_patience: f.early_stop_patience,
        }
    }

    pub fn head_model(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            tokens: self.tokens(),
            width: self.backbone.width,
            ladder: self.head.ladder.clone(),
            fc_hidden: self.head.fc_hidden,
            latent: self.head.latent,
            seed: self.seed,
            ..AutoencoderConfig::profile(self.profile, self.tokens())
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            stage: StageConfig::new(self.head.epochs, self.head.batch_size, self.head.lr, self.seed),
            learn_sigma: self.head.learn_sigma,
        }
    }

    /// Hash of the synthetic dataset stage.
    pub fn synth_hash(&self) -> String {
        stage_hash("", "synth", &(self.seed, &self.data, &self.scene))
    }

    /// Hash of a dataset ingested from a file with content hash `source`.
    pub fn ingest_hash(&self, source: &str) -> String {
        stage_hash("", "ingest", &(source, &self.data, self.scene.prf_hz))
    }

    pub fn features_hash(&self, data_hash: &str) -> String {
        stage_hash(data_hash, "features", &self.features)
    }

    pub fn reference_hash(&self, features_hash: &str) -> String {
        stage_hash(features_hash, "reference", &(self.seed, &self.reference))
    }

    pub fn finetune_hash(&self, reference_hash: &str) -> String {
        stage_hash(reference_hash, "finetune", &(self.seed, &self.backbone, &self.finetune))
    }

    pub fn head_hash(&self, finetune_hash: &str) -> String {
        stage_hash(finetune_hash, "head", &(self.seed, &self.head))
    }

    pub fn eval_hash(&self, model_hash: &str) -> String {
        stage_hash(model_hash, "eval", &self.detect)
    }
}

/// Expected hash of every stage for a chain rooted at a dataset hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub data: String,
    pub features: String,
    pub reference: String,
    pub finetune: String,
    pub head: String,
}

impl StageHashes {
    /// Hash of the evaluation stage for the chosen scorer.
    pub fn eval(&self, cfg: &RunConfig, scorer: Scorer) -> String {
        match scorer {
            Scorer::Head => cfg.eval_hash(&self.head),
            Scorer::Backbone => cfg.eval_hash(&self.finetune),
        }
    }
}

impl RunConfig {
    pub fn chain(&self, data_hash: &str) -> StageHashes {
        let features = self.features_hash(data_hash);
        let reference = self.reference_hash(&features);
        let finetune = self.finetune_hash(&reference);
        let head = self.head_hash(&finetune);
        StageHashes {
            data: data_hash.to_string(),
            features,
            reference,
            finetune,
            head,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of one pipeline stage: its parent's hash, its name and the JSON of
/// the settings it depends on.
pub fn stage_hash<S: Serialize>(parent: &str, name: &str, settings: &S) -> String {
    let mut h = Sha256::new();
    h.update(parent.as_bytes());
    h.update([0]);
    h.update(name.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    hex(&h.finalize())
}

fn parse_scalar(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
