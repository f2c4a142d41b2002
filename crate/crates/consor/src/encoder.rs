//! Uniform access to frozen dual-encoder features.
//!
//! The trainable system never touches pixels or encoder weights: it
//! consumes per-layer visual patch features, a joint-projected global
//! token, per-layer text features, and joint embeddings for zero-shot
//! ranking. Three interchangeable providers exist: a seeded synthetic
//! one, a fixture-directory one, and an in-memory one for tests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurepack::{read_feature_pack, FeaturePack};
use crate::scalar::Scalar;

/// Shape contract of the frozen dual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of transformer layers in each frozen encoder.
    pub n_layers: usize,
    /// Visual token width `r^v`.
    pub vis_hidden: usize,
    /// Text token width `r^t`.
    pub txt_hidden: usize,
    /// Joint embedding width `r`.
    pub joint_dim: usize,
    /// Patch grid (rows, cols); the token count is `rows * cols`.
    pub grid: (usize, usize),
    /// Maximum text length `L^t` including the end-of-text token.
    pub max_text_len: usize,
    /// Input image side in pixels (metadata only at this level).
    pub image_size: usize,
}

impl Default for EncoderConfig {
    /// Mirrors ViT-B/16 CLIP: 12 layers, 768/512 widths, 14x14 grid,
    /// 77-token text encoder, 224-pixel inputs.
    fn default() -> Self {
        EncoderConfig {
            n_layers: 12,
            vis_hidden: 768,
            txt_hidden: 512,
            joint_dim: 512,
            grid: (14, 14),
            max_text_len: 77,
            image_size: 224,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by toy data and fast tests.
    pub fn miniature() -> Self {
        EncoderConfig {
            n_layers: 4,
            vis_hidden: 32,
            txt_hidden: 24,
            joint_dim: 16,
            grid: (4, 4),
            max_text_len: 16,
            image_size: 64,
        }
    }

    /// Visual token count `L^v`.
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.grid.0 == 0
            || self.grid.1 == 0
            || self.vis_hidden == 0
            || self.txt_hidden == 0
            || self.joint_dim == 0
            || self.max_text_len < 2
        {
            return Err(Error::Config(format!("invalid encoder config: {self:?}")));
        }
        Ok(())
    }
}

/// Frozen visual features of one image.
///
/// `per_layer[0]` is the post-embedding input (patch plus position
/// embeddings before block 1); `per_layer[l]` for `l >= 1` is the output
/// of block `l`. All are `[L^v, r^v]`, with token row `r * gw + c`
/// holding the patch at grid row `r`, column `c` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures<F: Scalar> {
    pub per_layer: Vec<Array2<F>>,
    /// Joint-projected global token, `[r]`.
    pub cls: Array1<F>,
}

/// Frozen text features of one tokenized string, `[L^t, r^t]` per layer.
/// Rows past `token_count` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures<F: Scalar> {
    pub per_layer: Vec<Array2<F>>,
    /// Joint-projected end-of-text token, `[r]`.
    pub eot: Array1<F>,
    pub token_count: usize,
    /// Set when the text exceeded `max_text_len` and was truncated,
    /// keeping the end-of-text token at the final position.
    pub truncated: bool,
}

impl<F: Scalar> TextFeatures<F> {
    /// Row of the end-of-text token in every per-layer tensor.
    pub fn eot_index(&self) -> usize {
        self.token_count - 1
    }
}

/// Read-only access to frozen encoder outputs. Outputs never change
/// across calls for the same subject.
pub trait FeatureProvider<F: Scalar>: Send + Sync {
    fn config(&self) -> &EncoderConfig;
    fn visual(&self, image_id: &str) -> Result<Arc<VisualFeatures<F>>>;
    fn text(&self, text: &str) -> Result<Arc<TextFeatures<F>>>;
    /// Unit-norm joint embedding of an image.
    fn joint_image(&self, image_id: &str) -> Result<Array1<F>>;
    /// Unit-norm joint embedding of a text.
    fn joint_text(&self, text: &str) -> Result<Array1<F>>;
}

/// Whitespace token count plus an end-of-text token, capped at `max_len`.
pub fn token_count_for(text: &str, max_len: usize) -> (usize, bool) {
    let words = text.split_whitespace().count();
    let raw = words + 1;
    if raw > max_len {
        (max_len, true)
    } else {
        (raw, false)
    }
}

pub fn normalize<F: Scalar>(v: &Array1<F>) -> Result<Array1<F>> {
    let norm2: F = v.iter().map(|&x| x * x).sum();
    if norm2 == F::zero() {
        return Err(Error::Numeric("cannot normalize a zero vector".into()));
    }
    let inv = F::one() / norm2.sqrt();
    Ok(v.mapv(|x| x * inv))
}

fn validate_visual<F: Scalar>(vf: &VisualFeatures<F>, cfg: &EncoderConfig, id: &str) -> Result<()> {
    if vf.per_layer.len() != cfg.n_layers + 1 {
        return Err(Error::Shape(format!(
            "visual features of `{id}`: {} layers, expected {}",
            vf.per_layer.len(),
            cfg.n_layers + 1
        )));
    }
    for (l, layer) in vf.per_layer.iter().enumerate() {
        if layer.dim() != (cfg.n_patches(), cfg.vis_hidden) {
            return Err(Error::Shape(format!(
                "visual features of `{id}` layer {l}: {:?}, expected ({}, {})",
                layer.dim(),
                cfg.n_patches(),
                cfg.vis_hidden
            )));
        }
    }
    if vf.cls.len() != cfg.joint_dim {
        return Err(Error::Shape(format!(
            "global token of `{id}`: {} dims, expected {}",
            vf.cls.len(),
            cfg.joint_dim
        )));
    }
    Ok(())
}

fn validate_text<F: Scalar>(tf: &TextFeatures<F>, cfg: &EncoderConfig, what: &str) -> Result<()> {
    if tf.per_layer.len() != cfg.n_layers + 1 {
        return Err(Error::Shape(format!(
            "text features of {what}: {} layers, expected {}",
            tf.per_layer.len(),
            cfg.n_layers + 1
        )));
    }
    for (l, layer) in tf.per_layer.iter().enumerate() {
        if layer.dim() != (cfg.max_text_len, cfg.txt_hidden) {
            return Err(Error::Shape(format!(
                "text features of {what} layer {l}: {:?}, expected ({}, {})",
                layer.dim(),
                cfg.max_text_len,
                cfg.txt_hidden
            )));
        }
    }
    if tf.token_count == 0 || tf.token_count > cfg.max_text_len {
        return Err(Error::Shape(format!(
            "text features of {what}: token_count {} outside 1..={}",
            tf.token_count, cfg.max_text_len
        )));
    }
    Ok(())
}

/// Hex SHA-256 of a text, used as its fixture file stem.
pub fn text_fixture_stem(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// --- synthetic provider -------------------------------------------------------

/// Deterministic pseudo-encoder: features are seeded Gaussian draws keyed
/// by `(seed, subject, stream)`. Useful for shape tests and as the data
/// source behind `build-fixtures`.
pub struct SyntheticProvider<F: Scalar> {
    seed: u64,
    config: EncoderConfig,
    cache: FeatureCache<F>,
}

struct FeatureCache<F: Scalar> {
    visual: Mutex<HashMap<String, Arc<VisualFeatures<F>>>>,
    text: Mutex<HashMap<String, Arc<TextFeatures<F>>>>,
}

impl<F: Scalar> Default for FeatureCache<F> {
    fn default() -> Self {
        FeatureCache {
            visual: Mutex::new(HashMap::new()),
            text: Mutex::new(HashMap::new()),
        }
    }
}

/// Seeded Gaussian stream derived from a SHA-256 of `(seed, parts...)`.
pub(crate) fn derived_init(seed: u64, parts: &[&str]) -> crate::nn::Init {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in parts {
        hasher.update([0u8]);
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut s = [0u8; 8];
    s.copy_from_slice(&digest[..8]);
    crate::nn::Init::from_seed(u64::from_le_bytes(s))
}

impl<F: Scalar> SyntheticProvider<F> {
    pub fn new(seed: u64, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(SyntheticProvider {
            seed,
            config,
            cache: FeatureCache::default(),
        })
    }

    fn gen_visual(&self, image_id: &str) -> VisualFeatures<F> {
        let cfg = &self.config;
        let per_layer = (0..=cfg.n_layers)
            .map(|l| {
                derived_init(self.seed, &["vis", image_id, &l.to_string()]).normal_matrix(
                    cfg.n_patches(),
                    cfg.vis_hidden,
                    1.0,
                )
            })
            .collect();
        let cls = derived_init(self.seed, &["cls", image_id])
            .normal_matrix::<F>(1, cfg.joint_dim, 1.0)
            .row(0)
            .to_owned();
        VisualFeatures { per_layer, cls }
    }

    fn gen_text(&self, text: &str) -> TextFeatures<F> {
        let cfg = &self.config;
        let (token_count, truncated) = token_count_for(text, cfg.max_text_len);
        let per_layer = (0..=cfg.n_layers)
            .map(|l| {
                let mut m: Array2<F> = derived_init(self.seed, &["txt", text, &l.to_string()])
                    .normal_matrix(cfg.max_text_len, cfg.txt_hidden, 1.0);
                for r in token_count..cfg.max_text_len {
                    m.row_mut(r).fill(F::zero());
                }
                m
            })
            .collect();
        let eot = derived_init(self.seed, &["txt-eot", text])
            .normal_matrix::<F>(1, cfg.joint_dim, 1.0)
            .row(0)
            .to_owned();
        TextFeatures {
            per_layer,
            eot,
            token_count,
            truncated,
        }
    }
}

impl<F: Scalar> FeatureProvider<F> for SyntheticProvider<F> {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn visual(&self, image_id: &str) -> Result<Arc<VisualFeatures<F>>> {
        let mut cache = self.cache.visual.lock().unwrap();
        if let Some(vf) = cache.get(image_id) {
            return Ok(vf.clone());
        }
        let vf = Arc::new(self.gen_visual(image_id));
        cache.insert(image_id.to_string(), vf.clone());
        Ok(vf)
    }

    fn text(&self, text: &str) -> Result<Arc<TextFeatures<F>>> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot encode an empty text".into()));
        }
        let mut cache = self.cache.text.lock().unwrap();
        if let Some(tf) = cache.get(text) {
            return Ok(tf.clone());
        }
        let tf = Arc::new(self.gen_text(text));
        cache.insert(text.to_string(), tf.clone());
        Ok(tf)
    }

    fn joint_image(&self, image_id: &str) -> Result<Array1<F>> {
        let v = derived_init(self.seed, &["joint-img", image_id])
            .normal_matrix::<F>(1, self.config.joint_dim, 1.0)
            .row(0)
            .to_owned();
        normalize(&v)
    }

    fn joint_text(&self, text: &str) -> Result<Array1<F>> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot encode an empty text".into()));
        }
        let v = derived_init(self.seed, &["joint-txt", text])
            .normal_matrix::<F>(1, self.config.joint_dim, 1.0)
            .row(0)
            .to_owned();
        normalize(&v)
    }
}

// --- fixture provider ---------------------------------------------------------

/// Reads features from a fixture directory:
/// `<root>/<image_id>.fpk` and `<root>/text/<sha256(text)>.fpk`.
pub struct FixtureProvider<F: Scalar> {
    root: PathBuf,
    config: EncoderConfig,
    cache: FeatureCache<F>,
}

impl<F: Scalar> FixtureProvider<F> {
    pub fn new(root: impl Into<PathBuf>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(FixtureProvider {
            root: root.into(),
            config,
            cache: FeatureCache::default(),
        })
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.fpk"))
    }

    pub fn text_path(&self, text: &str) -> PathBuf {
        self.root
            .join("text")
            .join(format!("{}.fpk", text_fixture_stem(text)))
    }

    fn load(&self, path: &Path, id: &str) -> Result<FeaturePack> {
        if !path.exists() {
            return Err(Error::MissingFixture {
                ids: vec![id.to_string()],
            });
        }
        read_feature_pack(path)
    }

    /// Verifies that fixtures exist for every id, reporting all misses.
    pub fn check_images(&self, ids: &[&str]) -> Result<()> {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !self.image_path(id).exists())
            .map(|id| id.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFixture { ids: missing })
        }
    }

    fn visual_from_pack(&self, pack: &FeaturePack, id: &str) -> Result<VisualFeatures<F>> {
        let cfg = &self.config;
        let per_layer = (0..=cfg.n_layers)
            .map(|l| pack.entry(&format!("vis.L{l}"))?.to_array2::<F>())
            .collect::<Result<Vec<_>>>()?;
        let cls = pack.entry("vis.cls")?.to_array1::<F>()?;
        let vf = VisualFeatures { per_layer, cls };
        validate_visual(&vf, cfg, id)?;
        Ok(vf)
    }

    fn text_from_pack(&self, pack: &FeaturePack, what: &str) -> Result<TextFeatures<F>> {
        let cfg = &self.config;
        let per_layer = (0..=cfg.n_layers)
            .map(|l| pack.entry(&format!("txt.L{l}"))?.to_array2::<F>())
            .collect::<Result<Vec<_>>>()?;
        let eot = pack.entry("txt.eot")?.to_array1::<F>()?;
        let token_count = pack
            .meta
            .get("token_count")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt(format!("{what}: missing token_count meta")))?
            as usize;
        let truncated = pack
            .meta
            .get("truncated")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let tf = TextFeatures {
            per_layer,
            eot,
            token_count,
            truncated,
        };
        validate_text(&tf, cfg, what)?;
        Ok(tf)
    }
}

impl<F: Scalar> FeatureProvider<F> for FixtureProvider<F> {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn visual(&self, image_id: &str) -> Result<Arc<VisualFeatures<F>>> {
        let mut cache = self.cache.visual.lock().unwrap();
        if let Some(vf) = cache.get(image_id) {
            return Ok(vf.clone());
        }
        let pack = self.load(&self.image_path(image_id), image_id)?;
        let vf = Arc::new(self.visual_from_pack(&pack, image_id)?);
        cache.insert(image_id.to_string(), vf.clone());
        Ok(vf)
    }

    fn text(&self, text: &str) -> Result<Arc<TextFeatures<F>>> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot encode an empty text".into()));
        }
        let mut cache = self.cache.text.lock().unwrap();
        if let Some(tf) = cache.get(text) {
            return Ok(tf.clone());
        }
        let pack = self.load(&self.text_path(text), text)?;
        let tf = Arc::new(self.text_from_pack(&pack, text)?);
        cache.insert(text.to_string(), tf.clone());
        Ok(tf)
    }

    fn joint_image(&self, image_id: &str) -> Result<Array1<F>> {
        let pack = self.load(&self.image_path(image_id), image_id)?;
        normalize(&pack.entry("joint")?.to_array1::<F>()?)
    }

    fn joint_text(&self, text: &str) -> Result<Array1<F>> {
        if text.is_empty() {
            return Err(Error::Precondition("cannot encode an empty text".into()));
        }
        let pack = self.load(&self.text_path(text), text)?;
        normalize(&pack.entry("joint")?.to_array1::<F>()?)
    }
}

/// Serializes visual features plus a joint embedding into a pack.
pub fn pack_from_visual<F: Scalar>(
    image_id: &str,
    vf: &VisualFeatures<F>,
    joint: &Array1<F>,
) -> Result<FeaturePack> {
    let mut pack = FeaturePack::new(image_id);
    for (l, layer) in vf.per_layer.iter().enumerate() {
        pack.insert_f32(
            &format!("vis.L{l}"),
            vec![layer.nrows(), layer.ncols()],
            layer.iter().map(|x| x.to_f64c() as f32).collect(),
        )?;
    }
    pack.insert_f32(
        "vis.cls",
        vec![vf.cls.len()],
        vf.cls.iter().map(|x| x.to_f64c() as f32).collect(),
    )?;
    pack.insert_f32(
        "joint",
        vec![joint.len()],
        joint.iter().map(|x| x.to_f64c() as f32).collect(),
    )?;
    Ok(pack)
}

/// Serializes text features plus a joint embedding into a pack.
pub fn pack_from_text<F: Scalar>(
    text: &str,
    tf: &TextFeatures<F>,
    joint: &Array1<F>,
) -> Result<FeaturePack> {
    let mut pack = FeaturePack::new(text_fixture_stem(text));
    for (l, layer) in tf.per_layer.iter().enumerate() {
        pack.insert_f32(
            &format!("txt.L{l}"),
            vec![layer.nrows(), layer.ncols()],
            layer.iter().map(|x| x.to_f64c() as f32).collect(),
        )?;
    }
    pack.insert_f32(
        "txt.eot",
        vec![tf.eot.len()],
        tf.eot.iter().map(|x| x.to_f64c() as f32).collect(),
    )?;
    pack.insert_f32(
        "joint",
        vec![joint.len()],
        joint.iter().map(|x| x.to_f64c() as f32).collect(),
    )?;
    pack.meta
        .insert("token_count".into(), serde_json::json!(tf.token_count));
    pack.meta
        .insert("truncated".into(), serde_json::json!(tf.truncated));
    pack.meta.insert("text".into(), serde_json::json!(text));
    Ok(pack)
}

// --- in-memory provider ---------------------------------------------------------

/// Provider over explicitly planted features; the workhorse of tests and
/// the backing store produced by toy-data generation.
///
/// Joint vectors are stored raw and normalized on read, mirroring the
/// fixture provider, so a bundle written to disk and read back serves
/// bitwise-identical values.
pub struct MemoryProvider<F: Scalar> {
    config: EncoderConfig,
    visuals: HashMap<String, Arc<VisualFeatures<F>>>,
    texts: HashMap<String, Arc<TextFeatures<F>>>,
    joint_images: HashMap<String, Array1<F>>,
    joint_texts: HashMap<String, Array1<F>>,
}

impl<F: Scalar> MemoryProvider<F> {
    pub fn new(config: EncoderConfig) -> Self {
        MemoryProvider {
            config,
            visuals: HashMap::new(),
            texts: HashMap::new(),
            joint_images: HashMap::new(),
            joint_texts: HashMap::new(),
        }
    }

    pub fn insert_visual(&mut self, image_id: &str, vf: VisualFeatures<F>) -> Result<()> {
        validate_visual(&vf, &self.config, image_id)?;
        self.visuals.insert(image_id.to_string(), Arc::new(vf));
        Ok(())
    }

    pub fn insert_text(&mut self, text: &str, tf: TextFeatures<F>) -> Result<()> {
        validate_text(&tf, &self.config, text)?;
        self.texts.insert(text.to_string(), Arc::new(tf));
        Ok(())
    }

    /// Plants a raw joint vector; reads return it normalized.
    pub fn insert_joint_image(&mut self, image_id: &str, v: Array1<F>) -> Result<()> {
        normalize(&v)?; // reject zero vectors up front
        self.joint_images.insert(image_id.to_string(), v);
        Ok(())
    }

    pub fn insert_joint_text(&mut self, text: &str, v: Array1<F>) -> Result<()> {
        normalize(&v)?;
        self.joint_texts.insert(text.to_string(), v);
        Ok(())
    }

    pub fn visual_ids(&self) -> impl Iterator<Item = &str> {
        self.visuals.keys().map(|s| s.as_str())
    }

    pub fn text_keys(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(|s| s.as_str())
    }

    pub fn joint_text_keys(&self) -> impl Iterator<Item = &str> {
        self.joint_texts.keys().map(|s| s.as_str())
    }

    /// Raw (unnormalized) planted joint vectors, used when persisting
    /// fixtures so the disk payload matches the planted values exactly.
    pub fn raw_joint_image(&self, image_id: &str) -> Option<&Array1<F>> {
        self.joint_images.get(image_id)
    }

    pub fn raw_joint_text(&self, text: &str) -> Option<&Array1<F>> {
        self.joint_texts.get(text)
    }
}

impl<F: Scalar> FeatureProvider<F> for MemoryProvider<F> {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn visual(&self, image_id: &str) -> Result<Arc<VisualFeatures<F>>> {
        self.visuals
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::MissingFixture {
                ids: vec![image_id.to_string()],
            })
    }

    fn text(&self, text: &str) -> Result<Arc<TextFeatures<F>>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::MissingFixture {
                ids: vec![format!("text:{text}")],
            })
    }

    fn joint_image(&self, image_id: &str) -> Result<Array1<F>> {
        let raw = self
            .joint_images
            .get(image_id)
            .ok_or_else(|| Error::MissingFixture {
                ids: vec![image_id.to_string()],
            })?;
        normalize(raw)
    }

    fn joint_text(&self, text: &str) -> Result<Array1<F>> {
        let raw = self
            .joint_texts
            .get(text)
            .ok_or_else(|| Error::MissingFixture {
                ids: vec![format!("text:{text}")],
            })?;
        normalize(raw)
    }
}
