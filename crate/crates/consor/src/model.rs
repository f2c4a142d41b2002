//! The full recognizer: side adapter, pair reasoning, and contrast head
//! over one shared parameter store.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cir::{AttnTrace, CirNet};
use crate::dataset::PersonBox;
use crate::encoder::{EncoderConfig, TextFeatures, VisualFeatures};
use crate::error::{Error, Result};
use crate::head;
use crate::msat::{FusionSchedule, MsatNet, SharingMode, VisualInput};
use crate::nn::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Everything that determines the trainable architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Adapter width; must divide by both head counts.
    pub dim: usize,
    pub heads: usize,
    pub adapter_layers: usize,
    pub sharing: SharingMode,
    /// `None` selects the full equispaced schedule.
    pub fusion: Option<FusionSchedule>,
    pub n_inter: usize,
    pub n_ctx: usize,
    pub cir_heads: usize,
    pub logit_scale: f64,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            dim: 192,
            heads: 6,
            adapter_layers: 4,
            sharing: SharingMode::Shared,
            fusion: None,
            n_inter: 1,
            n_ctx: 1,
            cir_heads: 8,
            logit_scale: 1.0,
            tau: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration matching [`EncoderConfig::miniature`].
    pub fn miniature() -> Self {
        ModelConfig {
            encoder: EncoderConfig::miniature(),
            dim: 48,
            heads: 6,
            adapter_layers: 4,
            ..ModelConfig::default()
        }
    }

    pub fn schedule(&self) -> FusionSchedule {
        self.fusion.clone().unwrap_or_else(|| {
            FusionSchedule::default_for(self.encoder.n_layers, self.adapter_layers)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.dim == 0
            || !self.dim.is_multiple_of(self.heads)
            || !self.dim.is_multiple_of(self.cir_heads)
        {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of both {} and {} heads",
                self.dim, self.heads, self.cir_heads
            )));
        }
        if self.adapter_layers == 0 {
            return Err(Error::Config("adapter needs at least one layer".into()));
        }
        if self.logit_scale <= 0.0 {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        self.schedule()
            .validate(self.encoder.n_layers, self.adapter_layers)
    }

    /// Hex digest of the canonical JSON form, stored in checkpoints and
    /// run manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Trainable parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub msat: usize,
    pub adapter_blocks: usize,
    pub cir: usize,
}

pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore<F>,
    pub msat: MsatNet,
    pub cir: CirNet,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::from_seed(seed);
        let msat = MsatNet::new(
            &mut store,
            &mut init,
            &config.encoder,
            config.dim,
            config.heads,
            config.adapter_layers,
            config.schedule(),
            config.sharing,
            config.tau,
        )?;
        let cir = CirNet::new(
            &mut store,
            &mut init,
            config.dim,
            config.encoder.joint_dim,
            config.encoder.grid,
            config.n_inter,
            config.n_ctx,
            config.cir_heads,
        )?;
        Ok(Model {
            config,
            seed,
            store,
            msat,
            cir,
        })
    }

    /// Adapter-encoded prompt embeddings, one `[1, d]` per candidate.
    pub fn prompt_embeddings(
        &self,
        tape: &mut Tape<F>,
        prompt_feats: &[Arc<TextFeatures<F>>],
    ) -> Result<Vec<Var>> {
        prompt_feats
            .iter()
            .map(|tf| Ok(self.msat.text_forward(tape, &self.store, tf)?.1))
            .collect()
    }

    /// The pair feature `U` for `(i, j)` in one image.
    pub fn pair_feature(
        &self,
        tape: &mut Tape<F>,
        vf: &VisualFeatures<F>,
        boxes: &[PersonBox],
        i: usize,
        j: usize,
        trace: Option<&mut AttnTrace<F>>,
    ) -> Result<Var> {
        let v_sn = self
            .msat
            .visual_forward(tape, &self.store, &VisualInput::from(vf))?;
        self.cir
            .pair_feature(tape, &self.store, v_sn, boxes, i, j, &vf.cls, trace)
    }

    /// Pair logits against prepared prompt embeddings.
    pub fn sample_logits(
        &self,
        tape: &mut Tape<F>,
        vf: &VisualFeatures<F>,
        boxes: &[PersonBox],
        i: usize,
        j: usize,
        prompt_vars: &[Var],
    ) -> Result<Var> {
        let pair = self.pair_feature(tape, vf, boxes, i, j, None)?;
        head::classify_logits(
            tape,
            pair,
            prompt_vars,
            F::from_f64c(self.config.logit_scale),
        )
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus {
            total: self.store.scalar_count(),
            msat: self.store.scalar_count_prefix("msat."),
            adapter_blocks: self.store.scalar_count_prefix("msat.block"),
            cir: self.store.scalar_count_prefix("cir."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{FeatureProvider, SyntheticProvider};

    fn mini_model(sharing: SharingMode) -> Model<f64> {
        let cfg = ModelConfig {
            sharing,
            dim: 24,
            ..ModelConfig::miniature()
        };
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn forward_produces_finite_logits() {
        let model = mini_model(SharingMode::Shared);
        let provider = SyntheticProvider::<f64>::new(1, model.config.encoder.clone()).unwrap();
        let vf = provider.visual("img0").unwrap();
        let boxes = [
            PersonBox::new(0.05, 0.1, 0.45, 0.9).unwrap(),
            PersonBox::new(0.55, 0.1, 0.95, 0.9).unwrap(),
        ];
        let prompts: Vec<_> = (0..3)
            .map(|c| provider.text(&format!("candidate relation {c}")).unwrap())
            .collect();

        let mut tape = Tape::new();
        let pvars = model.prompt_embeddings(&mut tape, &prompts).unwrap();
        let logits = model
            .sample_logits(&mut tape, &vf, &boxes, 0, 1, &pvars)
            .unwrap();
        let z = tape.value(logits);
        assert_eq!(z.dim(), (1, 3));
        assert!(z.iter().all(|x| x.is_finite()));
        // Cosine-ranged logits scaled by the default 1.0.
        assert!(z.iter().all(|x| x.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn identical_seeds_identical_models() {
        let a = mini_model(SharingMode::Shared);
        let b = mini_model(SharingMode::Shared);
        assert_eq!(a.store.scalar_count(), b.store.scalar_count());
        for (ida, idb) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(ida), b.store.value(idb));
        }
    }

    #[test]
    fn census_orders_sharing_modes() {
        let shared = mini_model(SharingMode::Shared).census();
        let dual = mini_model(SharingMode::Dual).census();
        let visual = mini_model(SharingMode::VisualOnly).census();
        assert_eq!(shared.adapter_blocks, visual.adapter_blocks);
        assert!(shared.adapter_blocks < dual.adapter_blocks);
        assert!(shared.total < dual.total);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ModelConfig::miniature();
        let mut b = ModelConfig::miniature();
        assert_eq!(a.hash(), b.hash());
        b.dim = 96;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::miniature();
        cfg.dim = 50; // not divisible by 6 or 8
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::miniature();
        cfg.logit_scale = 0.0;
        assert!(cfg.validate().is_err());
    }
}
