//! Multi-modal side adapter: a small transformer running beside the
//! frozen encoders, absorbing their intermediate features through
//! sigmoid-gated convex blends.
//!
//! Fusion points live on the adapter's hidden-state indices `0..=L`
//! (state `L` is the output of the last block). At a scheduled point the
//! state is blended with a projected frozen feature before the next
//! block: `state = mu * state + (1 - mu) * proj(frozen)`, with
//! `mu = sigmoid(alpha / tau)` and a trainable `alpha` per point.
//!
//! The visual input state at a scheduled point 0 is the learnable
//! positional tokens alone, and the patch embedding doubles as that
//! point's projection. This keeps frozen features strictly behind their
//! gates: saturating every gate at `mu = 1` makes the output independent
//! of all frozen layers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, TextFeatures, VisualFeatures};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tape::{sigmoid, Tape, Var};

/// Which branches run through the adapter (the remaining branch reads
/// the frozen encoder's final layer through a trained linear bypass).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// One block stack shared by both branches.
    Shared,
    /// Two disjoint block stacks.
    Dual,
    /// Adapter on the visual branch only.
    VisualOnly,
    /// Adapter on the text branch only.
    TextOnly,
    /// No adapter blocks at all.
    None,
}

impl std::str::FromStr for SharingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(SharingMode::Shared),
            "dual" => Ok(SharingMode::Dual),
            "visual" | "visual-only" => Ok(SharingMode::VisualOnly),
            "text" | "text-only" => Ok(SharingMode::TextOnly),
            "none" => Ok(SharingMode::None),
            other => Err(Error::Config(format!(
                "unknown sharing mode `{other}` (shared, dual, visual, text, none)"
            ))),
        }
    }
}

impl SharingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Shared => "shared",
            SharingMode::Dual => "dual",
            SharingMode::VisualOnly => "visual-only",
            SharingMode::TextOnly => "text-only",
            SharingMode::None => "none",
        }
    }

    fn visual_adapter(self) -> bool {
        matches!(
            self,
            SharingMode::Shared | SharingMode::Dual | SharingMode::VisualOnly
        )
    }

    fn text_adapter(self) -> bool {
        matches!(
            self,
            SharingMode::Shared | SharingMode::Dual | SharingMode::TextOnly
        )
    }
}

/// Gate opening `mu = sigmoid(alpha / tau)`.
pub fn gate_value<F: Scalar>(alpha: F, tau: F) -> Result<F> {
    if tau <= F::zero() {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(sigmoid(alpha / tau))
}

/// Gated blend `mu * side + (1 - mu) * clip_projected`, elementwise.
pub fn fuse<F: Scalar>(side: &Array2<F>, clip_projected: &Array2<F>, mu: F) -> Result<Array2<F>> {
    if side.dim() != clip_projected.dim() {
        return Err(Error::Shape(format!(
            "fuse: {:?} vs {:?}",
            side.dim(),
            clip_projected.dim()
        )));
    }
    Ok(side.mapv(|x| x * mu) + &clip_projected.mapv(|x| x * (F::one() - mu)))
}

/// Mapping from frozen-encoder layers to adapter fusion points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSchedule {
    /// `(clip_layer, adapter_point)` pairs, adapter points strictly increasing.
    pub visual_pairs: Vec<(usize, usize)>,
    pub text_pairs: Vec<(usize, usize)>,
}

impl FusionSchedule {
    /// The full schedule: every equispaced frozen layer feeds one adapter
    /// point; the text branch skips the embedding layer.
    pub fn default_for(clip_layers: usize, adapter_layers: usize) -> Self {
        let point = |j: usize| {
            let i = (j as f64 * clip_layers as f64 / adapter_layers as f64).round() as usize;
            (i, j)
        };
        let visual_pairs: Vec<_> = (0..=adapter_layers).map(point).collect();
        let text_pairs: Vec<_> = (1..=adapter_layers).map(point).collect();
        FusionSchedule {
            visual_pairs,
            text_pairs,
        }
    }

    /// No fusion at all (the pure side network configuration).
    pub fn empty() -> Self {
        FusionSchedule {
            visual_pairs: Vec::new(),
            text_pairs: Vec::new(),
        }
    }

    /// Builds a schedule from an explicit list of frozen layers; each maps
    /// to the proportionally-placed adapter point. The text branch drops
    /// layer 0, which has no pre-block state of its own.
    pub fn from_clip_layers(
        layers: &[usize],
        clip_layers: usize,
        adapter_layers: usize,
    ) -> Result<Self> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let to_pair = |i: usize| {
            let j = (i as f64 * adapter_layers as f64 / clip_layers as f64).round() as usize;
            (i, j)
        };
        let visual_pairs: Vec<_> = sorted.iter().map(|&i| to_pair(i)).collect();
        let text_pairs: Vec<_> = sorted
            .iter()
            .filter(|&&i| i > 0)
            .map(|&i| to_pair(i))
            .collect();
        let schedule = FusionSchedule {
            visual_pairs,
            text_pairs,
        };
        schedule.validate(clip_layers, adapter_layers)?;
        Ok(schedule)
    }

    pub fn validate(&self, clip_layers: usize, adapter_layers: usize) -> Result<()> {
        for (name, pairs) in [("visual", &self.visual_pairs), ("text", &self.text_pairs)] {
            let mut last: Option<usize> = None;
            for &(i, j) in pairs {
                if i > clip_layers {
                    return Err(Error::Config(format!(
                        "{name} fusion: frozen layer {i} exceeds encoder depth {clip_layers}"
                    )));
                }
                if j > adapter_layers {
                    return Err(Error::Config(format!(
                        "{name} fusion: adapter point {j} exceeds adapter depth {adapter_layers}"
                    )));
                }
                if let Some(prev) = last {
                    if j <= prev {
                        return Err(Error::Config(format!(
                            "{name} fusion: adapter points must be strictly increasing \
                             ({prev} then {j})"
                        )));
                    }
                }
                last = Some(j);
            }
        }
        Ok(())
    }
}

/// Visual inputs to the adapter. The embedding source and the fusion
/// features are separable: the default pipeline uses the same frozen
/// features for both, while probes may perturb one path in isolation.
pub struct VisualInput<'a, F: Scalar> {
    /// Embedded by the adapter's own patch embedding (frozen layer 0).
    pub embed_source: &'a Array2<F>,
    /// Per-layer frozen features, indexed by frozen layer.
    pub fusion_layers: &'a [Array2<F>],
}

impl<'a, F: Scalar> From<&'a VisualFeatures<F>> for VisualInput<'a, F> {
    fn from(vf: &'a VisualFeatures<F>) -> Self {
        VisualInput {
            embed_source: &vf.per_layer[0],
            fusion_layers: &vf.per_layer,
        }
    }
}

struct VisualBranch {
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    /// Aligned with `schedule.visual_pairs`; `None` reuses `patch_embed`
    /// (the adapter-point-0 projection).
    projs: Vec<Option<Linear>>,
    alphas: Vec<ParamId>,
}

struct TextBranch {
    down: Linear,
    blocks: Vec<TransformerBlock>,
    projs: Vec<Linear>,
    alphas: Vec<ParamId>,
    out_proj: Linear,
}

/// The side adapter network with its gates and projections.
pub struct MsatNet {
    pub mode: SharingMode,
    pub schedule: FusionSchedule,
    pub dim: usize,
    pub heads: usize,
    pub n_adapter_layers: usize,
    pub tau: f64,
    encoder: EncoderConfig,
    visual: Option<VisualBranch>,
    bypass_v: Option<Linear>,
    text: Option<TextBranch>,
    bypass_t: Option<Linear>,
}

impl MsatNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        encoder: &EncoderConfig,
        dim: usize,
        heads: usize,
        n_adapter_layers: usize,
        schedule: FusionSchedule,
        mode: SharingMode,
        tau: f64,
    ) -> Result<Self> {
        encoder.validate()?;
        schedule.validate(encoder.n_layers, n_adapter_layers)?;
        if tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        if dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "adapter dim {dim} must be a positive multiple of {heads} heads"
            )));
        }

        let make_blocks = |store: &mut ParamStore<F>, init: &mut Init, prefix: &str| {
            (0..n_adapter_layers)
                .map(|j| TransformerBlock::new(store, init, &format!("{prefix}.{j}"), dim, heads))
                .collect::<Vec<_>>()
        };

        // Shared blocks are constructed once and reused by id in both
        // branches, so the census and the optimizer see one copy.
        let (vis_blocks, txt_blocks) = match mode {
            SharingMode::Shared => {
                let blocks = make_blocks(store, init, "msat.block");
                (Some(blocks.clone()), Some(blocks))
            }
            SharingMode::Dual => (
                Some(make_blocks(store, init, "msat.block_v")),
                Some(make_blocks(store, init, "msat.block_t")),
            ),
            SharingMode::VisualOnly => (Some(make_blocks(store, init, "msat.block")), None),
            SharingMode::TextOnly => (None, Some(make_blocks(store, init, "msat.block"))),
            SharingMode::None => (None, None),
        };

        let visual = if mode.visual_adapter() {
            let blocks = vis_blocks.expect("visual adapter blocks");
            let patch_embed = Linear::new(store, init, "msat.patch_embed", encoder.vis_hidden, dim);
            let pos_embed = store.add(
                "msat.pos_embed",
                init.normal_matrix(encoder.n_patches(), dim, 0.02),
            );
            let mut projs = Vec::new();
            let mut alphas = Vec::new();
            for &(i, j) in &schedule.visual_pairs {
                projs.push(if j == 0 {
                    None
                } else {
                    Some(Linear::new(
                        store,
                        init,
                        &format!("msat.proj_v.{i}_{j}"),
                        encoder.vis_hidden,
                        dim,
                    ))
                });
                alphas.push(store.add(format!("msat.alpha_v.{i}_{j}"), Array2::zeros((1, 1))));
            }
            Some(VisualBranch {
                patch_embed,
                pos_embed,
                blocks,
                projs,
                alphas,
            })
        } else {
            None
        };

        let bypass_v = (!mode.visual_adapter())
            .then(|| Linear::new(store, init, "msat.bypass_v", encoder.vis_hidden, dim));

        let text = if mode.text_adapter() {
            let blocks = txt_blocks.expect("text adapter blocks");
            let down = Linear::new(store, init, "msat.text_down", encoder.txt_hidden, dim);
            let mut projs = Vec::new();
            let mut alphas = Vec::new();
            for &(i, j) in &schedule.text_pairs {
                projs.push(Linear::new(
                    store,
                    init,
                    &format!("msat.proj_t.{i}_{j}"),
                    encoder.txt_hidden,
                    dim,
                ));
                alphas.push(store.add(format!("msat.alpha_t.{i}_{j}"), Array2::zeros((1, 1))));
            }
            let out_proj = Linear::new(store, init, "msat.out_proj", dim, dim);
            Some(TextBranch {
                down,
                blocks,
                projs,
                alphas,
                out_proj,
            })
        } else {
            None
        };

        let bypass_t = (!mode.text_adapter())
            .then(|| Linear::new(store, init, "msat.bypass_t", encoder.txt_hidden, dim));

        Ok(MsatNet {
            mode,
            schedule,
            dim,
            heads,
            n_adapter_layers,
            tau,
            encoder: encoder.clone(),
            visual,
            bypass_v,
            text,
            bypass_t,
        })
    }

    fn gate<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, alpha: ParamId) -> Var {
        let a = store.bind(tape, alpha);
        let scaled = tape.scale(a, F::from_f64c(1.0 / self.tau));
        tape.sigmoid(scaled)
    }

    /// Runs the visual branch; output is the fused `[L^v, dim]` state.
    pub fn visual_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        input: &VisualInput<'_, F>,
    ) -> Result<Var> {
        if input.fusion_layers.len() != self.encoder.n_layers + 1 {
            return Err(Error::Shape(format!(
                "visual forward: {} fusion layers, expected {}",
                input.fusion_layers.len(),
                self.encoder.n_layers + 1
            )));
        }

        let Some(branch) = &self.visual else {
            let last = tape.leaf(input.fusion_layers[self.encoder.n_layers].clone());
            return Ok(self
                .bypass_v
                .as_ref()
                .expect("bypass")
                .forward(tape, store, last));
        };

        let pair_at = |point: usize| {
            self.schedule
                .visual_pairs
                .iter()
                .position(|&(_, j)| j == point)
        };

        let pos = store.bind(tape, branch.pos_embed);
        let mut state = match pair_at(0) {
            Some(k) => {
                let (i, _) = self.schedule.visual_pairs[k];
                let frozen = tape.leaf(input.fusion_layers[i].clone());
                let projected = branch.patch_embed.forward(tape, store, frozen);
                let mu = self.gate(tape, store, branch.alphas[k]);
                tape.lincomb_gate(mu, pos, projected)
            }
            None => {
                let src = tape.leaf(input.embed_source.clone());
                let embedded = branch.patch_embed.forward(tape, store, src);
                tape.add(embedded, pos)
            }
        };

        for (b, block) in branch.blocks.iter().enumerate() {
            state = block.forward(tape, store, state);
            if let Some(k) = pair_at(b + 1) {
                let (i, _) = self.schedule.visual_pairs[k];
                let frozen = tape.leaf(input.fusion_layers[i].clone());
                let proj = branch.projs[k].as_ref().unwrap_or(&branch.patch_embed);
                let projected = proj.forward(tape, store, frozen);
                let mu = self.gate(tape, store, branch.alphas[k]);
                state = tape.lincomb_gate(mu, state, projected);
            }
        }
        Ok(state)
    }

    /// Runs the text branch; returns the `[L^t, dim]` states and the
    /// projected end-of-text embedding `[1, dim]`.
    pub fn text_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        tf: &TextFeatures<F>,
    ) -> Result<(Var, Var)> {
        if tf.per_layer.len() != self.encoder.n_layers + 1 {
            return Err(Error::Shape(format!(
                "text forward: {} layers, expected {}",
                tf.per_layer.len(),
                self.encoder.n_layers + 1
            )));
        }
        let eot = tf.eot_index();

        let Some(branch) = &self.text else {
            let last = tape.leaf(tf.per_layer[self.encoder.n_layers].clone());
            let states = self
                .bypass_t
                .as_ref()
                .expect("bypass")
                .forward(tape, store, last);
            let eot_embed = tape.row(states, eot);
            return Ok((states, eot_embed));
        };

        let base = tape.leaf(tf.per_layer[0].clone());
        let mut state = branch.down.forward(tape, store, base);

        let pair_at = |point: usize| {
            self.schedule
                .text_pairs
                .iter()
                .position(|&(_, j)| j == point)
        };
        if let Some(k) = pair_at(0) {
            let (i, _) = self.schedule.text_pairs[k];
            let frozen = tape.leaf(tf.per_layer[i].clone());
            let projected = branch.projs[k].forward(tape, store, frozen);
            let mu = self.gate(tape, store, branch.alphas[k]);
            state = tape.lincomb_gate(mu, state, projected);
        }

        for (b, block) in branch.blocks.iter().enumerate() {
            state = block.forward(tape, store, state);
            if let Some(k) = pair_at(b + 1) {
                let (i, _) = self.schedule.text_pairs[k];
                let frozen = tape.leaf(tf.per_layer[i].clone());
                let projected = branch.projs[k].forward(tape, store, frozen);
                let mu = self.gate(tape, store, branch.alphas[k]);
                state = tape.lincomb_gate(mu, state, projected);
            }
        }

        let eot_state = tape.row(state, eot);
        let eot_embed = branch.out_proj.forward(tape, store, eot_state);
        Ok((state, eot_embed))
    }

    /// Convenience eval-mode visual forward on a throwaway tape.
    pub fn visual_eval<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        vf: &VisualFeatures<F>,
    ) -> Result<Array2<F>> {
        let mut tape = Tape::new();
        let out = self.visual_forward(&mut tape, store, &VisualInput::from(vf))?;
        Ok(tape.value(out).clone())
    }

    /// Trainable gate parameter ids `(visual, text)`, for probes.
    pub fn gate_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (
            self.visual
                .as_ref()
                .map(|b| b.alphas.clone())
                .unwrap_or_default(),
            self.text
                .as_ref()
                .map(|b| b.alphas.clone())
                .unwrap_or_default(),
        )
    }

    /// Position-embedding parameter (pure side-state input), for probes.
    pub fn pos_embed_id(&self) -> Option<ParamId> {
        self.visual.as_ref().map(|b| b.pos_embed)
    }
}
