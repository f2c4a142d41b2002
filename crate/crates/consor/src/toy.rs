//! Deterministic toy-data generation: a full dataset plus frozen-feature
//! fixtures, so the entire pipeline runs with no external datasets or
//! pretrained weights.
//!
//! Features are planted directly in encoder-feature space: every tensor
//! of a sample carries `class_separation * prototype[label]` plus unit
//! Gaussian noise. With positive separation the labels are learnable
//! (and linearly probeable); at zero separation the prototypes vanish
//! and features carry no label information.
//!
//! All draws are keyed by `(seed, domain, subject)`, so generation is a
//! pure function of the `ToySpec`, and all values are rounded through f32 so
//! in-memory features equal fixture-file features bit for bit.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageRecord, PairSample, PersonBox, Split};
use crate::encoder::{
    derived_init, pack_from_text, pack_from_visual, text_fixture_stem, token_count_for,
    EncoderConfig, FeatureProvider, MemoryProvider, TextFeatures, VisualFeatures,
};
use crate::error::{Error, Result};
use crate::featurepack::write_feature_pack;
use crate::prompts::{
    assemble_social_prompts, class_sentence, select_visual_vocabs, Corpus, CorpusKind, CorpusSet,
};
use crate::scalar::Scalar;
use crate::taxonomy::RelationTaxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub n_images: usize,
    pub persons_per_image: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub class_separation: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_images: 64,
            persons_per_image: 3,
            n_classes: 3,
            seed: 0,
            encoder: EncoderConfig::miniature(),
            class_separation: 2.0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_images == 0 || self.persons_per_image < 2 || self.n_classes < 2 {
            return Err(Error::Config(format!("invalid toy spec: {self:?}")));
        }
        if self.class_separation.is_nan() || self.class_separation < 0.0 {
            return Err(Error::Config(format!(
                "class_separation must be >= 0, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }
}

/// Everything the toy generator produced; the provider serves the same
/// values that `write_to` persists.
pub struct ToyBundle<F: Scalar> {
    pub spec: ToySpec,
    pub dataset: Dataset,
    pub corpora: CorpusSet,
    pub provider: MemoryProvider<F>,
    /// Per-class planted directions in joint space (zero at separation 0).
    pub prototypes_joint: Vec<Array1<f64>>,
}

fn toy_corpora() -> CorpusSet {
    let lists: [(CorpusKind, &[&str]); 4] = [
        (
            CorpusKind::SceneCategory,
            &[
                "park", "office", "beach", "kitchen", "street", "stadium", "church", "market",
            ],
        ),
        (
            CorpusKind::SceneAttribute,
            &["sunny", "crowded", "quiet", "festive", "formal", "outdoor"],
        ),
        (
            CorpusKind::ObjectCategory,
            &[
                "ball",
                "laptop",
                "flowers",
                "table",
                "bicycle",
                "microphone",
                "cake",
                "camera",
            ],
        ),
        (
            CorpusKind::Emotion,
            &["joy", "trust", "surprise", "sadness"],
        ),
    ];
    CorpusSet::new(
        lists
            .into_iter()
            .map(|(kind, words)| {
                Corpus::new(
                    kind,
                    words.iter().map(|s| s.to_string()).collect(),
                    kind.default_top_k(),
                )
                .expect("toy corpora are well-formed")
            })
            .collect(),
    )
    .expect("toy corpus set")
}

/// Draws a Gaussian matrix keyed by `(seed, parts)`.
fn keyed_noise(seed: u64, parts: &[&str], rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut init = derived_init(seed, parts);
    Array2::from_shape_fn((rows, cols), |_| init.standard_normal() * std)
}

fn unit_prototype(seed: u64, parts: &[&str], dim: usize) -> Array1<f64> {
    let raw = keyed_noise(seed, parts, 1, dim, 1.0).row(0).to_owned();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.mapv(|x| x / norm)
}

/// Final tensors are rounded through f32 so the in-memory provider and
/// the written fixture files serve identical values in any precision.
fn to_f<F: Scalar>(m: &Array2<f64>) -> Array2<F> {
    m.mapv(|x| F::from_f64c(x as f32 as f64))
}

fn to_f1<F: Scalar>(v: &Array1<f64>) -> Array1<F> {
    v.mapv(|x| F::from_f64c(x as f32 as f64))
}

/// Generates the dataset, its feature fixtures, and the candidate-prompt
/// text fixtures. A pure function of the `ToySpec`.
pub fn generate_toy_dataset<F: Scalar>(spec: &ToySpec) -> Result<ToyBundle<F>> {
    spec.validate()?;
    let cfg = &spec.encoder;
    let seed = spec.seed;
    let sep = spec.class_separation;
    let n_classes = spec.n_classes;

    let taxonomy = RelationTaxonomy::new(
        format!("toy-{n_classes}"),
        (0..n_classes).map(|k| format!("relation-{k}")).collect(),
    )?;
    let corpora = toy_corpora();

    // Per-class planted directions, one per feature space.
    let proto_vis: Vec<Array1<f64>> = (0..n_classes)
        .map(|c| unit_prototype(seed, &["proto-vis", &c.to_string()], cfg.vis_hidden) * sep)
        .collect();
    let proto_txt: Vec<Array1<f64>> = (0..n_classes)
        .map(|c| unit_prototype(seed, &["proto-txt", &c.to_string()], cfg.txt_hidden) * sep)
        .collect();
    let proto_joint: Vec<Array1<f64>> = (0..n_classes)
        .map(|c| unit_prototype(seed, &["proto-joint", &c.to_string()], cfg.joint_dim) * sep)
        .collect();

    // Images, boxes, and ordered pair samples; one label per image.
    let mut images = Vec::with_capacity(spec.n_images);
    let mut samples = Vec::new();
    let persons = spec.persons_per_image;
    for idx in 0..spec.n_images {
        let image_id = format!("img{idx:04}");
        let label = idx % n_classes;
        let mut jitter = derived_init(seed, &["boxes", &image_id]);
        let boxes: Vec<PersonBox> = (0..persons)
            .map(|p| {
                let x0 = p as f64 / persons as f64 + 0.02;
                let x1 = (p + 1) as f64 / persons as f64 - 0.02;
                let y0 = 0.08 + jitter.standard_normal().abs().min(2.0) * 0.05;
                let y1 = 0.92 - jitter.standard_normal().abs().min(2.0) * 0.05;
                PersonBox::new(x0, y0.min(0.4), x1, y1.max(0.6)).expect("toy box")
            })
            .collect();
        for i in 0..persons {
            for j in 0..persons {
                if i != j {
                    samples.push(PairSample {
                        image_id: image_id.clone(),
                        i,
                        j,
                        label,
                    });
                }
            }
        }
        images.push(ImageRecord {
            image_id,
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
            persons: boxes,
        });
    }
    let dataset = Dataset {
        taxonomy: taxonomy.clone(),
        images,
        samples,
        split: Split::Train,
    };

    let mut provider = MemoryProvider::<F>::new(cfg.clone());

    // Joint embeddings of all vocab ranking prompts (pure noise; ranking
    // just has to be deterministic).
    for corpus in &corpora.corpora {
        for vocab in &corpus.vocabs {
            let prompt = crate::prompts::render_vocab_prompt(corpus.kind, vocab)?;
            let joint = keyed_noise(seed, &["vocab-joint", &prompt], 1, cfg.joint_dim, 1.0)
                .row(0)
                .to_owned();
            provider.insert_joint_text(&prompt, to_f1::<F>(&joint))?;
        }
    }

    // Class-sentence joint embeddings: nearly pure prototype, so the
    // zero-shot route is informative exactly when separation > 0.
    for (c, class) in taxonomy.classes.iter().enumerate() {
        let sentence = class_sentence(class);
        let noise = keyed_noise(seed, &["class-joint", &sentence], 1, cfg.joint_dim, 0.1)
            .row(0)
            .to_owned();
        let v = &proto_joint[c] + &noise;
        provider.insert_joint_text(&sentence, to_f1::<F>(&v))?;
    }

    // Per-image visual features, global token, and joint embedding.
    // Prototypes are planted in layers 1..=n only: the embedding layer
    // stays pure noise, so the class signal lives where the fusion
    // schedule (not the input embedding) can reach it.
    for (idx, image) in dataset.images.iter().enumerate() {
        let label = idx % n_classes;
        let id = &image.image_id;
        let per_layer: Vec<Array2<F>> = (0..=cfg.n_layers)
            .map(|l| {
                let mut layer = keyed_noise(
                    seed,
                    &["vis", id, &l.to_string()],
                    cfg.n_patches(),
                    cfg.vis_hidden,
                    1.0,
                );
                if l > 0 {
                    for mut row in layer.rows_mut() {
                        row += &proto_vis[label];
                    }
                }
                to_f::<F>(&layer)
            })
            .collect();
        let cls_noise = keyed_noise(seed, &["cls", id], 1, cfg.joint_dim, 1.0)
            .row(0)
            .to_owned();
        let cls = &(&proto_joint[label] * 0.5) + &cls_noise;
        provider.insert_visual(
            id,
            VisualFeatures {
                per_layer,
                cls: to_f1::<F>(&cls),
            },
        )?;

        let joint_noise = keyed_noise(seed, &["joint-img", id], 1, cfg.joint_dim, 0.5)
            .row(0)
            .to_owned();
        let joint = &proto_joint[label] + &joint_noise;
        provider.insert_joint_image(id, to_f1::<F>(&joint))?;
    }

    // Candidate social prompts per image: run the real selection over the
    // planted joints, then plant class prototypes into the text features
    // of each assembled candidate.
    for image in &dataset.images {
        let sel = select_visual_vocabs(&provider, &image.image_id, &corpora)?;
        let prompts = assemble_social_prompts(&sel, &taxonomy)?;
        for (c, prompt) in prompts.iter().enumerate() {
            if provider.text(&prompt.text).is_ok() {
                continue; // identical prompt text already planted
            }
            let (token_count, truncated) = token_count_for(&prompt.text, cfg.max_text_len);
            let per_layer: Vec<Array2<F>> = (0..=cfg.n_layers)
                .map(|l| {
                    let mut layer = keyed_noise(
                        seed,
                        &["txt", &prompt.text, &l.to_string()],
                        cfg.max_text_len,
                        cfg.txt_hidden,
                        1.0,
                    );
                    for r in 0..cfg.max_text_len {
                        if r >= token_count {
                            layer.row_mut(r).fill(0.0);
                        } else if l > 0 {
                            let mut row = layer.row_mut(r);
                            row += &proto_txt[c];
                        }
                    }
                    to_f::<F>(&layer)
                })
                .collect();
            let eot_noise = keyed_noise(seed, &["txt-eot", &prompt.text], 1, cfg.joint_dim, 1.0)
                .row(0)
                .to_owned();
            let eot = &proto_joint[c] + &eot_noise;
            provider.insert_text(
                &prompt.text,
                TextFeatures {
                    per_layer,
                    eot: to_f1::<F>(&eot),
                    token_count,
                    truncated,
                },
            )?;
            let joint_noise =
                keyed_noise(seed, &["txt-joint", &prompt.text], 1, cfg.joint_dim, 0.5)
                    .row(0)
                    .to_owned();
            let joint = &proto_joint[c] + &joint_noise;
            provider.insert_joint_text(&prompt.text, to_f1::<F>(&joint))?;
        }
    }

    Ok(ToyBundle {
        spec: spec.clone(),
        dataset,
        corpora,
        provider,
        prototypes_joint: proto_joint,
    })
}

impl<F: Scalar> ToyBundle<F> {
    /// Persists annotations, corpora, taxonomy, and all feature fixtures
    /// under `dir`. Output bytes are a pure function of the `ToySpec`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let fixtures = dir.join("fixtures");
        std::fs::create_dir_all(fixtures.join("text"))?;
        let corpora_dir = dir.join("corpora");
        std::fs::create_dir_all(&corpora_dir)?;

        std::fs::write(
            dir.join("annotations.json"),
            annotations_json(&self.dataset)?,
        )?;
        std::fs::write(
            dir.join("taxonomy.json"),
            serde_json::to_string_pretty(&self.dataset.taxonomy)? + "\n",
        )?;
        std::fs::write(
            dir.join("toy_spec.json"),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;

        for corpus in &self.corpora.corpora {
            let body: String = corpus.vocabs.iter().map(|v| format!("{v}\n")).collect();
            std::fs::write(corpora_dir.join(Corpus::file_name(corpus.kind)), body)?;
        }

        let mut image_ids: Vec<&str> = self.provider.visual_ids().collect();
        image_ids.sort_unstable();
        for id in image_ids {
            let vf = self.provider.visual(id)?;
            let joint = self
                .provider
                .raw_joint_image(id)
                .ok_or_else(|| Error::MissingFixture {
                    ids: vec![id.to_string()],
                })?;
            let pack = pack_from_visual(id, &vf, joint)?;
            write_feature_pack(&pack, &fixtures.join(format!("{id}.fpk")))?;
        }

        // Full text fixtures (per-layer features) for assembled prompts.
        let mut text_keys: Vec<&str> = self.provider.text_keys().collect();
        text_keys.sort_unstable();
        for text in text_keys {
            let tf = self.provider.text(text)?;
            let joint =
                self.provider
                    .raw_joint_text(text)
                    .ok_or_else(|| Error::MissingFixture {
                        ids: vec![format!("text:{text}")],
                    })?;
            let pack = pack_from_text(text, &tf, joint)?;
            write_feature_pack(
                &pack,
                &fixtures
                    .join("text")
                    .join(format!("{}.fpk", text_fixture_stem(text))),
            )?;
        }

        // Joint-only fixtures for ranking prompts and class sentences.
        let mut joint_only: Vec<&str> = self
            .provider
            .joint_text_keys()
            .filter(|t| self.provider.text(t).is_err())
            .collect();
        joint_only.sort_unstable();
        for text in joint_only {
            let joint = self.provider.raw_joint_text(text).expect("key listed");
            let mut pack = crate::featurepack::FeaturePack::new(text_fixture_stem(text));
            pack.insert_f32(
                "joint",
                vec![joint.len()],
                joint.iter().map(|x| x.to_f64c() as f32).collect(),
            )?;
            pack.meta.insert("text".into(), serde_json::json!(text));
            write_feature_pack(
                &pack,
                &fixtures
                    .join("text")
                    .join(format!("{}.fpk", text_fixture_stem(text))),
            )?;
        }
        Ok(())
    }
}

/// Serializes a dataset into the canonical annotation JSON schema.
pub fn annotations_json(ds: &Dataset) -> Result<String> {
    let images: Vec<serde_json::Value> = ds
        .images
        .iter()
        .map(|img| {
            serde_json::json!({
                "id": img.image_id,
                "width": img.width,
                "height": img.height,
                "persons": img.persons.iter().map(|b| vec![b.x0, b.y0, b.x1, b.y1]).collect::<Vec<_>>(),
            })
        })
        .collect();
    let samples: Vec<serde_json::Value> = ds
        .samples
        .iter()
        .map(|s| {
            serde_json::json!({
                "image": s.image_id,
                "i": s.i,
                "j": s.j,
                "label": s.label,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "taxonomy": {"name": ds.taxonomy.name, "classes": ds.taxonomy.classes},
        "images": images,
        "samples": samples,
        "coords": "normalized",
        "split": ds.split.to_string(),
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}
