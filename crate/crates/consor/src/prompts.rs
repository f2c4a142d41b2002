//! Descriptive social prompt construction.
//!
//! Three steps: render one prompt per corpus vocab, rank vocabs for an
//! image by joint-embedding cosine (zero-shot), then assemble one
//! candidate social prompt per relation class. The candidates differ
//! only in the leading class sentence, which is what makes cosine
//! contrasting against them informative.
//!
//! Template strings are fixed verbatim, including their grammatical
//! quirks: downstream text fixtures are keyed by exact prompt bytes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureProvider;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::taxonomy::RelationTaxonomy;

/// The four social-relevant vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    SceneCategory,
    SceneAttribute,
    ObjectCategory,
    Emotion,
}

impl CorpusKind {
    /// Canonical ordering; selection reports and assembled prompts
    /// always follow it.
    pub const ALL: [CorpusKind; 4] = [
        CorpusKind::SceneCategory,
        CorpusKind::SceneAttribute,
        CorpusKind::ObjectCategory,
        CorpusKind::Emotion,
    ];

    /// Vocabs kept per image: 5 for the three large corpora, 1 for emotion.
    pub fn default_top_k(self) -> usize {
        match self {
            CorpusKind::Emotion => 1,
            _ => 5,
        }
    }

    /// Size of the corresponding bundled vocabulary file.
    pub fn bundled_size(self) -> usize {
        match self {
            CorpusKind::SceneCategory => 365,
            CorpusKind::SceneAttribute => 94,
            CorpusKind::ObjectCategory => 1000,
            CorpusKind::Emotion => 24,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::SceneCategory => "scene_category",
            CorpusKind::SceneAttribute => "scene_attribute",
            CorpusKind::ObjectCategory => "object_category",
            CorpusKind::Emotion => "emotion",
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene_category" => Ok(CorpusKind::SceneCategory),
            "scene_attribute" => Ok(CorpusKind::SceneAttribute),
            "object_category" => Ok(CorpusKind::ObjectCategory),
            "emotion" => Ok(CorpusKind::Emotion),
            other => Err(Error::Config(format!(
                "unknown corpus kind `{other}`; expected one of scene_category, \
                 scene_attribute, object_category, emotion"
            ))),
        }
    }
}

/// Renders the single-vocab ranking prompt for a corpus entry.
pub fn render_vocab_prompt(kind: CorpusKind, vocab: &str) -> Result<String> {
    if vocab.trim().is_empty() {
        return Err(Error::Precondition("empty vocab".into()));
    }
    Ok(match kind {
        CorpusKind::SceneCategory => format!("The photo is taken in {vocab}."),
        CorpusKind::SceneAttribute => format!("The scene attribute of the image is {vocab}."),
        CorpusKind::ObjectCategory => format!("There are {vocab} in the photo."),
        CorpusKind::Emotion => format!("The emotion in this photo is {vocab}."),
    })
}

/// The class sentence prepended to every candidate social prompt.
pub fn class_sentence(relation: &str) -> String {
    format!("In this photo, the social relation of this person pair is {relation}.")
}

/// Multi-vocab sentence used when assembling the social prompt; the
/// wording differs slightly from the single-vocab ranking templates and
/// is preserved as-is.
fn assembly_sentence(kind: CorpusKind, vocabs: &[String]) -> String {
    let joined = vocabs.join(", ");
    match kind {
        CorpusKind::SceneCategory => format!("The photo is taken in {joined}."),
        CorpusKind::SceneAttribute => format!("This scene attribute of the image are {joined}."),
        CorpusKind::ObjectCategory => format!("There are {joined} in the photo."),
        CorpusKind::Emotion => format!("This emotion in this photo is {joined}."),
    }
}

/// One vocabulary: kind, entries, and how many survive selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub vocabs: Vec<String>,
    pub top_k: usize,
}

impl Corpus {
    pub fn new(kind: CorpusKind, vocabs: Vec<String>, top_k: usize) -> Result<Self> {
        if vocabs.is_empty() {
            return Err(Error::Config(format!("{} corpus is empty", kind.as_str())));
        }
        if top_k == 0 || top_k > vocabs.len() {
            return Err(Error::Config(format!(
                "{} corpus: top_k {top_k} outside 1..={}",
                kind.as_str(),
                vocabs.len()
            )));
        }
        Ok(Corpus {
            kind,
            vocabs,
            top_k,
        })
    }

    /// Parses one-vocab-per-line text; `#` starts a comment line.
    pub fn from_text(kind: CorpusKind, text: &str) -> Result<Self> {
        let vocabs: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Corpus::new(kind, vocabs, kind.default_top_k())
    }

    pub fn from_path(kind: CorpusKind, path: &Path) -> Result<Self> {
        Self::from_text(kind, &std::fs::read_to_string(path)?)
    }

    /// The vocabulary bundled with the crate.
    pub fn bundled(kind: CorpusKind) -> Self {
        let text = match kind {
            CorpusKind::SceneCategory => include_str!("../corpora/scene_categories.txt"),
            CorpusKind::SceneAttribute => include_str!("../corpora/scene_attributes.txt"),
            CorpusKind::ObjectCategory => include_str!("../corpora/object_categories.txt"),
            CorpusKind::Emotion => include_str!("../corpora/emotions.txt"),
        };
        Self::from_text(kind, text).expect("bundled corpora are well-formed")
    }

    /// Human-readable note when the size differs from the published
    /// corpus cardinality; callers surface it as a warning.
    pub fn size_warning(&self) -> Option<String> {
        let expected = self.kind.bundled_size();
        (self.vocabs.len() != expected).then(|| {
            format!(
                "{} corpus has {} entries, published corpus has {expected}",
                self.kind.as_str(),
                self.vocabs.len()
            )
        })
    }

    /// Conventional file name inside a corpora directory.
    pub fn file_name(kind: CorpusKind) -> &'static str {
        match kind {
            CorpusKind::SceneCategory => "scene_categories.txt",
            CorpusKind::SceneAttribute => "scene_attributes.txt",
            CorpusKind::ObjectCategory => "object_categories.txt",
            CorpusKind::Emotion => "emotions.txt",
        }
    }
}

/// The enabled corpora in canonical order (subsets support the
/// corpus-ablation configurations).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSet {
    pub corpora: Vec<Corpus>,
}

impl CorpusSet {
    pub fn new(mut corpora: Vec<Corpus>) -> Result<Self> {
        let order = |k: CorpusKind| CorpusKind::ALL.iter().position(|&x| x == k).unwrap();
        corpora.sort_by_key(|c| order(c.kind));
        for pair in corpora.windows(2) {
            if pair[0].kind == pair[1].kind {
                return Err(Error::Config(format!(
                    "duplicate corpus kind {}",
                    pair[0].kind.as_str()
                )));
            }
        }
        if corpora.is_empty() {
            return Err(Error::Config("corpus set is empty".into()));
        }
        Ok(CorpusSet { corpora })
    }

    pub fn bundled() -> Self {
        CorpusSet::new(CorpusKind::ALL.map(Corpus::bundled).to_vec()).unwrap()
    }

    pub fn bundled_subset(kinds: &[CorpusKind]) -> Result<Self> {
        CorpusSet::new(kinds.iter().map(|&k| Corpus::bundled(k)).collect())
    }

    /// Loads `scene_categories.txt` etc. from a directory.
    pub fn from_dir(dir: &Path, kinds: &[CorpusKind]) -> Result<Self> {
        CorpusSet::new(
            kinds
                .iter()
                .map(|&k| Corpus::from_path(k, &dir.join(Corpus::file_name(k))))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    pub fn get(&self, kind: CorpusKind) -> Option<&Corpus> {
        self.corpora.iter().find(|c| c.kind == kind)
    }

    /// Stable digest of the corpus contents, used as a selection cache key.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for corpus in &self.corpora {
            hasher.update(corpus.kind.as_str().as_bytes());
            hasher.update(corpus.top_k.to_le_bytes());
            for vocab in &corpus.vocabs {
                hasher.update(vocab.as_bytes());
                hasher.update([0u8]);
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One ranked vocab with its cosine score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedVocab {
    pub vocab: String,
    pub score: f64,
}

/// Ranked selection for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSelection {
    pub kind: CorpusKind,
    pub top_k: usize,
    pub entries: Vec<SelectedVocab>,
}

/// Per-image zero-shot vocab selection across all enabled corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualVocabSelection {
    pub image_id: String,
    pub per_corpus: Vec<CorpusSelection>,
}

/// Ranks every corpus vocab by cosine between the image joint embedding
/// and the rendered vocab prompt embedding; keeps the top-k per corpus.
/// Ties preserve corpus order (stable sort on the score only).
pub fn select_visual_vocabs<F: Scalar>(
    provider: &dyn FeatureProvider<F>,
    image_id: &str,
    corpora: &CorpusSet,
) -> Result<VisualVocabSelection> {
    let image = provider.joint_image(image_id)?;
    let mut per_corpus = Vec::with_capacity(corpora.corpora.len());
    for corpus in &corpora.corpora {
        let mut scored: Vec<SelectedVocab> = Vec::with_capacity(corpus.vocabs.len());
        for vocab in &corpus.vocabs {
            let prompt = render_vocab_prompt(corpus.kind, vocab)?;
            let embed = provider.joint_text(&prompt)?;
            let num: F = image.iter().zip(embed.iter()).map(|(&a, &b)| a * b).sum();
            let na: F = image.iter().map(|&a| a * a).sum::<F>().sqrt();
            let nb: F = embed.iter().map(|&b| b * b).sum::<F>().sqrt();
            scored.push(SelectedVocab {
                vocab: vocab.clone(),
                score: (num / (na * nb)).to_f64c(),
            });
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        scored.truncate(corpus.top_k);
        per_corpus.push(CorpusSelection {
            kind: corpus.kind,
            top_k: corpus.top_k,
            entries: scored,
        });
    }
    Ok(VisualVocabSelection {
        image_id: image_id.to_string(),
        per_corpus,
    })
}

/// One candidate social prompt for one relation class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialPrompt {
    pub relation: String,
    pub text: String,
}

/// The vocab sentences shared by every class prompt of an image.
pub fn prompt_suffix(sel: &VisualVocabSelection) -> Result<String> {
    if sel.per_corpus.is_empty() {
        return Err(Error::Precondition("selection has no corpora".into()));
    }
    let mut sentences = Vec::with_capacity(sel.per_corpus.len());
    for cs in &sel.per_corpus {
        if cs.entries.len() != cs.top_k || cs.entries.is_empty() {
            return Err(Error::Precondition(format!(
                "incomplete selection for {}: {} of {} vocabs",
                cs.kind.as_str(),
                cs.entries.len(),
                cs.top_k
            )));
        }
        let vocabs: Vec<String> = cs.entries.iter().map(|e| e.vocab.clone()).collect();
        sentences.push(assembly_sentence(cs.kind, &vocabs));
    }
    Ok(sentences.join(" "))
}

/// Builds the C candidate prompts: class sentence first, then the shared
/// vocab sentences in corpus order.
pub fn assemble_social_prompts(
    sel: &VisualVocabSelection,
    taxonomy: &RelationTaxonomy,
) -> Result<Vec<SocialPrompt>> {
    let suffix = prompt_suffix(sel)?;
    Ok(taxonomy
        .classes
        .iter()
        .map(|relation| SocialPrompt {
            relation: relation.clone(),
            text: format!("{} {}", class_sentence(relation), suffix),
        })
        .collect())
}

/// Selection memo: selections are training-invariant because the
/// encoders are frozen, so each (image, corpus-set) pair is ranked once.
pub struct SelectionCache {
    corpus_hash: String,
    inner: Mutex<HashMap<String, Arc<VisualVocabSelection>>>,
}

impl SelectionCache {
    pub fn new(corpora: &CorpusSet) -> Self {
        SelectionCache {
            corpus_hash: corpora.content_hash(),
            inner: Mutex::new(HashMap::new()),
        }
    }

    pub fn get_or_select<F: Scalar>(
        &self,
        provider: &dyn FeatureProvider<F>,
        image_id: &str,
        corpora: &CorpusSet,
    ) -> Result<Arc<VisualVocabSelection>> {
        assert_eq!(
            self.corpus_hash,
            corpora.content_hash(),
            "selection cache used with a different corpus set"
        );
        {
            let cache = self.inner.lock().unwrap();
            if let Some(sel) = cache.get(image_id) {
                return Ok(sel.clone());
            }
        }
        let sel = Arc::new(select_visual_vocabs(provider, image_id, corpora)?);
        self.inner
            .lock()
            .unwrap()
            .insert(image_id.to_string(), sel.clone());
        Ok(sel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, MemoryProvider};
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_templates_are_byte_exact() {
        assert_eq!(
            render_vocab_prompt(CorpusKind::SceneCategory, "office").unwrap(),
            "The photo is taken in office."
        );
        assert_eq!(
            render_vocab_prompt(CorpusKind::Emotion, "joy").unwrap(),
            "The emotion in this photo is joy."
        );
        assert_eq!(
            render_vocab_prompt(CorpusKind::ObjectCategory, "bow-tie").unwrap(),
            "There are bow-tie in the photo."
        );
        assert_eq!(
            render_vocab_prompt(CorpusKind::SceneAttribute, "sports").unwrap(),
            "The scene attribute of the image is sports."
        );
    }

    #[test]
    fn empty_vocab_is_error() {
        assert!(render_vocab_prompt(CorpusKind::Emotion, "  ").is_err());
    }

    fn selection_from(vocabs: &[(CorpusKind, usize, &[&str])]) -> VisualVocabSelection {
        VisualVocabSelection {
            image_id: "img".into(),
            per_corpus: vocabs
                .iter()
                .map(|(kind, k, vs)| CorpusSelection {
                    kind: *kind,
                    top_k: *k,
                    entries: vs
                        .iter()
                        .map(|v| SelectedVocab {
                            vocab: v.to_string(),
                            score: 0.0,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn assembled_prompt_matches_reference_wording() {
        let sel = selection_from(&[
            (CorpusKind::SceneCategory, 5, &["a", "b", "c", "d", "e"]),
            (CorpusKind::SceneAttribute, 5, &["f", "g", "h", "i", "j"]),
            (CorpusKind::ObjectCategory, 5, &["k", "l", "m", "n", "o"]),
            (CorpusKind::Emotion, 1, &["p"]),
        ]);
        let tax = RelationTaxonomy::new("toy", vec!["friend".into(), "family".into()]).unwrap();
        let prompts = assemble_social_prompts(&sel, &tax).unwrap();
        assert_eq!(prompts.len(), 2);
        let expected_suffix = "The photo is taken in a, b, c, d, e. \
             This scene attribute of the image are f, g, h, i, j. \
             There are k, l, m, n, o in the photo. \
             This emotion in this photo is p.";
        assert_eq!(
            prompts[0].text,
            format!(
                "In this photo, the social relation of this person pair is friend. {expected_suffix}"
            )
        );
        for p in &prompts {
            assert!(p.text.ends_with(expected_suffix));
            assert!(p
                .text
                .starts_with("In this photo, the social relation of this person pair is"));
        }
    }

    #[test]
    fn pisc_fine_yields_six_prompts() {
        let sel = selection_from(&[
            (CorpusKind::SceneCategory, 5, &["a", "b", "c", "d", "e"]),
            (CorpusKind::SceneAttribute, 5, &["f", "g", "h", "i", "j"]),
            (CorpusKind::ObjectCategory, 5, &["k", "l", "m", "n", "o"]),
            (CorpusKind::Emotion, 1, &["p"]),
        ]);
        let tax = crate::taxonomy::builtin_taxonomy("pisc-fine").unwrap();
        assert_eq!(assemble_social_prompts(&sel, &tax).unwrap().len(), 6);
    }

    #[test]
    fn incomplete_selection_is_error() {
        let sel = selection_from(&[(CorpusKind::SceneCategory, 5, &["a", "b"])]);
        let tax = RelationTaxonomy::new("toy", vec!["x".into(), "y".into()]).unwrap();
        assert!(assemble_social_prompts(&sel, &tax).is_err());
    }

    #[test]
    fn corpus_subset_drops_sentences() {
        let sel = selection_from(&[
            (CorpusKind::SceneCategory, 2, &["a", "b"]),
            (CorpusKind::Emotion, 1, &["p"]),
        ]);
        let suffix = prompt_suffix(&sel).unwrap();
        assert_eq!(
            suffix,
            "The photo is taken in a, b. This emotion in this photo is p."
        );
    }

    #[test]
    fn bundled_corpora_have_published_cardinalities() {
        for kind in CorpusKind::ALL {
            let corpus = Corpus::bundled(kind);
            assert_eq!(
                corpus.vocabs.len(),
                kind.bundled_size(),
                "{}",
                kind.as_str()
            );
            assert!(corpus.size_warning().is_none());
        }
        assert!(Corpus::bundled(CorpusKind::SceneCategory)
            .vocabs
            .contains(&"office".to_string()));
        assert!(Corpus::bundled(CorpusKind::Emotion)
            .vocabs
            .contains(&"joy".to_string()));
    }

    #[test]
    fn corpus_text_parsing_skips_comments() {
        let corpus =
            Corpus::from_text(CorpusKind::Emotion, "# header\n\njoy\n  trust \n# tail\n").unwrap();
        assert_eq!(corpus.vocabs, vec!["joy", "trust"]);
        assert!(corpus.size_warning().is_some());
    }

    fn planted_provider(
        image: Array1<f64>,
        vocab_embeds: &[(String, Array1<f64>)],
    ) -> MemoryProvider<f64> {
        let mut cfg = EncoderConfig::miniature();
        cfg.joint_dim = image.len();
        let mut mem = MemoryProvider::new(cfg);
        mem.insert_joint_image("img", image).unwrap();
        for (prompt, embed) in vocab_embeds {
            mem.insert_joint_text(prompt, embed.clone()).unwrap();
        }
        mem
    }

    #[test]
    fn planted_identical_vector_ranks_first_with_score_one() {
        let image = Array1::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let vocabs = ["alpha", "beta", "gamma"];
        let mut embeds = Vec::new();
        for (i, v) in vocabs.iter().enumerate() {
            let prompt = render_vocab_prompt(CorpusKind::Emotion, v).unwrap();
            let mut e = Array1::zeros(4);
            if i == 1 {
                e[0] = 1.0; // beta == image direction
            } else {
                e[1 + i.min(2)] = 1.0;
            }
            embeds.push((prompt, e));
        }
        let provider = planted_provider(image, &embeds);
        let corpora = CorpusSet::new(vec![Corpus::new(
            CorpusKind::Emotion,
            vocabs.iter().map(|s| s.to_string()).collect(),
            1,
        )
        .unwrap()])
        .unwrap();
        let sel = select_visual_vocabs(&provider, "img", &corpora).unwrap();
        assert_eq!(sel.per_corpus[0].entries[0].vocab, "beta");
        assert!((sel.per_corpus[0].entries[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_orthogonal_ties_keep_corpus_order() {
        let mut image = Array1::zeros(8);
        image[0] = 1.0;
        let vocabs = ["v1", "v2", "v3", "v4"];
        let mut embeds = Vec::new();
        for (i, v) in vocabs.iter().enumerate() {
            let prompt = render_vocab_prompt(CorpusKind::SceneCategory, v).unwrap();
            let mut e = Array1::zeros(8);
            e[i + 1] = 1.0;
            embeds.push((prompt, e));
        }
        let provider = planted_provider(image, &embeds);
        let corpora = CorpusSet::new(vec![Corpus::new(
            CorpusKind::SceneCategory,
            vocabs.iter().map(|s| s.to_string()).collect(),
            3,
        )
        .unwrap()])
        .unwrap();
        let sel = select_visual_vocabs(&provider, "img", &corpora).unwrap();
        let picked: Vec<&str> = sel.per_corpus[0]
            .entries
            .iter()
            .map(|e| e.vocab.as_str())
            .collect();
        assert_eq!(picked, vec!["v1", "v2", "v3"]);
    }

    #[test]
    fn selection_matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dim = 6;
        let vocabs: Vec<String> = (0..10).map(|i| format!("word{i}")).collect();
        let image = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0f64));
        let mut embeds = Vec::new();
        let mut oracle: Vec<(String, f64)> = Vec::new();
        let unit = |v: &Array1<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v / n
        };
        let image_u = unit(&image);
        for v in &vocabs {
            let prompt = render_vocab_prompt(CorpusKind::ObjectCategory, v).unwrap();
            let e = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0f64));
            let score = image_u.dot(&unit(&e));
            oracle.push((v.clone(), score));
            embeds.push((prompt, e));
        }
        // Independent oracle: full sort of all scores, then prefix.
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
        let provider = planted_provider(image, &embeds);
        let corpora = CorpusSet::new(vec![
            Corpus::new(CorpusKind::ObjectCategory, vocabs, 5).unwrap()
        ])
        .unwrap();
        let sel = select_visual_vocabs(&provider, "img", &corpora).unwrap();
        for (picked, (expect_vocab, expect_score)) in
            sel.per_corpus[0].entries.iter().zip(oracle.iter().take(5))
        {
            assert_eq!(&picked.vocab, expect_vocab);
            assert!((picked.score - expect_score).abs() < 1e-12);
        }
        for pair in sel.per_corpus[0].entries.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn assembly_is_injective_in_selection_and_class() {
        let base = selection_from(&[
            (CorpusKind::SceneCategory, 2, &["park", "beach"]),
            (CorpusKind::Emotion, 1, &["joy"]),
        ]);
        let tax = RelationTaxonomy::new("toy", vec!["friend".into(), "family".into()]).unwrap();
        let prompts = assemble_social_prompts(&base, &tax).unwrap();
        assert_ne!(prompts[0].text, prompts[1].text, "classes must differ");

        let mut changed = base.clone();
        changed.per_corpus[1].entries[0].vocab = "trust".into();
        let prompts2 = assemble_social_prompts(&changed, &tax).unwrap();
        for (a, b) in prompts.iter().zip(prompts2.iter()) {
            assert_ne!(
                a.text, b.text,
                "selection change must reach every candidate"
            );
        }
    }

    #[test]
    fn selection_cache_returns_same_arc() {
        let image = Array1::from_vec(vec![1.0, 0.0]);
        let prompt = render_vocab_prompt(CorpusKind::Emotion, "joy").unwrap();
        let provider = planted_provider(image, &[(prompt, Array1::from_vec(vec![0.5, 0.5]))]);
        let corpora = CorpusSet::new(vec![Corpus::new(
            CorpusKind::Emotion,
            vec!["joy".into()],
            1,
        )
        .unwrap()])
        .unwrap();
        let cache = SelectionCache::new(&corpora);
        let a = cache.get_or_select(&provider, "img", &corpora).unwrap();
        let b = cache.get_or_select(&provider, "img", &corpora).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
