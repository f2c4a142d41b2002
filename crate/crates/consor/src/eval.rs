//! Evaluation: per-class recall, classification-style mean average
//! precision, top-1 accuracy, report emission, and the zero-shot mode.
//!
//! Tie-breaking is pinned for reproducibility: rankings are stable with
//! ascending `sample_id` on equal scores, and argmax resolves toward the
//! lower class index.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{validate_dataset, Dataset};
use crate::encoder::FeatureProvider;
use crate::error::{Error, Result};
use crate::head;
use crate::model::Model;
use crate::prompts::{assemble_social_prompts, class_sentence, CorpusSet, SelectionCache};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// One scored sample: post-softmax probabilities over the label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub label: usize,
    pub scores: Vec<f64>,
}

/// All scored samples of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n_classes: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(n_classes: usize, rows: Vec<ScoreRow>) -> Result<Self> {
        for row in &rows {
            if row.scores.len() != n_classes {
                return Err(Error::Shape(format!(
                    "row `{}` has {} scores, expected {n_classes}",
                    row.sample_id,
                    row.scores.len()
                )));
            }
            if row.label >= n_classes {
                return Err(Error::Precondition(format!(
                    "row `{}` label {} out of range",
                    row.sample_id, row.label
                )));
            }
            let sum: f64 = row.scores.iter().sum();
            if (sum - 1.0).abs() > 1e-5 || row.scores.iter().any(|s| *s < 0.0 || !s.is_finite()) {
                return Err(Error::Numeric(format!(
                    "row `{}` scores are not a probability vector (sum {sum})",
                    row.sample_id
                )));
            }
        }
        Ok(ScoreTable { n_classes, rows })
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Precondition("empty score table".into()));
        }
        Ok(())
    }
}

/// Lowest index wins ties.
pub fn argmax_low(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Top-1 recall per class; `None` for classes with no ground-truth rows.
pub fn per_class_recall(table: &ScoreTable) -> Result<Vec<Option<f64>>> {
    table.ensure_nonempty()?;
    let mut correct = vec![0usize; table.n_classes];
    let mut count = vec![0usize; table.n_classes];
    for row in &table.rows {
        count[row.label] += 1;
        if argmax_low(&row.scores) == row.label {
            correct[row.label] += 1;
        }
    }
    Ok((0..table.n_classes)
        .map(|c| (count[c] > 0).then(|| correct[c] as f64 / count[c] as f64))
        .collect())
}

/// Classification-style average precision per class and their mean.
///
/// Per class, rows are ranked by that class's score (descending, stable
/// by ascending sample id); AP is the mean of precision-at-rank over the
/// positive rows. Classes without positives are excluded from the mean.
pub fn mean_average_precision(table: &ScoreTable) -> Result<(Vec<Option<f64>>, f64)> {
    table.ensure_nonempty()?;
    let mut per_class = Vec::with_capacity(table.n_classes);
    for c in 0..table.n_classes {
        let mut order: Vec<&ScoreRow> = table.rows.iter().collect();
        order.sort_by(|a, b| {
            b.scores[c]
                .total_cmp(&a.scores[c])
                .then_with(|| a.sample_id.cmp(&b.sample_id))
        });
        let mut positives_seen = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, row) in order.iter().enumerate() {
            if row.label == c {
                positives_seen += 1;
                precision_sum += positives_seen as f64 / (rank0 + 1) as f64;
            }
        }
        per_class.push((positives_seen > 0).then(|| precision_sum / positives_seen as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Precondition("no class has positive rows".into()));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, map))
}

pub fn top1_accuracy(table: &ScoreTable) -> Result<f64> {
    table.ensure_nonempty()?;
    let correct = table
        .rows
        .iter()
        .filter(|row| argmax_low(&row.scores) == row.label)
        .count();
    Ok(correct as f64 / table.rows.len() as f64)
}

/// Full metric bundle of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub taxonomy: String,
    pub mode: String,
    pub n_samples: usize,
    pub per_class_recall: Vec<Option<f64>>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub acc1: f64,
}

pub fn build_report(table: &ScoreTable, taxonomy: &str, mode: &str) -> Result<MetricsReport> {
    let (per_class_ap, map) = mean_average_precision(table)?;
    Ok(MetricsReport {
        taxonomy: taxonomy.to_string(),
        mode: mode.to_string(),
        n_samples: table.rows.len(),
        per_class_recall: per_class_recall(table)?,
        per_class_ap,
        map,
        acc1: top1_accuracy(table)?,
    })
}

/// Trained-model evaluation over all dataset samples.
pub fn evaluate_model<F: Scalar>(
    model: &Model<F>,
    provider: &dyn FeatureProvider<F>,
    dataset: &Dataset,
    corpora: &CorpusSet,
) -> Result<(ScoreTable, MetricsReport)> {
    let report = validate_dataset(dataset);
    if !report.is_empty() {
        return Err(Error::InvalidDataset(report));
    }
    check_fixture_completeness(provider, dataset)?;

    let n_classes = dataset.taxonomy.len();
    let selection = SelectionCache::new(corpora);
    let image_index: HashMap<&str, usize> = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.as_str(), i))
        .collect();

    let mut rows: Vec<Option<ScoreRow>> = vec![None; dataset.samples.len()];
    for image_id in dataset.sampled_image_ids() {
        let sel = selection.get_or_select(provider, image_id, corpora)?;
        let prompts = assemble_social_prompts(&sel, &dataset.taxonomy)?;
        let prompt_feats = prompts
            .iter()
            .map(|p| provider.text(&p.text))
            .collect::<Result<Vec<_>>>()?;
        let vf = provider.visual(image_id)?;
        let image = &dataset.images[image_index[image_id]];

        let mut tape = Tape::new();
        let prompt_vars = model.prompt_embeddings(&mut tape, &prompt_feats)?;
        let v_sn = model.msat.visual_forward(
            &mut tape,
            &model.store,
            &crate::msat::VisualInput::from(&*vf),
        )?;

        for (idx, sample) in dataset.samples.iter().enumerate() {
            if sample.image_id != image_id {
                continue;
            }
            let pair = model.cir.pair_feature(
                &mut tape,
                &model.store,
                v_sn,
                &image.persons,
                sample.i,
                sample.j,
                &vf.cls,
                None,
            )?;
            let logits = head::classify_logits(
                &mut tape,
                pair,
                &prompt_vars,
                F::from_f64c(model.config.logit_scale),
            )?;
            let z = tape.value(logits).row(0).mapv(|x| x.to_f64c()).to_vec();
            let probs = softmax_f64(&z);
            rows[idx] = Some(ScoreRow {
                sample_id: format!("s{idx:05}"),
                label: sample.label,
                scores: probs,
            });
        }
    }

    let rows: Vec<ScoreRow> = rows
        .into_iter()
        .map(|r| r.expect("all samples scored"))
        .collect();
    let table = ScoreTable::new(n_classes, rows)?;
    let report = build_report(&table, &dataset.taxonomy.name, "standard")?;
    Ok((table, report))
}

/// Zero-shot evaluation: cosine of the image joint embedding against the
/// class-sentence joint embeddings; no trained parameters involved.
pub fn evaluate_zeroshot<F: Scalar>(
    provider: &dyn FeatureProvider<F>,
    dataset: &Dataset,
) -> Result<(ScoreTable, MetricsReport)> {
    let report = validate_dataset(dataset);
    if !report.is_empty() {
        return Err(Error::InvalidDataset(report));
    }
    check_fixture_completeness(provider, dataset)?;

    let class_embeds = dataset
        .taxonomy
        .classes
        .iter()
        .map(|c| provider.joint_text(&class_sentence(c)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(dataset.samples.len());
    let mut image_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for (idx, sample) in dataset.samples.iter().enumerate() {
        if !image_cache.contains_key(sample.image_id.as_str()) {
            let image = provider.joint_image(&sample.image_id)?;
            let scores: Vec<f64> = class_embeds
                .iter()
                .map(|class_embed| {
                    let dot: F = image
                        .iter()
                        .zip(class_embed.iter())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dot.to_f64c()
                })
                .collect();
            image_cache.insert(&sample.image_id, scores);
        }
        let cosines = &image_cache[sample.image_id.as_str()];
        rows.push(ScoreRow {
            sample_id: format!("s{idx:05}"),
            label: sample.label,
            scores: softmax_f64(cosines),
        });
    }
    let table = ScoreTable::new(dataset.taxonomy.len(), rows)?;
    let report = build_report(&table, &dataset.taxonomy.name, "zeroshot")?;
    Ok((table, report))
}

/// Errors with the full list of sampled images whose fixtures are absent.
fn check_fixture_completeness<F: Scalar>(
    provider: &dyn FeatureProvider<F>,
    dataset: &Dataset,
) -> Result<()> {
    let mut missing = Vec::new();
    for id in dataset.sampled_image_ids() {
        match provider.visual(id) {
            Err(Error::MissingFixture { ids }) => missing.extend(ids),
            Err(other) => return Err(other),
            Ok(_) => {}
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFixture { ids: missing })
    }
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

// --- score table persistence ---------------------------------------------------

/// Writes `sample_id,label,score_0..score_{C-1}` CSV.
pub fn write_score_csv(table: &ScoreTable, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,label");
    for c in 0..table.n_classes {
        out.push_str(&format!(",score_{c}"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.sample_id);
        out.push_str(&format!(",{}", row.label));
        for s in &row.scores {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Corrupt("empty score CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
        return Err(Error::Corrupt(format!("bad score CSV header: {header}")));
    }
    let n_classes = cols.len() - 2;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != cols.len() {
            return Err(Error::Parse {
                line: lineno + 2,
                column: 1,
                message: format!("expected {} fields, got {}", cols.len(), parts.len()),
            });
        }
        let label: usize = parts[1].parse().map_err(|e| Error::Parse {
            line: lineno + 2,
            column: 2,
            message: format!("label: {e}"),
        })?;
        let scores = parts[2..]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 2,
                    column: i + 3,
                    message: format!("score: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(ScoreRow {
            sample_id: parts[0].to_string(),
            label,
            scores,
        });
    }
    ScoreTable::new(n_classes, rows)
}
