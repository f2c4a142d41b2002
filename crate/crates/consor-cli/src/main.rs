//! Pipeline driver: toy data, fixture building, vocab selection, prompt
//! assembly, training, evaluation, gradient checks, and reports.
//!
//! Every command reads one JSON config (`--config`), applies flag
//! overrides, writes its outputs under `--out`, and drops a run manifest
//! (config hash, seeds, version) sufficient to re-execute it. Outputs
//! carry no timestamps: identical inputs produce identical bytes.
//!
//! Failures print one machine-parsable JSON line to stderr; usage and
//! configuration problems exit 2, runtime failures exit 1.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::{Precision, ProviderKind, RunConfig};
use consor::cir::{AttentionExport, AttnTrace};
use consor::dataset::{load_annotations, Dataset};
use consor::encoder::{
    pack_from_text, pack_from_visual, text_fixture_stem, FeatureProvider, FixtureProvider,
    SyntheticProvider,
};
use consor::error::Error;
use consor::eval::{
    build_report, evaluate_model, evaluate_zeroshot, read_score_csv, write_score_csv,
};
use consor::featurepack::{write_feature_pack, FeaturePack};
use consor::model::Model;
use consor::msat::FusionSchedule;
use consor::prompts::{
    assemble_social_prompts, class_sentence, render_vocab_prompt, select_visual_vocabs,
};
use consor::scalar::Scalar;
use consor::taxonomy::builtin_taxonomy;
use consor::toy::{generate_toy_dataset, ToySpec};
use consor::train::{
    build_case, grad_check, load_checkpoint, save_checkpoint, GradCheckOptions, Trainer,
};

#[derive(Parser)]
#[command(
    name = "consor",
    version,
    about = "Social relation recognition pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `paths.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override: training seed and synthetic-provider seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Feature source override.
    #[arg(long, value_parser = ["fixture", "synthetic"])]
    provider: Option<String>,
    /// Branch sharing override.
    #[arg(long, value_parser = ["shared", "dual", "visual", "text", "none"])]
    sharing: Option<String>,
    /// Frozen-encoder fusion layers, comma separated (e.g. "0,3,6,9,12").
    #[arg(long)]
    fusion_layers: Option<String>,
    /// Enabled corpus kinds, comma separated.
    #[arg(long)]
    corpora_subset: Option<String>,
    /// Builtin taxonomy override.
    #[arg(long)]
    taxonomy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy dataset with feature fixtures.
    GenToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        persons: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
    },
    /// Materialize synthetic-provider features as fixture files.
    BuildFixtures {
        #[command(flatten)]
        common: Common,
    },
    /// Rank corpus vocabs per image and write the selection report.
    SelectVocabs {
        #[command(flatten)]
        common: Common,
    },
    /// Assemble candidate social prompts per image.
    BuildPrompts {
        #[command(flatten)]
        common: Common,
    },
    /// Train the adapter, reasoning, and head parameters.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or run zero-shot) and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "standard", value_parser = ["standard", "zeroshot"])]
        mode: String,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export cross-attention maps for one pair.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: String,
        /// Pair as "i,j".
        #[arg(long)]
        pair: String,
    },
    /// Recompute metrics from a score-table CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "standard")]
        mode: String,
    },
}

struct Failure {
    category: &'static str,
    message: String,
    exit: i32,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            category: "config",
            message: message.into(),
            exit: 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let category = e.category();
        let exit = match category {
            "config" | "parse" => 2,
            _ => 1,
        };
        Failure {
            category,
            message: e.to_string(),
            exit,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy {
            common,
            images,
            persons,
            classes,
            separation,
        } => cmd_gen_toy(common, images, persons, classes, separation),
        Command::BuildFixtures { common } => cmd_build_fixtures(common),
        Command::SelectVocabs { common } => cmd_select_vocabs(common),
        Command::BuildPrompts { common } => cmd_build_prompts(common),
        Command::Train { common } => cmd_train(common),
        Command::Eval {
            common,
            checkpoint,
            mode,
        } => cmd_eval(common, checkpoint, &mode),
        Command::GradCheck {
            common,
            coords,
            step,
            tol,
        } => cmd_grad_check(common, coords, step, tol),
        Command::ExportAttn {
            common,
            checkpoint,
            image,
            pair,
        } => cmd_export_attn(common, checkpoint, &image, &pair),
        Command::Report {
            common,
            scores,
            mode,
        } => cmd_report(common, &scores, &mode),
    };
    if let Err(failure) = result {
        eprintln!(
            "{}",
            serde_json::json!({"error": failure.category, "message": failure.message})
        );
        std::process::exit(failure.exit);
    }
}

/// Loads the config (or defaults) and applies flag overrides.
fn effective_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.paths.output = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.provider_seed = seed;
    }
    if let Some(provider) = &common.provider {
        cfg.provider = match provider.as_str() {
            "fixture" => ProviderKind::Fixture,
            _ => ProviderKind::Synthetic,
        };
    }
    if let Some(sharing) = &common.sharing {
        cfg.model.sharing = sharing.parse()?;
    }
    if let Some(layers) = &common.fusion_layers {
        let parsed: Result<Vec<usize>, _> = layers
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect();
        let layers = parsed.map_err(|e| Failure::config(format!("--fusion-layers: {e}")))?;
        cfg.model.fusion = Some(FusionSchedule::from_clip_layers(
            &layers,
            cfg.model.encoder.n_layers,
            cfg.model.adapter_layers,
        )?);
    }
    if let Some(subset) = &common.corpora_subset {
        cfg.corpora_subset = Some(subset.split(',').map(|s| s.trim().to_string()).collect());
    }
    if let Some(taxonomy) = &common.taxonomy {
        cfg.taxonomy = Some(taxonomy.clone());
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let mut dataset = load_annotations(&cfg.paths.data)?;
    if let Some(name) = &cfg.taxonomy {
        dataset.taxonomy = builtin_taxonomy(name)?;
        let report = consor::dataset::validate_dataset(&dataset);
        if !report.is_empty() {
            return Err(Error::InvalidDataset(report).into());
        }
    }
    Ok(dataset)
}

fn make_provider<F: Scalar>(cfg: &RunConfig) -> Result<Box<dyn FeatureProvider<F>>, Failure> {
    Ok(match cfg.provider {
        ProviderKind::Fixture => Box::new(FixtureProvider::<F>::new(
            cfg.paths.fixtures.clone(),
            cfg.model.encoder.clone(),
        )?),
        ProviderKind::Synthetic => Box::new(SyntheticProvider::<F>::new(
            cfg.provider_seed,
            cfg.model.encoder.clone(),
        )?),
    })
}

fn ensure_out(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&cfg.paths.output)
        .map_err(|e| Failure::config(format!("cannot create output dir: {e}")))?;
    Ok(cfg.paths.output.clone())
}

fn write_manifest(cfg: &RunConfig, out: &Path, command: &str) -> CmdResult {
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg,
        "train_seed": cfg.train.seed,
        "provider_seed": cfg.provider_seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(|e| Failure::from(Error::from(e)))?;
    Ok(())
}

fn cmd_gen_toy(
    common: Common,
    images: usize,
    persons: usize,
    classes: usize,
    separation: f64,
) -> CmdResult {
    let mut cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    let spec = ToySpec {
        n_images: images,
        persons_per_image: persons,
        n_classes: classes,
        seed: common.seed.unwrap_or(cfg.train.seed),
        encoder: consor::encoder::EncoderConfig::miniature(),
        class_separation: separation,
    };
    let bundle = generate_toy_dataset::<f32>(&spec)?;
    bundle.write_to(&out)?;

    // A ready-to-run config wired to the generated tree; paths are
    // relative to the config file, so the tree is relocatable and its
    // bytes do not depend on where it was generated.
    cfg.paths.data = PathBuf::from("annotations.json");
    cfg.paths.fixtures = PathBuf::from("fixtures");
    cfg.paths.corpora = Some(PathBuf::from("corpora"));
    cfg.paths.output = PathBuf::from("run");
    cfg.provider = ProviderKind::Fixture;
    cfg.model = consor::model::ModelConfig {
        encoder: spec.encoder.clone(),
        dim: 48,
        heads: 6,
        adapter_layers: 4,
        logit_scale: 12.0,
        ..consor::model::ModelConfig::default()
    };
    std::fs::write(
        out.join("run_config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )
    .map_err(|e| Failure::from(Error::from(e)))?;
    write_manifest(&cfg, &out, "gen-toy")?;
    println!(
        "{}",
        serde_json::json!({
            "event": "gen-toy",
            "images": images,
            "samples": bundle.dataset.samples.len(),
            "classes": classes,
            "out": out,
        })
    );
    Ok(())
}

/// Candidate prompt texts of one image: every ranking prompt is already
/// coverable by the synthetic provider; this enumerates the assembled
/// candidates plus class sentences for zero-shot use.
fn candidate_texts<F: Scalar>(
    provider: &dyn FeatureProvider<F>,
    dataset: &Dataset,
    corpora: &consor::prompts::CorpusSet,
    image_id: &str,
) -> Result<Vec<String>, Failure> {
    let sel = select_visual_vocabs(provider, image_id, corpora)?;
    let prompts = assemble_social_prompts(&sel, &dataset.taxonomy)?;
    Ok(prompts.into_iter().map(|p| p.text).collect())
}

fn cmd_build_fixtures(common: Common) -> CmdResult {
    let cfg = effective_config(&common)?;
    let dataset = load_dataset(&cfg)?;
    let corpora = cfg.corpora()?;
    let provider = SyntheticProvider::<f32>::new(cfg.provider_seed, cfg.model.encoder.clone())?;
    let fixtures = cfg.paths.fixtures.clone();
    std::fs::create_dir_all(fixtures.join("text")).map_err(Error::from)?;

    let text_pack = |text: &str, full: bool| -> Result<(), Failure> {
        let joint = provider.joint_text(text)?;
        let path = fixtures
            .join("text")
            .join(format!("{}.fpk", text_fixture_stem(text)));
        if full {
            let tf = provider.text(text)?;
            write_feature_pack(&pack_from_text(text, &tf, &joint)?, &path)?;
        } else {
            let mut pack = FeaturePack::new(text_fixture_stem(text));
            pack.insert_f32("joint", vec![joint.len()], joint.iter().copied().collect())?;
            pack.meta.insert("text".into(), serde_json::json!(text));
            write_feature_pack(&pack, &path)?;
        }
        Ok(())
    };

    for corpus in &corpora.corpora {
        for vocab in &corpus.vocabs {
            text_pack(&render_vocab_prompt(corpus.kind, vocab)?, false)?;
        }
    }
    for class in &dataset.taxonomy.classes {
        text_pack(&class_sentence(class), false)?;
    }
    for image in &dataset.images {
        let vf = provider.visual(&image.image_id)?;
        let joint = provider.joint_image(&image.image_id)?;
        write_feature_pack(
            &pack_from_visual(&image.image_id, &vf, &joint)?,
            &fixtures.join(format!("{}.fpk", image.image_id)),
        )?;
        for text in candidate_texts(&provider, &dataset, &corpora, &image.image_id)? {
            text_pack(&text, true)?;
        }
    }
    let out = ensure_out(&cfg)?;
    write_manifest(&cfg, &out, "build-fixtures")?;
    println!(
        "{}",
        serde_json::json!({"event": "build-fixtures", "images": dataset.images.len(), "fixtures": fixtures})
    );
    Ok(())
}

fn cmd_select_vocabs(common: Common) -> CmdResult {
    let cfg = effective_config(&common)?;
    let dataset = load_dataset(&cfg)?;
    let corpora = cfg.corpora()?;
    for corpus in &corpora.corpora {
        if let Some(warning) = corpus.size_warning() {
            eprintln!("{}", serde_json::json!({"warning": warning}));
        }
    }
    let provider = make_provider::<f32>(&cfg)?;
    let out = ensure_out(&cfg)?;
    let selections = dataset
        .images
        .iter()
        .map(|img| select_visual_vocabs(provider.as_ref(), &img.image_id, &corpora))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::write(
        out.join("vocab_selections.json"),
        serde_json::to_string_pretty(&selections).expect("selections serialize") + "\n",
    )
    .map_err(Error::from)?;
    write_manifest(&cfg, &out, "select-vocabs")?;
    println!(
        "{}",
        serde_json::json!({"event": "select-vocabs", "images": selections.len()})
    );
    Ok(())
}

fn cmd_build_prompts(common: Common) -> CmdResult {
    let cfg = effective_config(&common)?;
    let dataset = load_dataset(&cfg)?;
    let corpora = cfg.corpora()?;
    let provider = make_provider::<f32>(&cfg)?;
    let out = ensure_out(&cfg)?;
    let prompt_dir = out.join("prompts");
    std::fs::create_dir_all(&prompt_dir).map_err(Error::from)?;

    let mut all = serde_json::Map::new();
    for image in &dataset.images {
        let sel = select_visual_vocabs(provider.as_ref(), &image.image_id, &corpora)?;
        let prompts = assemble_social_prompts(&sel, &dataset.taxonomy)?;
        let body: String = prompts.iter().map(|p| format!("{}\n", p.text)).collect();
        std::fs::write(prompt_dir.join(format!("{}.txt", image.image_id)), body)
            .map_err(Error::from)?;
        all.insert(
            image.image_id.clone(),
            serde_json::to_value(&prompts).expect("prompts serialize"),
        );
    }
    std::fs::write(
        out.join("prompts.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(all)).expect("serialize") + "\n",
    )
    .map_err(Error::from)?;
    write_manifest(&cfg, &out, "build-prompts")?;
    println!(
        "{}",
        serde_json::json!({"event": "build-prompts", "images": dataset.images.len()})
    );
    Ok(())
}

fn run_train<F: Scalar>(cfg: &RunConfig, out: &Path) -> CmdResult {
    let dataset = load_dataset(cfg)?;
    let corpora = cfg.corpora()?;
    let provider = make_provider::<F>(cfg)?;
    let mut model = Model::<F>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(
        &mut model,
        provider.as_ref(),
        &dataset,
        &corpora,
        cfg.train.clone(),
    )?;

    let mut log_lines = String::new();
    let train_log = trainer.train(|record| {
        let line = serde_json::json!({
            "event": "step",
            "step": record.step,
            "epoch": record.epoch,
            "loss": record.loss,
            "lr": record.lr,
        });
        println!("{line}");
        log_lines.push_str(&line.to_string());
        log_lines.push('\n');
    })?;

    let epochs = cfg.train.epochs;
    let steps = train_log.steps.len();
    save_checkpoint(
        trainer.model,
        &trainer.opt,
        epochs,
        steps,
        &out.join("checkpoint.fpk"),
    )?;
    std::fs::write(out.join("train_log.jsonl"), log_lines).map_err(Error::from)?;
    write_manifest(cfg, out, "train")?;
    println!(
        "{}",
        serde_json::json!({
            "event": "done",
            "steps": steps,
            "final_loss": train_log.final_loss(),
            "checkpoint": out.join("checkpoint.fpk"),
        })
    );
    Ok(())
}

fn cmd_train(common: Common) -> CmdResult {
    let cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &out),
        Precision::F64 => run_train::<f64>(&cfg, &out),
    }
}

fn run_eval<F: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    mode: &str,
) -> CmdResult {
    let dataset = load_dataset(cfg)?;
    let provider = make_provider::<F>(cfg)?;
    let (table, report) = if mode == "zeroshot" {
        evaluate_zeroshot(provider.as_ref(), &dataset)?
    } else {
        let corpora = cfg.corpora()?;
        let model = match checkpoint {
            Some(path) => load_checkpoint::<F>(path)?.model,
            None => {
                return Err(Failure::config(
                    "standard evaluation requires --checkpoint (use --mode zeroshot otherwise)",
                ))
            }
        };
        evaluate_model(&model, provider.as_ref(), &dataset, &corpora)?
    };
    write_score_csv(&table, &out.join("scores.csv"))?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(Error::from)?;
    write_manifest(cfg, out, "eval")?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: Option<PathBuf>, mode: &str) -> CmdResult {
    let cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&cfg, &out, checkpoint.as_deref(), mode),
        Precision::F64 => run_eval::<f64>(&cfg, &out, checkpoint.as_deref(), mode),
    }
}

fn cmd_grad_check(common: Common, coords: usize, step: f64, tol: f64) -> CmdResult {
    let cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    let dataset = load_dataset(&cfg)?;
    let corpora = cfg.corpora()?;
    // Gradient verification always runs in double precision.
    let provider = make_provider::<f64>(&cfg)?;
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let case = build_case(provider.as_ref(), &dataset, &corpora, 0)?;
    let report = grad_check(
        &mut model,
        &case,
        &GradCheckOptions {
            n_coords: coords,
            step,
            tol,
            seed: cfg.train.seed,
        },
    )?;
    std::fs::write(
        out.join("grad_check.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(Error::from)?;
    write_manifest(&cfg, &out, "grad-check")?;
    println!(
        "{}",
        serde_json::json!({
            "event": "grad-check",
            "checked": report.checked,
            "max_rel_err": report.max_rel_err,
            "passed": report.passed,
        })
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            category: "numeric",
            message: format!("gradient check failed: max rel err {}", report.max_rel_err),
            exit: 1,
        })
    }
}

fn cmd_export_attn(
    common: Common,
    checkpoint: Option<PathBuf>,
    image_id: &str,
    pair: &str,
) -> CmdResult {
    let cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    let dataset = load_dataset(&cfg)?;
    let provider = make_provider::<f32>(&cfg)?;
    let model = match checkpoint {
        Some(path) => load_checkpoint::<f32>(&path)?.model,
        None => Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
    };

    let (i, j) = pair
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| Failure::config(format!("--pair must be \"i,j\", got `{pair}`")))?;
    let image = dataset
        .image(image_id)
        .ok_or_else(|| Failure::config(format!("image `{image_id}` not in dataset")))?;

    let vf = provider.visual(image_id)?;
    let mut trace = AttnTrace::default();
    let mut tape = consor::tape::Tape::new();
    model.pair_feature(&mut tape, &vf, &image.persons, i, j, Some(&mut trace))?;
    let export = AttentionExport::from_trace(image_id, (i, j), cfg.model.encoder.grid, &trace)?;
    let path = out.join(format!("attention_{image_id}_{i}-{j}.json"));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&export).expect("export serializes") + "\n",
    )
    .map_err(Error::from)?;
    write_manifest(&cfg, &out, "export-attn")?;
    println!(
        "{}",
        serde_json::json!({"event": "export-attn", "layers": export.layers.len(), "path": path})
    );
    Ok(())
}

fn cmd_report(common: Common, scores: &Path, mode: &str) -> CmdResult {
    let cfg = effective_config(&common)?;
    let out = ensure_out(&cfg)?;
    let table = read_score_csv(scores)?;
    let taxonomy = cfg.taxonomy.as_deref().unwrap_or("unknown");
    let report = build_report(&table, taxonomy, mode)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(Error::from)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}
