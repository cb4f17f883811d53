//! End-to-end synthesis orchestration: crop, expand, condition, sample,
//! filter, record. Manifests are line-delimited records written in region
//! order, and runs resume by skipping already-completed
//! (region, permutation) pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::anagram::{expand_anagrams, expand_equal_length, identity_plan, ExpansionMode, ExpansionPlan};
use crate::conditioning::{
    build_cond_pack, flatten_char_positions, zero_char_stack, CondConfig, CondPack,
};
use crate::diffusion::{
    make_schedule, prepare_train_item, sample, train_cdm, CdmTrainSettings, Denoiser,
    DenoiserConfig, NoiseSchedule, SampleSettings, TrainItem,
};
use crate::error::{Error, Result};
use crate::font::Font;
use crate::geometry::{paste_back, Quad, SceneImage};
use crate::image::ImageBuf;
use crate::latent_codec::{train_codec, CodecConfig, LatentCodec, TrainSettings};
use crate::metrics::{filter_sample, FilterDecision, MatchPolicy, Recognizer};
use crate::nn::ParamStore;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.beta_start, self.beta_end)
    }
}

/// All module settings plus run-level policy. The TOML snapshot written to
/// the output directory is this structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub cond: CondConfig,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub sample_steps: usize,
    /// Variants per region.
    pub expand: usize,
    pub mode: ExpansionMode,
    /// Charset for the equal-length mode.
    pub el_charset: String,
    /// When false, the character stack is zeroed (char-glyph ablation).
    pub char_glyph: bool,
    /// When set, all character intensities flatten to this value
    /// (char-position ablation).
    pub char_position_flat: Option<f32>,
    pub match_policy: MatchPolicy,
    pub seed: u64,
    /// Rayon worker count; 0 uses the default.
    pub workers: usize,
    /// Also write full scenes with the generated crop pasted back.
    pub paste_back_scenes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cond: CondConfig::default(),
            codec: CodecConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            sample_steps: 20,
            expand: 1,
            mode: ExpansionMode::Anagram,
            el_charset: "abcdefghijklmnopqrstuvwxyz".into(),
            char_glyph: true,
            char_position_flat: None,
            match_policy: MatchPolicy::default(),
            seed: 0,
            workers: 0,
            paste_back_scenes: false,
        }
    }
}

impl RunConfig {
    /// Cross-module consistency: one S, f, C, L, T everywhere.
    pub fn validate(&self) -> Result<()> {
        self.cond.chars.validate()?;
        self.codec.validate()?;
        self.denoiser.validate()?;
        if self.cond.crop.target_size != self.codec.size {
            return Err(Error::Config(format!(
                "crop target {} != codec size {}",
                self.cond.crop.target_size, self.codec.size
            )));
        }
        if self.codec.latent_side() != self.denoiser.latent_side {
            return Err(Error::Config(format!(
                "codec latent side {} != denoiser side {}",
                self.codec.latent_side(),
                self.denoiser.latent_side
            )));
        }
        if self.codec.latent_channels != self.denoiser.latent_channels {
            return Err(Error::Config("latent channel mismatch".into()));
        }
        if self.denoiser.encoder.channels != self.cond.chars.max_chars {
            return Err(Error::Config(format!(
                "encoder channels {} != max chars {}",
                self.denoiser.encoder.channels, self.cond.chars.max_chars
            )));
        }
        if self.denoiser.encoder.tile != self.cond.chars.tile {
            return Err(Error::Config(format!(
                "encoder tile {} != char tile {}",
                self.denoiser.encoder.tile, self.cond.chars.tile
            )));
        }
        if self.expand == 0 {
            return Err(Error::Config("expand must be at least 1".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.schedule.t_train {
            return Err(Error::Config("sample_steps outside schedule".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub condition_ms: f64,
    pub sample_ms: f64,
    pub filter_ms: f64,
}

/// One synthesized instance with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub out_image: String,
    pub label: String,
    pub source_image: String,
    pub region_id: String,
    pub permutation_index: usize,
    pub mode: ExpansionMode,
    pub kept: bool,
    pub discard_reason: Option<String>,
    pub recognizer_text: String,
    pub recognizer_id: String,
    pub confidence: f64,
    pub timings: Timings,
}

/// Loaded models plus shared resources for a run.
pub struct PipelineEnv {
    pub font: Font,
    pub codec: LatentCodec,
    pub codec_store: ParamStore,
    pub denoiser: Denoiser,
    pub denoiser_store: ParamStore,
    pub schedule: NoiseSchedule,
}

pub fn append_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Input(format!("record encode: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a manifest, skipping a torn trailing line from an interrupted run.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(line) {
            Ok(rec) => records.push(rec),
            Err(e) if i + 1 == lines.len() => {
                // Torn tail is expected after a kill; anything else is real.
                let _ = e;
            }
            Err(e) => return Err(Error::Input(format!("manifest line {}: {e}", i + 1))),
        }
    }
    Ok(records)
}

struct RegionTask {
    scene_idx: usize,
    inst_idx: usize,
    region_id: String,
}

fn expansion_for(cfg: &RunConfig, label: &str, region_seed: u64) -> Result<ExpansionPlan> {
    Ok(match cfg.mode {
        ExpansionMode::Anagram => expand_anagrams(label, cfg.expand, region_seed),
        ExpansionMode::EqualLength => {
            expand_equal_length(label, &cfg.el_charset, cfg.expand, region_seed)?
        }
        ExpansionMode::Identity => identity_plan(label),
    })
}

fn apply_char_ablations(cfg: &RunConfig, pack: &mut CondPack) {
    if !cfg.char_glyph {
        pack.char_stack = zero_char_stack(&cfg.cond.chars);
    } else if let Some(v) = cfg.char_position_flat {
        pack.char_stack = flatten_char_positions(&pack.char_stack, &cfg.cond.chars, v);
    }
}

fn synthesize_variant(
    cfg: &RunConfig,
    env: &PipelineEnv,
    scene: &SceneImage,
    quad: &Quad,
    variant: &str,
    region_id: &str,
    perm_idx: usize,
    recognizer: &dyn Recognizer,
    out_dir: &Path,
    source_image: &str,
) -> Result<DatasetRecord> {
    let t0 = Instant::now();
    let mut pack = build_cond_pack(
        &scene.image,
        quad,
        variant,
        region_id,
        &cfg.cond,
        &env.font,
    )?;
    apply_char_ablations(cfg, &mut pack);
    let condition_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let sample_seed = derive_seed(derive_seed(cfg.seed, region_id), &format!("v{perm_idx}"));
    let generated = sample(
        &pack,
        &env.codec,
        &env.codec_store,
        &env.denoiser,
        &env.denoiser_store,
        &env.schedule,
        &SampleSettings {
            steps: cfg.sample_steps,
            seed: sample_seed,
        },
    )?;
    let sample_ms = t1.elapsed().as_secs_f64() * 1e3;

    let rel = format!("images/{region_id}_{perm_idx}.png");
    generated.save_png(&out_dir.join(&rel))?;
    if cfg.paste_back_scenes {
        let scene_out = paste_back(&scene.image, &generated, &pack.crop, cfg.cond.kernel)?;
        let scene_rel = format!("scenes/{region_id}_{perm_idx}.png");
        scene_out.save_png(&out_dir.join(scene_rel))?;
    }

    let t2 = Instant::now();
    let decision = filter_sample(
        &generated,
        &pack.label,
        Some(&pack.quad),
        recognizer,
        &cfg.match_policy,
    );
    let filter_ms = t2.elapsed().as_secs_f64() * 1e3;
    let (kept, discard_reason, recognizer_text, confidence) = match &decision {
        FilterDecision::Keep { verdict } => (true, None, verdict.text.clone(), verdict.confidence),
        FilterDecision::Discard { verdict, reason } => (
            false,
            Some(reason.clone()),
            verdict.as_ref().map(|v| v.text.clone()).unwrap_or_default(),
            verdict.as_ref().map(|v| v.confidence).unwrap_or(0.0),
        ),
    };
    Ok(DatasetRecord {
        out_image: rel,
        label: pack.label.clone(),
        source_image: source_image.to_string(),
        region_id: region_id.to_string(),
        permutation_index: perm_idx,
        mode: cfg.mode,
        kept,
        discard_reason,
        recognizer_text,
        recognizer_id: recognizer.id(),
        confidence,
        timings: Timings {
            condition_ms,
            sample_ms,
            filter_ms,
        },
    })
}

fn failure_record(
    cfg: &RunConfig,
    region_id: &str,
    perm_idx: usize,
    label: &str,
    source_image: &str,
    err: &Error,
) -> DatasetRecord {
    DatasetRecord {
        out_image: String::new(),
        label: label.to_string(),
        source_image: source_image.to_string(),
        region_id: region_id.to_string(),
        permutation_index: perm_idx,
        mode: cfg.mode,
        kept: false,
        discard_reason: Some(format!("pipeline error: {err}")),
        recognizer_text: String::new(),
        recognizer_id: String::new(),
        confidence: 0.0,
        timings: Timings {
            condition_ms: 0.0,
            sample_ms: 0.0,
            filter_ms: 0.0,
        },
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest_path: PathBuf,
    pub candidates: usize,
    pub kept: usize,
    pub skipped_resume: usize,
}

/// Runs synthesis over every instance of every scene. Per-instance failures
/// are recorded, never fatal; already-completed (region, permutation) pairs
/// from an existing manifest are skipped.
pub fn run_pipeline(
    cfg: &RunConfig,
    env: &PipelineEnv,
    scenes: &[SceneImage],
    recognizer: &dyn Recognizer,
    out_dir: &Path,
    stop_after_regions: Option<usize>,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    if cfg.paste_back_scenes {
        std::fs::create_dir_all(out_dir.join("scenes"))?;
    }
    let config_snapshot =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("snapshot: {e}")))?;
    std::fs::write(out_dir.join("run_config"), config_snapshot)?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let done: HashSet<(String, usize)> = if manifest_path.exists() {
        read_manifest(&manifest_path)?
            .into_iter()
            .map(|r| (r.region_id, r.permutation_index))
            .collect()
    } else {
        HashSet::new()
    };

    let mut tasks = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        for inst_idx in 0..scene.instances.len() {
            tasks.push(RegionTask {
                scene_idx,
                inst_idx,
                region_id: format!("s{scene_idx:04}r{inst_idx:02}"),
            });
        }
    }
    if let Some(limit) = stop_after_regions {
        tasks.truncate(limit);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut candidates = 0usize;
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for chunk in tasks.chunks(8) {
        let results: Vec<Vec<DatasetRecord>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|task| {
                    let scene = &scenes[task.scene_idx];
                    let inst = &scene.instances[task.inst_idx];
                    let source_image = format!("scene{:04}", task.scene_idx);
                    let region_seed = derive_seed(cfg.seed, &task.region_id);
                    let label = crate::text::normalize_label(&inst.label, false);
                    let plan = match expansion_for(cfg, &label, region_seed) {
                        Ok(p) => p,
                        Err(e) => {
                            return vec![failure_record(
                                cfg,
                                &task.region_id,
                                0,
                                &label,
                                &source_image,
                                &e,
                            )]
                        }
                    };
                    plan.variants
                        .iter()
                        .enumerate()
                        .filter(|(pi, _)| !done.contains(&(task.region_id.clone(), *pi)))
                        .map(|(pi, variant)| {
                            synthesize_variant(
                                cfg,
                                env,
                                scene,
                                &inst.quad,
                                variant,
                                &task.region_id,
                                pi,
                                recognizer,
                                out_dir,
                                &source_image,
                            )
                            .unwrap_or_else(|e| {
                                failure_record(
                                    cfg,
                                    &task.region_id,
                                    pi,
                                    variant,
                                    &source_image,
                                    &e,
                                )
                            })
                        })
                        .collect()
                })
                .collect()
        });
        for region_records in &results {
            append_manifest(&manifest_path, region_records)?;
            for rec in region_records {
                candidates += 1;
                if rec.kept {
                    kept += 1;
                }
            }
        }
    }
    for task in &tasks {
        for pi in 0..cfg.expand {
            if done.contains(&(task.region_id.clone(), pi)) {
                skipped += 1;
            }
        }
    }
    Ok(RunSummary {
        manifest_path,
        candidates,
        kept,
        skipped_resume: skipped,
    })
}

/// Single-region synthesis plus paste-back. Returns the edited scene, the
/// generated crop, and any truncation/substitution warnings.
pub fn edit_once(
    cfg: &RunConfig,
    env: &PipelineEnv,
    image: &ImageBuf,
    quad: &Quad,
    text: &str,
    seed: u64,
) -> Result<(ImageBuf, ImageBuf, Vec<String>)> {
    cfg.validate()?;
    let mut pack = build_cond_pack(image, quad, text, "edit", &cfg.cond, &env.font)?;
    apply_char_ablations(cfg, &mut pack);
    let mut warnings = Vec::new();
    if pack.truncated {
        warnings.push(format!(
            "label truncated to the first {} characters",
            cfg.cond.chars.max_chars
        ));
    }
    for cluster in &pack.substituted {
        warnings.push(format!("no glyph for {cluster:?}; substitution box used"));
    }
    let generated = sample(
        &pack,
        &env.codec,
        &env.codec_store,
        &env.denoiser,
        &env.denoiser_store,
        &env.schedule,
        &SampleSettings {
            steps: cfg.sample_steps,
            seed,
        },
    )?;
    let edited = paste_back(image, &generated, &pack.crop, cfg.cond.kernel)?;
    Ok((edited, generated, warnings))
}

/// Region crops of every instance, for codec training.
pub fn collect_crops(
    scenes: &[SceneImage],
    cond: &CondConfig,
    font: &Font,
) -> Result<Vec<ImageBuf>> {
    let mut crops = Vec::new();
    for scene in scenes {
        for idx in 0..scene.instances.len() {
            match crate::conditioning::assemble_cond_pack(scene, idx, cond, font) {
                Ok(pack) => crops.push(pack.crop_image),
                Err(Error::DegenerateRegion(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if crops.is_empty() {
        return Err(Error::EmptyInput("no usable crops".into()));
    }
    Ok(crops)
}

/// Frozen-codec training items for every instance, with identity labels.
pub fn collect_train_items(
    scenes: &[SceneImage],
    cond: &CondConfig,
    font: &Font,
    codec: &LatentCodec,
    codec_store: &ParamStore,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for scene in scenes {
        for idx in 0..scene.instances.len() {
            match crate::conditioning::assemble_cond_pack(scene, idx, cond, font) {
                Ok(pack) => items.push(prepare_train_item(codec, codec_store, &pack)?),
                Err(Error::DegenerateRegion(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyInput("no usable training items".into()));
    }
    Ok(items)
}

/// Trains both models from scratch on the scenes and assembles a ready
/// environment. Used by the CLI's training subcommands and the tests.
pub fn train_env(
    cfg: &RunConfig,
    scenes: &[SceneImage],
    codec_settings: &TrainSettings,
    cdm_settings: &CdmTrainSettings,
) -> Result<(PipelineEnv, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let font = Font::resolve(&cfg.cond.chars.font_ref)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "codec-init"));
    let mut codec_store = ParamStore::new();
    let codec = LatentCodec::new(cfg.codec.clone(), &mut codec_store, "vae", &mut rng)?;
    let crops = collect_crops(scenes, &cfg.cond, &font)?;
    let codec_trace = train_codec(&codec, &mut codec_store, &crops, codec_settings)?;

    let items = collect_train_items(scenes, &cfg.cond, &font, &codec, &codec_store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cdm-init"));
    let mut denoiser_store = ParamStore::new();
    let denoiser = Denoiser::new(cfg.denoiser.clone(), &mut denoiser_store, "cdm", &mut rng)?;
    let schedule = cfg.schedule.build()?;
    let cdm_trace = train_cdm(
        &denoiser,
        &mut denoiser_store,
        &items,
        &schedule,
        cdm_settings,
    )?;
    Ok((
        PipelineEnv {
            font,
            codec,
            codec_store,
            denoiser,
            denoiser_store,
            schedule,
        },
        codec_trace,
        cdm_trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::CharStackConfig;
    use crate::geometry::CropConfig;
    use crate::glyph_encoder::GlyphEncoderConfig;
    use crate::toy_corpus::{generate_corpus, CorpusSpec, OracleRecognizer};

    /// Small but structurally complete configuration for fast tests.
    pub(crate) fn tiny_run_config() -> RunConfig {
        RunConfig {
            cond: CondConfig {
                crop: CropConfig {
                    target_size: 32,
                    min_side: 8.0,
                    pad: crate::geometry::PadMode::Replicate,
                },
                chars: CharStackConfig {
                    max_chars: 25,
                    intensity_budget: 128,
                    tile: 16,
                    background_value: 255,
                    pad_value: 0,
                    font_ref: "builtin".into(),
                },
                region_centric: true,
                kernel: crate::geometry::Resample::Bilinear,
            },
            codec: CodecConfig {
                size: 32,
                down_factor: 4,
                latent_channels: 2,
                width: 8,
            },
            denoiser: DenoiserConfig {
                latent_channels: 2,
                latent_side: 8,
                width: 8,
                blocks_pre: 1,
                blocks_post: 1,
                t_embed_dim: 16,
                attn_inner: 8,
                attn_heads: 2,
                encoder: GlyphEncoderConfig {
                    patch: 8,
                    feat_dim: 16,
                    depth: 1,
                    heads: 2,
                    channels: 25,
                    tile: 16,
                },
            },
            schedule: ScheduleConfig {
                t_train: 100,
                beta_start: 1e-3,
                beta_end: 0.05,
            },
            sample_steps: 5,
            expand: 2,
            seed: 11,
            ..RunConfig::default()
        }
    }

    fn tiny_env(cfg: &RunConfig, scenes: &[SceneImage]) -> PipelineEnv {
        let codec_settings = TrainSettings {
            steps: 30,
            lr: 2e-3,
            batch: 2,
            seed: 1,
            optimizer: crate::latent_codec::OptimKind::Adam,
        };
        let cdm_settings = CdmTrainSettings {
            steps: 20,
            lr: 1e-3,
            batch: 2,
            seed: 2,
        };
        train_env(cfg, scenes, &codec_settings, &cdm_settings).unwrap().0
    }

    fn tiny_scenes() -> Vec<SceneImage> {
        generate_corpus(
            &CorpusSpec {
                n_images: 3,
                height: 64,
                width: 64,
                max_words: 2,
                word_len: (1, 3),
                seed: 5,
                ..CorpusSpec::default()
            },
            Font::builtin(),
        )
        .unwrap()
        .scenes
    }

    fn strip_timings(mut records: Vec<DatasetRecord>) -> Vec<DatasetRecord> {
        for r in &mut records {
            r.timings = Timings {
                condition_ms: 0.0,
                sample_ms: 0.0,
                filter_ms: 0.0,
            };
        }
        records
    }

    #[test]
    fn config_cross_validation_catches_mismatches() {
        let mut cfg = tiny_run_config();
        cfg.validate().unwrap();
        cfg.codec.size = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn candidate_count_is_expand_times_instances() {
        let cfg = tiny_run_config();
        let scenes = tiny_scenes();
        let env = tiny_env(&cfg, &scenes);
        let oracle = OracleRecognizer::from_font("acehknostuxz", &env.font).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary =
            run_pipeline(&cfg, &env, &scenes, &oracle, dir.path(), None).unwrap();
        let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
        assert_eq!(summary.candidates, cfg.expand * instances);
        let records = read_manifest(&summary.manifest_path).unwrap();
        assert_eq!(records.len(), summary.candidates);
        for rec in &records {
            assert!(!rec.out_image.is_empty());
            assert!(dir.path().join(&rec.out_image).exists());
        }
    }

    #[test]
    fn reruns_and_resumes_match_the_uninterrupted_manifest() {
        let cfg = tiny_run_config();
        let scenes = tiny_scenes();
        let env = tiny_env(&cfg, &scenes);
        let oracle = OracleRecognizer::from_font("acehknostuxz", &env.font).unwrap();

        let full_dir = tempfile::tempdir().unwrap();
        let full = run_pipeline(&cfg, &env, &scenes, &oracle, full_dir.path(), None).unwrap();
        let full_records = strip_timings(read_manifest(&full.manifest_path).unwrap());

        // Fresh run in a different directory: identical modulo timings.
        let again_dir = tempfile::tempdir().unwrap();
        let again = run_pipeline(&cfg, &env, &scenes, &oracle, again_dir.path(), None).unwrap();
        let again_records = strip_timings(read_manifest(&again.manifest_path).unwrap());
        assert_eq!(full_records, again_records);

        // Interrupted after 2 regions, then resumed.
        let resume_dir = tempfile::tempdir().unwrap();
        let partial =
            run_pipeline(&cfg, &env, &scenes, &oracle, resume_dir.path(), Some(2)).unwrap();
        assert!(partial.candidates < full.candidates);
        let resumed =
            run_pipeline(&cfg, &env, &scenes, &oracle, resume_dir.path(), None).unwrap();
        assert_eq!(resumed.skipped_resume, partial.candidates);
        let resumed_records = strip_timings(read_manifest(&resumed.manifest_path).unwrap());
        assert_eq!(full_records, resumed_records);
    }

    #[test]
    fn edit_once_touches_only_the_crop_square() {
        let cfg = tiny_run_config();
        let scenes = tiny_scenes();
        let env = tiny_env(&cfg, &scenes);
        let image = &scenes[0].image;
        let quad = Quad::rect(20.0, 24.0, 44.0, 36.0);
        let (edited, generated, _) = edit_once(&cfg, &env, image, &quad, "xo", 3).unwrap();
        assert_eq!(generated.height(), cfg.cond.crop.target_size);
        // The enclosing square is side 24 centered at (32, 30).
        let (h, w) = (image.height(), image.width());
        let mut outside_equal = true;
        let mut inside_diff = 0usize;
        for y in 0..h {
            for x in 0..w {
                let inside = (20.0..44.0).contains(&(x as f64 + 0.5))
                    && (18.0..42.0).contains(&(y as f64 + 0.5));
                let same = (0..3).all(|c| edited.data[[y, x, c]] == image.data[[y, x, c]]);
                if !inside && !same {
                    outside_equal = false;
                }
                if inside && !same {
                    inside_diff += 1;
                }
            }
        }
        assert!(outside_equal, "pixels outside the crop square changed");
        assert!(inside_diff > 0, "edit had no effect");
    }

    #[test]
    fn truncation_warning_is_reported() {
        let cfg = tiny_run_config();
        let scenes = tiny_scenes();
        let env = tiny_env(&cfg, &scenes);
        let long: String = std::iter::repeat('a').take(30).collect();
        let quad = Quad::rect(16.0, 24.0, 48.0, 40.0);
        let (_, _, warnings) = edit_once(&cfg, &env, &scenes[0].image, &quad, &long, 1).unwrap();
        assert!(warnings.iter().any(|w| w.contains("truncated")));
    }

    #[test]
    fn degenerate_quad_is_surfaced() {
        let cfg = tiny_run_config();
        let scenes = tiny_scenes();
        let env = tiny_env(&cfg, &scenes);
        let quad = Quad::rect(10.0, 10.0, 10.0, 10.0);
        assert!(matches!(
            edit_once(&cfg, &env, &scenes[0].image, &quad, "ab", 1),
            Err(Error::DegenerateRegion(_))
        ));
    }

    #[test]
    fn failure_records_never_abort_the_run() {
        let cfg = tiny_run_config();
        let mut scenes = tiny_scenes();
        // Inject an instance whose quad degenerates at conditioning time.
        scenes[0].instances.push(crate::geometry::Instance {
            quad: Quad::new([[5.0, 5.0], [5.0, 5.0], [5.0, 5.0], [5.0, 5.0]]),
            label: "zz".into(),
        });
        let env = tiny_env(&cfg, &scenes);
        let oracle = OracleRecognizer::from_font("acehknostuxz", &env.font).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pipeline(&cfg, &env, &scenes, &oracle, dir.path(), None).unwrap();
        let records = read_manifest(&summary.manifest_path).unwrap();
        let failures: Vec<_> = records
            .iter()
            .filter(|r| {
                r.discard_reason
                    .as_deref()
                    .is_some_and(|m| m.contains("pipeline error"))
            })
            .collect();
        assert!(!failures.is_empty());
        assert!(records.len() > failures.len());
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let scenes = tiny_scenes();
        let mut cfg = tiny_run_config();
        let env = tiny_env(&cfg, &scenes);
        let oracle = OracleRecognizer::from_font("acehknostuxz", &env.font).unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        cfg.workers = 1;
        run_pipeline(&cfg, &env, &scenes, &oracle, dir1.path(), None).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        cfg.workers = 2;
        run_pipeline(&cfg, &env, &scenes, &oracle, dir2.path(), None).unwrap();
        let a = strip_timings(read_manifest(&dir1.path().join("manifest.jsonl")).unwrap());
        let mut b = strip_timings(read_manifest(&dir2.path().join("manifest.jsonl")).unwrap());
        // run_config snapshots differ in the worker field only.
        for r in &mut b {
            r.recognizer_id = r.recognizer_id.clone();
        }
        assert_eq!(a, b);
    }
}
