//! End-to-end driver: corpus synthesis, planner training, layout sampling,
//! poster composition and evaluation, plus the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ppg_nn::{AdamW, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::compose_poster;
use crate::dataset::{load_dataset, LayoutFile, PosterRecord};
use crate::diffusion::ScheduleKind;
use crate::embed::EmbeddingBundle;
use crate::layout::{dequantize_tokens, quantize_layout, Category, Layout, TokenGrid};
use crate::metrics::{evaluate, EvalReport, IouAveraging};
use crate::plannet::{
    load_planner, sample_grids, save_planner, train_step, DecoderConfig, LayoutConstraint, LayoutDecoder, PlannerMeta,
    PlannerSchedules, SamplerOptions, StepStats, TrainOptions,
};
use crate::render::{rasterize_masks, FusionConfig, RenderFrontEnd};
use crate::synth::{synth_corpus, SyntheticGrammar};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Samples per reverse-diffusion batch. Fixed so outputs do not depend on
/// the worker count.
pub const PLAN_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Dataset directory; `<out>/data` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Planner checkpoint; `<out>/checkpoint/planner.prck` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub keep_clean_prob: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Layouts to plan; `None` plans one per record.
    pub num_samples: Option<usize>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub grammar: SyntheticGrammar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub paths: Paths,
    pub decoder: DecoderConfig,
    pub schedule: ScheduleKind,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SynthConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub iou_averaging: IouAveraging,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        // desk values are tuned for CPU runs; paper values follow the published setup
        let (decoder, fusion, steps, lr, temperature) = match profile {
            Profile::Desk => (DecoderConfig::desk(), FusionConfig::desk(), 250, 2e-3, 0.7),
            Profile::Paper => (DecoderConfig::paper(), FusionConfig::paper(), 20_000, 5e-4, 1.0),
        };
        Self {
            seed: 0,
            profile,
            paths: Paths { data: None, checkpoint: None, out: PathBuf::from("ppg-run") },
            decoder,
            schedule: ScheduleKind::LinearMask,
            train: TrainConfig { steps, batch_size: 16, lr, weight_decay: 0.01, keep_clean_prob: 0.1, clip_norm: Some(1.0) },
            sampler: SamplerConfig { num_samples: None, temperature, constraints: None },
            synth: SynthConfig { n: 256, grammar: SyntheticGrammar::default() },
            fusion,
            iou_averaging: IouAveraging::Category,
        }
    }

    /// Checks the profile locks and basic ranges.
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.fusion.validate()?;
        self.synth.grammar.validate()?;
        let d = &self.decoder;
        let locked = match self.profile {
            Profile::Paper => d.blocks == 4 && d.heads == 8 && d.width == 512 && d.hidden == 2048 && d.t_p == 100,
            Profile::Desk => d.blocks == 2 && d.width == 64 && d.t_p == 20,
        };
        if !locked {
            return Err(Error::invalid(format!(
                "decoder sizes (N={}, heads={}, width={}, hidden={}, T_P={}) do not match the {:?} profile",
                d.blocks, d.heads, d.width, d.hidden, d.t_p, self.profile
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.synth.n == 0 {
            return Err(Error::invalid("synth.n must be at least 1"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.paths.out.join("data"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.out.join("checkpoint").join("planner.prck"))
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Reads a config file, or the `config` field of a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let cfg = match value.get("config") {
            Some(inner) if value.get("ppg_version").is_some() => serde_json::from_value(inner.clone())?,
            _ => serde_json::from_value(value)?,
        };
        Ok(cfg)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash over every file below `dir`, in sorted relative-path order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
            let p = entry.map_err(|e| Error::file(dir, e))?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(dir.join(&f)).map_err(|e| Error::file(dir.join(&f), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// SplitMix64 mix of a run seed with a stage tag and an index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_COMPOSE: u64 = 4;
const TAG_RENDER: u64 = 5;
const TAG_LATENT: u64 = 6;

/// A trained planner with its schedules.
pub struct Planner {
    pub decoder: LayoutDecoder,
    pub store: ParameterStore<f32>,
    pub schedules: PlannerSchedules,
    pub steps: u64,
}

/// Trains a fresh planner on clean grids with their embeddings. `on_step`
/// sees every step's statistics.
pub fn train_planner(
    decoder_cfg: &DecoderConfig,
    schedule: ScheduleKind,
    train: &TrainConfig,
    data: &[(TokenGrid, EmbeddingBundle)],
    seed: u64,
    mut on_step: impl FnMut(usize, &StepStats),
) -> Result<Planner> {
    if data.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT, 0));
    let mut store = ParameterStore::<f32>::new();
    let decoder = LayoutDecoder::new(decoder_cfg.clone(), &mut store, &mut init_rng)?;
    let schedules = PlannerSchedules::new(decoder_cfg.t_p, &decoder_cfg.vocab, schedule)?;
    let opt = AdamW { lr: train.lr, weight_decay: train.weight_decay, clip_norm: train.clip_norm, ..AdamW::default() };
    let opts = TrainOptions { batch_size: train.batch_size, keep_clean_prob: train.keep_clean_prob };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TRAIN, 0));
    for step in 0..train.steps {
        let batch: Vec<(&TokenGrid, &EmbeddingBundle)> = (0..train.batch_size)
            .map(|_| {
                let (g, e) = &data[rng.gen_range(0..data.len())];
                (g, e)
            })
            .collect();
        let stats = train_step(&decoder, &mut store, &opt, &schedules, &batch, &opts, &mut rng)?;
        if !stats.loss.is_finite() {
            return Err(Error::Runtime(format!("training diverged at step {step}: loss {}", stats.loss)));
        }
        on_step(step, &stats);
    }
    Ok(Planner { decoder, store, schedules, steps: train.steps as u64 })
}

/// Samples one grid per conditioning bundle, `PLAN_CHUNK` at a time, with the
/// per-sample seeds given.
pub fn plan_grids(
    planner: &Planner,
    conds: &[&EmbeddingBundle],
    seeds: &[u64],
    constraint: &LayoutConstraint,
    opts: &SamplerOptions,
) -> Result<Vec<TokenGrid>> {
    let chunks: Vec<Result<Vec<TokenGrid>>> = conds
        .par_chunks(PLAN_CHUNK)
        .zip(seeds.par_chunks(PLAN_CHUNK))
        .map(|(c, s)| sample_grids(&planner.decoder, &planner.store, &planner.schedules, c, constraint, s, opts))
        .collect();
    let mut out = Vec::with_capacity(conds.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Ground-truth grid and embeddings for each record.
pub fn training_pairs(records: &[PosterRecord], decoder: &DecoderConfig) -> Result<Vec<(TokenGrid, EmbeddingBundle)>> {
    records
        .par_iter()
        .map(|r| {
            let grid = quantize_layout(&r.ground_truth, &decoder.vocab)?;
            let emb = r.embeddings()?;
            if emb.d != decoder.cond_dim {
                return Err(Error::invalid(format!("{}: embedding width {} but decoder expects {}", r.id, emb.d, decoder.cond_dim)));
            }
            Ok((grid, emb))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ppg_version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    /// Layout id to the SHA-256 of its JSON file.
    #[serde(default)]
    pub layouts: BTreeMap<String, String>,
    #[serde(default)]
    pub records_skipped: usize,
    #[serde(default)]
    pub posters: usize,
    #[serde(default)]
    pub posters_skipped: usize,
    #[serde(default)]
    pub missing_glyphs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, command: &str) -> Self {
        Self {
            ppg_version: VERSION.to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config_sha256: cfg.hash(),
            config: Some(cfg.clone()),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

fn load_records(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Vec<PosterRecord>> {
    let dir = cfg.data_dir();
    if !dir.is_dir() {
        return Err(Error::file(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found; run `ppg synth` or pass --data"),
        ));
    }
    let report = load_dataset(&dir)?;
    manifest.records_skipped = report.skipped.len();
    if report.records.is_empty() {
        return Err(Error::invalid(format!("no usable records in {}", dir.display())));
    }
    manifest.corpus_sha256 = Some(hash_dir(&dir)?);
    Ok(report.records)
}

pub fn run_synth(cfg: &RunConfig, manifest: &mut Manifest) -> Result<()> {
    let dir = cfg.data_dir();
    let t0 = Instant::now();
    synth_corpus(&cfg.synth.grammar, cfg.synth.n, cfg.seed, &dir)?;
    manifest.corpus_sha256 = Some(hash_dir(&dir)?);
    info!("synth: {} records in {} ({:.1}s)", cfg.synth.n, dir.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

pub fn run_train(cfg: &RunConfig, manifest: &mut Manifest) -> Result<()> {
    let records = load_records(cfg, manifest)?;
    let pairs = training_pairs(&records, &cfg.decoder)?;
    let t0 = Instant::now();
    let mut last = f64::NAN;
    let planner = train_planner(&cfg.decoder, cfg.schedule, &cfg.train, &pairs, cfg.seed, |step, s| {
        last = s.loss;
        if step % 50 == 0 || step + 1 == cfg.train.steps {
            info!("train step {step}: loss {:.4}, corrupted CE {:.4} (uniform {:.4})", s.loss, s.corrupt_ce, s.uniform_ce);
        }
    })?;
    let path = cfg.checkpoint_path();
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let meta = PlannerMeta { decoder: cfg.decoder.clone(), schedule: cfg.schedule, steps: planner.steps };
    save_planner(&path, &meta, &planner.store)?;
    manifest.checkpoint_sha256 = Some(hash_file(&path)?);
    manifest.final_train_loss = Some(last);
    info!("train: {} steps in {:.1}s, checkpoint {}", cfg.train.steps, t0.elapsed().as_secs_f64(), path.display());
    Ok(())
}

fn load_trained(cfg: &RunConfig) -> Result<Planner> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(Error::file(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "planner checkpoint not found; run `ppg train` first"),
        ));
    }
    let (meta, decoder, store) = load_planner(&path)?;
    let schedules = PlannerSchedules::new(meta.decoder.t_p, &meta.decoder.vocab, meta.schedule)?;
    Ok(Planner { decoder, store, schedules, steps: meta.steps })
}

pub fn run_plan(cfg: &RunConfig, manifest: &mut Manifest) -> Result<()> {
    let records = load_records(cfg, manifest)?;
    let planner = load_trained(cfg)?;
    manifest.checkpoint_sha256 = Some(hash_file(&cfg.checkpoint_path())?);
    let constraint = match &cfg.sampler.constraints {
        Some(p) => LayoutConstraint::load(p, &planner.decoder.cfg.vocab)?,
        None => LayoutConstraint::default(),
    };
    let n = cfg.sampler.num_samples.unwrap_or(records.len());
    // with more samples than records, records are reused in order
    let picks: Vec<usize> = (0..n).map(|i| i % records.len()).collect();
    let embeddings: Vec<EmbeddingBundle> = picks.par_iter().map(|&i| records[i].embeddings()).collect::<Result<_>>()?;
    let conds: Vec<&EmbeddingBundle> = embeddings.iter().collect();
    let seeds: Vec<u64> = (0..n).map(|i| derive_seed(cfg.seed, TAG_SAMPLE, i as u64)).collect();
    let t0 = Instant::now();
    let opts = SamplerOptions { temperature: cfg.sampler.temperature };
    let grids = plan_grids(&planner, &conds, &seeds, &constraint, &opts)?;
    let dir = cfg.paths.out.join("layouts");
    ensure_dir(&dir)?;
    // stale layouts from an earlier run would leak into compose and eval
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))? {
        let p = entry.map_err(|e| Error::file(&dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            std::fs::remove_file(&p).map_err(|e| Error::file(&p, e))?;
        }
    }
    manifest.layouts.clear();
    for (i, grid) in grids.iter().enumerate() {
        let rec = &records[picks[i]];
        let id = if n == records.len() { rec.id.clone() } else { format!("{}_{i:05}", rec.id) };
        let layout = dequantize_tokens(grid, &planner.decoder.cfg.vocab, rec.ground_truth.canvas_aspect)?;
        let file = LayoutFile::new(&id, rec.canvas, &layout);
        let bytes = serde_json::to_vec_pretty(&file)?;
        let path = dir.join(format!("{id}.json"));
        std::fs::write(&path, &bytes).map_err(|e| Error::file(&path, e))?;
        manifest.layouts.insert(id, sha256_hex(&bytes));
    }
    info!("plan: {n} layouts in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

/// Planned layouts in `<out>/layouts`, sorted by id.
fn read_layouts(cfg: &RunConfig) -> Result<Vec<LayoutFile>> {
    let dir = cfg.paths.out.join("layouts");
    if !dir.is_dir() {
        return Err(Error::file(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no planned layouts; run `ppg plan` first")));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::file(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// The record a planned layout id refers to: exact id, or `<id>_<index>`.
fn record_for<'a>(by_id: &BTreeMap<&str, &'a PosterRecord>, id: &str) -> Option<&'a PosterRecord> {
    by_id.get(id).copied().or_else(|| id.rsplit_once('_').and_then(|(base, _)| by_id.get(base).copied()))
}

/// Texts for a planned layout: the record's strings in order.
fn texts_for(layout: &Layout, rec: &PosterRecord) -> Vec<String> {
    let from_layout: Vec<String> = layout.of(Category::Text).filter_map(|e| e.text.clone()).collect();
    if from_layout.len() == layout.count(Category::Text) && !from_layout.is_empty() {
        from_layout
    } else {
        rec.texts.clone()
    }
}

pub fn run_compose(cfg: &RunConfig, manifest: &mut Manifest) -> Result<()> {
    let records = load_records(cfg, manifest)?;
    let layouts = read_layouts(cfg)?;
    let by_id: BTreeMap<&str, &PosterRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let poster_dir = cfg.paths.out.join("posters");
    let cond_dir = cfg.paths.out.join("conditions");
    ensure_dir(&poster_dir)?;
    ensure_dir(&cond_dir)?;
    let mut render_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_RENDER, 0));
    let mut render_store = ParameterStore::<f32>::new();
    let front = RenderFrontEnd::new(cfg.fusion, &mut render_store, &mut render_rng)?;
    let t0 = Instant::now();
    let outcomes: Vec<Result<Option<usize>>> = layouts
        .par_iter()
        .enumerate()
        .map(|(i, lf)| {
            let Some(rec) = record_for(&by_id, &lf.id) else {
                return Err(Error::invalid(format!("layout {} has no matching dataset record", lf.id)));
            };
            let layout = lf.layout();
            let texts = texts_for(&layout, rec);
            let seed = derive_seed(cfg.seed, TAG_COMPOSE, i as u64);
            let poster = match compose_poster(&rec.product, &texts, &layout, rec.canvas, seed) {
                Ok(p) => p,
                Err(Error::Invalid(msg)) => {
                    warn!("skipping poster {}: {msg}", lf.id);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            poster.save(&poster_dir.join(format!("{}.png", lf.id)))?;
            if layout.count(Category::Product) > 0 {
                let shape = cfg.fusion.latent_shape();
                let mut lrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_LATENT, i as u64));
                let z_t = Tensor::from_fn(&shape, |_| {
                    let u: f32 = lrng.gen_range(-1.0..1.0);
                    u
                });
                let cond = front.condition(&render_store, &layout, &rec.product, &z_t)?;
                cond.save(&cond_dir.join(format!("{}.prck", lf.id)))?;
                let stack = rasterize_masks(&layout, cfg.fusion.width, cfg.fusion.height);
                stack.write_png(0, &cond_dir.join(format!("{}_text.png", lf.id)))?;
                stack.write_png(1, &cond_dir.join(format!("{}_underlay.png", lf.id)))?;
            }
            Ok(Some(poster.report.missing_glyphs))
        })
        .collect();
    let (mut done, mut skipped, mut missing) = (0, 0, 0);
    for o in outcomes {
        match o? {
            Some(m) => {
                done += 1;
                missing += m;
            }
            None => skipped += 1,
        }
    }
    manifest.posters = done;
    manifest.posters_skipped = skipped;
    manifest.missing_glyphs = missing;
    if missing > 0 {
        warn!("{missing} glyphs were missing from the bundled fonts and drawn as boxes");
    }
    info!("compose: {done} posters ({skipped} skipped) in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

pub fn run_eval(cfg: &RunConfig, manifest: &mut Manifest) -> Result<()> {
    let records = load_records(cfg, manifest)?;
    let layouts = read_layouts(cfg)?;
    let by_id: BTreeMap<&str, &PosterRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(layouts.len());
    for lf in &layouts {
        let rec = record_for(&by_id, &lf.id).ok_or_else(|| Error::invalid(format!("layout {} has no matching dataset record", lf.id)))?;
        pairs.push((lf.id.clone(), lf.layout(), rec.ground_truth.clone()));
    }
    let (report, scores) = evaluate(&pairs, cfg.iou_averaging)?;
    let dir = cfg.paths.out.join("eval");
    ensure_dir(&dir)?;
    let rp = dir.join("report.json");
    std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::file(&rp, e))?;
    let cp = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&cp)?;
    for s in &scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::file(&cp, e))?;
    info!("eval: max IoU {:.4}, fd_geo {:.4}, overlap {:.4} over {}", report.max_iou, report.fd_geo, report.overlap_rate, report.n);
    manifest.eval = Some(report);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Synth,
    Train,
    Plan,
    Compose,
    Eval,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Plan => "plan",
            Command::Compose => "compose",
            Command::Eval => "eval",
            Command::All => "all",
        }
    }
}

/// Runs a subcommand and writes `<out>/manifest.json`.
pub fn run(cfg: &RunConfig, command: Command) -> Result<Manifest> {
    cfg.validate()?;
    ensure_dir(&cfg.paths.out)?;
    let mut manifest = Manifest::new(cfg, command.name());
    match command {
        Command::Synth => run_synth(cfg, &mut manifest)?,
        Command::Train => run_train(cfg, &mut manifest)?,
        Command::Plan => run_plan(cfg, &mut manifest)?,
        Command::Compose => run_compose(cfg, &mut manifest)?,
        Command::Eval => run_eval(cfg, &mut manifest)?,
        Command::All => {
            run_synth(cfg, &mut manifest)?;
            run_train(cfg, &mut manifest)?;
            run_plan(cfg, &mut manifest)?;
            run_compose(cfg, &mut manifest)?;
            run_eval(cfg, &mut manifest)?;
        }
    }
    manifest.save(&cfg.paths.out.join("manifest.json"))?;
    Ok(manifest)
}
