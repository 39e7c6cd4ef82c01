//! Pipeline stages behind the command line: synthetic data, feature
//! extraction, dictionary learning, encoding, metric training, ranking and
//! evaluation. Every stage reads and writes artifacts below one work
//! directory and stamps them with the config hash and the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coder::{
    encode_collection, tune_lambda_for_density, CollectionDescriptor, EncodeParams, ImageCollection, SolverOptions, TauRule,
    Variant, DEFAULT_TARGET_DENSITY,
};
use crate::datagen::{generate_synthetic_dataset, render_raster_collections, SynthConfig};
use crate::dictionary::{assemble_block_diagonal, learn_unit_dictionary, BlockDictionary, DictLearnOptions, LearnMode, SubDictionary};
use crate::features::{encode_ppm, load_ppm, ExtractorRegistry, FeatureSchema, ImageFeature, UnitKind};
use crate::io::{decode_matrix, encode_matrix, read_input, read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::metric::{decode_metric_file, encode_metric_file, MetricModel, MetricOptions, MetricVariant};
use crate::recommend::{
    evaluate, random_baseline_map, rank_for_tuple, ranked_lists_csv, train_query_dependent, DescriptorSet, EvaluationReport,
    PreferenceTuple, QueryDependentModel, RankedList, REPORT_MAX_K,
};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "COLLECTION_FORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Mandatory, either here, on the command line, or recorded by `synth`.
    pub seed: Option<u64>,
    pub work_dir: PathBuf,
    pub paths: ArtifactPaths,
    pub synth: SynthConfig,
    pub raster: RasterConfig,
    pub extract: ExtractConfig,
    pub dictionary: DictionaryConfig,
    pub encode: EncodeConfig,
    pub metric: MetricConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            work_dir: PathBuf::from("collection-forge-work"),
            paths: ArtifactPaths::default(),
            synth: SynthConfig::default(),
            raster: RasterConfig::default(),
            extract: ExtractConfig::default(),
            dictionary: DictionaryConfig::default(),
            encode: EncodeConfig::default(),
            metric: MetricConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Artifact directories, relative to the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub dataset: PathBuf,
    pub dictionary: PathBuf,
    pub descriptors: PathBuf,
    pub metric: PathBuf,
    pub reports: PathBuf,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        ArtifactPaths {
            dataset: "dataset".into(),
            dictionary: "dictionary".into(),
            descriptors: "descriptors".into(),
            metric: "metric".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Render PPM images instead of drawing features directly.
    pub enabled: bool,
    pub size: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { enabled: false, size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub units: Vec<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { units: [UnitKind::Tiny, UnitKind::LabHist, UnitKind::HogLite].iter().map(|u| u.name().to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub atoms: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub mode: LearnMode,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig { atoms: 12, lambda: 0.15, epochs: 10, mode: LearnMode::Batch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub variant: Variant,
    /// Fixed weight; when absent it is tuned for `target_density`.
    pub lambda: Option<f64>,
    pub target_density: f64,
    /// Fixed Huber knee; when absent the median-residual rule applies.
    pub tau: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        EncodeConfig {
            variant: Variant::HuberG,
            lambda: None,
            target_density: DEFAULT_TARGET_DENSITY,
            tau: None,
            tol: solver.tol,
            max_iter: solver.max_iter,
        }
    }
}

impl EncodeConfig {
    fn solver(&self) -> SolverOptions {
        SolverOptions { tol: self.tol, max_iter: self.max_iter }
    }

    fn tau_rule(&self) -> TauRule {
        self.tau.map(TauRule::Fixed).unwrap_or(TauRule::MedianResidual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub variant: MetricVariant,
    pub step: f64,
    pub iters: usize,
    pub tol: f64,
    pub ridge: f64,
    pub query_dependent: bool,
    /// Compare descriptors after scaling them to unit norm.
    pub normalize: bool,
    /// Fraction of users whose tuples train the metric; the rest evaluate.
    pub train_fraction: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let o = MetricOptions::default();
        MetricConfig {
            variant: MetricVariant::Full,
            step: o.step,
            iters: o.iters,
            tol: o.tol,
            ridge: o.ridge,
            query_dependent: true,
            normalize: true,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub baseline_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 5, baseline_trials: 100_000 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dictionary.atoms == 0 || self.dictionary.epochs == 0 || !(self.dictionary.lambda > 0.0) {
            return bad("dictionary needs positive atoms, epochs and lambda");
        }
        if !(self.encode.target_density > 0.0 && self.encode.target_density <= 1.0) {
            return bad("encode.target_density must lie in (0, 1]");
        }
        if self.encode.lambda.is_some_and(|l| !(l > 0.0)) {
            return bad("encode.lambda must be positive");
        }
        if !(self.metric.train_fraction > 0.0 && self.metric.train_fraction < 1.0) {
            return bad("metric.train_fraction must lie in (0, 1)");
        }
        if self.eval.k == 0 {
            return bad("eval.k must be positive");
        }
        if self.raster.enabled && self.raster.size == 0 {
            return bad("raster.size must be positive");
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    }))
}

/// Config hash and seed embedded in every manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// `latent` when features were drawn directly, `raster` for PPM images.
    pub source: String,
    /// Absent until features exist.
    pub schema: Option<FeatureSchema>,
    pub synth: SynthConfig,
    pub collections: usize,
    pub images: usize,
    pub tuples: usize,
}

/// One line of `collections.jsonl`; the rows of `features.cfm` follow the
/// concatenation of every record's `images`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionRecord {
    pub collection_id: String,
    pub category: Option<String>,
    pub title: Vec<String>,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub schema: FeatureSchema,
    pub atoms_per_unit: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub units: Vec<DictionaryUnitEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryUnitEntry {
    pub name: String,
    pub file: String,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptorManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub variant: Variant,
    pub lambda: Option<f64>,
    pub target_density: Option<f64>,
    pub mean_density: f64,
    pub count: usize,
    pub tuning: Vec<TuningRecord>,
}

/// One row of the descriptor sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMeta {
    pub collection_id: String,
    pub variant: Variant,
    pub density: f64,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
}

impl From<&CollectionDescriptor> for DescriptorMeta {
    fn from(d: &CollectionDescriptor) -> Self {
        DescriptorMeta { collection_id: d.collection_id.clone(), variant: d.variant, density: d.density, lambda: d.lambda, tau: d.tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub collection_id: String,
    pub lambda: f64,
    pub density: f64,
    pub reached: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub variant: Variant,
    pub metric_variant: MetricVariant,
    pub query_dependent: bool,
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub k: usize,
    pub map_at_k_selected: f64,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub candidates: usize,
    pub relevant: usize,
    pub trials: usize,
    pub map_at_k: Vec<f64>,
}

/// Most recent variant selections, used when a stage is run without flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PipelineState {
    variant: Option<Variant>,
    metric_variant: Option<MetricVariant>,
}

/// Features, collections and tuples as loaded from the dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub collections: Vec<ImageCollection>,
    pub tuples: Vec<PreferenceTuple>,
}

/// Outcome of a shared-λ tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedTuning {
    pub lambda: f64,
    pub records: Vec<TuningRecord>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    seed: u64,
    stamp: Stamp,
    work: PathBuf,
}

impl Pipeline {
    /// Resolves the seed (explicit, then config, then the dataset manifest)
    /// and the work directory.
    pub fn new(mut cfg: PipelineConfig, seed: Option<u64>, work_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(w) = work_dir {
            cfg.work_dir = w;
        }
        let seed = match seed.or(cfg.seed) {
            Some(s) => s,
            None => {
                let path = cfg.work_dir.join(&cfg.paths.dataset).join("manifest.json");
                match read_json::<DatasetManifest>(&path) {
                    Ok(m) => m.stamp.seed,
                    Err(Error::MissingInput(_)) => {
                        return Err(Error::InvalidConfig("a seed is required (--seed, config \"seed\", or a prior synth run)".into()))
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        cfg.seed = Some(seed);
        cfg.synth.seed = seed;
        cfg.validate()?;
        // the hash covers the inputs, not where the outputs go
        let mut hashed = cfg.clone();
        hashed.work_dir = PathBuf::new();
        let stamp = Stamp { config_hash: config_hash(&hashed)?, seed };
        let work = cfg.work_dir.clone();
        Ok(Pipeline { cfg, seed, stamp, work })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stamp(&self) -> &Stamp {
        &self.stamp
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    fn dir(&self, sub: &Path) -> PathBuf {
        self.work.join(sub)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.dir(&self.cfg.paths.dataset)
    }

    fn state_path(&self) -> PathBuf {
        self.work.join("state.json")
    }

    fn state(&self) -> Result<PipelineState> {
        match read_json(&self.state_path()) {
            Err(Error::MissingInput(_)) => Ok(PipelineState::default()),
            other => other,
        }
    }

    fn update_state(&self, f: impl FnOnce(&mut PipelineState)) -> Result<()> {
        let mut s = self.state()?;
        f(&mut s);
        write_json(&self.state_path(), &s)
    }

    /// Descriptor variant: explicit, else the last encoded, else config.
    pub fn resolve_variant(&self, v: Option<Variant>) -> Result<Variant> {
        Ok(v.or(self.state()?.variant).unwrap_or(self.cfg.encode.variant))
    }

    pub fn resolve_metric(&self, m: Option<MetricVariant>) -> Result<MetricVariant> {
        Ok(m.or(self.state()?.metric_variant).unwrap_or(self.cfg.metric.variant))
    }

    // ---- synth / extract -------------------------------------------------

    pub fn synth(&self) -> Result<DatasetManifest> {
        let ds = generate_synthetic_dataset(&self.cfg.synth)?;
        let dir = self.dataset_dir();
        write_jsonl(&dir.join("tuples.jsonl"), &ds.tuples)?;
        write_jsonl(&dir.join("records.jsonl"), &ds.records)?;
        let images: usize = ds.collections.iter().map(|c| c.members.len()).sum();
        let manifest = if self.cfg.raster.enabled {
            let rasters = render_raster_collections(&self.cfg.synth, &ds.collections, self.cfg.raster.size)?;
            let records: Vec<CollectionRecord> = rasters
                .iter()
                .zip(&ds.collections)
                .map(|(r, c)| CollectionRecord {
                    collection_id: c.collection_id.clone(),
                    category: c.category.clone(),
                    title: c.title.clone(),
                    images: r.images.iter().map(|(id, _)| id.clone()).collect(),
                })
                .collect();
            rasters.par_iter().flat_map(|r| r.images.par_iter()).try_for_each(|(id, img)| {
                write_atomic(&dir.join("images").join(format!("{id}.ppm")), &encode_ppm(img))
            })?;
            write_jsonl(&dir.join("collections.jsonl"), &records)?;
            remove_if_exists(&dir.join("features.cfm"))?;
            DatasetManifest {
                stamp: self.stamp.clone(),
                source: "raster".into(),
                schema: None,
                synth: self.cfg.synth.clone(),
                collections: records.len(),
                images,
                tuples: ds.tuples.len(),
            }
        } else {
            write_dataset_features(&dir, &ds.collections)?;
            DatasetManifest {
                stamp: self.stamp.clone(),
                source: "latent".into(),
                schema: Some(ds.schema.clone()),
                synth: self.cfg.synth.clone(),
                collections: ds.collections.len(),
                images,
                tuples: ds.tuples.len(),
            }
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        info!("synth: {} collections, {} images, {} tuples", manifest.collections, images, manifest.tuples);
        Ok(manifest)
    }

    /// Extracts features for the rendered PPM images.
    pub fn extract(&self) -> Result<DatasetManifest> {
        let dir = self.dataset_dir();
        let mut manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.source != "raster" {
            return Err(Error::MissingInput(format!(
                "{} holds latent features; enable raster mode in synth to produce images",
                dir.display()
            )));
        }
        let records: Vec<CollectionRecord> = read_jsonl(&dir.join("collections.jsonl"))?;
        let kinds = self
            .cfg
            .extract
            .units
            .iter()
            .map(|n| UnitKind::from_name(n).ok_or_else(|| Error::UnknownUnit(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let schema = FeatureSchema::standard(&kinds)?;
        let registry = ExtractorRegistry::default();
        let collections = records
            .par_iter()
            .map(|r| {
                let members = r
                    .images
                    .iter()
                    .map(|id| {
                        let img = load_ppm(&read_input(&dir.join("images").join(format!("{id}.ppm")))?)?;
                        registry.extract(id, &img, &schema)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageCollection {
                    collection_id: r.collection_id.clone(),
                    members,
                    category: r.category.clone(),
                    title: r.title.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_dataset_features(&dir, &collections)?;
        manifest.stamp = self.stamp.clone();
        manifest.schema = Some(schema);
        write_json(&dir.join("manifest.json"), &manifest)?;
        info!("extract: {} images", manifest.images);
        Ok(manifest)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        let schema = manifest
            .schema
            .ok_or_else(|| Error::MissingInput(format!("no features in {}; run extract first", dir.display())))?;
        let records: Vec<CollectionRecord> = read_jsonl(&dir.join("collections.jsonl"))?;
        let (features, _) = decode_matrix(&read_input(&dir.join("features.cfm"))?)?;
        if features.ncols() != schema.total_dim() {
            return Err(Error::SchemaMismatch(format!(
                "features have {} columns, schema expects {}",
                features.ncols(),
                schema.total_dim()
            )));
        }
        let total: usize = records.iter().map(|r| r.images.len()).sum();
        if total != features.nrows() {
            return Err(Error::Parse(format!("{} feature rows for {total} images", features.nrows())));
        }
        let mut row = 0;
        let collections = records
            .into_iter()
            .map(|r| {
                let members = r
                    .images
                    .iter()
                    .map(|id| {
                        let values = features.row(row).iter().copied().collect();
                        row += 1;
                        ImageFeature { image_id: id.clone(), values }
                    })
                    .collect();
                ImageCollection { collection_id: r.collection_id, members, category: r.category, title: r.title }
            })
            .collect();
        let tuples = read_jsonl(&dir.join("tuples.jsonl"))?;
        Ok(Dataset { schema, collections, tuples })
    }

    // ---- dictionary ------------------------------------------------------

    pub fn dict_learn(&self) -> Result<DictionaryManifest> {
        let ds = self.load_dataset()?;
        let opts = DictLearnOptions {
            atoms: self.cfg.dictionary.atoms,
            lambda: self.cfg.dictionary.lambda,
            epochs: self.cfg.dictionary.epochs,
            seed: self.seed,
            mode: self.cfg.dictionary.mode,
        };
        let (dict, traces) = learn_block_dictionary(&ds.collections, &ds.schema, &opts)?;
        let dir = self.dir(&self.cfg.paths.dictionary);
        let mut units = Vec::new();
        for (sub, trace) in dict.subs().iter().zip(traces) {
            let file = format!("{}.cfm", sub.unit_name);
            write_atomic(&dir.join(&file), &encode_matrix(&sub.atoms))?;
            units.push(DictionaryUnitEntry { name: sub.unit_name.clone(), file, objective_trace: trace });
        }
        let manifest = DictionaryManifest {
            stamp: self.stamp.clone(),
            schema: ds.schema.clone(),
            atoms_per_unit: dict.atoms_per_unit(),
            lambda: opts.lambda,
            epochs: opts.epochs,
            units,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        info!("dict-learn: {} units x {} atoms", ds.schema.unit_count(), dict.atoms_per_unit());
        Ok(manifest)
    }

    pub fn load_dictionary(&self) -> Result<BlockDictionary> {
        let dir = self.dir(&self.cfg.paths.dictionary);
        let manifest: DictionaryManifest = read_json(&dir.join("manifest.json"))?;
        let subs = manifest
            .units
            .iter()
            .map(|u| {
                let (atoms, _) = decode_matrix(&read_input(&dir.join(&u.file))?)?;
                Ok(SubDictionary { unit_name: u.name.clone(), atoms })
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_block_diagonal(subs, &manifest.schema)
    }

    // ---- encode ----------------------------------------------------------

    fn descriptor_paths(&self, variant: Variant) -> (PathBuf, PathBuf) {
        let dir = self.dir(&self.cfg.paths.descriptors);
        (dir.join(format!("{variant}.cfm")), dir.join(format!("{variant}.json")))
    }

    fn descriptor_sidecar(&self, variant: Variant) -> PathBuf {
        self.dir(&self.cfg.paths.descriptors).join(format!("{variant}.jsonl"))
    }

    pub fn encode(&self, variant: Option<Variant>) -> Result<DescriptorManifest> {
        let variant = variant.unwrap_or(self.cfg.encode.variant);
        let ds = self.load_dataset()?;
        let dict = self.load_dictionary()?;
        if dict.schema() != &ds.schema {
            return Err(Error::SchemaMismatch("dictionary was learned for a different feature schema".into()));
        }
        let ec = &self.cfg.encode;
        let (descriptors, tuning) = match ec.lambda {
            _ if variant == Variant::RawAvg => (encode_all(&ds.collections, &dict, variant, &EncodeParams::new(1.0))?, Vec::new()),
            Some(lambda) => {
                let params = EncodeParams { lambda, tau: ec.tau_rule(), solver: ec.solver() };
                (encode_all(&ds.collections, &dict, variant, &params)?, Vec::new())
            }
            None => encode_tuned(&ds.collections, &dict, variant, ec.target_density, ec.tau_rule(), &ec.solver())?,
        };
        let mean_density = descriptors.iter().map(|d| d.density).sum::<f64>() / descriptors.len().max(1) as f64;
        let (data, meta) = self.descriptor_paths(variant);
        let dim = descriptors.first().map_or(0, |d| d.x.len());
        let rows = DMatrix::from_fn(descriptors.len(), dim, |r, c| descriptors[r].x[c]);
        write_atomic(&data, &encode_matrix(&rows))?;
        let side: Vec<DescriptorMeta> = descriptors.iter().map(DescriptorMeta::from).collect();
        write_jsonl(&self.descriptor_sidecar(variant), &side)?;
        let coded = variant != Variant::RawAvg;
        let manifest = DescriptorManifest {
            stamp: self.stamp.clone(),
            variant,
            lambda: if coded { ec.lambda } else { None },
            target_density: (coded && ec.lambda.is_none()).then_some(ec.target_density),
            mean_density,
            count: descriptors.len(),
            tuning,
        };
        write_json(&meta, &manifest)?;
        self.update_state(|s| s.variant = Some(variant))?;
        info!("encode: {} descriptors ({variant}), mean density {mean_density:.4}", descriptors.len());
        Ok(manifest)
    }

    pub fn load_descriptors(&self, variant: Variant) -> Result<DescriptorSet> {
        let (data, meta) = self.descriptor_paths(variant);
        let manifest: DescriptorManifest = read_json(&meta)?;
        if manifest.variant != variant {
            return Err(Error::MixedVariants(format!("{} describes {} descriptors", meta.display(), manifest.variant)));
        }
        let (rows, _) = decode_matrix(&read_input(&data)?)?;
        let side: Vec<DescriptorMeta> = read_jsonl(&self.descriptor_sidecar(variant))?;
        if side.len() != rows.nrows() {
            return Err(Error::DimensionMismatch { expected: rows.nrows(), got: side.len() });
        }
        let descriptors = side
            .into_iter()
            .enumerate()
            .map(|(r, m)| CollectionDescriptor {
                collection_id: m.collection_id,
                variant: m.variant,
                x: rows.row(r).iter().copied().collect(),
                density: m.density,
                lambda: m.lambda,
                tau: m.tau,
            })
            .collect();
        let set = DescriptorSet::new(descriptors)?;
        if set.variant() != variant {
            return Err(Error::MixedVariants(format!("{} holds {} descriptors, expected {variant}", data.display(), set.variant())));
        }
        Ok(if self.cfg.metric.normalize { set.normalized() } else { set })
    }

    // ---- metric ----------------------------------------------------------

    fn metric_dir(&self, variant: Variant, metric: MetricVariant) -> PathBuf {
        self.dir(&self.cfg.paths.metric).join(format!("{variant}-{metric}"))
    }

    fn metric_options(&self) -> MetricOptions {
        let m = &self.cfg.metric;
        MetricOptions { step: m.step, iters: m.iters, tol: m.tol, seed: self.seed, ridge: m.ridge }
    }

    /// Seeded split of the users into metric-training and evaluation sets.
    pub fn split_users(&self, tuples: &[PreferenceTuple]) -> (Vec<String>, Vec<String>) {
        split_users(tuples, self.cfg.metric.train_fraction, self.seed)
    }

    pub fn metric_train(&self, variant: Option<Variant>, metric: Option<MetricVariant>) -> Result<MetricManifest> {
        let variant = self.resolve_variant(variant)?;
        let metric = metric.unwrap_or(self.cfg.metric.variant);
        let ds = self.load_dataset()?;
        let descriptors = self.load_descriptors(variant)?;
        let (train_users, test_users) = self.split_users(&ds.tuples);
        let train: Vec<PreferenceTuple> = ds.tuples.iter().filter(|t| train_users.contains(&t.user_id)).cloned().collect();
        let opts = self.metric_options();
        let model = if self.cfg.metric.query_dependent {
            train_query_dependent(&train, &descriptors, metric, &opts)?
        } else {
            QueryDependentModel::global_only(crate::recommend::train_global(&train, &descriptors, metric, &opts)?)
        };
        let dir = self.metric_dir(variant, metric);
        remove_if_exists(&dir)?;
        let header = |category: &str| -> BTreeMap<String, serde_json::Value> {
            BTreeMap::from([
                ("category".to_string(), category.into()),
                ("config_hash".to_string(), self.stamp.config_hash.clone().into()),
                ("descriptor_variant".to_string(), variant.as_str().into()),
                ("seed".to_string(), self.seed.into()),
            ])
        };
        write_atomic(&dir.join("global.metric"), &encode_metric_file(&model.global, header("All"))?)?;
        for (cat, m) in &model.per_category {
            write_atomic(&dir.join(format!("{cat}.metric")), &encode_metric_file(m, header(cat))?)?;
        }
        let manifest = MetricManifest {
            stamp: self.stamp.clone(),
            variant,
            metric_variant: metric,
            query_dependent: self.cfg.metric.query_dependent,
            train_users,
            test_users,
            categories: model.per_category.keys().cloned().collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        self.update_state(|s| {
            s.variant = Some(variant);
            s.metric_variant = Some(metric);
        })?;
        info!("metric-train: {metric} metric on {variant} descriptors, {} category models", manifest.categories.len());
        Ok(manifest)
    }

    pub fn load_metric(&self, variant: Variant, metric: MetricVariant) -> Result<(MetricManifest, QueryDependentModel)> {
        let dir = self.metric_dir(variant, metric);
        let manifest: MetricManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.variant != variant {
            return Err(Error::MixedVariants(format!("metric trained on {} descriptors, evaluating {variant}", manifest.variant)));
        }
        let load = |name: &str| -> Result<MetricModel> {
            let (header, model) = decode_metric_file(&read_input(&dir.join(format!("{name}.metric")))?)?;
            let dv = header.extra.get("descriptor_variant").and_then(|v| v.as_str()).unwrap_or_default();
            if header.variant != metric || dv != variant.as_str() {
                return Err(Error::MixedVariants(format!("{name}.metric is a {} metric on {dv} descriptors", header.variant)));
            }
            Ok(model)
        };
        let global = load("global")?;
        let per_category = manifest.categories.iter().map(|c| Ok((c.clone(), load(c)?))).collect::<Result<_>>()?;
        Ok((manifest, QueryDependentModel { global, per_category }))
    }

    // ---- rank / eval -----------------------------------------------------

    fn test_tuples(&self, ds: &Dataset, manifest: &MetricManifest) -> Vec<PreferenceTuple> {
        ds.tuples.iter().filter(|t| manifest.test_users.contains(&t.user_id)).cloned().collect()
    }

    fn load_for_eval(&self, variant: Variant, metric: MetricVariant) -> Result<(Vec<PreferenceTuple>, DescriptorSet, QueryDependentModel)> {
        let ds = self.load_dataset()?;
        let descriptors = self.load_descriptors(variant)?;
        let (manifest, model) = self.load_metric(variant, metric)?;
        if model.global.dim() != descriptors.dim() {
            return Err(Error::DimensionMismatch { expected: descriptors.dim(), got: model.global.dim() });
        }
        Ok((self.test_tuples(&ds, &manifest), descriptors, model))
    }

    /// Ranked candidate lists of the evaluation users, truncated to `k`.
    pub fn rank(&self, variant: Option<Variant>, metric: Option<MetricVariant>, k: Option<usize>) -> Result<(PathBuf, Vec<RankedList>)> {
        let variant = self.resolve_variant(variant)?;
        let metric = self.resolve_metric(metric)?;
        let (tuples, descriptors, model) = self.load_for_eval(variant, metric)?;
        let mut lists = tuples
            .par_iter()
            .map(|t| rank_for_tuple(t, &descriptors, model.select(t.category.as_deref())))
            .collect::<Result<Vec<_>>>()?;
        if let Some(k) = k {
            for l in &mut lists {
                l.entries.truncate(k);
            }
        }
        let path = self.dir(&self.cfg.paths.reports).join(format!("{variant}-{metric}-ranked.csv"));
        let mut csv = format!("# config_hash={} seed={}\n", self.stamp.config_hash, self.seed);
        csv.push_str(&ranked_lists_csv(&lists));
        write_atomic(&path, csv.as_bytes())?;
        Ok((path, lists))
    }

    pub fn eval(&self, variant: Option<Variant>, metric: Option<MetricVariant>, k: Option<usize>) -> Result<EvalArtifact> {
        let variant = self.resolve_variant(variant)?;
        let metric = self.resolve_metric(metric)?;
        let k = k.unwrap_or(self.cfg.eval.k);
        if !(1..=REPORT_MAX_K).contains(&k) {
            return Err(Error::InvalidConfig(format!("k must lie in 1..={REPORT_MAX_K}, got {k}")));
        }
        let (tuples, descriptors, model) = self.load_for_eval(variant, metric)?;
        let (report, _) = evaluate(&tuples, &descriptors, &model)?;
        let artifact = EvalArtifact { stamp: self.stamp.clone(), k, map_at_k_selected: report.global.at(k), report };
        write_json(&self.dir(&self.cfg.paths.reports).join(format!("{variant}-{metric}-eval.json")), &artifact)?;
        Ok(artifact)
    }

    /// Monte-Carlo MAP@K of random rankings for the configured tuple shape.
    pub fn random_baseline(&self) -> Result<BaselineArtifact> {
        let s = &self.cfg.synth;
        let (candidates, relevant) = (s.boards_pos + s.boards_neg, s.boards_pos);
        let trials = self.cfg.eval.baseline_trials;
        let map_at_k = (1..=REPORT_MAX_K).map(|k| random_baseline_map(candidates, relevant, k, trials, self.seed)).collect();
        let artifact = BaselineArtifact { stamp: self.stamp.clone(), candidates, relevant, trials, map_at_k };
        write_json(&self.dir(&self.cfg.paths.reports).join("random-baseline.json"), &artifact)?;
        Ok(artifact)
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    let r = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    match r {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_dataset_features(dir: &Path, collections: &[ImageCollection]) -> Result<()> {
    let rows: Vec<&ImageFeature> = collections.iter().flat_map(|c| &c.members).collect();
    let d = rows.first().map_or(0, |f| f.values.len());
    let m = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flat_map(|f| f.values.iter().copied()));
    write_atomic(&dir.join("features.cfm"), &encode_matrix(&m))?;
    let records: Vec<CollectionRecord> = collections
        .iter()
        .map(|c| CollectionRecord {
            collection_id: c.collection_id.clone(),
            category: c.category.clone(),
            title: c.title.clone(),
            images: c.members.iter().map(|m| m.image_id.clone()).collect(),
        })
        .collect();
    write_jsonl(&dir.join("collections.jsonl"), &records)
}

/// Learns one sub-dictionary per feature unit from every member image.
/// Returns the block dictionary and the per-unit objective traces.
pub fn learn_block_dictionary(
    collections: &[ImageCollection],
    schema: &FeatureSchema,
    opts: &DictLearnOptions,
) -> Result<(BlockDictionary, Vec<Vec<f64>>)> {
    let images: Vec<&ImageFeature> = collections.iter().flat_map(|c| &c.members).collect();
    if let Some(bad) = images.iter().find(|f| f.values.len() != schema.total_dim()) {
        return Err(Error::DimensionMismatch { expected: schema.total_dim(), got: bad.values.len() });
    }
    let fits = schema
        .units()
        .par_iter()
        .enumerate()
        .map(|(u, unit)| {
            let span = schema.span(u);
            let data = DMatrix::from_fn(unit.dim, images.len(), |r, c| images[c].values[span.start + r]);
            let unit_opts = DictLearnOptions { seed: opts.seed.wrapping_add(u as u64), ..opts.clone() };
            learn_unit_dictionary(&unit.name, &data, &unit_opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let traces = fits.iter().map(|f| f.objective_trace.clone()).collect();
    let dict = assemble_block_diagonal(fits.into_iter().map(|f| f.dictionary).collect(), schema)?;
    Ok((dict, traces))
}

pub fn encode_all(collections: &[ImageCollection], dict: &BlockDictionary, variant: Variant, params: &EncodeParams) -> Result<Vec<CollectionDescriptor>> {
    collections.par_iter().map(|c| encode_collection(c, dict, variant, params)).collect()
}

/// Encodes every collection with its own λ, tuned for `target` density.
/// Collections whose band is not reached keep their nearest probe.
pub fn encode_tuned(
    collections: &[ImageCollection],
    dict: &BlockDictionary,
    variant: Variant,
    target: f64,
    tau: TauRule,
    solver: &SolverOptions,
) -> Result<(Vec<CollectionDescriptor>, Vec<TuningRecord>)> {
    let out = collections
        .par_iter()
        .map(|c| {
            let (lambda, reached) = match tune_lambda_for_density(c, dict, variant, target, tau, solver) {
                Ok(t) => (t.lambda, true),
                Err(Error::TuningNotReached { lambda, density }) => {
                    warn!("collection {}: density band not reached, nearest {density:.3}", c.collection_id);
                    (lambda, false)
                }
                Err(e) => return Err(e),
            };
            let d = encode_collection(c, dict, variant, &EncodeParams { lambda, tau, solver: *solver })?;
            let rec = TuningRecord { collection_id: c.collection_id.clone(), lambda, density: d.density, reached };
            Ok((d, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

/// Seeded user split, stratified by the category of each user's first
/// tuple; returns sorted train and test user ids.
pub fn split_users(tuples: &[PreferenceTuple], train_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut by_cat: BTreeMap<Option<&str>, Vec<&str>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for t in tuples {
        if seen.insert(t.user_id.as_str()) {
            by_cat.entry(t.category.as_deref()).or_default().push(t.user_id.as_str());
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, users) in by_cat.values_mut().enumerate() {
        users.sort_unstable();
        crate::datagen::seeded_shuffle(users, seed.wrapping_add(i as u64));
        let n = users.len();
        let n_train = if n < 2 { n } else { ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1) };
        train.extend(users[..n_train].iter().map(|u| u.to_string()));
        test.extend(users[n_train..].iter().map(|u| u.to_string()));
    }
    train.sort();
    test.sort();
    (train, test)
}

/// Human-readable MAP@K table: the global curve, then one row per category.
pub fn format_eval_table(a: &EvalArtifact) -> String {
    let r = &a.report;
    let mut s = String::new();
    writeln!(s, "variant {}  metric {}  lists {}", r.variant, r.metric_variant, r.global.lists).unwrap();
    writeln!(s, "{:<4}{:>10}", "K", "MAP@K").unwrap();
    for (i, v) in r.global.map_at_k.iter().enumerate() {
        writeln!(s, "{:<4}{:>10.4}", i + 1, v).unwrap();
    }
    writeln!(s).unwrap();
    let header: String = (1..=REPORT_MAX_K).map(|k| format!("{:>8}", format!("@{k}"))).collect();
    writeln!(s, "{:<16}{header}", "category").unwrap();
    for (cat, e) in &r.per_category {
        let row: String = e.query_dependent.map_at_k.iter().map(|v| format!("{v:>8.4}")).collect();
        writeln!(s, "{cat:<16}{row}").unwrap();
    }
    let row: String = r.global.map_at_k.iter().map(|v| format!("{v:>8.4}")).collect();
    writeln!(s, "{:<16}{row}", "All (global)").unwrap();
    writeln!(s, "MAP@{} = {:.4}", a.k, a.map_at_k_selected).unwrap();
    s
}

/// Caps the rayon pool at `COLLECTION_FORGE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("cannot size the worker pool: {e}")))
}
