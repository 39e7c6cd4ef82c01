//! Seeded synthetic collections and the query-log mining simulation.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coder::ImageCollection;
use crate::features::{normalize_units, FeatureSchema, ImageFeature, RasterImage};
use crate::recommend::PreferenceTuple;
use crate::{Error, Result};

/// Minimum token count (exclusive) of a query kept by the miner.
pub const LONG_QUERY_TOKENS: usize = 3;
pub const DEFAULT_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub topics: usize,
    pub users: usize,
    pub clicked_per_user: usize,
    pub boards_pos: usize,
    pub boards_neg: usize,
    pub images_per_board: usize,
    /// Size of each topic's board pool that users draw from.
    pub boards_per_topic: usize,
    pub outlier_rate: f64,
    /// Per-image noise on the cleanest unit.
    pub noise_sigma: f64,
    /// Noise grows by this fraction of `noise_sigma` with every unit index.
    pub noise_slope: f64,
    /// Offset shared by all images of one collection.
    pub style_sigma: f64,
    /// Length of each topic's own direction next to the direction all
    /// topics share; larger values pull topic centers apart.
    pub separation: f64,
    pub units: usize,
    pub unit_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 8,
            users: 60,
            clicked_per_user: 20,
            boards_pos: 20,
            boards_neg: 40,
            images_per_board: 20,
            boards_per_topic: 30,
            outlier_rate: 0.1,
            noise_sigma: 0.2,
            noise_slope: 2.0,
            style_sigma: 0.05,
            separation: 1.0,
            units: 8,
            unit_dim: 8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.topics < 2 {
            return bad("at least two topics are required");
        }
        let counts = [
            self.users,
            self.clicked_per_user,
            self.boards_pos,
            self.boards_neg,
            self.images_per_board,
            self.boards_per_topic,
            self.units,
            self.unit_dim,
        ];
        if counts.contains(&0) {
            return bad("counts must be positive");
        }
        if self.boards_pos > self.boards_per_topic {
            return bad("boards_pos exceeds boards_per_topic");
        }
        if self.boards_neg > (self.topics - 1) * self.boards_per_topic {
            return bad("boards_neg exceeds the boards of the other topics");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_slope >= 0.0 && self.style_sigma >= 0.0 && self.separation >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::from_dims((0..self.units).map(|u| (format!("unit{u}"), self.unit_dim)))
    }

    fn unit_sigma(&self, unit: usize) -> f64 {
        self.noise_sigma * (1.0 + self.noise_slope * unit as f64)
    }
}

/// A user's search session: the query and the id of the clicked image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub user_id: String,
    pub query: Vec<String>,
    pub clicked: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardTitle {
    pub id: String,
    pub title: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub schema: FeatureSchema,
    /// Boards followed by the clicked sets.
    pub collections: Vec<ImageCollection>,
    pub tuples: Vec<PreferenceTuple>,
    /// Topic label of every collection.
    pub categories: BTreeMap<String, String>,
    pub records: Vec<MiningRecord>,
    /// Unit-normalized latent center of each topic.
    pub centers: Vec<DVector<f64>>,
}

impl SyntheticDataset {
    pub fn boards(&self) -> Vec<BoardTitle> {
        self.collections
            .iter()
            .filter(|c| board_topic(&c.collection_id).is_some())
            .map(|c| BoardTitle { id: c.collection_id.clone(), title: c.title.clone() })
            .collect()
    }
}

pub fn topic_name(t: usize) -> String {
    format!("topic-{t}")
}

pub fn board_id(topic: usize, b: usize) -> String {
    format!("board-t{topic:02}-{b:03}")
}

fn board_topic(id: &str) -> Option<usize> {
    id.strip_prefix("board-t")?.get(..2)?.parse().ok()
}

pub fn clicked_id(user: usize) -> String {
    format!("click-u{user:04}")
}

/// Independent stream per (purpose, index) so parallel generation does not
/// depend on scheduling.
fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const DOMAIN_CENTERS: u64 = 1;
const DOMAIN_BOARDS: u64 = 2;
const DOMAIN_USERS: u64 = 3;
const DOMAIN_LABELED: u64 = 4;
const DOMAIN_RASTER: u64 = 5;

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ra", "su", "te", "vo", "ne", "pi", "du", "zan", "bel"];
const PHRASE_LEN: usize = 6;

fn word(n: usize) -> String {
    let mut n = n + SYLLABLES.len();
    let mut parts = Vec::new();
    while n > 0 {
        parts.push(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    parts.concat()
}

/// The fixed token phrase of a topic; queries and titles are windows of it.
pub fn topic_phrase(topic: usize) -> Vec<String> {
    (0..PHRASE_LEN).map(|j| word(topic * PHRASE_LEN + j)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Per unit, `normalize(shared + separation · own_t)` with the `own_t`
/// orthonormal when the unit has room for all topics.
fn topic_centers(cfg: &SynthConfig, schema: &FeatureSchema) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(cfg.seed, DOMAIN_CENTERS, 0);
    let mut centers = vec![DVector::zeros(schema.total_dim()); cfg.topics];
    for span in schema.spans() {
        let d = span.len();
        let shared = gaussian(&mut rng, d).normalize();
        let raw = DMatrix::from_fn(d, cfg.topics, |_, _| StandardNormal.sample(&mut rng));
        let own = if cfg.topics <= d {
            raw.qr().q()
        } else {
            let mut m = raw;
            for mut c in m.column_iter_mut() {
                c.normalize_mut();
            }
            m
        };
        for (t, c) in centers.iter_mut().enumerate() {
            let v = (&shared + own.column(t) * cfg.separation).normalize();
            c.rows_range_mut(span.clone()).copy_from(&v);
        }
    }
    centers
}

/// Draws the images of one collection of topic `topic`.
fn sample_images(
    cfg: &SynthConfig,
    schema: &FeatureSchema,
    centers: &[DVector<f64>],
    topic: usize,
    count: usize,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<ImageFeature> {
    let d = schema.total_dim();
    let style = gaussian(rng, d) * cfg.style_sigma;
    (0..count)
        .map(|i| {
            let outlier = cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate;
            let (source, offset) = if outlier {
                let other = (topic + 1 + rng.random_range(0..cfg.topics - 1)) % cfg.topics;
                (other, DVector::zeros(d))
            } else {
                (topic, style.clone())
            };
            let mut v = &centers[source] + offset;
            for (u, span) in schema.spans().into_iter().enumerate() {
                let sigma = cfg.unit_sigma(u);
                for j in span {
                    let z: f64 = StandardNormal.sample(rng);
                    v[j] += sigma * z;
                }
            }
            let mut values: Vec<f64> = v.iter().copied().collect();
            normalize_units(&mut values, schema);
            ImageFeature { image_id: format!("{id}/img{i:03}"), values }
        })
        .collect()
}

fn board_title(topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let phrase = topic_phrase(topic);
    let len = rng.random_range(2..=4);
    let start = rng.random_range(0..=PHRASE_LEN - len);
    let mut title = vec!["my".to_string()];
    title.extend_from_slice(&phrase[start..start + len]);
    if rng.random::<bool>() {
        title.push("board".into());
    }
    title
}

fn user_query(topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let phrase = topic_phrase(topic);
    let len = rng.random_range(LONG_QUERY_TOKENS + 1..=5);
    let start = rng.random_range(0..=PHRASE_LEN - len);
    phrase[start..start + len].to_vec()
}

/// Topic-structured boards, clicked sets and preference tuples.
///
/// Every user belongs to topic `user mod topics`; `B⁺` is drawn from the
/// user's topic pool and `B⁻` from the other topics' boards.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let centers = topic_centers(cfg, &schema);

    let board_keys: Vec<(usize, usize)> =
        (0..cfg.topics).flat_map(|t| (0..cfg.boards_per_topic).map(move |b| (t, b))).collect();
    let boards: Vec<ImageCollection> = board_keys
        .par_iter()
        .enumerate()
        .map(|(n, &(t, b))| {
            let mut rng = stream_rng(cfg.seed, DOMAIN_BOARDS, n as u64);
            let id = board_id(t, b);
            let title = board_title(t, &mut rng);
            let members = sample_images(cfg, &schema, &centers, t, cfg.images_per_board, &id, &mut rng);
            ImageCollection { collection_id: id, members, category: Some(topic_name(t)), title }
        })
        .collect();

    let users: Vec<(ImageCollection, PreferenceTuple, MiningRecord)> = (0..cfg.users)
        .into_par_iter()
        .map(|u| {
            let mut rng = stream_rng(cfg.seed, DOMAIN_USERS, u as u64);
            let t = u % cfg.topics;
            let user_id = format!("user-{u:04}");
            let id = clicked_id(u);
            let query = user_query(t, &mut rng);
            let members = sample_images(cfg, &schema, &centers, t, cfg.clicked_per_user, &id, &mut rng);
            let positive = index::sample(&mut rng, cfg.boards_per_topic, cfg.boards_pos)
                .into_iter()
                .map(|b| board_id(t, b))
                .collect();
            let others = (cfg.topics - 1) * cfg.boards_per_topic;
            let negative = index::sample(&mut rng, others, cfg.boards_neg)
                .into_iter()
                .map(|n| {
                    let (k, b) = (n / cfg.boards_per_topic, n % cfg.boards_per_topic);
                    board_id((t + 1 + k) % cfg.topics, b)
                })
                .collect();
            let category = Some(topic_name(t));
            let clicked = ImageCollection { collection_id: id.clone(), members, category: category.clone(), title: query.clone() };
            let tuple = PreferenceTuple {
                user_id: user_id.clone(),
                query: query.clone(),
                clicked: id.clone(),
                positive,
                negative,
                category: category.clone(),
            };
            let record = MiningRecord { user_id, query, clicked: id, category };
            (clicked, tuple, record)
        })
        .collect();

    let mut collections = boards;
    let mut tuples = Vec::with_capacity(users.len());
    let mut records = Vec::with_capacity(users.len());
    for (c, t, r) in users {
        collections.push(c);
        tuples.push(t);
        records.push(r);
    }
    let categories = collections
        .iter()
        .map(|c| (c.collection_id.clone(), c.category.clone().unwrap_or_default()))
        .collect();
    Ok(SyntheticDataset { schema, collections, tuples, categories, records, centers })
}

/// `per_topic` labeled collections per topic, for categorization
/// experiments. Collection sizes follow `images_per_board`.
pub fn generate_labeled_collections(cfg: &SynthConfig, per_topic: usize) -> Result<Vec<ImageCollection>> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let centers = topic_centers(cfg, &schema);
    Ok((0..cfg.topics * per_topic)
        .into_par_iter()
        .map(|n| {
            let t = n % cfg.topics;
            let mut rng = stream_rng(cfg.seed, DOMAIN_LABELED, n as u64);
            let id = format!("coll-{n:04}");
            let members = sample_images(cfg, &schema, &centers, t, cfg.images_per_board, &id, &mut rng);
            ImageCollection { collection_id: id, members, category: Some(topic_name(t)), title: Vec::new() }
        })
        .collect())
}

/// Small PPM renderings for the image-feature path: every topic has a base
/// color and gradient direction, images jitter both.
pub fn render_topic_image(topic: usize, topics: usize, size: usize, rng: &mut impl Rng) -> RasterImage {
    let hue = topic as f64 / topics.max(1) as f64;
    let base = hue_to_rgb(hue);
    let jitter = |c: f64, rng: &mut dyn rand::RngCore| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    let base = [jitter(base[0], rng), jitter(base[1], rng), jitter(base[2], rng)];
    let angle = hue * std::f64::consts::TAU + rng.random_range(-0.2..0.2);
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (size as f64 - 1.0) / 2.0;
    RasterImage::from_fn(size, size, |x, y| {
        let g = ((x as f64 - half) * dx + (y as f64 - half) * dy) / size as f64;
        let shade = (0.75 + 0.5 * g).clamp(0.0, 1.0);
        base.map(|c| (c * shade * 255.0).round() as u8)
    })
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// An image set rendered to rasters.
#[derive(Debug, Clone)]
pub struct RasterCollection {
    pub collection_id: String,
    pub category: String,
    pub images: Vec<(String, RasterImage)>,
}

/// Raster counterparts of `collections`: same ids, labels and sizes, with
/// every image rendered from its topic (or, for outliers, another topic).
pub fn render_raster_collections(cfg: &SynthConfig, collections: &[ImageCollection], size: usize) -> Result<Vec<RasterCollection>> {
    cfg.validate()?;
    if size == 0 {
        return Err(Error::InvalidConfig("raster size must be positive".into()));
    }
    collections
        .par_iter()
        .enumerate()
        .map(|(n, c)| {
            let category = c.category.clone().unwrap_or_default();
            let t = category
                .strip_prefix("topic-")
                .and_then(|t| t.parse::<usize>().ok())
                .filter(|&t| t < cfg.topics)
                .ok_or_else(|| Error::InvalidConfig(format!("collection {} has no synthetic topic", c.collection_id)))?;
            let mut rng = stream_rng(cfg.seed, DOMAIN_RASTER, n as u64);
            let images = c
                .members
                .iter()
                .map(|m| {
                    let outlier = rng.random::<f64>() < cfg.outlier_rate;
                    let topic = if outlier { (t + 1 + rng.random_range(0..cfg.topics - 1)) % cfg.topics } else { t };
                    (m.image_id.clone(), render_topic_image(topic, cfg.topics, size, &mut rng))
                })
                .collect();
            Ok(RasterCollection { collection_id: c.collection_id.clone(), category, images })
        })
        .collect()
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Length of the longest contiguous run of tokens shared by `a` and `b`.
pub fn lccs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningOptions {
    /// Size of `B⁻` per tuple (fewer when not enough candidates exist).
    pub negatives: usize,
    pub seed: u64,
}

impl Default for MiningOptions {
    fn default() -> Self {
        MiningOptions { negatives: 40, seed: 0 }
    }
}

/// Turns search sessions into preference tuples.
///
/// Only long queries are kept. `B⁺` holds the boards with the highest
/// nonzero LCCS against the query; `B⁻` is sampled from boards matched by
/// other queries. The output does not depend on the order of `boards`.
pub fn mine_preferences(records: &[MiningRecord], boards: &[BoardTitle], opts: &MiningOptions) -> Vec<PreferenceTuple> {
    let mut sorted: Vec<&BoardTitle> = boards.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let long: Vec<(usize, &MiningRecord)> =
        records.iter().enumerate().filter(|(_, r)| r.query.len() > LONG_QUERY_TOKENS).collect();
    if long.is_empty() {
        warn!("no query longer than {LONG_QUERY_TOKENS} tokens; nothing mined");
        return Vec::new();
    }
    let matches: Vec<Vec<&str>> = long
        .iter()
        .map(|(_, r)| {
            let scores: Vec<usize> = sorted.iter().map(|b| lccs(&r.query, &b.title)).collect();
            let best = scores.iter().copied().max().unwrap_or(0);
            if best == 0 {
                return Vec::new();
            }
            sorted.iter().zip(&scores).filter(|(_, &s)| s == best).map(|(b, _)| b.id.as_str()).collect()
        })
        .collect();
    long.iter()
        .zip(&matches)
        .enumerate()
        .filter(|(_, (_, pos))| !pos.is_empty())
        .map(|(i, ((n, r), pos))| {
            let own: BTreeSet<&str> = pos.iter().copied().collect();
            let pool: Vec<&str> = matches
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, m)| m.iter().copied())
                .filter(|id| !own.contains(id))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut rng = stream_rng(opts.seed, DOMAIN_USERS, *n as u64);
            let mut negative: Vec<String> =
                pool.choose_multiple(&mut rng, opts.negatives.min(pool.len())).map(|s| s.to_string()).collect();
            negative.sort();
            PreferenceTuple {
                user_id: r.user_id.clone(),
                query: r.query.clone(),
                clicked: r.clicked.clone(),
                positive: pos.iter().map(|s| s.to_string()).collect(),
                negative,
                category: r.category.clone(),
            }
        })
        .collect()
}

/// Indices of the entries not above the nearest-rank `p`-th percentile.
pub fn percentile_filter(counts: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::InvalidConfig(format!("percentile must lie in (0, 100), got {p}")));
    }
    if counts.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = nearest_rank(counts, p);
    Ok((0..counts.len()).filter(|&i| counts[i] <= threshold).collect())
}

/// Nearest-rank percentile: the `⌈p·n/100⌉`-th smallest value.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Shuffles `ids` with a seed, for splitting users or collections.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SynthConfig {
        SynthConfig { users: 16, boards_per_topic: 25, ..Default::default() }
    }

    #[test]
    fn default_shape() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.tuples.len(), 60);
        let by_id: BTreeMap<&str, &ImageCollection> = ds.collections.iter().map(|c| (c.collection_id.as_str(), c)).collect();
        for t in &ds.tuples {
            assert_eq!(by_id[t.clicked.as_str()].members.len(), 20);
            assert_eq!(t.positive.len(), 20);
            assert_eq!(t.negative.len(), 40);
            for b in t.positive.iter().chain(&t.negative) {
                assert_eq!(by_id[b.as_str()].members.len(), 20);
            }
            t.validate().unwrap();
            let topic = &ds.categories[&t.clicked];
            assert!(t.positive.iter().all(|b| &ds.categories[b] == topic));
            assert!(t.negative.iter().all(|b| &ds.categories[b] != topic));
        }
        assert_eq!(ds.schema.total_dim(), 64);
    }

    #[test]
    fn noiseless_images_equal_centers() {
        let cfg = SynthConfig { outlier_rate: 0.0, noise_sigma: 0.0, style_sigma: 0.0, ..small() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        for c in &ds.collections {
            let t: usize = c.category.as_ref().unwrap()["topic-".len()..].parse().unwrap();
            for m in &c.members {
                let diff = (DVector::from_column_slice(&m.values) - &ds.centers[t]).amax();
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn outliers_come_from_other_topics() {
        let cfg = SynthConfig { outlier_rate: 1.0, noise_sigma: 0.0, style_sigma: 0.0, ..small() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let c = &ds.collections[0];
        for m in &c.members {
            let v = DVector::from_column_slice(&m.values);
            let nearest = (0..cfg.topics).find(|&t| (&v - &ds.centers[t]).amax() < 1e-12).unwrap();
            assert_ne!(nearest, 0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a.collections, b.collections);
        assert_eq!(a.tuples, b.tuples);
        let c = generate_synthetic_dataset(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.collections, c.collections);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { topics: 1, ..Default::default() },
            SynthConfig { users: 0, ..Default::default() },
            SynthConfig { outlier_rate: 1.5, ..Default::default() },
            SynthConfig { boards_pos: 31, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn labeled_collections_are_balanced() {
        let cs = generate_labeled_collections(&small(), 3).unwrap();
        assert_eq!(cs.len(), 24);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in &cs {
            *counts.entry(c.category.clone().unwrap()).or_default() += 1;
        }
        assert!(counts.values().all(|&n| n == 3));
    }

    #[test]
    fn raster_mode_mirrors_collections() {
        let cfg = SynthConfig { users: 4, boards_per_topic: 2, boards_pos: 2, boards_neg: 5, images_per_board: 3, clicked_per_user: 2, ..Default::default() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let cs = render_raster_collections(&cfg, &ds.collections, 32).unwrap();
        assert_eq!(cs.len(), 20);
        for (r, c) in cs.iter().zip(&ds.collections) {
            assert_eq!(r.collection_id, c.collection_id);
            assert_eq!(r.images.len(), c.members.len());
            assert!(r.images.iter().all(|(_, img)| img.width() == 32 && img.height() == 32));
        }
    }

    #[test]
    fn lccs_examples() {
        assert_eq!(lccs(&tokenize("red rose garden"), &tokenize("my red rose garden board")), 3);
        assert_eq!(lccs(&tokenize("a b"), &tokenize("c d")), 0);
        assert_eq!(lccs(&tokenize("a b c d"), &tokenize("x b c y")), 2);
        assert_eq!(lccs::<&str>(&[], &["a"]), 0);
    }

    #[test]
    fn tokenization_lowercases() {
        assert_eq!(tokenize("  Red ROSE\tgarden "), ["red", "rose", "garden"]);
    }

    fn record(user: &str, q: &str) -> MiningRecord {
        MiningRecord { user_id: user.into(), query: tokenize(q), clicked: format!("c-{user}"), category: None }
    }

    fn board(id: &str, t: &str) -> BoardTitle {
        BoardTitle { id: id.into(), title: tokenize(t) }
    }

    #[test]
    fn short_queries_are_excluded() {
        let boards = [board("b1", "red rose garden")];
        assert!(mine_preferences(&[record("u", "red rose garden")], &boards, &MiningOptions::default()).is_empty());
        assert_eq!(mine_preferences(&[record("u", "red rose garden ideas")], &boards, &MiningOptions::default()).len(), 1);
    }

    #[test]
    fn only_highest_lccs_matches_are_positive() {
        let boards = [board("b4", "x old red rose garden y"), board("b2", "red rose z"), board("b0", "unrelated")];
        let out = mine_preferences(&[record("u", "old red rose garden")], &boards, &MiningOptions::default());
        assert_eq!(out[0].positive, ["b4"]);
    }

    #[test]
    fn negatives_come_from_other_queries() {
        let boards = [
            board("a1", "blue sea shore view"),
            board("a2", "my blue sea shore view"),
            board("b1", "old red rose garden"),
            board("c1", "unmatched"),
        ];
        let records = [record("u1", "blue sea shore view"), record("u2", "old red rose garden")];
        let out = mine_preferences(&records, &boards, &MiningOptions { negatives: 5, seed: 3 });
        assert_eq!(out[0].positive, ["a1", "a2"]);
        assert_eq!(out[0].negative, ["b1"]);
        assert_eq!(out[1].negative, ["a1", "a2"]);
    }

    #[test]
    fn empty_percentile_input() {
        assert!(percentile_filter(&[], 95.0).unwrap().is_empty());
        assert!(percentile_filter(&[1.0], 0.0).is_err());
        assert!(percentile_filter(&[1.0], 100.0).is_err());
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let kept = percentile_filter(&v, 95.0).unwrap();
        assert_eq!(kept, (0..95).collect::<Vec<_>>());
        assert_eq!(percentile_filter(&[4.0; 7], 95.0).unwrap().len(), 7);
    }

    proptest! {
        #[test]
        fn lccs_properties(a in proptest::collection::vec(0u8..4, 0..10), b in proptest::collection::vec(0u8..4, 0..10)) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let l = lccs(&a, &b);
            prop_assert_eq!(l, lccs(&b, &a));
            prop_assert!(l <= a.len().min(b.len()));
            prop_assert_eq!(lccs(&a, &a), a.len());
        }

        #[test]
        fn mining_ignores_board_order(seed in 0u64..1000) {
            let ds = generate_synthetic_dataset(&SynthConfig { users: 12, boards_per_topic: 20, ..Default::default() }).unwrap();
            let boards = ds.boards();
            let mut shuffled = boards.clone();
            seeded_shuffle(&mut shuffled, seed);
            let opts = MiningOptions { negatives: 10, seed: 1 };
            prop_assert_eq!(mine_preferences(&ds.records, &boards, &opts), mine_preferences(&ds.records, &shuffled, &opts));
        }
    }
}
