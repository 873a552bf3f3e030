//! Benchmark construction: query templates, same-string merging for
//! text-to-region queries, and seeded per-category quota sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Box, ImageSize};
use crate::records::AnnotationRecord;
use crate::rng::Pcg32;
use crate::textnorm::{canonicalize_t2r, normalize_ws};

/// Seed used for the released benchmark.
pub const DEFAULT_SEED: u64 = 42;

/// Per-direction quotas are floored to a multiple of this.
pub const QUOTA_GRANULARITY: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("annotations span several images ({0} and {1})")]
    MixedImages(String, String),
    #[error("category {category}: r2t quota {r2t} differs from t2r quota {t2r}")]
    QuotaParity { category: String, r2t: u32, t2r: u32 },
    #[error("query {0}: {1}")]
    InvalidQuery(String, String),
    #[error("invalid image size in `{0}`")]
    InvalidImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    SceneText,
    Receipt,
    Ticket,
    WarehouseSlip,
    Report,
    ChineseDocument,
    Book,
    Poster,
    Notice,
    PriceTag,
    Invoice,
    Certificate,
}

impl Category {
    pub const ALL: [Category; 12] = [
        Category::SceneText,
        Category::Receipt,
        Category::Ticket,
        Category::WarehouseSlip,
        Category::Report,
        Category::ChineseDocument,
        Category::Book,
        Category::Poster,
        Category::Notice,
        Category::PriceTag,
        Category::Invoice,
        Category::Certificate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::SceneText => "SceneText",
            Category::Receipt => "Receipt",
            Category::Ticket => "Ticket",
            Category::WarehouseSlip => "WarehouseSlip",
            Category::Report => "Report",
            Category::ChineseDocument => "ChineseDocument",
            Category::Book => "Book",
            Category::Poster => "Poster",
            Category::Notice => "Notice",
            Category::PriceTag => "PriceTag",
            Category::Invoice => "Invoice",
            Category::Certificate => "Certificate",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| BenchError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    R2T,
    T2R,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::R2T => "r2t",
            Direction::T2R => "t2r",
        }
    }
}

/// One grounded annotation from the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub image: ImageSize,
    pub bbox: Box,
    pub transcript: String,
    pub category: Category,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub query_id: String,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub direction: Direction,
    pub prompt: String,
    pub category: Category,
    /// Queried region of a region-to-text query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Box>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2t_target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2r_targets: Option<Vec<Box>>,
}

impl BenchQuery {
    pub fn image_size(&self) -> Result<ImageSize, BenchError> {
        ImageSize::new(self.width, self.height).map_err(|_| BenchError::InvalidImage(self.query_id.clone()))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.image_size()?;
        let bad = |msg: &str| Err(BenchError::InvalidQuery(self.query_id.clone(), msg.into()));
        match self.direction {
            Direction::R2T => {
                if self.t2r_targets.is_some() {
                    return bad("r2t query carries t2r targets");
                }
                match &self.r2t_target {
                    Some(t) if !t.is_empty() => {}
                    _ => return bad("r2t query without target"),
                }
                if self.region.is_none() {
                    return bad("r2t query without region");
                }
            }
            Direction::T2R => {
                if self.r2t_target.is_some() {
                    return bad("t2r query carries an r2t target");
                }
                match &self.t2r_targets {
                    Some(t) if !t.is_empty() => {}
                    _ => return bad("t2r query without target boxes"),
                }
            }
        }
        Ok(())
    }
}

/// Formats a coordinate with one fractional digit, e.g. `201.0`.
pub fn format_coord(v: f64) -> String {
    format!("{v:.1}")
}

pub fn r2t_prompt(coords: [String; 4]) -> String {
    format!(
        "What is the text at location [{}, {}, {}, {}]?",
        coords[0], coords[1], coords[2], coords[3]
    )
}

pub fn t2r_prompt(text: &str) -> String {
    format!("Where is \"{text}\" located in the image?")
}

fn query_id(image_id: &str, dir: Direction, index: usize) -> String {
    format!("{image_id}/{}/{index:05}", dir.tag())
}

fn r2t_query(ann: &Annotation, index: usize) -> BenchQuery {
    let b = ann.bbox.to_array().map(format_coord);
    BenchQuery {
        query_id: query_id(&ann.image_id, Direction::R2T, index),
        image_id: ann.image_id.clone(),
        width: ann.image.width,
        height: ann.image.height,
        direction: Direction::R2T,
        prompt: r2t_prompt(b),
        category: ann.category,
        region: Some(ann.bbox),
        r2t_target: Some(ann.transcript.clone()),
        t2r_targets: None,
    }
}

/// Region-to-text query for one annotation. The target is the raw transcript;
/// normalization happens at scoring time.
pub fn make_r2t_query(ann: &Annotation) -> BenchQuery {
    r2t_query(ann, 0)
}

/// Merges the annotations of one image by canonical text into text-to-region
/// queries. Groups appear in first-seen order; the prompt uses the group's
/// first raw transcript; groups with an empty key are dropped.
pub fn make_t2r_queries(anns: &[Annotation]) -> Result<Vec<BenchQuery>, BenchError> {
    let Some(first) = anns.first() else {
        return Ok(Vec::new());
    };
    let mut groups: Vec<(&Annotation, Vec<Box>)> = Vec::new();
    let mut by_key: HashMap<String, usize> = HashMap::new();
    for ann in anns {
        if ann.image_id != first.image_id {
            return Err(BenchError::MixedImages(first.image_id.clone(), ann.image_id.clone()));
        }
        let key = canonicalize_t2r(&ann.transcript);
        if key.is_empty() {
            continue;
        }
        let slot = *by_key.entry(key).or_insert_with(|| {
            groups.push((ann, Vec::new()));
            groups.len() - 1
        });
        let boxes = &mut groups[slot].1;
        if !boxes.iter().any(|b| iou(b, &ann.bbox) >= 1.0) {
            boxes.push(ann.bbox);
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, (head, boxes))| BenchQuery {
            query_id: query_id(&head.image_id, Direction::T2R, i),
            image_id: head.image_id.clone(),
            width: head.image.width,
            height: head.image.height,
            direction: Direction::T2R,
            prompt: t2r_prompt(&head.transcript),
            category: head.category,
            region: None,
            r2t_target: None,
            t2r_targets: Some(boxes),
        })
        .collect())
}

/// Warnings raised while turning pool records into annotations.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolWarning {
    DegenerateBox { image: String, item: usize },
    EmptyTranscript { image: String, item: usize },
}

/// Converts one pool record into annotations, dropping degenerate boxes and
/// blank transcripts.
pub fn annotations_from_record(
    rec: &AnnotationRecord,
    warnings: &mut Vec<PoolWarning>,
) -> Result<Vec<Annotation>, BenchError> {
    let category: Category = rec.category.parse()?;
    let image = ImageSize::new(rec.width, rec.height).map_err(|_| BenchError::InvalidImage(rec.image.clone()))?;
    let mut out = Vec::with_capacity(rec.items.len());
    for (i, item) in rec.items.iter().enumerate() {
        let Ok(bbox) = Box::from_array(item.bbox) else {
            warnings.push(PoolWarning::DegenerateBox {
                image: rec.image.clone(),
                item: i,
            });
            continue;
        };
        if normalize_ws(&item.text).is_empty() {
            warnings.push(PoolWarning::EmptyTranscript {
                image: rec.image.clone(),
                item: i,
            });
            continue;
        }
        out.push(Annotation {
            image_id: rec.image.clone(),
            image,
            bbox,
            transcript: item.text.clone(),
            category,
            source: rec.source.clone(),
        });
    }
    Ok(out)
}

/// Per-category target counts, identical for both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuotaSpec(pub BTreeMap<Category, u32>);

impl QuotaSpec {
    /// Released per-direction counts of the twelve categories (2,725 each).
    pub fn released() -> Self {
        let counts = [1380, 280, 230, 195, 140, 135, 105, 90, 60, 40, 40, 30];
        QuotaSpec(Category::ALL.into_iter().zip(counts).collect())
    }

    pub fn get(&self, c: Category) -> u32 {
        self.0.get(&c).copied().unwrap_or(0)
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        serde_json::from_str(s).map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QuotaEntry {
    Both(u32),
    Split { r2t: u32, t2r: u32 },
}

impl<'de> Deserialize<'de> for QuotaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = BTreeMap::<String, QuotaEntry>::deserialize(d)?;
        let mut out = BTreeMap::new();
        for (name, entry) in raw {
            let cat: Category = name.parse().map_err(D::Error::custom)?;
            let n = match entry {
                QuotaEntry::Both(n) => n,
                QuotaEntry::Split { r2t, t2r } if r2t == t2r => r2t,
                QuotaEntry::Split { r2t, t2r } => {
                    return Err(D::Error::custom(BenchError::QuotaParity {
                        category: name,
                        r2t,
                        t2r,
                    }))
                }
            };
            out.insert(cat, n);
        }
        Ok(QuotaSpec(out))
    }
}

/// Candidate queries of the whole pool, sorted by `(image_id, index)`.
#[derive(Debug, Clone, Default)]
pub struct CandidatePool {
    pub r2t: BTreeMap<Category, Vec<BenchQuery>>,
    pub t2r: BTreeMap<Category, Vec<BenchQuery>>,
}

impl CandidatePool {
    /// Builds candidates from annotations in any order. Annotations of one
    /// image keep their relative order, which fixes their indices.
    pub fn build(anns: &[Annotation]) -> Result<Self, BenchError> {
        let mut by_image: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
        for a in anns {
            by_image.entry(&a.image_id).or_default().push(a.clone());
        }
        let mut pool = CandidatePool::default();
        for group in by_image.values() {
            for (i, a) in group.iter().enumerate() {
                pool.r2t.entry(a.category).or_default().push(r2t_query(a, i));
            }
            for q in make_t2r_queries(group)? {
                pool.t2r.entry(q.category).or_default().push(q);
            }
        }
        Ok(pool)
    }

    fn candidates(&self, c: Category, d: Direction) -> &[BenchQuery] {
        let map = match d {
            Direction::R2T => &self.r2t,
            Direction::T2R => &self.t2r,
        };
        map.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryCount {
    pub category: Category,
    pub quota: u32,
    pub r2t_pool: usize,
    pub t2r_pool: usize,
    /// Emitted per direction.
    pub sampled: usize,
}

#[derive(Debug, Clone)]
pub struct SampledBenchmark {
    pub queries: Vec<BenchQuery>,
    pub counts: Vec<CategoryCount>,
    /// Categories with a positive quota but no candidates in some direction.
    pub empty_categories: Vec<Category>,
}

/// Quota after capping by both candidate pools and flooring to a multiple of 5.
pub fn effective_quota(quota: u32, r2t_pool: usize, t2r_pool: usize) -> usize {
    let q = (quota as usize).min(r2t_pool).min(t2r_pool);
    q - q % QUOTA_GRANULARITY
}

/// Draws `k` of `items` without replacement with a partial Fisher-Yates
/// shuffle and returns the chosen indices in ascending order.
pub fn sample_indices(n: usize, k: usize, rng: &mut Pcg32) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + rng.below_usize(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx.sort_unstable();
    idx
}

/// Samples the benchmark. Categories are visited in their fixed order and
/// region-to-text before text-to-region, all from one generator.
pub fn sample_benchmark(pool: &CandidatePool, quota: &QuotaSpec, seed: u64) -> SampledBenchmark {
    let mut rng = Pcg32::seed_from(seed);
    let mut queries = Vec::new();
    let mut counts = Vec::new();
    let mut empty_categories = Vec::new();
    for cat in Category::ALL {
        let q = quota.get(cat);
        let r2t = pool.candidates(cat, Direction::R2T);
        let t2r = pool.candidates(cat, Direction::T2R);
        if q > 0 && (r2t.is_empty() || t2r.is_empty()) {
            warn!("category {cat} has no candidates in at least one direction; quota set to 0");
            empty_categories.push(cat);
        }
        let k = effective_quota(q, r2t.len(), t2r.len());
        for list in [r2t, t2r] {
            for i in sample_indices(list.len(), k, &mut rng) {
                queries.push(list[i].clone());
            }
        }
        if q > 0 || !r2t.is_empty() || !t2r.is_empty() {
            counts.push(CategoryCount {
                category: cat,
                quota: q,
                r2t_pool: r2t.len(),
                t2r_pool: t2r.len(),
                sampled: k,
            });
        }
    }
    SampledBenchmark {
        queries,
        counts,
        empty_categories,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(image: &str, b: [f64; 4], text: &str) -> Annotation {
        Annotation {
            image_id: image.into(),
            image: ImageSize::new(1000, 1000).unwrap(),
            bbox: Box::from_array(b).unwrap(),
            transcript: text.into(),
            category: Category::SceneText,
            source: "test".into(),
        }
    }

    #[test]
    fn r2t_prompt_matches_published_query() {
        let q = make_r2t_query(&ann("img", [201., 267., 256., 276.], "KS"));
        assert_eq!(q.prompt, "What is the text at location [201.0, 267.0, 256.0, 276.0]?");
        assert_eq!(q.r2t_target.as_deref(), Some("KS"));
        q.validate().unwrap();
    }

    #[test]
    fn r2t_target_is_raw_transcript() {
        let q = make_r2t_query(&ann("img", [1., 2., 3., 4.], "  Raw  Text "));
        assert_eq!(q.r2t_target.as_deref(), Some("  Raw  Text "));
        assert_eq!(q.prompt, "What is the text at location [1.0, 2.0, 3.0, 4.0]?");
    }

    #[test]
    fn t2r_merges_same_canonical_text() {
        let anns = vec![
            ann("i", [0., 0., 10., 10.], "EXIT"),
            ann("i", [20., 0., 30., 10.], "Hello!"),
            ann("i", [50., 50., 60., 60.], "EXIT"),
            ann("i", [70., 0., 80., 10.], "Hello"),
            ann("i", [90., 0., 95., 10.], "。，"),
        ];
        let qs = make_t2r_queries(&anns).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].prompt, "Where is \"EXIT\" located in the image?");
        assert_eq!(qs[0].t2r_targets.as_ref().unwrap().len(), 2);
        assert_eq!(qs[1].prompt, "Where is \"Hello!\" located in the image?");
        assert_eq!(qs[1].t2r_targets.as_ref().unwrap().len(), 2);
        for q in &qs {
            q.validate().unwrap();
        }
    }

    #[test]
    fn t2r_singleton_and_duplicate_boxes() {
        let qs = make_t2r_queries(&[ann("i", [0., 0., 10., 10.], "solo")]).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].t2r_targets.as_ref().unwrap().len(), 1);
        let dup = make_t2r_queries(&[ann("i", [0., 0., 10., 10.], "a"), ann("i", [0., 0., 10., 10.], "a")]).unwrap();
        assert_eq!(dup[0].t2r_targets.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn t2r_rejects_mixed_images() {
        let err = make_t2r_queries(&[ann("a", [0., 0., 1., 1.], "x"), ann("b", [0., 0., 1., 1.], "y")]);
        assert!(matches!(err, Err(BenchError::MixedImages(..))));
    }

    #[test]
    fn released_quotas_total() {
        let q = QuotaSpec::released();
        assert_eq!(q.get(Category::SceneText), 1380);
        assert_eq!(q.0.values().sum::<u32>(), 2725);
    }

    #[test]
    fn quota_floor_to_multiple_of_five() {
        assert_eq!(effective_quota(23, 100, 100), 20);
        assert_eq!(effective_quota(100, 23, 100), 20);
        assert_eq!(effective_quota(4, 100, 100), 0);
        assert_eq!(effective_quota(30, 0, 100), 0);
    }

    #[test]
    fn quota_json_forms() {
        let q = QuotaSpec::from_json(r#"{"Receipt": 10, "Book": {"r2t": 5, "t2r": 5}}"#).unwrap();
        assert_eq!(q.get(Category::Receipt), 10);
        assert_eq!(q.get(Category::Book), 5);
        assert!(QuotaSpec::from_json(r#"{"Book": {"r2t": 5, "t2r": 10}}"#).is_err());
        assert!(QuotaSpec::from_json(r#"{"Menu": 5}"#).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let anns: Vec<_> = (0..40)
            .map(|i| {
                ann(
                    &format!("img{:02}", i / 4),
                    [0., 0., 10. + i as f64, 10.],
                    &format!("t{i}"),
                )
            })
            .collect();
        let pool = CandidatePool::build(&anns).unwrap();
        let quota = QuotaSpec([(Category::SceneText, 23)].into_iter().collect());
        let a = sample_benchmark(&pool, &quota, 42);
        let b = sample_benchmark(&pool, &quota, 42);
        assert_eq!(a.queries, b.queries);
        let r2t = a.queries.iter().filter(|q| q.direction == Direction::R2T).count();
        let t2r = a.queries.iter().filter(|q| q.direction == Direction::T2R).count();
        assert_eq!((r2t, t2r), (20, 20));
        let c = sample_benchmark(&pool, &quota, 43);
        assert_ne!(a.queries, c.queries);
    }

    #[test]
    fn sampling_independent_of_ingestion_order() {
        let mut anns: Vec<_> = (0..30)
            .map(|i| {
                ann(
                    &format!("img{:02}", i / 3),
                    [0., 0., 10. + i as f64, 10.],
                    &format!("t{i}"),
                )
            })
            .collect();
        let quota = QuotaSpec([(Category::SceneText, 10)].into_iter().collect());
        let a = sample_benchmark(&CandidatePool::build(&anns).unwrap(), &quota, 42);
        // reverse image order but keep within-image order
        anns.reverse();
        let mut regrouped: Vec<Annotation> = Vec::new();
        for chunk in anns.chunks(3) {
            regrouped.extend(chunk.iter().rev().cloned());
        }
        let b = sample_benchmark(&CandidatePool::build(&regrouped).unwrap(), &quota, 42);
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn empty_category_warns() {
        let pool = CandidatePool::default();
        let quota = QuotaSpec([(Category::Invoice, 40)].into_iter().collect());
        let s = sample_benchmark(&pool, &quota, 42);
        assert!(s.queries.is_empty());
        assert_eq!(s.empty_categories, vec![Category::Invoice]);
    }

    #[test]
    fn partial_fisher_yates_picks_distinct() {
        let mut rng = Pcg32::seed_from(9);
        let s = sample_indices(50, 20, &mut rng);
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(3, 10, &mut rng), vec![0, 1, 2]);
    }
}
