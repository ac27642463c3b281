// SPDX-License-Identifier: Apache-2.0

//! Evaluation harness.
//!
//! Region classification (accuracy plus COCO-style AP), OCR/VQA answer
//! containment, the box-noise robustness sweep and the region referring
//! hallucination ratio. Everything runs against any [`Backend`]; with the
//! mock oracles it runs fully offline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendRequest, ChatTurn, GtIndex};
use crate::corpus::{read_jsonl, CorpusError, InstructionRecord};
use crate::geometry::{
    box_area_px, iou, normalize_region, perturb_box, size_bucket, ImageDims, Point, Region, RegionKind,
    SizeBucket,
};
use crate::instructgen::{Role, TaskKind, TemplateRegistry};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;
pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;
/// A misclassification counts as hallucination above this IoU.
pub const HALLUCINATION_IOU: f64 = 0.5;
pub const TRIGRAM_BINS: usize = 4096;
pub const DEFAULT_SCALES: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("metric cannot be computed: {0}")]
    Metric(String),
    #[error("embedding failed: {0}")]
    Embed(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Text matching

/// Maps text to a fixed-length unit vector.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError>;
}

/// Offline embedder: hashed character trigrams of space-padded words.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

pub fn trigram_fallback_embedder() -> TrigramEmbedder {
    TrigramEmbedder
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character trigrams of each lowercased word padded with one space per side.
pub fn trigrams(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(word.chars())
            .chain(std::iter::once(' '))
            .collect();
        out.extend(padded.windows(3).map(|w| w.iter().collect::<String>()));
    }
    out
}

impl Embedder for TrigramEmbedder {
    fn id(&self) -> String {
        "trigram-4096".into()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut v = vec![0.0; TRIGRAM_BINS];
        for t in trigrams(text) {
            v[(fnv1a64(t.as_bytes()) % TRIGRAM_BINS as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Embedder backed by an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(30)))
                .build()
                .into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(serde_json::json!({"model": self.model, "input": text}))
            .map_err(|e| EvalError::Embed(e.to_string()))?;
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EvalError::Embed(e.to_string()))?;
        let mut v = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EvalError::Embed("empty embedding response".into()))?
            .embedding;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Category vocabulary with embeddings computed once.
pub struct CategoryMatcher<'e> {
    embedder: &'e dyn Embedder,
    categories: Vec<(String, Vec<f64>)>,
}

impl<'e> CategoryMatcher<'e> {
    pub fn new(categories: &[String], embedder: &'e dyn Embedder) -> Result<Self, EvalError> {
        if categories.is_empty() {
            return Err(EvalError::Input("no categories to match against".into()));
        }
        let categories = categories
            .iter()
            .map(|c| Ok((c.clone(), embedder.embed(c)?)))
            .collect::<Result<_, EvalError>>()?;
        Ok(Self { embedder, categories })
    }

    /// Highest-cosine category; equal scores go to the lexicographically
    /// smallest name.
    pub fn best(&self, response: &str) -> Result<(String, f64), EvalError> {
        let r = self.embedder.embed(response)?;
        let mut best: Option<(&str, f64)> = None;
        for (name, v) in &self.categories {
            let s = cosine(&r, v);
            best = match best {
                Some((bn, bs)) if bs > s || (bs == s && bn <= name.as_str()) => Some((bn, bs)),
                _ => Some((name, s)),
            };
        }
        let (name, score) = best.expect("non-empty");
        Ok((name.to_string(), score))
    }
}

pub fn match_class(
    response: &str,
    categories: &[String],
    embedder: &dyn Embedder,
) -> Result<(String, f64), EvalError> {
    CategoryMatcher::new(categories, embedder)?.best(response)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Containment {
    /// Plain substring of the normalized texts.
    #[default]
    Substring,
    /// The answer must cover whole tokens of the response.
    WordBoundary,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2026}' | '\u{2013}' | '\u{2014}' | '\u{ab}' | '\u{bb}' | '\u{bf}' | '\u{a1}'
        )
}

/// Casefolds, collapses whitespace and trims punctuation off every token.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_punct))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Containment of the normalized ground truth in the normalized response.
/// A ground truth that normalizes to nothing is never contained.
pub fn contains_answer(response: &str, gt: &str) -> bool {
    contains_answer_with(response, gt, Containment::Substring)
}

pub fn contains_answer_with(response: &str, gt: &str, mode: Containment) -> bool {
    let gt = normalize_answer(gt);
    if gt.is_empty() {
        return false;
    }
    let resp = normalize_answer(response);
    match mode {
        Containment::Substring => resp.contains(&gt),
        Containment::WordBoundary => format!(" {resp} ").contains(&format!(" {gt} ")),
    }
}

// ---------------------------------------------------------------------------
// Average precision

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Region,
    pub category: String,
    pub score: f64,
    /// Box area in source pixels, for the size buckets.
    pub area_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Region,
    pub category: String,
    pub area_px: f64,
}

/// AP columns in [0, 1]. Size-bucket entries are `None` when no ground
/// truth falls in the bucket.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP per IoU threshold, ascending.
    pub per_threshold: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching of one image/category at one threshold. `dets` are
/// already sorted by descending score.
fn match_image(
    dets: &[&Detection],
    gts: &[&GtBox],
    threshold: f64,
    bucket: Option<SizeBucket>,
) -> (Vec<Status>, usize) {
    let outside = |area: f64| bucket.is_some_and(|b| size_bucket(area) != b);
    // non-ignored ground truth first, so it wins over ignored ground truth
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| outside(gts[g].area_px));
    let ignored: Vec<bool> = order.iter().map(|&g| outside(gts[g].area_px)).collect();
    let n_pos = ignored.iter().filter(|&&i| !i).count();
    let mut matched = vec![false; gts.len()];
    let statuses = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (k, &g) in order.iter().enumerate() {
                if matched[k] {
                    continue;
                }
                if let Some((bk, _)) = best {
                    if !ignored[bk] && ignored[k] {
                        break;
                    }
                }
                let o = iou(&d.bbox, &gts[g].bbox).unwrap_or(0.0);
                if o < threshold {
                    continue;
                }
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((k, o));
                }
            }
            match best {
                Some((k, _)) => {
                    matched[k] = true;
                    if ignored[k] {
                        Status::Ignored
                    } else {
                        Status::Tp
                    }
                }
                None if outside(d.area_px) => Status::Ignored,
                None => Status::Fp,
            }
        })
        .collect();
    (statuses, n_pos)
}

/// 101-point interpolated precision from score-ordered TP/FP flags.
fn interpolated_ap(flags: &[bool], n_pos: usize) -> f64 {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut mean = 0.0;
    for (n, r) in (0..RECALL_POINTS).map(|i| i as f64 / 100.0).enumerate() {
        let idx = recall.partition_point(|&x| x < r);
        let q = precision.get(idx).copied().unwrap_or(0.0);
        mean += (q - mean) / (n + 1) as f64;
    }
    mean
}

struct CategoryData<'a> {
    /// image -> detections sorted by score, capped
    dets: BTreeMap<&'a str, Vec<(usize, &'a Detection)>>,
    gts: BTreeMap<&'a str, Vec<&'a GtBox>>,
}

/// AP for one category; `None` when it has no (non-ignored) ground truth.
fn category_ap(data: &CategoryData<'_>, threshold: f64, bucket: Option<SizeBucket>) -> Option<f64> {
    let mut scored: Vec<(f64, usize, Status)> = Vec::new();
    let mut n_pos = 0;
    let images: BTreeSet<&str> = data.dets.keys().chain(data.gts.keys()).copied().collect();
    for img in images {
        let dets = data.dets.get(img).map_or(&[][..], Vec::as_slice);
        let gts = data.gts.get(img).map_or(&[][..], Vec::as_slice);
        let refs: Vec<&Detection> = dets.iter().map(|(_, d)| *d).collect();
        let (statuses, pos) = match_image(&refs, gts, threshold, bucket);
        n_pos += pos;
        scored.extend(dets.iter().zip(statuses).map(|((i, d), s)| (d.score, *i, s)));
    }
    if n_pos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = scored
        .iter()
        .filter(|(_, _, s)| *s != Status::Ignored)
        .map(|(_, _, s)| *s == Status::Tp)
        .collect();
    Some(interpolated_ap(&flags, n_pos))
}

fn running_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mean = None;
    for (n, x) in values.into_iter().enumerate() {
        let m = mean.unwrap_or(0.0);
        mean = Some(m + (x - m) / (n + 1) as f64);
    }
    mean
}

/// COCO-style detection AP.
///
/// Per category and IoU threshold: detections are taken in descending score
/// order (ties by input order), each matched greedily to the unmatched
/// ground truth of its category with the highest IoU at or above the
/// threshold. Precision is interpolated at 101 recall levels. Categories
/// without ground truth are skipped. At most
/// [`MAX_DETECTIONS_PER_IMAGE`] detections per image and category count.
pub fn compute_ap(detections: &[Detection], gts: &[GtBox]) -> ApTable {
    let categories: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    let mut data: BTreeMap<&str, CategoryData<'_>> = categories
        .iter()
        .map(|&c| {
            (
                c,
                CategoryData {
                    dets: BTreeMap::new(),
                    gts: BTreeMap::new(),
                },
            )
        })
        .collect();
    for g in gts {
        data.get_mut(g.category.as_str())
            .expect("category from gts")
            .gts
            .entry(g.image_id.as_str())
            .or_default()
            .push(g);
    }
    for (i, d) in detections.iter().enumerate() {
        if let Some(cat) = data.get_mut(d.category.as_str()) {
            cat.dets.entry(d.image_id.as_str()).or_default().push((i, d));
        }
    }
    for cat in data.values_mut() {
        for list in cat.dets.values_mut() {
            list.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            list.truncate(MAX_DETECTIONS_PER_IMAGE);
        }
    }

    let mean_over = |threshold: f64, bucket: Option<SizeBucket>| {
        running_mean(data.values().filter_map(|c| category_ap(c, threshold, bucket)))
    };
    let per_threshold: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&t| mean_over(t, None).unwrap_or(0.0))
        .collect();
    let bucket_ap = |b: SizeBucket| {
        let per: Vec<Option<f64>> = IOU_THRESHOLDS.iter().map(|&t| mean_over(t, Some(b))).collect();
        per.iter().all(Option::is_some).then(|| running_mean(per.into_iter().flatten()).unwrap_or(0.0))
    };
    ApTable {
        ap: running_mean(per_threshold.iter().copied()).unwrap_or(0.0),
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ap_small: bucket_ap(SizeBucket::Small),
        ap_medium: bucket_ap(SizeBucket::Medium),
        ap_large: bucket_ap(SizeBucket::Large),
        per_threshold,
        accuracy: None,
    }
}

// ---------------------------------------------------------------------------
// Outcomes and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub record_id: String,
    pub image_uri: String,
    /// Region as sent to the backend, possibly perturbed.
    pub queried_region: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answer: Option<String>,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_class: Option<String>,
    pub match_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub correct: bool,
    pub hallucination: bool,
    /// Set when the backend call failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Failed calls stay in the denominator as incorrect.
    #[default]
    CountIncorrect,
    Exclude,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationDenominator {
    #[default]
    AllOutcomes,
    Misclassified,
}

/// How point referents are sent for text tasks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PointQuery {
    #[default]
    Point,
    /// A square of the given normalized side centred on the point.
    Box { side: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub workers: usize,
    pub failure_policy: FailurePolicy,
    pub containment: Containment,
    pub point_query: PointQuery,
    pub hallucination_denominator: HallucinationDenominator,
    pub config_fingerprint: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            failure_policy: FailurePolicy::default(),
            containment: Containment::default(),
            point_query: PointQuery::default(),
            hallucination_denominator: HallucinationDenominator::default(),
            config_fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub scale: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<ApTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub evaluated: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub dataset: String,
    pub backend: String,
    /// `gt`, or the boxes file for detector-box evaluation.
    pub region_source: String,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness_curve: Option<Vec<RobustnessPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details_file: Option<String>,
    pub tool_version: String,
    pub config_fingerprint: String,
}

/// A report plus the per-record outcomes it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<EvalOutcome>,
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), pct)
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn setting_label(scale: f64) -> String {
    if scale == 0.0 {
        "No noise".to_string()
    } else {
        format!("Box noise (s={scale})")
    }
}

impl EvalReport {
    /// Human-readable tables, percentages with one decimal.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task: {}  dataset: {}  backend: {}  regions: {}",
            self.task, self.dataset, self.backend, self.region_source
        );
        let _ = writeln!(
            out,
            "evaluated: {}  failed: {}  spotkit {}  config {}",
            self.metrics.evaluated, self.metrics.failed, self.tool_version, self.config_fingerprint
        );
        out.push('\n');
        if let Some(curve) = &self.robustness_curve {
            let rows: Vec<Vec<String>> = curve
                .iter()
                .map(|p| {
                    vec![
                        self.backend.clone(),
                        setting_label(p.scale),
                        pct(p.accuracy),
                        opt_pct(p.hallucination_ratio),
                    ]
                })
                .collect();
            out.push_str(&render_table(&["Model", "Setting", "Acc.", "Hallucination Ratio"], &rows));
            return out;
        }
        if let Some(ap) = &self.metrics.ap {
            let row = vec![
                self.backend.clone(),
                self.region_source.clone(),
                pct(ap.ap),
                pct(ap.ap50),
                pct(ap.ap75),
                opt_pct(ap.ap_small),
                opt_pct(ap.ap_medium),
                opt_pct(ap.ap_large),
                opt_pct(self.metrics.accuracy),
            ];
            out.push_str(&render_table(
                &["Model", "Region", "AP", "AP50", "AP75", "APs", "APm", "APl", "Acc."],
                &[row],
            ));
        } else {
            let row = vec![self.backend.clone(), self.dataset.clone(), opt_pct(self.metrics.accuracy)];
            out.push_str(&render_table(&["Model", "Dataset", "Acc."], &[row]));
        }
        if let Some(h) = self.hallucination_ratio {
            let _ = writeln!(out, "\nhallucination ratio: {}", pct(h));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

// ---------------------------------------------------------------------------
// Evaluation drivers

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

fn dataset_name(records: &[InstructionRecord]) -> String {
    let sources: BTreeSet<&str> = records.iter().map(|r| r.source.as_str()).collect();
    sources.into_iter().collect::<Vec<_>>().join("+")
}

fn accuracy(outcomes: &[EvalOutcome], policy: FailurePolicy) -> Option<f64> {
    let counted = outcomes
        .iter()
        .filter(|o| policy == FailurePolicy::CountIncorrect || o.error.is_none());
    let (mut n, mut hits) = (0usize, 0usize);
    for o in counted {
        n += 1;
        hits += usize::from(o.correct);
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Whether `matched` names another object overlapping `queried` above
/// [`HALLUCINATION_IOU`].
pub fn is_hallucination(
    queried: &Region,
    gt_class: &str,
    matched: &str,
    objects: &[crate::corpus::GtObject],
) -> bool {
    if matched == gt_class {
        return false;
    }
    let q = crate::geometry::enclosing_box(queried);
    objects
        .iter()
        .filter(|o| o.category == matched)
        .any(|o| iou(&crate::geometry::enclosing_box(&o.bbox), &q).unwrap_or(0.0) > HALLUCINATION_IOU)
}

/// Share of outcomes that are region referring hallucinations.
pub fn hallucination_ratio(
    outcomes: &[EvalOutcome],
    gt: &GtIndex,
    denominator: HallucinationDenominator,
) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for o in outcomes {
        if o.error.is_some() {
            total += 1;
            continue;
        }
        let (Some(gt_class), Some(matched)) = (&o.gt_class, &o.matched_class) else {
            return Err(EvalError::Metric(format!(
                "outcome {} is not a classification outcome",
                o.record_id
            )));
        };
        let objects = gt
            .get(&o.image_uri)
            .filter(|t| !t.objects.is_empty())
            .ok_or_else(|| EvalError::Metric(format!("no all_objects for image {}", o.image_uri)))?;
        let miss = matched != gt_class;
        if denominator == HallucinationDenominator::AllOutcomes || miss {
            total += 1;
        }
        if is_hallucination(&o.queried_region, gt_class, matched, &objects.objects) {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

fn query_backend(
    backend: &dyn Backend,
    image_uri: &str,
    dims: ImageDims,
    turns: Vec<ChatTurn>,
) -> Result<(String, Option<f64>), String> {
    let req = BackendRequest::new(image_uri, dims, turns).map_err(|e| e.to_string())?;
    backend
        .complete(&req)
        .map(|r| (r.text, r.confidence))
        .map_err(|e| {
            log::warn!("backend call for {image_uri} failed: {e}");
            e.to_string()
        })
}

fn classification_prompt(registry: &TemplateRegistry, region: &Region) -> Result<String, EvalError> {
    let template = registry
        .get(TaskKind::RegionClass.as_str())
        .ok_or_else(|| EvalError::Input("template registry has no `region_class` template".into()))?;
    Ok(registry
        .render(template, None, std::slice::from_ref(region))
        .map_err(|e| EvalError::Input(e.to_string()))?
        .text)
}

/// Category vocabulary of a classification corpus.
pub fn categories_of(records: &[InstructionRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        if let Some(gt) = &r.ground_truth {
            set.extend(gt.class_label.iter().cloned());
            for o in gt.all_objects.iter().flatten() {
                set.insert(o.category.clone());
            }
        }
    }
    set.into_iter().collect()
}

fn check_classification(records: &[InstructionRecord]) -> Result<(), EvalError> {
    for r in records {
        let ok = r.task == TaskKind::RegionClass
            && r.query_region().is_some()
            && r.ground_truth
                .as_ref()
                .is_some_and(|g| g.class_label.is_some() && g.all_objects.is_some());
        if !ok {
            return Err(EvalError::Input(format!(
                "record {} is not a region_class record with class_label and all_objects",
                r.id
            )));
        }
    }
    Ok(())
}

/// Classification outcomes for `records`, querying `regions[i]` for record i.
fn classify(
    records: &[InstructionRecord],
    regions: &[Region],
    backend: &dyn Backend,
    matcher: &CategoryMatcher<'_>,
    registry: &TemplateRegistry,
    workers: usize,
) -> Result<Vec<EvalOutcome>, EvalError> {
    pool(workers).install(|| {
        records
            .par_iter()
            .zip(regions.par_iter())
            .map(|(r, region)| {
                let gt = r.ground_truth.as_ref().expect("checked");
                let gt_class = gt.class_label.clone().expect("checked");
                let prompt = classification_prompt(registry, region)?;
                let turns = vec![ChatTurn { role: Role::User, text: prompt }];
                let mut outcome = EvalOutcome {
                    record_id: r.id.clone(),
                    image_uri: r.image.uri.clone(),
                    queried_region: region.clone(),
                    gt_class: Some(gt_class.clone()),
                    gt_answer: None,
                    response_text: String::new(),
                    matched_class: None,
                    match_score: 0.0,
                    confidence: None,
                    correct: false,
                    hallucination: false,
                    error: None,
                };
                match query_backend(backend, &r.image.uri, r.image.dims, turns) {
                    Ok((text, confidence)) => {
                        let (cat, score) = matcher.best(&text)?;
                        outcome.correct = cat == gt_class;
                        outcome.hallucination = is_hallucination(
                            region,
                            &gt_class,
                            &cat,
                            gt.all_objects.as_deref().unwrap_or(&[]),
                        );
                        outcome.response_text = text;
                        outcome.matched_class = Some(cat);
                        outcome.match_score = score;
                        outcome.confidence = confidence;
                    }
                    Err(e) => outcome.error = Some(e),
                }
                Ok(outcome)
            })
            .collect()
    })
}

fn count_hallucinations(outcomes: &[EvalOutcome], denominator: HallucinationDenominator) -> f64 {
    let total = outcomes
        .iter()
        .filter(|o| denominator == HallucinationDenominator::AllOutcomes || !o.correct)
        .count();
    let hits = outcomes.iter().filter(|o| o.hallucination).count();
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn failed(outcomes: &[EvalOutcome]) -> usize {
    outcomes.iter().filter(|o| o.error.is_some()).count()
}

/// AP of GT-box outcomes. Every record is scored as its own image, so a
/// detection can only ever meet the ground truth it was derived from.
fn gt_box_ap(records: &[InstructionRecord], outcomes: &[EvalOutcome]) -> ApTable {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (r, o) in records.iter().zip(outcomes) {
        let region = r.query_region().expect("checked");
        let gt_box = crate::geometry::enclosing_box(region);
        let area = box_area_px(&gt_box, r.image.dims).unwrap_or(0.0);
        gts.push(GtBox {
            image_id: r.id.clone(),
            bbox: gt_box,
            category: o.gt_class.clone().expect("classification"),
            area_px: area,
        });
        if let Some(cat) = &o.matched_class {
            let q = crate::geometry::enclosing_box(&o.queried_region);
            dets.push(Detection {
                image_id: r.id.clone(),
                area_px: box_area_px(&q, r.image.dims).unwrap_or(0.0),
                bbox: q,
                category: cat.clone(),
                score: o.confidence.unwrap_or(o.match_score),
            });
        }
    }
    compute_ap(&dets, &gts)
}

fn base_report(task: TaskKind, records: &[InstructionRecord], backend: &dyn Backend, opts: &EvalOptions) -> EvalReport {
    EvalReport {
        task,
        dataset: dataset_name(records),
        backend: backend.id(),
        region_source: "gt".into(),
        metrics: Metrics::default(),
        robustness_curve: None,
        hallucination_ratio: None,
        details_file: None,
        tool_version: crate::TOOL_VERSION.to_string(),
        config_fingerprint: opts.config_fingerprint.clone(),
    }
}

/// Regional classification with ground-truth boxes as the queried regions.
pub fn eval_regional_classification(
    records: &[InstructionRecord],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    registry: &TemplateRegistry,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    check_classification(records)?;
    let categories = categories_of(records);
    let matcher = CategoryMatcher::new(&categories, embedder)?;
    let regions: Vec<Region> = records.iter().map(|r| r.query_region().cloned().expect("checked")).collect();
    let outcomes = classify(records, &regions, backend, &matcher, registry, opts.workers)?;
    let mut report = base_report(TaskKind::RegionClass, records, backend, opts);
    let acc = accuracy(&outcomes, opts.failure_policy);
    let mut ap = gt_box_ap(records, &outcomes);
    ap.accuracy = acc;
    report.metrics = Metrics {
        ap: Some(ap),
        accuracy: acc,
        evaluated: outcomes.len(),
        failed: failed(&outcomes),
    };
    report.hallucination_ratio = Some(count_hallucinations(&outcomes, opts.hallucination_denominator));
    Ok(Evaluation { report, outcomes })
}

/// One line of a detector output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalBox {
    pub image_id: String,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

pub fn read_external_boxes(path: &Path) -> Result<Vec<ExternalBox>, EvalError> {
    Ok(read_jsonl(path)?)
}

/// Regional classification over detector boxes. Each box is classified by
/// the backend; AP is scored against every object of the image, with the
/// detector score as ranking score.
pub fn eval_detector_boxes(
    records: &[InstructionRecord],
    boxes: &[ExternalBox],
    boxes_name: &str,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    registry: &TemplateRegistry,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    check_classification(records)?;
    let categories = categories_of(records);
    let matcher = CategoryMatcher::new(&categories, embedder)?;

    // one entry per image, first record wins
    let mut images: BTreeMap<&str, &InstructionRecord> = BTreeMap::new();
    let mut lookup: HashMap<&str, &str> = HashMap::new();
    for r in records {
        images.entry(r.image_key()).or_insert(r);
        lookup.entry(r.image_key()).or_insert(r.image_key());
        lookup.entry(r.image.uri.as_str()).or_insert(r.image_key());
    }
    let mut queries = Vec::new();
    let mut skipped = 0usize;
    for (line, b) in boxes.iter().enumerate() {
        let Some(&key) = lookup.get(b.image_id.as_str()) else {
            skipped += 1;
            continue;
        };
        let rec = images[key];
        let [x, y, w, h] = b.bbox;
        let pts = [Point::new(x, y), Point::new(x + w, y + h)];
        match normalize_region(&pts, RegionKind::Box, rec.image.dims) {
            Ok(region) => queries.push((line, key, rec, region, b.score)),
            Err(e) => {
                log::warn!("box on line {} skipped: {e}", line + 1);
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} detector box(es) skipped (unknown image or out of frame)");
    }

    let outcomes: Vec<EvalOutcome> = pool(opts.workers).install(|| {
        queries
            .par_iter()
            .map(|(line, key, rec, region, _)| {
                let objects = rec
                    .ground_truth
                    .as_ref()
                    .and_then(|g| g.all_objects.as_deref())
                    .unwrap_or(&[]);
                // closest object at IoU >= 0.5, for the detail file only
                let gt_class = objects
                    .iter()
                    .map(|o| (iou(&crate::geometry::enclosing_box(&o.bbox), region).unwrap_or(0.0), o))
                    .filter(|(v, _)| *v >= 0.5)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, o)| o.category.clone());
                let prompt = classification_prompt(registry, region)?;
                let turns = vec![ChatTurn { role: Role::User, text: prompt }];
                let mut outcome = EvalOutcome {
                    record_id: format!("{key}#{}", line + 1),
                    image_uri: rec.image.uri.clone(),
                    queried_region: region.clone(),
                    gt_class: gt_class.clone(),
                    gt_answer: None,
                    response_text: String::new(),
                    matched_class: None,
                    match_score: 0.0,
                    confidence: None,
                    correct: false,
                    hallucination: false,
                    error: None,
                };
                match query_backend(backend, &rec.image.uri, rec.image.dims, turns) {
                    Ok((text, confidence)) => {
                        let (cat, score) = matcher.best(&text)?;
                        outcome.correct = gt_class.as_deref() == Some(cat.as_str());
                        outcome.response_text = text;
                        outcome.matched_class = Some(cat);
                        outcome.match_score = score;
                        outcome.confidence = confidence;
                    }
                    Err(e) => outcome.error = Some(e),
                }
                Ok(outcome)
            })
            .collect::<Result<_, EvalError>>()
    })?;

    let mut dets = Vec::new();
    for ((_, key, rec, region, score), o) in queries.iter().zip(&outcomes) {
        if let Some(cat) = &o.matched_class {
            dets.push(Detection {
                image_id: key.to_string(),
                bbox: region.clone(),
                category: cat.clone(),
                score: *score,
                area_px: box_area_px(region, rec.image.dims).unwrap_or(0.0),
            });
        }
    }
    let mut gts = Vec::new();
    for (key, rec) in &images {
        for o in rec.ground_truth.as_ref().and_then(|g| g.all_objects.as_ref()).into_iter().flatten() {
            let b = crate::geometry::enclosing_box(&o.bbox);
            gts.push(GtBox {
                image_id: key.to_string(),
                area_px: box_area_px(&b, rec.image.dims).unwrap_or(0.0),
                bbox: b,
                category: o.category.clone(),
            });
        }
    }
    let mut report = base_report(TaskKind::RegionClass, records, backend, opts);
    report.region_source = boxes_name.to_string();
    report.metrics = Metrics {
        ap: Some(compute_ap(&dets, &gts)),
        accuracy: None,
        evaluated: outcomes.len(),
        failed: failed(&outcomes),
    };
    Ok(Evaluation { report, outcomes })
}

fn point_as_query(region: &Region, mode: PointQuery) -> Region {
    match (region.kind(), mode) {
        (RegionKind::Point, PointQuery::Box { side }) => {
            let p = region.points()[0];
            let h = side / 2.0;
            Region::bbox(
                (p.x - h).max(0.0),
                (p.y - h).max(0.0),
                (p.x + h).min(1.0),
                (p.y + h).min(1.0),
            )
            .unwrap_or_else(|_| region.clone())
        }
        _ => region.clone(),
    }
}

fn text_turns(
    record: &InstructionRecord,
    regions: &[Region],
    registry: &TemplateRegistry,
) -> Result<Vec<ChatTurn>, EvalError> {
    if record.task == TaskKind::RegionOcr {
        if let Some(template) = registry.get(TaskKind::RegionOcr.as_str()) {
            let text = registry
                .render(template, None, &regions[..1])
                .map_err(|e| EvalError::Input(e.to_string()))?
                .text;
            return Ok(vec![ChatTurn { role: Role::User, text }]);
        }
    }
    BackendRequest::for_record(record, regions, registry.format())
        .map(|r| r.turns)
        .map_err(|e| EvalError::Input(e.to_string()))
}

fn check_text(records: &[InstructionRecord]) -> Result<(), EvalError> {
    for r in records {
        let ok = matches!(r.task, TaskKind::RegionOcr | TaskKind::RegionVqa | TaskKind::Vqa)
            && r.ground_truth.as_ref().is_some_and(|g| g.answer.is_some());
        if !ok {
            return Err(EvalError::Input(format!(
                "record {} is not an OCR/VQA record with an answer",
                r.id
            )));
        }
    }
    Ok(())
}

fn answer_text(
    records: &[InstructionRecord],
    regions: &[Vec<Region>],
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    opts: &EvalOptions,
) -> Result<Vec<EvalOutcome>, EvalError> {
    pool(opts.workers).install(|| {
        records
            .par_iter()
            .zip(regions.par_iter())
            .map(|(r, regions)| {
                let answer = r.ground_truth.as_ref().and_then(|g| g.answer.clone()).expect("checked");
                let turns = text_turns(r, regions, registry)?;
                let queried = regions
                    .first()
                    .cloned()
                    .unwrap_or_else(|| Region::bbox(0.0, 0.0, 1.0, 1.0).expect("full frame"));
                let mut outcome = EvalOutcome {
                    record_id: r.id.clone(),
                    image_uri: r.image.uri.clone(),
                    queried_region: queried,
                    gt_class: None,
                    gt_answer: Some(answer.clone()),
                    response_text: String::new(),
                    matched_class: None,
                    match_score: 0.0,
                    confidence: None,
                    correct: false,
                    hallucination: false,
                    error: None,
                };
                match query_backend(backend, &r.image.uri, r.image.dims, turns) {
                    Ok((text, confidence)) => {
                        outcome.correct = contains_answer_with(&text, &answer, opts.containment);
                        outcome.match_score = f64::from(u8::from(outcome.correct));
                        outcome.response_text = text;
                        outcome.confidence = confidence;
                    }
                    Err(e) => outcome.error = Some(e),
                }
                Ok(outcome)
            })
            .collect()
    })
}

/// OCR / VQA accuracy by answer containment.
pub fn eval_text_task(
    records: &[InstructionRecord],
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    check_text(records)?;
    let regions: Vec<Vec<Region>> = records
        .iter()
        .map(|r| r.regions.iter().map(|g| point_as_query(g, opts.point_query)).collect())
        .collect();
    let outcomes = answer_text(records, &regions, backend, registry, opts)?;
    let task = records.first().map_or(TaskKind::RegionOcr, |r| r.task);
    let mut report = base_report(task, records, backend, opts);
    report.metrics = Metrics {
        ap: None,
        accuracy: accuracy(&outcomes, opts.failure_policy),
        evaluated: outcomes.len(),
        failed: failed(&outcomes),
    };
    Ok(Evaluation { report, outcomes })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Perturbation seed for one record under one sweep seed.
pub fn record_seed(record_id: &str, sweep_seed: u64) -> u64 {
    splitmix64(fnv1a64(record_id.as_bytes()) ^ splitmix64(sweep_seed))
}

fn perturbed(region: &Region, scale: f64, seed: u64) -> Result<Region, EvalError> {
    if scale == 0.0 || region.kind() != RegionKind::Box {
        return Ok(region.clone());
    }
    perturb_box(region, scale, seed).map_err(|e| EvalError::Input(e.to_string()))
}

/// Accuracy under box noise. Scale 0 is evaluated once, unperturbed; every
/// other scale is averaged over `seeds`. Only box regions are perturbed.
pub fn robustness_sweep(
    records: &[InstructionRecord],
    scales: &[f64],
    seeds: &[u64],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    registry: &TemplateRegistry,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if scales.first() != Some(&0.0) || scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Input("scales must start at 0 and increase strictly".into()));
    }
    if scales.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(EvalError::Input("scales must lie in [0, 1]".into()));
    }
    if seeds.is_empty() && scales.len() > 1 {
        return Err(EvalError::Input("at least one seed is required".into()));
    }
    let task = records.first().map(|r| r.task).ok_or_else(|| EvalError::Input("no records".into()))?;
    let classification = task == TaskKind::RegionClass;
    let (base, matcher) = if classification {
        let base = eval_regional_classification(records, backend, embedder, registry, opts)?;
        (base, Some(CategoryMatcher::new(&categories_of(records), embedder)?))
    } else {
        (eval_text_task(records, backend, registry, opts)?, None)
    };
    if !records.iter().all(|r| r.task.is_region_task()) {
        return Err(EvalError::Input("robustness sweep needs region-task records".into()));
    }

    let mut curve = vec![RobustnessPoint {
        scale: 0.0,
        accuracy: base.report.metrics.accuracy.unwrap_or(0.0),
        hallucination_ratio: base.report.hallucination_ratio,
    }];
    for &scale in &scales[1..] {
        let mut acc_runs = Vec::with_capacity(seeds.len());
        let mut hall_runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcomes = if let Some(matcher) = &matcher {
                let regions = records
                    .iter()
                    .map(|r| perturbed(r.query_region().expect("checked"), scale, record_seed(&r.id, seed)))
                    .collect::<Result<Vec<_>, _>>()?;
                let outcomes = classify(records, &regions, backend, matcher, registry, opts.workers)?;
                hall_runs.push(count_hallucinations(&outcomes, opts.hallucination_denominator));
                outcomes
            } else {
                let regions = records
                    .iter()
                    .map(|r| {
                        r.regions
                            .iter()
                            .map(|g| perturbed(&point_as_query(g, opts.point_query), scale, record_seed(&r.id, seed)))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                answer_text(records, &regions, backend, registry, opts)?
            };
            acc_runs.push(accuracy(&outcomes, opts.failure_policy).unwrap_or(0.0));
        }
        curve.push(RobustnessPoint {
            scale,
            accuracy: running_mean(acc_runs).unwrap_or(0.0),
            hallucination_ratio: if classification { running_mean(hall_runs) } else { None },
        });
    }
    let mut report = base.report.clone();
    report.robustness_curve = Some(curve);
    Ok(Evaluation {
        report,
        outcomes: base.outcomes,
    })
}
