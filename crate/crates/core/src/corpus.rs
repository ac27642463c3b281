// SPDX-License-Identifier: Apache-2.0

//! Unified instruction-following corpora.
//!
//! Detection, OCR and VQA annotations are converted into
//! [`InstructionRecord`]s, region-grounded chats are generated through an
//! external LLM, and records are partitioned into training stages. Records
//! are stored as JSON lines with normalized, full-precision coordinates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, LlmClient};
use crate::geometry::{ImageDims, Point, Region, RegionKind};
use crate::instructgen::{
    parse_region_tokens, region_placeholders, serialize_region, InstructError, Role, Style,
    TaskKind, Template, TemplateRegistry,
};

/// Per-coordinate tolerance when matching LLM-cited regions to context boxes.
pub const COORD_MATCH_TOLERANCE: f64 = 0.02;
/// Attempts per image before region-chat generation gives up.
pub const MAX_GENERATION_ATTEMPTS: usize = 3;
pub const DEFAULT_CHAT_ROUNDS: usize = 3;

/// Slack, in pixels, for annotation boxes that touch the image border.
const FRAME_SLACK_PX: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation file is not valid: {0}")]
    Format(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("partition policy: {0}")]
    Policy(String),
    #[error("no templates available for task {0}")]
    NoTemplates(TaskKind),
    #[error(transparent)]
    Instruct(#[from] InstructError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("record has no turns")]
    NoTurns,
    #[error(transparent)]
    Turns(#[from] InstructError),
    #[error("{task} record must have {expected} region(s), has {got}")]
    RegionCount {
        task: TaskKind,
        expected: &'static str,
        got: usize,
    },
    #[error("stage1 records must be image-level, got {0}")]
    StageTask(TaskKind),
    #[error("{task} ground truth is missing `{field}`")]
    GroundTruth { task: TaskKind, field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub dims: ImageDims,
    /// Identifier in the source annotation file, when it has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Stage1,
    Stage2,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Region,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_objects: Option<Vec<GtObject>>,
}

/// One instruction-following sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub image: ImageRef,
    pub task: TaskKind,
    pub turns: Vec<Turn>,
    pub regions: Vec<Region>,
    pub style: Style,
    pub source: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl InstructionRecord {
    /// Checks every record invariant.
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.turns.is_empty() {
            return Err(RecordError::NoTurns);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(InstructError::RoleOrder {
                    index: i,
                    found: turn.role,
                    expected,
                }
                .into());
            }
            if let Some(&bad) = region_placeholders(&turn.text)
                .iter()
                .find(|&&idx| idx >= self.regions.len())
            {
                return Err(InstructError::Reference {
                    index: bad,
                    available: self.regions.len(),
                }
                .into());
            }
        }
        let n = self.regions.len();
        if self.task.is_region_task() && n == 0 {
            return Err(RecordError::RegionCount {
                task: self.task,
                expected: "at least 1",
                got: n,
            });
        }
        if !self.task.is_region_task() && n != 0 {
            return Err(RecordError::RegionCount {
                task: self.task,
                expected: "0",
                got: n,
            });
        }
        if self.split == Split::Stage1 && self.task.is_region_task() {
            return Err(RecordError::StageTask(self.task));
        }
        if let Some(gt) = &self.ground_truth {
            let missing = |field| RecordError::GroundTruth {
                task: self.task,
                field,
            };
            match self.task {
                TaskKind::RegionClass => {
                    if gt.class_label.is_none() {
                        return Err(missing("class_label"));
                    }
                    if gt.all_objects.is_none() {
                        return Err(missing("all_objects"));
                    }
                }
                TaskKind::RegionOcr | TaskKind::RegionVqa if gt.answer.is_none() => {
                    return Err(missing("answer"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The first region of the record, which evaluation treats as the query.
    pub fn query_region(&self) -> Option<&Region> {
        self.regions.first()
    }

    /// Key that groups records of the same image.
    pub fn image_key(&self) -> &str {
        self.image.id.as_deref().unwrap_or(&self.image.uri)
    }
}

/// A problem with a single annotation that caused it to be skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub source: String,
    pub item: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.source, self.item, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub records: Vec<InstructionRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

impl IngestOutput {
    /// Diagnostic counts grouped by message prefix (text before the first `:`).
    pub fn diagnostic_summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for d in &self.diagnostics {
            let key = d.message.split(':').next().unwrap_or(&d.message).to_string();
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Dataset name stored in each record.
    pub source: String,
    /// Keep at most this many records, sampled by `seed`.
    pub limit: Option<usize>,
    /// Keep only records from at most this many images, sampled by `seed`.
    pub image_limit: Option<usize>,
    pub seed: u64,
    /// Restrict the template pool to these ids.
    pub template_ids: Option<Vec<String>>,
}

impl IngestOptions {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            limit: None,
            image_limit: None,
            seed: 0,
            template_ids: None,
        }
    }
}

/// Templates for one task, cycled round-robin by record index.
pub struct TemplatePool<'a> {
    registry: &'a TemplateRegistry,
    templates: Vec<&'a Template>,
}

impl<'a> TemplatePool<'a> {
    pub fn for_task(
        registry: &'a TemplateRegistry,
        task: TaskKind,
        ids: Option<&[String]>,
    ) -> Result<Self, CorpusError> {
        let templates: Vec<&Template> = registry
            .pool(task)
            .into_iter()
            .filter(|t| ids.is_none_or(|ids| ids.iter().any(|i| *i == t.id)))
            .collect();
        if templates.is_empty() {
            return Err(CorpusError::NoTemplates(task));
        }
        Ok(Self {
            registry,
            templates,
        })
    }

    pub fn pick(&self, index: usize) -> &'a Template {
        self.templates[index % self.templates.len()]
    }

    pub fn registry(&self) -> &'a TemplateRegistry {
        self.registry
    }
}

/// Number or string identifier, kept as a string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct AnnId(String);

impl<'de> Deserialize<'de> for AnnId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(i64),
            Str(String),
        }
        Ok(AnnId(match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Str(s) => s,
        }))
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: AnnId,
    #[serde(default)]
    width: u32,
    #[serde(default)]
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<AnnId>,
    image_id: AnnId,
    bbox: [f64; 4],
    #[serde(default)]
    category_id: Option<AnnId>,
    #[serde(default, alias = "text", alias = "transcription")]
    utf8_string: Option<String>,
    #[serde(default)]
    legibility: Option<Legibility>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Legibility {
    Flag(bool),
    Label(String),
}

impl Legibility {
    fn is_legible(&self) -> bool {
        match self {
            Legibility::Flag(b) => *b,
            Legibility::Label(s) => !s.eq_ignore_ascii_case("illegible"),
        }
    }
}

#[derive(Deserialize)]
struct CocoCategory {
    id: AnnId,
    name: String,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `[x, y, w, h]` pixel box to a normalized region, rejecting out-of-frame boxes.
fn xywh_to_region(bbox: [f64; 4], dims: ImageDims) -> Result<Region, String> {
    let [x, y, w, h] = bbox;
    if !bbox.iter().all(|v| v.is_finite()) {
        return Err("box: non-finite coordinate".into());
    }
    if w <= 0.0 || h <= 0.0 {
        return Err(format!("box: degenerate size {w}x{h}"));
    }
    let (iw, ih) = (f64::from(dims.width()), f64::from(dims.height()));
    if x < -FRAME_SLACK_PX || y < -FRAME_SLACK_PX || x + w > iw + FRAME_SLACK_PX || y + h > ih + FRAME_SLACK_PX {
        return Err(format!("box outside frame: [{x}, {y}, {w}, {h}] in {dims}"));
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    Region::bbox(clamp(x / iw), clamp(y / ih), clamp((x + w) / iw), clamp((y + h) / ih))
        .map(|r| r.with_source_dims(dims))
        .map_err(|e| format!("box: {e}"))
}

struct Candidate {
    image: ImageRef,
    item: String,
    regions: Vec<Region>,
    question: Option<String>,
    answer: String,
    ground_truth: GroundTruth,
    task: TaskKind,
}

fn sample_indices(n: usize, keep: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if keep < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
    }
    idx
}

/// Applies image/record limits, assigns templates round-robin and builds records.
fn finish(
    mut candidates: Vec<Candidate>,
    registry: &TemplateRegistry,
    opts: &IngestOptions,
    diagnostics: Vec<Diagnostic>,
) -> Result<IngestOutput, CorpusError> {
    if let Some(max_images) = opts.image_limit {
        let mut seen = std::collections::HashSet::new();
        let mut images: Vec<String> = Vec::new();
        for c in &candidates {
            let key = c.image.id.clone().unwrap_or_else(|| c.image.uri.clone());
            if seen.insert(key.clone()) {
                images.push(key);
            }
        }
        let keep: BTreeSet<&String> = sample_indices(images.len(), max_images, opts.seed)
            .into_iter()
            .map(|i| &images[i])
            .collect();
        candidates.retain(|c| keep.contains(c.image.id.as_ref().unwrap_or(&c.image.uri)));
    }
    if let Some(limit) = opts.limit {
        let keep = sample_indices(candidates.len(), limit, opts.seed);
        let mut it = keep.into_iter().peekable();
        candidates = candidates
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| {
                (it.peek() == Some(&i)).then(|| {
                    it.next();
                    c
                })
            })
            .collect();
    }

    let mut pools: HashMap<TaskKind, TemplatePool<'_>> = HashMap::new();
    let mut records = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.into_iter().enumerate() {
        if !pools.contains_key(&c.task) {
            pools.insert(
                c.task,
                TemplatePool::for_task(registry, c.task, opts.template_ids.as_deref())?,
            );
        }
        let template = pools[&c.task].pick(index);
        let user = registry.fill(template, c.question.as_deref())?;
        let record = InstructionRecord {
            id: format!("{}-{}", opts.source, c.item),
            image: c.image,
            task: c.task,
            turns: vec![Turn::user(user), Turn::assistant(c.answer)],
            regions: c.regions,
            style: template.style,
            source: opts.source.clone(),
            split: if c.task.is_region_task() {
                Split::Stage2
            } else {
                Split::Stage1
            },
            ground_truth: Some(c.ground_truth),
        };
        debug_assert!(record.validate().is_ok(), "{:?}", record.validate());
        records.push(record);
    }
    Ok(IngestOutput {
        records,
        diagnostics,
    })
}

struct CocoIndex {
    images: Vec<(AnnId, Result<ImageRef, String>)>,
    by_id: HashMap<AnnId, usize>,
    categories: HashMap<AnnId, String>,
}

fn index_coco(file: &CocoFile) -> CocoIndex {
    let images: Vec<(AnnId, Result<ImageRef, String>)> = file
        .images
        .iter()
        .map(|img| {
            let r = ImageDims::new(img.width, img.height)
                .map(|dims| ImageRef {
                    uri: img.file_name.clone().unwrap_or_else(|| img.id.0.clone()),
                    dims,
                    id: Some(img.id.0.clone()),
                })
                .map_err(|_| format!("missing image dims: image {}", img.id.0));
            (img.id.clone(), r)
        })
        .collect();
    let by_id = images
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), i))
        .collect();
    let categories = file
        .categories
        .iter()
        .map(|c| (c.id.clone(), c.name.clone()))
        .collect();
    CocoIndex {
        images,
        by_id,
        categories,
    }
}

fn parse_coco(src: &str) -> Result<CocoFile, CorpusError> {
    serde_json::from_str(src).map_err(|e| CorpusError::Format(e.to_string()))
}

/// One `region_class` record per valid detection instance.
pub fn ingest_detection(
    src: &str,
    registry: &TemplateRegistry,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    let file = parse_coco(src)?;
    let index = index_coco(&file);
    let mut diagnostics = Vec::new();
    let diag = |item: String, message: String| Diagnostic {
        source: opts.source.clone(),
        item,
        message,
    };

    // (image index, annotation item, category, region)
    let mut valid: Vec<(usize, String, String, Region)> = Vec::new();
    for (n, ann) in file.annotations.iter().enumerate() {
        let item = format!(
            "{}-{}",
            ann.image_id.0,
            ann.id.as_ref().map_or_else(|| n.to_string(), |i| i.0.clone())
        );
        let Some(&img_idx) = index.by_id.get(&ann.image_id) else {
            diagnostics.push(diag(item, format!("unknown image: {}", ann.image_id.0)));
            continue;
        };
        let image = match &index.images[img_idx].1 {
            Ok(image) => image,
            Err(msg) => {
                diagnostics.push(diag(item, msg.clone()));
                continue;
            }
        };
        let Some(category) = ann
            .category_id
            .as_ref()
            .and_then(|c| index.categories.get(c))
        else {
            let cid = ann.category_id.as_ref().map_or("none", |c| c.0.as_str());
            diagnostics.push(diag(item, format!("unresolvable category: {cid}")));
            continue;
        };
        match xywh_to_region(ann.bbox, image.dims) {
            Ok(region) => valid.push((img_idx, item, category.clone(), region)),
            Err(msg) => diagnostics.push(diag(item, msg)),
        }
    }

    let mut objects: HashMap<usize, Vec<GtObject>> = HashMap::new();
    for (img, _, category, region) in &valid {
        objects.entry(*img).or_default().push(GtObject {
            category: category.clone(),
            bbox: region.clone(),
        });
    }
    let mut candidates: Vec<Candidate> = valid
        .into_iter()
        .map(|(img, item, category, region)| Candidate {
            image: index.images[img].1.clone().expect("validated above"),
            item,
            regions: vec![region],
            question: None,
            answer: category.clone(),
            ground_truth: GroundTruth {
                class_label: Some(category),
                answer: None,
                all_objects: Some(objects[&img].clone()),
            },
            task: TaskKind::RegionClass,
        })
        .collect();
    // image order of the source file, annotation order within an image
    candidates.sort_by_key(|c| index.by_id[&AnnId(c.image.id.clone().unwrap_or_default())]);
    finish(candidates, registry, opts, diagnostics)
}

pub fn ingest_detection_file(
    path: &Path,
    registry: &TemplateRegistry,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    ingest_detection(&read_file(path)?, registry, opts)
}

/// One `region_ocr` record per legible text instance.
pub fn ingest_ocr(
    src: &str,
    registry: &TemplateRegistry,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    let file = parse_coco(src)?;
    let index = index_coco(&file);
    let mut diagnostics = Vec::new();
    let mut candidates = Vec::new();
    for (n, ann) in file.annotations.iter().enumerate() {
        let item = format!(
            "{}-{}",
            ann.image_id.0,
            ann.id.as_ref().map_or_else(|| n.to_string(), |i| i.0.clone())
        );
        let mut skip = |message: String| {
            diagnostics.push(Diagnostic {
                source: opts.source.clone(),
                item: item.clone(),
                message,
            })
        };
        let Some(&img_idx) = index.by_id.get(&ann.image_id) else {
            skip(format!("unknown image: {}", ann.image_id.0));
            continue;
        };
        let image = match &index.images[img_idx].1 {
            Ok(image) => image.clone(),
            Err(msg) => {
                skip(msg.clone());
                continue;
            }
        };
        if ann.legibility.as_ref().is_some_and(|l| !l.is_legible()) {
            skip("illegible: transcription flagged illegible".into());
            continue;
        }
        let text = ann.utf8_string.as_deref().map(str::trim).unwrap_or("");
        if text.is_empty() {
            skip("empty transcription: nothing to read".into());
            continue;
        }
        let region = match xywh_to_region(ann.bbox, image.dims) {
            Ok(r) => r,
            Err(msg) => {
                skip(msg);
                continue;
            }
        };
        candidates.push(Candidate {
            image,
            item,
            regions: vec![region],
            question: None,
            answer: text.to_string(),
            ground_truth: GroundTruth {
                answer: Some(text.to_string()),
                ..GroundTruth::default()
            },
            task: TaskKind::RegionOcr,
        });
    }
    finish(candidates, registry, opts, diagnostics)
}

pub fn ingest_ocr_file(
    path: &Path,
    registry: &TemplateRegistry,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    ingest_ocr(&read_file(path)?, registry, opts)
}

/// How a VQA question points at its region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Referent {
    None,
    Box,
    Point,
}

#[derive(Deserialize)]
struct VqaEntry {
    #[serde(default)]
    id: Option<AnnId>,
    image: String,
    width: u32,
    height: u32,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    answers: Vec<String>,
    /// `[x, y, w, h]` in pixels.
    #[serde(default, rename = "box")]
    bbox: Option<[f64; 4]>,
    /// `[x, y]` in pixels.
    #[serde(default)]
    point: Option<[f64; 2]>,
}

/// Reads either a JSON array or JSON lines.
fn parse_vqa_entries(src: &str) -> Result<Vec<Result<VqaEntry, String>>, CorpusError> {
    let trimmed = src.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| CorpusError::Format(e.to_string()))?;
        return Ok(values
            .into_iter()
            .map(|v| serde_json::from_value(v).map_err(|e| e.to_string()))
            .collect());
    }
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| CorpusError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(serde_json::from_value(v).map_err(|e| e.to_string()))
        })
        .collect()
}

/// `vqa` records (no referent) or `region_vqa` records grounded by a box or point.
pub fn ingest_vqa(
    src: &str,
    registry: &TemplateRegistry,
    referent: Referent,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    let mut diagnostics = Vec::new();
    let mut candidates = Vec::new();
    for (n, entry) in parse_vqa_entries(src)?.into_iter().enumerate() {
        let item = match &entry {
            Ok(e) => e.id.as_ref().map_or_else(|| n.to_string(), |i| i.0.clone()),
            Err(_) => n.to_string(),
        };
        let mut skip = |message: String| {
            diagnostics.push(Diagnostic {
                source: opts.source.clone(),
                item: item.clone(),
                message,
            })
        };
        let e = match entry {
            Ok(e) => e,
            Err(msg) => {
                skip(format!("malformed entry: {msg}"));
                continue;
            }
        };
        let Ok(dims) = ImageDims::new(e.width, e.height) else {
            skip(format!("missing image dims: {}", e.image));
            continue;
        };
        let Some(answer) = e
            .answer
            .clone()
            .or_else(|| e.answers.first().cloned())
            .filter(|a| !a.trim().is_empty())
        else {
            skip("missing answer: no answer given".into());
            continue;
        };
        let regions = match referent {
            Referent::None => Vec::new(),
            Referent::Box => match e.bbox {
                Some(b) => match xywh_to_region(b, dims) {
                    Ok(r) => vec![r],
                    Err(msg) => {
                        skip(msg);
                        continue;
                    }
                },
                None => {
                    skip("missing referent: entry has no box".into());
                    continue;
                }
            },
            Referent::Point => match e.point {
                Some([x, y]) => match crate::geometry::normalize_region(
                    &[Point::new(x, y)],
                    RegionKind::Point,
                    dims,
                ) {
                    Ok(r) => vec![r],
                    Err(err) => {
                        skip(format!("point outside frame: {err}"));
                        continue;
                    }
                },
                None => {
                    skip("missing referent: entry has no point".into());
                    continue;
                }
            },
        };
        let task = if referent == Referent::None {
            TaskKind::Vqa
        } else {
            TaskKind::RegionVqa
        };
        candidates.push(Candidate {
            image: ImageRef {
                uri: e.image.clone(),
                dims,
                id: None,
            },
            item,
            regions,
            question: Some(e.question.trim().to_string()),
            answer: answer.trim().to_string(),
            ground_truth: GroundTruth {
                answer: Some(answer.trim().to_string()),
                ..GroundTruth::default()
            },
            task,
        });
    }
    finish(candidates, registry, opts, diagnostics)
}

pub fn ingest_vqa_file(
    path: &Path,
    registry: &TemplateRegistry,
    referent: Referent,
    opts: &IngestOptions,
) -> Result<IngestOutput, CorpusError> {
    ingest_vqa(&read_file(path)?, registry, referent, opts)
}

// ---------------------------------------------------------------------------
// Region chat generation

/// A dense caption attached to a normalized region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCaption {
    pub caption: String,
    pub region: Region,
}

/// Dense captions of one image, the input to [`generate_region_chat`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatContext {
    pub image: ImageRef,
    pub regions: Vec<RegionCaption>,
}

/// A hand-written in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub context: Vec<RegionCaption>,
    pub dialogue: Vec<Turn>,
}

impl SeedExample {
    /// Every region cited in the dialogue must come from the context.
    pub fn validate(&self) -> Result<(), String> {
        let ctx: Vec<&Region> = self.context.iter().map(|c| &c.region).collect();
        for (i, turn) in self.dialogue.iter().enumerate() {
            for cited in cited_regions(&turn.text).map_err(|e| format!("turn {i}: {e}"))? {
                if match_context(&cited.0, &ctx, COORD_MATCH_TOLERANCE).is_none() {
                    return Err(format!("turn {i} cites a region absent from the context"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// Maximum question/answer pairs per dialogue.
    pub rounds: usize,
    pub max_attempts: usize,
    pub tolerance: f64,
    pub source: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_CHAT_ROUNDS,
            max_attempts: MAX_GENERATION_ATTEMPTS,
            tolerance: COORD_MATCH_TOLERANCE,
            source: "region_chat".into(),
        }
    }
}

/// Why a generated dialogue was rejected.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    Unparseable { detail: String },
    RoleOrder { detail: String },
    RoundCount { pairs: usize, max: usize },
    OffContext { coordinates: String },
    Ungrounded,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Unparseable { detail } => write!(f, "unparseable reply: {detail}"),
            Rejection::RoleOrder { detail } => write!(f, "bad role order: {detail}"),
            Rejection::RoundCount { pairs, max } => {
                write!(f, "{pairs} question/answer pairs, expected 1..={max}")
            }
            Rejection::OffContext { coordinates } => {
                write!(f, "coordinates {coordinates} match no context region")
            }
            Rejection::Ungrounded => f.write_str("dialogue cites no region"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("image context is empty")]
    EmptyContext,
    #[error("generator unavailable: {0}")]
    Transport(#[from] BackendError),
    #[error("{} replies rejected, last: {}", .rejections.len(), .rejections.last().map(ToString::to_string).unwrap_or_default())]
    Rejected {
        rejections: Vec<Rejection>,
        last_reply: String,
    },
}

#[derive(Debug, Clone)]
pub struct GeneratedChat {
    pub record: InstructionRecord,
    /// Replies rejected before the accepted one.
    pub rejections: Vec<Rejection>,
}

static RAW_TUPLE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\[(]\s*(?:[01]?\.\d+|[01])(?:\s*,\s*(?:[01]?\.\d+|[01]))+\s*[\])]")
        .expect("static regex")
});

/// Regions cited in `text` as `<box>` spans or bare coordinate tuples such as
/// `[0.12, 0.30, 0.45, 0.80]`, with their byte spans, in text order.
fn cited_regions(text: &str) -> Result<Vec<(Region, std::ops::Range<usize>)>, String> {
    let spans = parse_region_tokens(text).map_err(|e| e.to_string())?;
    let mut out: Vec<(Region, std::ops::Range<usize>)> =
        spans.into_iter().map(|s| (s.region, s.span)).collect();
    for m in RAW_TUPLE.find_iter(text) {
        if out.iter().any(|(_, s)| s.start <= m.start() && m.end() <= s.end) {
            continue;
        }
        let inner = &m.as_str()[1..m.as_str().len() - 1];
        let body = format!("<box>{inner}</box>");
        // Tuples that are not coordinates (odd length, > 1) are left as prose.
        if let Ok(spans) = parse_region_tokens(&body) {
            out.push((spans[0].region.clone(), m.range()));
        }
    }
    out.sort_by_key(|(_, s)| s.start);
    Ok(out)
}

fn match_context(cited: &Region, context: &[&Region], tol: f64) -> Option<usize> {
    context.iter().position(|c| c.approx_eq(cited, tol))
}

fn format_context(context: &[RegionCaption]) -> String {
    context
        .iter()
        .map(|c| format!("- {} {}", c.caption.trim(), serialize_region(&c.region)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_dialogue(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| match t.role {
            Role::User => format!("User: {}", t.text),
            Role::Assistant => format!("Assistant: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the in-context prompt sent to the generator LLM.
pub fn build_generation_prompt(context: &ChatContext, seeds: &[SeedExample], rounds: usize) -> String {
    let mut prompt = String::from(
        "You are looking at an image described only by region captions. Each region is given \
         as normalized coordinates between <box> and </box>. Write a conversation between a \
         User asking about specific regions and an Assistant answering as if it sees the image. \
         Every time a region is mentioned, cite it with exactly the <box>...</box> coordinates \
         from the context; never invent coordinates. ",
    );
    prompt.push_str(&format!(
        "Write between 1 and {rounds} question/answer pairs, one turn per line, each starting \
         with `User:` or `Assistant:`.\n\n"
    ));
    for (i, seed) in seeds.iter().enumerate() {
        prompt.push_str(&format!(
            "### Example {}\nContext:\n{}\nDialogue:\n{}\n\n",
            i + 1,
            format_context(&seed.context),
            format_dialogue(&seed.dialogue)
        ));
    }
    prompt.push_str(&format!(
        "### Task\nContext:\n{}\nDialogue:\n",
        format_context(&context.regions)
    ));
    prompt
}

fn parse_dialogue(reply: &str) -> Result<Vec<Turn>, Rejection> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in reply.lines() {
        let line = line.trim();
        let lower = line.to_ascii_lowercase();
        let tagged = [("user:", Role::User), ("assistant:", Role::Assistant)]
            .into_iter()
            .find(|(tag, _)| lower.starts_with(tag));
        match tagged {
            Some((tag, role)) => turns.push(Turn {
                role,
                text: line[tag.len()..].trim().to_string(),
            }),
            None if line.is_empty() => {}
            None => match turns.last_mut() {
                Some(t) => {
                    t.text.push(' ');
                    t.text.push_str(line);
                }
                // chatter before the first turn
                None => {}
            },
        }
    }
    if turns.is_empty() {
        return Err(Rejection::Unparseable {
            detail: "no `User:`/`Assistant:` turns".into(),
        });
    }
    Ok(turns)
}

/// Validates a generator reply and rewrites its coordinates as placeholders.
///
/// Returns the rewritten turns and the cited context regions in first-citation
/// order. Placeholders point at exact context coordinates, never at the
/// LLM's copy.
pub fn validate_reply(
    reply: &str,
    context: &[RegionCaption],
    config: &GenerationConfig,
) -> Result<(Vec<Turn>, Vec<Region>), Rejection> {
    let turns = parse_dialogue(reply)?;
    for (i, t) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            return Err(Rejection::RoleOrder {
                detail: format!("turn {i} is {}, expected {expected}", t.role),
            });
        }
        if t.text.is_empty() {
            return Err(Rejection::Unparseable {
                detail: format!("turn {i} is empty"),
            });
        }
    }
    if turns.len() % 2 != 0 {
        return Err(Rejection::RoleOrder {
            detail: "dialogue ends with an unanswered question".into(),
        });
    }
    let pairs = turns.len() / 2;
    if pairs == 0 || pairs > config.rounds {
        return Err(Rejection::RoundCount {
            pairs,
            max: config.rounds,
        });
    }

    let ctx: Vec<&Region> = context.iter().map(|c| &c.region).collect();
    let mut used: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(turns.len());
    for t in turns {
        let cited = cited_regions(&t.text).map_err(|detail| Rejection::Unparseable { detail })?;
        let mut text = String::with_capacity(t.text.len());
        let mut last = 0;
        for (region, span) in cited {
            let Some(ci) = match_context(&region, &ctx, config.tolerance) else {
                return Err(Rejection::OffContext {
                    coordinates: t.text[span].to_string(),
                });
            };
            let slot = match used.iter().position(|&u| u == ci) {
                Some(s) => s,
                None => {
                    used.push(ci);
                    used.len() - 1
                }
            };
            text.push_str(&t.text[last..span.start]);
            text.push_str(&format!("<region:{slot}>"));
            last = span.end;
        }
        text.push_str(&t.text[last..]);
        out.push(Turn { role: t.role, text });
    }
    if used.is_empty() {
        return Err(Rejection::Ungrounded);
    }
    let regions = used.into_iter().map(|i| context[i].region.clone()).collect();
    Ok((out, regions))
}

/// Asks the generator LLM for a region-grounded dialogue about one image.
///
/// Rejected replies are retried up to `config.max_attempts` times in total.
pub fn generate_region_chat(
    context: &ChatContext,
    seeds: &[SeedExample],
    llm: &dyn LlmClient,
    config: &GenerationConfig,
) -> Result<GeneratedChat, GenerationError> {
    if context.regions.is_empty() {
        return Err(GenerationError::EmptyContext);
    }
    let prompt = build_generation_prompt(context, seeds, config.rounds);
    let mut rejections = Vec::new();
    let mut last_reply = String::new();
    for _ in 0..config.max_attempts.max(1) {
        let reply = llm.complete_text(&prompt)?;
        match validate_reply(&reply, &context.regions, config) {
            Ok((turns, regions)) => {
                let key = context.image.id.as_deref().unwrap_or(&context.image.uri);
                let record = InstructionRecord {
                    id: format!("{}-{}", config.source, key),
                    image: context.image.clone(),
                    task: TaskKind::RegionChat,
                    turns,
                    regions,
                    style: Style::None,
                    source: config.source.clone(),
                    split: Split::Stage2,
                    ground_truth: None,
                };
                debug_assert!(record.validate().is_ok());
                return Ok(GeneratedChat { record, rejections });
            }
            Err(r) => {
                log::debug!("rejected reply for {}: {r}", context.image.uri);
                rejections.push(r);
                last_reply = reply;
            }
        }
    }
    Err(GenerationError::Rejected {
        rejections,
        last_reply,
    })
}

/// Runs [`generate_region_chat`] over many images on `workers` threads.
/// Results come back in input order.
pub fn generate_region_chats(
    contexts: &[ChatContext],
    seeds: &[SeedExample],
    llm: &dyn LlmClient,
    config: &GenerationConfig,
    workers: usize,
) -> Vec<Result<GeneratedChat, GenerationError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        contexts
            .par_iter()
            .map(|c| generate_region_chat(c, seeds, llm, config))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Partitioning

/// Split assignment rules.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PartitionPolicy {
    /// Sources whose records are all held out for evaluation.
    #[serde(default)]
    pub eval_sources: BTreeSet<String>,
    /// Per-source fraction of records held out for evaluation.
    #[serde(default)]
    pub holdout: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

fn unit_hash(seed: u64, id: &str) -> f64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns every record exactly one split: image tasks to stage1, region
/// tasks to stage2, then held-out sources and fractions to eval.
pub fn partition(
    mut records: Vec<InstructionRecord>,
    policy: &PartitionPolicy,
) -> Result<Vec<InstructionRecord>, CorpusError> {
    let present: BTreeSet<&str> = records.iter().map(|r| r.source.as_str()).collect();
    for src in policy.eval_sources.iter().chain(policy.holdout.keys()) {
        if !present.contains(src.as_str()) {
            return Err(CorpusError::Policy(format!("unknown source `{src}`")));
        }
    }
    if let Some((src, f)) = policy.holdout.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
        return Err(CorpusError::Policy(format!(
            "holdout fraction {f} for `{src}` is outside [0, 1]"
        )));
    }
    for r in &mut records {
        let fraction = policy.holdout.get(&r.source).copied().unwrap_or(0.0);
        r.split = if policy.eval_sources.contains(&r.source)
            || (fraction > 0.0 && unit_hash(policy.seed, &r.id) < fraction)
        {
            Split::Eval
        } else if r.task.is_region_task() {
            Split::Stage2
        } else {
            Split::Stage1
        };
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Storage

/// Provenance header written as the first line of output files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub tool_version: String,
    pub config_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    spotkit_meta: OutputMeta,
}

impl OutputMeta {
    pub fn new(config_fingerprint: impl Into<String>) -> Self {
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            config_fingerprint: config_fingerprint.into(),
        }
    }
}

pub fn write_records_to<W: Write>(
    mut w: W,
    records: &[InstructionRecord],
    meta: Option<&OutputMeta>,
) -> std::io::Result<()> {
    if let Some(meta) = meta {
        serde_json::to_writer(
            &mut w,
            &MetaLine {
                spotkit_meta: meta.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Writes records as JSON lines, optionally preceded by a provenance header.
pub fn write_records(
    path: &Path,
    records: &[InstructionRecord],
    meta: Option<&OutputMeta>,
) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    write_records_to(BufWriter::new(file), records, meta).map_err(io)
}

/// Reads and validates JSON-line records; the first violation aborts with
/// its 1-based line number.
pub fn read_records_from<R: BufRead>(
    reader: R,
) -> Result<(Vec<InstructionRecord>, Option<OutputMeta>), CorpusError> {
    let mut records = Vec::new();
    let mut meta = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if records.is_empty() && meta.is_none() && line.contains("\"spotkit_meta\"") {
            if let Ok(m) = serde_json::from_str::<MetaLine>(&line) {
                meta = Some(m.spotkit_meta);
                continue;
            }
        }
        let record: InstructionRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| CorpusError::Line {
            line: line_no,
            message: format!("record `{}`: {e}", record.id),
        })?;
        records.push(record);
    }
    Ok((records, meta))
}

pub fn read_records(path: &Path) -> Result<Vec<InstructionRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(read_records_from(BufReader::new(file))?.0)
}

/// Reads a JSON-lines file of arbitrary items (contexts, seeds, boxes).
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let src = read_file(path)?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Line {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
