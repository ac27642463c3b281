// SPDX-License-Identifier: Apache-2.0

//! Precise referring instructions.
//!
//! Regions are written into instruction text as `<box>x1,y1,...,xN,yN</box>`
//! spans with three-decimal normalized coordinates. Templates carry
//! `<region:i>` placeholders that are expanded at render time, so stored
//! corpora keep full-precision coordinates and quantize only on output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::InstructionRecord;
use crate::geometry::{Point, Region, RegionKind};

pub const BOX_OPEN: &str = "<box>";
pub const BOX_CLOSE: &str = "</box>";
pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const QUESTION_PLACEHOLDER: &str = "<question>";

/// Digits after the decimal point in serialized coordinates.
pub const COORD_DECIMALS: usize = 3;

const DEFAULT_REGISTRY: &str = include_str!("../templates/default.toml");

static REGION_PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<region:(\d+)>").expect("static regex"));

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstructError {
    #[error("malformed region span at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("template `{template}` arguments do not match its slots: {}", .problems.join(", "))]
    Template {
        template: String,
        problems: Vec<String>,
    },
    #[error("text references <region:{index}> but only {available} region(s) are defined")]
    Reference { index: usize, available: usize },
    #[error("turn {index} has role {found}, expected {expected}")]
    RoleOrder {
        index: usize,
        found: Role,
        expected: Role,
    },
    #[error("invalid template registry: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    Vqa,
    RegionClass,
    RegionOcr,
    RegionVqa,
    RegionChat,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Caption,
        TaskKind::Vqa,
        TaskKind::RegionClass,
        TaskKind::RegionOcr,
        TaskKind::RegionVqa,
        TaskKind::RegionChat,
    ];

    pub fn is_region_task(self) -> bool {
        matches!(
            self,
            TaskKind::RegionClass | TaskKind::RegionOcr | TaskKind::RegionVqa | TaskKind::RegionChat
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
            TaskKind::RegionClass => "region_class",
            TaskKind::RegionOcr => "region_ocr",
            TaskKind::RegionVqa => "region_vqa",
            TaskKind::RegionChat => "region_chat",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// Response-style tag appended to an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Short,
    Detail,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

/// How coordinates are written inside a `<box>` span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionFormat {
    pub separator: String,
}

impl Default for RegionFormat {
    fn default() -> Self {
        Self {
            separator: ",".to_string(),
        }
    }
}

/// Formats a coordinate with three decimals, rounding half to even.
///
/// Rounding is applied to the shortest decimal representation of the value,
/// so `0.1235` becomes `0.124` and `0.1245` becomes `0.124` even though
/// neither is exactly representable in binary.
pub fn format_coordinate(value: f64) -> String {
    debug_assert!(value.is_finite() && value >= 0.0, "coordinate {value}");
    // -0.0 prints with a sign
    let repr = format!("{}", value.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((repr.as_str(), ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(COORD_DECIMALS))
        .map(|b| b - b'0')
        .collect();
    let rest = frac_part.as_bytes().get(COORD_DECIMALS..).unwrap_or(&[]);
    let round_up = match rest.first() {
        None => false,
        Some(&d) if d > b'5' => true,
        Some(&d) if d < b'5' => false,
        Some(_) => {
            let exact_half = rest[1..].iter().all(|&d| d == b'0');
            !exact_half || digits.last().is_some_and(|d| d % 2 == 1)
        }
    };
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - COORD_DECIMALS;
    let to_str = |ds: &[u8]| ds.iter().map(|d| char::from(b'0' + d)).collect::<String>();
    format!("{}.{}", to_str(&digits[..split]), to_str(&digits[split..]))
}

/// `<box>` + comma-joined quantized coordinates + `</box>`.
pub fn serialize_region(r: &Region) -> String {
    serialize_region_with(r, &RegionFormat::default())
}

pub fn serialize_region_with(r: &Region, format: &RegionFormat) -> String {
    let coords: Vec<String> = r
        .points()
        .iter()
        .flat_map(|p| [format_coordinate(p.x), format_coordinate(p.y)])
        .collect();
    format!("{BOX_OPEN}{}{BOX_CLOSE}", coords.join(&format.separator))
}

/// A region recovered from text together with the byte range of its span.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpan {
    pub region: Region,
    pub span: Range<usize>,
}

/// Extracts every `<box>...</box>` span in `text`.
///
/// Coordinates may be separated by commas and/or whitespace. One pair gives
/// a point, two a box, more a polygon. Any malformed span fails the whole
/// parse with its byte offset.
pub fn parse_region_tokens(text: &str) -> Result<Vec<RegionSpan>, InstructError> {
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(BOX_OPEN) {
        let start = cursor + rel;
        let body_start = start + BOX_OPEN.len();
        let close_rel = text[body_start..].find(BOX_CLOSE);
        let next_open = text[body_start..].find(BOX_OPEN);
        let body_end = match (close_rel, next_open) {
            (Some(c), Some(o)) if o < c => None,
            (Some(c), _) => Some(body_start + c),
            (None, _) => None,
        }
        .ok_or_else(|| parse_err(start, "unterminated <box>"))?;
        let region = parse_span_body(&text[body_start..body_end], start)?;
        let end = body_end + BOX_CLOSE.len();
        out.push(RegionSpan {
            region,
            span: start..end,
        });
        cursor = end;
    }
    Ok(out)
}

fn parse_err(offset: usize, reason: impl Into<String>) -> InstructError {
    InstructError::Parse {
        offset,
        reason: reason.into(),
    }
}

fn parse_span_body(body: &str, offset: usize) -> Result<Region, InstructError> {
    let coords = body
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(offset, format!("`{s}` is not a number")))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    if coords.is_empty() {
        return Err(parse_err(offset, "empty span"));
    }
    if coords.len() % 2 != 0 {
        return Err(parse_err(
            offset,
            format!("odd coordinate count {}", coords.len()),
        ));
    }
    if let Some(v) = coords.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(parse_err(offset, format!("coordinate {v} outside [0, 1]")));
    }
    let points: Vec<Point> = coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
    let kind = RegionKind::from_point_count(points.len()).expect("non-empty");
    let points = if kind == RegionKind::Box {
        let (a, b) = (points[0], points[1]);
        vec![
            Point::new(a.x.min(b.x), a.y.min(b.y)),
            Point::new(a.x.max(b.x), a.y.max(b.y)),
        ]
    } else {
        points
    };
    Region::new(kind, points).map_err(|e| parse_err(offset, e.to_string()))
}

/// Distinct `<region:i>` indices referenced by `text`, ascending.
pub fn region_placeholders(text: &str) -> BTreeSet<usize> {
    REGION_PLACEHOLDER
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

/// Replaces every `<region:i>` with the serialized `regions[i]`.
pub fn expand_region_placeholders(
    text: &str,
    regions: &[Region],
    format: &RegionFormat,
) -> Result<String, InstructError> {
    if let Some(&bad) = region_placeholders(text).iter().find(|&&i| i >= regions.len()) {
        return Err(InstructError::Reference {
            index: bad,
            available: regions.len(),
        });
    }
    Ok(REGION_PLACEHOLDER
        .replace_all(text, |c: &regex::Captures<'_>| {
            let i: usize = c[1].parse().expect("checked above");
            serialize_region_with(&regions[i], format)
        })
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub task: TaskKind,
    pub body: String,
    #[serde(default)]
    pub style: Style,
}

impl Template {
    /// Validates placeholder rules for the template's task.
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        body: impl Into<String>,
        style: Style,
    ) -> Result<Self, InstructError> {
        let t = Self {
            id: id.into(),
            task,
            body: body.into(),
            style,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), InstructError> {
        let slots = region_placeholders(&self.body);
        let err = |msg: String| InstructError::Config(format!("template `{}`: {msg}", self.id));
        if self.task.is_region_task() && slots.is_empty() {
            return Err(err("region task without a <region:i> placeholder".into()));
        }
        if !self.task.is_region_task() && !slots.is_empty() {
            return Err(err("image task with a region placeholder".into()));
        }
        if slots.iter().copied().ne(0..slots.len()) {
            return Err(err(format!("region indices {slots:?} are not contiguous from 0")));
        }
        Ok(())
    }

    pub fn region_slots(&self) -> usize {
        region_placeholders(&self.body).len()
    }

    pub fn has_question(&self) -> bool {
        self.body.contains(QUESTION_PLACEHOLDER)
    }

    fn check_args(&self, question: Option<&str>, n_regions: Option<usize>) -> Result<(), InstructError> {
        let mut problems = Vec::new();
        match (self.has_question(), question) {
            (true, None) => problems.push("missing <question>".to_string()),
            (false, Some(_)) => problems.push("unexpected question (no <question> slot)".to_string()),
            _ => {}
        }
        if let Some(n) = n_regions {
            let slots = self.region_slots();
            problems.extend((n..slots).map(|i| format!("missing <region:{i}>")));
            if n > slots {
                problems.push(format!("{} surplus region(s)", n - slots));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(InstructError::Template {
                template: self.id.clone(),
                problems,
            })
        }
    }
}

/// Rendered instruction text plus the regions serialized into it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedInstruction {
    pub text: String,
    pub regions: Vec<Region>,
}

/// Template set loaded from TOML, immutable after load.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
    format: RegionFormat,
    short_clause: String,
    detail_clause: String,
}

#[derive(Deserialize)]
struct RegistryFile {
    #[serde(default = "default_separator")]
    coordinate_separator: String,
    #[serde(default)]
    styles: StyleClauses,
    templates: BTreeMap<String, TemplateEntry>,
}

#[derive(Deserialize)]
struct StyleClauses {
    short: String,
    detail: String,
}

impl Default for StyleClauses {
    fn default() -> Self {
        Self {
            short: "Answer in short.".into(),
            detail: "Answer in detail.".into(),
        }
    }
}

#[derive(Deserialize)]
struct TemplateEntry {
    task: TaskKind,
    body: String,
    #[serde(default)]
    style: Style,
}

fn default_separator() -> String {
    ",".into()
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::from_toml(DEFAULT_REGISTRY).expect("shipped template registry is valid")
    }
}

impl TemplateRegistry {
    pub fn from_toml(src: &str) -> Result<Self, InstructError> {
        let file: RegistryFile =
            toml::from_str(src).map_err(|e| InstructError::Config(e.to_string()))?;
        if file.coordinate_separator.is_empty() {
            return Err(InstructError::Config("empty coordinate separator".into()));
        }
        let templates = file
            .templates
            .into_iter()
            .map(|(id, e)| Template::new(id.clone(), e.task, e.body, e.style).map(|t| (id, t)))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok(Self {
            templates,
            format: RegionFormat {
                separator: file.coordinate_separator,
            },
            short_clause: file.styles.short,
            detail_clause: file.styles.detail,
        })
    }

    pub fn load(path: &Path) -> Result<Self, InstructError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| InstructError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.get(id)
    }

    pub fn templates(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    /// Templates for `task`, ordered by id.
    pub fn pool(&self, task: TaskKind) -> Vec<&Template> {
        self.templates.values().filter(|t| t.task == task).collect()
    }

    pub fn format(&self) -> &RegionFormat {
        &self.format
    }

    pub fn style_clause(&self, style: Style) -> Option<&str> {
        match style {
            Style::Short => Some(&self.short_clause),
            Style::Detail => Some(&self.detail_clause),
            Style::None => None,
        }
    }

    /// Substitutes the question and appends the style clause, leaving
    /// `<region:i>` placeholders in place for storage.
    pub fn fill(&self, template: &Template, question: Option<&str>) -> Result<String, InstructError> {
        template.check_args(question, None)?;
        let mut text = match question {
            Some(q) => template.body.replace(QUESTION_PLACEHOLDER, q.trim()),
            None => template.body.clone(),
        };
        if let Some(clause) = self.style_clause(template.style) {
            text.push(' ');
            text.push_str(clause);
        }
        Ok(text)
    }

    /// Fully expands a template into instruction text.
    pub fn render(
        &self,
        template: &Template,
        question: Option<&str>,
        regions: &[Region],
    ) -> Result<RenderedInstruction, InstructError> {
        template.check_args(question, Some(regions.len()))?;
        let filled = self.fill(template, question)?;
        let text = expand_region_placeholders(&filled, regions, &self.format)?;
        Ok(RenderedInstruction {
            text,
            regions: regions.to_vec(),
        })
    }

    /// Guesses which task produced `text` by matching it against every
    /// template skeleton, ignoring region spans, the question and style tags.
    pub fn identify_task(&self, text: &str) -> Option<TaskKind> {
        let probe = squash_ws(&strip_style(self, &replace_spans(text)));
        let mut fuzzy = None;
        for t in self.templates.values() {
            let skeleton = squash_ws(&REGION_PLACEHOLDER.replace_all(&t.body, "\u{1}"));
            if !t.has_question() {
                if skeleton == probe {
                    return Some(t.task);
                }
                continue;
            }
            if fuzzy.is_none() {
                let pattern = skeleton
                    .split(QUESTION_PLACEHOLDER)
                    .map(regex::escape)
                    .collect::<Vec<_>>()
                    .join(".+");
                if Regex::new(&format!("^{pattern}$")).is_ok_and(|re| re.is_match(&probe)) {
                    fuzzy = Some(t.task);
                }
            }
        }
        fuzzy
    }
}

/// Lowercased text with region spans and placeholders removed. Two prompts
/// built from the same template and question share a skeleton.
pub fn prompt_skeleton(text: &str) -> String {
    let spanless = replace_spans(text).replace('\u{1}', " ");
    squash_ws(&REGION_PLACEHOLDER.replace_all(&spanless, " ")).to_lowercase()
}

fn replace_spans(text: &str) -> String {
    match parse_region_tokens(text) {
        Ok(spans) => {
            let mut out = String::with_capacity(text.len());
            let mut last = 0;
            for s in spans {
                out.push_str(&text[last..s.span.start]);
                out.push('\u{1}');
                last = s.span.end;
            }
            out.push_str(&text[last..]);
            out
        }
        Err(_) => text.to_string(),
    }
}

fn strip_style(reg: &TemplateRegistry, text: &str) -> String {
    let trimmed = text.trim_end();
    for clause in [&reg.short_clause, &reg.detail_clause] {
        if let Some(head) = trimmed.strip_suffix(clause.as_str()) {
            return head.to_string();
        }
    }
    trimmed.to_string()
}

fn squash_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Flattens a stored record into `(role, text)` turns with regions expanded.
pub fn render_conversation(record: &InstructionRecord) -> Result<Vec<(Role, String)>, InstructError> {
    render_conversation_with(record, &record.regions, &RegionFormat::default())
}

/// Like [`render_conversation`] with substitute regions, e.g. perturbed boxes.
pub fn render_conversation_with(
    record: &InstructionRecord,
    regions: &[Region],
    format: &RegionFormat,
) -> Result<Vec<(Role, String)>, InstructError> {
    record
        .turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(InstructError::RoleOrder {
                    index: i,
                    found: turn.role,
                    expected,
                });
            }
            Ok((turn.role, expand_region_placeholders(&turn.text, regions, format)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRef, InstructionRecord, Split, Turn};
    use crate::geometry::ImageDims;

    fn sample_box() -> Region {
        Region::bbox(0.1, 0.2, 0.5, 0.8).unwrap()
    }

    #[test]
    fn coordinate_rounding_table() {
        // Worked by hand on the decimal digits, ties to even.
        let table = [
            (0.1235, "0.124"),
            (0.1245, "0.124"),
            (0.1255, "0.126"),
            (0.12451, "0.125"),
            (0.5, "0.500"),
            (0.0, "0.000"),
            (1.0, "1.000"),
            (0.9995, "1.000"),
            (0.9985, "0.998"),
            (0.0005, "0.000"),
            (0.0015, "0.002"),
            (0.1234999, "0.123"),
            (0.3333333333333333, "0.333"),
            (2.0 / 3.0, "0.667"),
        ];
        for (v, want) in table {
            assert_eq!(format_coordinate(v), want, "{v}");
        }
    }

    #[test]
    fn serialize_examples() {
        assert_eq!(serialize_region(&Region::point(0.5, 0.5).unwrap()), "<box>0.500,0.500</box>");
        assert_eq!(serialize_region(&sample_box()), "<box>0.100,0.200,0.500,0.800</box>");
        let fmt = RegionFormat { separator: " ".into() };
        assert_eq!(serialize_region_with(&sample_box(), &fmt), "<box>0.100 0.200 0.500 0.800</box>");
    }

    #[test]
    fn parse_examples() {
        let text = "What is here? <box>0.100,0.200,0.500,0.800</box>";
        let spans = parse_region_tokens(text).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].region, sample_box());
        assert_eq!(&text[spans[0].span.clone()], "<box>0.100,0.200,0.500,0.800</box>");
        assert!(parse_region_tokens("no regions here").unwrap().is_empty());

        let err = parse_region_tokens("<box>0.1,0.2,0.3</box>").unwrap_err();
        assert!(matches!(err, InstructError::Parse { offset: 0, ref reason } if reason.contains("odd")));
        let err = parse_region_tokens("ok <box>0.1,0.2").unwrap_err();
        assert!(matches!(err, InstructError::Parse { offset: 3, .. }));
        assert!(parse_region_tokens("<box>0.1,1.2</box>").is_err());
        assert!(parse_region_tokens("<box></box>").is_err());
        assert!(parse_region_tokens("<box>a,b</box>").is_err());
        assert!(parse_region_tokens("<box>0.1,0.2 <box>0.3,0.4</box>").is_err());

        let spans = parse_region_tokens("<box>0.1 0.1, 0.4 0.2, 0.2 0.5</box> and <box>0.3,0.3</box>").unwrap();
        assert_eq!(spans[0].region.kind(), RegionKind::Polygon);
        assert_eq!(spans[1].region.kind(), RegionKind::Point);
    }

    #[test]
    fn render_examples() {
        let reg = TemplateRegistry::default();
        let r = reg.render(reg.get("region_class").unwrap(), None, &[sample_box()]).unwrap();
        assert_eq!(r.text, "What can you see in this region? <box>0.100,0.200,0.500,0.800</box>");
        let r = reg.render(reg.get("region_ocr").unwrap(), None, &[sample_box()]).unwrap();
        assert_eq!(r.text, "What text can you see in this region? <box>0.100,0.200,0.500,0.800</box>");
        let r = reg.render(reg.get("vqa").unwrap(), Some("what color is the bus"), &[]).unwrap();
        assert!(r.text.ends_with("Answer in short."), "{}", r.text);
        assert_eq!(r.text, "Given an image <image>, please tell me: what color is the bus Answer in short.");
    }

    #[test]
    fn render_mismatch_lists_slots() {
        let reg = TemplateRegistry::default();
        let err = reg.render(reg.get("region_vqa").unwrap(), None, &[]).unwrap_err();
        match err {
            InstructError::Template { problems, .. } => {
                assert!(problems.contains(&"missing <question>".to_string()));
                assert!(problems.contains(&"missing <region:0>".to_string()));
            }
            other => panic!("{other:?}"),
        }
        let err = reg
            .render(reg.get("caption").unwrap(), Some("q"), &[sample_box()])
            .unwrap_err();
        assert!(matches!(err, InstructError::Template { ref problems, .. } if problems.len() == 2));
    }

    #[test]
    fn template_validation() {
        assert!(Template::new("a", TaskKind::RegionClass, "no slots", Style::None).is_err());
        assert!(Template::new("b", TaskKind::Caption, "<region:0>", Style::None).is_err());
        assert!(Template::new("c", TaskKind::RegionChat, "<region:0> <region:2>", Style::None).is_err());
        assert!(Template::new("d", TaskKind::RegionChat, "<region:1> <region:0>", Style::None).is_ok());
    }

    #[test]
    fn registry_from_toml() {
        let src = r#"
coordinate_separator = ";"
[templates.x]
task = "region_class"
body = "Name it <region:0>"
style = "detail"
"#;
        let reg = TemplateRegistry::from_toml(src).unwrap();
        let r = reg.render(reg.get("x").unwrap(), None, &[Region::point(0.5, 0.25).unwrap()]).unwrap();
        assert_eq!(r.text, "Name it <box>0.500;0.250</box> Answer in detail.");
        assert!(TemplateRegistry::from_toml("templates = 3").is_err());
    }

    #[test]
    fn identify_task_from_prompt() {
        let reg = TemplateRegistry::default();
        let b = serialize_region(&sample_box());
        assert_eq!(reg.identify_task(&format!("What can you see in this region? {b}")), Some(TaskKind::RegionClass));
        assert_eq!(reg.identify_task(&format!("What text can you see in this region? {b}")), Some(TaskKind::RegionOcr));
        assert_eq!(reg.identify_task(&format!("how many dogs {b} Answer in short.")), Some(TaskKind::RegionVqa));
        assert_eq!(reg.identify_task("something unrelated"), None);
    }

    fn record(turns: Vec<(Role, &str)>, regions: Vec<Region>) -> InstructionRecord {
        InstructionRecord {
            id: "r".into(),
            image: ImageRef {
                uri: "img.jpg".into(),
                dims: ImageDims::new(10, 10).unwrap(),
                id: None,
            },
            task: TaskKind::RegionChat,
            turns: turns
                .into_iter()
                .map(|(role, text)| Turn { role, text: text.into() })
                .collect(),
            regions,
            style: Style::None,
            source: "test".into(),
            split: Split::Stage2,
            ground_truth: None,
        }
    }

    #[test]
    fn conversation_rendering() {
        let rec = record(vec![(Role::User, "What is this? <region:0>")], vec![sample_box()]);
        let turns = render_conversation(&rec).unwrap();
        assert_eq!(turns.len(), 1);
        assert_eq!(parse_region_tokens(&turns[0].1).unwrap().len(), 1);

        let rec = record(
            vec![
                (Role::User, "Look at <region:0>"),
                (Role::Assistant, "A dog."),
                (Role::User, "And <region:0>?"),
            ],
            vec![sample_box()],
        );
        let roles: Vec<Role> = render_conversation(&rec).unwrap().into_iter().map(|t| t.0).collect();
        assert_eq!(roles, [Role::User, Role::Assistant, Role::User]);

        let rec = record(vec![(Role::User, "<region:1>")], vec![sample_box()]);
        assert_eq!(
            render_conversation(&rec).unwrap_err(),
            InstructError::Reference { index: 1, available: 1 }
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_region() -> impl Strategy<Value = Region> {
            prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..6).prop_map(|pts| {
                let kind = RegionKind::from_point_count(pts.len()).unwrap();
                let mut points: Vec<Point> = pts.into_iter().map(Point::from).collect();
                if kind == RegionKind::Box {
                    let (a, b) = (points[0], points[1]);
                    points = vec![
                        Point::new(a.x.min(b.x), a.y.min(b.y)),
                        Point::new(a.x.max(b.x), a.y.max(b.y)),
                    ];
                }
                Region::new(kind, points).unwrap()
            })
        }

        proptest! {
            #[test]
            fn serialize_parse_round_trip(r in arb_region()) {
                let text = serialize_region(&r);
                let spans = parse_region_tokens(&text).unwrap();
                prop_assert_eq!(spans.len(), 1);
                prop_assert!(spans[0].region.approx_eq(&r, 5e-4 + 1e-12));
            }

            #[test]
            fn distinct_regions_serialize_distinctly(x in 0.0..0.99f64, y in 0.0..1.0f64, d in 0.0011..0.01f64) {
                let a = Region::point(x, y).unwrap();
                let b = Region::point(x + d, y).unwrap();
                prop_assert_ne!(serialize_region(&a), serialize_region(&b));
            }

            #[test]
            fn render_leaves_no_placeholder(rs in prop::collection::vec(arb_region(), 1..4)) {
                let body: Vec<String> = (0..rs.len()).map(|i| format!("see <region:{i}>")).collect();
                let t = Template::new("t", TaskKind::RegionChat, body.join(" and "), Style::None).unwrap();
                let out = TemplateRegistry::default().render(&t, None, &rs).unwrap();
                prop_assert_eq!(out.text.matches(BOX_OPEN).count(), rs.len());
                prop_assert!(region_placeholders(&out.text).is_empty());
            }
        }
    }
}
