//! Three-step chain-of-thoughts annotation pipeline over a pluggable
//! annotator client, plus dataset assembly with train/test splits.
//!
//! Step 1 recognizes each tampered instance (content via OCR for text tasks,
//! via one client query otherwise; absolute position computed geometrically).
//! Step 2 asks for a focused artifact description of that one instance.
//! Step 3 has the annotator examine and clean its own response, guarded by a
//! hedging-marker check with one retry.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ImlError, Result};
use crate::interp::{
    build_highlight, validate_annotation_value, AnnotationItem, ArtifactAnnotation,
};
use crate::types::{connected_components, BoundingBox, Image, InstanceSet, Sample, TaskKind};

pub const STEP1_TEMPLATE: &str = include_str!("../resources/step1_prompt.txt");
pub const STEP2_TEMPLATE: &str = include_str!("../resources/step2_prompt.txt");
pub const STEP3_TEMPLATE: &str = include_str!("../resources/step3_prompt.txt");
pub const STEP3_EXEMPLAR: &str = include_str!("../resources/step3_exemplar.json");
/// Bumped whenever the shipped prompt wording changes.
pub const PROMPT_VERSION: u32 = 1;

/// Default markers that flag an unconfident response.
pub fn default_hedging_markers() -> Vec<String> {
    ["might", "possibly", "appears to", "perhaps", "maybe", "seems"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Text+image completion endpoint. Implementations must be safe to call from
/// multiple threads.
pub trait AnnotatorClient: Send + Sync {
    /// Capability descriptor (model/endpoint name).
    fn describe(&self) -> String;
    /// True when identical (images, prompt) pairs always yield identical text.
    fn deterministic(&self) -> bool;
    fn query(&self, images: &[&Image], prompt: &str) -> Result<String>;
}

fn digest_query(images: &[&Image], prompt: &str) -> u64 {
    let mut hasher = Sha256::new();
    for img in images {
        for v in img.pixels().iter() {
            hasher.update([*v]);
        }
    }
    hasher.update(prompt.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

const MOCK_OBJECTS: [&str; 8] = [
    "a sleeping orange cat",
    "a basketball",
    "a blue sedan",
    "a wooden chair",
    "a coffee mug",
    "a street sign",
    "a potted plant",
    "a paper receipt",
];

const MOCK_RELATIONS: [&str; 6] = [
    "on the leftmost green table",
    "next to the window frame",
    "under the large lamp",
    "between the two columns",
    "in front of the bookshelf",
    "beside the doorway",
];

const MOCK_TITLES: [&str; 5] = [
    "Texture Artifacts",
    "Edge Artifacts",
    "Lighting Artifacts",
    "Perspective Artifacts",
    "Semantic Artifacts",
];

const MOCK_FINDINGS: [&str; 5] = [
    "the grain is flatter than the surrounding surface",
    "the boundary is unnaturally sharp with no transition pixels",
    "the highlight direction disagrees with the scene light",
    "the vanishing lines do not converge with the background",
    "the content contradicts the nearby context",
];

/// Deterministic in-process annotator: responses are a pure function of the
/// (images, prompt) digest. Step-3 prompts are answered by echoing the draft
/// object with hedging words stripped.
#[derive(Debug, Default)]
pub struct MockClient;

impl AnnotatorClient for MockClient {
    fn describe(&self) -> String {
        "mock (deterministic canned responses)".into()
    }
    fn deterministic(&self) -> bool {
        true
    }
    fn query(&self, images: &[&Image], prompt: &str) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(digest_query(images, prompt));
        if prompt.starts_with(STEP1_TEMPLATE.lines().next().unwrap_or("")) {
            let obj = MOCK_OBJECTS[rng.gen_range(0..MOCK_OBJECTS.len())];
            let rel = MOCK_RELATIONS[rng.gen_range(0..MOCK_RELATIONS.len())];
            return Ok(format!("Content: {obj}\nRelative Position: {rel}"));
        }
        if prompt.contains("Reply with the cleaned JSON object only.") {
            // step 3: echo the draft (embedded in the prompt) minus hedging
            let draft = crate::interp::extract_json_array(prompt); // not an array; fall through
            let _ = draft;
            let cleaned = extract_json_object(prompt)
                .map(strip_hedging)
                .unwrap_or_else(|| "{}".to_string());
            return Ok(format!("Here is the cleaned response:\n{cleaned}"));
        }
        // step 2: synthesize a title -> description map (sometimes hedged, so
        // step 3 has something to clean)
        let count = 2 + rng.gen_range(0..2);
        let mut picked = BTreeMap::new();
        while picked.len() < count {
            let i = rng.gen_range(0..MOCK_TITLES.len());
            let hedge = if rng.gen_bool(0.4) { "it appears to be that " } else { "" };
            picked.insert(
                MOCK_TITLES[i].to_string(),
                format!("Within the highlighted region, {hedge}{}.", MOCK_FINDINGS[i]),
            );
        }
        Ok(serde_json::to_string(&picked)?)
    }
}

fn strip_hedging(text: String) -> String {
    let mut out = text;
    for marker in default_hedging_markers() {
        out = out.replace(&format!("{marker} "), "");
        out = out.replace(&format!("it appears to be that "), "");
    }
    out
}

/// Client that keeps answering with MORE hedging words; exercises the step-3
/// retry-then-flag path in tests.
#[derive(Debug, Default)]
pub struct HedgingClient {
    inner: MockClient,
}

impl AnnotatorClient for HedgingClient {
    fn describe(&self) -> String {
        "mock (always hedging)".into()
    }
    fn deterministic(&self) -> bool {
        true
    }
    fn query(&self, images: &[&Image], prompt: &str) -> Result<String> {
        let base = self.inner.query(images, prompt)?;
        if prompt.contains("Reply with the cleaned JSON object only.") {
            let obj = extract_json_object(&base).unwrap_or("{}");
            let mut value: serde_json::Value = serde_json::from_str(obj)?;
            if let Some(map) = value.as_object_mut() {
                for v in map.values_mut() {
                    if let Some(s) = v.as_str() {
                        *v = serde_json::Value::String(format!("maybe possibly {s}"));
                    }
                }
            }
            return Ok(value.to_string());
        }
        Ok(base)
    }
}

/// HTTP client for a text+image completion endpoint: multipart POST with one
/// PNG part per image and a `prompt` text part; the response body is the
/// completion text. Configured via environment:
/// `IMLKIT_ANNOTATOR_URL` (endpoint) and `IMLKIT_ANNOTATOR_TOKEN` (optional
/// bearer token). Request/response pairs can be audited to JSONL.
pub struct HttpClient {
    url: String,
    token: Option<String>,
    agent: reqwest::blocking::Client,
    audit: Option<Mutex<std::fs::File>>,
}

impl HttpClient {
    pub const URL_ENV: &'static str = "IMLKIT_ANNOTATOR_URL";
    pub const TOKEN_ENV: &'static str = "IMLKIT_ANNOTATOR_TOKEN";

    pub fn from_env(audit_log: Option<&std::path::Path>) -> Result<Self> {
        let url = std::env::var(Self::URL_ENV).map_err(|_| {
            ImlError::Client(format!("{} is not set (annotator endpoint)", Self::URL_ENV))
        })?;
        Self::new(url, std::env::var(Self::TOKEN_ENV).ok(), audit_log)
    }

    pub fn new(url: String, token: Option<String>, audit_log: Option<&std::path::Path>) -> Result<Self> {
        let audit = match audit_log {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        Ok(Self {
            url,
            token,
            agent: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(120))
                .build()
                .map_err(|e| ImlError::Client(e.to_string()))?,
            audit,
        })
    }

    fn png_bytes(img: &Image) -> Result<Vec<u8>> {
        let (h, w) = (img.height(), img.width());
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(x as u32, y as u32, image::Rgb(img.get(y, x)));
            }
        }
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

impl AnnotatorClient for HttpClient {
    fn describe(&self) -> String {
        format!("http endpoint {}", self.url)
    }
    fn deterministic(&self) -> bool {
        false
    }
    fn query(&self, images: &[&Image], prompt: &str) -> Result<String> {
        let mut form = reqwest::blocking::multipart::Form::new().text("prompt", prompt.to_string());
        for (i, img) in images.iter().enumerate() {
            let part = reqwest::blocking::multipart::Part::bytes(Self::png_bytes(img)?)
                .file_name(format!("image_{i}.png"))
                .mime_str("image/png")
                .map_err(|e| ImlError::Client(e.to_string()))?;
            form = form.part(format!("image_{i}"), part);
        }
        let mut req = self.agent.post(&self.url).multipart(form);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| ImlError::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ImlError::Client(format!("endpoint returned {}", resp.status())));
        }
        let text = resp.text().map_err(|e| ImlError::Client(e.to_string()))?;
        if let Some(audit) = &self.audit {
            let line = serde_json::json!({"prompt": prompt, "response": text, "images": images.len()});
            if let Ok(mut f) = audit.lock() {
                let _ = writeln!(f, "{line}");
            }
        }
        Ok(text)
    }
}

/// Reads text inside a box (the OCR stand-in for text tasks). Deterministic
/// implementations keep the pipeline reproducible.
pub trait TextOracle: Send + Sync {
    fn read(&self, image: &Image, bbox: &BoundingBox) -> String;
}

/// Deterministic pseudo-OCR: hashes the cropped pixels into a short token.
#[derive(Debug, Default)]
pub struct HashTextOracle;

impl TextOracle for HashTextOracle {
    fn read(&self, image: &Image, bbox: &BoundingBox) -> String {
        let mut hasher = Sha256::new();
        for y in bbox.y_min..bbox.y_max.min(image.height()) {
            for x in bbox.x_min..bbox.x_max.min(image.width()) {
                hasher.update(image.get(y, x));
            }
        }
        let d = hasher.finalize();
        format!("txt-{:02x}{:02x}{:02x}", d[0], d[1], d[2])
    }
}

/// Finds the first balanced top-level JSON object in free text.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut start = None;
    let mut depth = 0i64;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' => {
                if start.is_some() {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&raw[start.unwrap()..=i]);
                    }
                }
            }
            _ => {}
        }
    }
    None
}

/// Step-1 result for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecognition {
    pub content: String,
    pub absolute_position: String,
    pub relative_position: String,
}

/// Step-2/3 result: artifact titles mapped to descriptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactDraft {
    pub t_des: BTreeMap<String, String>,
}

/// Geometric 9-cell position of a component centroid.
pub fn absolute_position_of(pixels: &[(usize, usize)], h: usize, w: usize) -> String {
    let n = pixels.len().max(1) as f64;
    let cy: f64 = pixels.iter().map(|&(y, _)| y as f64).sum::<f64>() / n;
    let cx: f64 = pixels.iter().map(|&(_, x)| x as f64).sum::<f64>() / n;
    let row = if cy < h as f64 / 3.0 {
        "Top"
    } else if cy < 2.0 * h as f64 / 3.0 {
        "Middle"
    } else {
        "Bottom"
    };
    let col = if cx < w as f64 / 3.0 {
        "left"
    } else if cx < 2.0 * w as f64 / 3.0 {
        "center"
    } else {
        "right"
    };
    format!("{row} {col}")
}

/// Pipeline options.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub hedging_markers: Vec<String>,
    /// Drop records whose step-3 fallback was flagged (assembly-time).
    pub strict: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { hedging_markers: default_hedging_markers(), strict: true }
    }
}

/// Per-sample pipeline outcome.
#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    pub annotation: Option<ArtifactAnnotation>,
    /// Step-3 hedging fallback fired for at least one instance.
    pub flagged: bool,
    /// Per-instance failures (instance index, stage, message).
    pub failures: Vec<(usize, &'static str, String)>,
    pub queries: usize,
}

fn count_markers(text: &str, markers: &[String]) -> usize {
    let lower = text.to_lowercase();
    markers.iter().map(|m| lower.matches(m.as_str()).count()).sum()
}

/// Runs the full three-step pipeline for one tampered sample.
pub struct Pipeline<'a> {
    pub client: &'a dyn AnnotatorClient,
    pub ocr: Option<&'a dyn TextOracle>,
    pub cfg: PipelineConfig,
    queries: AtomicUsize,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        client: &'a dyn AnnotatorClient,
        ocr: Option<&'a dyn TextOracle>,
        cfg: PipelineConfig,
    ) -> Self {
        Self { client, ocr, cfg, queries: AtomicUsize::new(0) }
    }

    pub fn queries_made(&self) -> usize {
        self.queries.load(Ordering::Relaxed)
    }

    fn ask(&self, images: &[&Image], prompt: &str) -> Result<String> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.client.query(images, prompt)
    }

    /// Step 1: instance-wise recognition. Text tasks read content (and the
    /// containing line) from the OCR oracle without client queries; other
    /// tasks issue one client query per instance.
    pub fn step1_recognize(
        &self,
        sample: &Sample,
        instances: &InstanceSet,
    ) -> Vec<std::result::Result<InstanceRecognition, String>> {
        let (h, w) = (sample.image.height(), sample.image.width());
        let mut out = Vec::with_capacity(instances.count());
        for n in 1..=instances.count() {
            let (pixels, bbox) = &instances.components[n - 1];
            let absolute_position = absolute_position_of(pixels, h, w);
            if sample.task.is_text() {
                let Some(ocr) = self.ocr else {
                    out.push(Err("text task requires an OCR oracle".to_string()));
                    continue;
                };
                let content = ocr.read(&sample.image, bbox);
                // the containing text line: the box stretched across the page
                let line_box = BoundingBox::new(0, bbox.y_min, w, bbox.y_max)
                    .expect("line box is non-degenerate");
                let relative_position = ocr.read(&sample.image, &line_box);
                out.push(Ok(InstanceRecognition { content, absolute_position, relative_position }));
            } else {
                let highlight = match build_highlight(&sample.image, instances, n) {
                    Ok(hm) => hm,
                    Err(e) => {
                        out.push(Err(e.to_string()));
                        continue;
                    }
                };
                match self.ask(&[&sample.image, &highlight.image], STEP1_TEMPLATE) {
                    Ok(response) => match parse_step1(&response) {
                        Some((content, relative_position)) => out.push(Ok(InstanceRecognition {
                            content,
                            absolute_position,
                            relative_position,
                        })),
                        None => out.push(Err(format!(
                            "unparseable step-1 response: {response:.80}"
                        ))),
                    },
                    Err(e) => out.push(Err(e.to_string())),
                }
            }
        }
        out
    }

    /// Step 2: focused artifact description for instance `n` (1-based).
    pub fn step2_describe(
        &self,
        sample: &Sample,
        instances: &InstanceSet,
        rec: &InstanceRecognition,
        n: usize,
    ) -> Result<ArtifactDraft> {
        let highlight = build_highlight(&sample.image, instances, n)?;
        let prompt = STEP2_TEMPLATE
            .replace("{CONTENT}", &rec.content)
            .replace("{ABS}", &rec.absolute_position)
            .replace("{REL}", &rec.relative_position);
        for attempt in 0..2 {
            let response = self.ask(&[&sample.image, &highlight.image], &prompt)?;
            if let Some(obj) = extract_json_object(&response) {
                if let Ok(map) = serde_json::from_str::<BTreeMap<String, String>>(obj) {
                    if !map.is_empty() {
                        return Ok(ArtifactDraft { t_des: map });
                    }
                }
            }
            if attempt == 1 {
                return Err(ImlError::Client(format!(
                    "step-2 response unparseable after retry: {response:.80}"
                )));
            }
        }
        unreachable!()
    }

    /// Step 3: self-examination. The cleaned response replaces the draft
    /// unless its hedging-marker count increases; one retry, then the draft
    /// is kept and flagged.
    pub fn step3_self_examine(
        &self,
        sample: &Sample,
        instances: &InstanceSet,
        rec: &InstanceRecognition,
        draft: &ArtifactDraft,
        n: usize,
    ) -> (ArtifactDraft, bool) {
        let highlight = match build_highlight(&sample.image, instances, n) {
            Ok(h) => h,
            Err(_) => return (draft.clone(), true),
        };
        let draft_json = serde_json::to_string(&draft.t_des).expect("draft serializes");
        let draft_markers = count_markers(&draft_json, &self.cfg.hedging_markers);
        let prompt = STEP3_TEMPLATE
            .replace("{CONTENT}", &rec.content)
            .replace("{ABS}", &rec.absolute_position)
            .replace("{REL}", &rec.relative_position)
            .replace("{DRAFT}", &draft_json)
            .replace("{EXEMPLAR}", STEP3_EXEMPLAR);
        for attempt in 0..2 {
            let response = match self.ask(&[&sample.image, &highlight.image], &prompt) {
                Ok(r) => r,
                Err(_) => return (draft.clone(), true),
            };
            let parsed = extract_json_object(&response)
                .and_then(|obj| serde_json::from_str::<BTreeMap<String, String>>(obj).ok())
                .filter(|m| !m.is_empty());
            if let Some(map) = parsed {
                let cleaned_json = serde_json::to_string(&map).expect("map serializes");
                if count_markers(&cleaned_json, &self.cfg.hedging_markers) <= draft_markers {
                    return (ArtifactDraft { t_des: map }, false);
                }
            }
            if attempt == 1 {
                break;
            }
        }
        (draft.clone(), true)
    }

    /// Full pipeline for one tampered sample.
    pub fn annotate(&self, sample: &Sample) -> Result<AnnotationOutcome> {
        if sample.authentic {
            return Err(ImlError::InvalidInput(
                "authentic samples carry no annotation (m = 0)".into(),
            ));
        }
        let instances = connected_components(&sample.mask);
        let recs = self.step1_recognize(sample, &instances);
        let mut items = Vec::new();
        let mut failures = Vec::new();
        let mut flagged = false;
        for (idx, rec) in recs.into_iter().enumerate() {
            let n = idx + 1;
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    failures.push((n, "step1", e));
                    continue;
                }
            };
            let draft = match self.step2_describe(sample, &instances, &rec, n) {
                Ok(d) => d,
                Err(e) => {
                    failures.push((n, "step2", e.to_string()));
                    continue;
                }
            };
            let (fin, was_flagged) = self.step3_self_examine(sample, &instances, &rec, &draft, n);
            flagged |= was_flagged;
            items.push(AnnotationItem {
                tampered_region: rec.content,
                absolute_position: rec.absolute_position,
                relative_position: rec.relative_position,
                artifacts: fin.t_des,
            });
        }
        let annotation = if items.is_empty() {
            None
        } else {
            let ann = ArtifactAnnotation { items };
            // by construction the annotation passes schema validation
            debug_assert!(validate_annotation_value(
                &serde_json::to_value(&ann).expect("annotation value")
            )
            .is_ok());
            Some(ann)
        };
        Ok(AnnotationOutcome { annotation, flagged, failures, queries: self.queries_made() })
    }
}

fn parse_step1(response: &str) -> Option<(String, String)> {
    let mut content = None;
    let mut rel = None;
    for line in response.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Content:") {
            content = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("Relative Position:") {
            rel = Some(rest.trim().to_string());
        }
    }
    match (content, rel) {
        (Some(c), Some(r)) if !c.is_empty() => Some((c, r)),
        _ => None,
    }
}

// --- dataset assembly ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How samples map to splits (mirrors a source-family-based split).
#[derive(Debug, Clone)]
pub enum SplitRule {
    /// Tasks listed here go to the test split; all others train.
    ByTask(Vec<TaskKind>),
    /// Every k-th sample (by index) goes to the test split.
    EveryNth(usize),
}

impl SplitRule {
    fn split_of(&self, index: usize, task: TaskKind) -> Split {
        match self {
            SplitRule::ByTask(test_tasks) => {
                if test_tasks.contains(&task) {
                    Split::Test
                } else {
                    Split::Train
                }
            }
            SplitRule::EveryNth(k) => {
                if *k > 0 && index % k == 0 {
                    Split::Test
                } else {
                    Split::Train
                }
            }
        }
    }
}

/// One assembled record: sample index, annotation (tampered only) and split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssembledRecord {
    pub sample_index: usize,
    pub annotation: Option<ArtifactAnnotation>,
    pub split: Split,
}

/// Assembled dataset manifest with drop log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<AssembledRecord>,
    pub dropped: Vec<(usize, String)>,
}

/// Filters invalid/flagged annotations and assigns splits.
///
/// In strict mode a tampered record is dropped (with a reason) when its
/// annotation is missing, fails schema validation, or carries the step-3
/// warning flag. Authentic records pass through without annotations.
pub fn assemble(
    samples: &[Sample],
    outcomes: &[Option<AnnotationOutcome>],
    rule: &SplitRule,
    strict: bool,
) -> Result<DatasetManifest> {
    if samples.len() != outcomes.len() {
        return Err(ImlError::InvalidInput(format!(
            "{} samples vs {} outcomes",
            samples.len(),
            outcomes.len()
        )));
    }
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (i, (sample, outcome)) in samples.iter().zip(outcomes.iter()).enumerate() {
        let split = rule.split_of(i, sample.task);
        if sample.authentic {
            records.push(AssembledRecord { sample_index: i, annotation: None, split });
            continue;
        }
        let Some(outcome) = outcome else {
            dropped.push((i, "tampered sample was not annotated".into()));
            continue;
        };
        let Some(ann) = outcome.annotation.as_ref() else {
            dropped.push((i, "all instances failed annotation".into()));
            continue;
        };
        let value = serde_json::to_value(ann)?;
        if let Err(violations) = validate_annotation_value(&value) {
            dropped.push((i, format!("schema violations: {}", violations[0])));
            continue;
        }
        if strict && outcome.flagged {
            dropped.push((i, "step-3 hedging fallback flag".into()));
            continue;
        }
        records.push(AssembledRecord { sample_index: i, annotation: Some(ann.clone()), split });
    }
    Ok(DatasetManifest { records, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenSpec};

    fn tampered_sample(task: TaskKind, seed: u64) -> Sample {
        let spec = GenSpec::new(task, 1, (64, 64), seed);
        generate(&spec).unwrap().pop().unwrap()
    }

    #[test]
    fn absolute_position_grid() {
        // centroid at (0.1H, 0.1W) -> "Top left"
        assert_eq!(absolute_position_of(&[(10, 10)], 100, 100), "Top left");
        assert_eq!(absolute_position_of(&[(50, 50)], 100, 100), "Middle center");
        assert_eq!(absolute_position_of(&[(90, 10)], 100, 100), "Bottom left");
        assert_eq!(absolute_position_of(&[(10, 90)], 100, 100), "Top right");
    }

    #[test]
    fn query_counts_follow_the_3m_2m_law() {
        let client = MockClient;
        let ocr = HashTextOracle;

        // non-text: 3 queries per instance
        let sample = tampered_sample(TaskKind::Natural, 5);
        let m = connected_components(&sample.mask).count();
        let pipeline = Pipeline::new(&client, None, PipelineConfig::default());
        let out = pipeline.annotate(&sample).unwrap();
        assert_eq!(out.queries, 3 * m, "natural: 3 queries per instance");
        assert!(!out.flagged);
        assert_eq!(out.annotation.unwrap().items.len(), m);

        // text: OCR replaces step 1 -> 2 queries per instance
        let sample = tampered_sample(TaskKind::Document, 6);
        let m = connected_components(&sample.mask).count();
        let pipeline = Pipeline::new(&client, Some(&ocr), PipelineConfig::default());
        let out = pipeline.annotate(&sample).unwrap();
        assert_eq!(out.queries, 2 * m, "document: 2 queries per instance");
    }

    #[test]
    fn pipeline_is_deterministic_with_mock() {
        let client = MockClient;
        let sample = tampered_sample(TaskKind::Face, 9);
        let run = || {
            let p = Pipeline::new(&client, None, PipelineConfig::default());
            p.annotate(&sample).unwrap().annotation.unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn emitted_annotations_pass_schema() {
        let client = MockClient;
        let ocr = HashTextOracle;
        for (task, seed) in
            [(TaskKind::Natural, 1u64), (TaskKind::Document, 2), (TaskKind::Face, 3), (TaskKind::SceneText, 4)]
        {
            let sample = tampered_sample(task, seed);
            let p = Pipeline::new(&client, Some(&ocr), PipelineConfig::default());
            let out = p.annotate(&sample).unwrap();
            let ann = out.annotation.expect("annotation produced");
            let json = crate::interp::annotation_to_json(&ann);
            assert!(crate::interp::validate_annotation(&json).is_ok(), "{task:?}");
        }
    }

    #[test]
    fn hedging_increase_triggers_retry_then_flag() {
        let client = HedgingClient::default();
        let sample = tampered_sample(TaskKind::Natural, 11);
        let p = Pipeline::new(&client, None, PipelineConfig::default());
        let out = p.annotate(&sample).unwrap();
        assert!(out.flagged, "hedging client must trip the fallback");
        // the annotation still exists (draft kept)
        assert!(out.annotation.is_some());
        // step 3 ran twice per instance (retry), so queries = 4m per instance
        let m = connected_components(&sample.mask).count();
        assert_eq!(out.queries, 4 * m);
    }

    #[test]
    fn step2_prompt_contains_content_verbatim() {
        let rec = InstanceRecognition {
            content: "a peculiar teapot".into(),
            absolute_position: "Top left".into(),
            relative_position: "next to the stove".into(),
        };
        let prompt = STEP2_TEMPLATE
            .replace("{CONTENT}", &rec.content)
            .replace("{ABS}", &rec.absolute_position)
            .replace("{REL}", &rec.relative_position);
        assert!(prompt.contains("a peculiar teapot"));
        assert!(prompt.contains("texture, edge, lighting, perspective"));
    }

    #[test]
    fn assembly_drops_and_splits() {
        let samples = vec![
            tampered_sample(TaskKind::Natural, 21),
            tampered_sample(TaskKind::Document, 22),
            {
                let mut spec = GenSpec::new(TaskKind::Face, 1, (64, 64), 23);
                spec.authentic_ratio = 1.0;
                generate(&spec).unwrap().pop().unwrap()
            },
        ];
        let client = MockClient;
        let ocr = HashTextOracle;
        let outcomes: Vec<Option<AnnotationOutcome>> = samples
            .iter()
            .map(|s| {
                if s.authentic {
                    None
                } else {
                    let p = Pipeline::new(&client, Some(&ocr), PipelineConfig::default());
                    Some(p.annotate(s).unwrap())
                }
            })
            .collect();
        let rule = SplitRule::ByTask(vec![TaskKind::Document]);
        let manifest = assemble(&samples, &outcomes, &rule, true).unwrap();
        assert_eq!(manifest.records.len(), 3);
        assert_eq!(manifest.dropped.len(), 0);
        assert!(manifest
            .records
            .iter()
            .all(|r| (r.split == Split::Test) == (samples[r.sample_index].task == TaskKind::Document)));
        // a flagged outcome is dropped in strict mode, kept otherwise
        let hedged = HedgingClient::default();
        let p = Pipeline::new(&hedged, None, PipelineConfig::default());
        let flagged = p.annotate(&samples[0]).unwrap();
        let outcomes2 = vec![Some(flagged), None, None];
        let strict = assemble(&samples[..1], &outcomes2[..1], &rule, true).unwrap();
        assert_eq!(strict.records.len(), 0);
        assert_eq!(strict.dropped.len(), 1);
        let lax = assemble(&samples[..1], &outcomes2[..1], &rule, false).unwrap();
        assert_eq!(lax.records.len(), 1);
    }
}
