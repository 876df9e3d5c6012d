//! Interpretation support: the reference visual prompt (mask highlighted on
//! the input image), per-instance highlights, and the structured annotation
//! schema with validation and tolerant parsing of model output.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{ImlError, Result};
use crate::types::{BinaryMask, Image, InstanceSet};

/// Concatenation axis of the prompt composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptLayout {
    /// Tiles side by side (width doubles); used when H >= W.
    Horizontal,
    /// Tiles stacked (height doubles); used when W > H.
    Vertical,
}

/// The composite prompt image: input and highlighted reference tiled along
/// the image's longest side.
#[derive(Debug, Clone)]
pub struct ReferencePrompt {
    pub composite: Image,
    pub reference: Image,
    pub layout: PromptLayout,
}

/// ref = floor((input + 255*mask) / 2) per channel.
fn highlight_pixels(input: &Image, mask: &BinaryMask) -> Image {
    let (h, w) = (input.height(), input.width());
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let m = mask.get(y, x) as u16 * 255;
            let p = input.get(y, x);
            for c in 0..3 {
                px[[y, x, c]] = ((p[c] as u16 + m) / 2) as u8;
            }
        }
    }
    Image::new(px).expect("highlight preserves dims")
}

/// Builds the reference visual prompt for a predicted (or ground-truth) mask.
///
/// The mask is expanded to {0,255}, averaged into the image with integer
/// floor division, and the two tiles are concatenated along the longest side
/// (H >= W places them side by side, doubling width).
pub fn build_reference_prompt(input: &Image, mask: &BinaryMask) -> Result<ReferencePrompt> {
    let (h, w) = (input.height(), input.width());
    if (h, w) != (mask.height(), mask.width()) {
        return Err(ImlError::ShapeMismatch {
            expected: format!("{h}x{w}"),
            got: format!("{}x{}", mask.height(), mask.width()),
        });
    }
    let reference = highlight_pixels(input, mask);
    let layout = if h >= w { PromptLayout::Horizontal } else { PromptLayout::Vertical };
    let composite = match layout {
        PromptLayout::Horizontal => {
            let mut px = Array3::zeros((h, 2 * w, 3));
            for y in 0..h {
                for x in 0..w {
                    let a = input.get(y, x);
                    let b = reference.get(y, x);
                    for c in 0..3 {
                        px[[y, x, c]] = a[c];
                        px[[y, x + w, c]] = b[c];
                    }
                }
            }
            Image::new(px)?
        }
        PromptLayout::Vertical => {
            let mut px = Array3::zeros((2 * h, w, 3));
            for y in 0..h {
                for x in 0..w {
                    let a = input.get(y, x);
                    let b = reference.get(y, x);
                    for c in 0..3 {
                        px[[y, x, c]] = a[c];
                        px[[y + h, x, c]] = b[c];
                    }
                }
            }
            Image::new(px)?
        }
    };
    Ok(ReferencePrompt { composite, reference, layout })
}

/// Per-instance highlight: the reference formula applied to a mask containing
/// only instance `n` (1-based).
pub struct HighlightMask {
    pub image: Image,
    pub instance_index: usize,
}

pub fn build_highlight(input: &Image, instances: &InstanceSet, n: usize) -> Result<HighlightMask> {
    let mask = instances.instance_mask(n, input.height(), input.width())?;
    Ok(HighlightMask { image: highlight_pixels(input, &mask), instance_index: n })
}

// --- structured annotation schema -------------------------------------------

/// The four annotation keys, exactly as serialized.
pub const KEY_REGION: &str = "Tampered Region";
pub const KEY_ABS_POS: &str = "Absolute Position";
pub const KEY_REL_POS: &str = "Relative Position";
pub const KEY_ARTIFACTS: &str = "Artifacts";

/// One annotated tampered instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    #[serde(rename = "Tampered Region")]
    pub tampered_region: String,
    #[serde(rename = "Absolute Position")]
    pub absolute_position: String,
    #[serde(rename = "Relative Position")]
    pub relative_position: String,
    #[serde(rename = "Artifacts")]
    pub artifacts: BTreeMap<String, String>,
}

/// Structured annotation for one tampered image: a list of m >= 1 items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArtifactAnnotation {
    pub items: Vec<AnnotationItem>,
}

/// One schema violation, with enough context to fix the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub item_index: usize,
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "item {}: key '{}': {}", self.item_index, self.key, self.message)
    }
}

/// The nine grid cells accepted for "Absolute Position" (case-insensitive;
/// the trailing "of the image" is tolerated).
pub const POSITION_VOCAB: [&str; 9] = [
    "top left",
    "top center",
    "top right",
    "middle left",
    "middle center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
];

fn normalize_position(s: &str) -> String {
    let lower = s.to_lowercase();
    let trimmed = lower.trim().trim_end_matches("of the image").trim();
    let collapsed: Vec<&str> = trimmed.split_whitespace().collect();
    match collapsed.as_slice() {
        ["center"] | ["middle"] | ["center", "center"] => "middle center".to_string(),
        parts => parts.join(" "),
    }
}

/// True when the string names one of the nine grid cells.
pub fn is_valid_position(s: &str) -> bool {
    POSITION_VOCAB.contains(&normalize_position(s).as_str())
}

/// Validates a JSON document against the annotation schema: a non-empty array
/// of items carrying exactly the four keys, a vocabulary-conforming absolute
/// position, and a non-empty artifacts map. Returns the typed annotation or
/// the complete list of violations.
pub fn validate_annotation(doc: &str) -> std::result::Result<ArtifactAnnotation, Vec<Violation>> {
    let value: serde_json::Value = match serde_json::from_str(doc) {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![Violation {
                item_index: 0,
                key: "<document>".into(),
                message: format!("not valid JSON: {e}"),
            }])
        }
    };
    validate_annotation_value(&value)
}

/// Same as [`validate_annotation`] but over an already-parsed value.
pub fn validate_annotation_value(
    value: &serde_json::Value,
) -> std::result::Result<ArtifactAnnotation, Vec<Violation>> {
    let mut violations = Vec::new();
    let Some(array) = value.as_array() else {
        return Err(vec![Violation {
            item_index: 0,
            key: "<document>".into(),
            message: "top level must be a JSON array of items".into(),
        }]);
    };
    if array.is_empty() {
        violations.push(Violation {
            item_index: 0,
            key: "<document>".into(),
            message: "annotation must contain at least one item".into(),
        });
    }
    let mut items = Vec::new();
    for (i, entry) in array.iter().enumerate() {
        let Some(obj) = entry.as_object() else {
            violations.push(Violation {
                item_index: i,
                key: "<item>".into(),
                message: "item must be a JSON object".into(),
            });
            continue;
        };
        for key in [KEY_REGION, KEY_ABS_POS, KEY_REL_POS, KEY_ARTIFACTS] {
            if !obj.contains_key(key) {
                violations.push(Violation {
                    item_index: i,
                    key: key.into(),
                    message: "missing required key".into(),
                });
            }
        }
        for key in obj.keys() {
            if ![KEY_REGION, KEY_ABS_POS, KEY_REL_POS, KEY_ARTIFACTS].contains(&key.as_str()) {
                violations.push(Violation {
                    item_index: i,
                    key: key.clone(),
                    message: "unexpected key".into(),
                });
            }
        }
        let region = obj.get(KEY_REGION).and_then(|v| v.as_str());
        if let Some(v) = obj.get(KEY_REGION) {
            if region.is_none() {
                violations.push(Violation {
                    item_index: i,
                    key: KEY_REGION.into(),
                    message: format!("must be a string, got {v}"),
                });
            }
        }
        let abs = obj.get(KEY_ABS_POS).and_then(|v| v.as_str());
        match (obj.get(KEY_ABS_POS), abs) {
            (Some(serde_json::Value::String(s)), _) if !is_valid_position(s) => {
                violations.push(Violation {
                    item_index: i,
                    key: KEY_ABS_POS.into(),
                    message: format!(
                        "'{s}' is not in the 9-cell position vocabulary (e.g. 'Top left')"
                    ),
                });
            }
            (Some(v), None) => violations.push(Violation {
                item_index: i,
                key: KEY_ABS_POS.into(),
                message: format!("must be a string, got {v}"),
            }),
            _ => {}
        }
        let rel = obj.get(KEY_REL_POS).and_then(|v| v.as_str());
        if let Some(v) = obj.get(KEY_REL_POS) {
            if rel.is_none() {
                violations.push(Violation {
                    item_index: i,
                    key: KEY_REL_POS.into(),
                    message: format!("must be a string, got {v}"),
                });
            }
        }
        match obj.get(KEY_ARTIFACTS) {
            Some(serde_json::Value::Object(map)) => {
                if map.is_empty() {
                    violations.push(Violation {
                        item_index: i,
                        key: KEY_ARTIFACTS.into(),
                        message: "artifacts map must be non-empty".into(),
                    });
                }
                for (k, v) in map {
                    if !v.is_string() {
                        violations.push(Violation {
                            item_index: i,
                            key: KEY_ARTIFACTS.into(),
                            message: format!("description under '{k}' must be a string"),
                        });
                    }
                }
            }
            Some(v) => violations.push(Violation {
                item_index: i,
                key: KEY_ARTIFACTS.into(),
                message: format!("must be a map of title -> description, got {v}"),
            }),
            None => {}
        }
        if violations.is_empty() {
            // safe: all four keys present with the right shapes
            items.push(AnnotationItem {
                tampered_region: region.unwrap_or_default().to_string(),
                absolute_position: abs.unwrap_or_default().to_string(),
                relative_position: rel.unwrap_or_default().to_string(),
                artifacts: obj
                    .get(KEY_ARTIFACTS)
                    .and_then(|v| v.as_object())
                    .map(|m| {
                        m.iter()
                            .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
                            .collect()
                    })
                    .unwrap_or_default(),
            });
        }
    }
    if violations.is_empty() {
        Ok(ArtifactAnnotation { items })
    } else {
        Err(violations)
    }
}

/// Extracts the first top-level JSON array from free-form model output and
/// validates it. Models often wrap their JSON in prose.
pub fn parse_model_output(raw: &str) -> std::result::Result<ArtifactAnnotation, Vec<Violation>> {
    let Some(snippet) = extract_json_array(raw) else {
        return Err(vec![Violation {
            item_index: 0,
            key: "<document>".into(),
            message: "no top-level JSON array found in output".into(),
        }]);
    };
    validate_annotation(snippet)
}

/// Finds the first balanced top-level `[...]` segment, respecting strings.
pub fn extract_json_array(raw: &str) -> Option<&str> {
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
            b'[' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b']' => {
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

/// Serializes an annotation as pretty JSON (the on-disk format).
pub fn annotation_to_json(ann: &ArtifactAnnotation) -> String {
    serde_json::to_string_pretty(ann).expect("annotation serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::connected_components;

    fn image_with_value(h: usize, w: usize, v: u8) -> Image {
        Image::filled(h, w, [v, v, v]).unwrap()
    }

    #[test]
    fn reference_formula_worked_examples() {
        let img = image_with_value(16, 16, 100);
        let mut mask = BinaryMask::zeros(16, 16);
        mask.set(3, 3, 1);
        let prompt = build_reference_prompt(&img, &mask).unwrap();
        // input 100, mask 255 -> floor(355/2) = 177
        assert_eq!(prompt.reference.get(3, 3), [177, 177, 177]);
        // mask 0 -> floor(100/2) = 50
        assert_eq!(prompt.reference.get(0, 0), [50, 50, 50]);
    }

    #[test]
    fn layout_follows_longest_side() {
        // H > W: concatenation runs along the height edge -> width doubles
        let tall = image_with_value(512, 256, 10);
        let p = build_reference_prompt(&tall, &BinaryMask::zeros(512, 256)).unwrap();
        assert_eq!(p.layout, PromptLayout::Horizontal);
        assert_eq!((p.composite.height(), p.composite.width()), (512, 512));
        // W > H: height doubles
        let wide = image_with_value(64, 128, 10);
        let p = build_reference_prompt(&wide, &BinaryMask::zeros(64, 128)).unwrap();
        assert_eq!(p.layout, PromptLayout::Vertical);
        assert_eq!((p.composite.height(), p.composite.width()), (128, 128));
        // composite halves: left/top tile is the raw input
        assert_eq!(p.composite.get(0, 0), wide.get(0, 0));
        // dim mismatch errors
        assert!(build_reference_prompt(&wide, &BinaryMask::zeros(10, 10)).is_err());
    }

    #[test]
    fn highlight_selects_single_instance() {
        let img = image_with_value(16, 16, 80);
        let mut mask = BinaryMask::zeros(16, 16);
        mask.set(2, 2, 1);
        mask.set(10, 10, 1);
        let instances = connected_components(&mask);
        assert_eq!(instances.count(), 2);
        let h1 = build_highlight(&img, &instances, 1).unwrap();
        let h2 = build_highlight(&img, &instances, 2).unwrap();
        // single-instance highlight: pixel of instance 1 bright in h1 only
        assert_eq!(h1.image.get(2, 2), [167, 167, 167]); // floor((80+255)/2)
        assert_eq!(h1.image.get(10, 10), [40, 40, 40]); // floor(80/2)
        assert_eq!(h2.image.get(10, 10), [167, 167, 167]);
        // the two highlights differ exactly on the union of instance pixels
        let mut diff = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                if h1.image.get(y, x) != h2.image.get(y, x) {
                    diff.push((y, x));
                }
            }
        }
        assert_eq!(diff, vec![(2, 2), (10, 10)]);
        assert!(build_highlight(&img, &instances, 3).is_err());
        assert!(build_highlight(&img, &instances, 0).is_err());
    }

    #[test]
    fn single_instance_highlight_equals_reference() {
        let img = image_with_value(16, 16, 33);
        let mut mask = BinaryMask::zeros(16, 16);
        for y in 4..8 {
            for x in 4..8 {
                mask.set(y, x, 1);
            }
        }
        let instances = connected_components(&mask);
        let h = build_highlight(&img, &instances, 1).unwrap();
        let p = build_reference_prompt(&img, &mask).unwrap();
        assert_eq!(h.image, p.reference);
    }

    fn good_doc() -> String {
        serde_json::json!([{
            "Tampered Region": "A pasted blue car",
            "Absolute Position": "Top left of the image",
            "Relative Position": "Left of the red truck",
            "Artifacts": {"Edge Artifacts": "Hard boundary with no transition."}
        }])
        .to_string()
    }

    #[test]
    fn validation_accepts_well_formed() {
        let ann = validate_annotation(&good_doc()).unwrap();
        assert_eq!(ann.items.len(), 1);
        assert_eq!(ann.items[0].tampered_region, "A pasted blue car");
        // round-trip: serialize -> validate -> identical
        let json = annotation_to_json(&ann);
        let again = validate_annotation(&json).unwrap();
        assert_eq!(again, ann);
    }

    #[test]
    fn validation_reports_every_violation() {
        let doc = serde_json::json!([
            {
                "Tampered Region": "x",
                "Absolute Position": "somewhere odd",
                "Artifacts": "not a map"
            },
            {
                "Tampered Region": "y",
                "Absolute Position": "Bottom right",
                "Relative Position": "next to z",
                "Artifacts": {}
            }
        ])
        .to_string();
        let errs = validate_annotation(&doc).unwrap_err();
        // item 0: missing Relative Position, bad position vocab, artifacts not a map
        assert!(errs.iter().any(|v| v.item_index == 0 && v.key == KEY_REL_POS));
        assert!(errs.iter().any(|v| v.item_index == 0 && v.key == KEY_ABS_POS));
        assert!(errs
            .iter()
            .any(|v| v.item_index == 0 && v.key == KEY_ARTIFACTS && v.message.contains("map")));
        // item 1: empty artifacts map
        assert!(errs
            .iter()
            .any(|v| v.item_index == 1 && v.key == KEY_ARTIFACTS && v.message.contains("non-empty")));
    }

    #[test]
    fn position_vocab_is_case_insensitive() {
        assert!(is_valid_position("Top left"));
        assert!(is_valid_position("BOTTOM RIGHT of the image"));
        assert!(is_valid_position("middle  center"));
        assert!(is_valid_position("center"));
        assert!(!is_valid_position("upper left"));
        assert!(!is_valid_position(""));
    }

    #[test]
    fn model_output_extraction() {
        let raw = format!("Here is my analysis: {} Thanks for asking!", good_doc());
        let ann = parse_model_output(&raw).unwrap();
        assert_eq!(ann.items.len(), 1);
        // bare valid array parses directly
        assert!(parse_model_output(&good_doc()).is_ok());
        // no brackets -> unparseable
        let err = parse_model_output("no json here").unwrap_err();
        assert!(err[0].message.contains("no top-level JSON array"));
        // brackets inside strings do not confuse the scanner
        let tricky = r#"prefix ["not an item"] suffix"#;
        assert!(parse_model_output(tricky).is_err()); // parses but fails schema
        assert_eq!(extract_json_array(tricky), Some(r#"["not an item"]"#));
    }
}
