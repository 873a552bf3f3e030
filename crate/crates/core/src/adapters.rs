//! Interface adaptation: render benchmark queries in a model's native prompt
//! syntax and coordinate convention, and parse stored raw outputs back into
//! canonical predictions.
//!
//! Parsing never fails. Anything unparsable becomes an empty prediction with
//! `parse_ok = false` and a categorized reason.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{format_coord, r2t_prompt, t2r_prompt, BenchQuery, Direction};
use crate::geometry::{from_canonical, to_canonical, Box, CoordConvention, GeometryError, ImageSize};
use crate::textnorm::normalize_r2t;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("profile `{0}`: grounding-tag prompts require the grounding-tag grammar")]
    Inconsistent(String),
    #[error("unknown profile `{0}`")]
    Unknown(String),
    #[error("profile config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStyle {
    NaturalLanguage,
    GroundingTags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseGrammar {
    JsonBoxes,
    GroundingTags,
    RawText,
}

/// Delimiters of the grounding-tag family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagGrammar {
    pub box_open: String,
    pub box_close: String,
    pub ref_open: String,
    pub ref_close: String,
}

impl Default for TagGrammar {
    fn default() -> Self {
        TagGrammar {
            box_open: "<|det|>".into(),
            box_close: "<|/det|>".into(),
            ref_open: "<|ref|>".into(),
            ref_close: "<|/ref|>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceProfile {
    pub name: String,
    pub coord: CoordConvention,
    pub t2r_prompt_style: PromptStyle,
    pub parse_grammar: ParseGrammar,
    #[serde(default)]
    pub tags: TagGrammar,
}

impl InterfaceProfile {
    pub fn new(
        name: &str,
        coord: CoordConvention,
        style: PromptStyle,
        grammar: ParseGrammar,
    ) -> Result<Self, ProfileError> {
        let p = InterfaceProfile {
            name: name.into(),
            coord,
            t2r_prompt_style: style,
            parse_grammar: grammar,
            tags: TagGrammar::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.t2r_prompt_style == PromptStyle::GroundingTags && self.parse_grammar != ParseGrammar::GroundingTags {
            return Err(ProfileError::Inconsistent(self.name.clone()));
        }
        Ok(())
    }
}

/// The five interface families evaluated on the benchmark.
pub fn builtin_profiles() -> Vec<InterfaceProfile> {
    use CoordConvention::*;
    let mk = |name, coord, style, grammar| {
        InterfaceProfile::new(name, coord, style, grammar).expect("builtin profiles are consistent")
    };
    vec![
        mk(
            "standard_xyxy_abs",
            XyxyAbs,
            PromptStyle::NaturalLanguage,
            ParseGrammar::JsonBoxes,
        ),
        mk(
            "standard_xyxy_rel1000",
            XyxyRel1000,
            PromptStyle::NaturalLanguage,
            ParseGrammar::JsonBoxes,
        ),
        mk(
            "yxyx_abs",
            YxyxAbs,
            PromptStyle::NaturalLanguage,
            ParseGrammar::JsonBoxes,
        ),
        mk(
            "norm01",
            XyxyNorm01,
            PromptStyle::NaturalLanguage,
            ParseGrammar::JsonBoxes,
        ),
        mk(
            "grounding_tags",
            XyxyRel1000,
            PromptStyle::GroundingTags,
            ParseGrammar::GroundingTags,
        ),
    ]
}

/// Loads profiles from a JSON array of profile objects.
pub fn load_profiles(json: &str) -> Result<Vec<InterfaceProfile>, ProfileError> {
    let profiles: Vec<InterfaceProfile> =
        serde_json::from_str(json).map_err(|e| ProfileError::Config(e.to_string()))?;
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

pub fn find_profile<'a>(profiles: &'a [InterfaceProfile], name: &str) -> Result<&'a InterfaceProfile, ProfileError> {
    profiles
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ProfileError::Unknown(name.into()))
}

fn format_native(v: f64, conv: CoordConvention) -> String {
    match conv {
        CoordConvention::XyxyNorm01 => format!("{v:.4}"),
        _ => format_coord(v),
    }
}

/// Extracts the queried text of a text-to-region query from its prompt.
fn t2r_text(q: &BenchQuery) -> &str {
    q.prompt
        .strip_prefix("Where is \"")
        .and_then(|s| s.strip_suffix("\" located in the image?"))
        .unwrap_or(&q.prompt)
}

/// Renders `q` for profile `p`.
pub fn render_prompt(q: &BenchQuery, p: &InterfaceProfile) -> String {
    match q.direction {
        Direction::R2T => match (q.region, q.image_size()) {
            (Some(region), Ok(image)) => {
                let c = from_canonical(&region, p.coord, image);
                r2t_prompt(c.map(|v| format_native(v, p.coord)))
            }
            _ => q.prompt.clone(),
        },
        Direction::T2R => match p.t2r_prompt_style {
            PromptStyle::NaturalLanguage => t2r_prompt(t2r_text(q)),
            PromptStyle::GroundingTags => format!(
                "Locate {}{}{} in the image.",
                p.tags.ref_open,
                t2r_text(q),
                p.tags.ref_close
            ),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseFailure {
    InvalidJson,
    MissingBoxes,
    MalformedNumeric,
    DegenerateBox,
    /// No stored output for the query.
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub query_id: String,
    pub boxes: Vec<Box>,
    pub text: Option<String>,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ParseFailure>,
}

impl ParsedPrediction {
    pub fn failed(query_id: &str, reason: ParseFailure) -> Self {
        ParsedPrediction {
            query_id: query_id.into(),
            boxes: Vec::new(),
            text: None,
            parse_ok: false,
            failure: Some(reason),
        }
    }

    fn with_boxes(query_id: &str, boxes: Vec<Box>) -> Self {
        ParsedPrediction {
            query_id: query_id.into(),
            boxes,
            text: None,
            parse_ok: true,
            failure: None,
        }
    }

    fn with_text(query_id: &str, text: String) -> Self {
        ParsedPrediction {
            query_id: query_id.into(),
            boxes: Vec::new(),
            text: Some(text),
            parse_ok: true,
            failure: None,
        }
    }
}

/// First syntactically complete JSON array or object embedded in `raw`.
pub fn first_json_value(raw: &str) -> Option<Value> {
    raw.char_indices()
        .filter(|&(_, c)| c == '[' || c == '{')
        .find_map(|(i, _)| {
            serde_json::Deserializer::from_str(&raw[i..])
                .into_iter::<Value>()
                .next()
                .and_then(Result::ok)
        })
}

fn read_quad(v: &Value) -> Result<[f64; 4], ParseFailure> {
    let arr = v.as_array().ok_or(ParseFailure::MalformedNumeric)?;
    if arr.len() != 4 {
        return Err(ParseFailure::MalformedNumeric);
    }
    let mut out = [0.0; 4];
    for (slot, x) in out.iter_mut().zip(arr) {
        *slot = x.as_f64().ok_or(ParseFailure::MalformedNumeric)?;
    }
    Ok(out)
}

fn convert(quad: [f64; 4], conv: CoordConvention, image: ImageSize) -> Result<Box, ParseFailure> {
    to_canonical(quad, conv, image).map_err(|e| match e {
        GeometryError::DegenerateBox(..) => ParseFailure::DegenerateBox,
        _ => ParseFailure::MalformedNumeric,
    })
}

fn json_boxes(raw: &str, conv: CoordConvention, image: ImageSize) -> Result<Vec<Box>, ParseFailure> {
    let value = first_json_value(raw).ok_or(ParseFailure::InvalidJson)?;
    let elements: Vec<&Value> = match &value {
        Value::Array(items) => items.iter().collect(),
        obj @ Value::Object(_) => vec![obj],
        _ => return Err(ParseFailure::InvalidJson),
    };
    elements
        .into_iter()
        .map(|el| {
            let bbox = el.get("bbox_2d").ok_or(ParseFailure::MissingBoxes)?;
            convert(read_quad(bbox)?, conv, image)
        })
        .collect()
}

/// Content between each `open` .. `close` pair.
fn tagged_spans<'a>(raw: &'a str, open: &str, close: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find(open) {
        let after = &rest[start + open.len()..];
        let Some(end) = after.find(close) else { break };
        out.push(&after[..end]);
        rest = &after[end + close.len()..];
    }
    out
}

fn tag_boxes(raw: &str, tags: &TagGrammar, conv: CoordConvention, image: ImageSize) -> Result<Vec<Box>, ParseFailure> {
    let spans = tagged_spans(raw, &tags.box_open, &tags.box_close);
    if spans.is_empty() {
        return Err(ParseFailure::MissingBoxes);
    }
    let mut boxes = Vec::new();
    for span in spans {
        let v: Value = serde_json::from_str(span.trim()).map_err(|_| ParseFailure::MalformedNumeric)?;
        let quads = match v.as_array() {
            Some(a) if a.first().is_some_and(Value::is_array) => a.iter().collect::<Vec<_>>(),
            Some(_) => vec![&v],
            None => return Err(ParseFailure::MalformedNumeric),
        };
        for q in quads {
            boxes.push(convert(read_quad(q)?, conv, image)?);
        }
    }
    Ok(boxes)
}

fn json_text(raw: &str) -> Option<String> {
    let v = first_json_value(raw)?;
    let obj = match &v {
        Value::Array(a) => a.first()?,
        o => o,
    };
    ["text", "label", "content"]
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))
        .map(str::to_string)
}

/// Parses a stored raw output for one query.
pub fn parse_prediction(
    query_id: &str,
    raw: &str,
    p: &InterfaceProfile,
    direction: Direction,
    image: ImageSize,
) -> ParsedPrediction {
    match direction {
        Direction::R2T => {
            let text = match p.parse_grammar {
                ParseGrammar::JsonBoxes => json_text(raw).unwrap_or_else(|| raw.to_string()),
                ParseGrammar::GroundingTags => tagged_spans(raw, &p.tags.ref_open, &p.tags.ref_close)
                    .first()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| raw.to_string()),
                ParseGrammar::RawText => normalize_r2t(raw),
            };
            ParsedPrediction::with_text(query_id, text)
        }
        Direction::T2R => {
            let boxes = match p.parse_grammar {
                ParseGrammar::JsonBoxes => json_boxes(raw, p.coord, image),
                ParseGrammar::GroundingTags => tag_boxes(raw, &p.tags, p.coord, image),
                ParseGrammar::RawText => Err(ParseFailure::MissingBoxes),
            };
            match boxes {
                Ok(b) => ParsedPrediction::with_boxes(query_id, b),
                Err(reason) => ParsedPrediction::failed(query_id, reason),
            }
        }
    }
}

/// Output an ideal model would emit for `q` under profile `p`: the ground
/// truth in the profile's native convention and grammar.
pub fn ideal_response(q: &BenchQuery, p: &InterfaceProfile) -> String {
    match q.direction {
        Direction::R2T => {
            let t = q.r2t_target.clone().unwrap_or_default();
            match p.parse_grammar {
                ParseGrammar::GroundingTags => format!("{}{}{}", p.tags.ref_open, t, p.tags.ref_close),
                _ => t,
            }
        }
        Direction::T2R => {
            let image = q.image_size().expect("valid query");
            let boxes = q.t2r_targets.as_deref().unwrap_or(&[]);
            let quads: Vec<[f64; 4]> = boxes.iter().map(|b| from_canonical(b, p.coord, image)).collect();
            match p.parse_grammar {
                ParseGrammar::GroundingTags => format!(
                    "{}{}{}{}{}{}",
                    p.tags.ref_open,
                    t2r_text(q),
                    p.tags.ref_close,
                    p.tags.box_open,
                    serde_json::to_string(&quads).expect("finite"),
                    p.tags.box_close
                ),
                _ => {
                    let items: Vec<Value> = quads
                        .iter()
                        .map(|c| serde_json::json!({"bbox_2d": c, "label": t2r_text(q)}))
                        .collect();
                    serde_json::to_string(&items).expect("finite")
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_r2t_query, make_t2r_queries, Annotation, Category};

    fn img() -> ImageSize {
        ImageSize::new(200, 100).unwrap()
    }

    fn profile(name: &str) -> InterfaceProfile {
        find_profile(&builtin_profiles(), name).unwrap().clone()
    }

    fn ann(b: [f64; 4], text: &str) -> Annotation {
        Annotation {
            image_id: "i".into(),
            image: img(),
            bbox: Box::from_array(b).unwrap(),
            transcript: text.into(),
            category: Category::SceneText,
            source: "s".into(),
        }
    }

    #[test]
    fn grounding_tag_rewrite() {
        let q = &make_t2r_queries(&[ann([0., 0., 10., 10.], "WWW.NATIONALENQUIRER.COM")]).unwrap()[0];
        assert_eq!(
            render_prompt(q, &profile("grounding_tags")),
            "Locate <|ref|>WWW.NATIONALENQUIRER.COM<|/ref|> in the image."
        );
        assert_eq!(render_prompt(q, &profile("standard_xyxy_abs")), q.prompt);
    }

    #[test]
    fn r2t_prompt_conversion() {
        let q = make_r2t_query(&ann([20., 10., 40., 30.], "x"));
        assert_eq!(
            render_prompt(&q, &profile("yxyx_abs")),
            "What is the text at location [10.0, 20.0, 30.0, 40.0]?"
        );
        assert_eq!(render_prompt(&q, &profile("standard_xyxy_abs")), q.prompt);
        assert_eq!(
            render_prompt(&q, &profile("norm01")),
            "What is the text at location [0.1000, 0.1000, 0.2000, 0.3000]?"
        );
        assert_eq!(
            render_prompt(&q, &profile("standard_xyxy_rel1000")),
            "What is the text at location [100.0, 100.0, 200.0, 300.0]?"
        );
    }

    #[test]
    fn json_boxes_examples() {
        let p = parse_prediction(
            "q",
            r#"[{"bbox_2d":[10,20,110,60],"label":"EXIT"}]"#,
            &profile("standard_xyxy_abs"),
            Direction::T2R,
            img(),
        );
        assert!(p.parse_ok);
        assert_eq!(p.boxes, vec![Box::new(10., 20., 110., 60.).unwrap()]);

        let p = parse_prediction("q", "garbage {{{", &profile("standard_xyxy_abs"), Direction::T2R, img());
        assert!(!p.parse_ok && p.boxes.is_empty() && p.text.is_none());
        assert_eq!(p.failure, Some(ParseFailure::InvalidJson));

        let p = parse_prediction(
            "q",
            r#"[{"bbox_2d":[0.5,0.5,1.0,1.0]}]"#,
            &profile("norm01"),
            Direction::T2R,
            img(),
        );
        assert_eq!(p.boxes, vec![Box::new(100., 50., 200., 100.).unwrap()]);
    }

    #[test]
    fn json_embedded_in_prose_and_fences() {
        let raw = "Sure! Here you go:\n```json\n[{\"bbox_2d\": [1, 2, 3, 4], \"label\": \"a\"}]\n```";
        let p = parse_prediction("q", raw, &profile("standard_xyxy_abs"), Direction::T2R, img());
        assert_eq!(p.boxes.len(), 1);
        let single = parse_prediction(
            "q",
            r#"{"bbox_2d":[1,2,3,4]}"#,
            &profile("standard_xyxy_abs"),
            Direction::T2R,
            img(),
        );
        assert_eq!(single.boxes.len(), 1);
        let empty = parse_prediction("q", "[]", &profile("standard_xyxy_abs"), Direction::T2R, img());
        assert!(empty.parse_ok && empty.boxes.is_empty());
    }

    #[test]
    fn failure_categories() {
        let sp = profile("standard_xyxy_abs");
        let f = |raw: &str| parse_prediction("q", raw, &sp, Direction::T2R, img()).failure;
        assert_eq!(f(r#"[{"label":"x"}]"#), Some(ParseFailure::MissingBoxes));
        assert_eq!(f(r#"[{"bbox_2d":[1,2,3]}]"#), Some(ParseFailure::MalformedNumeric));
        assert_eq!(f(r#"[{"bbox_2d":["1",2,3,4]}]"#), Some(ParseFailure::MalformedNumeric));
        // comma decimals split into too many numbers
        assert_eq!(
            f(r#"[{"bbox_2d":[0,5,0,5,1,0,1,0]}]"#),
            Some(ParseFailure::MalformedNumeric)
        );
        assert_eq!(f(r#"[{"bbox_2d":[5,5,5,9]}]"#), Some(ParseFailure::DegenerateBox));
        assert_eq!(f("no json here"), Some(ParseFailure::InvalidJson));
        let n = profile("norm01");
        let p = parse_prediction("q", r#"[{"bbox_2d":[0,0,1.5,1]}]"#, &n, Direction::T2R, img());
        assert_eq!(p.failure, Some(ParseFailure::MalformedNumeric));
    }

    #[test]
    fn grounding_tag_output() {
        let g = profile("grounding_tags");
        let raw = "<|ref|>EXIT<|/ref|><|det|>[[500, 500, 1000, 1000]]<|/det|>";
        let p = parse_prediction("q", raw, &g, Direction::T2R, img());
        assert_eq!(p.boxes, vec![Box::new(100., 50., 200., 100.).unwrap()]);
        let two = "<|det|>[[0,0,500,500],[500,500,1000,1000]]<|/det|>";
        assert_eq!(parse_prediction("q", two, &g, Direction::T2R, img()).boxes.len(), 2);
        let flat = "<|det|>[0,0,500,500]<|/det|>";
        assert_eq!(parse_prediction("q", flat, &g, Direction::T2R, img()).boxes.len(), 1);
        let none = parse_prediction("q", "EXIT", &g, Direction::T2R, img());
        assert_eq!(none.failure, Some(ParseFailure::MissingBoxes));
        let bad = parse_prediction("q", "<|det|>[[0,0,5oo,5]]<|/det|>", &g, Direction::T2R, img());
        assert_eq!(bad.failure, Some(ParseFailure::MalformedNumeric));
    }

    #[test]
    fn custom_delimiters() {
        let mut g = profile("grounding_tags");
        g.tags = TagGrammar {
            box_open: "<box>".into(),
            box_close: "</box>".into(),
            ref_open: "<ref>".into(),
            ref_close: "</ref>".into(),
        };
        let p = parse_prediction("q", "<ref>x</ref><box>[0,0,100,100]</box>", &g, Direction::T2R, img());
        assert_eq!(p.boxes.len(), 1);
    }

    #[test]
    fn r2t_text_extraction() {
        let sp = profile("standard_xyxy_abs");
        let p = parse_prediction("q", "KS-SYSTEM", &sp, Direction::R2T, img());
        assert_eq!(p.text.as_deref(), Some("KS-SYSTEM"));
        let p = parse_prediction("q", r#"{"text": "Hi"}"#, &sp, Direction::R2T, img());
        assert_eq!(p.text.as_deref(), Some("Hi"));
        let p = parse_prediction("q", "Price [5]", &sp, Direction::R2T, img());
        assert_eq!(p.text.as_deref(), Some("Price [5]"));
        let g = profile("grounding_tags");
        let p = parse_prediction("q", "<|ref|>Hi<|/ref|>", &g, Direction::R2T, img());
        assert_eq!(p.text.as_deref(), Some("Hi"));
        let raw = InterfaceProfile::new(
            "raw",
            CoordConvention::XyxyAbs,
            PromptStyle::NaturalLanguage,
            ParseGrammar::RawText,
        )
        .unwrap();
        let p = parse_prediction("q", "  a   b ", &raw, Direction::R2T, img());
        assert_eq!(p.text.as_deref(), Some("a b"));
        assert_eq!(
            parse_prediction("q", "[]", &raw, Direction::T2R, img()).failure,
            Some(ParseFailure::MissingBoxes)
        );
    }

    #[test]
    fn inconsistent_profile_rejected() {
        let e = InterfaceProfile::new(
            "x",
            CoordConvention::XyxyAbs,
            PromptStyle::GroundingTags,
            ParseGrammar::JsonBoxes,
        );
        assert!(matches!(e, Err(ProfileError::Inconsistent(_))));
        let cfg = serde_json::to_string(&builtin_profiles()).unwrap();
        assert_eq!(load_profiles(&cfg).unwrap(), builtin_profiles());
        let bad = r#"[{"name":"x","coord":"XyxyAbs","t2r_prompt_style":"GroundingTags","parse_grammar":"RawText"}]"#;
        assert!(load_profiles(bad).is_err());
    }

    #[test]
    fn parse_is_total_on_arbitrary_input() {
        use proptest::prelude::*;
        let profiles = builtin_profiles();
        proptest!(|(raw in ".{0,64}", braces in "[\\[\\]{}0-9,.\"a-z:_ -]{0,48}")| {
            for p in &profiles {
                for d in [Direction::R2T, Direction::T2R] {
                    for s in [&raw, &braces] {
                        let out = parse_prediction("q", s, p, d, img());
                        if !out.parse_ok {
                            prop_assert!(out.boxes.is_empty() && out.text.is_none());
                        }
                    }
                }
            }
        });
    }
}
