//! Protocol conformance suite for oracle servers.
//!
//! Exercises all six endpoints with a probe image and text, validates every
//! response against the wire schema, and repeats each call to check that the
//! server is deterministic.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::RgbImage;
use serde::Serialize;
use serde_json::{json, Value};

use super::http::{Health, HttpOracle};
use crate::patch::encode_png;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, result: Result<String, String>) {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

pub struct Probe {
    pub image: RgbImage,
    pub query: String,
    pub text: String,
    pub box_threshold: f64,
    pub text_threshold: Option<f64>,
}

impl Default for Probe {
    /// A 64x64 colour gradient, queried for "person".
    fn default() -> Self {
        let image = RgbImage::from_fn(64, 64, |x, y| {
            image::Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8])
        });
        Probe {
            image,
            query: "person".into(),
            text: "a photo of a person crossing the street".into(),
            box_threshold: 0.35,
            text_threshold: Some(0.25),
        }
    }
}

fn model_id(v: &Value) -> Result<&str, String> {
    v.get("model_id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| "missing or empty model_id".to_string())
}

fn check_vector(v: &Value, dim: usize) -> Result<String, String> {
    let id = model_id(v)?;
    let arr = v
        .get("vector")
        .and_then(Value::as_array)
        .ok_or("missing vector array")?;
    let vals: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().ok_or("vector entry is not a number"))
        .collect::<Result<_, _>>()?;
    if vals.len() != dim {
        return Err(format!("vector has {} entries, health reports {dim}", vals.len()));
    }
    if vals.iter().any(|x| !x.is_finite()) {
        return Err("vector has non-finite entries".into());
    }
    if vals.iter().all(|&x| x == 0.0) {
        return Err("vector is all zeros".into());
    }
    Ok(format!("dim {dim}, model {id}"))
}

fn check_boxes(v: &Value, width: u32, height: u32) -> Result<String, String> {
    let id = model_id(v)?;
    let boxes = v
        .get("boxes")
        .and_then(Value::as_array)
        .ok_or("missing boxes array")?;
    for (i, b) in boxes.iter().enumerate() {
        let num = |k: &str| {
            b.get(k)
                .and_then(Value::as_f64)
                .ok_or(format!("box {i} lacks numeric {k}"))
        };
        let (x0, y0, x1, y1, score) = (num("x0")?, num("y0")?, num("x1")?, num("y1")?, num("score")?);
        if b.get("label").and_then(Value::as_str).is_none() {
            return Err(format!("box {i} lacks string label"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("box {i} score {score} outside [0,1]"));
        }
        if !(0.0 <= x0 && x0 <= x1 && x1 <= f64::from(width) && 0.0 <= y0 && y0 <= y1 && y1 <= f64::from(height)) {
            return Err(format!("box {i} outside the {width}x{height} probe"));
        }
    }
    Ok(format!("{} boxes, model {id}", boxes.len()))
}

fn check_caption(v: &Value) -> Result<String, String> {
    let id = model_id(v)?;
    let c = v
        .get("caption")
        .and_then(Value::as_str)
        .ok_or("missing caption string")?;
    if c.trim().is_empty() {
        return Err("caption is empty".into());
    }
    Ok(format!("{c:?}, model {id}"))
}

/// Runs the suite against `endpoint`.
pub fn check(endpoint: &str, probe: &Probe, timeout_secs: u64) -> ConformanceReport {
    let client = HttpOracle::new(endpoint, timeout_secs, 0);
    let mut report = ConformanceReport {
        endpoint: endpoint.to_string(),
        checks: Vec::new(),
    };

    let health: Option<Health> = match client.health() {
        Ok(h) if h.status == "ok" && h.spaces.joint_dim > 0 && h.spaces.sentence_dim > 0 => {
            report.record(
                "health",
                Ok(format!(
                    "joint_dim {}, sentence_dim {}",
                    h.spaces.joint_dim, h.spaces.sentence_dim
                )),
            );
            Some(h)
        }
        Ok(h) => {
            report.record("health", Err(format!("unexpected health payload {h:?}")));
            None
        }
        Err(e) => {
            report.record("health", Err(e.to_string()));
            None
        }
    };
    let (joint_dim, sentence_dim) = health
        .map(|h| (h.spaces.joint_dim, h.spaces.sentence_dim))
        .unwrap_or((0, 0));

    let image = BASE64.encode(encode_png(&probe.image));
    let (w, h) = probe.image.dimensions();
    type Validator<'a> = Box<dyn Fn(&Value) -> Result<String, String> + 'a>;
    let calls: Vec<(&str, &str, Value, Validator)> = vec![
        (
            "detect",
            "/v1/detect",
            json!({
                "image": image,
                "query": probe.query,
                "box_threshold": probe.box_threshold,
                "text_threshold": probe.text_threshold,
            }),
            Box::new(move |v| check_boxes(v, w, h)),
        ),
        (
            "embed_image",
            "/v1/embed_image",
            json!({ "image": image }),
            Box::new(move |v| check_vector(v, joint_dim)),
        ),
        (
            "embed_text",
            "/v1/embed_text",
            json!({ "text": probe.text }),
            Box::new(move |v| check_vector(v, joint_dim)),
        ),
        (
            "caption",
            "/v1/caption",
            json!({ "image": image }),
            Box::new(check_caption),
        ),
        (
            "encode_sentence",
            "/v1/encode_sentence",
            json!({ "text": probe.text }),
            Box::new(move |v| check_vector(v, sentence_dim)),
        ),
    ];

    for (name, path, body, validate) in calls {
        let first = client.post(path, &body);
        let schema = match &first {
            Ok(v) => validate(v),
            Err(e) => Err(e.to_string()),
        };
        let schema_ok = schema.is_ok();
        report.record(&format!("{name}.schema"), schema);
        if !schema_ok {
            continue;
        }
        let determinism = match (first, client.post(path, &body)) {
            (Ok(a), Ok(b)) if a == b => Ok("repeat call identical".to_string()),
            (Ok(_), Ok(_)) => Err("repeat call returned a different response".to_string()),
            (_, Err(e)) => Err(format!("repeat call failed: {e}")),
            (Err(e), _) => Err(e.to_string()),
        };
        report.record(&format!("{name}.determinism"), determinism);
    }
    report
}
