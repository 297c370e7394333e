//! JSON payloads of the model-server protocol.
//!
//! ```text
//! POST /score    {"image": b64png, "text": s}           -> {"score": f}
//! POST /detect   {"image": b64png, "conf": f}           -> {"detections": [{"box":[x0,y0,x1,y1],"conf":f,"label":s}]}
//! POST /segment  {"image": b64png}                      -> {"boxes": [[x0,y0,x1,y1], ...]}
//! POST /vqa      {"images": [b64png, ...], "question": s} -> {"answer": s, "answer_score": f|null}
//! POST /saliency {"image": b64png, "question": s}       -> {"rows": r, "cols": c, "values": [f, ...]}
//! GET  /identity                                        -> {"name": s, "version": s}
//! ```
//!
//! Boxes are half-open pixel rectangles. Responses are parsed leniently
//! into `serde_json::Value` first so that violations surface as
//! [`BackendError::Protocol`] with a useful message.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, BackendIdentity, Detection, VqaAnswer};
use crate::geometry::{Image, PatchMap, Rect};

pub const ROUTE_SCORE: &str = "/score";
pub const ROUTE_DETECT: &str = "/detect";
pub const ROUTE_SEGMENT: &str = "/segment";
pub const ROUTE_VQA: &str = "/vqa";
pub const ROUTE_SALIENCY: &str = "/saliency";
pub const ROUTE_IDENTITY: &str = "/identity";

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image: String,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: String,
    pub conf: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VqaRequest {
    pub images: Vec<String>,
    pub question: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SaliencyRequest {
    pub image: String,
    pub question: String,
}

pub fn encode_image(img: &Image) -> Result<String, BackendError> {
    Ok(STANDARD.encode(img.to_png()?))
}

pub fn decode_image(b64: &str) -> Result<Image, BackendError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| BackendError::Protocol(format!("bad base64 image: {e}")))?;
    Ok(Image::from_encoded(&bytes)?)
}

fn protocol(msg: impl Into<String>) -> BackendError {
    BackendError::Protocol(msg.into())
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value, BackendError> {
    v.get(name)
        .ok_or_else(|| protocol(format!("missing field `{name}` in {v}")))
}

fn finite(v: &Value, what: &str) -> Result<f64, BackendError> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(protocol(format!("{what} is not a finite number: {v}"))),
    }
}

fn parse_rect(v: &Value) -> Result<Rect, BackendError> {
    let coords: [u32; 4] = serde_json::from_value(v.clone())
        .map_err(|e| protocol(format!("bad box {v}: {e}")))?;
    Rect::try_from(coords).map_err(|e| protocol(format!("bad box {v}: {e}")))
}

fn parse_str(v: &Value, what: &str) -> Result<String, BackendError> {
    v.as_str()
        .map(str::to_owned)
        .ok_or_else(|| protocol(format!("{what} is not a string: {v}")))
}

pub fn parse_score(v: &Value) -> Result<f64, BackendError> {
    finite(field(v, "score")?, "score")
}

pub fn parse_detections(v: &Value) -> Result<Vec<Detection>, BackendError> {
    let arr = field(v, "detections")?
        .as_array()
        .ok_or_else(|| protocol("`detections` is not an array"))?;
    arr.iter()
        .map(|d| {
            Ok(Detection {
                rect: parse_rect(field(d, "box")?)?,
                confidence: finite(field(d, "conf")?, "conf")?,
                class_label: parse_str(field(d, "label")?, "label")?,
            })
        })
        .collect()
}

pub fn parse_boxes(v: &Value) -> Result<Vec<Rect>, BackendError> {
    field(v, "boxes")?
        .as_array()
        .ok_or_else(|| protocol("`boxes` is not an array"))?
        .iter()
        .map(parse_rect)
        .collect()
}

pub fn parse_answer(v: &Value) -> Result<VqaAnswer, BackendError> {
    let answer = parse_str(field(v, "answer")?, "answer")?;
    let answer_score = match v.get("answer_score") {
        None | Some(Value::Null) => None,
        Some(s) => Some(finite(s, "answer_score")?),
    };
    Ok(VqaAnswer {
        answer,
        answer_score,
    })
}

pub fn parse_patch_map(v: &Value) -> Result<PatchMap, BackendError> {
    let dim = |name: &str| -> Result<u32, BackendError> {
        field(v, name)?
            .as_u64()
            .and_then(|x| u32::try_from(x).ok())
            .ok_or_else(|| protocol(format!("`{name}` is not a grid dimension")))
    };
    let values = field(v, "values")?
        .as_array()
        .ok_or_else(|| protocol("`values` is not an array"))?
        .iter()
        .map(|x| finite(x, "saliency value"))
        .collect::<Result<Vec<_>, _>>()?;
    PatchMap::new(dim("rows")?, dim("cols")?, values).map_err(|e| protocol(e.to_string()))
}

pub fn parse_identity(v: &Value) -> Result<BackendIdentity, BackendError> {
    Ok(BackendIdentity {
        name: parse_str(field(v, "name")?, "name")?,
        version: parse_str(field(v, "version")?, "version")?,
    })
}
