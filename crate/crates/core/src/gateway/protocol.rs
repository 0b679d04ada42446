//! Critic wire protocol.
//!
//! ```text
//! POST /v1/classify  {"image":"<base64>","feature":"<string>"}
//!                 -> {"label":"salient"|"non-salient"|"hallucinated","rationale":"<string>"}
//! POST /v1/salient   {"image":"<base64>"} -> {"features":["...", ...]}
//! ```
//!
//! Both sides reject unknown fields.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::model::FeatureLabel;

pub const CLASSIFY_PATH: &str = "/v1/classify";
pub const SALIENT_PATH: &str = "/v1/salient";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub image: String,
    pub feature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyResponse {
    pub label: FeatureLabel,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalientRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalientResponse {
    pub features: Vec<String>,
}

fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(bytes).map_err(|e| {
        if e.is_data() {
            ProtocolError::Schema(e.to_string())
        } else {
            ProtocolError::Json(e.to_string())
        }
    })
}

fn check_image(image: &str) -> Result<Vec<u8>, ProtocolError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(image)
        .map_err(|e| ProtocolError::Schema(format!("image is not base64: {e}")))?;
    if bytes.is_empty() {
        return Err(ProtocolError::Schema("image is empty".into()));
    }
    Ok(bytes)
}

/// Validated request plus decoded image bytes.
pub fn parse_classify_request(bytes: &[u8]) -> Result<(ClassifyRequest, Vec<u8>), ProtocolError> {
    let req: ClassifyRequest = from_json(bytes)?;
    if req.feature.trim().is_empty() {
        return Err(ProtocolError::Schema("feature is empty".into()));
    }
    let image = check_image(&req.image)?;
    Ok((req, image))
}

pub fn parse_salient_request(bytes: &[u8]) -> Result<(SalientRequest, Vec<u8>), ProtocolError> {
    let req: SalientRequest = from_json(bytes)?;
    let image = check_image(&req.image)?;
    Ok((req, image))
}

pub fn parse_classify_response(bytes: &[u8]) -> Result<ClassifyResponse, ProtocolError> {
    let resp: ClassifyResponse = from_json(bytes)?;
    if resp.rationale.trim().is_empty() && resp.label != FeatureLabel::Hallucinated {
        return Err(ProtocolError::Schema(format!("empty rationale for {}", resp.label)));
    }
    Ok(resp)
}

pub fn parse_salient_response(bytes: &[u8]) -> Result<SalientResponse, ProtocolError> {
    let resp: SalientResponse = from_json(bytes)?;
    if resp.features.iter().any(|f| f.trim().is_empty()) {
        return Err(ProtocolError::Schema("empty feature in list".into()));
    }
    Ok(resp)
}

pub fn encode_image(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_response_schema() {
        let ok = br#"{"label":"non-salient","rationale":"Minor detail."}"#;
        assert_eq!(parse_classify_response(ok).unwrap().label, FeatureLabel::NonSalient);
        assert!(parse_classify_response(br#"{"label":"hallucinated","rationale":""}"#).is_ok());
        for bad in [
            &br#"{"label":"salient"}"#[..],
            br#"{"label":"Salient","rationale":"x"}"#,
            br#"{"label":"salient","rationale":""}"#,
            br#"{"label":"salient","rationale":"x","extra":1}"#,
            br#"{"label":1,"rationale":"x"}"#,
            br#"[]"#,
            b"not json",
        ] {
            assert!(
                parse_classify_response(bad).is_err(),
                "{}",
                String::from_utf8_lossy(bad)
            );
        }
    }

    #[test]
    fn salient_response_schema() {
        assert_eq!(
            parse_salient_response(br#"{"features":["a","b"]}"#).unwrap().features,
            ["a", "b"]
        );
        assert!(parse_salient_response(br#"{"features":[]}"#).is_ok());
        assert!(parse_salient_response(br#"{"features":["a",""]}"#).is_err());
        assert!(parse_salient_response(br#"{"features":"a"}"#).is_err());
    }

    #[test]
    fn requests_need_feature_and_base64() {
        let img = encode_image(b"png");
        let body = serde_json::to_vec(&ClassifyRequest {
            image: img.clone(),
            feature: "porch".into(),
        })
        .unwrap();
        let (_, bytes) = parse_classify_request(&body).unwrap();
        assert_eq!(bytes, b"png");
        assert!(parse_classify_request(format!(r#"{{"image":"{img}"}}"#).as_bytes()).is_err());
        assert!(parse_classify_request(br#"{"image":"***","feature":"x"}"#).is_err());
        assert!(parse_salient_request(br#"{"image":""}"#).is_err());
    }
}
