//! Critic protocol conformance suite, shared by client and server checks.
//!
//! Client side: seeded fuzzed responses are served to a [`Gateway`] by a
//! scripted backend; valid ones must round-trip, invalid ones must fail
//! with a typed error. Server side: the same request shapes go to a live
//! endpoint, whose responses must pass the protocol parsers.

use std::sync::{Arc, Mutex};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::mock::FnBackend;
use super::protocol::{self, ClassifyResponse, SalientResponse};
use super::{Cache, Gateway, GatewayError, ModelRole};
use crate::model::{canonicalize_feature, FeatureLabel, FeatureOrigin, ImageRef};

const WORDS: &[&str] = &[
    "deck",
    "verandah",
    "tiled",
    "roof",
    "north",
    "light",
    "timber",
    "floors",
    "garden",
    "bay",
    "window",
    "ducted",
    "kitchen",
    "stone",
    "bench",
    "café",
    "über",
    "naïve",
    "façade",
    "🏠",
    "\"quoted\"",
    "back\\slash",
    "tab\there",
    "line\nbreak",
    "勾配",
    "2.5m",
];

fn phrase(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Serialize with random key order and whitespace; both are legal JSON
/// variations a server may produce.
fn render(fields: Vec<(&str, Value)>, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut fields = fields;
    if rng.random_bool(0.5) {
        fields.reverse();
    }
    let sep = [" ", "", "\n  ", "\t"];
    let s = *sep.choose(rng).unwrap();
    let body: Vec<String> = fields
        .into_iter()
        .map(|(k, v)| {
            let v = if rng.random_bool(0.5) {
                serde_json::to_string_pretty(&v).unwrap()
            } else {
                v.to_string()
            };
            format!("{s}{}{s}:{s}{v}", Value::String(k.to_owned()))
        })
        .collect();
    format!("{s}{{{}{s}}}{s}", body.join(",")).into_bytes()
}

pub fn valid_classify_responses(n: usize, seed: u64) -> Vec<(Vec<u8>, ClassifyResponse)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = *FeatureLabel::ALL.choose(&mut rng).unwrap();
            let rationale = if label == FeatureLabel::Hallucinated && rng.random_bool(0.3) {
                String::new()
            } else {
                phrase(&mut rng, 12)
            };
            let bytes = render(vec![("label", json!(label)), ("rationale", json!(rationale))], &mut rng);
            (bytes, ClassifyResponse { label, rationale })
        })
        .collect()
}

pub fn valid_salient_responses(n: usize, seed: u64) -> Vec<(Vec<u8>, SalientResponse)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..6);
            let features: Vec<String> = (0..k).map(|_| phrase(&mut rng, 3)).collect();
            let bytes = render(vec![("features", json!(features))], &mut rng);
            (bytes, SalientResponse { features })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Classify,
    Salient,
}

/// Schema-invalid responses cycling through every mutation kind.
pub fn invalid_responses(n: usize, seed: u64) -> Vec<(Endpoint, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Mutation = fn(&mut ChaCha8Rng) -> (Endpoint, Value);
    let mutations: [Mutation; 10] = [
        |r| (Endpoint::Classify, json!({"rationale": phrase(r, 4)})),
        |r| {
            (
                Endpoint::Classify,
                json!({"label": if r.random_bool(0.5) { "salient" } else { "non-salient" }}),
            )
        },
        |r| {
            (
                Endpoint::Classify,
                json!({"label": "visible", "rationale": phrase(r, 4)}),
            )
        },
        |r| {
            (
                Endpoint::Classify,
                json!({"label": "Salient", "rationale": phrase(r, 4)}),
            )
        },
        |r| {
            (
                Endpoint::Classify,
                json!({"label": "non-salient", "rationale": phrase(r, 4), "score": 0.5}),
            )
        },
        |_| (Endpoint::Classify, json!({"label": "salient", "rationale": ""})),
        |r| {
            (
                Endpoint::Classify,
                json!({"label": r.random_range(0..3), "rationale": "x"}),
            )
        },
        |r| (Endpoint::Salient, json!({"features": phrase(r, 3)})),
        |r| (Endpoint::Salient, json!({"features": [phrase(r, 2), "  "]})),
        |r| (Endpoint::Salient, json!({"features": [phrase(r, 2)], "extra": true})),
    ];
    (0..n)
        .map(|i| {
            let (ep, v) = mutations[i % mutations.len()](&mut rng);
            let mut bytes = v.to_string().into_bytes();
            // Every fifth one is also cut short.
            if i % 5 == 4 {
                bytes.truncate(bytes.len() - 1);
            }
            (ep, bytes)
        })
        .collect()
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ConformanceReport {
    pub valid: usize,
    pub valid_ok: usize,
    pub invalid: usize,
    pub invalid_rejected: usize,
    pub failures: Vec<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.valid_ok == self.valid && self.invalid_rejected == self.invalid && self.failures.is_empty()
    }
}

fn typed_rejection(e: &GatewayError) -> bool {
    matches!(e, GatewayError::Protocol(_) | GatewayError::Parse(_))
}

/// Serve `n_valid` fuzzed valid and `n_invalid` invalid responses (per
/// endpoint mix) to a gateway through a scripted backend.
pub fn check_client(n_valid: usize, n_invalid: usize, seed: u64) -> ConformanceReport {
    let next: Arc<Mutex<Vec<u8>>> = Arc::new(Mutex::new(Vec::new()));
    let backend = {
        let next = next.clone();
        Arc::new(FnBackend::new("conformance", move |_| Ok(next.lock().unwrap().clone())))
    };
    let gw = Gateway::new(Cache::in_memory())
        .route(ModelRole::CriticClassifier, backend.clone(), 0)
        .route(ModelRole::CriticLister, backend, 0);
    let fixed = gw.hallucinated_rationale().to_owned();
    // A fresh image per call keeps the cache out of the way.
    let image = |i: usize| ImageRef::new(format!("img{i}"), format!("mock:conformance/{i}"));
    let feature = canonicalize_feature("timber deck", FeatureOrigin::GeneratedText).unwrap();
    let mut report = ConformanceReport::default();
    let mut call = 0usize;

    let classify = valid_classify_responses(n_valid.div_ceil(2), seed);
    let salient = valid_salient_responses(n_valid / 2, seed ^ 0x5a);
    for (bytes, expected) in classify {
        report.valid += 1;
        *next.lock().unwrap() = bytes;
        call += 1;
        match gw.classify_feature(&[image(call)], &feature) {
            Ok(v) => {
                let want = if expected.label == FeatureLabel::Hallucinated {
                    fixed.clone()
                } else {
                    expected.rationale.clone()
                };
                if v.label == expected.label && v.rationale == want {
                    report.valid_ok += 1;
                } else {
                    report
                        .failures
                        .push(format!("classify mismatch: {v:?} vs {expected:?}"));
                }
            }
            Err(e) => report.failures.push(format!("classify rejected valid response: {e}")),
        }
    }
    for (bytes, expected) in salient {
        report.valid += 1;
        *next.lock().unwrap() = bytes;
        call += 1;
        match gw.list_salient(&image(call)) {
            Ok(got) => {
                let want: Vec<String> = crate::model::dedup_features(
                    expected
                        .features
                        .iter()
                        .filter_map(|f| canonicalize_feature(f, FeatureOrigin::CriticList).ok()),
                )
                .into_iter()
                .map(|f| f.key)
                .collect();
                let got: Vec<String> = got.into_iter().map(|f| f.key).collect();
                if got == want {
                    report.valid_ok += 1;
                } else {
                    report.failures.push(format!("salient mismatch: {got:?} vs {want:?}"));
                }
            }
            Err(e) => report.failures.push(format!("salient rejected valid response: {e}")),
        }
    }
    for (ep, bytes) in invalid_responses(n_invalid, seed ^ 0xbad) {
        report.invalid += 1;
        *next.lock().unwrap() = bytes.clone();
        call += 1;
        let res = match ep {
            Endpoint::Classify => gw.classify_feature(&[image(call)], &feature).map(|_| ()),
            Endpoint::Salient => gw.list_salient(&image(call)).map(|_| ()),
        };
        match res {
            Err(e) if typed_rejection(&e) => report.invalid_rejected += 1,
            Err(e) => report
                .failures
                .push(format!("untyped rejection {e} for {}", String::from_utf8_lossy(&bytes))),
            Ok(()) => report
                .failures
                .push(format!("accepted invalid response {}", String::from_utf8_lossy(&bytes))),
        }
    }
    report
}

/// Requests a conforming server must answer with 400.
pub fn invalid_requests(image: &[u8]) -> Vec<(Endpoint, Vec<u8>)> {
    let img = protocol::encode_image(image);
    vec![
        (Endpoint::Classify, json!({"image": img}).to_string().into_bytes()),
        (Endpoint::Classify, json!({"feature": "deck"}).to_string().into_bytes()),
        (
            Endpoint::Classify,
            json!({"image": img, "feature": ""}).to_string().into_bytes(),
        ),
        (
            Endpoint::Classify,
            json!({"image": "***", "feature": "deck"}).to_string().into_bytes(),
        ),
        (
            Endpoint::Classify,
            json!({"image": img, "feature": "deck", "k": 1})
                .to_string()
                .into_bytes(),
        ),
        (Endpoint::Classify, b"{\"image\":".to_vec()),
        (Endpoint::Salient, json!({}).to_string().into_bytes()),
        (Endpoint::Salient, json!({"image": ""}).to_string().into_bytes()),
        (Endpoint::Salient, json!({"image": 5}).to_string().into_bytes()),
        (Endpoint::Salient, b"[]".to_vec()),
    ]
}

fn post(agent: &ureq::Agent, url: &str, body: &[u8]) -> Result<(u16, Vec<u8>), String> {
    let mut resp = agent
        .post(url)
        .header("Content-Type", "application/json")
        .send(body)
        .map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let bytes = resp.body_mut().read_to_vec().map_err(|e| e.to_string())?;
    Ok((status, bytes))
}

/// Run the suite against a live endpoint at `base_url`: `n` valid requests
/// over `images` and `features`, whose responses must parse, and every
/// [`invalid_requests`] shape, which must come back 400.
pub fn check_server(base_url: &str, images: &[Vec<u8>], features: &[String], n: usize, seed: u64) -> ConformanceReport {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let base = base_url.trim_end_matches('/');
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConformanceReport::default();
    if images.is_empty() || features.is_empty() {
        report.failures.push("no images or features to probe with".into());
        return report;
    }
    for i in 0..n {
        report.valid += 1;
        let image = protocol::encode_image(images.choose(&mut rng).unwrap());
        let (url, body) = if i % 2 == 0 {
            let f = features.choose(&mut rng).unwrap();
            (
                format!("{base}{}", protocol::CLASSIFY_PATH),
                json!({"image": image, "feature": f}),
            )
        } else {
            (format!("{base}{}", protocol::SALIENT_PATH), json!({"image": image}))
        };
        match post(&agent, &url, body.to_string().as_bytes()) {
            Ok((200, bytes)) => {
                let parsed = if i % 2 == 0 {
                    protocol::parse_classify_response(&bytes).map(|_| ())
                } else {
                    protocol::parse_salient_response(&bytes).map(|_| ())
                };
                match parsed {
                    Ok(()) => report.valid_ok += 1,
                    Err(e) => report.failures.push(format!("{url}: schema violation {e}")),
                }
            }
            Ok((status, bytes)) => report
                .failures
                .push(format!("{url}: status {status}: {}", String::from_utf8_lossy(&bytes))),
            Err(e) => report.failures.push(format!("{url}: {e}")),
        }
    }
    for (ep, body) in invalid_requests(&images[0]) {
        report.invalid += 1;
        let path = match ep {
            Endpoint::Classify => protocol::CLASSIFY_PATH,
            Endpoint::Salient => protocol::SALIENT_PATH,
        };
        match post(&agent, &format!("{base}{path}"), &body) {
            Ok((400, bytes)) if serde_json::from_slice::<Value>(&bytes).is_ok_and(|v| v.get("error").is_some()) => {
                report.invalid_rejected += 1
            }
            Ok((status, bytes)) => report.failures.push(format!(
                "{path}: expected 400 with error body for {}, got {status} {}",
                String::from_utf8_lossy(&body),
                String::from_utf8_lossy(&bytes)
            )),
            Err(e) => report.failures.push(format!("{path}: {e}")),
        }
    }
    report
}
