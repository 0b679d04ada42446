//! Domain types shared by every stage of the pipeline, plus the
//! line-delimited record format.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Rationale attached to every hallucinated feature unless overridden.
pub const HALLUCINATED_RATIONALE: &str = "The feature is not visible in the image.";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),
    #[error("feature is empty after trimming")]
    EmptyFeature,
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How unknown keys in record files are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaMode {
    #[default]
    Strict,
    Lax,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub attribute: String,
    pub value: String,
}

impl AttributePair {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            value: value.into(),
        }
    }
}

/// Structured half of a record: a knowledge graph or an attribute table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StructuredData {
    Kg(Vec<Triple>),
    Table(Vec<AttributePair>),
}

impl StructuredData {
    pub fn kind(&self) -> StructuredKind {
        match self {
            StructuredData::Kg(_) => StructuredKind::Kg,
            StructuredData::Table(_) => StructuredKind::Table,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StructuredData::Kg(t) => t.len(),
            StructuredData::Table(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Object / value strings, in record order.
    pub fn values(&self) -> Vec<&str> {
        match self {
            StructuredData::Kg(t) => t.iter().map(|t| t.object.as_str()).collect(),
            StructuredData::Table(p) => p.iter().map(|p| p.value.as_str()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::Schema("structured data is empty".into()));
        }
        let blank = |s: &str| s.trim().is_empty();
        match self {
            StructuredData::Kg(triples) => {
                for (i, t) in triples.iter().enumerate() {
                    if blank(&t.subject) || blank(&t.relation) || blank(&t.object) {
                        return Err(ModelError::Schema(format!("triple {i} has an empty component")));
                    }
                }
            }
            StructuredData::Table(pairs) => {
                for (i, p) in pairs.iter().enumerate() {
                    if blank(&p.attribute) || blank(&p.value) {
                        return Err(ModelError::Schema(format!("pair {i} has an empty component")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuredKind {
    Kg,
    Table,
}

/// Test-world declaration of what an image shows.
///
/// Keys are canonical feature keys; iteration order is declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockManifest {
    pub visible: Vec<String>,
    pub salient: Vec<String>,
}

impl MockManifest {
    pub fn new<S: AsRef<str>>(visible: &[S], salient: &[S]) -> Result<Self, ModelError> {
        let m = Self {
            visible: visible.iter().map(|s| canonical_key(s.as_ref())).collect(),
            salient: salient.iter().map(|s| canonical_key(s.as_ref())).collect(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn is_visible(&self, key: &str) -> bool {
        self.visible.iter().any(|k| k == key)
    }

    pub fn is_salient(&self, key: &str) -> bool {
        self.salient.iter().any(|k| k == key)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        for k in &self.visible {
            if k.is_empty() || *k != canonical_key(k) {
                return Err(ModelError::Schema(format!("manifest key {k:?} is not canonical")));
            }
            if !seen.insert(k.as_str()) {
                return Err(ModelError::Schema(format!("manifest key {k:?} repeated")));
            }
        }
        let mut seen_salient = HashSet::new();
        for k in &self.salient {
            if !seen.contains(k.as_str()) {
                return Err(ModelError::Schema(format!("salient key {k:?} is not visible")));
            }
            if !seen_salient.insert(k.as_str()) {
                return Err(ModelError::Schema(format!("manifest key {k:?} repeated")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<MockManifest>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            manifest: None,
        }
    }

    pub fn with_manifest(mut self, manifest: MockManifest) -> Self {
        self.manifest = Some(manifest);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedModalRecord {
    pub record_id: String,
    pub structured: StructuredData,
    pub images: Vec<ImageRef>,
    pub ground_truth_text: Option<String>,
}

impl MixedModalRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.record_id.trim().is_empty() {
            return Err(ModelError::Schema("record_id is empty".into()));
        }
        self.structured.validate()?;
        if self.images.is_empty() {
            return Err(ModelError::Schema("images must be non-empty".into()));
        }
        let mut ids = HashSet::new();
        for img in &self.images {
            if img.id.trim().is_empty() {
                return Err(ModelError::Schema("image id is empty".into()));
            }
            if img.uri.trim().is_empty() {
                return Err(ModelError::Schema(format!("image {:?} has an empty uri", img.id)));
            }
            if !ids.insert(img.id.as_str()) {
                return Err(ModelError::DuplicateImageId(img.id.clone()));
            }
            if let Some(m) = &img.manifest {
                m.validate()?;
            }
        }
        if let Some(gt) = &self.ground_truth_text {
            if gt.trim().is_empty() {
                return Err(ModelError::Schema("ground_truth_text is empty".into()));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageRef> {
        self.images.iter().find(|i| i.id == id)
    }
}

/// Where a feature was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    GroundTruthText,
    GeneratedText,
    CriticList,
}

/// An atomic attribute mentioned in text. Two features match iff their
/// keys are byte-equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Feature {
    pub display: String,
    pub key: String,
    pub origin: FeatureOrigin,
}

impl Feature {
    pub fn matches(&self, other: &Feature) -> bool {
        self.key == other.key
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display)
    }
}

fn collapse_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Trim, collapse inner whitespace and casefold.
pub fn canonical_key(raw: &str) -> String {
    collapse_whitespace(raw).to_lowercase()
}

pub fn canonicalize_feature(raw: &str, origin: FeatureOrigin) -> Result<Feature, ModelError> {
    let display = collapse_whitespace(raw);
    if display.is_empty() {
        return Err(ModelError::EmptyFeature);
    }
    let key = display.to_lowercase();
    Ok(Feature { display, key, origin })
}

/// Drop later features whose key was already seen.
pub fn dedup_features(features: impl IntoIterator<Item = Feature>) -> Vec<Feature> {
    let mut seen = HashSet::new();
    features.into_iter().filter(|f| seen.insert(f.key.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureLabel {
    #[serde(rename = "hallucinated")]
    Hallucinated,
    #[serde(rename = "non-salient")]
    NonSalient,
    #[serde(rename = "salient")]
    Salient,
}

impl FeatureLabel {
    pub const ALL: [FeatureLabel; 3] = [
        FeatureLabel::Salient,
        FeatureLabel::NonSalient,
        FeatureLabel::Hallucinated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLabel::Salient => "salient",
            FeatureLabel::NonSalient => "non-salient",
            FeatureLabel::Hallucinated => "hallucinated",
        }
    }

    /// Join under the precedence salient > non-salient > hallucinated.
    pub fn join(self, other: FeatureLabel) -> FeatureLabel {
        self.max(other)
    }
}

impl fmt::Display for FeatureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == '_' || c == ' ' { '-' } else { c })
            .collect();
        match norm.as_str() {
            "salient" => Ok(FeatureLabel::Salient),
            "non-salient" | "nonsalient" | "not-salient" => Ok(FeatureLabel::NonSalient),
            "hallucinated" => Ok(FeatureLabel::Hallucinated),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledFeature {
    pub feature: Feature,
    pub label: FeatureLabel,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextVariant {
    Draft,
    Pruned,
    Appended,
    Combined,
}

impl TextVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TextVariant::Draft => "draft",
            TextVariant::Pruned => "pruned",
            TextVariant::Appended => "appended",
            TextVariant::Combined => "combined",
        }
    }
}

impl fmt::Display for TextVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cache key of a model call.
pub type ModelCallId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub record_id: String,
    pub variant: TextVariant,
    pub text: String,
    pub provenance: Vec<ModelCallId>,
}

// ---------------------------------------------------------------------------
// Record (de)serialization

fn take_string(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<String, ModelError> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(ModelError::Schema(format!("{ctx}.{key} is empty"))),
        Some(_) => Err(ModelError::Schema(format!("{ctx}.{key} must be a string"))),
        None => Err(ModelError::Schema(format!("{ctx}.{key} is missing"))),
    }
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], ctx: &str, mode: SchemaMode) -> Result<(), ModelError> {
    if mode == SchemaMode::Strict {
        if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ModelError::Schema(format!("unknown key {ctx}.{k}")));
        }
    }
    Ok(())
}

fn as_object<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>, ModelError> {
    v.as_object()
        .ok_or_else(|| ModelError::Schema(format!("{ctx} must be an object")))
}

fn string_tuple(v: &Value, arity: usize, ctx: &str) -> Result<Vec<String>, ModelError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == arity)
        .ok_or_else(|| ModelError::Schema(format!("{ctx} must be an array of {arity} strings")))?;
    arr.iter()
        .map(|x| match x {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            _ => Err(ModelError::Schema(format!("{ctx} must contain non-empty strings"))),
        })
        .collect()
}

fn parse_structured(v: &Value, mode: SchemaMode) -> Result<StructuredData, ModelError> {
    let obj = as_object(v, "structured")?;
    let kind = take_string(obj, "kind", "structured")?;
    let data = match kind.as_str() {
        "kg" => {
            check_keys(obj, &["kind", "triples"], "structured", mode)?;
            let items = obj
                .get("triples")
                .and_then(Value::as_array)
                .ok_or_else(|| ModelError::Schema("structured.triples must be an array".into()))?;
            let triples = items
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut parts = string_tuple(t, 3, &format!("structured.triples[{i}]"))?.into_iter();
                    let (s, r, o) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
                    Ok(Triple::new(s, r, o))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            StructuredData::Kg(triples)
        }
        "table" => {
            check_keys(obj, &["kind", "pairs"], "structured", mode)?;
            let items = obj
                .get("pairs")
                .and_then(Value::as_array)
                .ok_or_else(|| ModelError::Schema("structured.pairs must be an array".into()))?;
            let pairs = items
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut parts = string_tuple(p, 2, &format!("structured.pairs[{i}]"))?.into_iter();
                    Ok(AttributePair::new(parts.next().unwrap(), parts.next().unwrap()))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            StructuredData::Table(pairs)
        }
        other => {
            return Err(ModelError::Schema(format!(
                "structured.kind {other:?} is not kg or table"
            )))
        }
    };
    data.validate()?;
    Ok(data)
}

fn parse_manifest(v: &Value, ctx: &str, mode: SchemaMode) -> Result<MockManifest, ModelError> {
    let obj = as_object(v, ctx)?;
    check_keys(obj, &["visible", "salient"], ctx, mode)?;
    let keys = |name: &str| -> Result<Vec<String>, ModelError> {
        match obj.get(name) {
            None => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|x| {
                    x.as_str()
                        .map(str::to_owned)
                        .ok_or_else(|| ModelError::Schema(format!("{ctx}.{name} must contain strings")))
                })
                .collect(),
            Some(_) => Err(ModelError::Schema(format!("{ctx}.{name} must be an array"))),
        }
    };
    let m = MockManifest {
        visible: keys("visible")?,
        salient: keys("salient")?,
    };
    m.validate()?;
    Ok(m)
}

/// Validate a raw JSON object against the record schema.
pub fn parse_record(raw: &Value, mode: SchemaMode) -> Result<MixedModalRecord, ModelError> {
    let obj = as_object(raw, "record")?;
    check_keys(
        obj,
        &["record_id", "structured", "images", "ground_truth_text"],
        "record",
        mode,
    )?;
    let record_id = take_string(obj, "record_id", "record")?;
    let structured = parse_structured(
        obj.get("structured")
            .ok_or_else(|| ModelError::Schema("record.structured is missing".into()))?,
        mode,
    )?;
    let images_raw = obj
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::Schema("record.images must be an array".into()))?;
    let mut images = Vec::with_capacity(images_raw.len());
    for (i, img) in images_raw.iter().enumerate() {
        let ctx = format!("images[{i}]");
        let o = as_object(img, &ctx)?;
        check_keys(o, &["id", "uri", "manifest"], &ctx, mode)?;
        let manifest = match o.get("manifest") {
            None | Some(Value::Null) => None,
            Some(m) => Some(parse_manifest(m, &format!("{ctx}.manifest"), mode)?),
        };
        images.push(ImageRef {
            id: take_string(o, "id", &ctx)?,
            uri: take_string(o, "uri", &ctx)?,
            manifest,
        });
    }
    let ground_truth_text = match obj.get("ground_truth_text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ModelError::Schema("record.ground_truth_text must be a string".into())),
    };
    let record = MixedModalRecord {
        record_id,
        structured,
        images,
        ground_truth_text,
    };
    record.validate()?;
    Ok(record)
}

pub fn record_to_value(record: &MixedModalRecord) -> Value {
    let structured = match &record.structured {
        StructuredData::Kg(triples) => serde_json::json!({
            "kind": "kg",
            "triples": triples.iter().map(|t| [&t.subject, &t.relation, &t.object]).collect::<Vec<_>>(),
        }),
        StructuredData::Table(pairs) => serde_json::json!({
            "kind": "table",
            "pairs": pairs.iter().map(|p| [&p.attribute, &p.value]).collect::<Vec<_>>(),
        }),
    };
    let mut obj = Map::new();
    obj.insert("record_id".into(), Value::String(record.record_id.clone()));
    obj.insert("structured".into(), structured);
    obj.insert(
        "images".into(),
        serde_json::to_value(&record.images).expect("image refs serialize"),
    );
    if let Some(gt) = &record.ground_truth_text {
        obj.insert("ground_truth_text".into(), Value::String(gt.clone()));
    }
    Value::Object(obj)
}

pub fn write_records<W: Write>(mut out: W, records: &[MixedModalRecord]) -> Result<(), ModelError> {
    for r in records {
        serde_json::to_writer(&mut out, &record_to_value(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a record file. Blank lines are skipped; record ids must be unique.
pub fn read_records<R: BufRead>(input: R, mode: SchemaMode) -> Result<Vec<MixedModalRecord>, ModelError> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: ModelError| ModelError::Line {
            line: idx + 1,
            source: Box::new(e),
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| wrap(e.into()))?;
        let record = parse_record(&value, mode).map_err(wrap)?;
        if !ids.insert(record.record_id.clone()) {
            return Err(wrap(ModelError::Schema(format!(
                "duplicate record_id {:?}",
                record.record_id
            ))));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_records_file(path: &std::path::Path, mode: SchemaMode) -> Result<Vec<MixedModalRecord>, ModelError> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file), mode)
}

/// Write then read back through the line-delimited format.
pub fn round_trip_dataset(records: &[MixedModalRecord]) -> Result<Vec<MixedModalRecord>, ModelError> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    read_records(buf.as_slice(), SchemaMode::Strict)
}
