//! Prompt templates and the grammars of the answers they request.

mod parse;
mod template;

pub use parse::{
    format_bracketed, format_classification, format_numbered, format_sections, parse_classification,
    parse_feature_list, parse_feature_list_or_empty, parse_saliency, parse_visibility, ParseError,
};
pub use template::{bindings, bindings_digest, PromptText, Template, TemplateError, TemplateId, TemplateSet};
