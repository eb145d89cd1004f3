//! Revision prompt template.
//!
//! The shipped template lives in `prompts/self_revise.v1.txt`. Custom
//! templates must carry the instruction line verbatim and contain each of the
//! five placeholders exactly once, in order.

use std::path::Path;

/// Instruction that opens every revision prompt.
pub const REVISION_INSTRUCTION: &str = "I've encountered an error code. I will show you the correct code snippet \
and ask for your assistance in fixing the error based on that correct code with minimal necessary revisions.";

pub const DEFAULT_TEMPLATE: &str = include_str!("../../prompts/self_revise.v1.txt");
pub const DEFAULT_TEMPLATE_VERSION: &str = "self_revise.v1";

/// Placeholders in their required order.
pub const PLACEHOLDERS: [&str; 5] = [
    "{requirement}",
    "{correct_solution}",
    "{error_code}",
    "{error_messages}",
    "{failed_tests}",
];

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {0}: {1}")]
    Io(String, std::io::Error),
    #[error("template lacks the revision instruction")]
    MissingInstruction,
    #[error("template placeholder {0} must appear exactly once")]
    Placeholder(&'static str),
    #[error("template placeholders are out of order")]
    Order,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionTemplate {
    /// Literal text between placeholders; always `PLACEHOLDERS.len() + 1` pieces.
    segments: Vec<String>,
}

impl Default for RevisionTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }
}

impl RevisionTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        if !text.contains(REVISION_INSTRUCTION) {
            return Err(TemplateError::MissingInstruction);
        }
        let mut positions = Vec::with_capacity(PLACEHOLDERS.len());
        for ph in PLACEHOLDERS {
            let mut found = text.match_indices(ph);
            let (pos, _) = found.next().ok_or(TemplateError::Placeholder(ph))?;
            if found.next().is_some() {
                return Err(TemplateError::Placeholder(ph));
            }
            positions.push((pos, ph.len()));
        }
        if positions.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(TemplateError::Order);
        }
        let mut segments = Vec::with_capacity(PLACEHOLDERS.len() + 1);
        let mut cursor = 0;
        for (pos, len) in positions {
            segments.push(text[cursor..pos].to_string());
            cursor = pos + len;
        }
        segments.push(text[cursor..].to_string());
        Ok(Self { segments })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Substitute the parts in placeholder order. Part text is never re-scanned
    /// for placeholders.
    pub fn render(&self, parts: [&str; 5]) -> String {
        let mut out = String::new();
        for (seg, part) in self.segments.iter().zip(parts) {
            out.push_str(seg);
            out.push_str(part);
        }
        out.push_str(self.segments.last().expect("segments non-empty"));
        out
    }
}
