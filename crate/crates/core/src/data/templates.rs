use crate::error::{Error, Result};

const DEFAULT_TEMPLATES: &str = include_str!("../../assets/templates.txt");

/// A prompt template with exactly one `{}` concept slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: usize,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: usize, text: &str) -> Result<Self> {
        let slots = text.matches("{}").count();
        if slots != 1 {
            return Err(Error::config(
                "templates",
                format!("template {id} `{text}` has {slots} slots, expected 1"),
            ));
        }
        Ok(Self {
            id,
            text: text.to_string(),
        })
    }

    pub fn fill(&self, concept: &str) -> String {
        self.text.replacen("{}", concept, 1)
    }
}

/// Parses one template per line; blank lines and `#` comments are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let templates: Vec<PromptTemplate> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| PromptTemplate::new(i, l))
        .collect::<Result<_>>()?;
    if templates.is_empty() {
        return Err(Error::EmptyInput("template list".into()));
    }
    Ok(templates)
}

/// The 20 built-in templates.
pub fn default_templates() -> Vec<PromptTemplate> {
    parse_templates(DEFAULT_TEMPLATES).expect("bundled templates are valid")
}
