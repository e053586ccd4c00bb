use serde::{Deserialize, Serialize};

use crate::data::render::{ShapeFamily, Texture};
use crate::diffusion::text::CLASS_NOUNS;
use crate::error::{Error, Result};

/// A user concept: a personalized token bound to a class noun, rendered as
/// a specific hue/texture instance of the noun's shape family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub id: usize,
    pub token: String,
    pub class_noun: String,
    pub hue: f64,
    pub texture_seed: u64,
    pub scale: f64,
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if !CLASS_NOUNS.contains(&self.class_noun.as_str()) {
            return Err(Error::UnknownToken(vec![self.class_noun.clone()]));
        }
        if self.token.is_empty() || self.token.contains(char::is_whitespace) {
            return Err(Error::config("token", format!("invalid token `{}`", self.token)));
        }
        if !(0.5..=1.5).contains(&self.scale) {
            return Err(Error::Range(format!("scale {} outside [0.5, 1.5]", self.scale)));
        }
        if !self.hue.is_finite() {
            return Err(Error::Range("hue must be finite".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> ShapeFamily {
        ShapeFamily::for_noun(&self.class_noun).expect("validated class noun")
    }

    pub fn texture(&self) -> Texture {
        Texture::from_seed(self.texture_seed)
    }

    /// "V1 dog"
    pub fn phrase(&self) -> String {
        format!("{} {}", self.token, self.class_noun)
    }

    /// The generic class prompt used for prior preservation.
    pub fn class_prompt(&self) -> String {
        format!("a photo of {}", self.class_noun)
    }

    pub fn instance_prompt(&self) -> String {
        format!("a photo of {}", self.phrase())
    }
}

/// Checks token uniqueness across a sequence.
pub fn validate_sequence(specs: &[ConceptSpec]) -> Result<()> {
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.token == s.token) {
            return Err(Error::config(
                "concepts",
                format!("personalized token `{}` is used twice", s.token),
            ));
        }
    }
    Ok(())
}

/// Five concepts, one per class noun, with off-palette hues.
pub fn default_sequence() -> Vec<ConceptSpec> {
    let hues = [200.0, 45.0, 300.0, 150.0, 15.0];
    CLASS_NOUNS
        .iter()
        .zip(hues)
        .enumerate()
        .map(|(i, (noun, hue))| ConceptSpec {
            id: i,
            token: format!("V{}", i + 1),
            class_noun: noun.to_string(),
            hue,
            texture_seed: i as u64,
            scale: 1.0,
        })
        .collect()
}
