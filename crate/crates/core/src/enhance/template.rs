//! Instruction templates sent to the text model.

use serde::{Deserialize, Serialize};

use super::EnhanceError;

/// Which enhancement an instruction drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhancementKind {
    /// Face-aware prompt enhancement: `T` plus reference face -> `T_c`.
    Pe,
    /// Reference-image prompt: `T_c` -> `T_ref`.
    Ie,
}

impl EnhancementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnhancementKind::Pe => "pe",
            EnhancementKind::Ie => "ie",
        }
    }
}

pub const SLOT: &str = "{prompt}";

pub const PE_CONSTRAINTS: [&str; 4] = [
    "preserve the original caption verbatim;",
    "insert a short clause including only facial attributes of the image (approx. age, gender presentation, notable traits);",
    "omit clothing, accessories and background of the image;",
    "ensure the result reads as one natural sentence.",
];

pub const IE_CONSTRAINTS: [&str; 4] = [
    "preserves the subject's identity and keeps the face fully visible (no occluding items);",
    "retains only profession/role attire, explicit actions, gender or hairstyle cues mentioned in the prompt;",
    "adds nothing not present in the description and focus on the attributes of the prompt subject;",
    "reads as natural third-person narration with no hashtags, camera directions, or meta language.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementTemplate {
    pub kind: EnhancementKind,
    pub instruction_text: String,
}

impl EnhancementTemplate {
    pub fn pe() -> Self {
        let mut text = String::from("Inputs\n1. Original prompt T: ");
        text.push_str(SLOT);
        text.push_str("\n2. Image of one person's face I_ref (attached)\n\nTask\nReturn one revised caption according to the inputs that\n");
        push_bullets(&mut text, &PE_CONSTRAINTS);
        Self { kind: EnhancementKind::Pe, instruction_text: text }
    }

    pub fn ie() -> Self {
        let mut text = String::from("Input\nOriginal prompt T_c: ");
        text.push_str(SLOT);
        text.push_str("\n\nTask\nReturn one sentence that\n");
        push_bullets(&mut text, &IE_CONSTRAINTS);
        Self { kind: EnhancementKind::Ie, instruction_text: text }
    }

    pub fn for_kind(kind: EnhancementKind) -> Self {
        match kind {
            EnhancementKind::Pe => Self::pe(),
            EnhancementKind::Ie => Self::ie(),
        }
    }

    pub fn constraints(&self) -> &'static [&'static str; 4] {
        match self.kind {
            EnhancementKind::Pe => &PE_CONSTRAINTS,
            EnhancementKind::Ie => &IE_CONSTRAINTS,
        }
    }

    /// Fills the single prompt slot. The value is trimmed first.
    pub fn render(&self, value: &str) -> Result<String, EnhanceError> {
        let value = value.trim();
        if value.is_empty() {
            return Err(EnhanceError::EmptyPrompt);
        }
        let mut parts = self.instruction_text.splitn(2, SLOT);
        let head = parts.next().unwrap_or_default();
        let tail = parts
            .next()
            .ok_or_else(|| EnhanceError::Template("template has no prompt slot".into()))?;
        if tail.contains(SLOT) {
            return Err(EnhanceError::Template("template has more than one prompt slot".into()));
        }
        Ok(format!("{head}{value}{tail}"))
    }
}

fn push_bullets(text: &mut String, bullets: &[&str]) {
    for b in bullets {
        text.push_str("- ");
        text.push_str(b);
        text.push('\n');
    }
}

pub fn build_pe_instruction(prompt: &str) -> Result<String, EnhanceError> {
    EnhancementTemplate::pe().render(prompt)
}

pub fn build_ie_instruction(enhanced_prompt: &str) -> Result<String, EnhanceError> {
    EnhancementTemplate::ie().render(enhanced_prompt)
}
