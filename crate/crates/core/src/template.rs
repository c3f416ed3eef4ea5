//! Prompt templates shipped as resource files.
//!
//! Placeholders are written `{{name}}`. Filling is a single left-to-right pass,
//! so substituted values are never re-scanned for placeholders.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub text: &'static str,
}

pub const FGQA: Template = Template {
    id: "fgqa.v1",
    text: include_str!("../templates/fgqa.txt"),
};
pub const SGQA: Template = Template {
    id: "sgqa.v1",
    text: include_str!("../templates/sgqa.txt"),
};
pub const RDCAP: Template = Template {
    id: "rdcap.v1",
    text: include_str!("../templates/rdcap.txt"),
};
pub const RCAP: Template = Template {
    id: "rcap.v1",
    text: include_str!("../templates/rcap.txt"),
};
pub const RTLOC: Template = Template {
    id: "rtloc.v1",
    text: include_str!("../templates/rtloc.txt"),
};
pub const JUDGE_SGQA: Template = Template {
    id: "judge_sgqa.v1",
    text: include_str!("../templates/judge_sgqa.txt"),
};
pub const JUDGE_RCAP: Template = Template {
    id: "judge_rcap.v1",
    text: include_str!("../templates/judge_rcap.txt"),
};
pub const MCQ_GENERATION: Template = Template {
    id: "mcq_generation.v1",
    text: include_str!("../templates/mcq_generation.txt"),
};
pub const ADDENDUM_NO_EXTERNAL_KNOWLEDGE: Template = Template {
    id: "addendum_no_external_knowledge.v1",
    text: include_str!("../templates/addendum_no_external_knowledge.txt"),
};
pub const ADDENDUM_NO_REFUSAL: Template = Template {
    id: "addendum_no_refusal.v1",
    text: include_str!("../templates/addendum_no_refusal.txt"),
};

impl Template {
    /// Resource files end with a newline that is not part of the prompt.
    pub fn body(&self) -> &'static str {
        self.text.strip_suffix('\n').unwrap_or(self.text)
    }

    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut rest = self.body();
        while let Some(i) = rest.find("{{") {
            let after = &rest[i + 2..];
            match after.find("}}") {
                Some(j) => {
                    let name = &after[..j];
                    if !out.contains(&name) {
                        out.push(name);
                    }
                    rest = &after[j + 2..];
                }
                None => break,
            }
        }
        out
    }

    pub fn fill(&self, values: &BTreeMap<&str, String>) -> Result<String> {
        let body = self.body();
        let mut out = String::with_capacity(body.len() + 64);
        let mut rest = body;
        while let Some(i) = rest.find("{{") {
            out.push_str(&rest[..i]);
            let after = &rest[i + 2..];
            let Some(j) = after.find("}}") else {
                out.push_str(&rest[i..]);
                rest = "";
                break;
            };
            let name = &after[..j];
            let value = values.get(name).ok_or_else(|| {
                Error::invalid(format!("template {}: missing value for placeholder [{name}]", self.id))
            })?;
            out.push_str(value);
            rest = &after[j + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}
