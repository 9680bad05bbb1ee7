//! Shared vocabulary: targets, section identifiers, drafts, claims and reports.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierKind {
    GeneSymbol,
    GeneId,
    UniprotAccession,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetQuery {
    pub identifier: String,
    pub identifier_kind: IdentifierKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub therapeutic_area: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_context: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text_context: Option<String>,
}

impl TargetQuery {
    pub fn with_context(
        mut self,
        therapeutic_area: Option<String>,
        modality: Option<String>,
        species_context: Option<Vec<String>>,
        free_text_context: Option<String>,
    ) -> Self {
        self.therapeutic_area = therapeutic_area;
        self.modality = modality;
        self.species_context = species_context;
        self.free_text_context = free_text_context;
        self
    }
}

/// Classifies a raw target identifier.
///
/// UniProt accessions follow the published accession grammar
/// (`[OPQ][0-9][A-Z0-9]{3}[0-9]` or `[A-NR-Z][0-9]([A-Z][A-Z0-9]{2}[0-9]){1,2}`);
/// Ensembl gene ids (`ENSG…`, `ENSMUSG…`) and bare NCBI Gene numbers are gene
/// ids; anything else is taken as a gene symbol.
pub fn normalize_target_identifier(raw: &str) -> Result<TargetQuery> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::invalid_argument("target identifier is empty"));
    }
    let upper = trimmed.to_ascii_uppercase();
    let (identifier, kind) = if is_uniprot_accession(&upper) {
        (upper, IdentifierKind::UniprotAccession)
    } else if is_gene_id(&upper) {
        (upper, IdentifierKind::GeneId)
    } else {
        (trimmed.to_owned(), IdentifierKind::GeneSymbol)
    };
    Ok(TargetQuery {
        identifier,
        identifier_kind: kind,
        therapeutic_area: None,
        modality: None,
        species_context: None,
        free_text_context: None,
    })
}

fn is_uniprot_accession(s: &str) -> bool {
    let b = s.as_bytes();
    let digit = |c: u8| c.is_ascii_digit();
    let upper = |c: u8| c.is_ascii_uppercase();
    let alnum = |c: u8| c.is_ascii_digit() || c.is_ascii_uppercase();
    match b.len() {
        6 if matches!(b[0], b'O' | b'P' | b'Q') => {
            digit(b[1]) && b[2..5].iter().all(|&c| alnum(c)) && digit(b[5])
        }
        6 | 10 if upper(b[0]) && !matches!(b[0], b'O' | b'P' | b'Q') => {
            digit(b[1])
                && b[2..].chunks(4).all(|chunk| {
                    chunk.len() == 4 && upper(chunk[0]) && alnum(chunk[1]) && alnum(chunk[2]) && digit(chunk[3])
                })
        }
        _ => false,
    }
}

fn is_gene_id(s: &str) -> bool {
    if !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit()) {
        return true;
    }
    let Some(rest) = s.strip_prefix("ENS") else {
        return false;
    };
    // Optional species infix (MUS, RNO, ...) then the G feature type and digits.
    let letters = rest.bytes().take_while(|c| c.is_ascii_uppercase()).count();
    if letters == 0 || rest.as_bytes()[letters - 1] != b'G' {
        return false;
    }
    let tail = &rest[letters..];
    let (number, version) = match tail.split_once('.') {
        Some((n, v)) => (n, Some(v)),
        None => (tail, None),
    };
    !number.is_empty()
        && number.bytes().all(|c| c.is_ascii_digit())
        && version.map_or(true, |v| !v.is_empty() && v.bytes().all(|c| c.is_ascii_digit()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Research,
    Synthesis,
}

/// One of the eight report sections. Declaration order is the canonical
/// report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionId {
    Genetic,
    Transcriptomic,
    Homology,
    Pharmacological,
    Clinical,
    SpeciesTranslatability,
    IntegratedRisk,
    ExecutiveSummary,
}

pub const RESEARCH_SECTIONS: [SectionId; 5] = [
    SectionId::Genetic,
    SectionId::Transcriptomic,
    SectionId::Homology,
    SectionId::Pharmacological,
    SectionId::Clinical,
];

pub const SYNTHESIS_SECTIONS: [SectionId; 3] =
    [SectionId::SpeciesTranslatability, SectionId::IntegratedRisk, SectionId::ExecutiveSummary];

pub const ALL_SECTIONS: [SectionId; 8] = [
    SectionId::Genetic,
    SectionId::Transcriptomic,
    SectionId::Homology,
    SectionId::Pharmacological,
    SectionId::Clinical,
    SectionId::SpeciesTranslatability,
    SectionId::IntegratedRisk,
    SectionId::ExecutiveSummary,
];

/// Research sections in evidence-domain order, then the synthesis sections.
pub fn canonical_section_order() -> Vec<SectionId> {
    ALL_SECTIONS.to_vec()
}

impl SectionId {
    pub fn kind(self) -> SectionKind {
        if self.index() < 5 {
            SectionKind::Research
        } else {
            SectionKind::Synthesis
        }
    }

    /// Position in canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SectionId> {
        ALL_SECTIONS.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SectionId::Genetic => "genetic",
            SectionId::Transcriptomic => "transcriptomic",
            SectionId::Homology => "homology",
            SectionId::Pharmacological => "pharmacological",
            SectionId::Clinical => "clinical",
            SectionId::SpeciesTranslatability => "species_translatability",
            SectionId::IntegratedRisk => "integrated_risk",
            SectionId::ExecutiveSummary => "executive_summary",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SectionId::Genetic => "Genetic evidence",
            SectionId::Transcriptomic => "Transcriptomic evidence",
            SectionId::Homology => "Target homology",
            SectionId::Pharmacological => "Pharmacological evidence",
            SectionId::Clinical => "Clinical evidence",
            SectionId::SpeciesTranslatability => "Species translatability",
            SectionId::IntegratedRisk => "Integrated risk assessment",
            SectionId::ExecutiveSummary => "Executive summary",
        }
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_SECTIONS
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::new(ErrorCode::NotFound, format!("unknown section '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionStatus {
    Pending,
    Generating,
    Generated,
    UserEdited,
    Revised,
    Approved,
}

impl SectionStatus {
    /// Whether the section holds reviewable content.
    pub fn has_content(self) -> bool {
        matches!(
            self,
            SectionStatus::Generated | SectionStatus::UserEdited | SectionStatus::Revised | SectionStatus::Approved
        )
    }

    /// pending → generating → generated → {user_edited | revised | approved}*
    pub fn can_transition_to(self, next: SectionStatus) -> bool {
        use SectionStatus::*;
        match (self, next) {
            (Pending, Generating) | (Generating, Generating) | (Generating, Generated) => true,
            (from, UserEdited | Revised | Approved) => from.has_content(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProducedBy {
    Agent,
    Human,
}

/// Byte offsets into a section body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub text: String,
    pub citation_ids: Vec<u64>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionDraft {
    pub section_id: SectionId,
    pub body: String,
    pub claims: Vec<Claim>,
    pub status: SectionStatus,
    pub revision: u32,
    pub produced_by: ProducedBy,
    /// Revisions of every transitive upstream section whose digest was
    /// available when this draft was produced. Drives staleness.
    #[serde(default)]
    pub inputs: BTreeMap<SectionId, u32>,
}

impl SectionDraft {
    pub fn pending(section_id: SectionId) -> Self {
        SectionDraft {
            section_id,
            body: String::new(),
            claims: Vec::new(),
            status: SectionStatus::Pending,
            revision: 0,
            produced_by: ProducedBy::Agent,
            inputs: BTreeMap::new(),
        }
    }

    pub fn transition(&mut self, next: SectionStatus) -> Result<()> {
        if !self.status.can_transition_to(next) {
            return Err(Error::invalid_argument(format!(
                "section {} cannot move from {:?} to {:?}",
                self.section_id, self.status, next
            )));
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub assessment_id: String,
    pub target: TargetQuery,
    pub sections: Vec<SectionDraft>,
    pub created_at: String,
    pub updated_at: String,
}

impl Report {
    pub fn new(assessment_id: impl Into<String>, target: TargetQuery, now: &str) -> Self {
        Report {
            assessment_id: assessment_id.into(),
            target,
            sections: ALL_SECTIONS.iter().map(|&id| SectionDraft::pending(id)).collect(),
            created_at: now.to_owned(),
            updated_at: now.to_owned(),
        }
    }

    pub fn section(&self, id: SectionId) -> Option<&SectionDraft> {
        self.sections.iter().find(|s| s.section_id == id)
    }

    pub fn section_mut(&mut self, id: SectionId) -> Option<&mut SectionDraft> {
        self.sections.iter_mut().find(|s| s.section_id == id)
    }

    pub fn is_canonically_ordered(&self) -> bool {
        self.sections.len() == ALL_SECTIONS.len()
            && self.sections.iter().zip(ALL_SECTIONS.iter()).all(|(s, id)| s.section_id == *id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

/// A rule violation reported as data rather than as a failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    pub severity: Severity,
}

impl Violation {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Violation { code: code.to_owned(), message: message.into(), location: None, severity: Severity::Error }
    }

    pub fn warning(code: &str, message: impl Into<String>) -> Self {
        Violation { code: code.to_owned(), message: message.into(), location: None, severity: Severity::Warning }
    }

    pub fn at(mut self, location: impl Into<String>) -> Self {
        self.location = Some(location.into());
        self
    }
}
