//! Calculator documents, the on-disk registry, and the validation gates a
//! draft must clear before it can be published as verified.

use crate::bands::{coverage_gap, overlapping_pairs, InterpretationBand};
use crate::lang::{self, ast::ParamKind, CheckedProgram};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The ten organ-system codes a calculator may be tagged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrganSystem {
    A02,
    A03,
    A04,
    A05,
    A06,
    A07,
    A08,
    A14,
    A15,
    A17,
}

impl OrganSystem {
    pub const ALL: [OrganSystem; 10] = [
        OrganSystem::A02,
        OrganSystem::A03,
        OrganSystem::A04,
        OrganSystem::A05,
        OrganSystem::A06,
        OrganSystem::A07,
        OrganSystem::A08,
        OrganSystem::A14,
        OrganSystem::A15,
        OrganSystem::A17,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            OrganSystem::A02 => "A02",
            OrganSystem::A03 => "A03",
            OrganSystem::A04 => "A04",
            OrganSystem::A05 => "A05",
            OrganSystem::A06 => "A06",
            OrganSystem::A07 => "A07",
            OrganSystem::A08 => "A08",
            OrganSystem::A14 => "A14",
            OrganSystem::A15 => "A15",
            OrganSystem::A17 => "A17",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OrganSystem::A02 => "Musculoskeletal",
            OrganSystem::A03 => "Digestive",
            OrganSystem::A04 => "Respiratory",
            OrganSystem::A05 => "Urogenital",
            OrganSystem::A06 => "Endocrine",
            OrganSystem::A07 => "Cardiovascular",
            OrganSystem::A08 => "Nervous",
            OrganSystem::A14 => "Stomatognathic",
            OrganSystem::A15 => "Hemic and Immune",
            OrganSystem::A17 => "Integumentary",
        }
    }

    pub fn from_code(code: &str) -> Option<OrganSystem> {
        OrganSystem::ALL.iter().copied().find(|o| o.code() == code)
    }
}

impl fmt::Display for OrganSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.label(), self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Draft,
    Verified,
    Rejected,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Draft => "draft",
            Status::Verified => "verified",
            Status::Rejected => "rejected",
        };
        f.write_str(s)
    }
}

/// One calculator document. Serializes with exactly the registry field
/// names; fields this version does not know are kept and written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calculator {
    pub id: String,
    pub pmid: String,
    pub title: String,
    #[serde(default)]
    pub purpose: String,
    #[serde(default)]
    pub eligibility: String,
    #[serde(default)]
    pub organ_systems: Vec<OrganSystem>,
    pub program_source: String,
    #[serde(default)]
    pub interpretation: Vec<InterpretationBand>,
    #[serde(default)]
    pub utility: String,
    #[serde(default)]
    pub citation_count: u64,
    /// Absent means "not reported", which is distinct from a reported 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_size: Option<u64>,
    pub status: Status,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Calculator {
    /// The invariants every stored document must satisfy, regardless of
    /// status. Returns the first violated field.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id: must be non-empty".into());
        }
        if self.pmid.is_empty() {
            return Err("pmid: must be non-empty".into());
        }
        let mut seen = self.organ_systems.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.organ_systems.len() {
            return Err("organ_systems: duplicate code".into());
        }
        if self.status == Status::Verified {
            let report = validate(self);
            if let Some(check) = report.checks.iter().find(|c| !c.passed) {
                return Err(format!(
                    "{}: verified calculator fails the {} check ({})",
                    match check.name {
                        CheckName::Parse | CheckName::TypeCheck => "program_source",
                        CheckName::BandCoverage | CheckName::BandOverlap => "interpretation",
                        CheckName::Metadata => "title",
                    },
                    check.name,
                    check.detail
                ));
            }
            if self.organ_systems.is_empty() {
                return Err("organ_systems: must be non-empty once verified".into());
            }
        }
        Ok(())
    }

    /// The compiled program, when `program_source` is well-formed.
    pub fn compile(&self) -> Result<CheckedProgram, Vec<lang::Diagnostic>> {
        lang::compile(&self.program_source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    Parse,
    TypeCheck,
    BandCoverage,
    BandOverlap,
    Metadata,
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckName::Parse => "parse",
            CheckName::TypeCheck => "type-check",
            CheckName::BandCoverage => "band-coverage",
            CheckName::BandOverlap => "band-overlap",
            CheckName::Metadata => "metadata",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: CheckName,
    pub passed: bool,
    #[serde(default)]
    pub detail: String,
}

/// Mechanical validation report: one entry per check, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: CheckName) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Run the mechanical checks a draft must pass before the question-based
/// verification step: parse, type-check, band coverage, band overlap,
/// non-empty metadata.
pub fn validate(calc: &Calculator) -> ValidationReport {
    let mut checks = Vec::new();
    let parsed = lang::parse(&calc.program_source);
    match &parsed {
        Ok(_) => checks.push(CheckResult {
            name: CheckName::Parse,
            passed: true,
            detail: String::new(),
        }),
        Err(d) => checks.push(CheckResult {
            name: CheckName::Parse,
            passed: false,
            detail: d.to_string(),
        }),
    }

    let checked = parsed.ok().and_then(|prog| {
        let diags = lang::typecheck(&prog);
        if diags.is_empty() {
            lang::compile(&calc.program_source).ok()
        } else {
            checks.push(CheckResult {
                name: CheckName::TypeCheck,
                passed: false,
                detail: diags[0].to_string(),
            });
            None
        }
    });
    if checked.is_some() {
        checks.push(CheckResult {
            name: CheckName::TypeCheck,
            passed: true,
            detail: String::new(),
        });
    } else if !checks.iter().any(|c| c.name == CheckName::TypeCheck) {
        checks.push(CheckResult {
            name: CheckName::TypeCheck,
            passed: false,
            detail: "not checked: program does not parse".into(),
        });
    }

    let (coverage, overlap) = band_checks(calc, checked.as_ref());
    checks.push(coverage);
    checks.push(overlap);

    let mut missing = Vec::new();
    for (field, value) in [
        ("title", &calc.title),
        ("purpose", &calc.purpose),
        ("eligibility", &calc.eligibility),
    ] {
        if value.trim().is_empty() {
            missing.push(field);
        }
    }
    if calc.pmid.trim().is_empty() {
        missing.push("pmid");
    }
    checks.push(CheckResult {
        name: CheckName::Metadata,
        passed: missing.is_empty(),
        detail: if missing.is_empty() {
            String::new()
        } else {
            format!("empty: {}", missing.join(", "))
        },
    });

    // Fixed report order regardless of evaluation order above.
    let order = [
        CheckName::Parse,
        CheckName::TypeCheck,
        CheckName::BandCoverage,
        CheckName::BandOverlap,
        CheckName::Metadata,
    ];
    checks.sort_by_key(|c| order.iter().position(|n| *n == c.name).unwrap());
    ValidationReport { checks }
}

fn band_checks(calc: &Calculator, checked: Option<&CheckedProgram>) -> (CheckResult, CheckResult) {
    let outputs: std::collections::BTreeSet<&str> = calc
        .interpretation
        .iter()
        .map(|b| b.output_name.as_str())
        .collect();
    let mut overlap_detail = None;
    for name in outputs {
        if let Some((i, j)) = overlapping_pairs(&calc.interpretation, name).first() {
            overlap_detail = Some(format!(
                "bands `{}` and `{}` overlap on output `{}`",
                calc.interpretation[*i].label, calc.interpretation[*j].label, name
            ));
            break;
        }
    }
    let overlap = CheckResult {
        name: CheckName::BandOverlap,
        passed: overlap_detail.is_none(),
        detail: overlap_detail.unwrap_or_default(),
    };

    let coverage = match checked {
        None => CheckResult {
            name: CheckName::BandCoverage,
            passed: false,
            detail: "not checked: program does not parse".into(),
        },
        Some(prog) => {
            let mut problems = Vec::new();
            for band in &calc.interpretation {
                if prog.program().output(&band.output_name).is_none() {
                    problems.push(format!(
                        "band `{}` names unknown output `{}`",
                        band.label, band.output_name
                    ));
                }
            }
            for o in prog.outputs() {
                if let Some((lo, hi)) = o.declared_range {
                    let has_bands = calc
                        .interpretation
                        .iter()
                        .any(|b| b.output_name == o.name);
                    if !has_bands {
                        problems.push(format!("output `{}` has no bands", o.name));
                    } else if let Some(gap) =
                        coverage_gap(&calc.interpretation, &o.name, lo, hi)
                    {
                        problems.push(format!("output `{}`: {}", o.name, gap));
                    }
                }
            }
            CheckResult {
                name: CheckName::BandCoverage,
                passed: problems.is_empty(),
                detail: problems.first().cloned().unwrap_or_default(),
            }
        }
    };
    (coverage, overlap)
}

/// The compact card a selector model sees for one calculator: identity,
/// scope, and the parameters it will have to supply.
pub fn digest(calc: &Calculator) -> String {
    let mut out = String::new();
    out.push_str(&format!("id: {}\n", calc.id));
    out.push_str(&format!("title: {}\n", calc.title));
    if !calc.purpose.trim().is_empty() {
        out.push_str(&format!("purpose: {}\n", calc.purpose.trim()));
    }
    if !calc.eligibility.trim().is_empty() {
        out.push_str(&format!("eligibility: {}\n", calc.eligibility.trim()));
    }
    match lang::parse(&calc.program_source) {
        Err(_) => out.push_str("parameters: (source does not parse)\n"),
        Ok(prog) => {
            out.push_str("parameters:\n");
            for p in &prog.params {
                let desc = match &p.kind {
                    ParamKind::Boolean => "boolean".to_string(),
                    ParamKind::Number { unit, domain } => {
                        let mut d = "number".to_string();
                        if let Some(u) = unit {
                            d.push_str(&format!(", {u}"));
                        }
                        if let Some(dom) = domain {
                            let (lo, hi) = dom.bounds();
                            d.push_str(&format!(", in [{lo}, {hi}]"));
                        }
                        d
                    }
                    ParamKind::Enum { labels } => format!("enum: {}", labels.join(", ")),
                };
                out.push_str(&format!("  - {} ({})\n", p.name, desc));
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {detail}")]
    Malformed { file: PathBuf, detail: String },
    #[error("duplicate calculator id `{id}` (first in {first}, again in {second})")]
    Conflict {
        id: String,
        first: String,
        second: String,
    },
}

/// An immutable-after-load collection of calculators, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    calcs: BTreeMap<String, Calculator>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Load from a directory of `*.json` documents or from a single `.jsonl`
    /// bundle file.
    pub fn load(path: &Path) -> Result<Registry, RegistryError> {
        if path.is_dir() {
            Registry::load_dir(path)
        } else {
            Registry::load_bundle(path)
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Registry, RegistryError> {
        let mut reg = Registry::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| RegistryError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for file in entries {
            let text = fs::read_to_string(&file).map_err(|e| RegistryError::Io {
                path: file.clone(),
                source: e,
            })?;
            let calc = parse_doc(&text, &file)?;
            reg.admit(calc, file.display().to_string())?;
        }
        Ok(reg)
    }

    pub fn load_bundle(file: &Path) -> Result<Registry, RegistryError> {
        let mut reg = Registry::new();
        let f = fs::File::open(file).map_err(|e| RegistryError::Io {
            path: file.to_path_buf(),
            source: e,
        })?;
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| RegistryError::Io {
                path: file.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let calc = parse_doc(&line, file).map_err(|e| match e {
                RegistryError::Malformed { file, detail } => RegistryError::Malformed {
                    file,
                    detail: format!("line {}: {}", lineno + 1, detail),
                },
                other => other,
            })?;
            reg.admit(calc, format!("{}:{}", file.display(), lineno + 1))?;
        }
        Ok(reg)
    }

    fn admit(&mut self, calc: Calculator, source: String) -> Result<(), RegistryError> {
        if let Some(prev) = self.calcs.get(&calc.id) {
            return Err(RegistryError::Conflict {
                id: calc.id.clone(),
                first: prev
                    .extra
                    .get("__source")
                    .and_then(|v| v.as_str())
                    .unwrap_or("earlier document")
                    .to_string(),
                second: source,
            });
        }
        let mut calc = calc;
        calc.extra
            .insert("__source".into(), serde_json::Value::String(source));
        self.calcs.insert(calc.id.clone(), calc);
        Ok(())
    }

    /// Add a calculator built in memory (curation owns such registries
    /// until publication). Duplicate ids are conflicts here too.
    pub fn insert(&mut self, calc: Calculator) -> Result<(), RegistryError> {
        calc.check_invariants()
            .map_err(|detail| RegistryError::Malformed {
                file: PathBuf::from(format!("<memory:{}>", calc.id)),
                detail,
            })?;
        if self.calcs.contains_key(&calc.id) {
            return Err(RegistryError::Conflict {
                id: calc.id.clone(),
                first: "registry".into(),
                second: "insert".into(),
            });
        }
        self.calcs.insert(calc.id.clone(), calc);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Calculator> {
        self.calcs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Calculator> {
        self.calcs.values()
    }

    pub fn len(&self) -> usize {
        self.calcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calcs.is_empty()
    }

    /// Write one `<id>.json` per calculator into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), RegistryError> {
        fs::create_dir_all(dir).map_err(|e| RegistryError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for calc in self.calcs.values() {
            let file = dir.join(format!("{}.json", calc.id));
            let mut clean = calc.clone();
            clean.extra.remove("__source");
            let text = serde_json::to_string_pretty(&clean).expect("calculators serialize");
            fs::write(&file, text + "\n").map_err(|e| RegistryError::Io {
                path: file.clone(),
                source: e,
            })?;
        }
        Ok(())
    }

    /// Write the whole registry as one JSONL bundle.
    pub fn save_bundle(&self, file: &Path) -> Result<(), RegistryError> {
        let mut f = fs::File::create(file).map_err(|e| RegistryError::Io {
            path: file.to_path_buf(),
            source: e,
        })?;
        for calc in self.calcs.values() {
            let mut clean = calc.clone();
            clean.extra.remove("__source");
            let line = serde_json::to_string(&clean).expect("calculators serialize");
            writeln!(f, "{line}").map_err(|e| RegistryError::Io {
                path: file.to_path_buf(),
                source: e,
            })?;
        }
        Ok(())
    }
}

fn parse_doc(text: &str, file: &Path) -> Result<Calculator, RegistryError> {
    let calc: Calculator =
        serde_json::from_str(text).map_err(|e| RegistryError::Malformed {
            file: file.to_path_buf(),
            detail: e.to_string(),
        })?;
    calc.check_invariants()
        .map_err(|detail| RegistryError::Malformed {
            file: file.to_path_buf(),
            detail,
        })?;
    Ok(calc)
}

/// One source-article abstract, the input unit of curation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractRecord {
    pub pmid: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub text: String,
    pub year: i32,
    #[serde(default)]
    pub citation_count: u64,
}
