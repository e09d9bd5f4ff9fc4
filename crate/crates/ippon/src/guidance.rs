//! Semantic guidance: proximity levels between common categories and the
//! OOI, obtained from a chat model, cached on disk, and converted into
//! per-voxel likelihoods l(v) and per-node imagined probabilities p_img.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{visible_voxels, FrustumSpec, ViewPose};
use crate::voxel_map::{CategorySet, VoxelMap};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("prompt template missing placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("prompt template must contain placeholder {0} exactly once")]
    DuplicatePlaceholder(&'static str),
    #[error("no parsable proximity lines in response")]
    EmptyResponse,
    #[error("proximity file is empty")]
    EmptyFile,
    #[error("unknown proximity level {level:?} for category {category:?}")]
    UnknownLevel { category: String, level: String },
    #[error("malformed proximity file at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// LLM-assigned proximity relation between a common category and the OOI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProximityLevel {
    Far,
    Average,
    Near,
    Certain,
}

impl ProximityLevel {
    pub const ALL: [ProximityLevel; 4] = [
        ProximityLevel::Far,
        ProximityLevel::Average,
        ProximityLevel::Near,
        ProximityLevel::Certain,
    ];

    /// Selection priority for p_img: CERTAIN > FAR > NEAR > AVERAGE.
    pub const PRIORITY: [ProximityLevel; 4] = [
        ProximityLevel::Certain,
        ProximityLevel::Far,
        ProximityLevel::Near,
        ProximityLevel::Average,
    ];
}

impl fmt::Display for ProximityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProximityLevel::Far => "FAR",
            ProximityLevel::Average => "AVERAGE",
            ProximityLevel::Near => "NEAR",
            ProximityLevel::Certain => "CERTAIN",
        };
        f.write_str(s)
    }
}

impl FromStr for ProximityLevel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "FAR" => Ok(ProximityLevel::Far),
            "AVERAGE" => Ok(ProximityLevel::Average),
            "NEAR" => Ok(ProximityLevel::Near),
            "CERTAIN" => Ok(ProximityLevel::Certain),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub p_certain: f64,
    pub p_near: f64,
    pub p_average: f64,
    pub p_far: f64,
    /// Minimum posterior for a voxel's dominant category to link it to that
    /// category's level.
    pub link_threshold: f64,
    /// Horizontal radius around a node within which visible voxels count
    /// toward p_img, in meters.
    pub neighborhood_radius: f64,
    /// A level qualifies for p_img only with at least this many linked
    /// voxels.
    pub min_voxel_count: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            p_certain: 0.5,
            p_near: 0.1,
            p_average: 0.01,
            p_far: 0.0001,
            link_threshold: 0.5,
            neighborhood_radius: 3.0,
            min_voxel_count: 10,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> bool {
        self.p_certain > self.p_near
            && self.p_near > self.p_average
            && self.p_average > self.p_far
            && self.p_far > 0.0
    }
}

/// Level probability p_level for a proximity level.
pub fn level_probability(level: ProximityLevel, cfg: &GuidanceConfig) -> f64 {
    match level {
        ProximityLevel::Certain => cfg.p_certain,
        ProximityLevel::Near => cfg.p_near,
        ProximityLevel::Average => cfg.p_average,
        ProximityLevel::Far => cfg.p_far,
    }
}

/// Per-category proximity level plus the model's explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityEntry {
    pub level: ProximityLevel,
    pub explanation: String,
}

/// Proximity table for one OOI over a common category set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProximityTable {
    pub ooi: String,
    pub context: Option<String>,
    pub entries: BTreeMap<String, ProximityEntry>,
}

impl ProximityTable {
    /// Lookup by canonical key: parsed entries store spaces, while scene
    /// categories use underscores; both spellings must resolve.
    pub fn level(&self, category: &str) -> Option<ProximityLevel> {
        self.entries
            .get(category)
            .or_else(|| self.entries.get(&category.replace('_', " ")))
            .map(|e| e.level)
    }

    /// Per-channel levels for the common categories of a set; missing
    /// categories default to AVERAGE.
    pub fn levels_for(&self, cats: &CategorySet) -> Vec<ProximityLevel> {
        cats.common
            .iter()
            .map(|c| self.level(c).unwrap_or(ProximityLevel::Average))
            .collect()
    }

    pub fn covers(&self, cats: &CategorySet) -> bool {
        cats.common.iter().all(|c| self.level(c).is_some())
    }
}

pub const PLACEHOLDERS: [&str; 4] = ["{ooi}", "{common_objects}", "{scenario}", "{context_information}"];

/// Prompt text with the four placeholders, each appearing exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, GuidanceError> {
        let text = text.into();
        for ph in PLACEHOLDERS {
            // Two placeholders share the "{ooi}" name nowhere, so a plain
            // count suffices.
            let count = text.matches(ph).count();
            let name = match ph {
                "{ooi}" => "{ooi}",
                "{common_objects}" => "{common_objects}",
                "{scenario}" => "{scenario}",
                _ => "{context_information}",
            };
            if count == 0 {
                return Err(GuidanceError::MissingPlaceholder(name));
            }
        }
        Ok(Self { text })
    }

    /// Bundled default template. `{ooi}` may repeat in the body; the
    /// constructor only requires presence.
    pub fn bundled() -> Self {
        Self::new(include_str!("../data/prompt_template.txt")).expect("bundled template valid")
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Substitute the placeholders. Common objects join comma-separated in the
/// given order; an absent context becomes the empty string. Returns the
/// prompt and a warning when the common list is empty.
pub fn build_prompt(
    template: &PromptTemplate,
    ooi: &str,
    common: &[String],
    scenario: &str,
    context: Option<&str>,
) -> (String, Vec<String>) {
    let mut warnings = Vec::new();
    if common.is_empty() {
        warnings.push("common object list is empty".to_string());
    }
    let joined = common.join(", ");
    let prompt = template
        .text
        .replace("{ooi}", ooi)
        .replace("{common_objects}", &joined)
        .replace("{scenario}", scenario)
        .replace("{context_information}", context.unwrap_or(""));
    (prompt, warnings)
}

/// Result of parsing a model response: the table plus recorded warnings
/// for missing/unknown categories.
#[derive(Debug, Clone)]
pub struct ParsedResponse {
    pub table: ProximityTable,
    pub warnings: Vec<String>,
}

/// Parse response lines of the form `[category]: [explanation]. [LEVEL]`.
///
/// Category matching is exact after trimming. Expected categories absent
/// from the text default to AVERAGE with a warning; unknown categories are
/// ignored with a warning.
pub fn parse_proximity_response(
    text: &str,
    expected: &[String],
    ooi: &str,
    context: Option<&str>,
) -> Result<ParsedResponse, GuidanceError> {
    let mut table = ProximityTable {
        ooi: ooi.to_string(),
        context: context.map(str::to_string),
        entries: BTreeMap::new(),
    };
    let mut warnings = Vec::new();
    let mut parsed_any = false;
    for line in text.lines() {
        let line = line.trim();
        let Some((cat, rest)) = line.split_once(':') else {
            continue;
        };
        let cat = cat.trim();
        let rest = rest.trim();
        // The level token terminates the line.
        let Some(last) = rest.rsplit(|c: char| c.is_whitespace()).next() else {
            continue;
        };
        let token = last.trim_matches(|c: char| !c.is_ascii_alphabetic());
        let Ok(level) = ProximityLevel::from_str(token) else {
            continue;
        };
        let explanation = rest[..rest.len() - last.len()]
            .trim()
            .trim_end_matches('.')
            .to_string();
        parsed_any = true;
        if expected.iter().any(|e| e == cat) {
            table.entries.insert(
                cat.to_string(),
                ProximityEntry { level, explanation },
            );
        } else {
            warnings.push(format!("ignoring unknown category {cat:?}"));
        }
    }
    if !parsed_any {
        return Err(GuidanceError::EmptyResponse);
    }
    for cat in expected {
        if !table.entries.contains_key(cat) {
            warnings.push(format!("category {cat:?} missing from response, defaulting to AVERAGE"));
            table.entries.insert(
                cat.clone(),
                ProximityEntry {
                    level: ProximityLevel::Average,
                    explanation: String::new(),
                },
            );
        }
    }
    Ok(ParsedResponse { table, warnings })
}

/// Parse the on-disk proximity cache: one block per category with
/// `explanation` and `proximity` fields. Underscores in category keys map
/// to spaces. Explanations may wrap over indented continuation lines.
pub fn parse_table_text(text: &str) -> Result<ProximityTable, GuidanceError> {
    let mut table = ProximityTable::default();
    let mut current: Option<String> = None;
    let mut explanation: Option<String> = None;
    let mut level: Option<ProximityLevel> = None;
    let mut in_explanation = false;

    let flush = |cat: &mut Option<String>,
                     expl: &mut Option<String>,
                     lvl: &mut Option<ProximityLevel>,
                     line_no: usize,
                     table: &mut ProximityTable|
     -> Result<(), GuidanceError> {
        if let Some(c) = cat.take() {
            let level = lvl.take().ok_or_else(|| GuidanceError::Malformed {
                line: line_no,
                msg: format!("category {c:?} has no proximity field"),
            })?;
            table.entries.insert(
                c,
                ProximityEntry {
                    level,
                    explanation: expl.take().unwrap_or_default(),
                },
            );
        }
        Ok(())
    };

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let indent = raw.len() - raw.trim_start().len();
        let line = raw.trim_end();
        if indent == 0 {
            // New category block.
            let Some(key) = line.strip_suffix(':') else {
                return Err(GuidanceError::Malformed {
                    line: line_no,
                    msg: format!("expected 'category:', got {line:?}"),
                });
            };
            flush(&mut current, &mut explanation, &mut level, line_no, &mut table)?;
            current = Some(key.trim().replace('_', " "));
            in_explanation = false;
        } else if let Some(rest) = line.trim_start().strip_prefix("explanation:") {
            if current.is_none() {
                return Err(GuidanceError::Malformed {
                    line: line_no,
                    msg: "explanation outside a category block".into(),
                });
            }
            explanation = Some(rest.trim().to_string());
            in_explanation = true;
        } else if let Some(rest) = line.trim_start().strip_prefix("proximity:") {
            let cat = current.clone().ok_or_else(|| GuidanceError::Malformed {
                line: line_no,
                msg: "proximity outside a category block".into(),
            })?;
            let token = rest.trim();
            level = Some(ProximityLevel::from_str(token).map_err(|_| {
                GuidanceError::UnknownLevel {
                    category: cat,
                    level: token.to_string(),
                }
            })?);
            in_explanation = false;
        } else if in_explanation && indent >= 4 {
            // Wrapped explanation continuation.
            if let Some(e) = explanation.as_mut() {
                e.push(' ');
                e.push_str(line.trim_start());
            }
        } else {
            return Err(GuidanceError::Malformed {
                line: line_no,
                msg: format!("unexpected line {line:?}"),
            });
        }
    }
    let last = text.lines().count();
    flush(&mut current, &mut explanation, &mut level, last, &mut table)?;
    if table.entries.is_empty() {
        return Err(GuidanceError::EmptyFile);
    }
    Ok(table)
}

pub fn table_to_text(table: &ProximityTable) -> String {
    let mut out = String::new();
    for (cat, entry) in &table.entries {
        out.push_str(&cat.replace(' ', "_"));
        out.push_str(":\n  explanation: ");
        out.push_str(&entry.explanation);
        out.push_str("\n  proximity: ");
        out.push_str(&entry.level.to_string());
        out.push('\n');
    }
    out
}

pub fn load_table(path: &Path) -> Result<ProximityTable, GuidanceError> {
    let text = std::fs::read_to_string(path)?;
    parse_table_text(&text)
}

pub fn save_table(table: &ProximityTable, path: &Path) -> Result<(), GuidanceError> {
    std::fs::write(path, table_to_text(table))?;
    Ok(())
}

/// l(v): likelihood of locating the OOI near a voxel, given per-common-
/// category posteriors and their levels. Clamped to [0, 1].
pub fn voxel_likelihood(probs: &[f64], levels: &[ProximityLevel], cfg: &GuidanceConfig) -> f64 {
    debug_assert_eq!(probs.len(), levels.len());
    probs
        .iter()
        .zip(levels)
        .map(|(p, &l)| level_probability(l, cfg) * p)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// l(v) for a map voxel, using observed posteriors only.
pub fn map_voxel_likelihood(
    map: &VoxelMap,
    idx: crate::grid::VoxelIdx,
    levels: &[ProximityLevel],
    cfg: &GuidanceConfig,
) -> f64 {
    let mut sum = 0.0;
    for (ch, &level) in levels.iter().enumerate() {
        if map.channel_observed(idx, ch) {
            sum += level_probability(level, cfg) * map.posterior(idx, ch);
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Imagined probability p_img for a node: link each nearby visible voxel
/// to the level of its dominant common category (posterior above the link
/// threshold), count voxels per level, and return the level probability of
/// the highest-priority level with enough voxels. Defaults to p_average.
pub fn imagined_probability(
    pose: &ViewPose,
    map: &VoxelMap,
    levels: &[ProximityLevel],
    cfg: &GuidanceConfig,
    frustum: &FrustumSpec,
) -> f64 {
    let vis = visible_voxels(pose, frustum, map.grid(), |idx| map.occupancy_state(idx));
    let mut counts = [0usize; 4];
    let r2 = cfg.neighborhood_radius * cfg.neighborhood_radius;
    for (idx, _) in vis {
        let c = map.grid().voxel_center(idx);
        let dx = c.x - pose.position.x;
        let dy = c.y - pose.position.y;
        if dx * dx + dy * dy > r2 {
            continue;
        }
        if let Some((ch, p)) = map.dominant_common(idx) {
            if p >= cfg.link_threshold {
                counts[levels[ch] as usize] += 1;
            }
        }
    }
    for level in ProximityLevel::PRIORITY {
        if counts[level as usize] >= cfg.min_voxel_count {
            return level_probability(level, cfg);
        }
    }
    cfg.p_average
}

/// Count linked voxels per level over an explicit voxel iterator; used by
/// tests and diagnostics.
pub fn level_counts<I>(map: &VoxelMap, voxels: I, levels: &[ProximityLevel], cfg: &GuidanceConfig) -> [usize; 4]
where
    I: IntoIterator<Item = crate::grid::VoxelIdx>,
{
    let mut counts = [0usize; 4];
    for idx in voxels {
        if let Some((ch, p)) = map.dominant_common(idx) {
            if p >= cfg.link_threshold {
                counts[levels[ch] as usize] += 1;
            }
        }
    }
    counts
}
