//! Hints, exclusion rules and the pruned hintset catalog.
//!
//! A hint is a boolean toggle handed to the optimizer at compile time. The
//! catalog is the set of masks over all hints that satisfy a [`RuleSet`];
//! every rule kind is an "at most" constraint, so the admissible masks form
//! a downward-closed family and can be enumerated by a pruned depth-first
//! search instead of filtering the full power set.
//!
//! The textual config format (`hints.cfg`) is line based:
//!
//! ```text
//! 0 hash_join Join
//! 1 index_join Join
//! exclude hash_join index_join
//! group equi: hash_join index_join
//! prune max_category Join 1
//! prune max_among 1: a b c
//! prune max_total 3
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shipped default catalog: 15 hints and the rules that prune them to 225 hintsets.
pub const DEFAULT_HINTS_CFG: &str = include_str!("../config/hints.cfg");

/// Largest number of hints a mask can hold.
pub const MAX_HINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HintCategory {
    Join,
    LogicalEnumeration,
}

impl fmt::Display for HintCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HintCategory::Join => f.write_str("Join"),
            HintCategory::LogicalEnumeration => f.write_str("LogicalEnumeration"),
        }
    }
}

impl FromStr for HintCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "Join" => Ok(HintCategory::Join),
            "LogicalEnumeration" => Ok(HintCategory::LogicalEnumeration),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hint {
    pub id: u8,
    pub name: String,
    pub category: HintCategory,
}

/// Bitmask over hint ids; bit `i` set means hint `i` is enabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HintMask(pub u32);

impl HintMask {
    pub const EMPTY: HintMask = HintMask(0);

    pub fn contains(self, id: u8) -> bool {
        self.0 >> id & 1 == 1
    }

    pub fn with(self, id: u8) -> HintMask {
        HintMask(self.0 | 1 << id)
    }

    pub fn without(self, id: u8) -> HintMask {
        HintMask(self.0 & !(1 << id))
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn ids(self) -> impl Iterator<Item = u8> {
        (0..MAX_HINTS as u8).filter(move |&i| self.contains(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintSet {
    /// Position in the catalog. Id 0 is always the all-default mask.
    pub id: usize,
    pub enabled: HintMask,
}

/// Declarative filters applied on top of the structural rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneFilter {
    /// At most `max` enabled hints of one category.
    MaxCategory { category: HintCategory, max: u32 },
    /// At most `max` enabled hints among the listed ids.
    MaxAmong { hints: Vec<u8>, max: u32 },
    /// At most `max` enabled hints overall.
    MaxTotal { max: u32 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub mutual_exclusions: Vec<(u8, u8)>,
    /// At most one of these groups may contain enabled hints.
    pub independent_groups: Vec<Vec<u8>>,
    pub extra_pruning: Vec<PruneFilter>,
}

/// Precomputed form of a [`RuleSet`] for fast mask checks.
#[derive(Debug, Clone)]
struct CompiledRules {
    exclusions: Vec<u32>,
    groups: Vec<u32>,
    caps: Vec<(u32, u32)>,
}

impl RuleSet {
    fn referenced_ids(&self) -> impl Iterator<Item = u8> + '_ {
        let ex = self.mutual_exclusions.iter().flat_map(|&(a, b)| [a, b]);
        let gr = self.independent_groups.iter().flatten().copied();
        let pr = self.extra_pruning.iter().flat_map(|f| match f {
            PruneFilter::MaxAmong { hints, .. } => hints.clone(),
            _ => Vec::new(),
        });
        ex.chain(gr).chain(pr)
    }

    /// Checks that every rule refers to a hint in `hints`.
    pub fn check_references(&self, hints: &[Hint]) -> Result<()> {
        let known: HashSet<u8> = hints.iter().map(|h| h.id).collect();
        for id in self.referenced_ids() {
            if !known.contains(&id) {
                return Err(Error::RuleReferencesUnknownHint(format!("#{id}")));
            }
        }
        Ok(())
    }

    fn compile(&self, hints: &[Hint]) -> CompiledRules {
        let bits = |ids: &[u8]| ids.iter().fold(0u32, |m, &i| m | 1 << i);
        let exclusions = self
            .mutual_exclusions
            .iter()
            .map(|&(a, b)| 1u32 << a | 1u32 << b)
            .collect();
        let groups = self.independent_groups.iter().map(|g| bits(g)).collect();
        let caps = self
            .extra_pruning
            .iter()
            .map(|f| match f {
                PruneFilter::MaxCategory { category, max } => {
                    let ids: Vec<u8> = hints.iter().filter(|h| h.category == *category).map(|h| h.id).collect();
                    (bits(&ids), *max)
                }
                PruneFilter::MaxAmong { hints, max } => (bits(hints), *max),
                PruneFilter::MaxTotal { max } => (u32::MAX, *max),
            })
            .collect();
        CompiledRules {
            exclusions,
            groups,
            caps,
        }
    }

    /// True iff every rule holds for `mask`. Category filters need the hint list.
    pub fn allows(&self, hints: &[Hint], mask: HintMask) -> bool {
        self.compile(hints).allows(mask.0)
    }
}

impl CompiledRules {
    fn allows(&self, m: u32) -> bool {
        if self.exclusions.iter().any(|&e| m & e == e) {
            return false;
        }
        if self.groups.iter().filter(|&&g| m & g != 0).count() > 1 {
            return false;
        }
        self.caps.iter().all(|&(set, max)| (m & set).count_ones() <= max)
    }
}

/// Returns true iff every rule holds for `set.enabled`.
pub fn validate(hints: &[Hint], set: &HintSet, rules: &RuleSet) -> bool {
    rules.allows(hints, set.enabled)
}

/// Enumerates every admissible mask, sorted ascending, with ids in that order.
///
/// The all-zero mask is always admissible and therefore always id 0.
pub fn enumerate_hintsets(hints: &[Hint], rules: &RuleSet) -> Result<Vec<HintSet>> {
    if hints.is_empty() {
        return Err(Error::InvalidSpec("hint list is empty".into()));
    }
    if hints.len() > MAX_HINTS {
        return Err(Error::InvalidSpec(format!(
            "{} hints exceed the {MAX_HINTS}-bit mask",
            hints.len()
        )));
    }
    rules.check_references(hints)?;
    let compiled = rules.compile(hints);
    let mut ids: Vec<u8> = hints.iter().map(|h| h.id).collect();
    ids.sort_unstable();

    // Every constraint is monotone, so a branch that violates a rule
    // cannot be repaired by enabling further hints.
    let mut masks = Vec::new();
    let mut stack = vec![(0usize, 0u32)];
    while let Some((pos, mask)) = stack.pop() {
        if pos == ids.len() {
            masks.push(mask);
            continue;
        }
        stack.push((pos + 1, mask));
        let on = mask | 1 << ids[pos];
        if compiled.allows(on) {
            stack.push((pos + 1, on));
        }
    }
    masks.sort_unstable();
    Ok(masks
        .into_iter()
        .enumerate()
        .map(|(id, m)| HintSet {
            id,
            enabled: HintMask(m),
        })
        .collect())
}

/// Hints plus rules, as read from a `hints.cfg` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HintConfig {
    pub hints: Vec<Hint>,
    pub rules: RuleSet,
}

impl HintConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    pub fn default_config() -> Self {
        DEFAULT_HINTS_CFG.parse().expect("shipped hint config must parse")
    }

    pub fn hint_id(&self, name: &str) -> Option<u8> {
        self.hints.iter().find(|h| h.name == name).map(|h| h.id)
    }

    /// Canonical text form; the digest is computed over this.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for h in &self.hints {
            out.push_str(&format!("{} {} {}\n", h.id, h.name, h.category));
        }
        let name = |id: u8| {
            self.hints
                .iter()
                .find(|h| h.id == id)
                .map(|h| h.name.clone())
                .unwrap_or_else(|| format!("#{id}"))
        };
        for &(a, b) in &self.rules.mutual_exclusions {
            out.push_str(&format!("exclude {} {}\n", name(a), name(b)));
        }
        for (i, g) in self.rules.independent_groups.iter().enumerate() {
            let names: Vec<String> = g.iter().map(|&id| name(id)).collect();
            out.push_str(&format!("group g{i}: {}\n", names.join(" ")));
        }
        for f in &self.rules.extra_pruning {
            match f {
                PruneFilter::MaxCategory { category, max } => {
                    out.push_str(&format!("prune max_category {category} {max}\n"))
                }
                PruneFilter::MaxAmong { hints, max } => {
                    let names: Vec<String> = hints.iter().map(|&id| name(id)).collect();
                    out.push_str(&format!("prune max_among {max}: {}\n", names.join(" ")))
                }
                PruneFilter::MaxTotal { max } => out.push_str(&format!("prune max_total {max}\n")),
            }
        }
        out
    }
}

impl FromStr for HintConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut hints: Vec<Hint> = Vec::new();
        let mut rules = RuleSet::default();
        let bad = |line: usize, msg: String| Error::HintConfig { line, msg };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lookup = |name: &str| -> Result<u8> {
                hints
                    .iter()
                    .find(|h| h.name == name)
                    .map(|h| h.id)
                    .ok_or_else(|| Error::RuleReferencesUnknownHint(name.to_string()))
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "exclude" => {
                    if words.len() != 3 {
                        return Err(bad(line_no, "exclude takes two hint names".into()));
                    }
                    rules.mutual_exclusions.push((lookup(words[1])?, lookup(words[2])?));
                }
                "group" => {
                    let (_, members) = line
                        .split_once(':')
                        .ok_or_else(|| bad(line_no, "group needs `name: hints`".into()))?;
                    let ids = members.split_whitespace().map(lookup).collect::<Result<Vec<_>>>()?;
                    rules.independent_groups.push(ids);
                }
                "prune" => rules.extra_pruning.push(parse_prune(line, line_no, &lookup)?),
                first => {
                    if words.len() != 3 {
                        return Err(bad(line_no, format!("expected `id name category`, got `{line}`")));
                    }
                    let id: u8 = first
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad hint id `{first}`")))?;
                    if usize::from(id) != hints.len() {
                        return Err(bad(line_no, format!("hint ids must be dense from 0; got {id}")));
                    }
                    if hints.iter().any(|h| h.name == words[1]) {
                        return Err(bad(line_no, format!("duplicate hint `{}`", words[1])));
                    }
                    let category = words[2].parse().map_err(|e| bad(line_no, e))?;
                    hints.push(Hint {
                        id,
                        name: words[1].to_string(),
                        category,
                    });
                }
            }
        }
        if hints.is_empty() {
            return Err(bad(0, "no hints declared".into()));
        }
        if hints.len() > MAX_HINTS {
            return Err(bad(0, format!("at most {MAX_HINTS} hints")));
        }
        Ok(HintConfig { hints, rules })
    }
}

fn parse_prune(line: &str, line_no: usize, lookup: &dyn Fn(&str) -> Result<u8>) -> Result<PruneFilter> {
    let bad = |msg: &str| Error::HintConfig {
        line: line_no,
        msg: msg.to_string(),
    };
    let rest = line["prune".len()..].trim();
    let (kind, args) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let args = args.trim();
    match kind {
        "max_category" => {
            let mut it = args.split_whitespace();
            let category = it
                .next()
                .ok_or_else(|| bad("missing category"))?
                .parse()
                .map_err(|e: String| bad(&e))?;
            let max = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("missing limit"))?;
            Ok(PruneFilter::MaxCategory { category, max })
        }
        "max_among" => {
            let (max, names) = args.split_once(':').ok_or_else(|| bad("max_among needs `k: hints`"))?;
            let max = max.trim().parse().map_err(|_| bad("bad limit"))?;
            let hints = names.split_whitespace().map(lookup).collect::<Result<Vec<_>>>()?;
            Ok(PruneFilter::MaxAmong { hints, max })
        }
        "max_total" => {
            let max = args.parse().map_err(|_| bad("bad limit"))?;
            Ok(PruneFilter::MaxTotal { max })
        }
        other => Err(bad(&format!("unknown filter `{other}`"))),
    }
}

/// An immutable, enumerated hintset catalog.
#[derive(Debug, Clone)]
pub struct HintCatalog {
    config: HintConfig,
    sets: Vec<HintSet>,
    digest: String,
}

impl HintCatalog {
    pub fn new(config: HintConfig) -> Result<Self> {
        let sets = enumerate_hintsets(&config.hints, &config.rules)?;
        let digest = hex_digest(config.canonical().as_bytes());
        Ok(HintCatalog { config, sets, digest })
    }

    /// The shipped 15-hint catalog.
    pub fn default_catalog() -> Self {
        HintCatalog::new(HintConfig::default_config()).expect("shipped hint config is valid")
    }

    pub fn config(&self) -> &HintConfig {
        &self.config
    }

    pub fn hints(&self) -> &[Hint] {
        &self.config.hints
    }

    pub fn sets(&self) -> &[HintSet] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&HintSet> {
        self.sets.get(id)
    }

    /// Hex SHA-256 of the canonical config.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Names of the hints enabled in `set`, in id order.
    pub fn names(&self, set: &HintSet) -> Vec<&str> {
        set.enabled
            .ids()
            .filter_map(|id| self.config.hints.get(usize::from(id)))
            .map(|h| h.name.as_str())
            .collect()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}
