//! Keyword hints for non-order-dependent flakiness categories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::verdict::TestId;

pub const DEFAULT_KEYWORDS: &str = include_str!("../../data/keywords.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    AsyncWait,
    Concurrency,
    IO,
    Network,
    Time,
    Random,
    UnorderedCollection,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::AsyncWait,
        Category::Concurrency,
        Category::IO,
        Category::Network,
        Category::Time,
        Category::Random,
        Category::UnorderedCollection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::AsyncWait => "AsyncWait",
            Category::Concurrency => "Concurrency",
            Category::IO => "IO",
            Category::Network => "Network",
            Category::Time => "Time",
            Category::Random => "Random",
            Category::UnorderedCollection => "UnorderedCollection",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = KeywordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| KeywordError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HintSource {
    Trace,
    TestSource,
}

/// A suggested category. Hints support a manual decision; they are never a
/// final label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryHint {
    pub category: Category,
    pub source: HintSource,
    pub matched_keywords: BTreeSet<String>,
}

#[derive(Debug, Error)]
pub enum KeywordError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("empty keyword in category {0}")]
    EmptyKeyword(Category),
    #[error("keyword table: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace file {0}: {1}")]
    Trace(String, String),
}

#[derive(Debug)]
struct Keyword {
    text: String,
    segments: Vec<String>,
    word: Regex,
}

/// Category → keyword list, as loaded from a TOML table.
#[derive(Debug)]
pub struct KeywordTable {
    entries: Vec<(Category, Vec<Keyword>)>,
}

impl KeywordTable {
    pub fn parse(text: &str) -> Result<Self, KeywordError> {
        let raw: BTreeMap<String, Vec<String>> = toml::from_str(text)?;
        let mut entries = Vec::new();
        for (name, words) in raw {
            let category: Category = name.parse()?;
            let keywords = words
                .into_iter()
                .map(|w| {
                    if w.trim().is_empty() {
                        return Err(KeywordError::EmptyKeyword(category));
                    }
                    let word = Regex::new(&format!(r"\b{}\b", regex::escape(&w)))
                        .expect("escaped keyword is a valid pattern");
                    Ok(Keyword {
                        segments: w.split('.').map(String::from).collect(),
                        text: w,
                        word,
                    })
                })
                .collect::<Result<_, _>>()?;
            entries.push((category, keywords));
        }
        entries.sort_by_key(|(c, _)| *c);
        Ok(KeywordTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self, KeywordError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The built-in table.
    pub fn default_table() -> &'static KeywordTable {
        static TABLE: OnceLock<KeywordTable> = OnceLock::new();
        TABLE.get_or_init(|| KeywordTable::parse(DEFAULT_KEYWORDS).expect("built-in keyword table parses"))
    }

    pub fn keywords(&self, category: Category) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(c, _)| *c == category)
            .flat_map(|(_, ks)| ks.iter().map(|k| k.text.as_str()))
            .collect()
    }

    /// One hint per (category, source) with at least one matching keyword.
    pub fn hints<S: AsRef<str>>(&self, trace_calls: &[S], test_source: &str) -> BTreeSet<CategoryHint> {
        let calls: Vec<Vec<&str>> = trace_calls.iter().map(|c| c.as_ref().split('.').collect()).collect();
        let mut out = BTreeSet::new();
        for (category, keywords) in &self.entries {
            let in_trace: BTreeSet<String> = keywords
                .iter()
                .filter(|k| calls.iter().any(|segs| contains_segments(segs, &k.segments)))
                .map(|k| k.text.clone())
                .collect();
            let in_source: BTreeSet<String> = keywords
                .iter()
                .filter(|k| k.word.is_match(test_source))
                .map(|k| k.text.clone())
                .collect();
            for (source, matched) in [(HintSource::Trace, in_trace), (HintSource::TestSource, in_source)] {
                if !matched.is_empty() {
                    out.insert(CategoryHint {
                        category: *category,
                        source,
                        matched_keywords: matched,
                    });
                }
            }
        }
        out
    }
}

fn contains_segments(haystack: &[&str], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| *a == b))
}

/// Hints from the built-in keyword table.
pub fn keyword_hints<S: AsRef<str>>(trace_calls: &[S], test_source: &str) -> BTreeSet<CategoryHint> {
    KeywordTable::default_table().hints(trace_calls, test_source)
}

/// Reads every trace file below `dir`. The first line of a trace file is the
/// canonical test id, each further line one qualified call name. Traces of the
/// same test from several runs are concatenated.
pub fn read_trace_dir(dir: &Path) -> Result<BTreeMap<TestId, Vec<String>>, KeywordError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut out: BTreeMap<TestId, Vec<String>> = BTreeMap::new();
    for path in files {
        let text = std::fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let Some(first) = lines.next() else { continue };
        let test: TestId = first
            .trim()
            .parse()
            .map_err(|e| KeywordError::Trace(path.display().to_string(), format!("{e}")))?;
        out.entry(test)
            .or_default()
            .extend(lines.map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    Ok(out)
}
