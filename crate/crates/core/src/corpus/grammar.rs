use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Split};
use crate::error::{Error, Result};
use crate::io::fnv1a;

const DEFAULT_GRAMMAR: &str = include_str!("../../grammars/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub utterance: String,
    pub parse: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub source: String,
    pub replacement: String,
    pub weight: f64,
}

/// Simulated first-pass recognizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub deletion_rate: f64,
    pub substitution_rate: f64,
    #[serde(default)]
    pub confusions: Vec<Confusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Compositional grammar plus recognizer channel: the synthetic task definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    #[serde(default = "default_nesting")]
    pub max_nesting: usize,
    #[serde(default)]
    pub split: SplitSpec,
    pub channel: ChannelSpec,
    pub fillers: BTreeMap<String, Vec<String>>,
    pub templates: Vec<Template>,
}

fn default_nesting() -> usize {
    2
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec::from_toml(DEFAULT_GRAMMAR).expect("bundled grammar is valid")
    }
}

/// Checks bracket structure of a parse and returns its intent nesting depth.
///
/// A parse is one `[IN:` frame; intents hold only slots, slots hold words
/// and nested intents, and every frame closes with `]`.
pub fn validate_parse<S: AsRef<str>>(tokens: &[S]) -> std::result::Result<usize, String> {
    #[derive(PartialEq)]
    enum Frame {
        Intent,
        Slot,
    }
    let mut stack: Vec<Frame> = Vec::new();
    let mut depth = 0;
    let mut max_depth = 0;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if i > 0 && stack.is_empty() {
            return Err(format!("token {i} `{tok}` after the top-level frame closed"));
        }
        if tok.starts_with("[IN:") {
            if !(stack.is_empty() || stack.last() == Some(&Frame::Slot)) {
                return Err(format!("intent `{tok}` at position {i} must open the parse or sit in a slot"));
            }
            stack.push(Frame::Intent);
            depth += 1;
            max_depth = max_depth.max(depth);
        } else if tok.starts_with("[SL:") {
            if stack.last() != Some(&Frame::Intent) {
                return Err(format!("slot `{tok}` at position {i} is not inside an intent"));
            }
            stack.push(Frame::Slot);
        } else if tok == "]" {
            match stack.pop() {
                Some(Frame::Intent) => depth -= 1,
                Some(Frame::Slot) => {}
                None => return Err(format!("unbalanced `]` at position {i}")),
            }
        } else if tok.starts_with('[') {
            return Err(format!("unknown ontology token `{tok}`"));
        } else if stack.last() != Some(&Frame::Slot) {
            return Err(format!("word `{tok}` at position {i} is outside a slot"));
        }
    }
    if tokens.is_empty() {
        return Err("empty parse".into());
    }
    if !stack.is_empty() {
        return Err(format!("{} unclosed frame(s)", stack.len()));
    }
    Ok(max_depth)
}

/// `{name}` placeholders in order of first appearance.
fn placeholders(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in text.split_whitespace() {
        if let Some(name) = w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            if !out.iter().any(|o| o == name) {
                out.push(name.to_string());
            }
        }
    }
    out
}

fn expand(text: &str, bindings: &BTreeMap<&str, &str>) -> Vec<String> {
    text.split_whitespace()
        .flat_map(|w| {
            match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(name) => bindings[name].split_whitespace().map(String::from).collect::<Vec<_>>(),
                None => vec![w.to_string()],
            }
        })
        .collect()
}

impl GrammarSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GrammarSpec = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("grammar").to_string();
            Error::config(field, e.to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("grammar serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_nesting == 0 || self.max_nesting > 2 {
            return Err(Error::config("max_nesting", "must be 1 or 2"));
        }
        if self.templates.is_empty() {
            return Err(Error::config("templates", "at least one template is required"));
        }
        for (name, rate) in [
            ("channel.deletion_rate", self.channel.deletion_rate),
            ("channel.substitution_rate", self.channel.substitution_rate),
            ("split.valid_fraction", self.split.valid_fraction),
            ("split.test_fraction", self.split.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(name, format!("{rate} is not a probability")));
            }
        }
        if self.split.valid_fraction + self.split.test_fraction >= 1.0 {
            return Err(Error::config("split", "valid + test fractions leave no training data"));
        }
        for (i, c) in self.channel.confusions.iter().enumerate() {
            if c.weight.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::config(format!("channel.confusions[{i}].weight"), "must be positive"));
            }
            if c.source == c.replacement {
                return Err(Error::config(format!("channel.confusions[{i}]"), "self confusion"));
            }
        }
        for (name, words) in &self.fillers {
            if words.is_empty() || words.iter().any(|w| w.split_whitespace().next().is_none()) {
                return Err(Error::config(format!("fillers.{name}"), "needs non-empty entries"));
            }
        }
        for (i, t) in self.templates.iter().enumerate() {
            let u = placeholders(&t.utterance);
            let mut p = placeholders(&t.parse);
            if let Some(missing) = u.iter().find(|n| !self.fillers.contains_key(*n)) {
                return Err(Error::config(
                    format!("templates[{i}].utterance"),
                    format!("unknown filler `{missing}`"),
                ));
            }
            p.retain(|n| !u.contains(n));
            if let Some(extra) = p.first() {
                return Err(Error::config(
                    format!("templates[{i}].parse"),
                    format!("placeholder `{extra}` is not spoken in the utterance"),
                ));
            }
            let bindings: BTreeMap<&str, &str> = u
                .iter()
                .map(|n| (n.as_str(), self.fillers[n][0].as_str()))
                .collect();
            let parse = expand(&t.parse, &bindings);
            let depth = validate_parse(&parse)
                .map_err(|e| Error::config(format!("templates[{i}].parse"), e))?;
            if depth > self.max_nesting {
                return Err(Error::config(
                    format!("templates[{i}].parse"),
                    format!("nesting depth {depth} exceeds max_nesting {}", self.max_nesting),
                ));
            }
        }
        Ok(())
    }

    fn ontology(&self, prefix: &str) -> BTreeSet<String> {
        self.templates
            .iter()
            .flat_map(|t| t.parse.split_whitespace())
            .filter_map(|w| w.strip_prefix(prefix).map(String::from))
            .collect()
    }

    pub fn intents(&self) -> BTreeSet<String> {
        self.ontology("[IN:")
    }

    pub fn slots(&self) -> BTreeSet<String> {
        self.ontology("[SL:")
    }

    /// Every word and ontology token the grammar or channel can emit.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = BTreeSet::new();
        for t in &self.templates {
            for w in t.utterance.split_whitespace().chain(t.parse.split_whitespace()) {
                if !w.starts_with('{') {
                    v.insert(w.to_string());
                }
            }
        }
        for words in self.fillers.values() {
            v.extend(words.iter().flat_map(|w| w.split_whitespace().map(String::from)));
        }
        for c in &self.channel.confusions {
            v.insert(c.source.clone());
            v.insert(c.replacement.clone());
        }
        v
    }

    fn channel_table(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut table: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for c in &self.channel.confusions {
            table
                .entry(c.source.as_str())
                .or_default()
                .push((c.replacement.as_str(), c.weight));
        }
        table
    }

    /// Expected occurrences of each spoken word per generated example.
    pub fn expected_word_counts(&self) -> BTreeMap<&str, f64> {
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        let pt = 1.0 / self.templates.len() as f64;
        for t in &self.templates {
            for w in t.utterance.split_whitespace() {
                match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                    Some(name) => {
                        let entries = &self.fillers[name];
                        let pe = pt / entries.len() as f64;
                        for word in entries.iter().flat_map(|e| e.split_whitespace()) {
                            *counts.entry(word).or_default() += pe;
                        }
                    }
                    None => *counts.entry(w).or_default() += pt,
                }
            }
        }
        counts
    }

    /// Expected substitutions `source → replacement` per generated example,
    /// most frequent first.
    pub fn expected_confusions(&self) -> Vec<(&str, &str, f64)> {
        let words = self.expected_word_counts();
        let table = self.channel_table();
        let (d, s) = (self.channel.deletion_rate, self.channel.substitution_rate);
        let mut out: Vec<(&str, &str, f64)> = table
            .iter()
            .flat_map(|(src, reps)| {
                let total: f64 = reps.iter().map(|r| r.1).sum();
                let spoken = words.get(src).copied().unwrap_or(0.0);
                reps.iter().map(move |&(r, w)| (*src, r, spoken * (1.0 - d) * s * w / total))
            })
            .collect();
        out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1))));
        out
    }

    /// The confusion the channel is expected to produce most often.
    pub fn top_channel_confusion(&self) -> Option<(&str, &str)> {
        self.expected_confusions().first().map(|&(s, r, _)| (s, r))
    }

    /// Probability that the channel alters at least one word of `gold`.
    pub fn corruption_probability<S: AsRef<str>>(&self, gold: &[S]) -> f64 {
        let table = self.channel_table();
        let (d, s) = (self.channel.deletion_rate, self.channel.substitution_rate);
        let clean: f64 = gold
            .iter()
            .map(|w| {
                let sub = if table.contains_key(w.as_ref()) { s } else { 0.0 };
                (1.0 - d) * (1.0 - sub)
            })
            .product();
        1.0 - clean
    }

    /// Runs `gold` through the simulated recognizer.
    pub fn recognize<R: Rng + ?Sized>(&self, gold: &[String], rng: &mut R) -> Vec<String> {
        let table = self.channel_table();
        let mut out = Vec::with_capacity(gold.len());
        for w in gold {
            if rng.random::<f64>() < self.channel.deletion_rate {
                continue;
            }
            match table.get(w.as_str()) {
                Some(reps) if rng.random::<f64>() < self.channel.substitution_rate => {
                    let total: f64 = reps.iter().map(|r| r.1).sum();
                    let mut pick = rng.random::<f64>() * total;
                    let mut chosen = reps[reps.len() - 1].0;
                    for (r, wgt) in reps {
                        if pick < *wgt {
                            chosen = r;
                            break;
                        }
                        pick -= wgt;
                    }
                    out.push(chosen.to_string());
                }
                _ => out.push(w.clone()),
            }
        }
        out
    }

    fn split_of(&self, template: usize, gold: &[String]) -> Split {
        let key = format!("{template}\u{1f}{}", gold.join(" "));
        let bucket = (fnv1a(key.as_bytes()) % 10_000) as f64 / 10_000.0;
        if bucket < self.split.test_fraction {
            Split::Test
        } else if bucket < self.split.test_fraction + self.split.valid_fraction {
            Split::Valid
        } else {
            Split::Train
        }
    }

    /// Samples `n` examples: uniform template, uniform fillers, then the recognizer channel.
    /// The split is a hash of the template instance, so splits never share an instance.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        if n == 0 {
            return Err(Error::usage("generate needs n ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let ti = rng.random_range(0..self.templates.len());
            let t = &self.templates[ti];
            let mut bindings: BTreeMap<&str, &str> = BTreeMap::new();
            for name in placeholders(&t.utterance) {
                let key = self.fillers.get_key_value(&name).expect("validated").0.as_str();
                let choice = self.fillers[key].choose(&mut rng).expect("non-empty");
                bindings.insert(key, choice.as_str());
            }
            let gold = expand(&t.utterance, &bindings);
            let parse = expand(&t.parse, &bindings);
            let hyp = self.recognize(&gold, &mut rng);
            let split = self.split_of(ti, &gold);
            out.push(Example {
                had_asr_error: hyp != gold,
                gold_words: gold,
                hyp_words: hyp,
                parse,
                split,
            });
        }
        Ok(out)
    }
}
