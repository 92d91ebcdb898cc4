//! Training-time corruption of first-pass hypotheses.
//!
//! Two operators, deletion and dictionary-driven substitution, each pick how
//! many positions to touch from `Binomial(len, p)` and then choose that many
//! distinct positions uniformly. Two meta-operations combine them: `sampling`
//! applies one operator chosen uniformly per call, `sequential` applies
//! substitution then deletion. Noise only ever touches the text channel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMode {
    Sampling,
    Sequential,
    SingleDel,
    SingleSubs,
    None,
}

impl std::str::FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sampling" => MetaMode::Sampling,
            "sequential" => MetaMode::Sequential,
            "single-del" | "del" => MetaMode::SingleDel,
            "single-subs" | "subs" => MetaMode::SingleSubs,
            "none" => MetaMode::None,
            other => return Err(Error::config("meta", format!("unknown noise mode `{other}`"))),
        })
    }
}

/// Noise configuration. The defaults are the tuned values for the
/// small-ASR regime with the sampling meta-operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub deletion_p: f64,
    pub substitution_p: f64,
    pub meta: MetaMode,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            deletion_p: 0.0026,
            substitution_p: 0.0882,
            meta: MetaMode::Sampling,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            deletion_p: 0.0,
            substitution_p: 0.0,
            meta: MetaMode::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [("deletion_p", self.deletion_p), ("substitution_p", self.substitution_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} is not a probability")));
            }
        }
        Ok(())
    }

    /// True when no configuration of the RNG can change the input.
    pub fn is_identity(&self) -> bool {
        match self.meta {
            MetaMode::None => true,
            MetaMode::SingleDel => self.deletion_p == 0.0,
            MetaMode::SingleSubs => self.substitution_p == 0.0,
            MetaMode::Sampling | MetaMode::Sequential => {
                self.deletion_p == 0.0 && self.substitution_p == 0.0
            }
        }
    }
}

/// Observed `source → replacement` substitution counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionDictionary {
    map: BTreeMap<String, Vec<(String, u64)>>,
}

const TSV_HEADER: &str = "source\treplacement\tcount";

impl ConfusionDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` observations of `source` being replaced by `replacement`.
    /// Self pairs and zero counts are ignored.
    pub fn add(&mut self, source: &str, replacement: &str, count: u64) {
        if source == replacement || count == 0 {
            return;
        }
        let entries = self.map.entry(source.to_string()).or_default();
        match entries.iter_mut().find(|(r, _)| r == replacement) {
            Some((_, c)) => *c += count,
            None => entries.push((replacement.to_string(), count)),
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.map.contains_key(word)
    }

    /// Replacements of `word`, most frequent first.
    pub fn replacements(&self, word: &str) -> &[(String, u64)] {
        self.map.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self, word: &str) -> u64 {
        self.replacements(word).iter().map(|(_, c)| c).sum()
    }

    /// All `(source, replacement, count)` triples in file order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.map
            .iter()
            .flat_map(|(s, rs)| rs.iter().map(move |(r, c)| (s.as_str(), r.as_str(), *c)))
    }

    /// Pair with the largest count; ties resolve to the first in file order.
    pub fn top_pair(&self) -> Option<(&str, &str, u64)> {
        self.entries()
            .fold(None, |best: Option<(&str, &str, u64)>, e| match best {
                Some(b) if b.2 >= e.2 => Some(b),
                _ => Some(e),
            })
    }

    /// Draws a replacement proportionally to its count.
    pub fn sample<R: Rng + ?Sized>(&self, word: &str, rng: &mut R) -> Option<&str> {
        let reps = self.map.get(word)?;
        let total: u64 = reps.iter().map(|(_, c)| c).sum();
        let mut pick = rng.random_range(0..total);
        for (r, c) in reps {
            if pick < *c {
                return Some(r);
            }
            pick -= c;
        }
        unreachable!("pick < total")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for (s, r, c) in self.entries() {
            let _ = writeln!(out, "{s}\t{r}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut dict = ConfusionDictionary::new();
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() || (i == 0 && line == TSV_HEADER) {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(lineno, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let count: u64 = fields[2]
                .parse()
                .map_err(|e| err(lineno, format!("bad count `{}`: {e}", fields[2])))?;
            if count == 0 {
                return Err(err(lineno, "count must be positive".into()));
            }
            if fields[0] == fields[1] {
                return Err(err(lineno, format!("self pair `{}`", fields[0])));
            }
            dict.add(fields[0], fields[1], count);
        }
        Ok(dict)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text, path)
    }
}

/// Distinct positions chosen by a `Binomial(len, p)` count, in ascending order.
fn pick_positions<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<usize> {
    if len == 0 || p <= 0.0 {
        return Vec::new();
    }
    let n = if p >= 1.0 {
        len
    } else {
        Binomial::new(len as u64, p).expect("p validated").sample(rng) as usize
    };
    let mut picked = index::sample(rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Removes a binomially sized uniform subset of positions. No placeholder is left behind.
pub fn delete_noise<R: Rng + ?Sized>(tokens: &[String], p: f64, rng: &mut R) -> Vec<String> {
    let drop = pick_positions(tokens.len(), p, rng);
    let mut drop = drop.into_iter().peekable();
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            if drop.peek() == Some(i) {
                drop.next();
                false
            } else {
                true
            }
        })
        .map(|(_, t)| t.clone())
        .collect()
}

/// Replaces selected in-dictionary words by a count-weighted confusion.
/// Selected words missing from the dictionary are left unchanged.
pub fn substitute_noise<R: Rng + ?Sized>(
    tokens: &[String],
    p: f64,
    dict: &ConfusionDictionary,
    rng: &mut R,
) -> Vec<String> {
    let mut out = tokens.to_vec();
    for i in pick_positions(tokens.len(), p, rng) {
        if let Some(r) = dict.sample(&tokens[i], rng) {
            out[i] = r.to_string();
        }
    }
    out
}

pub fn apply_meta<R: Rng + ?Sized>(
    tokens: &[String],
    spec: &NoiseSpec,
    dict: &ConfusionDictionary,
    rng: &mut R,
) -> Vec<String> {
    match spec.meta {
        MetaMode::None => tokens.to_vec(),
        MetaMode::SingleDel => delete_noise(tokens, spec.deletion_p, rng),
        MetaMode::SingleSubs => substitute_noise(tokens, spec.substitution_p, dict, rng),
        MetaMode::Sampling => {
            if rng.random_bool(0.5) {
                delete_noise(tokens, spec.deletion_p, rng)
            } else {
                substitute_noise(tokens, spec.substitution_p, dict, rng)
            }
        }
        MetaMode::Sequential => {
            let subbed = substitute_noise(tokens, spec.substitution_p, dict, rng);
            delete_noise(&subbed, spec.deletion_p, rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlignOp {
    Match(String),
    Substitute { reference: String, hypothesis: String },
    /// Reference word missing from the hypothesis.
    Delete(String),
    /// Hypothesis word absent from the reference.
    Insert(String),
}

/// Minimum edit distance alignment with unit costs. On ties the backtrace
/// prefers a substitution over an insertion/deletion pair.
pub fn align(reference: &[String], hypothesis: &[String]) -> Vec<AlignOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    AlignOp::Match(reference[i - 1].clone())
                } else {
                    AlignOp::Substitute {
                        reference: reference[i - 1].clone(),
                        hypothesis: hypothesis[j - 1].clone(),
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(AlignOp::Delete(reference[i - 1].clone()));
            i -= 1;
        } else {
            ops.push(AlignOp::Insert(hypothesis[j - 1].clone()));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Counts aligned substitutions `reference word → hypothesis word` over a corpus
/// of `(hypothesis, reference)` pairs.
pub fn build_confusions(pairs: &[(Vec<String>, Vec<String>)]) -> Result<ConfusionDictionary> {
    if pairs.is_empty() {
        return Err(Error::usage("build_confusions needs a non-empty corpus"));
    }
    let mut dict = ConfusionDictionary::new();
    for (hyp, reference) in pairs {
        for op in align(reference, hyp) {
            if let AlignOp::Substitute {
                reference,
                hypothesis,
            } = op
            {
                dict.add(&reference, &hypothesis, 1);
            }
        }
    }
    Ok(dict)
}
