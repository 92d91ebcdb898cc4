//! Synthetic spoken-parsing corpus: a compositional grammar, a simulated
//! recognizer channel, dataset files and the simulated first-pass embeddings.

mod first_pass;
mod grammar;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub use first_pass::{FirstPassConfig, FirstPassOutput, FirstPassSim};
pub use grammar::{validate_parse, ChannelSpec, Confusion, GrammarSpec, SplitSpec, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" | "eval" => Ok(Split::Test),
            _ => Err(Error::usage(format!("unknown split `{s}`"))),
        }
    }
}

/// One utterance: what was said, what the recognizer heard, and the target parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub gold_words: Vec<String>,
    pub hyp_words: Vec<String>,
    pub parse: Vec<String>,
    pub had_asr_error: bool,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Record {
    gold: String,
    hyp: String,
    parse: String,
    split: Split,
    asr_error: bool,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl Example {
    fn to_record(&self) -> Record {
        Record {
            gold: self.gold_words.join(" "),
            hyp: self.hyp_words.join(" "),
            parse: self.parse.join(" "),
            split: self.split,
            asr_error: self.had_asr_error,
        }
    }

    fn from_record(r: Record) -> std::result::Result<Self, String> {
        let ex = Example {
            gold_words: words(&r.gold),
            hyp_words: words(&r.hyp),
            parse: words(&r.parse),
            had_asr_error: r.asr_error,
            split: r.split,
        };
        if ex.gold_words.is_empty() {
            return Err("empty `gold`".into());
        }
        validate_parse(&ex.parse).map_err(|e| format!("`parse`: {e}"))?;
        if ex.had_asr_error != (ex.hyp_words != ex.gold_words) {
            return Err("`asr_error` disagrees with gold/hyp".into());
        }
        Ok(ex)
    }
}

/// One JSON object per line.
pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&ex.to_record()).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL; `path` only labels errors. Blank lines are skipped.
pub fn from_jsonl(text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(Example::from_record(rec).map_err(err)?);
    }
    Ok(out)
}

pub fn save(examples: &[Example], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(examples).as_bytes())
}

/// Reads a JSONL file, or the `train/valid/test.jsonl` files of a directory.
pub fn load(path: &Path) -> Result<Vec<Example>> {
    if path.is_dir() {
        let mut out = Vec::new();
        for split in Split::ALL {
            let file = path.join(format!("{split}.jsonl"));
            if file.exists() {
                out.extend(load(&file)?);
            }
        }
        return Ok(out);
    }
    from_jsonl(&std::fs::read_to_string(path)?, path)
}

/// Writes one `<split>.jsonl` per split under `dir`.
pub fn save_splits(examples: &[Example], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for split in Split::ALL {
        let part: Vec<Example> = examples.iter().filter(|e| e.split == split).cloned().collect();
        let p = dir.join(format!("{split}.jsonl"));
        save(&part, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn of_split(examples: &[Example], split: Split) -> Vec<Example> {
    examples.iter().filter(|e| e.split == split).cloned().collect()
}
