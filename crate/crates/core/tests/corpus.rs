mod common;

use delib_core::corpus::{self, GrammarSpec, Split};
use delib_core::noising::{build_confusions, ConfusionDictionary};

#[test]
fn asr_error_fraction_matches_channel_analytics() {
    let g = GrammarSpec::default();
    let data = g.generate(10_000, 17).unwrap();
    let observed = data.iter().filter(|e| e.had_asr_error).count() as f64 / data.len() as f64;
    let expected = data.iter().map(|e| g.corruption_probability(&e.gold_words)).sum::<f64>() / data.len() as f64;
    assert!((observed - expected).abs() < 0.02, "{observed} vs {expected}");
    assert!((0.2..0.3).contains(&observed), "{observed}");
}

#[test]
fn extracted_dictionary_recovers_top_channel_confusion() {
    let g = GrammarSpec::default();
    let data = g.generate(10_000, 5).unwrap();
    let pairs: Vec<_> = corpus::of_split(&data, Split::Train)
        .into_iter()
        .map(|e| (e.hyp_words, e.gold_words))
        .collect();
    let dict = build_confusions(&pairs).unwrap();
    let (src, rep, _) = dict.top_pair().unwrap();
    assert_eq!(Some((src, rep)), g.top_channel_confusion());
}

#[test]
fn error_free_corpus_gives_empty_dictionary() {
    let mut g = GrammarSpec::default();
    g.channel.deletion_rate = 0.0;
    g.channel.substitution_rate = 0.0;
    let data = g.generate(300, 1).unwrap();
    assert!(data.iter().all(|e| !e.had_asr_error));
    let pairs: Vec<_> = data.into_iter().map(|e| (e.hyp_words, e.gold_words)).collect();
    let dict = build_confusions(&pairs).unwrap();
    assert!(dict.is_empty());
    assert_eq!(dict.to_tsv().lines().count(), 1);
}

#[test]
fn dataset_and_dictionary_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = GrammarSpec::default().generate(500, 9).unwrap();
    let written = corpus::save_splits(&data, dir.path()).unwrap();
    assert_eq!(written.len(), 3);
    let mut back = corpus::load(dir.path()).unwrap();
    let mut orig = data.clone();
    let key = |e: &delib_core::Example| (e.split.as_str(), e.gold_words.join(" "), e.hyp_words.join(" "));
    back.sort_by_key(key);
    orig.sort_by_key(key);
    assert_eq!(back, orig);

    let one = dir.path().join("all.jsonl");
    corpus::save(&data, &one).unwrap();
    assert_eq!(corpus::load(&one).unwrap(), data);

    let pairs: Vec<_> = data.iter().map(|e| (e.hyp_words.clone(), e.gold_words.clone())).collect();
    let dict = build_confusions(&pairs).unwrap();
    let tsv = dir.path().join("conf.tsv");
    dict.save(&tsv).unwrap();
    assert_eq!(ConfusionDictionary::load(&tsv).unwrap(), dict);
}

#[test]
fn same_seed_same_bytes() {
    let g = GrammarSpec::default();
    let a = corpus::to_jsonl(&g.generate(400, 3).unwrap());
    let b = corpus::to_jsonl(&g.generate(400, 3).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, corpus::to_jsonl(&g.generate(400, 4).unwrap()));
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let good = corpus::to_jsonl(&GrammarSpec::default().generate(2, 1).unwrap());
    let text = format!("{good}{{\"gold\": 3}}\n");
    let err = corpus::from_jsonl(&text, std::path::Path::new("d.jsonl")).unwrap_err().to_string();
    assert!(err.starts_with("d.jsonl:3:"), "{err}");
}
