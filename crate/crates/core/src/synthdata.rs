//! Synthetic multi-modality corpus: length-preserving source-target pairs
//! where each target applies one of several parity-dependent offset rules,
//! so the set of valid outputs per source is exactly controllable.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One output modality: add `odd_offset` at odd (1-indexed) positions and
/// `even_offset` at even positions.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ModalityRule {
    pub id: String,
    pub odd_offset: i64,
    pub even_offset: i64,
}

/// Generation parameters for one corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub seq_len: usize,
    /// Inclusive `[lo, hi]` range source values are drawn from.
    pub value_range: (i64, i64),
    pub rules: Vec<ModalityRule>,
    /// Optional modality-id remapping applied by `merge-modalities`.
    #[serde(default)]
    pub merge_map: Option<BTreeMap<String, String>>,
    pub seed: u64,
}

impl DatasetSpec {
    /// Shrunk configuration preserving the modality structure at ~12x
    /// smaller vocabulary.
    pub fn desk_scale(seed: u64) -> Self {
        DatasetSpec {
            num_train: 20_000,
            num_val: 2_000,
            num_test: 2_000,
            seq_len: 16,
            value_range: (1, 100),
            rules: vec![
                ModalityRule { id: "I".into(), odd_offset: 500, even_offset: 1000 },
                ModalityRule { id: "II".into(), odd_offset: 1000, even_offset: 500 },
                ModalityRule { id: "III".into(), odd_offset: 1500, even_offset: 2000 },
                ModalityRule { id: "IV".into(), odd_offset: 2000, even_offset: 1500 },
            ],
            merge_map: None,
            seed,
        }
    }

    /// Full-size configuration: length 32, values 1..=5000, 100k/5k/5k pairs.
    pub fn paper_scale(seed: u64) -> Self {
        DatasetSpec {
            num_train: 100_000,
            num_val: 5_000,
            num_test: 5_000,
            seq_len: 32,
            value_range: (1, 5000),
            rules: vec![
                ModalityRule { id: "I".into(), odd_offset: 5_000, even_offset: 10_000 },
                ModalityRule { id: "II".into(), odd_offset: 10_000, even_offset: 5_000 },
                ModalityRule { id: "III".into(), odd_offset: 15_000, even_offset: 20_000 },
                ModalityRule { id: "IV".into(), odd_offset: 20_000, even_offset: 15_000 },
            ],
            merge_map: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        let (lo, hi) = self.value_range;
        if lo > hi {
            return Err(Error::Config(format!("empty value_range [{lo}, {hi}]")));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("at least one modality rule required".into()));
        }
        let mut seen_ids = std::collections::HashSet::new();
        let mut seen_offsets = std::collections::HashSet::new();
        for r in &self.rules {
            if r.odd_offset < 0 || r.even_offset < 0 {
                return Err(Error::Config(format!("rule {}: offsets must be non-negative", r.id)));
            }
            if !seen_ids.insert(r.id.clone()) {
                return Err(Error::Config(format!("duplicate rule id {}", r.id)));
            }
            if !seen_offsets.insert((r.odd_offset, r.even_offset)) {
                return Err(Error::Config(format!(
                    "rule {}: offset pair ({}, {}) duplicates another rule",
                    r.id, r.odd_offset, r.even_offset
                )));
            }
        }
        if let Some(map) = &self.merge_map {
            for (k, v) in map {
                if self.rule(k).is_none() {
                    return Err(Error::Config(format!("merge_map key {k} is not a rule id")));
                }
                if self.rule(v).is_none() {
                    return Err(Error::Config(format!("merge_map value {v} is not a rule id")));
                }
            }
        }
        Ok(())
    }

    pub fn rule(&self, id: &str) -> Option<&ModalityRule> {
        self.rules.iter().find(|r| r.id == id)
    }
}

/// One aligned pair; `source` and `target` hold vocabulary values (each
/// integer is one atomic token), `modality` names the rule that produced
/// the target.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SequencePair {
    pub source: Vec<i64>,
    pub target: Vec<i64>,
    pub modality: String,
}

/// Reserved token ids; value tokens start at `NUM_SPECIALS`.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<mask>"];

/// Bijective integer-value <-> token-id mapping with reserved specials.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    values: Vec<i64>,
    value_to_id: HashMap<i64, usize>,
}

impl Vocabulary {
    /// Covers the source range plus every rule-shifted value.
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        let (lo, hi) = spec.value_range;
        let mut values: Vec<i64> = (lo..=hi).collect();
        for r in &spec.rules {
            values.extend((lo..=hi).map(|v| v + r.odd_offset));
            values.extend((lo..=hi).map(|v| v + r.even_offset));
        }
        values.sort_unstable();
        values.dedup();
        Self::from_values(values)
    }

    pub fn from_values(values: Vec<i64>) -> Self {
        let value_to_id =
            values.iter().enumerate().map(|(i, &v)| (v, NUM_SPECIALS + i)).collect();
        Vocabulary { values, value_to_id }
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.values.len()
    }

    pub fn id_of_value(&self, v: i64) -> Option<usize> {
        self.value_to_id.get(&v).copied()
    }

    pub fn value_of_id(&self, id: usize) -> Option<i64> {
        if id < NUM_SPECIALS {
            None
        } else {
            self.values.get(id - NUM_SPECIALS).copied()
        }
    }

    pub fn encode(&self, values: &[i64]) -> Result<Vec<usize>> {
        values
            .iter()
            .map(|&v| {
                self.id_of_value(v)
                    .ok_or_else(|| Error::Data(format!("value {v} not in vocabulary")))
            })
            .collect()
    }

    /// Token ids back to values; specials decode to `None`.
    pub fn decode(&self, ids: &[usize]) -> Vec<Option<i64>> {
        ids.iter().map(|&id| self.value_of_id(id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct VocabFile<'a> {
            specials: [&'static str; NUM_SPECIALS],
            values: &'a [i64],
        }
        let f = fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), &VocabFile { specials: SPECIAL_NAMES, values: &self.values })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct VocabFile {
            #[allow(dead_code)]
            specials: Vec<String>,
            values: Vec<i64>,
        }
        let f = fs::File::open(path)?;
        let vf: VocabFile = serde_json::from_reader(BufReader::new(f))?;
        if vf.specials.len() != NUM_SPECIALS {
            return Err(Error::Data(format!("vocabulary expects {NUM_SPECIALS} specials")));
        }
        Ok(Self::from_values(vf.values))
    }
}

/// Applies a modality rule position-wise; positions are 1-indexed, so the
/// first token is odd.
pub fn apply_rule(source: &[i64], rule: &ModalityRule) -> Vec<i64> {
    source
        .iter()
        .enumerate()
        .map(|(i, &v)| if (i + 1) % 2 == 1 { v + rule.odd_offset } else { v + rule.even_offset })
        .collect()
}

/// Generated corpus splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SequencePair>,
    pub val: Vec<SequencePair>,
    pub test: Vec<SequencePair>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SequencePair]> {
        match name {
            "train" => Ok(&self.train),
            "val" | "valid" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Draws the corpus deterministically: pair `i` uses the spec seed with the
/// RNG stream set to `i`, drawing `seq_len` source values then the rule
/// index. Splits are consecutive stream ranges (train, then val, then test).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = Vocabulary::from_spec(spec);
    let (lo, hi) = spec.value_range;
    let total = spec.num_train + spec.num_val + spec.num_test;
    let mut pairs = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let source: Vec<i64> = (0..spec.seq_len).map(|_| rng.gen_range(lo..=hi)).collect();
        let rule = &spec.rules[rng.gen_range(0..spec.rules.len())];
        let target = apply_rule(&source, rule);
        for &v in &target {
            if vocab.id_of_value(v).is_none() {
                return Err(Error::Data(format!("generated value {v} outside vocabulary")));
            }
        }
        pairs.push(SequencePair { source, target, modality: rule.id.clone() });
    }
    let mut it = pairs.into_iter();
    let train: Vec<_> = it.by_ref().take(spec.num_train).collect();
    let val: Vec<_> = it.by_ref().take(spec.num_val).collect();
    let test: Vec<_> = it.collect();
    Ok(Dataset { train, val, test })
}

/// Rewrites each pair whose modality appears in `merge_map` by regenerating
/// its target from the source under the mapped rule.
pub fn merge_modalities(
    pairs: &[SequencePair],
    merge_map: &BTreeMap<String, String>,
    rules: &[ModalityRule],
) -> Result<Vec<SequencePair>> {
    let rule_of = |id: &str| rules.iter().find(|r| r.id == id);
    for (k, v) in merge_map {
        if rule_of(k).is_none() || rule_of(v).is_none() {
            return Err(Error::Data(format!("merge_map entry {k} -> {v} references unknown rule id")));
        }
    }
    pairs
        .iter()
        .map(|p| {
            if rule_of(&p.modality).is_none() {
                return Err(Error::Data(format!("pair has unknown modality id {}", p.modality)));
            }
            match merge_map.get(&p.modality) {
                None => Ok(p.clone()),
                Some(to) => {
                    let rule = rule_of(to).expect("validated above");
                    Ok(SequencePair {
                        source: p.source.clone(),
                        target: apply_rule(&p.source, rule),
                        modality: to.clone(),
                    })
                }
            }
        })
        .collect()
}

fn write_jsonl(path: &Path, pairs: &[SequencePair]) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SequencePair>> {
    let f = fs::File::open(path)?;
    let mut pairs = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line)?);
    }
    Ok(pairs)
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl`, `vocab.json` and the
/// spec snapshot `dataspec.json` into `dir`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, ds: &Dataset, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &ds.train)?;
    write_jsonl(&dir.join("valid.jsonl"), &ds.val)?;
    write_jsonl(&dir.join("test.jsonl"), &ds.test)?;
    vocab.save(&dir.join("vocab.json"))?;
    let f = fs::File::create(dir.join("dataspec.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), spec)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Dataset, Vocabulary)> {
    let f = fs::File::open(dir.join("dataspec.json"))?;
    let spec: DatasetSpec = serde_json::from_reader(BufReader::new(f))?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    let ds = Dataset {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("valid.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    };
    Ok((spec, ds, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, odd: i64, even: i64) -> ModalityRule {
        ModalityRule { id: id.into(), odd_offset: odd, even_offset: even }
    }

    #[test]
    fn apply_rule_matches_worked_examples() {
        let src = vec![52, 1, 937, 1234];
        let r1 = rule("I", 5000, 10000);
        assert_eq!(apply_rule(&src, &r1), vec![5052, 10001, 5937, 11234]);
        let r4 = rule("IV", 20000, 15000);
        assert_eq!(apply_rule(&src, &r4), vec![20052, 15001, 20937, 16234]);
    }

    #[test]
    fn apply_rule_zero_offsets_is_identity() {
        let src = vec![7, 8, 9];
        assert_eq!(apply_rule(&src, &rule("Z", 0, 0)), src);
    }

    #[test]
    fn generated_corpus_is_valid_and_deterministic() {
        let spec = DatasetSpec {
            num_train: 500,
            num_val: 50,
            num_test: 50,
            seq_len: 16,
            value_range: (1, 100),
            rules: DatasetSpec::desk_scale(0).rules,
            merge_map: None,
            seed: 11,
        };
        let ds = generate_dataset(&spec).unwrap();
        let vocab = Vocabulary::from_spec(&spec);
        assert_eq!(ds.train.len(), 500);
        assert_eq!(ds.val.len(), 50);
        assert_eq!(ds.test.len(), 50);
        for p in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert_eq!(p.source.len(), p.target.len());
            let r = spec.rule(&p.modality).unwrap();
            assert_eq!(apply_rule(&p.source, r), p.target);
            assert!(vocab.encode(&p.source).is_ok());
            assert!(vocab.encode(&p.target).is_ok());
        }
        let ds2 = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train, ds2.train);
        assert_eq!(ds.val, ds2.val);
        assert_eq!(ds.test, ds2.test);
    }

    #[test]
    fn single_rule_corpus_has_one_modality() {
        let spec = DatasetSpec {
            num_train: 200,
            num_val: 0,
            num_test: 0,
            seq_len: 4,
            value_range: (1, 9),
            rules: vec![rule("I", 10, 20)],
            merge_map: None,
            seed: 5,
        };
        let ds = generate_dataset(&spec).unwrap();
        assert!(ds.train.iter().all(|p| p.modality == "I"));
    }

    #[test]
    fn merge_rewrites_targets_under_mapped_rule() {
        let spec = DatasetSpec {
            num_train: 2000,
            num_val: 0,
            num_test: 0,
            seq_len: 6,
            value_range: (1, 50),
            rules: DatasetSpec::desk_scale(0).rules,
            merge_map: None,
            seed: 3,
        };
        let ds = generate_dataset(&spec).unwrap();
        let map: BTreeMap<String, String> =
            [("I".to_string(), "II".to_string()), ("III".to_string(), "IV".to_string())].into();
        let merged = merge_modalities(&ds.train, &map, &spec.rules).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (orig, m) in ds.train.iter().zip(&merged) {
            *counts.entry(m.modality.as_str()).or_default() += 1;
            assert_eq!(m.source, orig.source);
            let r = spec.rule(&m.modality).unwrap();
            assert_eq!(apply_rule(&m.source, r), m.target);
            if orig.modality == "I" {
                assert_eq!(m.modality, "II");
            }
        }
        assert_eq!(counts.len(), 2, "exactly two modalities after merge");
        let frac = counts["II"] as f64 / merged.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "II share {frac}");
    }

    #[test]
    fn empty_merge_map_is_identity() {
        let spec = DatasetSpec::desk_scale(1);
        let pairs = vec![SequencePair { source: vec![1, 2], target: vec![501, 1002], modality: "I".into() }];
        let out = merge_modalities(&pairs, &BTreeMap::new(), &spec.rules).unwrap();
        assert_eq!(out, pairs);
    }

    #[test]
    fn merge_unknown_modality_errors() {
        let spec = DatasetSpec::desk_scale(1);
        let map: BTreeMap<String, String> = [("V".to_string(), "I".to_string())].into();
        assert!(merge_modalities(&[], &map, &spec.rules).is_err());
    }

    #[test]
    fn vocabulary_roundtrip_and_specials() {
        let spec = DatasetSpec::desk_scale(0);
        let vocab = Vocabulary::from_spec(&spec);
        // sources 1..=100 plus four offset bands of 100 each
        assert_eq!(vocab.size(), NUM_SPECIALS + 100 + 4 * 100);
        let ids = vocab.encode(&[1, 100, 501, 2100]).unwrap();
        assert!(ids.iter().all(|&id| id >= NUM_SPECIALS));
        assert_eq!(vocab.decode(&ids), vec![Some(1), Some(100), Some(501), Some(2100)]);
        assert_eq!(vocab.decode(&[PAD, BOS, EOS, MASK]), vec![None, None, None, None]);
        assert!(vocab.encode(&[12345]).is_err());
    }

    #[test]
    fn serialized_corpus_is_byte_identical_across_runs() {
        let mut spec = DatasetSpec::desk_scale(42);
        spec.num_train = 300;
        spec.num_val = 30;
        spec.num_test = 30;
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        for dir in [&dir1, &dir2] {
            let ds = generate_dataset(&spec).unwrap();
            let vocab = Vocabulary::from_spec(&spec);
            save_dataset(dir.path(), &spec, &ds, &vocab).unwrap();
        }
        for name in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json", "dataspec.json"] {
            let a = fs::read(dir1.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn paper_scale_modality_proportions_are_balanced() {
        // full-size draw: four rules, each within 25% +/- 2%
        let spec = DatasetSpec::paper_scale(20);
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 100_000);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &ds.train {
            *counts.entry(p.modality.as_str()).or_default() += 1;
        }
        for (id, c) in counts {
            let pct = 100.0 * c as f64 / ds.train.len() as f64;
            assert!((pct - 25.0).abs() < 2.0, "modality {id}: {pct}%");
        }
    }
}
