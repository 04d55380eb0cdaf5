//! Desk-scale stand-in for a hyperlink corpus.
//!
//! Every entity has a surface name, a few latent types and two private
//! "fact" words. A context sentence mixes filler words, one cue word per
//! type of the entity, sometimes a fact word, and the name as the mention.
//! With unique names an unmasked mention identifies its entity outright,
//! while the rest of the sentence only reveals types (and occasionally a
//! fact), which is what makes the mask rate matter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::records::{write_jsonl, AliasRecord, CategoryRecord, CorpusRecord, QaRecord, TypingRecord};
use crate::error::{RelicError, Result};
use crate::neural::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_types: usize,
    pub types_per_entity: usize,
    pub contexts_per_entity: usize,
    pub name_uniqueness: bool,
    pub seed: u64,
    /// Probability that a context also carries one of the entity's fact words.
    pub fact_rate: f64,
    pub fillers_per_context: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_entities: 200,
            n_types: 10,
            types_per_entity: 2,
            contexts_per_entity: 20,
            name_uniqueness: true,
            seed: 0,
            fact_rate: 0.3,
            fillers_per_context: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_entities", self.n_entities),
            ("n_types", self.n_types),
            ("types_per_entity", self.types_per_entity),
            ("contexts_per_entity", self.contexts_per_entity),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(RelicError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.types_per_entity > self.n_types {
            return Err(RelicError::InvalidArgument(format!(
                "types_per_entity {} exceeds n_types {}",
                self.types_per_entity, self.n_types
            )));
        }
        if !(0.0..=1.0).contains(&self.fact_rate) {
            return Err(RelicError::InvalidArgument(format!("fact_rate {}", self.fact_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub corpus: Vec<CorpusRecord>,
    pub labels: Vec<TypingRecord>,
    pub categories: Vec<CategoryRecord>,
    pub qa: Vec<QaRecord>,
    pub aliases: Vec<AliasRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SyntheticFiles {
    pub corpus: PathBuf,
    pub labels: PathBuf,
    pub categories: PathBuf,
    pub qa: PathBuf,
    pub aliases: PathBuf,
}

const FILLER: [&str; 40] = [
    "the", "of", "and", "in", "a", "was", "for", "with", "on", "by", "at", "from", "his", "her",
    "an", "which", "also", "after", "during", "where", "when", "as", "known", "later", "first",
    "new", "played", "born", "became", "one", "two", "many", "several", "other", "early",
    "former", "major", "local", "famous", "recent",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ten", "vu", "zor", "bel", "qui", "dra", "sen", "pho", "gan", "tri",
    "mel", "xo",
];

const CUES_PER_TYPE: usize = 3;

fn pseudo_name(mut n: usize) -> String {
    let mut s = String::new();
    for _ in 0..3 {
        s.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    while n > 0 {
        s.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    s
}

pub fn entity_id(i: usize) -> String {
    format!("E{i:05}")
}

fn type_name(t: usize) -> String {
    format!("type_{t:02}")
}

fn cue_word(t: usize, c: usize) -> String {
    format!("cue{t:02}{}", (b'a' + c as u8) as char)
}

fn fact_word(e: usize, f: usize) -> String {
    format!("fact{e:05}{}", (b'a' + f as u8) as char)
}

/// Build the dataset in memory. Deterministic in `spec`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = RngState::new(spec.seed);
    let n = spec.n_entities;

    let names: Vec<String> = if spec.name_uniqueness {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm.into_iter().map(pseudo_name).collect()
    } else {
        let pool = (n / 3).max(1);
        (0..n).map(|_| pseudo_name(rng.below(pool))).collect()
    };
    let types: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut t = index::sample(&mut rng, spec.n_types, spec.types_per_entity).into_vec();
            t.sort_unstable();
            t
        })
        .collect();

    let mut corpus = Vec::with_capacity(n * spec.contexts_per_entity);
    for e in 0..n {
        for c in 0..spec.contexts_per_entity {
            let mut words: Vec<String> = (0..spec.fillers_per_context)
                .map(|_| FILLER[rng.below(FILLER.len())].to_string())
                .collect();
            for &t in &types[e] {
                words.push(cue_word(t, rng.below(CUES_PER_TYPE)));
            }
            if rng.uniform() < spec.fact_rate {
                words.push(fact_word(e, rng.below(2)));
            }
            words.shuffle(&mut rng);
            let pos = rng.below(words.len() + 1);
            let before: usize = words[..pos].iter().map(|w| w.chars().count() + 1).sum();
            words.insert(pos, names[e].clone());
            let start = before;
            let end = start + names[e].chars().count();
            corpus.push(CorpusRecord {
                text: words.join(" "),
                mention_span: [start, end],
                entity_id: entity_id(e),
                doc_id: Some(format!("doc{e:05}_{c:03}")),
            });
        }
    }

    let labels = (0..n)
        .map(|e| TypingRecord {
            entity_id: entity_id(e),
            types: types[e].iter().map(|t| type_name(*t)).collect(),
        })
        .collect();

    let mut members: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (e, ts) in types.iter().enumerate() {
        for t in ts {
            members.entry(*t).or_default().push(entity_id(e));
        }
    }
    let categories = members
        .into_iter()
        .map(|(t, members)| CategoryRecord {
            category: type_name(t),
            members,
        })
        .collect();

    let qa = (0..n)
        .map(|e| {
            let mut words = vec!["which".to_string()];
            for &t in &types[e] {
                words.push(cue_word(t, e % CUES_PER_TYPE));
            }
            words.push(fact_word(e, 0));
            words.push(fact_word(e, 1));
            QaRecord {
                question: words.join(" "),
                answer_entity: entity_id(e),
            }
        })
        .collect();

    let mut by_name: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (e, name) in names.iter().enumerate() {
        by_name.entry(name).or_default().push(entity_id(e));
    }
    let aliases = by_name
        .into_iter()
        .map(|(mention, candidates)| AliasRecord {
            mention: mention.to_string(),
            candidates,
        })
        .collect();

    Ok(SyntheticDataset {
        corpus,
        labels,
        categories,
        qa,
        aliases,
    })
}

impl SyntheticDataset {
    pub fn write(&self, dir: &Path) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| RelicError::io(dir, e))?;
        let files = SyntheticFiles {
            corpus: dir.join("corpus.jsonl"),
            labels: dir.join("types.jsonl"),
            categories: dir.join("categories.jsonl"),
            qa: dir.join("qa.jsonl"),
            aliases: dir.join("aliases.jsonl"),
        };
        write_jsonl(&files.corpus, &self.corpus)?;
        write_jsonl(&files.labels, &self.labels)?;
        write_jsonl(&files.categories, &self.categories)?;
        write_jsonl(&files.qa, &self.qa)?;
        write_jsonl(&files.aliases, &self.aliases)?;
        Ok(files)
    }

    /// Every token that can appear in the generated text.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.corpus
            .iter()
            .map(|r| r.text.as_str())
            .chain(self.qa.iter().map(|q| q.question.as_str()))
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticFiles> {
    synthesize(spec)?.write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, tokenize_record};

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_entities: 10,
            n_types: 5,
            types_per_entity: 2,
            contexts_per_entity: 3,
            name_uniqueness: true,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts() {
        let d = synthesize(&small(1)).unwrap();
        assert_eq!(d.corpus.len(), 30);
        assert_eq!(d.labels.len(), 10);
        assert!(d.labels.iter().all(|l| l.types.len() == 2));
        assert_eq!(d.qa.len(), 10);
        assert_eq!(d.aliases.len(), 10);
    }

    #[test]
    fn mention_span_is_the_name() {
        let d = synthesize(&small(2)).unwrap();
        for r in &d.corpus {
            let m: String = r
                .text
                .chars()
                .skip(r.mention_span[0])
                .take(r.mention_span[1] - r.mention_span[0])
                .collect();
            let alias = d.aliases.iter().find(|a| a.mention == m).unwrap();
            assert_eq!(alias.candidates, vec![r.entity_id.clone()]);
        }
        let v = build_vocab(d.texts(), 10_000).unwrap();
        assert!(d.corpus.iter().all(|r| tokenize_record(r, &v).is_some()));
    }

    #[test]
    fn shared_names_produce_ambiguous_aliases() {
        let spec = SyntheticSpec {
            n_entities: 30,
            name_uniqueness: false,
            ..small(3)
        };
        let d = synthesize(&spec).unwrap();
        assert!(d.aliases.len() <= 10);
        let total: usize = d.aliases.iter().map(|a| a.candidates.len()).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn byte_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = gen_synthetic(&small(9), a.path()).unwrap();
        let fb = gen_synthetic(&small(9), b.path()).unwrap();
        for (x, y) in [
            (&fa.corpus, &fb.corpus),
            (&fa.labels, &fb.labels),
            (&fa.categories, &fb.categories),
            (&fa.qa, &fb.qa),
            (&fa.aliases, &fb.aliases),
        ] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(synthesize(&SyntheticSpec { n_entities: 0, ..small(0) }).is_err());
        assert!(synthesize(&SyntheticSpec { types_per_entity: 6, ..small(0) }).is_err());
    }
}
