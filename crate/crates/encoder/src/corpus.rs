//! Vocabulary, templated synthetic grammars and the tagged corpus format.
//!
//! A grammar is a set of tag classes with disjoint word inventories plus
//! weighted tag templates. Each sentence also draws a topic; inside a class
//! the topic restricts which words can appear, so context carries
//! information about the masked word beyond its tag.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use amnesic::seed;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, EncoderError, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]"];

/// Property name under which corpus tags are exported.
pub const TAG_PROPERTY: &str = "tag";

pub fn is_special(id: u32) -> bool {
    id <= SEP
}

/// Token strings with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `words`, in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Vocab::from_tokens(tokens)
    }

    /// Full token list, which must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(EncoderError::Config(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\t', '\n']) {
                return Err(EncoderError::Config(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(EncoderError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| EncoderError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(EncoderError::UnknownTokenId {
                id,
                size: self.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of all non-reserved tokens.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        SEP + 1..self.len() as u32
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = EncoderError;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagClass {
    pub tag: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub tags: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub classes: Vec<TagClass>,
    pub templates: Vec<Template>,
    /// Number of sentence topics; 1 disables topic coupling.
    pub topics: usize,
    pub sentences: usize,
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn class(tag: &str, words: Vec<String>) -> TagClass {
    TagClass {
        tag: tag.to_string(),
        words,
    }
}

fn template(tags: &str, weight: f64) -> Template {
    Template {
        tags: tags.split_whitespace().map(str::to_string).collect(),
        weight,
    }
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for GrammarConfig {
    /// Six tag classes, 96 words, six templates and five topics.
    fn default() -> Self {
        GrammarConfig {
            classes: vec![
                class("DET", words(&["the", "a", "this", "that", "every", "some"])),
                class("ADJ", numbered("adj", 15)),
                class("NOUN", numbered("noun", 40)),
                class("VERB", numbered("verb", 20)),
                class("ADV", numbered("adv", 10)),
                class("ADP", words(&["in", "on", "at", "with", "from"])),
            ],
            templates: vec![
                template("DET NOUN VERB", 3.0),
                template("DET ADJ NOUN VERB", 3.0),
                template("DET NOUN VERB ADV", 2.0),
                template("DET NOUN VERB ADP DET NOUN", 2.0),
                template("DET ADJ NOUN VERB ADP DET ADJ NOUN", 1.0),
                template("NOUN VERB ADV", 1.0),
            ],
            topics: 5,
            sentences: 4000,
        }
    }
}

impl GrammarConfig {
    /// `DET NOUN VERB` with {the, a}, 20 nouns and 10 verbs.
    pub fn det_noun_verb(sentences: usize) -> Self {
        GrammarConfig {
            classes: vec![
                class("DET", words(&["the", "a"])),
                class("NOUN", numbered("noun", 20)),
                class("VERB", numbered("verb", 10)),
            ],
            templates: vec![template("DET NOUN VERB", 1.0)],
            topics: 1,
            sentences,
        }
    }

    /// Default tags and templates with three words per tag and no topics,
    /// so the tag alone decides which words can fill a slot.
    pub fn small_inventories(sentences: usize) -> Self {
        let mut g = GrammarConfig::default();
        for c in &mut g.classes {
            let prefix = c.tag.to_lowercase();
            c.words = numbered(&prefix, 3);
        }
        g.topics = 1;
        g.sentences = sentences;
        g
    }

    pub fn with_sentences(mut self, sentences: usize) -> Self {
        self.sentences = sentences;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::BadGrammar(m));
        if self.classes.len() < 3 {
            return bad(format!("need at least 3 tag classes, got {}", self.classes.len()));
        }
        if self.topics == 0 {
            return bad("topics must be at least 1".into());
        }
        let mut tags = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !tags.insert(c.tag.as_str()) {
                return bad(format!("tag {} declared twice", c.tag));
            }
            if c.words.is_empty() {
                return bad(format!("tag {} has no words", c.tag));
            }
            if c.tag.is_empty() || c.tag.contains(['/', '\t', '\n']) {
                return bad(format!("tag {:?} is not a valid tag name", c.tag));
            }
            for w in &c.words {
                if SPECIAL_TOKENS.contains(&w.as_str()) {
                    return bad(format!("word {w} is reserved"));
                }
                if !seen.insert(w.as_str()) {
                    return bad(format!("word {w} appears in more than one inventory"));
                }
            }
        }
        if self.templates.is_empty() {
            return bad("no templates".into());
        }
        for t in &self.templates {
            if t.tags.is_empty() {
                return bad("empty template".into());
            }
            if !(t.weight.is_finite() && t.weight > 0.0) {
                return bad(format!("template weight {} must be positive", t.weight));
            }
            if let Some(u) = t.tags.iter().find(|g| !tags.contains(g.as_str())) {
                return bad(format!("template uses undeclared tag {u}"));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let words: Vec<&String> = self.classes.iter().flat_map(|c| &c.words).collect();
        Vocab::new(&words)
    }

    pub fn tags(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.tag.clone()).collect()
    }

    /// Expected share of each tag among content tokens.
    pub fn tag_marginals(&self) -> BTreeMap<String, f64> {
        let mut mass: BTreeMap<String, f64> = self.tags().into_iter().map(|t| (t, 0.0)).collect();
        let total_w: f64 = self.templates.iter().map(|t| t.weight).sum();
        let mut tokens = 0.0;
        for t in &self.templates {
            let p = t.weight / total_w;
            tokens += p * t.tags.len() as f64;
            for g in &t.tags {
                *mass.get_mut(g).expect("validated") += p;
            }
        }
        mass.values_mut().for_each(|v| *v /= tokens);
        mass
    }

    /// Words of class `c` allowed under `topic`.
    fn topic_group(&self, c: usize, topic: usize) -> Vec<usize> {
        let n = self.classes[c].words.len();
        if n >= self.topics {
            (0..n).filter(|j| j % self.topics == topic).collect()
        } else {
            vec![topic % n]
        }
    }
}

/// One sentence, wrapped in `[CLS] … [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub ids: Vec<u32>,
    /// One tag per id; reserved tokens carry their own name as tag.
    pub tags: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions of the real words.
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.ids.len()).filter(|&i| !is_special(self.ids[i]))
    }

    fn wrap(words: Vec<u32>, tags: Vec<String>) -> Sentence {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(CLS);
        ids.extend(words);
        ids.push(SEP);
        let mut t = Vec::with_capacity(tags.len() + 2);
        t.push(SPECIAL_TOKENS[CLS as usize].to_string());
        t.extend(tags);
        t.push(SPECIAL_TOKENS[SEP as usize].to_string());
        Sentence { ids, tags: t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub sentences: Vec<Sentence>,
    pub vocab: Vocab,
    /// Tag inventory, in declaration order.
    pub tags: Vec<String>,
    pub grammar: Option<GrammarConfig>,
    pub seed: Option<u64>,
}

pub fn build_synthetic_corpus(grammar: &GrammarConfig, seed_: u64) -> Result<SyntheticCorpus> {
    grammar.validate()?;
    let vocab = grammar.vocab()?;
    let class_of: HashMap<&str, usize> = grammar
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.tag.as_str(), i))
        .collect();
    let groups: Vec<Vec<Vec<u32>>> = (0..grammar.classes.len())
        .map(|c| {
            (0..grammar.topics)
                .map(|t| {
                    grammar
                        .topic_group(c, t)
                        .into_iter()
                        .map(|j| vocab.id(&grammar.classes[c].words[j]).expect("own word"))
                        .collect()
                })
                .collect()
        })
        .collect();
    let pick = WeightedIndex::new(grammar.templates.iter().map(|t| t.weight))
        .map_err(|e| EncoderError::BadGrammar(e.to_string()))?;
    let mut rng = seed::rng(seed_, seed::stream::CORPUS);
    let sentences = (0..grammar.sentences)
        .map(|_| {
            let tpl = &grammar.templates[pick.sample(&mut rng)];
            let topic = rng.random_range(0..grammar.topics);
            let words = tpl
                .tags
                .iter()
                .map(|g| *groups[class_of[g.as_str()]][topic].choose(&mut rng).expect("non-empty"))
                .collect();
            Sentence::wrap(words, tpl.tags.clone())
        })
        .collect();
    Ok(SyntheticCorpus {
        sentences,
        vocab,
        tags: grammar.tags(),
        grammar: Some(grammar.clone()),
        seed: Some(seed_),
    })
}

impl SyntheticCorpus {
    /// Number of content tokens.
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.content_positions().count()).sum()
    }

    /// Splits sentences into two corpora; the second gets
    /// `round(fraction * n)` sentences, at least one, chosen by `seed`.
    pub fn split(&self, fraction: f64, seed_: u64) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
        let n = self.sentences.len();
        if n < 2 || !(fraction > 0.0 && fraction < 1.0) {
            return Err(EncoderError::Config(format!(
                "cannot split {n} sentences with fraction {fraction}"
            )));
        }
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed_, seed::stream::SPLIT));
        let mut held: Vec<usize> = order[..k].to_vec();
        let mut kept: Vec<usize> = order[k..].to_vec();
        held.sort_unstable();
        kept.sort_unstable();
        let take = |idx: &[usize]| SyntheticCorpus {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            ..self.clone_empty()
        };
        Ok((take(&kept), take(&held)))
    }

    /// First `n` sentences.
    pub fn head(&self, n: usize) -> SyntheticCorpus {
        SyntheticCorpus {
            sentences: self.sentences.iter().take(n).cloned().collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> SyntheticCorpus {
        SyntheticCorpus {
            sentences: Vec::new(),
            vocab: self.vocab.clone(),
            tags: self.tags.clone(),
            grammar: self.grammar.clone(),
            seed: self.seed,
        }
    }
}

/// One sentence per line: `word/TAG` pairs separated by tabs, without the
/// reserved wrapper tokens.
pub fn write_corpus(corpus: &SyntheticCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in &corpus.sentences {
        let pairs: Vec<String> = s
            .content_positions()
            .map(|i| format!("{}/{}", corpus.vocab.token(s.ids[i]).expect("own id"), s.tags[i]))
            .collect();
        out.push_str(&pairs.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_error(path, e))
}

/// Reads a corpus file. With `vocab` the words must already be known;
/// otherwise the vocabulary is the sorted set of words in the file. Tags are
/// listed in order of first appearance.
pub fn read_corpus(path: impl AsRef<Path>, vocab: Option<&Vocab>) -> Result<SyntheticCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let bad = |line: usize, reason: String| EncoderError::Corpus {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut parsed: Vec<Vec<(&str, &str)>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(bad(n + 1, "empty sentence".into()));
        }
        let mut pairs = Vec::new();
        for field in line.split('\t') {
            let (w, t) = field
                .rsplit_once('/')
                .ok_or_else(|| bad(n + 1, format!("{field:?} is not word/TAG")))?;
            if w.is_empty() || t.is_empty() {
                return Err(bad(n + 1, format!("{field:?} has an empty word or tag")));
            }
            if SPECIAL_TOKENS.contains(&w) {
                return Err(bad(n + 1, format!("reserved token {w} in corpus")));
            }
            pairs.push((w, t));
        }
        parsed.push(pairs);
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let words: BTreeSet<&str> = parsed.iter().flatten().map(|p| p.0).collect();
            Vocab::new(&words.into_iter().collect::<Vec<_>>())?
        }
    };
    let mut tags: Vec<String> = Vec::new();
    let mut sentences = Vec::with_capacity(parsed.len());
    for (n, pairs) in parsed.iter().enumerate() {
        let mut ids = Vec::with_capacity(pairs.len());
        let mut ts = Vec::with_capacity(pairs.len());
        for &(w, t) in pairs {
            ids.push(vocab.id(w).map_err(|_| bad(n + 1, format!("unknown word {w}")))?);
            if !tags.iter().any(|x| x == t) {
                tags.push(t.to_string());
            }
            ts.push(t.to_string());
        }
        sentences.push(Sentence::wrap(ids, ts));
    }
    Ok(SyntheticCorpus {
        sentences,
        vocab,
        tags,
        grammar: None,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_noun_verb_sentences_have_five_ids() {
        let c = build_synthetic_corpus(&GrammarConfig::det_noun_verb(50), 1).unwrap();
        assert_eq!(c.sentences.len(), 50);
        for s in &c.sentences {
            assert_eq!(s.len(), 5);
            assert_eq!(s.ids[0], CLS);
            assert_eq!(s.ids[4], SEP);
            assert_eq!(&s.tags[1..4], ["DET", "NOUN", "VERB"]);
            assert_eq!(s.content_positions().count(), 3);
        }
        assert_eq!(c.vocab.len(), 4 + 2 + 20 + 10);
    }

    #[test]
    fn same_seed_same_corpus() {
        let g = GrammarConfig::default();
        let a = build_synthetic_corpus(&g, 9).unwrap();
        assert_eq!(a, build_synthetic_corpus(&g, 9).unwrap());
        assert_ne!(a.sentences, build_synthetic_corpus(&g, 10).unwrap().sentences);
    }

    #[test]
    fn tag_marginals_follow_the_templates() {
        let g = GrammarConfig {
            sentences: 10_000,
            ..Default::default()
        };
        let c = build_synthetic_corpus(&g, 3).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &c.sentences {
            for i in s.content_positions() {
                *counts.entry(s.tags[i].as_str()).or_default() += 1;
            }
        }
        let n = c.num_tokens() as f64;
        for (tag, expected) in g.tag_marginals() {
            let got = counts.get(tag.as_str()).copied().unwrap_or(0) as f64 / n;
            assert!((got - expected).abs() < 0.01, "{tag}: {got} vs {expected}");
        }
    }

    #[test]
    fn words_come_from_their_tag_inventory() {
        let g = GrammarConfig::default();
        let c = build_synthetic_corpus(&g, 4).unwrap();
        let class: HashMap<&str, &str> = g
            .classes
            .iter()
            .flat_map(|k| k.words.iter().map(move |w| (w.as_str(), k.tag.as_str())))
            .collect();
        for s in c.sentences.iter().take(200) {
            for i in s.content_positions() {
                assert_eq!(class[c.vocab.token(s.ids[i]).unwrap()], s.tags[i]);
            }
        }
    }

    #[test]
    fn bad_grammars_are_rejected() {
        let mut g = GrammarConfig::det_noun_verb(5);
        g.classes.pop();
        g.templates = vec![template("DET NOUN", 1.0)];
        assert!(matches!(build_synthetic_corpus(&g, 0), Err(EncoderError::BadGrammar(_))));
        let mut g = GrammarConfig::det_noun_verb(5);
        g.classes[1].words.push("the".into());
        assert!(matches!(build_synthetic_corpus(&g, 0), Err(EncoderError::BadGrammar(_))));
        let mut g = GrammarConfig::det_noun_verb(5);
        g.templates[0].tags.push("ADV".into());
        assert!(matches!(build_synthetic_corpus(&g, 0), Err(EncoderError::BadGrammar(_))));
        let mut g = GrammarConfig::det_noun_verb(5);
        g.templates[0].weight = 0.0;
        assert!(matches!(build_synthetic_corpus(&g, 0), Err(EncoderError::BadGrammar(_))));
    }

    #[test]
    fn corpus_file_round_trip() {
        let c = build_synthetic_corpus(&GrammarConfig::default().with_sentences(30), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.txt");
        write_corpus(&c, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.split('\t').all(|f| f.contains('/')));
        let back = read_corpus(&p, Some(&c.vocab)).unwrap();
        assert_eq!(back.sentences, c.sentences);
        let fresh = read_corpus(&p, None).unwrap();
        assert_eq!(fresh.sentences.len(), 30);
    }

    #[test]
    fn malformed_corpus_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "the/DET\tdog\n").unwrap();
        assert!(matches!(read_corpus(&p, None), Err(EncoderError::Corpus { line: 1, .. })));
        fs::write(&p, "[MASK]/X\n").unwrap();
        assert!(read_corpus(&p, None).is_err());
    }

    #[test]
    fn vocab_contract() {
        let v = Vocab::new(&["x", "y"]).unwrap();
        assert_eq!(v.id("[PAD]").unwrap(), PAD);
        assert_eq!(v.id("[MASK]").unwrap(), MASK);
        assert_eq!(v.id("[CLS]").unwrap(), CLS);
        assert_eq!(v.id("[SEP]").unwrap(), SEP);
        assert_eq!(v.id("y").unwrap(), 5);
        assert!(Vocab::new(&["x", "x"]).is_err());
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
