//! Synthetic fully-formatted sentences, their spoken-form verbalizations and
//! frame sequences that encode the spoken form.
//!
//! The written side carries everything a formatted transcript needs
//! (capitals, commas, quotes, terminal punctuation, numerals and percent
//! signs); the frames only carry the lowercase spoken words, so formatting
//! has to be inferred from content.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::{VocabMode, Vocabulary};

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// Number words for 0-99, e.g. `21 -> "twenty one"`.
pub fn number_words(n: u32) -> Result<String> {
    match n {
        0..=19 => Ok(ONES[n as usize].to_string()),
        20..=99 => {
            let (t, o) = ((n / 10) as usize, (n % 10) as usize);
            Ok(if o == 0 {
                TENS[t].to_string()
            } else {
                format!("{} {}", TENS[t], ONES[o])
            })
        }
        _ => Err(Error::NumeralOutOfRange(n.to_string())),
    }
}

/// Verbalizes one whitespace token into zero or more spoken words.
pub fn verbalize_token(token: &str) -> Result<Vec<String>> {
    let kept: String = token
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '%')
        .flat_map(char::to_lowercase)
        .collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let has_digit = kept.chars().any(|c| c.is_ascii_digit());
    let mut words = Vec::new();
    if has_digit {
        let digits = kept.trim_end_matches('%');
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(Error::NumeralOutOfRange(token.to_string()));
        }
        let n: u32 = digits
            .parse()
            .map_err(|_| Error::NumeralOutOfRange(token.to_string()))?;
        if digits.len() > 2 {
            return Err(Error::NumeralOutOfRange(token.to_string()));
        }
        words.extend(number_words(n)?.split(' ').map(String::from));
        for _ in 0..kept.len() - digits.len() {
            words.push("percent".to_string());
        }
    } else {
        let letters: String = kept.chars().filter(|&c| c != '%').collect();
        if !letters.is_empty() {
            words.push(letters);
        }
        for _ in 0..kept.chars().filter(|&c| c == '%').count() {
            words.push("percent".to_string());
        }
    }
    Ok(words)
}

/// Spoken form of a written sentence: lowercase, no punctuation, numerals
/// 0-99 as words and `%` as "percent".
pub fn spoken_form(written: &str) -> Result<String> {
    let mut words = Vec::new();
    for tok in written.split_whitespace() {
        words.extend(verbalize_token(tok)?);
    }
    Ok(words.join(" "))
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarConfig {
    pub numeral_probability: f64,
    pub quote_probability: f64,
    pub question_probability: f64,
    pub exclamation_probability: f64,
    pub comma_probability: f64,
    pub proper_noun_probability: f64,
    pub place_probability: f64,
    pub subjects: Vec<String>,
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub verbs_past: Vec<String>,
    pub verbs_base: Vec<String>,
    pub objects: Vec<String>,
    pub plural_nouns: Vec<String>,
    pub intros: Vec<String>,
    pub question_starts: Vec<String>,
    pub quotes: Vec<String>,
    pub exclamations: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            numeral_probability: 0.35,
            quote_probability: 0.2,
            question_probability: 0.25,
            exclamation_probability: 0.05,
            comma_probability: 0.3,
            proper_noun_probability: 0.35,
            place_probability: 0.4,
            subjects: strs(&[
                "the teacher",
                "my friend",
                "the old man",
                "our team",
                "she",
                "he",
                "we",
                "they",
                "I",
            ]),
            names: strs(&["Maria", "Tom", "Anna", "David", "Laura", "Peter"]),
            places: strs(&[
                "in Paris",
                "in London",
                "in Berlin",
                "in Tokyo",
                "on Monday",
                "on Friday",
            ]),
            verbs_past: strs(&["saw", "bought", "found", "sold", "painted", "moved"]),
            verbs_base: strs(&["see", "buy", "find", "sell", "paint", "move"]),
            objects: strs(&[
                "the red car",
                "a small house",
                "the old book",
                "a new phone",
                "the blue box",
                "some fresh bread",
            ]),
            plural_nouns: strs(&["apples", "books", "cars", "boxes", "chairs", "tickets"]),
            intros: strs(&["however", "yesterday", "well", "today", "luckily"]),
            question_starts: strs(&["did", "can", "will", "why did", "where did"]),
            quotes: strs(&[
                "thank you",
                "good morning",
                "see you soon",
                "not today",
                "well done",
            ]),
            exclamations: strs(&["wow", "oh no", "great"]),
        }
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &'a [String]) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn subject<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> String {
    if rng.random_bool(cfg.proper_noun_probability) {
        pick(rng, &cfg.names).to_string()
    } else {
        pick(rng, &cfg.subjects).to_string()
    }
}

fn object<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> String {
    if rng.random_bool(cfg.numeral_probability) {
        let n = rng.random_range(0..100u32);
        let noun = pick(rng, &cfg.plural_nouns);
        if rng.random_bool(0.5) {
            format!("{n} {noun}")
        } else {
            format!("{n}% of the {noun}")
        }
    } else {
        pick(rng, &cfg.objects).to_string()
    }
}

/// Generates one fully-formatted sentence.
pub fn gen_formatted_text<R: Rng + ?Sized>(rng: &mut R, cfg: &GrammarConfig) -> String {
    let mut s;
    let terminal;
    if rng.random_bool(cfg.question_probability) {
        s = format!(
            "{} {} {} {}",
            pick(rng, &cfg.question_starts),
            subject(rng, cfg),
            pick(rng, &cfg.verbs_base),
            object(rng, cfg)
        );
        if rng.random_bool(cfg.place_probability) {
            s.push(' ');
            s.push_str(pick(rng, &cfg.places));
        }
        terminal = "?";
    } else if rng.random_bool(cfg.exclamation_probability) {
        s = format!(
            "{}, {} {} {}",
            pick(rng, &cfg.exclamations),
            subject(rng, cfg),
            pick(rng, &cfg.verbs_past),
            object(rng, cfg)
        );
        terminal = "!";
    } else {
        s = String::new();
        if rng.random_bool(cfg.comma_probability) {
            s.push_str(pick(rng, &cfg.intros));
            s.push_str(", ");
        }
        s.push_str(&format!(
            "{} {} {}",
            subject(rng, cfg),
            pick(rng, &cfg.verbs_past),
            object(rng, cfg)
        ));
        if rng.random_bool(cfg.place_probability) {
            s.push(' ');
            s.push_str(pick(rng, &cfg.places));
        }
        if rng.random_bool(cfg.quote_probability) {
            s.push_str(&format!(" and said \"{}\"", pick(rng, &cfg.quotes)));
        }
        terminal = ".";
    }
    s.push_str(terminal);
    capitalize(&s)
}

/// Frame matrix, `rows × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// Little-endian `u32 rows, u32 dim` header followed by `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(invalid("frame file shorter than its header"));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + rows * dim * 4 {
            return Err(invalid(format!(
                "frame file holds {} bytes, header says {rows}x{dim}",
                bytes.len()
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Frames { rows, dim, data })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed from a base seed and a path of labels.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Renders spoken characters as noisy frames around fixed per-character
/// prototypes, with a silence prototype between words.
#[derive(Debug, Clone)]
pub struct FrameRenderer {
    pub input_dim: usize,
    pub sigma: f64,
    pub prototype_seed: u64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub max_silence: usize,
}

impl FrameRenderer {
    pub fn new(input_dim: usize, sigma: f64, prototype_seed: u64) -> Self {
        FrameRenderer {
            input_dim,
            sigma,
            prototype_seed,
            min_duration: 4,
            max_duration: 12,
            max_silence: 4,
        }
    }

    pub fn prototype(&self, c: char) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.prototype_seed, &[c as u64]));
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        (0..self.input_dim)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect()
    }

    pub fn silence(&self) -> Vec<f32> {
        vec![0.0; self.input_dim]
    }

    /// Frames for a spoken-form string. Each non-space character lasts
    /// 4-12 frames; each word gap is 0-4 silence frames.
    pub fn render<R: Rng + ?Sized>(&self, spoken: &str, rng: &mut R) -> Result<Frames> {
        let words: Vec<&str> = spoken.split_whitespace().collect();
        if words.is_empty() {
            return Err(invalid("cannot render an empty token sequence"));
        }
        let normal =
            Normal::new(0.0f64, self.sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut emit = |proto: &[f32], dur: usize, rng: &mut R, data: &mut Vec<f32>| {
            for _ in 0..dur {
                for &p in proto {
                    let noise = if self.sigma > 0.0 {
                        normal.sample(rng)
                    } else {
                        0.0
                    };
                    data.push(p + noise as f32);
                }
            }
            rows += dur;
        };
        let silence = self.silence();
        for (w, word) in words.iter().enumerate() {
            if w > 0 {
                let dur = rng.random_range(0..=self.max_silence);
                emit(&silence, dur, rng, &mut data);
            }
            for c in word.chars() {
                let dur = rng.random_range(self.min_duration..=self.max_duration);
                emit(&self.prototype(c), dur, rng, &mut data);
            }
        }
        Ok(Frames {
            rows,
            dim: self.input_dim,
            data,
        })
    }
}

/// Convenience wrapper over [`FrameRenderer::render`].
pub fn render_frames<R: Rng + ?Sized>(
    spoken: &str,
    renderer: &FrameRenderer,
    rng: &mut R,
) -> Result<Frames> {
    renderer.render(spoken, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub written: String,
    pub spoken: String,
    pub frames: Frames,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    written: String,
    spoken: String,
    frames_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub text_sentences: usize,
    pub input_dim: usize,
    pub sigma_clean: f64,
    pub sigma_hard: f64,
    pub vocab_mode: VocabMode,
    pub grammar: GrammarConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            train_utterances: 2000,
            dev_utterances: 200,
            test_utterances: 200,
            text_sentences: 20000,
            input_dim: 24,
            sigma_clean: 0.3,
            sigma_hard: 0.8,
            vocab_mode: VocabMode::Char,
            grammar: GrammarConfig::default(),
        }
    }
}

pub const SPLITS: [&str; 4] = ["train", "dev", "test_clean", "test_other"];

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub splits: Vec<(String, Vec<Utterance>)>,
    /// Text-only formatted sentences for language-model pretraining.
    pub text: Vec<String>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, u)| u.as_slice())
            .ok_or_else(|| invalid(format!("corpus has no split {name:?}")))
    }
}

fn gen_utterance(cfg: &CorpusConfig, split: &str, index: usize, sigma: f64) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag(split), index as u64]));
    let written = gen_formatted_text(&mut rng, &cfg.grammar);
    let spoken = spoken_form(&written)?;
    let renderer = FrameRenderer::new(
        cfg.input_dim,
        sigma,
        derive_seed(cfg.seed, &[tag("prototypes")]),
    );
    let frames = renderer.render(&spoken, &mut rng)?;
    Ok(Utterance {
        id: format!("{split}-{index:06}"),
        written,
        spoken,
        frames,
    })
}

/// Generates train/dev/test_clean/test_other splits plus a text-only corpus.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let mut splits = Vec::new();
    for split in SPLITS {
        let (n, sigma) = match split {
            "train" => (cfg.train_utterances, cfg.sigma_clean),
            "dev" => (cfg.dev_utterances, cfg.sigma_clean),
            "test_clean" => (cfg.test_utterances, cfg.sigma_clean),
            _ => (cfg.test_utterances, cfg.sigma_hard),
        };
        let utts = (0..n)
            .map(|i| gen_utterance(cfg, split, i, sigma))
            .collect::<Result<Vec<_>>>()?;
        splits.push((split.to_string(), utts));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag("text")]));
    let text: Vec<String> = (0..cfg.text_sentences)
        .map(|_| gen_formatted_text(&mut rng, &cfg.grammar))
        .collect();
    let mut vocab_corpus: Vec<String> = Vec::new();
    for u in &splits[0].1 {
        vocab_corpus.push(u.written.clone());
        vocab_corpus.push(u.spoken.clone());
    }
    vocab_corpus.extend(text.iter().cloned());
    let vocab = Vocabulary::build(&vocab_corpus, cfg.vocab_mode)?;
    Ok(Corpus {
        vocab,
        splits,
        text,
    })
}

/// Writes `vocab.txt`, `<split>.jsonl`, `<split>.ref.tsv`, `text.txt` and
/// one frame file per utterance under `frames/`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    for (split, utts) in &corpus.splits {
        let mut jsonl = BufWriter::new(File::create(dir.join(format!("{split}.jsonl")))?);
        let mut refs = BufWriter::new(File::create(dir.join(format!("{split}.ref.tsv")))?);
        for u in utts {
            let rel = format!("frames/{}.f32", u.id);
            fs::write(dir.join(&rel), u.frames.to_bytes())?;
            let rec = Record {
                id: u.id.clone(),
                written: u.written.clone(),
                spoken: u.spoken.clone(),
                frames_path: rel,
            };
            serde_json::to_writer(&mut jsonl, &rec)?;
            jsonl.write_all(b"\n")?;
            writeln!(refs, "{}\t{}", u.id, u.written)?;
        }
        jsonl.flush()?;
        refs.flush()?;
    }
    let mut text = BufWriter::new(File::create(dir.join("text.txt"))?);
    for line in &corpus.text {
        writeln!(text, "{line}")?;
    }
    text.flush()?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    let path = dir.join(format!("{split}.jsonl"));
    let file = File::open(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let frames = Frames::from_bytes(&fs::read(dir.join(&rec.frames_path))?)?;
        out.push(Utterance {
            id: rec.id,
            written: rec.written,
            spoken: rec.spoken,
            frames,
        });
    }
    Ok(out)
}

pub fn read_text(dir: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(dir.join("text.txt"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect())
}

pub fn vocab_path(dir: &Path) -> PathBuf {
    dir.join("vocab.txt")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_word_table() {
        assert_eq!(number_words(0).unwrap(), "zero");
        assert_eq!(number_words(7).unwrap(), "seven");
        assert_eq!(number_words(13).unwrap(), "thirteen");
        assert_eq!(number_words(21).unwrap(), "twenty one");
        assert_eq!(number_words(40).unwrap(), "forty");
        assert_eq!(number_words(99).unwrap(), "ninety nine");
        assert!(number_words(100).is_err());
    }

    #[test]
    fn spoken_form_examples() {
        assert_eq!(spoken_form("40%").unwrap(), "forty percent");
        assert_eq!(spoken_form("Hello, world.").unwrap(), "hello world");
        assert_eq!(spoken_form("21").unwrap(), "twenty one");
        assert_eq!(
            spoken_form("Tom said \"Well done\" on Friday!").unwrap(),
            "tom said well done on friday"
        );
        assert_eq!(
            spoken_form("Sold 5% of the cars.").unwrap(),
            "sold five percent of the cars"
        );
        assert!(matches!(
            spoken_form("It cost 100."),
            Err(Error::NumeralOutOfRange(_))
        ));
        assert!(spoken_form("A4 paper").is_err());
    }

    #[test]
    fn question_probability_one() {
        let cfg = GrammarConfig {
            question_probability: 1.0,
            ..GrammarConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(gen_formatted_text(&mut rng, &cfg).ends_with('?'));
        }
    }

    #[test]
    fn numeral_probability_zero() {
        let cfg = GrammarConfig {
            numeral_probability: 0.0,
            ..GrammarConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            assert!(!gen_formatted_text(&mut rng, &cfg)
                .chars()
                .any(|c| c.is_ascii_digit()));
        }
    }

    #[test]
    fn sentences_are_formatted() {
        let cfg = GrammarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = gen_formatted_text(&mut rng, &cfg);
            assert!(s.chars().next().unwrap().is_uppercase(), "{s}");
            assert!(matches!(s.chars().last().unwrap(), '.' | '?' | '!'), "{s}");
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = GrammarConfig::default();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| gen_formatted_text(&mut rng, &cfg))
                .collect::<Vec<_>>()
        };
        assert_eq!(gen(9), gen(9));
        assert_ne!(gen(9), gen(10));
    }

    #[test]
    fn spoken_form_is_plain_for_many_seeds() {
        let cfg = GrammarConfig::default();
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spoken_form(&gen_formatted_text(&mut rng, &cfg)).unwrap();
            assert!(
                s.chars().all(|c| c.is_ascii_lowercase() || c == ' '),
                "seed {seed}: {s}"
            );
        }
    }

    #[test]
    fn render_contracts() {
        let r = FrameRenderer::new(6, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = r.render("ab a", &mut rng).unwrap();
        assert!(f.rows >= 4 * 3);
        // sigma 0: every frame of `a` equals the prototype
        let proto = r.prototype('a');
        let first = f.row(0);
        assert_eq!(first, proto.as_slice());
        assert!(r.render("  ", &mut rng).is_err());

        let noisy = FrameRenderer::new(6, 0.3, 5);
        let a = noisy
            .render("hello world", &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let b = noisy
            .render("hello world", &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.rows >= 4 * 10);
    }

    #[test]
    fn frames_bytes_round_trip() {
        let f = Frames {
            rows: 2,
            dim: 3,
            data: vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0],
        };
        assert_eq!(Frames::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(Frames::from_bytes(&f.to_bytes()[..10]).is_err());
    }

    #[test]
    fn small_corpus_splits_disjoint() {
        let cfg = CorpusConfig {
            train_utterances: 30,
            dev_utterances: 5,
            test_utterances: 5,
            text_sentences: 10,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let mut ids = std::collections::HashSet::new();
        for (_, utts) in &c.splits {
            for u in utts {
                assert!(ids.insert(u.id.clone()));
                assert_eq!(u.spoken, spoken_form(&u.written).unwrap());
            }
        }
        assert_eq!(ids.len(), 45);
        assert_eq!(c.text.len(), 10);
    }
}
