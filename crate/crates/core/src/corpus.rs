//! Synthetic document corpus with topic-driven cross-utterance structure and
//! a Gaussian emission channel in which homophone symbols are acoustically
//! indistinguishable.
//!
//! Each document draws one latent topic. Every symbol is sampled from a
//! mixture of a global uniform distribution and the topic's own distribution,
//! weighted by `cross_utterance_strength`, so neighbouring utterances carry
//! evidence about which member of a homophone pair is likely.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONSONANTS: [char; 6] = ['k', 's', 't', 'n', 'm', 'r'];
const VOWELS: [char; 3] = ['a', 'i', 'u'];
const LEXICON_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_documents: usize,
    pub utterances_per_document: (usize, usize),
    /// Symbols per utterance.
    pub utterance_length_range: (usize, usize),
    pub alphabet_size: usize,
    pub n_topics: usize,
    /// Fraction of symbols that belong to a homophone pair.
    pub homophone_rate: f64,
    pub cross_utterance_strength: f64,
    pub frame_noise_sigma: f64,
    pub frames_per_token_range: (usize, usize),
    pub feature_dim: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_documents: 100,
            utterances_per_document: (6, 10),
            utterance_length_range: (2, 6),
            alphabet_size: 24,
            n_topics: 4,
            homophone_rate: 0.5,
            cross_utterance_strength: 0.8,
            frame_noise_sigma: 0.3,
            frames_per_token_range: (1, 2),
            feature_dim: 8,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("utterances_per_document", self.utterances_per_document),
            ("utterance_length_range", self.utterance_length_range),
            ("frames_per_token_range", self.frames_per_token_range),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name}: invalid range ({lo}, {hi})")));
            }
        }
        for (name, v) in [
            ("homophone_rate", self.homophone_rate),
            ("cross_utterance_strength", self.cross_utterance_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if !(self.frame_noise_sigma >= 0.0) {
            return Err(Error::Config("frame_noise_sigma must be >= 0".into()));
        }
        if self.alphabet_size < 2 || self.n_topics == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "alphabet_size >= 2, n_topics >= 1 and feature_dim >= 1 required".into(),
            ));
        }
        let max_words = CONSONANTS.len() * VOWELS.len();
        if self.alphabet_size > max_words * (max_words + 1) {
            return Err(Error::Config(format!(
                "alphabet_size {} exceeds the word inventory",
                self.alphabet_size
            )));
        }
        Ok(())
    }
}

/// The fixed "language" shared by every document of one corpus seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub words: Vec<String>,
    /// `partner[s]` is the homophone of `s`, if any.
    pub partner: Vec<Option<u32>>,
    pub home_topic: Vec<usize>,
    /// Emission mean per symbol; homophones share the same vector.
    pub emission_means: Vec<Vec<f64>>,
    pub n_topics: usize,
}

impl Lexicon {
    pub fn build(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LEXICON_STREAM);
        let a = spec.alphabet_size;

        let syllables: Vec<String> = CONSONANTS
            .iter()
            .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
            .collect();
        let mut inventory: Vec<String> = syllables.clone();
        for s in &syllables {
            for t in &syllables {
                inventory.push(format!("{s}{t}"));
            }
        }
        // Prefer short words but keep some two-syllable ones for subword structure.
        let mut short = syllables.clone();
        short.shuffle(&mut rng);
        let mut long: Vec<String> = inventory[syllables.len()..].to_vec();
        long.shuffle(&mut rng);
        let n_short = (a / 2).min(short.len());
        let mut words: Vec<String> = short[..n_short].to_vec();
        words.extend(long.into_iter().take(a - n_short));
        words.shuffle(&mut rng);

        let mut perm: Vec<usize> = (0..a).collect();
        perm.shuffle(&mut rng);
        let n_pairs = ((spec.homophone_rate * a as f64) / 2.0).round() as usize;
        let mut partner = vec![None; a];
        let mut home_topic = vec![0; a];
        for (i, &s) in perm.iter().enumerate() {
            home_topic[s] = i % spec.n_topics;
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut emission_means = vec![Vec::new(); a];
        for k in 0..n_pairs.min(a / 2) {
            let (x, y) = (perm[2 * k], perm[2 * k + 1]);
            partner[x] = Some(y as u32);
            partner[y] = Some(x as u32);
        }
        for &s in &perm {
            if !emission_means[s].is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            if let Some(p) = partner[s] {
                emission_means[p as usize] = mean.clone();
            }
            emission_means[s] = mean;
        }
        Ok(Lexicon {
            words,
            partner,
            home_topic,
            emission_means,
            n_topics: spec.n_topics,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Probability of each symbol in a document with the given topic.
    pub fn symbol_distribution(&self, topic: usize, strength: f64) -> Vec<f64> {
        let a = self.len() as f64;
        let in_topic = self.home_topic.iter().filter(|&&t| t == topic).count() as f64;
        self.home_topic
            .iter()
            .map(|&t| {
                let topical = if t == topic { 1.0 / in_topic } else { 0.0 };
                (1.0 - strength) / a + strength * topical
            })
            .collect()
    }

    pub fn render(&self, symbols: &[u32]) -> String {
        symbols
            .iter()
            .map(|&s| self.words[s as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub doc_id: usize,
    pub index_in_doc: usize,
    pub symbols: Vec<u32>,
    pub text: String,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: usize,
    pub seed: u64,
    /// Latent topic; kept for diagnostics, never shown to the models.
    pub topic: usize,
    pub utterances: Vec<Utterance>,
}

/// Frames for a symbol sequence: each symbol emits a uniform number of frames
/// in `frames_per_token_range`, each its emission mean plus isotropic noise.
pub fn emit_frames<R: Rng + ?Sized>(
    symbols: &[u32],
    lexicon: &Lexicon,
    spec: &CorpusSpec,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if symbols.is_empty() {
        return Err(Error::Usage("emit_frames needs at least one symbol".into()));
    }
    let (lo, hi) = spec.frames_per_token_range;
    let mut frames = Vec::new();
    for &s in symbols {
        let mean = lexicon
            .emission_means
            .get(s as usize)
            .ok_or_else(|| Error::Data(format!("symbol {s} outside lexicon")))?;
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            let frame = mean
                .iter()
                .map(|m| {
                    if spec.frame_noise_sigma > 0.0 {
                        m + spec.frame_noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        *m
                    }
                })
                .collect();
            frames.push(frame);
        }
    }
    Ok(frames)
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn document_seed(seed: u64, doc: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(doc as u64)
}

fn generate_document(spec: &CorpusSpec, lexicon: &Lexicon, seed: u64, id: usize) -> Result<Document> {
    let doc_seed = document_seed(seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
    let topic = rng.gen_range(0..spec.n_topics);
    let probs = lexicon.symbol_distribution(topic, spec.cross_utterance_strength);
    let n_utts = rng.gen_range(spec.utterances_per_document.0..=spec.utterances_per_document.1);
    let mut utterances = Vec::with_capacity(n_utts);
    for index_in_doc in 0..n_utts {
        let len = rng.gen_range(spec.utterance_length_range.0..=spec.utterance_length_range.1);
        let symbols: Vec<u32> = (0..len).map(|_| sample_index(&probs, &mut rng) as u32).collect();
        let frames = emit_frames(&symbols, lexicon, spec, &mut rng)?;
        utterances.push(Utterance {
            doc_id: id,
            index_in_doc,
            text: lexicon.render(&symbols),
            symbols,
            frames,
        });
    }
    Ok(Document {
        id,
        seed: doc_seed,
        topic,
        utterances,
    })
}

/// Deterministic in `(spec, seed)`; documents use independent derived seeds.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<(Lexicon, Vec<Document>)> {
    let lexicon = Lexicon::build(spec, seed)?;
    let docs = (0..spec.n_documents)
        .map(|id| generate_document(spec, &lexicon, seed, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((lexicon, docs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    /// Documents used only as teacher pre-training text.
    pub text: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.text + self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub text: Vec<Document>,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// Splits whole documents in order: train, dev, test, then text-only.
pub fn split_documents(docs: Vec<Document>, sizes: SplitSizes) -> Result<Splits> {
    if docs.len() < sizes.total() {
        return Err(Error::Config(format!(
            "split needs {} documents, corpus has {}",
            sizes.total(),
            docs.len()
        )));
    }
    let mut it = docs.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    let train = take(sizes.train);
    let dev = take(sizes.dev);
    let test = take(sizes.test);
    let text = take(sizes.text);
    Ok(Splits {
        text,
        train,
        dev,
        test,
    })
}

/// Plug-in estimate (nats) of the mutual information between the document
/// topic and symbol identity over all symbol occurrences.
pub fn topic_symbol_mutual_information(docs: &[Document], n_topics: usize, alphabet: usize) -> f64 {
    let mut joint = vec![vec![0.0; alphabet]; n_topics];
    let mut total = 0.0;
    for d in docs {
        for u in &d.utterances {
            for &s in &u.symbols {
                joint[d.topic][s as usize] += 1.0;
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    let pz: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let pv: Vec<f64> = (0..alphabet)
        .map(|v| joint.iter().map(|r| r[v]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (z, row) in joint.iter().enumerate() {
        for (v, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / total;
                mi += p * (p / (pz[z] * pv[v])).ln();
            }
        }
    }
    mi
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    doc_id: usize,
    index_in_doc: usize,
    doc_seed: u64,
    topic: usize,
    text: String,
    symbols: Vec<u32>,
    frames_offset: u64,
}

/// Writes `utterances.jsonl` plus the `frames.bin` sidecar. Each sidecar
/// block is `u32 D, u32 frame_count` then `frame_count × D` little-endian f32.
pub fn write_corpus(dir: &Path, docs: &[Document]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = BufWriter::new(File::create(dir.join("utterances.jsonl"))?);
    let mut frames = BufWriter::new(File::create(dir.join("frames.bin"))?);
    let mut offset = 0u64;
    for d in docs {
        for u in &d.utterances {
            let rec = UtteranceRecord {
                doc_id: d.id,
                index_in_doc: u.index_in_doc,
                doc_seed: d.seed,
                topic: d.topic,
                text: u.text.clone(),
                symbols: u.symbols.clone(),
                frames_offset: offset,
            };
            serde_json::to_writer(&mut records, &rec)?;
            records.write_all(b"\n")?;
            let dim = u.frames.first().map_or(0, Vec::len);
            frames.write_all(&(dim as u32).to_le_bytes())?;
            frames.write_all(&(u.frames.len() as u32).to_le_bytes())?;
            for f in &u.frames {
                for &v in f {
                    frames.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            offset += 8 + (u.frames.len() * dim * 4) as u64;
        }
    }
    records.flush()?;
    frames.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Document>> {
    let records = BufReader::new(File::open(dir.join("utterances.jsonl"))?);
    let mut frames_file = BufReader::new(File::open(dir.join("frames.bin"))?);
    let mut docs: Vec<Document> = Vec::new();
    for line in records.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)?;
        frames_file.seek(SeekFrom::Start(rec.frames_offset))?;
        let mut head = [0u8; 8];
        frames_file.read_exact(&mut head)?;
        let dim = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; dim * count * 4];
        frames_file.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let frames = values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        let utt = Utterance {
            doc_id: rec.doc_id,
            index_in_doc: rec.index_in_doc,
            symbols: rec.symbols,
            text: rec.text,
            frames,
        };
        match docs.last_mut() {
            Some(d) if d.id == rec.doc_id => d.utterances.push(utt),
            _ => docs.push(Document {
                id: rec.doc_id,
                seed: rec.doc_seed,
                topic: rec.topic,
                utterances: vec![utt],
            }),
        }
    }
    for d in &docs {
        if d.utterances.iter().enumerate().any(|(i, u)| u.index_in_doc != i) {
            return Err(Error::Data(format!("document {} has non-contiguous utterances", d.id)));
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            n_documents: 6,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn empty_corpus() {
        let s = CorpusSpec {
            n_documents: 0,
            ..spec()
        };
        assert!(generate_corpus(&s, 7).unwrap().1.is_empty());
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&spec(), 3).unwrap();
        let b = generate_corpus(&spec(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&spec(), 4).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let s = CorpusSpec {
            utterance_length_range: (5, 2),
            ..spec()
        };
        assert!(matches!(generate_corpus(&s, 1), Err(Error::Config(_))));
        let s = CorpusSpec {
            homophone_rate: 1.5,
            ..spec()
        };
        assert!(matches!(generate_corpus(&s, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_frames_are_means() {
        let s = CorpusSpec {
            frame_noise_sigma: 0.0,
            frames_per_token_range: (1, 1),
            ..spec()
        };
        let lex = Lexicon::build(&s, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let syms = [0u32, 3, 5];
        let frames = emit_frames(&syms, &lex, &s, &mut rng).unwrap();
        assert_eq!(frames.len(), 3);
        for (f, &sym) in frames.iter().zip(&syms) {
            assert_eq!(f, &lex.emission_means[sym as usize]);
        }
    }

    #[test]
    fn homophones_share_emissions() {
        let s = CorpusSpec {
            frame_noise_sigma: 0.0,
            ..spec()
        };
        let lex = Lexicon::build(&s, 2).unwrap();
        let (a, b) = lex
            .partner
            .iter()
            .enumerate()
            .find_map(|(a, p)| p.map(|b| (a as u32, b)))
            .expect("homophone pair");
        assert_ne!(lex.words[a as usize], lex.words[b as usize]);
        assert_ne!(lex.home_topic[a as usize], lex.home_topic[b as usize]);
        let fa = emit_frames(&[a], &lex, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let fb = emit_frames(&[b], &lex, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(fa, fb);
        let pairs = lex.partner.iter().filter(|p| p.is_some()).count();
        assert_eq!(pairs, 12);
    }

    #[test]
    fn emission_sample_mean() {
        let s = CorpusSpec {
            frame_noise_sigma: 0.1,
            frames_per_token_range: (1, 1),
            ..spec()
        };
        let lex = Lexicon::build(&s, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = vec![0.0; s.feature_dim];
        for _ in 0..1000 {
            let f = emit_frames(&[2], &lex, &s, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(&f[0]) {
                *a += v / 1000.0;
            }
        }
        for (a, m) in acc.iter().zip(&lex.emission_means[2]) {
            assert!((a - m).abs() < 0.02, "{a} vs {m}");
        }
    }

    #[test]
    fn utterance_invariants() {
        let (_, docs) = generate_corpus(&spec(), 8).unwrap();
        for d in &docs {
            assert!(!d.utterances.is_empty());
            for (i, u) in d.utterances.iter().enumerate() {
                assert_eq!(u.index_in_doc, i);
                assert!(!u.symbols.is_empty());
                assert!(u.frames.len() >= u.symbols.len());
                assert!(u.frames.iter().all(|f| f.len() == spec().feature_dim));
            }
        }
    }

    #[test]
    fn mutual_information_grows_with_strength() {
        let mi = |strength: f64| {
            let s = CorpusSpec {
                n_documents: 400,
                cross_utterance_strength: strength,
                ..spec()
            };
            let (_, docs) = generate_corpus(&s, 21).unwrap();
            topic_symbol_mutual_information(&docs, s.n_topics, s.alphabet_size)
        };
        let (a, b, c) = (mi(0.0), mi(0.5), mi(1.0));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn file_round_trip() {
        let (_, docs) = generate_corpus(&spec(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &docs).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), docs.len());
        for (a, b) in docs.iter().zip(&back) {
            assert_eq!(a.topic, b.topic);
            for (u, v) in a.utterances.iter().zip(&b.utterances) {
                assert_eq!(u.text, v.text);
                assert_eq!(u.frames.len(), v.frames.len());
                for (f, g) in u.frames.iter().zip(&v.frames) {
                    for (x, y) in f.iter().zip(g) {
                        assert_eq!(*x as f32, *y as f32);
                    }
                }
            }
        }
    }
}
