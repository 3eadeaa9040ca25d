//! Byte-pair-encoding vocabulary shared by the student and both teachers.
//!
//! Text is pre-split before every space, so a piece is an optional single
//! leading space followed by non-space characters. Merges never cross piece
//! boundaries, and decoding is plain concatenation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::autodiff::checkpoint::content_hash;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
}

pub fn num_specials() -> usize {
    SPECIALS.len()
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ' ' && i > start {
            pieces.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

impl Vocabulary {
    fn from_parts(id_to_token: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("special {s} must have id {i}")));
            }
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
            merges,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut parts: Vec<String> = piece.chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_rank
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && &parts[i] == l && &parts[i + 1] == r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        out.extend(parts.iter().map(|p| self.id(p).unwrap_or(UNK)));
    }

    /// Applies merges in training order; unknown characters become UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            self.encode_piece(piece, &mut ids);
        }
        ids
    }

    /// Concatenates token strings, dropping specials.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("token id {id} out of range {}", self.len())))?;
            if !is_special(id) {
                s.push_str(tok);
            }
        }
        Ok(s)
    }

    /// Plain-text serialisation. Tokens and merges escape backslash,
    /// newline, tab and space.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#bpe-vocabulary v1");
        for (i, name) in ["pad", "sos", "eos", "mask", "unk"].iter().enumerate() {
            let _ = writeln!(s, "#special {name} {i}");
        }
        let _ = writeln!(s, "#tokens {}", self.len());
        for t in &self.id_to_token {
            let _ = writeln!(s, "{}", escape(t));
        }
        let _ = writeln!(s, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{}\t{}", escape(l), escape(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Data(format!("vocabulary file: {m}"));
        let mut count_line = None;
        for line in lines.by_ref() {
            if let Some(rest) = line.strip_prefix("#tokens ") {
                count_line = Some(rest.trim().parse::<usize>().map_err(|_| bad("token count"))?);
                break;
            }
        }
        let n = count_line.ok_or_else(|| bad("missing #tokens header"))?;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(unescape(lines.next().ok_or_else(|| bad("truncated tokens"))?)?);
        }
        let header = lines.next().ok_or_else(|| bad("missing #merges header"))?;
        let m: usize = header
            .strip_prefix("#merges ")
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad("merges header"))?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (l, r) = line.split_once('\t').ok_or_else(|| bad("merge line"))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        Vocabulary::from_parts(tokens, merges)
    }

    /// Content hash of the serialised vocabulary.
    pub fn hash(&self) -> String {
        content_hash(self.to_text().as_bytes())
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => return Err(Error::Data(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
/// the lexicographically smallest merged string) until the vocabulary has
/// `target_vocab_size` entries or no pair occurs at least twice.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(Error::Config("cannot train BPE on an empty corpus".into()));
    }
    let mut piece_counts: HashMap<&str, usize> = HashMap::new();
    let mut alphabet = BTreeSet::new();
    for text in corpus {
        for piece in pre_tokenize(text.as_ref()) {
            *piece_counts.entry(piece).or_default() += 1;
            alphabet.extend(piece.chars());
        }
    }
    let base = SPECIALS.len() + alphabet.len();
    if target_vocab_size < base {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab_size} smaller than specials + alphabet ({base})"
        )));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut pieces: Vec<String> = piece_counts.keys().map(|p| p.to_string()).collect();
    pieces.sort();
    let mut words: Vec<(Vec<String>, usize)> = pieces
        .iter()
        .map(|p| (p.chars().map(String::from).collect(), piece_counts[p.as_str()]))
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < target_vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (parts, n) in &words {
            for w in parts.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .min_by(|(pa, ca), (pb, cb)| {
                cb.cmp(ca)
                    .then_with(|| format!("{}{}", pa.0, pa.1).cmp(&format!("{}{}", pb.0, pb.1)))
                    .then_with(|| pa.cmp(pb))
            })
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((l, r)) = best else { break };
        let joined = format!("{l}{r}");
        for (parts, _) in &mut words {
            let mut i = 0;
            while i + 1 < parts.len() {
                if parts[i] == l && parts[i + 1] == r {
                    parts[i] = joined.clone();
                    parts.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((l, r));
    }
    Vocabulary::from_parts(tokens, merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = bpe_train(&["aa", "aa", "ab"], 8).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn minimal_target_gives_identity_segmentation() {
        let v = bpe_train(&["ab ba", "ab"], 5 + 3).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("ab").len(), 2);
        assert!(matches!(bpe_train(&["abc"], 7), Err(Error::Config(_))));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(bpe_train::<&str>(&[], 10), Err(Error::Config(_))));
        let v = bpe_train(&["ab"], 10).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("a").len(), 1);
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn never_merges_across_spaces() {
        let v = bpe_train(&["ka ka ka ka", "ka ka"], 40).unwrap();
        for t in v.tokens() {
            assert!(!t[1..].contains(' '), "token {t:?} spans a space");
        }
        assert_eq!(v.encode("ka ka"), vec![v.id("ka").unwrap(), v.id(" ka").unwrap()]);
    }

    #[test]
    fn unknown_symbols_map_to_unk_and_decode_checks_range() {
        let v = bpe_train(&["ab"], 10).unwrap();
        assert_eq!(v.encode("az"), vec![v.id("a").unwrap(), UNK]);
        assert!(matches!(v.decode(&[99]), Err(Error::Data(_))));
        assert_eq!(v.decode(&[SOS, v.id("a").unwrap(), EOS]).unwrap(), "a");
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = bpe_train(&["ka mi\\x", "mi\tka ka"], 30).unwrap();
        let w = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), w.hash());
    }

    proptest! {
        #[test]
        fn round_trip(words in prop::collection::vec("[kstn][aiu]{1,3}", 1..8), spaces in prop::collection::vec(1usize..3, 8)) {
            let training = ["ka sa ta", "kaka sasa", "na ni nu", "tutu kaki"];
            let v = bpe_train(&training, 40).unwrap();
            let mut text = String::new();
            for (i, w) in words.iter().enumerate() {
                if i > 0 { text.push_str(&" ".repeat(spaces[i % spaces.len()])); }
                text.push_str(w);
            }
            let ids = v.encode(&text);
            prop_assert!(ids.iter().all(|&i| !is_special(i)));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
