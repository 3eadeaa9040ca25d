//! Brute-force reference implementations.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use distil_asr::decode_eval::{FnLm, Hypothesis, PrefixDecoder};
use distil_asr::tokenizer::EOS;
use distil_asr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Log-probabilities over `v` tokens, a fixed pseudo-random function of
/// (`salt`, `prefix`).
pub fn table_log_probs(salt: u64, prefix: &[u32], v: usize) -> Vec<f64> {
    let mut h = DefaultHasher::new();
    (salt, prefix).hash(&mut h);
    let mut r = ChaCha8Rng::seed_from_u64(h.finish());
    let z: Vec<f64> = (0..v).map(|_| r.gen_range(-3.0..3.0)).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub type ToyFn = Box<dyn Fn(&[u32]) -> Result<Vec<f64>>>;

pub fn toy_decoder(salt: u64, v: usize) -> PrefixDecoder<ToyFn> {
    PrefixDecoder {
        vocab_size: v,
        f: Box::new(move |p: &[u32]| Ok(table_log_probs(salt, p, v))),
    }
}

pub fn toy_lm(salt: u64, v: usize) -> FnLm<ToyFn> {
    FnLm(Box::new(move |p: &[u32]| Ok(table_log_probs(salt, p, v))))
}

/// Every complete output (ending in EOS, or reaching `max_len`) with its
/// interpolated score, best first under the same ordering as the search.
pub fn exhaustive(decoder_salt: u64, lm: Option<(u64, f64)>, v: usize, max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = frontier.pop() {
        let asr = table_log_probs(decoder_salt, &prefix, v);
        let lmp = lm.map(|(s, _)| table_log_probs(s, &prefix, v));
        for tok in 0..v as u32 {
            let mut seq = prefix.clone();
            seq.push(tok);
            let mut s = score + asr[tok as usize];
            if let (Some(l), Some((_, w))) = (&lmp, lm) {
                s += w * l[tok as usize];
            }
            if tok == EOS || seq.len() == max_len {
                out.push((seq, s));
            } else {
                frontier.push((seq, s));
            }
        }
    }
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.len().cmp(&b.0.len()))
            .then(a.0.cmp(&b.0))
    });
    out
}

/// Score of a hypothesis as the search ranks it.
pub fn hyp_score(h: &Hypothesis, w: f64) -> f64 {
    h.asr_logscore + h.lm_logscore.map_or(0.0, |l| w * l)
}

/// Plain Levenshtein distance, written independently of the library.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
