//! The acceptance checks. Each returns a one-line detail, `Ok` on pass.

use std::path::Path;
use std::time::Instant;

use distil_asr::corpus::{generate_corpus, CorpusSpec, Lexicon};
use distil_asr::decode_eval::{
    beam_search, greedy, nbest_rescore, search, shallow_fusion_decode, CausalLm, PseudoLogLikelihood, SearchOptions,
    StudentDecoder,
};
use distil_asr::distillation::{
    asr_ce_loss, assemble_context_window, combined_loss, entropy, kd_loss, kl_divergence, mixed_label_loss,
    softmax_temperature, topk_normalize, SoftEntry,
};
use distil_asr::harness::config::ExperimentConfig;
use distil_asr::harness::data::{mask_count, prepare_document, sample_mlm_masks};
use distil_asr::harness::experiment::{
    pretrain_teacher, run_matrix_prepared, soft_labels_from, training_logits, utterances, write_matrix_outputs,
    ExperimentMatrix, MatrixArtifacts, MatrixReport, PreparedExperiment,
};
use distil_asr::harness::train::{max_decode_len, soft_label_lookup, train_asr};
use distil_asr::models::{LmMode, Seq2SeqModel, TransformerConfig, TransformerLm};
use distil_asr::tokenizer::{bpe_train, Vocabulary, EOS, MASK};
use distil_asr::distillation::ContextSize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::tiny_config;
use super::gradients;
use super::oracles::{exhaustive, hyp_score, toy_decoder, toy_lm};

pub type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_dist(r: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..v).map(|_| r.gen_range(-4.0..4.0)).collect();
    softmax_temperature(&z, 1.0).unwrap()
}

pub fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(71);
    let (mut worst_mix, mut worst_kd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, v) = (r.gen_range(1..8), r.gen_range(2..16));
        let p: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut r, v)).collect();
        let y: Vec<u32> = (0..n).map(|_| r.gen_range(0..v as u32)).collect();
        let q: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut r, v)).collect();
        let soft: Vec<Vec<SoftEntry>> = q.iter().map(|d| topk_normalize(d, v)).collect();
        let alpha = r.gen_range(0.0..=1.0);
        let kd = kd_loss(&p, &soft).map_err(|e| e.to_string())?;
        let interpolated = combined_loss(asr_ce_loss(&p, &y, 0.0).map_err(|e| e.to_string())?, kd, alpha)
            .map_err(|e| e.to_string())?;
        let mixed = mixed_label_loss(&p, &y, &soft, alpha).map_err(|e| e.to_string())?;
        worst_mix = worst_mix.max((interpolated - mixed).abs());
        let split: f64 = (0..n).map(|i| kl_divergence(&q[i], &p[i]) + entropy(&q[i])).sum();
        worst_kd = worst_kd.max((kd - split).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_mix <= 1e-10 && worst_kd <= 1e-9 && secs < 1.0,
        format!("max |interpolated - mixed| {worst_mix:.1e}, max |kd - (KL + H)| {worst_kd:.1e}, {secs:.3}s"),
    )
}

pub fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let results = gradients::gradient_suite().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e <= gradients::TOL))
        .map(|(n, e)| format!("{n} ({e:.1e})"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    check(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} checks at {} points, worst rel err {worst:.1e}, {secs:.1}s{}",
            results.len(),
            gradients::POINTS,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

pub fn distillation_mechanics() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(72);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let v = r.gen_range(2..24);
        let z: Vec<f64> = (0..v).map(|_| r.gen_range(-6.0..6.0)).collect();
        let t = r.gen_range(0.2..6.0);
        let k = r.gen_range(1..=v);
        let top = topk_normalize(&softmax_temperature(&z, t).map_err(|e| e.to_string())?, k);
        let picked: Vec<f64> = top.iter().map(|e| z[e.0 as usize]).collect();
        let restricted = softmax_temperature(&picked, t).map_err(|e| e.to_string())?;
        for (e, q) in top.iter().zip(&restricted) {
            worst = worst.max((e.1 - q).abs());
        }
    }

    let spec = CorpusSpec {
        n_documents: 50,
        ..CorpusSpec::default()
    };
    let (_, docs) = generate_corpus(&spec, 9).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = docs.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())).collect();
    let vocab = bpe_train(&lines, 60).map_err(|e| e.to_string())?;
    let (mut windows, mut bad) = (0, 0);
    for d in &docs {
        let doc = prepare_document(d, &vocab).tokens;
        for idx in 0..doc.spans.len() {
            let span = doc.spans[idx].clone();
            let n = span.len();
            for w in n..=n + 40 {
                let win = assemble_context_window(&doc, idx, w).map_err(|e| e.to_string())?;
                let (l, rr) = (win.left.len(), win.right.len());
                let b = w - n;
                let room = span.start >= b / 2 && doc.stream.len() - span.end >= b.div_ceil(2);
                let ok = l + n + rr == w.min(doc.stream.len())
                    && (!room || l.abs_diff(rr) <= 1)
                    && win.left == doc.stream[span.start - l..span.start]
                    && win.right == doc.stream[span.end..span.end + rr];
                bad += !ok as usize;
                windows += 1;
            }
        }
    }

    let mut wrong_counts = 0;
    for len in 1..=512usize {
        let w = vec![7u32; len];
        let expected = (0.08 * len as f64).floor() as usize;
        if sample_mlm_masks(&w, 0.08, &mut r).len() != expected || mask_count(len, 0.08) != expected {
            wrong_counts += 1;
        }
    }
    check(
        worst <= 1e-12 && bad == 0 && wrong_counts == 0,
        format!(
            "top-K max dev {worst:.1e} over 200 draws; {windows} windows, {bad} violations; {wrong_counts} wrong mask counts over lengths 1..512"
        ),
    )
}

fn random_models(vocab: usize, feature_dim: usize) -> (Seq2SeqModel, TransformerLm, TransformerLm) {
    let cfg = ExperimentConfig::standard();
    let student = Seq2SeqModel::new(cfg.student.model_config(feature_dim, vocab), &mut ChaCha8Rng::seed_from_u64(81));
    let lm_cfg = |mode| TransformerConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 64,
        mode,
        dropout: 0.0,
    };
    let causal = TransformerLm::new(lm_cfg(LmMode::Causal), &mut ChaCha8Rng::seed_from_u64(82)).unwrap();
    let mlm = TransformerLm::new(lm_cfg(LmMode::Mlm), &mut ChaCha8Rng::seed_from_u64(83)).unwrap();
    (student, causal, mlm)
}

fn alpha_zero_trajectory() -> std::result::Result<bool, String> {
    let cfg = tiny_config();
    let prep = distil_asr::harness::experiment::prepare_experiment(&cfg).map_err(|e| e.to_string())?;
    let w = cfg.teacher.window;
    let (teacher, _) = pretrain_teacher(&cfg, &prep, LmMode::Mlm, w).map_err(|e| e.to_string())?;
    let logits = training_logits(&teacher, &prep.data.train, ContextSize::Window(w)).map_err(|e| e.to_string())?;
    let d = cfg.distill.config(ContextSize::Window(w), 2.0, 0.0);
    let set = soft_labels_from(&logits, &d, &teacher, &prep.vocab).map_err(|e| e.to_string())?;
    let map = soft_label_lookup(&set, &prep.vocab).map_err(|e| e.to_string())?;
    let (train, dev) = (utterances(&prep.data.train), utterances(&prep.data.dev));
    let sc = cfg.student.model_config(cfg.corpus.feature_dim, prep.vocab.len());
    let run = |labels| train_asr(sc.clone(), &train, labels, &cfg.asr, &d, &dev, &prep.vocab, 5, 4);
    let a = run(Some(&map)).map_err(|e| e.to_string())?;
    let b = run(None).map_err(|e| e.to_string())?;
    Ok(a.losses == b.losses && a.model.params == b.model.params)
}

pub fn degenerate_equivalences() -> Outcome {
    let spec = CorpusSpec {
        n_documents: 40,
        ..CorpusSpec::default()
    };
    let (_, docs) = generate_corpus(&spec, 13).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = docs.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())).collect();
    let vocab = bpe_train(&lines, 64).map_err(|e| e.to_string())?;
    let prepared: Vec<_> = docs.iter().map(|d| prepare_document(d, &vocab)).collect();
    let utts: Vec<_> = prepared.iter().flat_map(|d| d.utterances.iter()).take(200).collect();
    if utts.len() < 200 {
        return Err(format!("only {} utterances", utts.len()));
    }
    let (student, causal, mlm) = random_models(vocab.len(), spec.feature_dim);
    let (mut sf_same, mut rescore_same, mut greedy_same) = (0, 0, 0);
    let err = |e: distil_asr::Error| e.to_string();
    for u in &utts {
        let max_len = max_decode_len(u.frames.len(), 4);
        let plain = beam_search(&student, &u.frames, 5, max_len).map_err(err)?;
        let fused = shallow_fusion_decode(&student, &causal, &u.frames, 5, max_len, 0.0).map_err(err)?;
        let same = plain.len() == fused.len() && plain.iter().zip(&fused).all(|(a, b)| a.tokens == b.tokens);
        sf_same += same as usize;
        let one = nbest_rescore(&plain[..1], &PseudoLogLikelihood(&mlm), 0.7).map_err(err)?;
        let one_causal = nbest_rescore(&plain[..1], &CausalLm(&causal), 0.7).map_err(err)?;
        rescore_same += (one == plain[0] && one_causal == plain[0]) as usize;
        let dec = StudentDecoder::new(&student, &u.frames).map_err(err)?;
        let b1 = search(&dec, None, SearchOptions::new(1, max_len)).map_err(err)?;
        let g = greedy(&dec, max_len).map_err(err)?;
        greedy_same += (b1[0].tokens == g.tokens) as usize;
    }
    let alpha0 = alpha_zero_trajectory()?;
    let n = utts.len();
    check(
        sf_same == n && rescore_same == n && greedy_same == n && alpha0,
        format!(
            "fusion w=0 identical {sf_same}/{n}; rescore n=1 returns 1-best {rescore_same}/{n}; beam 1 = greedy {greedy_same}/{n}; alpha 0 trajectory identical: {alpha0}"
        ),
    )
}

pub fn oracle_decoding() -> Outcome {
    let start = Instant::now();
    let (v, max_len) = (5, 3);
    let (mut plain_ok, mut fused_ok) = (0, 0);
    let cases = 20;
    for salt in 0..cases {
        for (lm, counter) in [(None, &mut plain_ok), (Some((500 + salt, 0.6)), &mut fused_ok)] {
            let dec = toy_decoder(salt, v);
            let lm_model = lm.map(|(s, _)| toy_lm(s, v));
            let fusion = lm_model.as_ref().map(|m| (m as &dyn distil_asr::decode_eval::PrefixLm, 0.6));
            let got = search(&dec, fusion, SearchOptions::new(v.pow(3), max_len)).map_err(|e| e.to_string())?;
            let want = exhaustive(salt, lm, v, max_len);
            let w = lm.map_or(0.0, |l| l.1);
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(h, (t, s))| &h.tokens == t && (hyp_score(h, w) - s).abs() < 1e-12);
            *counter += same as usize;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        plain_ok == cases as usize && fused_ok == cases as usize && secs < 10.0,
        format!("beam 125 equals exhaustive search on {plain_ok}/{cases} decoders, {fused_ok}/{cases} with fusion, {secs:.2}s"),
    )
}

pub struct MatrixRun {
    pub cfg: ExperimentConfig,
    pub prep: PreparedExperiment,
    pub report: MatrixReport,
    pub artifacts: MatrixArtifacts,
    pub secs: f64,
}

/// The full standard-preset matrix; outputs go to `out`.
pub fn standard_matrix(out: &Path, log: &mut dyn FnMut(&str)) -> std::result::Result<MatrixRun, String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::standard();
    let prep = distil_asr::harness::experiment::prepare_experiment(&cfg).map_err(|e| e.to_string())?;
    let matrix = ExperimentMatrix::from_config(&cfg);
    let (report, artifacts) = run_matrix_prepared(&cfg, &prep, &matrix, log).map_err(|e| e.to_string())?;
    write_matrix_outputs(out, &cfg, &prep, &report, &artifacts).map_err(|e| e.to_string())?;
    Ok(MatrixRun {
        cfg,
        prep,
        report,
        artifacts,
        secs: start.elapsed().as_secs_f64(),
    })
}

pub fn table1_ordering(run: &MatrixRun) -> Outcome {
    let w = run.cfg.teacher.window;
    let get = |name: &str| {
        run.report
            .median_test_wer(name)
            .ok_or_else(|| format!("no results for {name}"))
    };
    let base = get("baseline")?;
    let mlm_w = get(&format!("mlm-p{w}-{w}"))?;
    let mlm_u = get(&format!("mlm-p{w}-utterance"))?;
    let causal_w = get(&format!("causal-p{w}-{w}"))?;
    let causal_u = get(&format!("causal-p{w}-utterance"))?;
    let reduction = (base - mlm_w) / base;
    let a = mlm_w < base && reduction >= 0.03;
    let b = mlm_w <= causal_w;
    let c = mlm_w <= mlm_u;
    check(
        a && b && c,
        format!(
            "median test WER baseline {:.2}, causal-utt {:.2}, causal-W {:.2}, MLM-utt {:.2}, MLM-W {:.2}; (a) {} rel. reduction {:.1}%, (b) {}, (c) {}; matrix {:.1} min",
            100.0 * base,
            100.0 * causal_u,
            100.0 * causal_w,
            100.0 * mlm_u,
            100.0 * mlm_w,
            pass(a),
            100.0 * reduction,
            pass(b),
            pass(c),
            run.secs / 60.0
        ),
    )
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn lm_comparison(run: &MatrixRun, out: &Path) -> Outcome {
    let beam = run.cfg.decode.beam_width;
    let distilled = run
        .report
        .median_lm_wer("distilled", beam)
        .ok_or("no distilled row in the LM comparison")?;
    let sf = run
        .report
        .median_lm_wer("baseline+SF", beam)
        .ok_or("no baseline+SF row in the LM comparison")?;
    let csv = out.join("lm_comparison.csv");
    let written = csv.is_file();
    check(
        distilled <= sf && written,
        format!(
            "beam {beam} median WER distilled {:.2} vs baseline+SF {:.2}; report {}",
            100.0 * distilled,
            100.0 * sf,
            csv.display()
        ),
    )
}

/// Single-token spelling of `text` at the position where `a` and `b` differ.
fn differing_token(vocab: &Vocabulary, text_a: &str, text_b: &str) -> Option<(Vec<u32>, usize, u32, u32)> {
    let (ta, tb) = (vocab.encode(text_a), vocab.encode(text_b));
    if ta.len() != tb.len() {
        return None;
    }
    let diff: Vec<usize> = (0..ta.len()).filter(|&i| ta[i] != tb[i]).collect();
    (diff.len() == 1).then(|| (ta.clone(), diff[0], ta[diff[0]], tb[diff[0]]))
}

fn topical_utterances(lex: &Lexicon, topic: usize, skip: &[usize]) -> String {
    let words: Vec<&str> = (0..lex.words.len())
        .filter(|&s| lex.home_topic[s] == topic && !skip.contains(&s))
        .map(|s| lex.words[s].as_str())
        .collect();
    let first: Vec<&str> = words.iter().cycle().take(5).copied().collect();
    let second: Vec<&str> = words.iter().rev().cycle().take(5).copied().collect();
    format!("{}\n{}", first.join(" "), second.join(" "))
}

fn stream_of(vocab: &Vocabulary, utts: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for line in utts.lines() {
        out.extend(vocab.encode(line));
        out.push(EOS);
    }
    out
}

pub fn bidirectionality(run: &MatrixRun) -> Outcome {
    let w = run.cfg.teacher.window;
    let mlm = run
        .artifacts
        .teachers
        .get(&(LmMode::Mlm, w))
        .ok_or("no trained MLM teacher")?;
    let causal = run
        .artifacts
        .teachers
        .get(&(LmMode::Causal, w))
        .ok_or("no trained causal teacher")?;
    let (lex, _) = generate_corpus(&run.cfg.corpus, run.cfg.corpus_seed).map_err(|e| e.to_string())?;
    let vocab = &run.prep.vocab;

    let (mut instances, mut changed, mut flipped) = (0, 0, 0);
    let mut example = String::new();
    for a in 0..lex.words.len() {
        let Some(b) = lex.partner[a].map(|b| b as usize) else { continue };
        if a > b || lex.home_topic[a] == lex.home_topic[b] {
            continue;
        }
        for lead in [None, Some(a)] {
            let (text_a, text_b) = match lead {
                None => (lex.words[a].clone(), lex.words[b].clone()),
                Some(_) => (format!("{} {}", lex.words[a], lex.words[a]), format!("{} {}", lex.words[a], lex.words[b])),
            };
            let Some((tokens, pos, tok_a, tok_b)) = differing_token(vocab, &text_a, &text_b) else { continue };
            let mut current = vec![EOS];
            current.extend(&tokens);
            current[1 + pos] = MASK;
            current.push(EOS);
            let pref = |right: &str| -> std::result::Result<(Vec<f64>, bool), String> {
                let mut seq = current.clone();
                seq.extend(stream_of(vocab, right));
                seq.truncate(w);
                let logits = mlm.mlm_forward(&seq).map_err(|e| e.to_string())?;
                let row = logits.row(1 + pos).to_vec();
                Ok((row.clone(), row[tok_a as usize] > row[tok_b as usize]))
            };
            let (ra, pa) = pref(&topical_utterances(&lex, lex.home_topic[a], &[a, b]))?;
            let (rb, pb) = pref(&topical_utterances(&lex, lex.home_topic[b], &[a, b]))?;
            instances += 1;
            if ra != rb {
                changed += 1;
            }
            if pa && !pb {
                flipped += 1;
                if example.is_empty() {
                    example = format!("'{}' vs '{}'", lex.words[a], lex.words[b]);
                }
            }
        }
    }

    // causal teacher: perturb every right-hand position of random sequences
    let mut r = ChaCha8Rng::seed_from_u64(91);
    let (mut causal_checks, mut causal_bad) = (0, 0);
    for _ in 0..20 {
        let len = r.gen_range(4..=w);
        let seq: Vec<u32> = (0..len).map(|_| r.gen_range(5..vocab.len() as u32)).collect();
        let base = causal.causal_forward(&seq).map_err(|e| e.to_string())?;
        for j in 1..len {
            let mut other = seq.clone();
            other[j] = r.gen_range(5..vocab.len() as u32);
            let out = causal.causal_forward(&other).map_err(|e| e.to_string())?;
            for i in 0..j {
                causal_checks += 1;
                causal_bad += (out.row(i) != base.row(i)) as usize;
            }
        }
    }
    check(
        flipped >= 1 && changed >= 1 && causal_bad == 0,
        format!(
            "MLM prediction changed on {changed}/{instances} homophone instances, homophone preference flipped on {flipped}{}; causal rows changed {causal_bad}/{causal_checks}",
            if example.is_empty() { String::new() } else { format!(" (e.g. {example})") }
        ),
    )
}
