//! Synthetic planted-evidence corpus.
//!
//! Each episode is a sequence of frames carrying subtitle tokens, object ids,
//! and dense-caption tokens, plus a question, five candidate answers, and a
//! ground-truth time span. The token pair (question entity, correct-answer
//! evidence token) co-occurs only inside the span and only in the episode's
//! designated evidence stream; distractor answer tokens appear outside the
//! span without the entity (matching the correct answer's raw token
//! frequency) or nowhere. A scan oracle verifies these invariants directly
//! from serialized data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::FRAME_INTERVAL_SEC;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("corpus audit failed: {0}")]
    Audit(String),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Subtitle,
    Object,
    DenseCap,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Subtitle, Stream::Object, Stream::DenseCap];

    pub fn name(&self) -> &'static str {
        match self {
            Stream::Subtitle => "subtitle",
            Stream::Object => "object",
            Stream::DenseCap => "densecap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub subtitle: Vec<u32>,
    pub objects: Vec<u32>,
    pub densecap: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub frames: Vec<Frame>,
    pub question: Vec<u32>,
    pub answers: Vec<Vec<u32>>,
    pub gt_answer: usize,
    pub gt_span: (f64, f64),
    pub evidence_stream: Stream,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub frames: usize,
    pub objects_per_frame: usize,
    pub subtitle_len_min: usize,
    pub subtitle_len_max: usize,
    pub vocab_size: usize,
    pub object_codebook: usize,
    pub mix_subtitle: f64,
    pub mix_object: f64,
    pub mix_densecap: f64,
    /// Probability that a distractor answer is planted outside the span
    /// (otherwise it appears nowhere).
    pub distractor_outside_span_prob: f64,
    pub span_len_min: usize,
    pub span_len_max: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_episodes: 2000,
            val_episodes: 500,
            test_episodes: 500,
            frames: 12,
            objects_per_frame: 6,
            subtitle_len_min: 4,
            subtitle_len_max: 10,
            vocab_size: 400,
            object_codebook: 80,
            mix_subtitle: 0.34,
            mix_object: 0.33,
            mix_densecap: 0.33,
            distractor_outside_span_prob: 0.5,
            span_len_min: 2,
            span_len_max: 4,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> DataResult<()> {
        let mix = self.mix_subtitle + self.mix_object + self.mix_densecap;
        if (mix - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("evidence mix sums to {mix}, expected 1")));
        }
        if self.train_episodes == 0 || self.val_episodes == 0 || self.test_episodes == 0 {
            return Err(DataError::Config("all split sizes must be >= 1".into()));
        }
        if self.frames < 3 || self.span_len_min == 0 || self.span_len_max >= self.frames {
            return Err(DataError::Config("span lengths must fit strictly inside the frame count".into()));
        }
        if self.subtitle_len_min < 2 || self.subtitle_len_max < self.subtitle_len_min {
            return Err(DataError::Config("bad subtitle length range".into()));
        }
        Vocabulary::build(self).map(|_| ())
    }
}

/// Token role layout is a pure function of the config, so vocabularies are
/// stable across save/load and identical for identical configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub object_codebook: usize,
    pub entities: (u32, u32),
    pub attributes: (u32, u32),
    pub object_names: (u32, u32),
    pub fillers: (u32, u32),
}

impl Vocabulary {
    pub fn build(cfg: &CorpusConfig) -> DataResult<Self> {
        let n_entities = 60.min(cfg.vocab_size / 6);
        let n_attrs = 120.min(cfg.vocab_size / 3);
        let n_obj = cfg.object_codebook;
        let reserved = 2 + n_entities + n_attrs + n_obj;
        if reserved + 40 > cfg.vocab_size {
            return Err(DataError::Config(format!(
                "vocab size {} too small for {} entities + {} attributes + {} object names + fillers",
                cfg.vocab_size, n_entities, n_attrs, n_obj
            )));
        }
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let entities = span_push(&mut tokens, "ent", n_entities);
        let attributes = span_push(&mut tokens, "attr", n_attrs);
        let object_names = span_push(&mut tokens, "obj", n_obj);
        let n_fillers = cfg.vocab_size - tokens.len();
        let fillers = span_push(&mut tokens, "w", n_fillers);
        Ok(Vocabulary {
            tokens,
            object_codebook: n_obj,
            entities,
            attributes,
            object_names,
            fillers,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32).unwrap_or(UNK)
    }

    /// Clamp an id into the vocabulary, mapping unknowns to UNK.
    pub fn clamp(&self, id: u32) -> u32 {
        if (id as usize) < self.tokens.len() {
            id
        } else {
            UNK
        }
    }

    pub fn object_name(&self, object_id: u32) -> u32 {
        self.object_names.0 + object_id
    }

    /// The object id whose name is `token`, if it is an object-name token.
    pub fn object_of_token(&self, token: u32) -> Option<u32> {
        (self.object_names.0..self.object_names.1).contains(&token).then(|| token - self.object_names.0)
    }
}

fn span_push(tokens: &mut Vec<String>, prefix: &str, count: usize) -> (u32, u32) {
    let start = tokens.len() as u32;
    for i in 0..count {
        tokens.push(format!("{prefix}{i:03}"));
    }
    (start, tokens.len() as u32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Episode]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn pick_range(rng: &mut ChaCha8Rng, range: (u32, u32)) -> u32 {
    rng.gen_range(range.0..range.1)
}

fn pick_range_excluding(rng: &mut ChaCha8Rng, range: (u32, u32), used: &[u32]) -> u32 {
    loop {
        let v = pick_range(rng, range);
        if !used.contains(&v) {
            return v;
        }
    }
}

struct EpisodePlan {
    entity: u32,
    /// Answer evidence token per slot (correct + distractors).
    answer_tokens: Vec<u32>,
    gt_answer: usize,
    span_frames: Vec<usize>,
    /// Out-of-span frames where each planted distractor token appears
    /// (without the entity); empty for distractors that appear nowhere.
    distractor_frames: Vec<Vec<usize>>,
    stream: Stream,
}

fn generate_episode(
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
    id: String,
    gt_slot: usize,
    rng: &mut ChaCha8Rng,
) -> Episode {
    let t_f = cfg.frames;
    let span_len = rng.gen_range(cfg.span_len_min..=cfg.span_len_max);
    let span_start = rng.gen_range(0..=t_f - span_len - 1);
    let span_frames: Vec<usize> = (span_start..span_start + span_len).collect();
    let out_frames: Vec<usize> = (0..t_f).filter(|t| !span_frames.contains(t)).collect();

    let r = rng.gen::<f64>();
    let stream = if r < cfg.mix_subtitle {
        Stream::Subtitle
    } else if r < cfg.mix_subtitle + cfg.mix_object {
        Stream::Object
    } else {
        Stream::DenseCap
    };

    let entity = pick_range(rng, vocab.entities);
    let answer_pool = if stream == Stream::Object { vocab.object_names } else { vocab.attributes };
    let mut answer_tokens = Vec::with_capacity(5);
    for _ in 0..5 {
        answer_tokens.push(pick_range_excluding(rng, answer_pool, &answer_tokens));
    }
    // Stratified by episode index so every split is exactly slot-balanced.
    let gt_answer = gt_slot;

    let mut distractor_frames = vec![Vec::new(); 5];
    for (slot, frames) in distractor_frames.iter_mut().enumerate() {
        if slot == gt_answer {
            continue;
        }
        if rng.gen::<f64>() < cfg.distractor_outside_span_prob {
            // plant at as many out-of-span frames as the span length, so raw
            // token frequency alone cannot separate correct from distractor
            let mut pool = out_frames.clone();
            pool.shuffle(rng);
            frames.extend(pool.into_iter().take(span_len));
            frames.sort_unstable();
        }
    }

    let plan = EpisodePlan { entity, answer_tokens, gt_answer, span_frames, distractor_frames, stream };
    realize_episode(cfg, vocab, id, &plan, rng)
}

fn realize_episode(
    cfg: &CorpusConfig,
    vocab: &Vocabulary,
    id: String,
    plan: &EpisodePlan,
    rng: &mut ChaCha8Rng,
) -> Episode {
    let filler = |rng: &mut ChaCha8Rng| pick_range(rng, vocab.fillers);
    // Tokens that must never appear where they were not planted.
    let forbidden_tokens: Vec<u32> = std::iter::once(plan.entity).chain(plan.answer_tokens.iter().copied()).collect();
    let forbidden_objects: Vec<u32> =
        plan.answer_tokens.iter().filter_map(|&t| vocab.object_of_token(t)).collect();

    // Which answer slot (if any) is planted at a frame.
    let planted_at = |t: usize| -> Option<usize> {
        if plan.span_frames.contains(&t) {
            return Some(plan.gt_answer);
        }
        plan.distractor_frames.iter().position(|frames| frames.contains(&t))
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let planted = planted_at(t);

        let mut subtitle: Vec<u32> = {
            let len = rng.gen_range(cfg.subtitle_len_min..=cfg.subtitle_len_max);
            (0..len).map(|_| filler(rng)).collect()
        };
        let mut densecap: Vec<u32> = Vec::new();
        let mut objects: Vec<u32> = Vec::new();
        for _ in 0..cfg.objects_per_frame {
            objects.push(pick_range_excluding(rng, (0, cfg.object_codebook as u32), &forbidden_objects));
        }
        // dense captions name a couple of the frame's objects
        densecap.push(vocab.object_name(objects[0]));
        let cap_len = rng.gen_range(3..=6);
        for _ in 0..cap_len {
            densecap.push(filler(rng));
        }

        // scrub accidental forbidden tokens from text streams
        for tok in subtitle.iter_mut().chain(densecap.iter_mut()) {
            while forbidden_tokens.contains(tok) {
                *tok = filler(rng);
            }
        }

        if let Some(slot) = planted {
            let answer_token = plan.answer_tokens[slot];
            // The question entity accompanies only the correct answer's
            // evidence; distractor tokens appear alone, so entity/answer
            // co-occurrence is decidable frame-locally while raw answer-token
            // frequency is identical for planted distractors and the answer.
            let with_entity = slot == plan.gt_answer;
            match plan.stream {
                Stream::Subtitle => {
                    plant_tokens(&mut subtitle, with_entity.then_some(plan.entity), answer_token, rng);
                }
                Stream::DenseCap => {
                    plant_tokens(&mut densecap, with_entity.then_some(plan.entity), answer_token, rng);
                }
                Stream::Object => {
                    let obj = vocab.object_of_token(answer_token).expect("object answers map to the codebook");
                    let at = rng.gen_range(0..objects.len());
                    objects[at] = obj;
                    if objects[0] == obj {
                        // keep the caption from leaking the planted object
                        densecap[0] = vocab.object_name(pick_range_excluding(
                            rng,
                            (0, cfg.object_codebook as u32),
                            &forbidden_objects,
                        ));
                    }
                    if with_entity {
                        let at = rng.gen_range(0..subtitle.len());
                        subtitle[at] = plan.entity;
                    }
                }
            }
        }
        frames.push(Frame { subtitle, objects, densecap });
    }

    let mut question: Vec<u32> = (0..rng.gen_range(3..=5)).map(|_| filler(rng)).collect();
    let at = rng.gen_range(0..=question.len());
    question.insert(at, plan.entity);

    let answers: Vec<Vec<u32>> = plan
        .answer_tokens
        .iter()
        .map(|&a| {
            let mut ans = vec![a];
            for _ in 0..rng.gen_range(0..=2) {
                ans.push(filler(rng));
            }
            ans.shuffle(rng);
            ans
        })
        .collect();

    let span = (
        plan.span_frames[0] as f64 * FRAME_INTERVAL_SEC,
        *plan.span_frames.last().unwrap() as f64 * FRAME_INTERVAL_SEC,
    );
    Episode {
        id,
        frames,
        question,
        answers,
        gt_answer: plan.gt_answer,
        gt_span: span,
        evidence_stream: plan.stream,
    }
}

fn plant_tokens(line: &mut [u32], entity: Option<u32>, answer: u32, rng: &mut ChaCha8Rng) {
    let i = rng.gen_range(0..line.len());
    line[i] = answer;
    if let Some(entity) = entity {
        let j = loop {
            let j = rng.gen_range(0..line.len());
            if j != i {
                break j;
            }
        };
        line[j] = entity;
    }
}

/// Deterministic generation: the same config (including seed) produces a
/// byte-identical corpus. Each episode derives its own RNG stream.
pub fn generate_corpus(cfg: &CorpusConfig) -> DataResult<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::build(cfg)?;
    let gen_split = |tag: u64, count: usize, name: &str| -> Vec<Episode> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(tag << 32).wrapping_add(i as u64),
                );
                generate_episode(cfg, &vocab, format!("{name}-{i:05}"), i % 5, &mut rng)
            })
            .collect()
    };
    let train = gen_split(1, cfg.train_episodes, "train");
    let val = gen_split(2, cfg.val_episodes, "val");
    let test = gen_split(3, cfg.test_episodes, "test");
    Ok(Corpus { config: cfg.clone(), vocab, train, val, test })
}

fn write_jsonl(path: &Path, episodes: &[Episode]) -> DataResult<()> {
    let mk_err = |e: std::io::Error| DataError::Io { path: path.display().to_string(), source: e };
    let mut f = fs::File::create(path).map_err(mk_err)?;
    for ep in episodes {
        let line = serde_json::to_string(ep).expect("episodes serialize");
        writeln!(f, "{line}").map_err(mk_err)?;
    }
    Ok(())
}

fn read_jsonl(path: &Path) -> DataResult<Vec<Episode>> {
    let f = fs::File::open(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Write a corpus as a directory of JSON-lines splits plus vocabulary/config.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> DataResult<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    let meta = serde_json::json!({ "config": corpus.config, "vocab": corpus.vocab });
    fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&dir.join("val.jsonl"), &corpus.val)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test)
}

pub fn load_corpus(dir: &Path) -> DataResult<Corpus> {
    let meta_path = dir.join("corpus.json");
    let meta = fs::read_to_string(&meta_path)
        .map_err(|e| DataError::Io { path: meta_path.display().to_string(), source: e })?;
    #[derive(Deserialize)]
    struct Meta {
        config: CorpusConfig,
        vocab: Vocabulary,
    }
    let meta: Meta = serde_json::from_str(&meta).map_err(|e| DataError::Parse {
        path: meta_path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(Corpus {
        config: meta.config,
        vocab: meta.vocab,
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    })
}

/// Frames of an episode where the question entity co-occurs with `token`
/// (in any text stream, or via the object codebook for object-name tokens).
pub fn cooccurrence_frames(ep: &Episode, vocab: &Vocabulary, entity: u32, token: u32) -> Vec<usize> {
    let mut frames = Vec::new();
    for (t, frame) in ep.frames.iter().enumerate() {
        let has_entity =
            frame.subtitle.contains(&entity) || frame.densecap.contains(&entity);
        let has_token = frame.subtitle.contains(&token)
            || frame.densecap.contains(&token)
            || vocab
                .object_of_token(token)
                .map(|obj| frame.objects.contains(&obj))
                .unwrap_or(false);
        if has_entity && has_token {
            frames.push(t);
        }
    }
    frames
}

fn span_frame_set(ep: &Episode) -> Vec<usize> {
    (0..ep.num_frames())
        .filter(|&t| {
            let time = t as f64 * FRAME_INTERVAL_SEC;
            time >= ep.gt_span.0 && time <= ep.gt_span.1
        })
        .collect()
}

/// The entity token of a question (the unique entity-range token).
pub fn question_entity(ep: &Episode, vocab: &Vocabulary) -> Option<u32> {
    ep.question.iter().copied().find(|t| (vocab.entities.0..vocab.entities.1).contains(t))
}

/// Scan oracle over a split: verifies every episode invariant directly from
/// the data, without any model.
pub fn audit_split(episodes: &[Episode], vocab: &Vocabulary, name: &str) -> DataResult<()> {
    if episodes.is_empty() {
        return Err(DataError::Audit(format!("{name}: empty split")));
    }
    let mut slot_counts = [0usize; 5];
    for ep in episodes {
        if ep.answers.len() != 5 {
            return Err(DataError::Audit(format!("{}: {} answers", ep.id, ep.answers.len())));
        }
        if ep.gt_answer >= 5 {
            return Err(DataError::Audit(format!("{}: gt_answer {}", ep.id, ep.gt_answer)));
        }
        slot_counts[ep.gt_answer] += 1;
        let max_time = (ep.num_frames() - 1) as f64 * FRAME_INTERVAL_SEC;
        if ep.gt_span.0 > ep.gt_span.1 || ep.gt_span.0 < 0.0 || ep.gt_span.1 > max_time {
            return Err(DataError::Audit(format!("{}: bad span {:?}", ep.id, ep.gt_span)));
        }
        let span = span_frame_set(ep);
        if span.is_empty() {
            return Err(DataError::Audit(format!("{}: span covers no frames", ep.id)));
        }
        let entity = question_entity(ep, vocab)
            .ok_or_else(|| DataError::Audit(format!("{}: no entity in question", ep.id)))?;
        for (slot, ans) in ep.answers.iter().enumerate() {
            let evidence = ans
                .iter()
                .copied()
                .find(|t| {
                    (vocab.attributes.0..vocab.attributes.1).contains(t)
                        || (vocab.object_names.0..vocab.object_names.1).contains(t)
                })
                .ok_or_else(|| DataError::Audit(format!("{}: answer {slot} has no evidence token", ep.id)))?;
            let cooc = cooccurrence_frames(ep, vocab, entity, evidence);
            if slot == ep.gt_answer {
                if cooc.is_empty() || !cooc.iter().all(|t| span.contains(t)) {
                    return Err(DataError::Audit(format!(
                        "{}: correct answer co-occurrence {:?} not confined to span {:?}",
                        ep.id, cooc, span
                    )));
                }
            } else if !cooc.is_empty() {
                return Err(DataError::Audit(format!(
                    "{}: distractor {slot} co-occurs with the entity at {:?}",
                    ep.id, cooc
                )));
            }
        }
    }
    let n = episodes.len() as f64;
    for (slot, &count) in slot_counts.iter().enumerate() {
        let frac = count as f64 / n;
        // binomial noise: keep the +-2% contract for large splits, loosen for tiny ones
        let tol = (0.02f64).max(3.0 * (0.2 * 0.8 / n).sqrt());
        if (frac - 0.2).abs() > tol {
            return Err(DataError::Audit(format!(
                "{name}: answer slot {slot} frequency {frac:.3} outside 0.2 +- {tol:.3}"
            )));
        }
    }
    Ok(())
}

pub fn audit_corpus(corpus: &Corpus) -> DataResult<()> {
    audit_split(&corpus.train, &corpus.vocab, "train")?;
    audit_split(&corpus.val, &corpus.vocab, "val")?;
    audit_split(&corpus.test, &corpus.vocab, "test")
}

/// Token-id histogram of a split; used by tests and `inspect`.
pub fn token_histogram(episodes: &[Episode]) -> HashMap<u32, usize> {
    let mut h = HashMap::new();
    for ep in episodes {
        for f in &ep.frames {
            for &t in f.subtitle.iter().chain(&f.densecap) {
                *h.entry(t).or_insert(0) += 1;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            train_episodes: 40,
            val_episodes: 10,
            test_episodes: 10,
            seed: 7,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_byte_identical() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let different = generate_corpus(&CorpusConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.train, different.train);
    }

    #[test]
    fn corpus_passes_its_own_audit() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        audit_corpus(&corpus).unwrap();
    }

    #[test]
    fn answer_slots_are_balanced_on_every_split() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for split in [&corpus.train, &corpus.val, &corpus.test] {
            let mut counts = [0usize; 5];
            for ep in split.iter() {
                counts[ep.gt_answer] += 1;
            }
            let expect = split.len() / 5;
            assert!(counts.iter().all(|&c| c == expect), "{counts:?}");
        }
    }

    #[test]
    fn evidence_mix_respects_configured_fractions() {
        let cfg = CorpusConfig {
            train_episodes: 600,
            val_episodes: 10,
            test_episodes: 10,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ep in &corpus.train {
            *counts.entry(ep.evidence_stream.name()).or_insert(0) += 1;
        }
        for stream in Stream::ALL {
            let frac = counts[stream.name()] as f64 / 600.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.08, "{}: {frac}", stream.name());
        }
    }

    #[test]
    fn correct_answer_cooccurs_only_inside_the_span() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for ep in &corpus.train {
            let entity = question_entity(ep, &corpus.vocab).unwrap();
            let gt_token = ep.answers[ep.gt_answer]
                .iter()
                .copied()
                .find(|t| {
                    let v = &corpus.vocab;
                    (v.attributes.0..v.attributes.1).contains(t)
                        || (v.object_names.0..v.object_names.1).contains(t)
                })
                .unwrap();
            let cooc = cooccurrence_frames(ep, &corpus.vocab, entity, gt_token);
            assert!(!cooc.is_empty(), "{}", ep.id);
            let span = span_frame_set(ep);
            assert!(cooc.iter().all(|t| span.contains(t)), "{}: {:?} vs {:?}", ep.id, cooc, span);
        }
    }

    #[test]
    fn five_answers_with_unique_evidence_tokens() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for ep in &corpus.train {
            assert_eq!(ep.answers.len(), 5);
            let ev: Vec<u32> = ep
                .answers
                .iter()
                .map(|ans| {
                    ans.iter()
                        .copied()
                        .find(|t| {
                            let v = &corpus.vocab;
                            (v.attributes.0..v.attributes.1).contains(t)
                                || (v.object_names.0..v.object_names.1).contains(t)
                        })
                        .unwrap()
                })
                .collect();
            let mut dedup = ev.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 5, "{}: duplicate evidence tokens {ev:?}", ep.id);
        }
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let dir = std::env::temp_dir().join(format!("corpus-rt-{}", std::process::id()));
        save_corpus(&corpus, &dir).unwrap();
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(corpus, loaded);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_jsonl_reports_path_and_line() {
        let dir = std::env::temp_dir().join(format!("corpus-bad-{}", std::process::id()));
        let corpus = generate_corpus(&small_cfg()).unwrap();
        save_corpus(&corpus, &dir).unwrap();
        let path = dir.join("val.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        let err = load_corpus(&dir).unwrap_err();
        match err {
            DataError::Parse { path, line, .. } => {
                assert!(path.ends_with("val.jsonl"));
                assert!(line > 0);
            }
            other => panic!("expected a parse error, got {other}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = std::env::temp_dir().join("corpus-definitely-missing");
        assert!(matches!(load_corpus(&dir), Err(DataError::Io { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_mix = CorpusConfig { mix_subtitle: 0.9, ..small_cfg() };
        assert!(bad_mix.validate().is_err());
        let bad_span = CorpusConfig { span_len_max: 12, ..small_cfg() };
        assert!(bad_span.validate().is_err());
        let empty = CorpusConfig { val_episodes: 0, ..small_cfg() };
        assert!(empty.validate().is_err());
        let tiny_vocab = CorpusConfig { vocab_size: 100, ..small_cfg() };
        assert!(tiny_vocab.validate().is_err());
    }

    #[test]
    fn vocabulary_is_stable_and_maps_objects() {
        let cfg = small_cfg();
        let v1 = Vocabulary::build(&cfg).unwrap();
        let v2 = Vocabulary::build(&cfg).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), cfg.vocab_size);
        let name = v1.object_name(5);
        assert_eq!(v1.object_of_token(name), Some(5));
        assert_eq!(v1.object_of_token(v1.entities.0), None);
        assert_eq!(v1.clamp(9999), UNK);
        assert_eq!(v1.id_of("<pad>"), PAD);
    }

    #[test]
    fn audit_catches_a_corrupted_episode() {
        let mut corpus = generate_corpus(&small_cfg()).unwrap();
        // Move the correct answer's evidence pair outside the span by swapping
        // the gt slot to a distractor: the audit must notice.
        corpus.train[0].gt_answer = (corpus.train[0].gt_answer + 1) % 5;
        assert!(audit_split(&corpus.train, &corpus.vocab, "train").is_err());
    }
}
