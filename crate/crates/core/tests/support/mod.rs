//! Test-only oracles and stub servers shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use groundguide::bridge::{serve_tcp, ServeOptions};
use groundguide::toylm::{TableFixture, TableModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SEP: &str = "\u{1f}";

/// Next-token distribution straight from the fixture table, uniform when absent.
pub fn table_lookup(fixture: &TableFixture, parts: &[String]) -> Vec<f64> {
    let sig = parts.join(SEP);
    match fixture.table.get(&sig) {
        Some(p) => p.clone(),
        None => vec![1.0 / fixture.vocab.len() as f64; fixture.vocab.len()],
    }
}

fn prompt_parts(image_ref: &str, prompt: &str) -> Vec<String> {
    let mut parts = vec![image_ref.to_string()];
    if !prompt.is_empty() {
        parts.push(prompt.to_string());
    }
    parts
}

/// Blended next-token distribution: softmax of `gamma * ln p_cond + (1 - gamma) * ln p_uncond`.
pub fn blended_distribution(p_cond: &[f64], p_uncond: &[f64], gamma: f64) -> Vec<f64> {
    let scores: Vec<f64> = p_cond.iter().zip(p_uncond).map(|(c, u)| gamma * c.ln() + (1.0 - gamma) * u.ln()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn first_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy guided decoding recomputed from the fixture table, step by step.
pub fn oracle_greedy(
    fixture: &TableFixture,
    image_ref: &str,
    cond_prompt: &str,
    uncond_prompt: &str,
    gamma: f64,
    max_tokens: usize,
    stop_on_eos: bool,
) -> Vec<u32> {
    let mut cond = prompt_parts(image_ref, cond_prompt);
    let mut uncond = prompt_parts(image_ref, uncond_prompt);
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let p = blended_distribution(&table_lookup(fixture, &cond), &table_lookup(fixture, &uncond), gamma);
        let tok = first_argmax(&p);
        if stop_on_eos && tok as u32 == fixture.eos {
            break;
        }
        out.push(tok as u32);
        cond.push(fixture.vocab[tok].clone());
        uncond.push(fixture.vocab[tok].clone());
    }
    out
}

/// Greedy decoding from a single branch only.
pub fn oracle_single_branch(
    fixture: &TableFixture,
    image_ref: &str,
    prompt: &str,
    max_tokens: usize,
    stop_on_eos: bool,
) -> Vec<u32> {
    let mut parts = prompt_parts(image_ref, prompt);
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let tok = first_argmax(&table_lookup(fixture, &parts));
        if stop_on_eos && tok as u32 == fixture.eos {
            break;
        }
        out.push(tok as u32);
        parts.push(fixture.vocab[tok].clone());
    }
    out
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// A random table over every context up to `depth` generated tokens, for
/// both prompts.
pub fn random_fixture(rng: &mut ChaCha8Rng, image_ref: &str, prompts: &[&str], depth: usize) -> TableFixture {
    let n = rng.gen_range(3..=5);
    let vocab: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let eos = rng.gen_range(0..n) as u32;
    let mut table = BTreeMap::new();
    for prompt in prompts {
        let mut frontier = vec![prompt_parts(image_ref, prompt)];
        for _ in 0..=depth {
            let mut next = Vec::new();
            for parts in frontier {
                // leave some contexts to the uniform fallback
                if rng.gen_bool(0.85) {
                    table.insert(parts.join(SEP), random_distribution(rng, n));
                }
                for tok in &vocab {
                    let mut p = parts.clone();
                    p.push(tok.clone());
                    next.push(p);
                }
            }
            frontier = next;
        }
    }
    TableFixture { model_name: "random-table".into(), vocab, eos, table }
}

/// Serves `model` over loopback TCP for one connection.
pub fn start_stub(model: TableModel, step_delay: Duration) -> SocketAddr {
    start_stub_for(model, step_delay, 1)
}

pub fn start_stub_for(model: TableModel, step_delay: Duration, connections: usize) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        serve_tcp(listener, || model.clone(), ServeOptions { step_delay }, Some(connections)).unwrap();
    });
    addr
}

/// A fake server that answers the i-th request line with `replies[i]`
/// verbatim, and hands back the request lines it saw.
pub fn scripted_server(replies: Vec<String>) -> (SocketAddr, mpsc::Receiver<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let mut seen = Vec::new();
        for reply in replies {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                break;
            }
            seen.push(line.trim_end().to_string());
            if writer.write_all(reply.as_bytes()).is_err() {
                break;
            }
            let _ = writer.flush();
        }
        let _ = tx.send(seen);
        // keep the socket open briefly so the client reads the last reply
        thread::sleep(Duration::from_millis(200));
    });
    (addr, rx)
}

/// Labels, and the surface forms a generated caption may use for each.
pub const CHAIR_LABELS: &[(&str, &[&str])] = &[
    ("person", &["person", "man", "woman", "people"]),
    ("dog", &["dog", "dogs", "puppy"]),
    ("hot dog", &["hot dog", "hotdog", "hot dogs"]),
    ("cat", &["cat", "cats", "kitten"]),
    ("car", &["car", "automobile", "cars"]),
    ("traffic light", &["traffic light", "stoplight", "traffic lights"]),
    ("tv", &["tv", "television", "tv monitor"]),
];

const FILLER: &[&str] = &["a", "the", "with", "near", "and", "on", "sitting", "green", "big", "of", "is"];

pub fn chair_synonyms() -> groundguide::SynonymMap {
    let entries = [
        ("man", "person"),
        ("woman", "person"),
        ("people", "person"),
        ("puppy", "dog"),
        ("hotdog", "hot dog"),
        ("kitten", "cat"),
        ("automobile", "car"),
        ("stoplight", "traffic light"),
        ("television", "tv"),
        ("tv monitor", "tv"),
    ];
    groundguide::SynonymMap::new(CHAIR_LABELS.iter().map(|(l, _)| *l), &entries).unwrap()
}

/// A generated CHAIR corpus together with counts computed from how it was built.
pub struct ChairCorpus {
    pub captions: Vec<groundguide::metrics::CaptionRecord>,
    pub annotations: Vec<groundguide::metrics::AnnotationRecord>,
    /// hallucinated, mentioned, hallucinated captions, captions, matched, existing
    pub counts: [u64; 6],
}

impl ChairCorpus {
    pub fn chair_i(&self) -> f64 {
        ratio(self.counts[0], self.counts[1])
    }
    pub fn chair_s(&self) -> f64 {
        ratio(self.counts[2], self.counts[3])
    }
    pub fn recall(&self) -> f64 {
        ratio(self.counts[4], self.counts[5])
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Captions are filler words with known object mentions spliced in, each
/// mention separated by at least one filler word. The counts come from the
/// chosen label sets, never from parsing the text.
pub fn chair_corpus(rng: &mut ChaCha8Rng, n_captions: usize, n_images: usize) -> ChairCorpus {
    use groundguide::metrics::{AnnotationRecord, CaptionRecord};
    use rand::seq::SliceRandom;
    use std::collections::BTreeSet;

    let truth: Vec<BTreeSet<String>> = (0..n_images)
        .map(|_| CHAIR_LABELS.iter().filter(|_| rng.gen_bool(0.35)).map(|(l, _)| l.to_string()).collect())
        .collect();
    let annotations = truth
        .iter()
        .enumerate()
        .map(|(i, objects)| AnnotationRecord { image_id: format!("img{i}"), objects: objects.clone() })
        .collect();

    let mut counts = [0u64; 6];
    let mut captions = Vec::with_capacity(n_captions);
    for _ in 0..n_captions {
        let image = rng.gen_range(0..n_images);
        let n_mentions = rng.gen_range(0..=5);
        let mut words: Vec<String> = Vec::new();
        let mut mentioned = BTreeSet::new();
        for _ in 0..n_mentions {
            words.push(FILLER.choose(rng).unwrap().to_string());
            let (label, forms) = CHAIR_LABELS.choose(rng).unwrap();
            let form = forms.choose(rng).unwrap();
            words.push(if rng.gen_bool(0.2) { form.to_uppercase() } else { form.to_string() });
            mentioned.insert(label.to_string());
        }
        for _ in 0..rng.gen_range(0..4) {
            words.push(FILLER.choose(rng).unwrap().to_string());
        }
        let text = words.join(if rng.gen_bool(0.5) { " " } else { ", " });

        let t = &truth[image];
        let halluc = mentioned.difference(t).count() as u64;
        counts[0] += halluc;
        counts[1] += mentioned.len() as u64;
        counts[2] += u64::from(halluc > 0);
        counts[3] += 1;
        counts[4] += mentioned.intersection(t).count() as u64;
        counts[5] += t.len() as u64;
        captions.push(CaptionRecord { image_id: format!("img{image}"), text });
    }
    ChairCorpus { captions, annotations, counts }
}
