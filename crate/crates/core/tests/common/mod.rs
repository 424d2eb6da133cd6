//! Oracles and a mock scorer sidecar shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde_json::{json, Value};

use mpe_core::criterion::{DecisionRecord, PseudoLabelSet};
use mpe_core::gateway::{ImagePayload, ImageRef};
use mpe_core::{Embedder, Gateway, HashEmbedder, SurrogateGateway};

/// Mean and Bessel-corrected standard deviation computed in exact rational
/// arithmetic; only the final square root is taken in f64.
pub fn exact_estimate(scores: &[f64]) -> (f64, f64) {
    let xs: Vec<BigRational> = scores
        .iter()
        .map(|&s| BigRational::from_float(s).expect("finite"))
        .collect();
    let n = BigRational::from_integer(BigInt::from(xs.len()));
    let mean = xs.iter().fold(BigRational::zero(), |a, x| a + x) / &n;
    let ss = xs.iter().fold(BigRational::zero(), |a, x| {
        let d = x - &mean;
        a + &d * &d
    });
    let var = ss / (n - BigRational::from_integer(BigInt::from(1)));
    (mean.to_f64().unwrap(), var.to_f64().unwrap().sqrt())
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Brute-force argmax of cosine with ties to the smallest id.
pub fn brute_force_top1(query: &[f64], keys: &[(String, Vec<f64>)]) -> Option<String> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            f64::NEG_INFINITY
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    };
    let mut scored: Vec<(f64, &String)> = keys.iter().map(|(id, k)| (cos(query, k), id)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.first().map(|(_, id)| (*id).clone())
}

/// Macro-F1 from confusion counts in exact fractions.
pub fn direct_macro_f1(pred: &[bool], label: &[bool]) -> BigRational {
    let count = |p: bool, l: bool| pred.iter().zip(label).filter(|(a, b)| **a == p && **b == l).count() as i64;
    let f1 = |tp: i64, fp: i64, fn_: i64| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            BigRational::zero()
        } else {
            BigRational::new(BigInt::from(2 * tp), BigInt::from(d))
        }
    };
    let pos = f1(count(true, true), count(true, false), count(false, true));
    let neg = f1(count(false, false), count(false, true), count(true, false));
    (pos + neg) / BigRational::from_integer(BigInt::from(2))
}

pub fn records_and_labels(pred: &[bool], label: &[bool]) -> (Vec<DecisionRecord>, PseudoLabelSet) {
    let mut labels = PseudoLabelSet::new();
    let records = pred
        .iter()
        .zip(label)
        .enumerate()
        .map(|(i, (&p, &l))| {
            labels.insert(format!("p{i}"), i as u64, l);
            DecisionRecord::new(format!("p{i}"), i as u64, if p { 1.0 } else { 0.0 }, 0.5)
        })
        .collect();
    (records, labels)
}

/// A scorer sidecar on a loopback port, backed by the surrogate backend.
pub struct MockSidecar {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
}

struct State {
    gateway: SurrogateGateway,
    embedder: HashEmbedder,
    images: Mutex<HashMap<String, ImageRef>>,
}

impl MockSidecar {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let state = Arc::new(State {
            gateway: SurrogateGateway::default(),
            embedder: HashEmbedder::default(),
            images: Mutex::new(HashMap::new()),
        });
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let state = state.clone();
                counter.fetch_add(1, Ordering::SeqCst);
                std::thread::spawn(move || {
                    let _ = serve(stream, &state);
                });
            }
        });
        MockSidecar { url, requests }
    }
}

fn serve(mut stream: TcpStream, state: &State) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let mut parts = line.split_whitespace();
        let method = parts.next().unwrap_or("").to_string();
        let path = parts.next().unwrap_or("").to_string();
        let mut len = 0usize;
        let mut keep_alive = true;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h)?;
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            let lower = h.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap_or(0);
            }
            if lower == "connection: close" {
                keep_alive = false;
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body)?;
        let (code, value) = route(state, &method, &path, &body);
        let text = value.to_string();
        let reason = if code == 200 { "OK" } else { "Error" };
        let response = format!(
            "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{text}",
            text.len()
        );
        stream.write_all(response.as_bytes())?;
        if !keep_alive {
            return Ok(());
        }
    }
}

fn route(state: &State, method: &str, path: &str, body: &[u8]) -> (u16, Value) {
    let err = |code: u16, msg: &str| (code, json!({ "error": msg }));
    if method == "GET" && path == "/meta" {
        return (
            200,
            json!({ "score_range": [-1.0, 1.0], "models": { "similarity": "surrogate" } }),
        );
    }
    if method != "POST" {
        return err(404, "not found");
    }
    let Ok(req) = serde_json::from_slice::<Value>(body) else {
        return err(400, "malformed JSON");
    };
    match path {
        "/generate" => {
            let (Some(prompt), Some(seed)) = (req["prompt"].as_str(), req["seed"].as_u64()) else {
                return err(400, "prompt and seed required");
            };
            match state.gateway.generate(prompt, seed) {
                Ok(image) => {
                    let id = format!("{}-{}", image.prompt_fingerprint, seed);
                    state.images.lock().unwrap().insert(id.clone(), image);
                    (200, json!({ "image_id": id }))
                }
                Err(e) => err(400, &e.to_string()),
            }
        }
        "/score" => {
            let (Some(id), Some(text)) = (req["image_id"].as_str(), req["text"].as_str()) else {
                return err(400, "image_id and text required");
            };
            let Some(image) = state.images.lock().unwrap().get(id).cloned() else {
                return err(404, "unknown image_id");
            };
            match state.gateway.score(&image, text) {
                Ok(s) => (200, json!({ "score": s })),
                Err(e) => err(400, &e.to_string()),
            }
        }
        "/embed" => match req["text"].as_str().map(|t| state.embedder.embed(t)) {
            Some(Ok(v)) => (200, json!({ "vector": v.as_slice() })),
            _ => err(400, "text required"),
        },
        "/v1/chat/completions" => {
            let content = req["messages"][0]["content"].as_str().unwrap_or("");
            (
                200,
                json!({ "choices": [{ "message": { "role": "assistant", "content": fake_llm(content) } }] }),
            )
        }
        _ => err(404, "not found"),
    }
}

/// Answers the last query of a demonstration prompt by plain substring search.
fn fake_llm(prompt: &str) -> String {
    let last = |key: &str| {
        prompt
            .lines()
            .filter_map(|l| l.strip_prefix(key))
            .next_back()
            .unwrap_or("")
            .trim()
            .trim_end_matches('.')
            .to_string()
    };
    let (input, source, target) = (last("Input:"), last("source concept:"), last("target concept:"));
    match input.to_lowercase().find(&source.to_lowercase()) {
        Some(at) if !source.is_empty() => format!(
            " Yes.\nOutput: {}{}{}",
            &input[..at],
            target,
            &input[at + source.len()..]
        ),
        _ => format!(" No.\nOutput: {input}"),
    }
}

/// An image handle the HTTP backend never issued.
pub fn foreign_image() -> ImageRef {
    ImageRef {
        prompt_fingerprint: "00".into(),
        seed: 0,
        payload: ImagePayload::Remote("missing".into()),
    }
}
