//! Test adapter for the black-box protocol.
//!
//! Usage: `faud-test-adapter [--jitter] <mode> [args]` where mode is one of
//!
//! - `constant <n_classes>`: uniform probabilities
//! - `linear <weights.json>`: two classes, `[σ(w·x), 1 − σ(w·x)]`
//! - `checkpoint <model.faud>`: a saved reference model
//! - `error`: every request answered with an error
//! - `bad-sum`: probabilities that do not sum to one
//! - `exit-after <n>`: exits without replying to request `n + 1`
//! - `silent`: never sends a handshake
//! - `malformed`: sends a non-JSON handshake
//! - `version <v>`: handshake with another protocol version
//!
//! `--jitter` answers each request from its own thread after an id-dependent
//! delay, so responses arrive out of order.

use std::io::{BufRead, Write};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use faudit_core::models::Model;
use faudit_core::Tensor;
use serde::Deserialize;

#[derive(Deserialize)]
struct Request {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
}

type Scorer = Arc<dyn Fn(&Tensor) -> Result<Vec<f64>, String> + Send + Sync>;

fn trace() -> bool {
    std::env::var("FAUD_BB_LOG").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn fmt_probs(p: &[f64]) -> String {
    let cells: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
    format!("[{}]", cells.join(","))
}

fn emit(out: &Mutex<std::io::Stdout>, line: &str) {
    if trace() {
        eprintln!("adapter >> {line}");
    }
    let mut out = out.lock().unwrap();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn handshake(version: u64, n_classes: usize) -> String {
    format!("{{\"protocol\":\"faud-bb\",\"version\":{version},\"n_classes\":{n_classes}}}")
}

fn main() -> ExitCode {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let jitter = args.first().is_some_and(|a| a == "--jitter");
    if jitter {
        args.remove(0);
    }
    let out = Arc::new(Mutex::new(std::io::stdout()));
    let mode = args.first().map(String::as_str).unwrap_or("");
    let arg = |i: usize| args.get(i).cloned().unwrap_or_default();

    let mut limit = u64::MAX;
    let (n_classes, scorer): (usize, Scorer) = match mode {
        "constant" => {
            let n: usize = arg(1).parse().unwrap_or(2);
            (n, Arc::new(move |_: &Tensor| Ok(vec![1.0 / n as f64; n])))
        }
        "linear" => {
            let text = match std::fs::read_to_string(arg(1)) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read weights: {e}");
                    return ExitCode::from(2);
                }
            };
            let w: Vec<f64> = serde_json::from_str(&text).expect("weights must be a JSON array");
            (
                2,
                Arc::new(move |x: &Tensor| {
                    if x.numel() != w.len() {
                        return Err(format!("expected {} values, got {}", w.len(), x.numel()));
                    }
                    let s: f64 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum();
                    let p = 1.0 / (1.0 + (-s).exp());
                    Ok(vec![p, 1.0 - p])
                }),
            )
        }
        "checkpoint" => {
            let model = match Model::load(arg(1)) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("cannot load checkpoint: {e}");
                    return ExitCode::from(2);
                }
            };
            (
                model.n_classes(),
                Arc::new(move |x: &Tensor| model.predict_proba(x).map_err(|e| e.to_string())),
            )
        }
        "error" => (2, Arc::new(|_: &Tensor| Err("model refused".to_string()))),
        "bad-sum" => (2, Arc::new(|_: &Tensor| Ok(vec![0.7, 0.7]))),
        "exit-after" => {
            limit = arg(1).parse().unwrap_or(0);
            (2, Arc::new(|_: &Tensor| Ok(vec![0.5, 0.5])))
        }
        "silent" => {
            std::thread::sleep(Duration::from_secs(3600));
            return ExitCode::SUCCESS;
        }
        "malformed" => {
            emit(&out, "hello, engine");
            std::thread::sleep(Duration::from_secs(5));
            return ExitCode::SUCCESS;
        }
        "version" => {
            emit(&out, &handshake(arg(1).parse().unwrap_or(2), 2));
            std::thread::sleep(Duration::from_secs(5));
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("unknown mode {other:?}");
            return ExitCode::from(2);
        }
    };

    emit(&out, &handshake(1, n_classes));
    let mut workers = Vec::new();
    let mut served = 0u64;
    for line in std::io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if trace() {
            eprintln!("adapter << {line}");
        }
        if served == limit {
            return ExitCode::from(1);
        }
        served += 1;
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let msg = serde_json::to_string(&format!("bad request: {e}")).unwrap();
                emit(&out, &format!("{{\"id\":null,\"error\":{msg}}}"));
                continue;
            }
        };
        let (scorer, out) = (Arc::clone(&scorer), Arc::clone(&out));
        let reply = move || {
            let body = match Tensor::new(req.shape, req.data).map_err(|e| e.to_string()).and_then(|x| scorer(&x)) {
                Ok(p) => format!("{{\"id\":{},\"probs\":{}}}", req.id, fmt_probs(&p)),
                Err(e) => format!("{{\"id\":{},\"error\":{}}}", req.id, serde_json::to_string(&e).unwrap()),
            };
            emit(&out, &body);
        };
        if jitter {
            let delay = Duration::from_millis(5 * (4 - req.id % 5));
            workers.push(std::thread::spawn(move || {
                std::thread::sleep(delay);
                reply();
            }));
        } else {
            reply();
        }
    }
    for w in workers {
        let _ = w.join();
    }
    ExitCode::SUCCESS
}
