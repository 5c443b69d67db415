//! Forward-only client for external classifiers.
//!
//! An adapter is a child process speaking line-delimited JSON on its standard
//! streams. It first prints a handshake
//! `{"protocol":"faud-bb","version":1,"n_classes":K}`, then answers each
//! request `{"id":N,"shape":[c,h,w],"data":[...]}` with
//! `{"id":N,"probs":[...]}` or `{"id":N,"error":"..."}`. Responses may come
//! back in any order. Floats go over the wire with 17 significant digits so
//! they round-trip exactly.
//!
//! Setting `FAUD_BB_LOG` to anything but `0` traces every wire line to
//! standard error.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, sync_channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::tensor::Tensor;

pub const PROTOCOL: &str = "faud-bb";
pub const VERSION: u64 = 1;
/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BlackboxConfig {
    pub handshake_timeout: Duration,
    pub response_timeout: Duration,
    /// Maximum requests in flight per handle.
    pub window: usize,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self {
            handshake_timeout: Duration::from_secs(10),
            response_timeout: Duration::from_secs(30),
            window: 16,
        }
    }
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
    version: u64,
    n_classes: usize,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    probs: Option<Vec<f64>>,
    error: Option<String>,
}

type Reply = Result<Vec<f64>>;

#[derive(Default)]
struct Pending {
    waiting: HashMap<u64, Sender<Reply>>,
    /// Timed-out ids whose late responses are discarded.
    abandoned: HashSet<u64>,
    /// Set once the response stream is unusable; later calls fail fast.
    broken: Option<String>,
}

struct Window {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Window {
    fn try_acquire(&self) -> bool {
        let mut free = self.free.lock().unwrap();
        if *free > 0 {
            *free -= 1;
            true
        } else {
            false
        }
    }

    fn acquire(&self) {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

fn tracing() -> bool {
    std::env::var("FAUD_BB_LOG").is_ok_and(|v| !v.is_empty() && v != "0")
}

/// A live adapter process. Safe to share between threads: writes are
/// serialised and responses are routed back to callers by id.
pub struct ModelHandle {
    n_classes: usize,
    cfg: BlackboxConfig,
    child: Mutex<Option<Child>>,
    stdin: Mutex<Option<ChildStdin>>,
    pending: Arc<Mutex<Pending>>,
    window: Window,
    next_id: AtomicU64,
    reader: Option<JoinHandle<()>>,
    trace: bool,
}

/// Launches `command[0]` with the remaining arguments and waits for its
/// handshake.
pub fn spawn_adapter(command: &[String], cfg: BlackboxConfig) -> Result<ModelHandle> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Spawn("empty adapter command".into()))?;
    if cfg.window == 0 {
        return Err(Error::invalid("pipeline window must be positive"));
    }
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Spawn(format!("{program}: {e}")))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stdin = child.stdin.take().expect("piped stdin");
    let trace = tracing();
    let pending = Arc::new(Mutex::new(Pending::default()));
    let (hs_tx, hs_rx) = sync_channel(1);
    let reader = {
        let pending = Arc::clone(&pending);
        std::thread::spawn(move || read_loop(BufReader::new(stdout), hs_tx, pending, trace))
    };

    let fail = |mut child: Child, e: Error| {
        let _ = child.kill();
        let _ = child.wait();
        Err(e)
    };
    let line = match hs_rx.recv_timeout(cfg.handshake_timeout) {
        Ok(Some(line)) => line,
        Ok(None) | Err(RecvTimeoutError::Disconnected) => {
            return fail(child, Error::Protocol("adapter exited before its handshake".into()))
        }
        Err(RecvTimeoutError::Timeout) => {
            return fail(
                child,
                Error::Timeout(format!("no handshake within {:?}", cfg.handshake_timeout)),
            )
        }
    };
    let hs: Handshake = match serde_json::from_str(&line) {
        Ok(h) => h,
        Err(e) => return fail(child, Error::Protocol(format!("malformed handshake line {line:?}: {e}"))),
    };
    if hs.protocol != PROTOCOL {
        return fail(child, Error::Protocol(format!("unknown protocol {:?} in line {line:?}", hs.protocol)));
    }
    if hs.version != VERSION {
        return fail(
            child,
            Error::Protocol(format!("version mismatch: adapter speaks {}, engine {VERSION}", hs.version)),
        );
    }
    if hs.n_classes == 0 {
        return fail(child, Error::Protocol(format!("handshake declares no classes: {line:?}")));
    }
    Ok(ModelHandle {
        n_classes: hs.n_classes,
        window: Window {
            free: Mutex::new(cfg.window),
            cv: Condvar::new(),
        },
        cfg,
        child: Mutex::new(Some(child)),
        stdin: Mutex::new(Some(stdin)),
        pending,
        next_id: AtomicU64::new(0),
        reader: Some(reader),
        trace,
    })
}

fn read_loop(
    mut stdout: impl BufRead,
    handshake: std::sync::mpsc::SyncSender<Option<String>>,
    pending: Arc<Mutex<Pending>>,
    trace: bool,
) {
    let mut line = String::new();
    let mut first = true;
    let reason = loop {
        line.clear();
        match stdout.read_line(&mut line) {
            Ok(0) => break "adapter closed its output".to_string(),
            Err(e) => break format!("reading adapter output: {e}"),
            Ok(_) => {}
        }
        let text = line.trim_end();
        if trace {
            eprintln!("faud-bb << {text}");
        }
        if first {
            first = false;
            let _ = handshake.send(Some(text.to_string()));
            continue;
        }
        let resp: Response = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => break format!("malformed response line {text:?}: {e}"),
        };
        let reply = match (resp.probs, resp.error) {
            (_, Some(msg)) => Err(Error::Protocol(format!("adapter error for request {}: {msg}", resp.id))),
            (Some(p), None) => Ok(p),
            (None, None) => Err(Error::Protocol(format!("response {} has neither probs nor error", resp.id))),
        };
        let mut p = pending.lock().unwrap();
        match p.waiting.remove(&resp.id) {
            Some(tx) => {
                let _ = tx.send(reply);
            }
            None if p.abandoned.remove(&resp.id) => {}
            None => break format!("response for unknown id {}", resp.id),
        }
    };
    if first {
        let _ = handshake.send(None);
    }
    let mut p = pending.lock().unwrap();
    for (_, tx) in p.waiting.drain() {
        let _ = tx.send(Err(Error::Protocol(reason.clone())));
    }
    p.broken = Some(reason);
}

/// Wire form of a request; floats use 17 significant digits.
pub fn encode_request(id: u64, image: &Tensor) -> String {
    let mut s = format!("{{\"id\":{id},\"shape\":{:?},\"data\":[", image.shape());
    for (i, v) in image.data().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push_str("]}");
    s
}

/// Checks length, finiteness, sign and sum of a probability vector.
pub fn check_probs(probs: &[f64], n_classes: usize) -> Result<()> {
    if probs.len() != n_classes {
        return Err(Error::Protocol(format!(
            "expected {n_classes} probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Protocol(format!("invalid probabilities {probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Protocol(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

impl ModelHandle {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn config(&self) -> &BlackboxConfig {
        &self.cfg
    }

    /// Writes one request; the caller must hold a window slot.
    fn send(&self, image: &Tensor) -> Result<(u64, Receiver<Reply>)> {
        if image.rank() != 3 {
            return Err(Error::dim(format!("expected a [c, h, w] image, got {:?}", image.shape())));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = channel();
        {
            let mut p = self.pending.lock().unwrap();
            if let Some(reason) = &p.broken {
                return Err(Error::Protocol(reason.clone()));
            }
            p.waiting.insert(id, tx);
        }
        let line = encode_request(id, image);
        if self.trace {
            eprintln!("faud-bb >> {line}");
        }
        let written = {
            let mut guard = self.stdin.lock().unwrap();
            match guard.as_mut() {
                Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()),
                None => Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "handle closed")),
            }
        };
        if let Err(e) = written {
            self.pending.lock().unwrap().waiting.remove(&id);
            return Err(Error::Protocol(format!("writing request {id}: {e}")));
        }
        Ok((id, rx))
    }

    /// Waits for the reply to `id` and frees its window slot.
    fn wait(&self, id: u64, rx: Receiver<Reply>, deadline: Instant) -> Reply {
        let timeout = deadline.saturating_duration_since(Instant::now());
        let reply = match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                let mut p = self.pending.lock().unwrap();
                if p.waiting.remove(&id).is_some() {
                    p.abandoned.insert(id);
                }
                drop(p);
                Err(Error::Timeout(format!(
                    "no response to request {id} within {:?}",
                    self.cfg.response_timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol(format!("request {id} was dropped"))),
        };
        self.window.release();
        let probs = reply?;
        check_probs(&probs, self.n_classes)?;
        Ok(probs)
    }
}

impl Predictor for ModelHandle {
    fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.window.acquire();
        match self.send(image) {
            Ok((id, rx)) => self.wait(id, rx, Instant::now() + self.cfg.response_timeout),
            Err(e) => {
                self.window.release();
                Err(e)
            }
        }
    }

    /// Keeps up to the window's worth of requests in flight.
    fn predict_batch(&self, images: &[Tensor]) -> Vec<Result<Vec<f64>>> {
        let mut out: Vec<Option<Reply>> = (0..images.len()).map(|_| None).collect();
        let mut inflight: VecDeque<(usize, u64, Receiver<Reply>, Instant)> = VecDeque::new();
        for (i, image) in images.iter().enumerate() {
            while !self.window.try_acquire() {
                match inflight.pop_front() {
                    Some((j, id, rx, deadline)) => out[j] = Some(self.wait(id, rx, deadline)),
                    None => {
                        self.window.acquire();
                        break;
                    }
                }
            }
            match self.send(image) {
                Ok((id, rx)) => inflight.push_back((i, id, rx, Instant::now() + self.cfg.response_timeout)),
                Err(e) => {
                    self.window.release();
                    out[i] = Some(Err(e));
                }
            }
        }
        for (j, id, rx, deadline) in inflight {
            out[j] = Some(self.wait(id, rx, deadline));
        }
        out.into_iter().map(|r| r.expect("every slot answered")).collect()
    }
}

impl Drop for ModelHandle {
    fn drop(&mut self) {
        // Closing stdin asks the adapter to exit; kill it if it lingers.
        self.stdin.lock().unwrap().take();
        if let Some(mut child) = self.child.lock().unwrap().take() {
            let start = Instant::now();
            while start.elapsed() < Duration::from_secs(2) {
                if let Ok(Some(_)) = child.try_wait() {
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
