//! File-backed, local-parallel MapReduce.
//!
//! Map tasks emit `(key, value)` pairs tagged with a sequence number
//! `split_id << 40 | emit_counter`. Records are routed to `partition_of(key)`
//! and spilled as runs sorted by `(key, seq)`. Each reduce task merges the
//! runs of its partition and sees every key once, with values in `seq`
//! order. Because nothing depends on scheduling, outputs are byte-identical
//! for any worker count.
//!
//! Record framing (runs and outputs), little-endian:
//! `key_len: u32, seq: u64, value_len: u32, key, value`.
//!
//! Task outputs are written to `*.tmp` and renamed on success, so a retried
//! or rerun task replaces its files atomically.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TaskError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("map task for split {split} failed after {attempts} attempts: {message}")]
    MapFailed { split: u32, attempts: u32, message: String },
    #[error("reduce task for partition {partition} failed after {attempts} attempts: {message}")]
    ReduceFailed { partition: usize, attempts: u32, message: String },
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("job requires a broadcast payload but none was configured")]
    MissingBroadcast,
    #[error("corrupt record file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Stable 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn partition_of(key: &[u8], partitions: usize) -> usize {
    (fnv1a64(key) % partitions as u64) as usize
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvRecord {
    pub key: Vec<u8>,
    pub seq: u64,
    pub value: Vec<u8>,
}

impl KvRecord {
    fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.key.len() as u32).to_le_bytes())?;
        w.write_all(&self.seq.to_le_bytes())?;
        w.write_all(&(self.value.len() as u32).to_le_bytes())?;
        w.write_all(&self.key)?;
        w.write_all(&self.value)
    }

    fn read_from(r: &mut impl Read) -> io::Result<Option<Self>> {
        let mut head = [0u8; 16];
        match r.read(&mut head[..1])? {
            0 => return Ok(None),
            _ => r.read_exact(&mut head[1..])?,
        }
        let klen = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
        let seq = u64::from_le_bytes(head[4..12].try_into().unwrap());
        let vlen = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let mut key = vec![0u8; klen];
        r.read_exact(&mut key)?;
        let mut value = vec![0u8; vlen];
        r.read_exact(&mut value)?;
        Ok(Some(Self { key, seq, value }))
    }

    fn framed_len(&self) -> usize {
        16 + self.key.len() + self.value.len()
    }
}

/// Reads every record of a run or output file.
pub fn read_records(path: &Path) -> Result<Vec<KvRecord>, EngineError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        match KvRecord::read_from(&mut r) {
            Ok(Some(rec)) => out.push(rec),
            Ok(None) => return Ok(out),
            Err(e) => {
                return Err(EngineError::Corrupt {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSplit {
    pub id: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub name: String,
    pub splits: Vec<InputSplit>,
    pub map_fn: String,
    pub reduce_fn: String,
    pub partitions: usize,
    pub broadcast: Option<Vec<u8>>,
    /// Spill and task files go under `scratch/<name>`.
    pub scratch: PathBuf,
    /// Partition outputs and the manifest go here.
    pub output: PathBuf,
    pub spill_bytes: usize,
    pub max_attempts: u32,
}

pub const DEFAULT_SPILL_BYTES: usize = 256 << 20;

impl JobSpec {
    pub fn new(name: &str, splits: Vec<InputSplit>, scratch: &Path, output: &Path, partitions: usize) -> Self {
        Self {
            name: name.to_string(),
            splits,
            map_fn: format!("{name}.map"),
            reduce_fn: format!("{name}.reduce"),
            partitions,
            broadcast: None,
            scratch: scratch.to_path_buf(),
            output: output.to_path_buf(),
            spill_bytes: DEFAULT_SPILL_BYTES,
            max_attempts: 3,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.partitions == 0 {
            return Err(EngineError::InvalidSpec("partition count must be >= 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(EngineError::InvalidSpec("max_attempts must be >= 1".into()));
        }
        let mut ids: Vec<u32> = self.splits.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(EngineError::InvalidSpec("duplicate split id".into()));
        }
        if ids.last().is_some_and(|&m| m >= 1 << 23) {
            return Err(EngineError::InvalidSpec("split id exceeds 2^23".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines the job's output besides input
    /// bytes: name, functions, partition count, split ids and file names.
    pub fn spec_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.name, &self.map_fn, &self.reduce_fn] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update((self.partitions as u64).to_le_bytes());
        for s in &self.splits {
            h.update(s.id.to_le_bytes());
            let name = s.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        hex(&h.finalize())
    }
}

/// Emission side of a map task.
pub struct MapContext<'a> {
    split_id: u32,
    partitions: usize,
    counter: u64,
    buffers: Vec<Vec<KvRecord>>,
    buffered: usize,
    spill_bytes: usize,
    runs: usize,
    dir: &'a Path,
    broadcast: Option<&'a [u8]>,
    emitted: u64,
}

impl<'a> MapContext<'a> {
    pub fn split_id(&self) -> u32 {
        self.split_id
    }

    pub fn broadcast(&self) -> Result<&'a [u8], EngineError> {
        self.broadcast.ok_or(EngineError::MissingBroadcast)
    }

    pub fn emit(&mut self, key: &[u8], value: Vec<u8>) -> io::Result<()> {
        let rec = KvRecord {
            key: key.to_vec(),
            seq: (self.split_id as u64) << 40 | self.counter,
            value,
        };
        self.counter += 1;
        self.emitted += 1;
        self.buffered += rec.framed_len();
        let p = partition_of(&rec.key, self.partitions);
        self.buffers[p].push(rec);
        if self.buffered >= self.spill_bytes {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> io::Result<()> {
        for (p, buf) in self.buffers.iter_mut().enumerate() {
            if buf.is_empty() {
                continue;
            }
            buf.sort_unstable_by(|a, b| a.key.cmp(&b.key).then(a.seq.cmp(&b.seq)));
            let name = format!("map-{:08}-{:05}-{:05}.run", self.split_id, p, self.runs);
            write_atomically(&self.dir.join(name), |w| {
                for r in buf.iter() {
                    r.write_to(w)?;
                }
                Ok(())
            })?;
            buf.clear();
        }
        self.runs += 1;
        self.buffered = 0;
        Ok(())
    }
}

fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    body(&mut w)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_data()?;
    fs::rename(&tmp, path)
}

struct RunReader {
    reader: BufReader<File>,
    path: PathBuf,
}

/// K-way merge over sorted runs.
pub struct Merger {
    runs: Vec<RunReader>,
    heap: BinaryHeap<Reverse<(Vec<u8>, u64, usize)>>,
    pending: Vec<Option<Vec<u8>>>,
    error: Option<EngineError>,
}

impl Merger {
    fn open(paths: &[PathBuf]) -> Result<Self, EngineError> {
        let mut m = Self {
            runs: Vec::with_capacity(paths.len()),
            heap: BinaryHeap::new(),
            pending: vec![None; paths.len()],
            error: None,
        };
        for (i, p) in paths.iter().enumerate() {
            m.runs.push(RunReader {
                reader: BufReader::new(File::open(p)?),
                path: p.clone(),
            });
            m.advance(i)?;
        }
        Ok(m)
    }

    fn advance(&mut self, i: usize) -> Result<(), EngineError> {
        let run = &mut self.runs[i];
        match KvRecord::read_from(&mut run.reader) {
            Ok(Some(rec)) => {
                self.pending[i] = Some(rec.value);
                self.heap.push(Reverse((rec.key, rec.seq, i)));
                Ok(())
            }
            Ok(None) => Ok(()),
            Err(e) => Err(EngineError::Corrupt {
                path: run.path.clone(),
                reason: e.to_string(),
            }),
        }
    }

    fn peek_key(&self) -> Option<&[u8]> {
        self.heap.peek().map(|Reverse((k, _, _))| k.as_slice())
    }

    fn pop(&mut self) -> Option<(Vec<u8>, u64, Vec<u8>)> {
        let Reverse((key, seq, i)) = self.heap.pop()?;
        let value = self.pending[i].take().expect("pending value");
        if let Err(e) = self.advance(i) {
            self.error.get_or_insert(e);
        }
        Some((key, seq, value))
    }
}

/// Values of one key in `seq` order.
pub struct Values<'m> {
    merger: &'m mut Merger,
    key: Vec<u8>,
    count: u64,
}

impl Iterator for Values<'_> {
    type Item = Vec<u8>;

    fn next(&mut self) -> Option<Vec<u8>> {
        if self.merger.peek_key() != Some(self.key.as_slice()) {
            return None;
        }
        self.count += 1;
        self.merger.pop().map(|(_, _, v)| v)
    }
}

/// Output side of a reduce task.
pub struct ReduceContext<'a> {
    partition: usize,
    out_path: PathBuf,
    writer: Option<BufWriter<File>>,
    written: u64,
    output_dir: &'a Path,
    broadcast: Option<&'a [u8]>,
    side_files: Vec<PathBuf>,
}

impl<'a> ReduceContext<'a> {
    pub fn partition(&self) -> usize {
        self.partition
    }

    pub fn broadcast(&self) -> Result<&'a [u8], EngineError> {
        self.broadcast.ok_or(EngineError::MissingBroadcast)
    }

    pub fn emit(&mut self, key: &[u8], value: &[u8]) -> io::Result<()> {
        if self.writer.is_none() {
            let tmp = self.out_path.with_extension("tmp");
            self.writer = Some(BufWriter::new(File::create(tmp)?));
        }
        let rec = KvRecord {
            key: key.to_vec(),
            seq: self.written,
            value: value.to_vec(),
        };
        rec.write_to(self.writer.as_mut().unwrap())?;
        self.written += 1;
        Ok(())
    }

    /// Writes a named file next to the partition outputs (temp then rename).
    /// Names must be unique across the job.
    pub fn write_side_file(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
    ) -> io::Result<PathBuf> {
        let path = self.output_dir.join(name);
        write_atomically(&path, body)?;
        self.side_files.push(path.clone());
        Ok(path)
    }

    fn commit(mut self) -> io::Result<(u64, Vec<PathBuf>)> {
        if let Some(w) = self.writer.take() {
            w.into_inner().map_err(|e| e.into_error())?.sync_data()?;
            fs::rename(self.out_path.with_extension("tmp"), &self.out_path)?;
        }
        Ok((self.written, self.side_files))
    }

    fn abort(mut self) {
        drop(self.writer.take());
        let _ = fs::remove_file(self.out_path.with_extension("tmp"));
        for f in &self.side_files {
            let _ = fs::remove_file(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobManifest {
    pub version: u32,
    pub job: String,
    pub spec_hash: String,
    pub broadcast_sha256: Option<String>,
    pub partitions: usize,
    pub splits: usize,
    pub map_records_emitted: u64,
    pub reduce_records_in: u64,
    pub reduce_records_out: u64,
    /// Partition outputs, in partition order.
    pub outputs: Vec<OutputFile>,
    /// Files written by reducers, sorted by name.
    pub side_files: Vec<OutputFile>,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub dir: PathBuf,
    pub manifest: JobManifest,
}

impl JobOutput {
    pub fn partition_files(&self) -> Vec<PathBuf> {
        self.manifest.outputs.iter().map(|o| self.dir.join(&o.file)).collect()
    }

    /// All output records in partition order.
    pub fn records(&self) -> Result<Vec<KvRecord>, EngineError> {
        let mut out = Vec::new();
        for f in self.partition_files() {
            out.extend(read_records(&f)?);
        }
        Ok(out)
    }
}

fn file_entry(path: &Path) -> io::Result<OutputFile> {
    let bytes = fs::read(path)?;
    Ok(OutputFile {
        file: path.file_name().unwrap().to_string_lossy().into_owned(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn message(r: std::thread::Result<Result<(), TaskError>>) -> Option<String> {
    match r {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(
            panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "task panicked".into()),
        ),
    }
}

/// Runs `tasks` indices on `workers` threads; the first error wins.
fn run_pool<E: Send>(
    workers: usize,
    tasks: usize,
    f: impl Fn(usize) -> Result<(), E> + Sync,
) -> Result<(), E> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<(usize, E)>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(tasks.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks || failure.lock().unwrap().is_some() {
                    break;
                }
                if let Err(e) = f(i) {
                    let mut g = failure.lock().unwrap();
                    // keep the lowest failing task for a stable message
                    if g.as_ref().is_none_or(|(j, _)| i < *j) {
                        *g = Some((i, e));
                    }
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// Runs a job. `map` and `reduce` must be pure functions of their inputs
/// and the broadcast payload.
pub fn run_job<M, R>(spec: &JobSpec, workers: usize, map: M, reduce: R) -> Result<JobOutput, EngineError>
where
    M: Fn(&InputSplit, &mut MapContext) -> Result<(), TaskError> + Sync,
    R: Fn(&[u8], &mut Values, &mut ReduceContext) -> Result<(), TaskError> + Sync,
{
    spec.validate()?;
    let work = spec.scratch.join(&spec.name);
    if work.exists() {
        fs::remove_dir_all(&work)?;
    }
    fs::create_dir_all(&work)?;
    if spec.output.exists() {
        fs::remove_dir_all(&spec.output)?;
    }
    fs::create_dir_all(&spec.output)?;
    let broadcast = spec.broadcast.as_deref();
    let emitted = AtomicU64::new(0);

    run_pool(workers, spec.splits.len(), |t| {
        let split = &spec.splits[t];
        let mut last = String::new();
        for _ in 0..spec.max_attempts {
            let mut ctx = MapContext {
                split_id: split.id,
                partitions: spec.partitions,
                counter: 0,
                buffers: vec![Vec::new(); spec.partitions],
                buffered: 0,
                spill_bytes: spec.spill_bytes.max(1),
                runs: 0,
                dir: &work,
                broadcast,
                emitted: 0,
            };
            let r = catch_unwind(AssertUnwindSafe(|| -> Result<(), TaskError> {
                map(split, &mut ctx)?;
                ctx.spill()?;
                Ok(())
            }));
            match message(r) {
                None => {
                    emitted.fetch_add(ctx.emitted, Ordering::Relaxed);
                    return Ok(());
                }
                Some(m) => {
                    last = m;
                    remove_split_runs(&work, split.id)?;
                }
            }
        }
        Err(EngineError::MapFailed {
            split: split.id,
            attempts: spec.max_attempts,
            message: last,
        })
    })?;

    let mut runs: Vec<Vec<PathBuf>> = vec![Vec::new(); spec.partitions];
    let mut names: Vec<String> = fs::read_dir(&work)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".run"))
        .collect();
    names.sort();
    for n in names {
        let p: usize = n[13..18].parse().map_err(|_| EngineError::Corrupt {
            path: work.join(&n),
            reason: "bad run file name".into(),
        })?;
        runs[p].push(work.join(n));
    }

    let reduced_in = AtomicU64::new(0);
    let reduced_out = AtomicU64::new(0);
    let side: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());
    run_pool(workers, spec.partitions, |p| {
        if runs[p].is_empty() {
            return Ok(());
        }
        let mut last = String::new();
        for _ in 0..spec.max_attempts {
            let mut merger = Merger::open(&runs[p])?;
            let mut ctx = ReduceContext {
                partition: p,
                out_path: spec.output.join(format!("part-{p:05}")),
                writer: None,
                written: 0,
                output_dir: &spec.output,
                broadcast,
                side_files: Vec::new(),
            };
            let mut seen = 0u64;
            let r = catch_unwind(AssertUnwindSafe(|| -> Result<(), TaskError> {
                while let Some(key) = merger.peek_key().map(<[u8]>::to_vec) {
                    let mut values = Values {
                        merger: &mut merger,
                        key,
                        count: 0,
                    };
                    let key = values.key.clone();
                    reduce(&key, &mut values, &mut ctx)?;
                    for _ in values.by_ref() {}
                    seen += values.count;
                }
                if let Some(e) = merger.error.take() {
                    return Err(Box::new(e));
                }
                Ok(())
            }));
            match message(r) {
                None => {
                    let (out, files) = ctx.commit()?;
                    reduced_in.fetch_add(seen, Ordering::Relaxed);
                    reduced_out.fetch_add(out, Ordering::Relaxed);
                    side.lock().unwrap().extend(files);
                    return Ok(());
                }
                Some(m) => {
                    last = m;
                    ctx.abort();
                }
            }
        }
        Err(EngineError::ReduceFailed {
            partition: p,
            attempts: spec.max_attempts,
            message: last,
        })
    })?;
    fs::remove_dir_all(&work)?;

    let mut outputs = Vec::new();
    for p in 0..spec.partitions {
        let f = spec.output.join(format!("part-{p:05}"));
        if f.exists() {
            outputs.push(file_entry(&f)?);
        }
    }
    let mut side_files = side
        .into_inner()
        .unwrap()
        .iter()
        .map(|f| file_entry(f))
        .collect::<io::Result<Vec<_>>>()?;
    side_files.sort_by(|a, b| a.file.cmp(&b.file));
    let manifest = JobManifest {
        version: 1,
        job: spec.name.clone(),
        spec_hash: spec.spec_hash(),
        broadcast_sha256: broadcast.map(sha256_hex),
        partitions: spec.partitions,
        splits: spec.splits.len(),
        map_records_emitted: emitted.into_inner(),
        reduce_records_in: reduced_in.into_inner(),
        reduce_records_out: reduced_out.into_inner(),
        outputs,
        side_files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomically(&spec.output.join("manifest.json"), |w| w.write_all(&json))?;
    Ok(JobOutput {
        dir: spec.output.clone(),
        manifest,
    })
}

fn remove_split_runs(dir: &Path, split: u32) -> io::Result<()> {
    let prefix = format!("map-{split:08}-");
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_name().to_string_lossy().starts_with(&prefix) {
            fs::remove_file(e.path())?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<JobManifest, EngineError> {
    let text = fs::read(dir.join("manifest.json"))?;
    serde_json::from_slice(&text).map_err(|e| EngineError::Corrupt {
        path: dir.join("manifest.json"),
        reason: e.to_string(),
    })
}
