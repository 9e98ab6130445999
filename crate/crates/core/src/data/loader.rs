//! Batch streams with multi-worker prefetch.
//!
//! Batches are assigned to workers by a fixed schedule and every worker sends
//! on its own bounded channel; the consumer reads the channels in schedule
//! order, so the stream is identical for any worker count.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::dayfile::{DayFileReader, DayHeader};
use super::manifest::CorpusManifest;
use super::sampler::{valid_indices, EpochPlan, PlanConfig, WINDOW};
use crate::error::{Error, Result};
use crate::models::{CHANNELS, HISTORY, HORIZON};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub workers: usize,
    /// Total batches buffered ahead of the consumer.
    pub prefetch: usize,
    /// Drop each file from the page cache right after reading from it.
    pub cold: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            workers: 2,
            prefetch: 8,
            cold: false,
        }
    }
}

impl LoaderConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.prefetch == 0 {
            return Err(Error::InvalidConfig(
                "batch size, workers and prefetch must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRef {
    /// Position of the file in the manifest.
    pub file: usize,
    pub start: u16,
    pub city: Arc<str>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 8, 12, H, W]`
    pub input: DenseTensor<f32>,
    /// `[B, 8, 6, H, W]`
    pub target: DenseTensor<f32>,
    pub samples: Vec<SampleRef>,
}

impl Batch {
    /// Fraction of input sites `(b, t, h, w)` with any non-zero channel.
    pub fn nnz_rate(&self) -> f64 {
        let s = self.input.shape();
        let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        let x = self.input.data();
        let mut occupied = 0usize;
        for bi in 0..b {
            for ti in 0..t {
                for p in 0..hw {
                    if (0..c).any(|ci| x[((bi * c + ci) * t + ti) * hw + p] != 0.0) {
                        occupied += 1;
                    }
                }
            }
        }
        occupied as f64 / (b * t * hw).max(1) as f64
    }

    /// City of the first sample.
    pub fn city(&self) -> &str {
        &self.samples[0].city
    }

    /// Zeroes target cells at grid sites that are empty in every history
    /// frame. A model whose outputs live on the input support can then fit the
    /// target exactly.
    pub fn restrict_target_to_input_support(&mut self) {
        let s = self.input.shape().to_vec();
        let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
        let f = self.target.shape()[2];
        let x = self.input.data();
        let active: Vec<bool> = (0..b * hw)
            .map(|i| {
                let (bi, p) = (i / hw, i % hw);
                (0..c * t).any(|ct| x[(bi * c * t + ct) * hw + p] != 0.0)
            })
            .collect();
        let y = self.target.data_mut();
        for bi in 0..b {
            for cf in 0..c * f {
                for p in 0..hw {
                    if !active[bi * hw + p] {
                        y[(bi * c * f + cf) * hw + p] = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Clone)]
struct Job {
    samples: Vec<(usize, PathBuf, u16, Arc<str>)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Scheme {
    /// Whole files are read once and cached channel-major.
    TwoStage,
    /// Every sample reopens its file and reads its 18 frames.
    PerSample,
}

pub struct BatchStream {
    receivers: Vec<Receiver<Result<Batch>>>,
    schedule: Vec<usize>,
    next: usize,
    handles: Vec<JoinHandle<()>>,
}

impl BatchStream {
    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        let w = *self.schedule.get(self.next)?;
        self.next += 1;
        match self.receivers[w].recv() {
            Ok(item) => Some(item),
            Err(_) => Some(Err(Error::InvalidConfig(format!("loader worker {w} exited early")))),
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Closing the channels unblocks producers waiting on a full queue.
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn spawn(jobs: Vec<Job>, schedule: Vec<usize>, scheme: Scheme, config: LoaderConfig) -> BatchStream {
    let workers = config.workers;
    let cap = config.prefetch.div_ceil(workers).max(1);
    let jobs = Arc::new(jobs);
    let schedule_arc = Arc::new(schedule.clone());
    let mut receivers = Vec::with_capacity(workers);
    let mut handles = Vec::with_capacity(workers);
    for w in 0..workers {
        let (tx, rx) = sync_channel(cap);
        receivers.push(rx);
        let (jobs, schedule) = (Arc::clone(&jobs), Arc::clone(&schedule_arc));
        handles.push(std::thread::spawn(move || {
            worker(w, &jobs, &schedule, scheme, config.cold, tx)
        }));
    }
    BatchStream {
        receivers,
        schedule,
        next: 0,
        handles,
    }
}

/// One day transposed once: channel-major `[C][T][H * W]` bytes.
struct FileCache {
    header: DayHeader,
    data: Vec<u8>,
}

/// Frame-major, channel-last bytes of `frames` frames to `[C][frames][H * W]`.
fn channel_major(raw: &[u8], frames: usize, hw: usize) -> Vec<u8> {
    let mut out = vec![0u8; raw.len()];
    for t in 0..frames {
        for (p, px) in raw[t * hw * CHANNELS..][..hw * CHANNELS]
            .chunks_exact(CHANNELS)
            .enumerate()
        {
            for (c, &v) in px.iter().enumerate() {
                out[(c * frames + t) * hw + p] = v;
            }
        }
    }
    out
}

fn load_file(path: &Path, cold: bool, start: u16) -> Result<FileCache> {
    let wrap = |e: Error| Error::Loader {
        path: path.to_owned(),
        start: start as usize,
        msg: e.to_string(),
    };
    let reader = DayFileReader::open(path).map_err(wrap)?;
    let raw = reader.read_all().map_err(wrap)?;
    if cold {
        reader.evict_all();
    }
    let header = *reader.header();
    if header.channels as usize != CHANNELS {
        return Err(wrap(Error::shape(
            "load_file",
            "channels",
            CHANNELS,
            header.channels as usize,
        )));
    }
    let hw = header.height as usize * header.width as usize;
    let data = channel_major(&raw, header.timesteps as usize, hw);
    Ok(FileCache { header, data })
}

struct Assembler {
    batch: usize,
    dims: Option<(usize, usize)>,
    input: Vec<f32>,
    target: Vec<f32>,
}

impl Assembler {
    fn new(batch: usize) -> Self {
        Self {
            batch,
            dims: None,
            input: Vec::new(),
            target: Vec::new(),
        }
    }

    fn check(&mut self, h: &DayHeader, path: &Path, start: u16) -> Result<usize> {
        let dims = (h.height as usize, h.width as usize);
        if h.channels as usize != CHANNELS {
            return Err(Error::Loader {
                path: path.to_owned(),
                start: start as usize,
                msg: format!("file has {} channels, models expect {CHANNELS}", h.channels),
            });
        }
        match self.dims {
            Some(d) if d != dims => Err(Error::Loader {
                path: path.to_owned(),
                start: start as usize,
                msg: format!("grid {}x{} differs from the batch's {}x{}", dims.0, dims.1, d.0, d.1),
            }),
            Some(_) => Ok(dims.0 * dims.1),
            None => {
                let hw = dims.0 * dims.1;
                self.dims = Some(dims);
                self.input.reserve_exact(self.batch * CHANNELS * HISTORY * hw);
                self.target.reserve_exact(self.batch * CHANNELS * HORIZON * hw);
                Ok(hw)
            }
        }
    }

    /// `block(c)` starts with the `WINDOW * H * W` bytes of channel `c`.
    fn push<'a>(&mut self, hw: usize, block: impl Fn(usize) -> &'a [u8]) {
        for c in 0..CHANNELS {
            let b = block(c);
            self.input.extend(b[..HISTORY * hw].iter().map(|&v| v as f32));
            self.target
                .extend(b[HISTORY * hw..WINDOW * hw].iter().map(|&v| v as f32));
        }
    }

    fn finish(self, samples: Vec<SampleRef>) -> Result<Batch> {
        let (h, w) = self.dims.unwrap_or((0, 0));
        let b = samples.len();
        Ok(Batch {
            input: DenseTensor::new(vec![b, CHANNELS, HISTORY, h, w], self.input)?,
            target: DenseTensor::new(vec![b, CHANNELS, HORIZON, h, w], self.target)?,
            samples,
        })
    }
}

fn build_batch(job: &Job, scheme: Scheme, cold: bool, cache: &mut VecDeque<(usize, Arc<FileCache>)>) -> Result<Batch> {
    let mut asm = Assembler::new(job.samples.len());
    let mut refs = Vec::with_capacity(job.samples.len());
    for (file, path, start, city) in &job.samples {
        let s = *start as usize;
        match scheme {
            Scheme::TwoStage => {
                let fc = match cache.iter().find(|(f, _)| f == file) {
                    Some((_, fc)) => Arc::clone(fc),
                    None => {
                        let fc = Arc::new(load_file(path, cold, *start)?);
                        if cache.len() == 2 {
                            cache.pop_front();
                        }
                        cache.push_back((*file, Arc::clone(&fc)));
                        fc
                    }
                };
                let hw = asm.check(&fc.header, path, *start)?;
                let t = fc.header.timesteps as usize;
                if s + WINDOW > t {
                    return Err(Error::Loader {
                        path: path.clone(),
                        start: s,
                        msg: format!("window runs past the {t} frames of the file"),
                    });
                }
                asm.push(hw, |c| &fc.data[(c * t + s) * hw..]);
            }
            Scheme::PerSample => {
                let wrap = |e: Error| Error::Loader {
                    path: path.clone(),
                    start: s,
                    msg: e.to_string(),
                };
                let reader = DayFileReader::open(path).map_err(wrap)?;
                let raw = reader.read_frames(s, WINDOW).map_err(wrap)?;
                if cold {
                    reader.evict_all();
                }
                let hw = asm.check(reader.header(), path, *start)?;
                let cm = channel_major(&raw, WINDOW, hw);
                asm.push(hw, |c| &cm[c * WINDOW * hw..]);
            }
        }
        refs.push(SampleRef {
            file: *file,
            start: *start,
            city: Arc::clone(city),
        });
    }
    asm.finish(refs)
}

fn worker(me: usize, jobs: &[Job], schedule: &[usize], scheme: Scheme, cold: bool, tx: SyncSender<Result<Batch>>) {
    let mut cache = VecDeque::new();
    for (job, _) in jobs.iter().zip(schedule).filter(|(_, &w)| w == me) {
        let batch = build_batch(job, scheme, cold, &mut cache);
        let failed = batch.is_err();
        if tx.send(batch).is_err() || failed {
            return;
        }
    }
}

fn chunk_jobs(samples: Vec<(usize, PathBuf, u16, Arc<str>)>, batch_size: usize) -> Vec<Job> {
    samples
        .chunks(batch_size)
        .map(|c| Job { samples: c.to_vec() })
        .collect()
}

/// Batches in plan order: each file's permuted indices are consumed
/// contiguously. A batch is produced by the worker owning the file of its
/// first sample, files being dealt to workers round-robin.
pub fn iterate_batches(plan: &EpochPlan, config: LoaderConfig) -> Result<BatchStream> {
    config.validate()?;
    let mut samples = Vec::with_capacity(plan.samples());
    let mut file_pos = Vec::with_capacity(plan.samples());
    for (pos, f) in plan.files.iter().enumerate() {
        let city: Arc<str> = Arc::from(f.entry.city.as_str());
        for &i in &f.indices {
            samples.push((f.file, f.entry.path.clone(), i, Arc::clone(&city)));
            file_pos.push(pos);
        }
    }
    let schedule = (0..samples.len())
        .step_by(config.batch_size)
        .map(|s| file_pos[s] % config.workers)
        .collect();
    Ok(spawn(
        chunk_jobs(samples, config.batch_size),
        schedule,
        Scheme::TwoStage,
        config,
    ))
}

/// Comparator: all `(file, index)` pairs of the corpus shuffled uniformly, each
/// sample read from its file on demand. Batches are dealt to workers round-robin.
pub fn global_shuffle_baseline(
    manifest: &CorpusManifest,
    seed: u64,
    plan: PlanConfig,
    config: LoaderConfig,
) -> Result<BatchStream> {
    config.validate()?;
    let mut samples = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let t = DayFileReader::open(&e.path)?.header().timesteps as usize;
        let city: Arc<str> = Arc::from(e.city.as_str());
        for s in valid_indices(t, plan.indices_per_file) {
            samples.push((i, e.path.clone(), s, Arc::clone(&city)));
        }
    }
    samples.shuffle(&mut StdRng::seed_from_u64(seed));
    let n = samples.len().div_ceil(config.batch_size);
    let schedule = (0..n).map(|j| j % config.workers).collect();
    Ok(spawn(
        chunk_jobs(samples, config.batch_size),
        schedule,
        Scheme::PerSample,
        config,
    ))
}
