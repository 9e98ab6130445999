use std::hash::Hasher;
use std::time::Instant;

use anyhow::{bail, Result};
use fnv::FnvHasher;
use sparsecast::data::{
    evict_path, global_shuffle_baseline, iterate_batches, plan_epoch, BatchStream, CorpusManifest, LoaderConfig,
    PlanConfig, SampleRef,
};

use crate::args::{BenchLoaderArgs, Scheme};
use crate::report::{csv_text, emit};
use crate::usage;

pub const HEADER: [&str; 8] = [
    "scheme",
    "workers",
    "batch_size",
    "batches",
    "samples",
    "seconds",
    "batches_per_second",
    "order_hash",
];

/// FNV-1a over the `(file, start)` stream.
#[derive(Default)]
pub struct OrderHash(FnvHasher);

impl OrderHash {
    pub fn add(&mut self, s: &SampleRef) {
        self.0.write(&(s.file as u64).to_le_bytes());
        self.0.write(&s.start.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoaderRun {
    pub batches: usize,
    pub samples: usize,
    pub seconds: f64,
    pub order_hash: u64,
}

impl LoaderRun {
    pub fn batches_per_second(&self) -> f64 {
        self.batches as f64 / self.seconds
    }
}

pub fn open_stream(
    manifest: &CorpusManifest,
    scheme: Scheme,
    seed: u64,
    plan: PlanConfig,
    loader: LoaderConfig,
) -> Result<BatchStream> {
    Ok(match scheme {
        Scheme::TwoStage => iterate_batches(&plan_epoch(manifest, seed, plan)?, loader)?,
        Scheme::Global => global_shuffle_baseline(manifest, seed, plan, loader)?,
    })
}

/// One epoch, or `max_batches` of it; the clock covers stream setup.
pub fn time_epoch(
    manifest: &CorpusManifest,
    scheme: Scheme,
    seed: u64,
    plan: PlanConfig,
    loader: LoaderConfig,
    max_batches: Option<usize>,
) -> Result<LoaderRun> {
    if loader.cold {
        for e in &manifest.entries {
            evict_path(&e.path)?;
        }
    }
    let start = Instant::now();
    let stream = open_stream(manifest, scheme, seed, plan, loader)?;
    let (mut batches, mut samples, mut hash) = (0, 0, OrderHash::default());
    for b in stream.take(max_batches.unwrap_or(usize::MAX)) {
        let b = b?;
        batches += 1;
        samples += b.samples.len();
        for s in &b.samples {
            hash.add(s);
        }
    }
    Ok(LoaderRun {
        batches,
        samples,
        seconds: start.elapsed().as_secs_f64(),
        order_hash: hash.finish(),
    })
}

pub fn run(a: &BenchLoaderArgs) -> Result<()> {
    if a.workers == 0 || a.batch_size == 0 || a.indices_per_file == 0 {
        return Err(usage("--workers, --batch-size and --indices-per-file must be positive"));
    }
    let manifest = CorpusManifest::load(&a.manifest)?;
    if manifest.is_empty() {
        bail!("{} lists no files", a.manifest.display());
    }
    let plan = PlanConfig {
        indices_per_file: a.indices_per_file,
        files_per_epoch: None,
    };
    let loader = LoaderConfig {
        batch_size: a.batch_size,
        workers: a.workers,
        cold: !a.warm,
        ..Default::default()
    };
    let r = time_epoch(&manifest, a.scheme, a.seed, plan, loader, a.max_batches)?;
    eprintln!(
        "{}: {} batches in {:.3} s, {:.1} batches/s",
        a.scheme.name(),
        r.batches,
        r.seconds,
        r.batches_per_second()
    );
    let row = vec![
        a.scheme.name().to_owned(),
        a.workers.to_string(),
        a.batch_size.to_string(),
        r.batches.to_string(),
        r.samples.to_string(),
        r.seconds.to_string(),
        r.batches_per_second().to_string(),
        format!("{:016x}", r.order_hash),
    ];
    let mode = if a.warm { "warm" } else { "cold" };
    emit(a.out.as_deref(), &csv_text(&HEADER, &[row], a.seed, mode, &[])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_hash_is_fnv1a_of_the_stream() {
        let s = SampleRef {
            file: 1,
            start: 2,
            city: "A".into(),
        };
        let mut h = OrderHash::default();
        h.add(&s);
        // Reference FNV-1a 64 over the same ten bytes.
        let mut want: u64 = 0xcbf2_9ce4_8422_2325;
        for b in [1u8, 0, 0, 0, 0, 0, 0, 0, 2, 0] {
            want ^= b as u64;
            want = want.wrapping_mul(0x0000_0100_0000_01b3);
        }
        assert_eq!(h.finish(), want);
    }
}
