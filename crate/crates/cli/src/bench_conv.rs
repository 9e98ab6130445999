use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sparsecast::data::{iterate_batches, plan_epoch, table_profile, Batch, CorpusManifest, LoaderConfig, PlanConfig};
use sparsecast::models::{loss_and_grads, read_checkpoint, ModelKind, ModelState};

use crate::args::BenchConvArgs;
use crate::report::{csv_text, emit};
use crate::stats::{geometric_mean, max_relative_spread, median, spearman};
use crate::usage;

pub const MIN_TIMED_BATCHES: usize = 20;
pub const HEADER: [&str; 5] = [
    "city",
    "nnz_rate",
    "dense_batches_per_s",
    "sparse_batches_per_s",
    "speedup",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CityTiming {
    pub city: String,
    /// Mean non-zero rate of the timed batches.
    pub nnz_rate: f64,
    pub dense: Option<f64>,
    pub sparse: Option<f64>,
}

impl CityTiming {
    pub fn speedup(&self) -> Option<f64> {
        Some(self.sparse? / self.dense?)
    }

    fn row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.city.clone(),
            self.nnz_rate.to_string(),
            opt(self.dense),
            opt(self.sparse),
            opt(self.speedup()),
        ]
    }
}

/// Dense throughput spread, sparse-throughput/nnz rank correlation and mean speedup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub dense_spread: Option<f64>,
    pub sparse_spearman: Option<f64>,
    pub geomean_speedup: Option<f64>,
}

pub fn summarize(rows: &[CityTiming]) -> Summary {
    let all = |f: fn(&CityTiming) -> Option<f64>| rows.iter().map(f).collect::<Option<Vec<f64>>>();
    let nnz: Vec<f64> = rows.iter().map(|r| r.nnz_rate).collect();
    Summary {
        dense_spread: all(|r| r.dense).map(|d| max_relative_spread(&d)),
        sparse_spearman: all(|r| r.sparse).filter(|s| s.len() > 1).map(|s| spearman(&s, &nnz)),
        geomean_speedup: all(CityTiming::speedup).map(|s| geometric_mean(&s)),
    }
}

fn load_model(kind: ModelKind, trained: Option<&Path>, seed: u64) -> Result<ModelState<f32>> {
    let Some(dir) = trained else {
        return Ok(ModelState::init(kind.default_config(), seed)?);
    };
    let path = dir.join(format!("{kind}.ckpt"));
    let state = read_checkpoint(&path).with_context(|| format!("loading trained {kind} model"))?;
    if state.config.kind() != Some(kind) {
        bail!("{} does not hold a {kind} model", path.display());
    }
    Ok(state)
}

/// Times `loss_and_grads` round-robin over cities and models so drift in
/// machine speed is shared by every cell of the table.
pub fn time_cities(
    manifest: &CorpusManifest,
    models: &[(ModelKind, ModelState<f32>)],
    batch_size: usize,
    distinct: usize,
    warmup: usize,
    timed: usize,
    seed: u64,
) -> Result<Vec<CityTiming>> {
    let cities: Vec<String> = manifest.cities().into_iter().map(str::to_owned).collect();
    let mut pools: Vec<Vec<Batch>> = Vec::with_capacity(cities.len());
    for city in &cities {
        let plan = plan_epoch(&manifest.city(city), seed, PlanConfig::default())?;
        let loader = LoaderConfig {
            batch_size,
            workers: 1,
            ..Default::default()
        };
        let pool = iterate_batches(&plan, loader)?
            .take(distinct)
            .collect::<sparsecast::Result<Vec<_>>>()?;
        if pool.is_empty() {
            bail!("city {city} yields no batches");
        }
        pools.push(pool);
    }
    let mut times = vec![vec![Vec::with_capacity(timed); models.len()]; cities.len()];
    for round in 0..warmup + timed {
        for k in 0..cities.len() {
            let ci = (round + k) % cities.len();
            let batch = &pools[ci][round % pools[ci].len()];
            for m in 0..models.len() {
                let mi = if round % 2 == 0 { m } else { models.len() - 1 - m };
                let start = Instant::now();
                std::hint::black_box(loss_and_grads(&models[mi].1, &batch.input, &batch.target)?);
                if round >= warmup {
                    times[ci][mi].push(start.elapsed().as_secs_f64());
                }
            }
        }
    }
    Ok(cities
        .into_iter()
        .enumerate()
        .map(|(ci, city)| {
            let pool = &pools[ci];
            let rate = |kind: ModelKind| {
                models
                    .iter()
                    .position(|(k, _)| *k == kind)
                    .map(|mi| 1.0 / median(&times[ci][mi]))
            };
            CityTiming {
                city,
                nnz_rate: pool.iter().map(Batch::nnz_rate).sum::<f64>() / pool.len() as f64,
                dense: rate(ModelKind::Conv3DUNet),
                sparse: rate(ModelKind::SparseUNet),
            }
        })
        .collect())
}

pub fn run(a: &BenchConvArgs) -> Result<()> {
    if a.batches < MIN_TIMED_BATCHES {
        return Err(usage(format!("--batches must be at least {MIN_TIMED_BATCHES}")));
    }
    if a.batch_size == 0 || a.distinct_batches == 0 {
        return Err(usage("--batch-size and --distinct-batches must be positive"));
    }
    let mut kinds = a.models.clone();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty()
        || kinds
            .iter()
            .any(|k| !matches!(k, ModelKind::SparseUNet | ModelKind::Conv3DUNet))
    {
        return Err(usage("--models takes sparse-unet and/or conv3d-unet"));
    }
    let manifest = CorpusManifest::load(&a.manifest)?;
    if manifest.is_empty() {
        bail!("{} lists no files", a.manifest.display());
    }
    let models = kinds
        .iter()
        .map(|&k| Ok((k, load_model(k, a.trained.as_deref(), a.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = time_cities(
        &manifest,
        &models,
        a.batch_size,
        a.distinct_batches,
        a.warmup,
        a.batches,
        a.seed,
    )?;

    if a.report_nnz {
        for r in &rows {
            match table_profile(&r.city) {
                Some(p) => println!(
                    "nnz {}: measured {:.4}, table {:.4}, relative error {:+.1}%",
                    r.city,
                    r.nnz_rate,
                    p.rate,
                    100.0 * (r.nnz_rate / p.rate - 1.0)
                ),
                None => println!("nnz {}: measured {:.4}", r.city, r.nnz_rate),
            }
        }
    }
    let s = summarize(&rows);
    if let Some(v) = s.dense_spread {
        eprintln!("dense throughput spread across cities: {:.1}%", 100.0 * v);
    }
    if let Some(v) = s.sparse_spearman {
        eprintln!("spearman(sparse throughput, nnz rate): {v:.3}");
    }
    if let Some(v) = s.geomean_speedup {
        eprintln!("geometric-mean speedup: {v:.2}x");
    }
    let extra = [
        ("batches", a.batches.to_string()),
        ("warmup", a.warmup.to_string()),
        ("batch_size", a.batch_size.to_string()),
    ];
    let mode = if a.trained.is_some() { "trained" } else { "fresh" };
    let table: Vec<Vec<String>> = rows.iter().map(CityTiming::row).collect();
    emit(a.out.as_deref(), &csv_text(&HEADER, &table, a.seed, mode, &extra)?)
}
