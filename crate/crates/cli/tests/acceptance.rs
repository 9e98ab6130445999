//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4` runs a subset. `ACCEPTANCE_STRICT=1` makes any
//! failure exit non-zero.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use sparsecast::data::{
    iterate_batches, plan_epoch, table_profiles, valid_indices, write_corpus, CorpusManifest, GeneratorConfig,
    LoaderConfig, PlanConfig,
};
use sparsecast::models::ModelKind;
use sparsecast::tensor::ConvSpec;
use testkit::cases::*;
use testkit::random::rng;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    check: fn(&Path) -> Result<String>,
}

const fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "dense-oracle equivalence",
        limit: minutes(1),
        check: dense_oracle_equivalence,
    },
    Criterion {
        id: 2,
        name: "gradient suite",
        limit: minutes(5),
        check: gradient_suite,
    },
    Criterion {
        id: 3,
        name: "rulebook correctness",
        limit: Some(Duration::from_secs(30)),
        check: rulebook_correctness,
    },
    Criterion {
        id: 4,
        name: "per-city throughput pattern",
        limit: minutes(10),
        check: throughput_pattern,
    },
    Criterion {
        id: 5,
        name: "two-stage loader",
        limit: minutes(5),
        check: two_stage_loader,
    },
    Criterion {
        id: 6,
        name: "residual network variants",
        limit: minutes(30),
        check: resnet_variants,
    },
    Criterion {
        id: 7,
        name: "per-city unet curves",
        limit: minutes(20),
        check: unet_curves,
    },
    Criterion {
        id: 8,
        name: "single-batch overfit",
        limit: None,
        check: single_batch_overfit,
    },
    Criterion {
        id: 9,
        name: "deterministic training",
        limit: None,
        check: deterministic_training,
    },
    Criterion {
        id: 10,
        name: "format round-trips",
        limit: None,
        check: format_round_trips,
    },
];

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for c in CRITERIA
        .iter()
        .filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id)))
    {
        let scratch = tempfile::tempdir().expect("scratch directory");
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.check)(scratch.path())));
        let elapsed = start.elapsed();
        let result = match outcome {
            Ok(Ok(detail)) => match c.limit {
                Some(limit) if elapsed > limit => Err(format!("{detail}; over the {} s limit", limit.as_secs())),
                _ => Ok(detail),
            },
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(c.id);
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {}: {detail} ({:.1} s)", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}

fn sparsecast(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sparsecast"))
        .args(args)
        .output()
        .context("running sparsecast")?;
    ensure!(
        out.status.success(),
        "sparsecast {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn gen_data(out: &Path, args: &[&str]) -> Result<PathBuf> {
    let dir = out.to_str().context("non-UTF-8 path")?;
    let mut all = vec!["gen-data", "--out", dir];
    all.extend_from_slice(args);
    sparsecast(&all)?;
    Ok(out.join("manifest.tsv"))
}

/// Rows of a CSV with `#` trailer lines, keyed by header name.
fn read_csv(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(header
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_owned(), v.to_owned()))
                .collect())
        })
        .collect()
}

fn field(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    row.get(key)
        .with_context(|| format!("missing column {key}"))?
        .parse()
        .with_context(|| format!("column {key} is not a number"))
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("UTF-8 scratch path")
}

fn dense_oracle_equivalence(_: &Path) -> Result<String> {
    let densities = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 0.5];
    let mut r = rng(101);
    for i in 0..210 {
        dense_equivalence_case(&mut r, densities[i % densities.len()], 1e-9);
    }
    Ok("210 cases, densities 0.1% to 50%, within 1e-9".into())
}

fn gradient_suite(_: &Path) -> Result<String> {
    const SEEDS: u64 = 20;
    let mut ops = 0;
    let mut each = |f: &dyn Fn(u64)| {
        for s in 0..SEEDS {
            f(s);
        }
        ops += 1;
    };
    each(&|s| conv_grad_case(100 + s, ConvSpec::same(2, 2), [1, 2, 3, 3, 3], None));
    each(&|s| {
        conv_grad_case(
            150 + s,
            ConvSpec {
                stride: [1, 2, 2],
                ..ConvSpec::same(2, 3)
            },
            [2, 2, 2, 5, 4],
            None,
        )
    });
    each(&|s| conv2d_grad_case(200 + s));
    each(&|s| conv_grad_case(300 + s, ConvSpec::upsample(2, 2), [1, 2, 1, 2, 3], Some([1, 4, 5])));
    each(&|s| maxpool_grad_case(400 + s));
    each(&|s| elementwise_grad_case(500 + s));
    each(&|s| sparse_conv_grad_case(700 + s, false));
    each(&|s| sparse_conv_grad_case(800 + s, true));
    each(&|s| sparse_pool_relu_grad_case(900 + s));
    for kind in ModelKind::ALL {
        each(&|s| model_grad_case(kind, 1000 + s));
    }
    Ok(format!("{ops} gradient checks x {SEEDS} seeds within 1e-6"))
}

fn rulebook_correctness(_: &Path) -> Result<String> {
    let mut r = rng(11);
    for case in 0..500 {
        rulebook_case(&mut r, case);
    }
    let mut r = rng(12);
    for _ in 0..500 {
        transposed_rulebook_case(&mut r);
    }
    Ok("500 forward and 500 transposed patterns equal brute force".into())
}

/// Spearman correlation of two tie-free samples from squared rank differences.
fn spearman_no_ties(x: &[f64], y: &[f64]) -> Result<f64> {
    let rank = |v: &[f64]| -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        ensure!(order.windows(2).all(|w| v[w[0]] != v[w[1]]), "tied values");
        let mut r = vec![0.0; v.len()];
        for (i, &k) in order.iter().enumerate() {
            r[k] = i as f64;
        }
        Ok(r)
    };
    let (rx, ry) = (rank(x)?, rank(y)?);
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

fn throughput_pattern(scratch: &Path) -> Result<String> {
    let manifest = gen_data(
        &scratch.join("corpus"),
        &["--days", "1", "--size", "64x64", "--seed", "1"],
    )?;
    let rows = read_csv(&sparsecast(&[
        "bench-conv",
        "--manifest",
        path_str(&manifest),
        "--batches",
        "20",
    ])?)?;
    ensure!(rows.len() == 8, "expected 8 cities, got {}", rows.len());
    let col = |k: &str| rows.iter().map(|r| field(r, k)).collect::<Result<Vec<f64>>>();
    let (nnz, dense, sparse) = (
        col("nnz_rate")?,
        col("dense_batches_per_s")?,
        col("sparse_batches_per_s")?,
    );
    let mean = dense.iter().sum::<f64>() / dense.len() as f64;
    let spread = dense.iter().map(|d| (d / mean - 1.0).abs()).fold(0.0, f64::max);
    let rho = spearman_no_ties(&sparse, &nnz)?;
    let log_speedup: f64 = sparse.iter().zip(&dense).map(|(s, d)| (s / d).ln()).sum::<f64>() / 8.0;
    let speedup = log_speedup.exp();
    let detail = format!(
        "dense spread {:.1}%, spearman {rho:.3}, geomean speedup {speedup:.2}x",
        100.0 * spread
    );
    ensure!(spread <= 0.10, "{detail}: dense throughput varies by more than 10%");
    ensure!(rho <= -0.9, "{detail}: sparse throughput does not fall with nnz rate");
    ensure!(speedup > 2.0, "{detail}: speedup at most 2x");
    Ok(detail)
}

fn loader_rate(manifest: &Path, scheme: &str) -> Result<(f64, String)> {
    let rows = read_csv(&sparsecast(&[
        "bench-loader",
        "--manifest",
        path_str(manifest),
        "--scheme",
        scheme,
    ])?)?;
    let row = rows.first().context("no loader row")?;
    Ok((field(row, "batches_per_second")?, row["order_hash"].clone()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn two_stage_loader(scratch: &Path) -> Result<String> {
    let manifest = gen_data(
        &scratch.join("corpus"),
        &["--days", "1", "--size", "64x64", "--seed", "1"],
    )?;
    let (mut two, mut global, mut hashes) = (Vec::new(), Vec::new(), BTreeSet::new());
    for _ in 0..3 {
        let (rate, hash) = loader_rate(&manifest, "two-stage")?;
        two.push(rate);
        hashes.insert(hash);
        global.push(loader_rate(&manifest, "global")?.0);
    }
    ensure!(hashes.len() == 1, "two-stage order differs between runs");
    let ratio = median(two) / median(global);

    // Within-file multisets on the timing corpus.
    let m = CorpusManifest::load(&manifest)?;
    for seed in 0..5 {
        let plan = plan_epoch(&m, seed, PlanConfig::default())?;
        for f in &plan.files {
            let mut idx = f.indices.clone();
            idx.sort_unstable();
            ensure!(
                idx == (0..240).collect::<Vec<u16>>(),
                "file {} indices differ from 0..240",
                f.file
            );
        }
    }

    // Coverage on a 14-day corpus, every (year, weekday) pair once per city.
    let config = GeneratorConfig {
        cities: table_profiles(),
        timesteps: 30,
        height: 4,
        width: 4,
        seed: 2,
    };
    let m = write_corpus(&config, 14, &scratch.join("calendar"))?;
    let (cities, years, weekdays) = (m.cities(), m.years(), m.weekdays());
    ensure!(
        cities.len() == 8 && weekdays.len() == 7 && years.len() > 1,
        "calendar corpus too narrow"
    );
    let expected_indices: Vec<u16> = (0..13).collect();
    let mut plans = 0;
    for seed in 0..40 {
        for files in [Some(14), Some(20), Some(56), None] {
            let plan = plan_epoch(
                &m,
                seed,
                PlanConfig {
                    indices_per_file: 240,
                    files_per_epoch: files,
                },
            )?;
            let picked: BTreeSet<usize> = plan.files.iter().map(|f| f.file).collect();
            ensure!(picked.len() == plan.files.len(), "a file was drawn twice");
            ensure!(plan.files.len() == files.unwrap_or(m.len()), "wrong file count");
            ensure!(
                plan.files
                    .iter()
                    .map(|f| f.entry.city.as_str())
                    .collect::<BTreeSet<_>>()
                    == cities,
                "missing city"
            );
            ensure!(
                plan.files.iter().map(|f| f.entry.year).collect::<BTreeSet<_>>() == years,
                "missing year"
            );
            ensure!(
                plan.files.iter().map(|f| f.entry.weekday).collect::<BTreeSet<_>>() == weekdays,
                "missing weekday"
            );
            for f in &plan.files {
                let mut idx = f.indices.clone();
                idx.sort_unstable();
                ensure!(
                    idx == expected_indices && idx == valid_indices(30, 240),
                    "file {} indices",
                    f.file
                );
            }
            let mut streamed: Vec<(usize, u16)> = Vec::new();
            for b in iterate_batches(
                &plan,
                LoaderConfig {
                    batch_size: 3,
                    workers: 2,
                    ..Default::default()
                },
            )? {
                streamed.extend(b?.samples.iter().map(|s| (s.file, s.start)));
            }
            ensure!(streamed == plan.sequence(), "loader order differs from the plan");
            plans += 1;
        }
    }
    let detail = format!("two-stage/global {ratio:.2}x (median of 3 cold runs); {plans} plans covered");
    ensure!(ratio >= 5.0, "{detail}: below 5x");
    Ok(detail)
}

/// `model -> train_mse by epoch` from a combined metrics CSV.
fn curves(text: &str, key: &[&str]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in read_csv(text)? {
        let k = key.iter().map(|k| row[*k].as_str()).collect::<Vec<_>>().join("/");
        let curve = out.entry(k).or_default();
        ensure!(field(&row, "epoch")? as usize == curve.len() + 1, "epochs out of order");
        curve.push(field(&row, "train_mse")?);
    }
    Ok(out)
}

fn resnet_variants(scratch: &Path) -> Result<String> {
    let manifest = gen_data(
        &scratch.join("corpus"),
        &["--cities", "MOS", "--days", "14", "--size", "16x16", "--seed", "1"],
    )?;
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in [1, 2, 3] {
        let out = scratch.join(format!("seed{seed}"));
        sparsecast(&[
            "train",
            "--experiment",
            "fig3",
            "--manifest",
            path_str(&manifest),
            "--epochs",
            "30",
            "--seed",
            &seed.to_string(),
            "--files-per-epoch",
            "7",
            "--indices-per-file",
            "8",
            "--out",
            path_str(&out),
        ])?;
        let c = curves(&std::fs::read_to_string(out.join("fig3.csv"))?, &["model"])?;
        let get = |k: &str| {
            c.get(k)
                .filter(|v| v.len() == 30)
                .with_context(|| format!("{k}: no 30-epoch curve"))
        };
        let (seq, conv, flat) = (get("3dresnet")?, get("3dresnet-convout")?, get("2dresnet")?);
        let final_ok = seq[29] <= conv[29];
        let slow_ok = flat[9] > seq[9] && flat[9] > conv[9];
        if final_ok && slow_ok {
            good += 1;
        }
        notes.push(format!(
            "seed {seed}: final {:.3} vs {:.3}, epoch 10 2d {:.3} vs {:.3}/{:.3}",
            seq[29], conv[29], flat[9], seq[9], conv[9]
        ));
    }
    let detail = format!("ordering holds in {good}/3 seeds ({})", notes.join("; "));
    ensure!(good >= 2, "{detail}");
    Ok(detail)
}

fn unet_curves(scratch: &Path) -> Result<String> {
    let manifest = gen_data(
        &scratch.join("corpus"),
        &["--days", "3", "--size", "32x32", "--seed", "1"],
    )?;
    let out = scratch.join("runs");
    sparsecast(&[
        "train",
        "--experiment",
        "fig4",
        "--manifest",
        path_str(&manifest),
        "--epochs",
        "5",
        "--seed",
        "1",
        "--indices-per-file",
        "40",
        "--out",
        path_str(&out),
    ])?;
    let c = curves(&std::fs::read_to_string(out.join("fig4.csv"))?, &["model", "city"])?;
    let mut detail = Vec::new();
    for model in ["sparse-unet", "conv3d-unet"] {
        let mine: Vec<&Vec<f64>> = c
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{model}/")))
            .map(|(_, v)| v)
            .collect();
        ensure!(mine.len() == 8, "{model}: {} city curves", mine.len());
        ensure!(
            mine.iter().all(|v| v.len() == 5),
            "{model}: a curve is not 5 epochs long"
        );
        ensure!(
            mine.iter().all(|v| v.iter().all(|x| x.is_finite())),
            "{model}: non-finite MSE"
        );
        let falling = mine.iter().filter(|v| v[4] < v[0]).count();
        detail.push(format!("{model} falls in {falling}/8 cities"));
        ensure!(falling >= 6, "{}", detail.join(", "));
    }
    Ok(detail.join(", "))
}

fn single_batch_overfit(scratch: &Path) -> Result<String> {
    let batch = overfit_batch(scratch);
    let mut detail = Vec::new();
    for kind in ModelKind::ALL {
        let (initial, best) = overfit_case(kind, &batch, 200, 1e-3);
        let ratio = best / initial;
        detail.push(format!("{kind} {:.2}%", 100.0 * ratio));
        ensure!(ratio < 0.01, "{kind}: MSE {initial:.3} -> {best:.3} after 200 steps");
    }
    Ok(format!("final/initial MSE: {}", detail.join(", ")))
}

fn files_of(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?);
    }
    Ok(out)
}

fn deterministic_training(scratch: &Path) -> Result<String> {
    let manifest = gen_data(
        &scratch.join("corpus"),
        &["--cities", "MOS,BER", "--days", "7", "--size", "8x8", "--seed", "3"],
    )?;
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>> {
        let out = scratch.join(name);
        sparsecast(&[
            "train",
            "--experiment",
            "fig3",
            "--seed",
            "7",
            "--deterministic",
            "--manifest",
            path_str(&manifest),
            "--epochs",
            "2",
            "--indices-per-file",
            "6",
            "--out",
            path_str(&out),
        ])?;
        files_of(&out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let names: Vec<&String> = a.keys().collect();
    let ckpts = names.iter().filter(|n| n.ends_with(".ckpt")).count();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    ensure!(ckpts == 3 && csvs == 4, "unexpected outputs {names:?}");
    if a != b {
        let differ: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        bail!("outputs differ: {differ:?}");
    }
    Ok(format!("{ckpts} checkpoints and {csvs} CSVs byte-identical"))
}

fn format_round_trips(scratch: &Path) -> Result<String> {
    let mut r = rng(21);
    for i in 0..100 {
        day_file_round_trip_case(&mut r, scratch, i);
    }
    for _ in 0..100 {
        checkpoint_round_trip_case(&mut r);
    }
    for i in 0..100 {
        dump_round_trip_case(&mut r, scratch, i);
    }
    Ok("100 day files, 100 checkpoints, 100 dense/sparse dumps bit-exact".into())
}
