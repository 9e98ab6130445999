use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use sparsecast::data::{iterate_batches, plan_epoch, CorpusManifest, LoaderConfig, PlanConfig};
use sparsecast::models::{forward, read_checkpoint};
use sparsecast::tensor::{write_dense_dump, DenseTensor};
use sparsecast::train::{ErrorAccumulator, Evaluation};

use crate::args::EvalArgs;
use crate::report::{create_dir, csv_text, write_file};
use crate::usage;

/// Value as it would be stored in a day file: rounded and clamped to a byte.
pub fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Cells of each frame of a `[1, C, F, H, W]` window with a non-zero
/// quantized value in any channel.
pub fn nonzero_cells_per_frame(window: &DenseTensor<f32>) -> Vec<usize> {
    let s = window.shape();
    let (c, f, hw) = (s[1], s[2], s[3] * s[4]);
    let x = window.data();
    (0..f)
        .map(|fi| {
            (0..hw)
                .filter(|&p| (0..c).any(|ci| quantize(x[(ci * f + fi) * hw + p]) != 0))
                .count()
        })
        .collect()
}

/// Sample `b` of a `[B, ...]` tensor as a `[1, ...]` tensor.
pub fn sample(x: &DenseTensor<f32>, b: usize) -> DenseTensor<f32> {
    let n = x.len() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    DenseTensor::new(shape, x.data()[b * n..(b + 1) * n].to_vec()).expect("sample slice matches its shape")
}

fn print_evaluation(e: &Evaluation) {
    println!("mse {:.6} over {} samples", e.mse, e.samples);
    for (i, m) in e.per_frame.iter().enumerate() {
        println!("frame {} mse {:.6}", i + 1, m);
    }
    for (city, s) in &e.per_city {
        println!("city {city} mse {:.6} samples {}", s.mse, s.samples);
    }
}

fn evaluation_rows(e: &Evaluation) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "overall".into(),
        "all".into(),
        e.mse.to_string(),
        e.samples.to_string(),
    ]];
    for (i, m) in e.per_frame.iter().enumerate() {
        rows.push(vec![
            "frame".into(),
            (i + 1).to_string(),
            m.to_string(),
            e.samples.to_string(),
        ]);
    }
    for (city, s) in &e.per_city {
        rows.push(vec![
            "city".into(),
            city.clone(),
            s.mse.to_string(),
            s.samples.to_string(),
        ]);
    }
    rows
}

pub fn run(a: &EvalArgs) -> Result<()> {
    if a.dump_frames > 0 && a.out.is_none() {
        return Err(usage("--dump-frames needs --out"));
    }
    if a.batch_size == 0 || a.workers == 0 || a.indices_per_file == 0 {
        return Err(usage("--batch-size, --workers and --indices-per-file must be positive"));
    }
    let state = read_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = CorpusManifest::load(&a.manifest)?;
    let plan = plan_epoch(
        &manifest,
        a.seed,
        PlanConfig {
            indices_per_file: a.indices_per_file,
            files_per_epoch: None,
        },
    )?;
    let loader = LoaderConfig {
        batch_size: a.batch_size,
        workers: a.workers,
        ..Default::default()
    };
    if let Some(out) = &a.out {
        create_dir(out)?;
    }
    let mut acc = ErrorAccumulator::new();
    let mut frames_txt = String::new();
    let mut dumped = 0;
    for batch in iterate_batches(&plan, loader)?.take(a.max_batches.unwrap_or(usize::MAX)) {
        let batch = batch?;
        let pred = forward(&state, &batch.input).context("checkpoint does not fit the corpus")?;
        let cities: Vec<&str> = batch.samples.iter().map(|s| &*s.city).collect();
        acc.add(&pred, &batch.target, &cities)?;
        for (b, s) in batch.samples.iter().enumerate() {
            if dumped == a.dump_frames {
                break;
            }
            let out = a.out.as_deref().expect("checked above");
            dump_window(
                out,
                dumped,
                &sample(&pred, b),
                &sample(&batch.target, b),
                &s.city,
                s.start,
                &mut frames_txt,
            )?;
            dumped += 1;
        }
    }
    let e = acc.finish()?;
    print_evaluation(&e);
    if let Some(out) = &a.out {
        let header = ["scope", "key", "mse", "samples"];
        write_file(
            &out.join("eval.csv"),
            csv_text(&header, &evaluation_rows(&e), a.seed, "eval", &[])?.as_bytes(),
        )?;
        if a.dump_frames > 0 {
            write_file(&out.join("frames.txt"), frames_txt.as_bytes())?;
        }
    }
    Ok(())
}

fn dump_window(
    out: &Path,
    index: usize,
    pred: &DenseTensor<f32>,
    target: &DenseTensor<f32>,
    city: &str,
    start: u16,
    lines: &mut String,
) -> Result<()> {
    let name = format!("window_{index}.dtnsr");
    write_dense_dump(&out.join(&name), pred)?;
    let (p, t) = (nonzero_cells_per_frame(pred), nonzero_cells_per_frame(target));
    for (f, (np, nt)) in p.iter().zip(&t).enumerate() {
        writeln!(
            lines,
            "{name}\tcity={city}\tstart={start}\tframe={}\tnonzero={np}\ttarget_nonzero={nt}",
            f + 1
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(0.49), 0);
        assert_eq!(quantize(0.5), 1);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(300.0), 255);
    }

    #[test]
    fn nonzero_cells_count_any_channel() {
        // [1, 2, 2, 1, 3]: frame 0 has cells 0 (channel 0) and 2 (channel 1).
        let mut x = DenseTensor::<f32>::zeros(&[1, 2, 2, 1, 3]);
        x.data_mut()[0] = 5.0;
        x.data_mut()[2 * 3 + 2] = 1.0;
        x.data_mut()[3 + 1] = 0.2;
        assert_eq!(nonzero_cells_per_frame(&x), vec![2, 0]);
    }

    #[test]
    fn sample_slices_the_batch_axis() {
        let x = DenseTensor::from_fn(&[3, 2], |i| i as f32);
        assert_eq!(sample(&x, 1).data(), &[2.0, 3.0]);
        assert_eq!(sample(&x, 1).shape(), &[1, 2]);
    }
}
