//! Prediction error: overall, per forecast frame, and per city.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{forward, ModelState};
use crate::tensor::{DenseTensor, Real};

/// Reference scores from the public leaderboard. They need the competition
/// data and are kept for documentation only.
pub const REFERENCE_CORE_MSE: f64 = 50.23;
pub const REFERENCE_CORE_UNET_BASELINE: f64 = 51.28;
pub const REFERENCE_EXTENDED_MSE: f64 = 61.59;
pub const REFERENCE_EXTENDED_AVERAGE_BASELINE: f64 = 63.14;

#[derive(Clone, Debug, PartialEq)]
pub struct CityScore {
    pub mse: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean over every predicted element.
    pub mse: f64,
    /// Mean over the elements of each forecast frame.
    pub per_frame: Vec<f64>,
    pub per_city: BTreeMap<String, CityScore>,
    pub samples: usize,
}

/// Running sums of squared error for predictions `[B, C, F, H, W]`.
#[derive(Clone, Debug, Default)]
pub struct ErrorAccumulator {
    frame_sums: Vec<f64>,
    frame_elems: usize,
    city_sums: BTreeMap<String, (f64, usize)>,
    samples: usize,
}

impl ErrorAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `cities[b]` names the city of sample `b`.
    pub fn add<T: Real>(&mut self, pred: &DenseTensor<T>, target: &DenseTensor<T>, cities: &[&str]) -> Result<()> {
        target.expect_shape("evaluate", pred.shape())?;
        let [b, c, f, h, w] = pred.dims5("evaluate")?;
        if cities.len() != b {
            return Err(Error::shape("evaluate", "city labels", b, cities.len()));
        }
        if self.frame_sums.is_empty() {
            self.frame_sums = vec![0.0; f];
        } else if self.frame_sums.len() != f {
            return Err(Error::shape("evaluate", "forecast frames", self.frame_sums.len(), f));
        }
        let hw = h * w;
        let (p, t) = (pred.data(), target.data());
        for (bi, city) in cities.iter().enumerate() {
            let mut sample = 0.0;
            for ci in 0..c {
                for fi in 0..f {
                    let base = ((bi * c + ci) * f + fi) * hw;
                    let s: f64 = p[base..base + hw]
                        .iter()
                        .zip(&t[base..base + hw])
                        .map(|(&a, &b)| {
                            let d = a.to_f64() - b.to_f64();
                            d * d
                        })
                        .sum();
                    self.frame_sums[fi] += s;
                    sample += s;
                }
            }
            let e = self.city_sums.entry((*city).to_owned()).or_insert((0.0, 0));
            e.0 += sample;
            e.1 += 1;
        }
        self.frame_elems += b * c * hw;
        self.samples += b;
        Ok(())
    }

    pub fn finish(self) -> Result<Evaluation> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("evaluation over zero batches".into()));
        }
        let per_frame: Vec<f64> = self.frame_sums.iter().map(|s| s / self.frame_elems as f64).collect();
        let frames = per_frame.len();
        let sample_elems = self.frame_elems as f64 * frames as f64 / self.samples as f64;
        Ok(Evaluation {
            mse: self.frame_sums.iter().sum::<f64>() / (self.frame_elems * frames) as f64,
            per_frame,
            per_city: self
                .city_sums
                .into_iter()
                .map(|(k, (s, n))| {
                    let score = CityScore {
                        mse: s / (sample_elems * n as f64),
                        samples: n,
                    };
                    (k, score)
                })
                .collect(),
            samples: self.samples,
        })
    }
}

/// Scores `state` on every batch of `batches`.
pub fn evaluate(state: &ModelState<f32>, batches: impl IntoIterator<Item = Result<Batch>>) -> Result<Evaluation> {
    let mut acc = ErrorAccumulator::new();
    for batch in batches {
        let batch = batch?;
        let pred = forward(state, &batch.input)?;
        let cities: Vec<&str> = batch.samples.iter().map(|s| &*s.city).collect();
        acc.add(&pred, &batch.target, &cities)?;
    }
    acc.finish()
}
