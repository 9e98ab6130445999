use std::path::Path;

use anyhow::{Context, Result};
use sparsecast::data::{CorpusManifest, LoaderConfig, PlanConfig};
use sparsecast::models::{encode_checkpoint, ModelKind};
use sparsecast::train::{train, CorpusEpochs, MetricsRecord, Optimizer, TrainConfig, TrainOutcome, METRICS_HEADER};

use crate::args::{Experiment, OptimizerArg, TrainArgs};
use crate::report::{create_dir, trailer, write_file};
use crate::usage;

pub const FIG3_MODELS: [ModelKind; 3] = [ModelKind::ResNet3D, ModelKind::ResNet3DConvOutput, ModelKind::ResNet2D];
pub const FIG4_MODELS: [ModelKind; 2] = [ModelKind::SparseUNet, ModelKind::Conv3DUNet];

fn mode(deterministic: bool) -> &'static str {
    if deterministic {
        "deterministic"
    } else {
        "timed"
    }
}

/// Metrics header and rows, optionally prefixed with a `model` column.
pub fn metrics_csv(rows: &[(Option<ModelKind>, &MetricsRecord)], seed: u64, deterministic: bool) -> String {
    let prefixed = rows.first().is_some_and(|r| r.0.is_some());
    let mut text = if prefixed {
        format!("model,{METRICS_HEADER}\n")
    } else {
        format!("{METRICS_HEADER}\n")
    };
    for (kind, r) in rows {
        if let Some(k) = kind {
            text.push_str(&format!("{k},"));
        }
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    text.push_str(&trailer(seed, mode(deterministic), &[]));
    text
}

struct Runner<'a> {
    args: &'a TrainArgs,
    config: TrainConfig,
    plan: PlanConfig,
    loader: LoaderConfig,
}

impl Runner<'_> {
    /// Trains `kind` on `manifest` and writes `<dir>/<kind>.ckpt` (best epoch)
    /// and `<dir>/<kind>.csv`.
    fn train_one(&self, kind: ModelKind, manifest: &CorpusManifest, dir: &Path, warm_up: bool) -> Result<TrainOutcome> {
        let config = TrainConfig {
            warm_up_epochs: if warm_up { self.config.warm_up_epochs } else { 0 },
            ..self.config
        };
        let mut source = CorpusEpochs {
            manifest: manifest.clone(),
            seed: config.seed,
            plan: self.plan,
            loader: self.loader,
        };
        let outcome = train(kind.default_config(), &config, &mut source).with_context(|| format!("training {kind}"))?;
        write_file(&dir.join(format!("{kind}.ckpt")), &encode_checkpoint(&outcome.best)?)?;
        let rows: Vec<_> = outcome.records.iter().map(|r| (None, r)).collect();
        write_file(
            &dir.join(format!("{kind}.csv")),
            metrics_csv(&rows, config.seed, config.deterministic).as_bytes(),
        )?;
        match outcome.records.last() {
            Some(last) => eprintln!(
                "{kind}: {} epochs, final train mse {:.4}, best epoch {}",
                outcome.records.len(),
                last.train_mse,
                outcome.best_epoch
            ),
            None => eprintln!("{kind}: no epochs, initial checkpoint written"),
        }
        Ok(outcome)
    }
}

pub fn run(a: &TrainArgs) -> Result<()> {
    if a.batch_size == 0 || a.workers == 0 || a.indices_per_file == 0 || a.files_per_epoch == Some(0) {
        return Err(usage(
            "--batch-size, --workers, --indices-per-file and --files-per-epoch must be positive",
        ));
    }
    if !(a.lr.is_finite() && a.lr >= 0.0) {
        return Err(usage(format!("--lr {} must be finite and non-negative", a.lr)));
    }
    let warm_up_target = match a.experiment {
        None => a.model,
        Some(Experiment::Fig3) => ModelKind::ResNet3D,
        Some(Experiment::Fig4) => ModelKind::SparseUNet,
    };
    if a.warm_up_epochs > 0 && warm_up_target != ModelKind::ResNet3D {
        return Err(usage("--warm-up-epochs applies to 3dresnet only"));
    }
    let epochs = a.epochs.unwrap_or(match a.experiment {
        Some(Experiment::Fig4) => 5,
        _ => 1,
    });
    let manifest = CorpusManifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    let runner = Runner {
        args: a,
        config: TrainConfig {
            epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            optimizer: match a.optimizer {
                OptimizerArg::Adam => Optimizer::ADAM,
                OptimizerArg::Sgd => Optimizer::SGD,
            },
            seed: a.seed,
            warm_up_epochs: a.warm_up_epochs,
            deterministic: a.deterministic,
        },
        plan: PlanConfig {
            indices_per_file: a.indices_per_file,
            files_per_epoch: a.files_per_epoch,
        },
        loader: LoaderConfig {
            batch_size: a.batch_size,
            workers: a.workers,
            ..Default::default()
        },
    };
    let out = &runner.args.out;
    match a.experiment {
        None => {
            runner.train_one(a.model, &manifest, out, true)?;
        }
        Some(Experiment::Fig3) => {
            let mut outcomes = Vec::new();
            for kind in FIG3_MODELS {
                outcomes.push((
                    kind,
                    runner.train_one(kind, &manifest, out, kind == ModelKind::ResNet3D)?,
                ));
            }
            let rows: Vec<_> = outcomes
                .iter()
                .flat_map(|(k, o)| o.records.iter().map(move |r| (Some(*k), r)))
                .collect();
            write_file(
                &out.join("fig3.csv"),
                metrics_csv(&rows, a.seed, a.deterministic).as_bytes(),
            )?;
        }
        Some(Experiment::Fig4) => {
            let mut outcomes = Vec::new();
            for city in manifest.cities() {
                let sub = manifest.city(city);
                for kind in FIG4_MODELS {
                    outcomes.push((kind, runner.train_one(kind, &sub, &out.join(city), false)?));
                }
            }
            let rows: Vec<_> = outcomes
                .iter()
                .flat_map(|(k, o)| o.records.iter().map(move |r| (Some(*k), r)))
                .collect();
            write_file(
                &out.join("fig4.csv"),
                metrics_csv(&rows, a.seed, a.deterministic).as_bytes(),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_csv_has_a_model_column_and_trailer() {
        let r = MetricsRecord {
            epoch: 1,
            step: 4,
            city: "MOS".into(),
            train_mse: 2.5,
            wall_seconds: 0.0,
            batches_per_second: 0.0,
            nnz_rate: 0.07,
        };
        let text = metrics_csv(&[(Some(ModelKind::ResNet2D), &r)], 7, true);
        assert_eq!(
            text,
            format!("model,{METRICS_HEADER}\n2dresnet,1,4,MOS,2.5,0,0,0.07\n# seed=7, mode=deterministic\n")
        );
        assert_eq!(
            metrics_csv(&[], 1, false),
            format!("{METRICS_HEADER}\n# seed=1, mode=timed\n")
        );
    }
}
