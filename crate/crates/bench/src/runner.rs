//! Timed execution of ladder steps, batch sweeps and concurrent instances.

use std::sync::Barrier;
use std::thread;

use cnn_engine::model::{Engine, LayerTimingReport, ModelSpec, Weights};
use cnn_engine::{Fill, Layout, Tensor};

use crate::affinity::{allowed_cpus, instance_cpus, pin_current_thread};
use crate::config::{LadderStep, RunConfig};
use crate::report::{BenchReport, InstanceReport};
use crate::{BenchError, Result};

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: BenchReport,
    /// Final tensor of the first instance's last timed repetition.
    pub output: Tensor,
}

struct Prepared {
    model: ModelSpec,
    weights: Weights,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let model = cfg.model.load()?;
        let weights = Weights::for_model(&model)?;
        Ok(Prepared { model, weights })
    }

    fn batch(&self, cfg: &RunConfig) -> usize {
        cfg.batch.unwrap_or(self.model.batch)
    }

    fn engine(&self, cfg: &RunConfig, step: LadderStep, batch: usize) -> Result<Engine> {
        Ok(Engine::new(
            &self.model,
            self.weights.clone(),
            batch,
            cfg.engine_config(step),
        )?)
    }

    /// Builds one throwaway engine per step so that configuration errors
    /// surface before anything is timed.
    fn prevalidate(&self, cfg: &RunConfig) -> Result<()> {
        cfg.validate()?;
        for &step in &cfg.steps {
            self.engine(cfg, step, 1)?;
        }
        Ok(())
    }
}

/// Input batch of one instance. Instances get disjoint seeds.
pub fn input_batch(engine: &Engine, seed: u64, instance: usize) -> Result<Tensor> {
    Ok(Tensor::new(
        engine.input_shape(),
        Layout::Nhwc,
        Fill::Random(seed.wrapping_add(instance as u64)),
    )?)
}

struct Timed {
    output: Tensor,
    samples: Vec<f64>,
    timing: LayerTimingReport,
}

/// Warm-up passes first, then `reps` timed passes. The per-kind breakdown
/// is taken from the repetition with the median latency.
fn time_engine(engine: &mut Engine, x: &Tensor, warmup: usize, reps: usize) -> Result<Timed> {
    for _ in 0..warmup {
        engine.forward(x)?;
    }
    let mut samples = Vec::with_capacity(reps);
    let mut timings = Vec::with_capacity(reps);
    let mut output = None;
    for _ in 0..reps {
        let (y, t) = engine.forward(x)?;
        samples.push(t.total_seconds);
        timings.push(t);
        output = Some(y);
    }
    let mut order: Vec<usize> = (0..reps).collect();
    order.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
    let timing = timings.swap_remove(order[reps / 2]);
    Ok(Timed {
        output: output.expect("reps >= 1"),
        samples,
        timing,
    })
}

/// Runs prebuilt engines concurrently, one controller thread each, each
/// pinned to its own share of the allowed CPUs.
fn run_instances(cfg: &RunConfig, step: LadderStep, engines: Vec<Engine>) -> Result<StepOutcome> {
    let allowed = allowed_cpus();
    let n = engines.len();
    let batch = engines[0].batch();
    let inputs = engines
        .iter()
        .enumerate()
        .map(|(i, e)| input_batch(e, cfg.seed, i))
        .collect::<Result<Vec<_>>>()?;
    let barrier = Barrier::new(n);
    let results: Vec<Result<(Vec<usize>, bool, Timed)>> = thread::scope(|s| {
        let handles: Vec<_> = engines
            .into_iter()
            .zip(&inputs)
            .enumerate()
            .map(|(i, (mut engine, x))| {
                let cpus = instance_cpus(&allowed, i, cfg.threads);
                let barrier = &barrier;
                s.spawn(move || {
                    let pinned = pin_current_thread(&cpus);
                    barrier.wait();
                    let timed = time_engine(&mut engine, x, cfg.warmup, cfg.reps)?;
                    Ok((cpus, pinned, timed))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("instance thread panicked"))
            .collect()
    });

    let mut per_instance = Vec::with_capacity(n);
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        let (cpus, pinned, timed) = r?;
        per_instance.push(InstanceReport::new(i, cpus, pinned, batch, &timed.samples));
        if i == 0 {
            first = Some(timed);
        }
    }
    let first = first.expect("at least one instance");
    Ok(StepOutcome {
        report: BenchReport::new(
            step.name(),
            step,
            batch,
            cfg.threads,
            first.timing,
            per_instance,
        ),
        output: first.output,
    })
}

fn run_jobs(
    cfg: &RunConfig,
    prep: &Prepared,
    jobs: &[(LadderStep, usize)],
    instances: usize,
) -> Result<Vec<StepOutcome>> {
    let mut out = Vec::with_capacity(jobs.len());
    for &(step, batch) in jobs {
        let engines = (0..instances)
            .map(|_| prep.engine(cfg, step, batch))
            .collect::<Result<Vec<_>>>()?;
        out.push(run_instances(cfg, step, engines)?);
    }
    Ok(out)
}

/// One step at the configured batch size and instance count.
pub fn run_step(cfg: &RunConfig, step: LadderStep) -> Result<StepOutcome> {
    let prep = Prepared::load(cfg)?;
    let cfg = RunConfig {
        steps: vec![step],
        ..cfg.clone()
    };
    prep.prevalidate(&cfg)?;
    let batch = prep.batch(&cfg);
    let mut v = run_jobs(&cfg, &prep, &[(step, batch)], cfg.instances)?;
    Ok(v.remove(0))
}

/// Every configured step on the same input batch, in ladder order.
pub fn run_ladder(cfg: &RunConfig) -> Result<Vec<StepOutcome>> {
    let prep = Prepared::load(cfg)?;
    prep.prevalidate(cfg)?;
    let batch = prep.batch(cfg);
    let jobs: Vec<_> = cfg.steps.iter().map(|&s| (s, batch)).collect();
    run_jobs(cfg, &prep, &jobs, cfg.instances)
}

/// Every configured step at every batch size of `cfg.sweep`.
pub fn run_batch_sweep(cfg: &RunConfig) -> Result<Vec<StepOutcome>> {
    if cfg.sweep.is_empty() {
        return Err(BenchError::Config("empty batch sweep".into()));
    }
    let prep = Prepared::load(cfg)?;
    prep.prevalidate(cfg)?;
    let jobs: Vec<_> = cfg
        .steps
        .iter()
        .flat_map(|&s| cfg.sweep.iter().map(move |&t| (s, t)))
        .collect();
    run_jobs(cfg, &prep, &jobs, cfg.instances)
}

/// `instances` concurrent copies of the last configured step.
pub fn run_multi_instance(cfg: &RunConfig, instances: usize) -> Result<StepOutcome> {
    let step = *cfg
        .steps
        .last()
        .ok_or_else(|| BenchError::Config("no ladder step selected".into()))?;
    run_step(
        &RunConfig {
            instances,
            ..cfg.clone()
        },
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSource;

    fn tiny() -> RunConfig {
        let dir = std::env::temp_dir().join(format!("cnn-bench-runner-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.model");
        std::fs::write(
            &path,
            "tiny model batch=2 seed=3\nx input shape=8x8x3\nc conv out=8 k=3 pad=1\nb batchnorm\nr relu\ng pool mode=avg k=global\nf dense out=4\n",
        )
        .unwrap();
        RunConfig {
            model: ModelSource::Path(path),
            reps: 3,
            warmup: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn ladder_outputs_agree() {
        let cfg = RunConfig {
            steps: LadderStep::ALL.to_vec(),
            ..tiny()
        };
        let out = run_ladder(&cfg).unwrap();
        assert_eq!(out.len(), 4);
        for o in &out {
            o.report.check_invariants().unwrap();
            assert_eq!(o.report.batch, 2);
            for (a, b) in o.output.data().iter().zip(out[0].output.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sweep_and_instances() {
        let cfg = RunConfig {
            sweep: vec![1, 3],
            ..tiny()
        };
        let out = run_batch_sweep(&cfg).unwrap();
        assert_eq!(
            out.iter().map(|o| o.report.batch).collect::<Vec<_>>(),
            vec![1, 3]
        );
        let multi = run_multi_instance(&tiny(), 2).unwrap();
        assert_eq!(multi.report.per_instance.len(), 2);
        multi.report.check_invariants().unwrap();
    }

    #[test]
    fn bad_override_fails_before_timing() {
        let mut cfg = tiny();
        cfg.overrides.insert("nope".into(), Default::default());
        assert!(run_ladder(&cfg).is_err());
    }
}
