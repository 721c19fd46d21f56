use std::ops::ControlFlow;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::history::{EvalRecord, TrainHistory};
use super::optim::{adamw_step, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{toy_metrics, MetricRecord};
use crate::model::{
    forward, init_params, last_logits, loss_and_grads, ForwardTrace, ModelConfig, ModelParams,
};
use crate::rng::{stream_rng, STREAM_SHUFFLE};
use crate::scalar::Scalar;
use crate::taskgen::{tokenize, Fact, FactDataset, TokenId};

const EVAL_CHUNK: usize = 512;

/// Model state handed to observers at snapshot steps.
pub struct Snapshot<'a, T> {
    pub step: u64,
    pub params: &'a ModelParams<T>,
    pub dataset: &'a FactDataset,
    /// Forward traces over `(e_s, f)` for every analogical fact, ordered by source.
    pub probes: &'a [ForwardTrace<T>],
}

pub trait Observer<T> {
    /// Called after every evaluation; `Break` ends the run after this step.
    fn on_eval(&mut self, _record: &EvalRecord) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_snapshot(&mut self, _snapshot: &Snapshot<'_, T>) -> Result<()> {
        Ok(())
    }
}

/// Records every toy metric at each snapshot.
#[derive(Debug, Default)]
pub struct MetricObserver {
    pub records: Vec<MetricRecord>,
    pub use_unembedding: bool,
}

impl<T: Scalar> Observer<T> for MetricObserver {
    fn on_snapshot(&mut self, s: &Snapshot<'_, T>) -> Result<()> {
        self.records.push(toy_metrics(
            s.params,
            s.dataset,
            s.step,
            self.use_unembedding,
        )?);
        Ok(())
    }
}

/// Stops the run once every listed accuracy reaches its threshold.
#[derive(Clone, Debug)]
pub struct StopWhenReached {
    pub thresholds: Vec<(super::history::Signal, f64)>,
}

impl<T> Observer<T> for StopWhenReached {
    fn on_eval(&mut self, r: &EvalRecord) -> ControlFlow<()> {
        if self.thresholds.iter().all(|&(s, t)| r.accuracy(s) >= t) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

/// Accuracy, mean target probability and mean cross-entropy over `facts`.
pub(crate) fn eval_split<T: Scalar>(
    params: &ModelParams<T>,
    facts: &[Vec<TokenId>],
) -> Result<(f64, f64, f64)> {
    if facts.is_empty() {
        return Err(Error::Undefined(
            "evaluation over an empty fact list".into(),
        ));
    }
    let (mut correct, mut prob, mut loss) = (0usize, 0.0f64, 0.0f64);
    for chunk in facts.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[TokenId]> = chunk.iter().map(|f| &f[..f.len() - 1]).collect();
        let logits = last_logits(params, &inputs)?;
        for (row, f) in logits.axis_iter(Axis(0)).zip(chunk) {
            let target = *f.last().unwrap() as usize;
            let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            if argmax == target {
                correct += 1;
            }
            let max = row[argmax];
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            prob += (row[target] - lse).exp();
            loss += lse - row[target];
        }
    }
    let n = facts.len() as f64;
    Ok((correct as f64 / n, prob / n, loss / n))
}

/// Argmax accuracy and mean softmax mass on the target, with the model fed
/// every token of each fact except the last.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    facts: &[Fact],
    dataset: &FactDataset,
) -> Result<(f64, f64)> {
    let toks = tokenize_all(facts, dataset)?;
    let (acc, prob, _) = eval_split(params, &toks)?;
    Ok((acc, prob))
}

fn tokenize_all(facts: &[Fact], dataset: &FactDataset) -> Result<Vec<Vec<TokenId>>> {
    facts.iter().map(|f| tokenize(f, &dataset.vocab)).collect()
}

/// Fills `vocab_size` from the dataset and checks the model can hold every fact.
pub fn resolve_model_config(model: &ModelConfig, dataset: &FactDataset) -> Result<ModelConfig> {
    let mut cfg = model.clone();
    let v = dataset.vocab.size();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = v;
    } else if cfg.vocab_size != v {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match dataset vocabulary {v}",
            cfg.vocab_size
        )));
    }
    if cfg.max_seq < 3 {
        return Err(Error::Config(format!(
            "max_seq {} is shorter than the longest fact prefix (3)",
            cfg.max_seq
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A training run in progress. Keeps its history even when a step fails.
pub struct Trainer<'a, T> {
    dataset: &'a FactDataset,
    config: TrainConfig,
    params: ModelParams<T>,
    opt: OptimizerState<T>,
    history: TrainHistory,
    pool: Vec<Vec<TokenId>>,
    splits: [Vec<Vec<TokenId>>; 3],
    probes: Vec<Vec<TokenId>>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: &ModelConfig,
        config: &TrainConfig,
        dataset: &'a FactDataset,
    ) -> Result<Self> {
        config.validate()?;
        let model = resolve_model_config(model, dataset)?;
        let params = init_params(&model, config.seed)?;
        Self::with_params(params, config, dataset)
    }

    pub fn with_params(
        params: ModelParams<T>,
        config: &TrainConfig,
        dataset: &'a FactDataset,
    ) -> Result<Self> {
        config.validate()?;
        resolve_model_config(&params.config, dataset)?;
        let pool = tokenize_all(&dataset.train, dataset)?;
        if pool.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let splits = [
            pool.clone(),
            tokenize_all(&dataset.comp_ood, dataset)?,
            tokenize_all(&dataset.ana_ood, dataset)?,
        ];
        let f = dataset.vocab.functor_token();
        let probes = dataset
            .functor()
            .pairs()
            .map(|(s, _)| Ok(vec![dataset.vocab.entity(s)?, f]))
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset,
            config: config.clone(),
            opt: OptimizerState::new(&params),
            params,
            history: TrainHistory::default(),
            pool,
            splits,
            probes,
            rng: stream_rng(config.seed, STREAM_SHUFFLE),
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn into_parts(self) -> (ModelParams<T>, TrainHistory) {
        (self.params, self.history)
    }

    fn eval(&self) -> Result<EvalRecord> {
        let (train_acc, train_prob, loss) = eval_split(&self.params, &self.splits[0])?;
        let opt = |toks: &[Vec<TokenId>]| -> Result<(f64, f64)> {
            if toks.is_empty() {
                Ok((f64::NAN, f64::NAN))
            } else {
                eval_split(&self.params, toks).map(|(a, p, _)| (a, p))
            }
        };
        let (comp_ood_acc, comp_prob) = opt(&self.splits[1])?;
        let (ana_ood_acc, ana_prob) = opt(&self.splits[2])?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("training loss is {loss}"),
            });
        }
        Ok(EvalRecord {
            step: self.step,
            loss,
            train_acc,
            comp_ood_acc,
            ana_ood_acc,
            train_prob,
            comp_prob,
            ana_prob,
        })
    }

    fn snapshot(&self, observers: &mut [&mut dyn Observer<T>]) -> Result<()> {
        if observers.is_empty() {
            return Ok(());
        }
        let traces = self
            .probes
            .iter()
            .map(|p| forward(&self.params, p))
            .collect::<Result<Vec<_>>>()?;
        let snap = Snapshot {
            step: self.step,
            params: &self.params,
            dataset: self.dataset,
            probes: &traces,
        };
        observers.iter_mut().try_for_each(|o| o.on_snapshot(&snap))
    }

    /// Evaluates, notifies observers and reports whether any asked to stop.
    fn checkpoint(
        &mut self,
        observers: &mut [&mut dyn Observer<T>],
        force_snapshot: bool,
    ) -> Result<bool> {
        let mut stop = false;
        let due_eval = self.step % self.config.eval_every == 0;
        if due_eval || force_snapshot {
            let rec = self.eval()?;
            for o in observers.iter_mut() {
                stop |= o.on_eval(&rec).is_break();
            }
            self.history.push(rec)?;
        }
        if self.step % self.config.snapshot_every == 0 || force_snapshot || stop {
            self.snapshot(observers)?;
        }
        Ok(stop)
    }

    /// Trains to the configured budget or until an observer stops the run.
    pub fn run(&mut self, observers: &mut [&mut dyn Observer<T>]) -> Result<()> {
        let total = self.config.total_steps(self.pool.len());
        if self.step == 0
            && self.history.records.is_empty()
            && self.checkpoint(observers, total == 0)?
        {
            return Ok(());
        }
        let bs = self.config.batch_size;
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        while self.step < total {
            if cursor >= order.len() {
                order = (0..self.pool.len()).collect();
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let end = (cursor + bs).min(order.len());
            let batch = &order[cursor..end];
            cursor = end;

            let inputs: Vec<&[TokenId]> = batch
                .iter()
                .map(|&i| &self.pool[i][..self.pool[i].len() - 1])
                .collect();
            let targets: Vec<TokenId> = batch
                .iter()
                .map(|&i| *self.pool[i].last().unwrap())
                .collect();
            let (loss, grads) = loss_and_grads(&self.params, &inputs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step + 1,
                    detail: format!("batch loss is {loss}"),
                });
            }
            let lr = self.config.lr_at(self.opt.t + 1);
            adamw_step(&mut self.params, &grads, &mut self.opt, &self.config, lr)?;
            self.step += 1;

            if self.checkpoint(observers, self.step == total)? {
                break;
            }
        }
        Ok(())
    }
}

/// Final parameters and evaluation history of a completed run.
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub history: TrainHistory,
}

pub fn train<T: Scalar>(
    model: &ModelConfig,
    config: &TrainConfig,
    dataset: &FactDataset,
    observers: &mut [&mut dyn Observer<T>],
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, config, dataset)?;
    trainer.run(observers)?;
    let (params, history) = trainer.into_parts();
    Ok(TrainOutcome { params, history })
}
