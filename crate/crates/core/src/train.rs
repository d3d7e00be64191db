//! Mini-batch training with periodic validation and best-model tracking.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::CodebookInit;
use crate::error::{Error, Result};
use crate::model::length_buckets;
use crate::optim::{adam_step, AdamConfig};
use crate::params::Ctx;
use crate::tensor::{Graph, Real};

/// Offset mixed into the seed for the dropout stream, so that it does not
/// share a sequence with batch shuffling.
const DROPOUT_STREAM: u64 = 0x0d50_a7e5;
const CODEBOOK_STREAM: u64 = 0xc0de_b00c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// One logged measurement. Train records describe a single batch and use
/// the optimized NLL (EOS included); valid records cover the whole
/// validation set and report per-word NLL with EOS excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: Split,
    pub nll: f64,
    pub ppl: f64,
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
    /// Distinct codes in use per latent.
    #[serde(rename = "codebook_usage")]
    pub usage: Vec<usize>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Train => "train",
            Split::Valid => "valid",
        };
        write!(
            f,
            "step {:>6} {split} nll {:.4} ppl {:.2} recon {:.4} commit {:.4}",
            self.step, self.nll, self.ppl, self.recon, self.commit
        )?;
        if !self.usage.is_empty() {
            let u: Vec<String> = self.usage.iter().map(usize::to_string).collect();
            write!(f, " usage {}", u.join("/"))?;
        }
        Ok(())
    }
}

pub struct TrainOutcome<T: Real> {
    /// Lowest validation NLL seen, or the final state without a validation set.
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub log: Vec<MetricRecord>,
    /// Set when training stopped on a non-finite loss or gradient. `best`
    /// and `last` then hold the state from before the failing step.
    pub stopped: Option<Error>,
}

/// Trains `start` on word-id sequences (no EOS). Hyperparameters come from
/// the model's config. `observe` sees every record as it is produced.
pub fn train<T: Real>(
    start: Checkpoint<T>,
    train_set: &[Vec<u32>],
    valid_set: &[Vec<u32>],
    mut observe: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut last = start;
    let cfg = last.model.config.clone();
    let adam = AdamConfig::from_config(&cfg);
    let mut shuffle = ChaCha8Rng::seed_from_u64(last.state.rng_seed);
    shuffle.set_word_pos(last.state.rng_word_pos);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let max_steps = cfg.max_steps.unwrap_or(u64::MAX);
    let lengths: Vec<usize> = train_set.iter().map(Vec::len).collect();
    let mut log = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let mut stopped = None;
    let mut evaluated_at = None;
    let mut idle = DeadCodes::new(&last.model, cfg.dead_code_steps);
    if last.state.step == 0 && cfg.codebook_init == CodebookInit::Data {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CODEBOOK_STREAM);
        last.model.init_codebooks_from_data(train_set, &mut rng)?;
    }

    'epochs: for epoch in last.state.epoch..cfg.epochs {
        last.state.epoch = epoch;
        let mut batches = length_buckets(&lengths, usize::MAX);
        for b in &mut batches {
            b.shuffle(&mut shuffle);
        }
        let mut batches: Vec<Vec<usize>> = batches
            .iter()
            .flat_map(|b| b.chunks(cfg.batch_size).map(<[usize]>::to_vec))
            .collect();
        batches.shuffle(&mut shuffle);
        last.state.rng_word_pos = shuffle.get_word_pos();

        for ix in batches {
            if last.state.step >= max_steps {
                break 'epochs;
            }
            let words: Vec<Vec<u32>> = ix.iter().map(|&i| train_set[i].clone()).collect();
            let step = last.state.step + 1;
            let mut g = Graph::new();
            let (record, grads, queries) = {
                let cx = Ctx::trainable(&mut g, &last.model.params);
                let mut cx = cx.with_dropout(&mut drop_rng);
                let parts = last.model.loss(&mut cx, &words)?;
                let value = |v| cx.g.value(v).item().as_f64();
                let total = value(parts.total);
                if !total.is_finite() {
                    stopped = Some(Error::Diverged { step, loss: total });
                    break 'epochs;
                }
                let nll = value(parts.nll);
                let record = MetricRecord {
                    step,
                    epoch,
                    split: Split::Train,
                    nll,
                    ppl: nll.exp(),
                    recon: parts.recon.map_or(0.0, value),
                    commit: parts.commit.map_or(0.0, value),
                    total,
                    usage: parts.assignment.as_ref().map_or_else(Vec::new, |a| {
                        a.latents.iter().map(|l| distinct(&l.codes)).collect()
                    }),
                };
                cx.g.backward(parts.total)?;
                let queries: Vec<_> = parts.assignment.as_ref().map_or_else(Vec::new, |a| {
                    a.latents
                        .iter()
                        .map(|l| (l.codes.clone(), cx.g.value(l.query).clone()))
                        .collect()
                });
                (record, cx.param_grads(), queries)
            };
            // Gradients are validated before any parameter or moment changes,
            // so a rejected step leaves `last` intact.
            match adam_step(&mut last.model.params, &grads, &mut last.state.adam, &adam) {
                Ok(_) => {}
                Err(e) if e.is_numeric() => {
                    stopped = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            last.state.step = step;
            idle.update(&mut last, &queries, &mut drop_rng);
            observe(&record);
            log.push(record);

            if !valid_set.is_empty() && step.is_multiple_of(cfg.eval_interval) {
                validate(
                    &mut last,
                    &mut best,
                    valid_set,
                    epoch,
                    &mut log,
                    &mut observe,
                )?;
                evaluated_at = Some(step);
            }
        }
        last.state.epoch = epoch + 1;
    }

    if !valid_set.is_empty() && evaluated_at != Some(last.state.step) && stopped.is_none() {
        let epoch = last.state.epoch.saturating_sub(1);
        validate(
            &mut last,
            &mut best,
            valid_set,
            epoch,
            &mut log,
            &mut observe,
        )?;
    }
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
        stopped,
    })
}

fn validate<T: Real>(
    last: &mut Checkpoint<T>,
    best: &mut Option<Checkpoint<T>>,
    valid_set: &[Vec<u32>],
    epoch: usize,
    log: &mut Vec<MetricRecord>,
    observe: &mut impl FnMut(&MetricRecord),
) -> Result<()> {
    let ev = last
        .model
        .evaluate(valid_set, last.model.config.batch_size)?;
    let nll = ev.word_nll();
    if !nll.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    let record = MetricRecord {
        step: last.state.step,
        epoch,
        split: Split::Valid,
        nll,
        ppl: nll.exp(),
        recon: ev.recon,
        commit: ev.commit,
        total: nll + ev.recon + ev.commit,
        usage: ev
            .usage
            .iter()
            .map(|h| h.iter().filter(|&&c| c > 0).count())
            .collect(),
    };
    if last.state.best_valid_nll.is_none_or(|b| nll < b) {
        last.state.best_valid_nll = Some(nll);
        *best = Some(last.clone());
    }
    observe(&record);
    log.push(record);
    Ok(())
}

/// Steps since each code was last chosen, per latent.
struct DeadCodes {
    limit: u64,
    idle: Vec<Vec<u64>>,
}

impl DeadCodes {
    fn new<T: Real>(model: &crate::model::Model<T>, limit: u64) -> Self {
        let idle = model
            .latent()
            .map_or_else(Vec::new, |a| vec![vec![0; a.chain.codes()]; a.chain.len()]);
        Self { limit, idle }
    }

    /// Moves codes idle for `limit` steps onto random queries of this
    /// batch and clears their optimizer moments.
    fn update<T: Real>(
        &mut self,
        ckpt: &mut Checkpoint<T>,
        batch: &[(Vec<usize>, crate::tensor::Tensor<T>)],
        rng: &mut ChaCha8Rng,
    ) {
        if self.limit == 0 || batch.is_empty() {
            return;
        }
        let Some(arch) = ckpt.model.latent() else {
            return;
        };
        let tables: Vec<_> = arch
            .chain
            .latents
            .iter()
            .map(|l| l.codebook.table)
            .collect();
        for (i, (codes, q)) in batch.iter().enumerate() {
            for c in self.idle[i].iter_mut() {
                *c += 1;
            }
            for &k in codes {
                self.idle[i][k] = 0;
            }
            let d = q.cols();
            for k in 0..self.idle[i].len() {
                if self.idle[i][k] < self.limit {
                    continue;
                }
                let r = rng.gen_range(0..q.rows());
                let id = tables[i];
                ckpt.model.params.get_mut(id).data_mut()[k * d..(k + 1) * d]
                    .copy_from_slice(q.row_slice(r));
                for moments in [&mut ckpt.state.adam.m[id.0], &mut ckpt.state.adam.v[id.0]] {
                    moments.data_mut()[k * d..(k + 1) * d].fill(T::zero());
                }
                self.idle[i][k] = 0;
            }
        }
    }
}

fn distinct(codes: &[usize]) -> usize {
    let mut c = codes.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}
