use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{run_eval, Condition, EvalOptions};
use super::train::run_train;
use crate::data::Corpus;
use crate::error::Result;
use crate::fusion::attention_cost;

/// Result for one bottleneck size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub wer: f64,
    /// Mean test-utterance token count used for the cost columns.
    pub tokens: usize,
    /// Score entries per AVBC layer through the bottleneck.
    pub bottleneck_cost: u64,
    /// Score entries per layer with direct joint attention.
    pub direct_cost: u64,
}

/// Trains and evaluates one model per `K` under `condition`. Each run
/// writes under `cfg.out_dir/k{K}`.
pub fn run_sweep(
    cfg: &RunConfig,
    corpus: &Corpus,
    ks: &[usize],
    condition: Condition,
) -> Result<Vec<SweepRow>> {
    let tokens = (corpus
        .test
        .iter()
        .map(|s| s.video.num_frames())
        .sum::<usize>() as f64
        / corpus.test.len().max(1) as f64)
        .round() as usize;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut run = cfg.clone();
        run.bottleneck_tokens = k;
        run.out_dir = cfg.out_dir.join(format!("k{k}"));
        let outcome = run_train(&run, corpus)?;
        let opts = EvalOptions {
            beam_width: cfg.beam_width,
            seed: cfg.seed,
            dump_recon: None,
        };
        let report = run_eval(
            &outcome.model,
            &outcome.store,
            &corpus.test,
            &[condition],
            &opts,
        )?;
        let (bottleneck_cost, direct_cost) = attention_cost(tokens, tokens, k);
        rows.push(SweepRow {
            k,
            wer: report.average_wer,
            tokens,
            bottleneck_cost,
            direct_cost,
        });
    }
    Ok(rows)
}

pub fn write_sweep_table(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("k\twer\ttokens\tbottleneck_cost\tdirect_cost\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{}\t{}\t{}\n",
            r.k, r.wer, r.tokens, r.bottleneck_cost, r.direct_cost
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
