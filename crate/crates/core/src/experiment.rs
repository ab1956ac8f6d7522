//! Cross-validation runs driven by a [`RunConfig`].
//!
//! Every random choice derives from `seed`: the fold split uses it directly,
//! and fold `i` gets its own stream for the validation holdout, network
//! initialization and training. Folds are independent, so running them on
//! several threads does not change any result.

use std::thread;

use crate::checkpoint::Checkpoint;
use crate::config::{FoldGrouping, RunConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::pcg::metrics::calibration_inputs;
use crate::pcg::{
    grouped_kfold, inject_noise_snr, stratified_holdout, stratified_kfold, FoldSplit, Label, MetricsReport, ReliabilityBins,
    Segment,
};
use crate::rng::Rng;
use crate::train::{fit, predict, EpochLog, Predictions};

const HOLDOUT_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const ROBUSTNESS_STREAM: u64 = 0x5a1;

pub fn fold_split(run: &RunConfig, segments: &[Segment]) -> Result<FoldSplit> {
    let labels: Vec<Label> = segments.iter().map(|s| s.label).collect();
    match run.grouping {
        FoldGrouping::Segment => stratified_kfold(&labels, run.folds, run.seed),
        FoldGrouping::Recording => {
            let groups: Vec<&str> = segments.iter().map(|s| s.recording_id.as_str()).collect();
            grouped_kfold(&labels, &groups, run.folds, run.seed)
        }
    }
}

fn fold_rng(run: &RunConfig, fold: usize) -> Rng {
    Rng::new(run.seed).fork(fold as u64)
}

/// Segment indices used by one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldData {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_data(run: &RunConfig, segments: &[Segment], split: &FoldSplit, fold: usize) -> Result<FoldData> {
    if fold >= split.k() {
        return Err(Error::invalid(format!("fold {fold} out of range for {} folds", split.k())));
    }
    let labels: Vec<Label> = segments.iter().map(|s| s.label).collect();
    let (rest, test) = split.train_test(fold);
    let seed = fold_rng(run, fold).fork(HOLDOUT_STREAM).next_u64();
    let (train, val) = stratified_holdout(&rest, &labels, run.val_fraction, seed)?;
    Ok(FoldData { fold, train, val, test })
}

/// Freshly initialized network for `fold`.
pub fn fold_network(run: &RunConfig, fold: usize) -> Result<Network> {
    let mut cfg = run.network_config()?;
    cfg.seed = fold_rng(run, fold).fork(INIT_STREAM).next_u64();
    Network::new(cfg)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
    pub test: MetricsReport,
    pub predictions: Predictions,
}

/// Config text stored in a fold's checkpoint: the run config with `fold`
/// pinned. `jobs` does not affect results and is reset to 1.
pub fn checkpoint_config(run: &RunConfig, fold: usize) -> String {
    let mut c = run.clone();
    c.fold = fold;
    c.jobs = 1;
    c.to_text()
}

pub fn run_fold(
    run: &RunConfig,
    segments: &[Segment],
    split: &FoldSplit,
    fold: usize,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FoldResult> {
    let data = fold_data(run, segments, split, fold)?;
    let net = fold_network(run, fold)?;
    let rng = fold_rng(run, fold).fork(TRAIN_STREAM);
    let out = fit(net, run.train_config(), segments, &data.train, &data.val, &rng, on_epoch)?;
    let predictions = predict(&out.trainer.net, segments, &data.test)?;
    let test = predictions.metrics()?;
    let checkpoint = Checkpoint {
        config: checkpoint_config(run, fold),
        best_val_f1: out.state.best_val_f1,
        epoch: out.state.best_epoch as u32,
        params: out.trainer.net.store,
    };
    Ok(FoldResult {
        fold,
        log: out.log,
        checkpoint,
        test,
        predictions,
    })
}

/// Folds `0..n`, where `n` is `max_folds` (or every fold when 0).
pub fn selected_folds(run: &RunConfig) -> Vec<usize> {
    let n = if run.max_folds == 0 { run.folds } else { run.max_folds.min(run.folds) };
    (0..n).collect()
}

/// Trains every selected fold on up to `jobs` threads. Results come back in
/// fold order; `on_epoch` sees `(fold, entry)` as epochs finish.
pub fn run_cv(
    run: &RunConfig,
    segments: &[Segment],
    on_epoch: &(dyn Fn(usize, &EpochLog) + Sync),
) -> Result<Vec<FoldResult>> {
    run.validate()?;
    let split = fold_split(run, segments)?;
    let folds = selected_folds(run);
    let jobs = run.jobs.clamp(1, folds.len().max(1));
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    for wave in folds.chunks(jobs) {
        let done: Vec<(usize, Result<FoldResult>)> = thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&f| {
                    let split = &split;
                    s.spawn(move || (f, run_fold(run, segments, split, f, |e| on_epoch(f, e))))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| panic!("fold worker panicked")))
                .collect()
        });
        for (f, r) in done {
            results[f] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every fold ran")).collect()
}

/// Network and run config restored from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, Network)> {
    let run = RunConfig::from_text(&ckpt.config)?;
    let mut net = fold_network(&run, run.fold)?;
    net.store.load_from(&ckpt.params)?;
    Ok((run, net))
}

/// Reliability bins on the max-class confidence of each prediction.
pub fn reliability(p: &Predictions) -> Result<ReliabilityBins> {
    let (conf, correct) = calibration_inputs(&p.labels, &p.predicted, &p.scores);
    ReliabilityBins::build(&conf, &correct)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub snr_db: f64,
    pub metrics: MetricsReport,
}

impl RobustnessRow {
    pub const CSV_HEADER: &'static str = "snr_db,accuracy,auc,f1,sensitivity,specificity";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.snr_db, m.accuracy, m.auc, m.f1, m.sensitivity, m.specificity
        )
    }
}

/// Metrics on `segments[idx]` with white noise added at each SNR level.
/// Segment `i` draws the same unit-variance noise at every level, so
/// levels differ only in noise scale.
pub fn robustness_sweep(
    net: &Network,
    segments: &[Segment],
    idx: &[usize],
    levels: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let root = Rng::new(seed).fork(ROBUSTNESS_STREAM);
    levels
        .iter()
        .map(|&snr_db| {
            let noisy = idx
                .iter()
                .map(|&i| inject_noise_snr(&segments[i], snr_db, &mut root.fork(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<usize> = (0..noisy.len()).collect();
            let metrics = predict(net, &noisy, &all)?.metrics()?;
            Ok(RobustnessRow { snr_db, metrics })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcg::SEGMENT_LEN;

    fn segments(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| Segment {
                values: (0..SEGMENT_LEN).map(|t| ((t * (1 + i % 2)) as f64 * 0.05).sin()).collect(),
                label: if i % 2 == 0 { Label::Normal } else { Label::Abnormal },
                recording_id: format!("r{}", i / 2),
                window: (i % 2) as u32,
            })
            .collect()
    }

    fn tiny_run() -> RunConfig {
        let mut r = RunConfig::default();
        r.apply_text("filters=2\nkernels=3\ndense=4\nk=2\nbatch=8\nepochs=2\nfolds=2\nseed=5").unwrap();
        r
    }

    #[test]
    fn fold_data_partitions_each_fold() {
        let segs = segments(40);
        let run = tiny_run();
        let split = fold_split(&run, &segs).unwrap();
        for f in 0..2 {
            let d = fold_data(&run, &segs, &split, f).unwrap();
            let mut all = [d.train.clone(), d.val.clone(), d.test.clone()].concat();
            all.sort_unstable();
            assert_eq!(all, (0..40).collect::<Vec<_>>());
            assert_eq!(d.val.len(), 2);
        }
    }

    #[test]
    fn threads_do_not_change_results_and_checkpoints_reload() {
        let segs = segments(24);
        let mut run = tiny_run();
        let serial = run_cv(&run, &segs, &|_, _| {}).unwrap();
        run.jobs = 2;
        let parallel = run_cv(&run, &segs, &|_, _| {}).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.log, b.log);
            assert_eq!(a.checkpoint, b.checkpoint);
            assert_eq!(a.predictions, b.predictions);
        }
        let (cfg, net) = load_model(&serial[1].checkpoint).unwrap();
        assert_eq!(cfg.fold, 1);
        let split = fold_split(&cfg, &segs).unwrap();
        let d = fold_data(&cfg, &segs, &split, 1).unwrap();
        assert_eq!(predict(&net, &segs, &d.test).unwrap(), serial[1].predictions);
        let val = predict(&net, &segs, &d.val).unwrap().metrics().unwrap();
        assert_eq!(val.f1, serial[1].checkpoint.best_val_f1);
    }

    #[test]
    fn infinite_snr_row_matches_clean_predictions() {
        let segs = segments(12);
        let run = tiny_run();
        let net = fold_network(&run, 0).unwrap();
        let idx: Vec<usize> = (0..12).collect();
        let rows = robustness_sweep(&net, &segs, &idx, &[f64::INFINITY, 5.0], 1).unwrap();
        assert_eq!(rows[0].metrics, predict(&net, &segs, &idx).unwrap().metrics().unwrap());
        assert_eq!(rows, robustness_sweep(&net, &segs, &idx, &[f64::INFINITY, 5.0], 1).unwrap());
        let bins = reliability(&predict(&net, &segs, &idx).unwrap()).unwrap();
        assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), 12);
    }
}
