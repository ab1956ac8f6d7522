use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qivc::checkpoint::Checkpoint;
use qivc::config::RunConfig;
use qivc::experiment::{fold_data, fold_split, load_model, reliability, robustness_sweep, run_cv, FoldData, RobustnessRow};
use qivc::nn::Network;
use qivc::pcg::io::{load_recordings, read_cache, write_cache, write_manifest, write_wav};
use qivc::pcg::synth::{synth_recordings, SynthConfig};
use qivc::pcg::{preprocess_recording, MetricsReport, Segment};
use qivc::qire::{noise_statistics, NoiseStatistics, QireConfig};
use qivc::train::{export_latent as latent_rows, predict, EpochLog, Predictions};
use qivc::Rng;

use crate::outputs::Outputs;
use crate::{CliError, CliResult};

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("missing setting '{key}'")))
}

fn start(cfg: &RunConfig, command: &str) -> CliResult<(Outputs, PathBuf)> {
    let mut out = Outputs::new();
    let dir = out.dir(&cfg.out_dir)?;
    out.write(dir.join(format!("{command}.config")), cfg.to_text())?;
    Ok((out, dir))
}

fn load_segments(path: &Path) -> CliResult<Vec<Segment>> {
    let segs = read_cache(path)?;
    if segs.is_empty() {
        return Err(CliError::Data(format!("{}: segment cache is empty", path.display())));
    }
    Ok(segs)
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let (mut out, dir) = start(cfg, "synth")?;
    let sc = SynthConfig {
        recordings: cfg.synth_recordings,
        windows_per_recording: cfg.synth_windows,
        sample_rate: cfg.synth_rate,
        snr_db: cfg.synth_snr,
        seed: cfg.seed,
    };
    let rate = cfg.synth_rate as u32;
    if rate as f64 != cfg.synth_rate {
        return Err(CliError::Config(format!("synth_rate must be a whole number of Hz, got {}", cfg.synth_rate)));
    }
    let wav_dir = out.dir(&dir.join("wav"))?;
    let mut entries = Vec::new();
    for rec in synth_recordings(&sc)? {
        let name = format!("{}.wav", rec.id);
        write_wav(&out.file(wav_dir.join(&name)), &rec.samples, rate)?;
        entries.push((rec.id, format!("wav/{name}"), rec.label));
    }
    let manifest = out.file(dir.join("manifest.csv"));
    write_manifest(&manifest, &entries)?;
    println!("wrote {} recordings; manifest {}", entries.len(), manifest.display());
    out.commit();
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> CliResult<()> {
    let manifest = require(&cfg.manifest, "manifest")?;
    let (mut out, dir) = start(cfg, "preprocess")?;
    let (recs, warnings) = load_recordings(manifest)?;
    warnings.iter().for_each(|w| eprintln!("warning: {w}"));
    let mut segments = Vec::new();
    let mut report = String::from("recording_id,window,reason\n");
    for rec in &recs {
        match rec.validate().and_then(|_| preprocess_recording(rec)) {
            Ok(p) => {
                for (w, why) in &p.rejected {
                    writeln!(report, "{},{w},{why}", rec.id).unwrap();
                }
                segments.extend(p.segments);
            }
            Err(qivc::Error::Data(why)) => {
                eprintln!("warning: recording {} rejected: {why}", rec.id);
                writeln!(report, "{},,\"{}\"", rec.id, why.replace('"', "'")).unwrap();
            }
            Err(e) => return Err(e.into()),
        }
    }
    if segments.is_empty() {
        return Err(CliError::Data("no segments survived preprocessing".into()));
    }
    let cache = out.file(dir.join("segments.bin"));
    write_cache(&cache, &segments)?;
    out.write(dir.join("rejections.csv"), report)?;
    println!("{} recordings -> {} segments; cache {}", recs.len(), segments.len(), cache.display());
    out.commit();
    Ok(())
}

fn predictions_csv(p: &Predictions) -> String {
    let mut s = String::from("id,label,predicted,score\n");
    for i in 0..p.len() {
        writeln!(s, "{},{},{},{:.10}", p.ids[i], p.labels[i], p.predicted[i], p.scores[i]).unwrap();
    }
    s
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{}\n", EpochLog::CSV_HEADER);
    log.iter().for_each(|e| writeln!(s, "{}", e.csv_row()).unwrap());
    s
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let segments = load_segments(require(&cfg.cache, "cache")?)?;
    let (mut out, dir) = start(cfg, "train")?;
    let results = run_cv(cfg, &segments, &|fold, e| {
        eprintln!(
            "fold {fold} epoch {} loss {:.5} val_f1 {:.4} val_acc {:.4}",
            e.epoch, e.train_loss, e.val_f1, e.val_acc
        )
    })?;
    let mut metrics = format!("fold,{}\n", MetricsReport::CSV_HEADER);
    for r in &results {
        let fd = out.dir(&dir.join(format!("fold{}", r.fold)))?;
        r.checkpoint.save(&out.file(fd.join("checkpoint.qivc")))?;
        out.write(fd.join("log.csv"), log_csv(&r.log))?;
        out.write(fd.join("predictions.csv"), predictions_csv(&r.predictions))?;
        writeln!(metrics, "{},{}", r.fold, r.test.csv_row()).unwrap();
        println!(
            "fold {}: best epoch {} val_f1 {:.4} test accuracy {:.4} auc {:.4}",
            r.fold, r.checkpoint.epoch, r.checkpoint.best_val_f1, r.test.accuracy, r.test.auc
        );
    }
    out.write(dir.join("metrics.csv"), metrics)?;
    out.commit();
    Ok(())
}

/// Checkpointed model with the data split it was trained on.
struct Loaded {
    net: Network,
    run: RunConfig,
    best_val_f1: f64,
    segments: Vec<Segment>,
    data: FoldData,
}

fn load(cfg: &RunConfig) -> CliResult<Loaded> {
    let ckpt = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let (run, net) = load_model(&ckpt)?;
    let cache = cfg
        .cache
        .as_ref()
        .or(run.cache.as_ref())
        .ok_or_else(|| CliError::Config("missing setting 'cache'".into()))?;
    let segments = load_segments(cache)?;
    let split = fold_split(&run, &segments)?;
    let data = fold_data(&run, &segments, &split, run.fold)?;
    Ok(Loaded {
        net,
        run,
        best_val_f1: ckpt.best_val_f1,
        segments,
        data,
    })
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let m = load(cfg)?;
    let (mut out, dir) = start(cfg, "eval")?;
    let val = predict(&m.net, &m.segments, &m.data.val)?.metrics()?;
    let test = predict(&m.net, &m.segments, &m.data.test)?.metrics()?;
    let csv = format!(
        "split,{}\nvalidation,{}\ntest,{}\n",
        MetricsReport::CSV_HEADER,
        val.csv_row(),
        test.csv_row()
    );
    out.write(dir.join("eval_metrics.csv"), csv)?;
    println!(
        "fold {}: validation f1 {:.10} (checkpoint {:.10}); test accuracy {:.4} auc {:.4}",
        m.run.fold, val.f1, m.best_val_f1, test.accuracy, test.auc
    );
    if val.f1 != m.best_val_f1 {
        return Err(CliError::Core(qivc::Error::Numerical(format!(
            "validation f1 {} does not reproduce the checkpoint's {}",
            val.f1, m.best_val_f1
        ))));
    }
    out.commit();
    Ok(())
}

pub fn robustness(cfg: &RunConfig) -> CliResult<()> {
    let m = load(cfg)?;
    let (mut out, dir) = start(cfg, "robustness")?;
    let rows = robustness_sweep(&m.net, &m.segments, &m.data.test, &cfg.snr_levels, m.run.seed)?;
    let mut csv = format!("{}\n", RobustnessRow::CSV_HEADER);
    for r in &rows {
        writeln!(csv, "{}", r.csv_row()).unwrap();
        println!("snr {} dB: accuracy {:.4} auc {:.4}", r.snr_db, r.metrics.accuracy, r.metrics.auc);
    }
    out.write(dir.join("robustness.csv"), csv)?;
    out.commit();
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> CliResult<()> {
    let m = load(cfg)?;
    let (mut out, dir) = start(cfg, "calibrate")?;
    let bins = reliability(&predict(&m.net, &m.segments, &m.data.test)?)?;
    let mut csv = Vec::new();
    bins.write_csv(&mut csv)?;
    out.write(dir.join("reliability.csv"), csv)?;
    out.write(dir.join("ece.csv"), format!("ece,count\n{:.10},{}\n", bins.ece(), bins.total))?;
    println!("ece {:.6} over {} test segments", bins.ece(), bins.total);
    out.commit();
    Ok(())
}

pub fn noise_stats(cfg: &RunConfig) -> CliResult<()> {
    let n: usize = cfg.noise_shape.iter().product();
    if let Some(k) = cfg.noise_ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(CliError::Config(format!("noise_ks entry {k} must be in 1..={n}")));
    }
    let (mut out, dir) = start(cfg, "noise-stats")?;
    let root = Rng::new(cfg.seed);
    let mut rows = Vec::new();
    for &k in &cfg.noise_ks {
        for &p in &cfg.noise_ps {
            let qc = QireConfig {
                k,
                p,
                rescale_sqrt_n: cfg.rescale,
            };
            let mut rng = root.fork(rows.len() as u64);
            rows.push(noise_statistics(&qc, &cfg.noise_shape, cfg.noise_trials, &mut rng)?);
        }
    }
    let mut csv = Vec::new();
    NoiseStatistics::write_csv(&rows, &mut csv)?;
    out.write(dir.join("noise_stats.csv"), csv)?;
    println!("{} configurations x {} trials", rows.len(), cfg.noise_trials);
    out.commit();
    Ok(())
}

pub fn export_latent(cfg: &RunConfig) -> CliResult<()> {
    let m = load(cfg)?;
    let (mut out, dir) = start(cfg, "export-latent")?;
    let rows = latent_rows(&m.net, &m.segments)?;
    let mut csv = String::from("id,label,z0,z1,z2\n");
    for r in &rows {
        writeln!(csv, "{},{},{:.10},{:.10},{:.10}", r.id, r.label, r.coords[0], r.coords[1], r.coords[2]).unwrap();
    }
    out.write(dir.join("latent.csv"), csv)?;
    println!("{} rows", rows.len());
    out.commit();
    Ok(())
}
