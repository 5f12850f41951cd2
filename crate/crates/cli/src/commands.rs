use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddl_core::metrics::EvalReport;
use ddl_core::synth::{generate, load_samples, save_dataset, split_train_eval, LabeledSample};
use ddl_core::tensor::{checkpoint, EncoderNet};
use ddl_core::trainer::{class_map, derive_seed, evaluate, evaluation_histograms, train, train_with_callback, Mode, TrainLog};
use ddl_core::{DdlError, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const DATASET_FILE: &str = "dataset.csv";
pub const WORKERS_ENV: &str = "DDL_WORKERS";

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

pub struct Split {
    pub train: Vec<LabeledSample>,
    pub eval: Vec<LabeledSample>,
}

pub fn split(config: &RunConfig, samples: &[LabeledSample]) -> Result<Split> {
    let (train, eval) = split_train_eval(samples, config.train_fraction, config.split_seed)?;
    Ok(Split { train, eval })
}

pub fn initial_net(config: &RunConfig, seed: u64, train: &[LabeledSample]) -> Result<EncoderNet> {
    EncoderNet::random(
        &config.encoder_spec()?,
        class_map(train).len(),
        derive_seed(seed, STREAM_INIT, 0),
    )
}

/// Margin-softmax baseline from a fresh network.
pub fn pretrain(config: &RunConfig, seed: u64, train_set: &[LabeledSample]) -> Result<(EncoderNet, TrainLog)> {
    let net = initial_net(config, seed, train_set)?;
    let tc = config.pretrain_config(derive_seed(seed, STREAM_PRETRAIN, 0));
    train(&tc, train_set, None, net)
}

pub fn finetune<F>(
    config: &RunConfig,
    mode: Mode,
    seed: u64,
    start: EncoderNet,
    data: &Split,
    on_eval: F,
) -> Result<(EncoderNet, TrainLog)>
where
    F: FnMut(&EncoderNet, &ddl_core::trainer::EvalCheckpoint) -> Result<()>,
{
    let tc = config.train_config(mode, derive_seed(seed, STREAM_FINETUNE, 0));
    train_with_callback(&tc, &data.train, Some(&data.eval), start, on_eval)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| DdlError::InvalidConfig(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn save_checked(net: &EncoderNet, path: &Path) -> Result<()> {
    checkpoint::save(net, path)?;
    if checkpoint::load(path)?.fingerprint() != net.fingerprint() {
        return Err(DdlError::Parse(format!("checkpoint {} did not read back", path.display())));
    }
    Ok(())
}

fn report_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| DdlError::Parse(e.to_string()))
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    ensure_dir(out)?;
    let synth = config.synth();
    let data = generate(&synth)?;
    let path = out.join(DATASET_FILE);
    save_dataset(&data.samples, &synth, &path)?;
    let back = load_samples(&path)?;
    let expected = synth.identities * synth.samples_per_identity * (1 + synth.hard_domains());
    if back.len() != expected {
        return Err(DdlError::Parse(format!("dataset has {} records, expected {expected}", back.len())));
    }
    let mut m = RunManifest::new("synth", config, config.data_seed);
    m.outputs = vec![DATASET_FILE.into(), format!("{DATASET_FILE}.config.json")];
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    /// Start from this checkpoint instead of pre-training.
    pub init: Option<&'a Path>,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt-{iteration:06}.ckpt")
}

pub fn cmd_train(config: &RunConfig, args: &TrainArgs) -> Result<RunManifest> {
    let start = Instant::now();
    ensure_dir(args.out)?;
    let samples = load_samples(args.data)?;
    let data = split(config, &samples)?;
    let seed = config.seed;
    let mut m = RunManifest::new("train", config, seed).input("data", args.data);
    let mut outputs: Vec<String> = Vec::new();

    let net = if let Some(init) = args.init {
        m = m.input("init", init);
        checkpoint::load(init)?
    } else if config.mode != Mode::Baseline && config.pretrain_iterations > 0 {
        let (net, log) = pretrain(config, seed, &data.train)?;
        save_checked(&net, &args.out.join("pretrain.ckpt"))?;
        write_log(&log, &args.out.join("pretrain.jsonl"))?;
        outputs.extend(["pretrain.ckpt".into(), "pretrain.jsonl".into()]);
        net
    } else {
        initial_net(config, seed, &data.train)?
    };

    let out = args.out.to_path_buf();
    let mut periodic = Vec::new();
    let (net, log) = finetune(config, config.mode, seed, net, &data, |net, cp| {
        let name = checkpoint_name(cp.iteration);
        save_checked(net, &out.join(&name))?;
        periodic.push(name);
        Ok(())
    })?;
    outputs.extend(periodic);
    save_checked(&net, &args.out.join("final.ckpt"))?;
    write_log(&log, &args.out.join("train.jsonl"))?;
    outputs.extend(["final.ckpt".into(), "train.jsonl".into()]);
    if let Some(report) = log.final_eval() {
        fs::write(args.out.join("eval.json"), report_json(report)?)?;
        outputs.push("eval.json".into());
    }
    m.outputs = outputs;
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(args.out)?;
    Ok(m)
}

pub fn histogram_file(domain: &str, side: &str) -> String {
    format!("hist-{domain}-{side}.csv")
}

pub fn cmd_eval(config: &RunConfig, ckpt: &Path, data_path: &Path, out: &Path) -> Result<(RunManifest, EvalReport)> {
    let start = Instant::now();
    ensure_dir(out)?;
    let net = checkpoint::load(ckpt)?;
    let samples = load_samples(data_path)?;
    let data = split(config, &samples)?;
    let ec = config.train_config(config.mode, config.seed).eval_config();
    let report = evaluate(&net, &data.eval, &ec)?;
    let mut outputs = vec!["eval.json".to_string(), "eval.csv".to_string()];
    fs::write(out.join("eval.json"), report_json(&report)?)?;
    fs::write(
        out.join("eval.csv"),
        format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    for (domain, pos, neg) in evaluation_histograms(&net, &data.eval, &ec)? {
        for (side, h) in [("pos", &pos), ("neg", &neg)] {
            let name = histogram_file(&domain, side);
            let mut buf = Vec::new();
            h.write_csv(&mut buf)?;
            fs::write(out.join(&name), &buf)?;
            let total: f64 = h.masses.iter().sum();
            if (total - 1.0).abs() > 1e-9 || h.masses.len() != config.bins {
                return Err(DdlError::Parse(format!("histogram {name} failed validation")));
            }
            outputs.push(name);
        }
    }
    let mut m = RunManifest::new("eval", config, config.seed)
        .input("checkpoint", ckpt)
        .input("data", data_path);
    m.outputs = outputs;
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok((m, report))
}

pub const ABLATION_FILE: &str = "ablation.csv";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every (mode, seed) cell from a shared per-seed baseline and returns
/// the final reports in mode-major order.
pub fn ablation_reports(
    config: &RunConfig,
    data: &Split,
    seeds: &[u64],
    workers: usize,
    pretrained_dir: Option<&Path>,
) -> Result<Vec<(Mode, u64, EvalReport)>> {
    let mut bases = Vec::new();
    for &seed in seeds {
        let (net, _) = pretrain(config, seed, &data.train)?;
        if let Some(dir) = pretrained_dir {
            save_checked(&net, &dir.join(format!("pretrain-seed{seed}.ckpt")))?;
        }
        bases.push(net);
    }
    let cells: Vec<(Mode, usize)> = config
        .ablate_modes
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |s| (m, s)))
        .collect();
    let run = |&(mode, s): &(Mode, usize)| -> Result<(Mode, u64, EvalReport)> {
        let (_, log) = finetune(config, mode, seeds[s], bases[s].clone(), data, |_, _| Ok(()))?;
        let report = log
            .final_eval()
            .cloned()
            .ok_or_else(|| DdlError::InvalidConfig("ablation needs iterations > 0".into()))?;
        Ok((mode, seeds[s], report))
    };
    let workers = workers.clamp(1, cells.len().max(1));
    let mut results: Vec<Option<Result<(Mode, u64, EvalReport)>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (w..cells.len()).step_by(workers).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let run = &run;
                let cells = &cells;
                scope.spawn(move || idx.into_iter().map(|i| (i, run(&cells[i]))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub fn ablation_csv(rows: &[(Mode, u64, EvalReport)]) -> Result<String> {
    let first = rows
        .first()
        .ok_or_else(|| DdlError::EmptyInput("ablation produced no rows".into()))?;
    let mut out = format!("mode,seed,{}\n", first.2.csv_header());
    for (mode, seed, report) in rows {
        out.push_str(&format!("{mode},{seed},{}\n", report.csv_row()));
    }
    Ok(out)
}

pub fn cmd_ablate(config: &RunConfig, data_path: &Path, out: &Path, seeds: &[u64]) -> Result<RunManifest> {
    let start = Instant::now();
    ensure_dir(out)?;
    let samples = load_samples(data_path)?;
    let data = split(config, &samples)?;
    let rows = ablation_reports(config, &data, seeds, worker_count(), Some(out))?;
    let csv = ablation_csv(&rows)?;
    let expected = config.ablate_modes.len() * seeds.len();
    if csv.lines().count() != expected + 1 {
        return Err(DdlError::Parse(format!("ablation table has wrong row count, expected {expected}")));
    }
    fs::write(out.join(ABLATION_FILE), csv)?;
    let mut m = RunManifest::new("ablate", config, seeds.first().copied().unwrap_or(config.seed)).input("data", data_path);
    m.outputs = std::iter::once(ABLATION_FILE.to_string())
        .chain(seeds.iter().map(|s| format!("pretrain-seed{s}.ckpt")))
        .collect();
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}

pub fn dataset_path(dir_or_file: &Path) -> PathBuf {
    if dir_or_file.is_dir() {
        dir_or_file.join(DATASET_FILE)
    } else {
        dir_or_file.to_path_buf()
    }
}
