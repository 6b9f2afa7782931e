mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use beamllm::baselines::RecurrentModel;
use beamllm::eval::{complexity_csv, complexity_report, evaluate, metrics_csv, TopKReport, K_GRID};
use beamllm::model::{load_model, save_model, BeamModel};
use beamllm::reprogram::BeamLlm;
use beamllm::scenario::{generate_scenario, load_jsonl, save_jsonl, split_dataset, Mode};
use beamllm::training::{gradient_suite, history_csv, random_samples, train};
use beamllm::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{sha256_hex, ModelKind, RunConfig};

const MAX_GRAD_REL_ERR: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "beamllm", version, about = "Vision-aided mmWave beam prediction with a reprogrammed frozen transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (relative output paths land here).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Seed; falls back to the config file, then $BEAMLLM_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the scenario and write sequences as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data.jsonl")]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        no_pap: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Top-K accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Paired BeamLLM training with and without the prompt prefix.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Finite-difference gradient check of every model family.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter counts and per-sample inference time.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value = "complexity.csv")]
        out: PathBuf,
    },
}

/// Resolved configuration plus the bookkeeping for the run manifest.
struct Run {
    name: &'static str,
    cfg: RunConfig,
    seed: u64,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    extra: BTreeMap<String, Value>,
}

impl Run {
    fn new(name: &'static str, common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(d) = &common.run_dir {
            cfg.paths.run_dir = Some(d.clone());
        }
        edit(&mut cfg);
        let seed = cfg.resolve_seed(common.seed)?;
        cfg.validate()?;
        let dir = cfg.paths.run_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        Ok(Run {
            name,
            cfg,
            seed,
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
        })
    }

    fn out_path(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    fn data_path(&self) -> Result<PathBuf> {
        self.cfg
            .paths
            .data
            .clone()
            .ok_or_else(|| Error::Config("no dataset: pass --data or set paths.data".into()).into())
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&mut self, rel: &Path, contents: &str) -> Result<PathBuf> {
        let path = self.out_path(rel);
        fs::write(&path, contents).map_err(|source| Error::Io { path: path.clone(), source })?;
        self.output(&path)?;
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        let manifest = json!({
            "command": self.name,
            "config_hash": self.cfg.hash(),
            "seed": self.seed,
            "versions": { "beamllm": beamllm::VERSION, "cli": env!("CARGO_PKG_VERSION") },
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.extra,
        });
        let path = self.dir.join(format!("{}.manifest.json", self.name));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
        Ok(())
    }
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<Box<dyn BeamModel>> {
    let m = &cfg.model;
    let n_beams = cfg.scenario.n_beams;
    Ok(match m.kind.cell() {
        None => Box::new(BeamLlm::new(m.beamllm(n_beams, seed))?),
        Some(kind) => Box::new(RecurrentModel::new(m.recurrent(kind, n_beams, seed))?),
    })
}

fn cmd_gen(common: Common, out: PathBuf) -> Result<()> {
    let mut run = Run::new("gen", &common, |_| {})?;
    let records = generate_scenario(&run.cfg.scenario, run.seed)?;
    let path = run.out_path(&out);
    save_jsonl(&records, &path)?;
    run.output(&path)?;
    println!("wrote {} sequences to {}", records.len(), path.display());
    run.finish()
}

fn train_one(run: &mut Run, data: &Path, out: &Path, history_name: &str) -> Result<TopKReport> {
    let records = load_jsonl(data)?;
    let mode = run.cfg.model.mode;
    let split = split_dataset(&records, run.seed, mode.t_hist(), mode.t_pred())?;
    let mut model = build_model(&run.cfg, run.seed)?;
    let train_cfg = beamllm::training::TrainConfig {
        seed: run.seed,
        ..run.cfg.train.clone()
    };
    let outcome = train(model.as_mut(), &split, &train_cfg, |r| {
        eprintln!(
            "epoch {:>3} lr {:.5} train_loss {:.4} val_loss {:.4} train_top1 {:.3} val_top1 {:.3}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.train_top1, r.val_top1
        );
    })?;
    let ckpt = run.out_path(out);
    save_model(&ckpt, model.as_ref())?;
    run.output(&ckpt)?;
    run.write(Path::new(history_name), &history_csv(&outcome.history))?;
    run.extra.insert(format!("{history_name}.best_epoch"), json!(outcome.best_epoch));
    Ok(evaluate(model.as_ref(), &split.val, mode)?)
}

fn cmd_train(
    common: Common,
    model: Option<ModelKind>,
    mode: Option<Mode>,
    no_pap: bool,
    data: Option<PathBuf>,
    out: PathBuf,
    epochs: Option<usize>,
) -> Result<()> {
    let mut run = Run::new("train", &common, |c| {
        if let Some(m) = model {
            c.model.kind = m;
        }
        if let Some(m) = mode {
            c.model.mode = m;
        }
        if no_pap {
            c.model.pap = false;
        }
        if let Some(d) = data {
            c.paths.data = Some(d);
        }
        if let Some(e) = epochs {
            c.train.epochs = e;
        }
    })?;
    let data = run.data_path()?;
    run.input(&data)?;
    let val = train_one(&mut run, &data, &out, "history.csv")?;
    println!(
        "saved {}; val top-1 {:.4} top-3 {:.4}",
        run.out_path(&out).display(),
        val.mean(1)?,
        val.mean(3)?
    );
    run.finish()
}

fn cmd_eval(common: Common, ckpt: PathBuf, data: Option<PathBuf>, mode: Option<Mode>, out: PathBuf) -> Result<()> {
    let model = load_model(&ckpt)?;
    let meta_seed = model.meta()["seed"].as_u64();
    let ckpt_mode = [Mode::Standard, Mode::Fewshot]
        .into_iter()
        .find(|m| m.t_hist() == model.t_hist() && m.t_pred() == model.t_pred());
    let mut run = Run::new("eval", &common, |c| {
        if let Some(m) = mode.or(ckpt_mode) {
            c.model.mode = m;
        }
        if let Some(d) = data {
            c.paths.data = Some(d);
        }
        if c.seed.is_none() && common.seed.is_none() {
            c.seed = meta_seed;
        }
    })?;
    let data = run.data_path()?;
    run.input(&ckpt)?;
    run.input(&data)?;
    let mode = run.cfg.model.mode;
    let records = load_jsonl(&data)?;
    let split = split_dataset(&records, run.seed, mode.t_hist(), mode.t_pred())?;
    let report = evaluate(model.as_ref(), &split.test, mode)?;
    let path = run.write(&out, &metrics_csv(std::slice::from_ref(&report)))?;
    for k in K_GRID {
        run.extra.insert(format!("top{k}_mean"), json!(report.mean(k)?));
    }
    println!(
        "{} {} pap={} n_test={}: top-1 {:.4} top-3 {:.4} top-5 {:.4} -> {}",
        report.model,
        mode.name(),
        report.pap_label(),
        report.n_test,
        report.mean(1)?,
        report.mean(3)?,
        report.mean(5)?,
        path.display()
    );
    run.finish()
}

fn cmd_ablate(common: Common, mode: Option<Mode>, data: Option<PathBuf>, epochs: Option<usize>, out: PathBuf) -> Result<()> {
    let mut run = Run::new("ablate", &common, |c| {
        c.model.kind = ModelKind::Beamllm;
        if let Some(m) = mode {
            c.model.mode = m;
        }
        if let Some(d) = data {
            c.paths.data = Some(d);
        }
        if let Some(e) = epochs {
            c.train.epochs = e;
        }
    })?;
    let data = run.data_path()?;
    run.input(&data)?;
    let mode = run.cfg.model.mode;
    let records = load_jsonl(&data)?;
    let split = split_dataset(&records, run.seed, mode.t_hist(), mode.t_pred())?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for pap in [true, false] {
        run.cfg.model.pap = pap;
        let tag = if pap { "on" } else { "off" };
        let ckpt = PathBuf::from(format!("pap_{tag}.ckpt"));
        train_one(&mut run, &data, &ckpt, &format!("history_pap_{tag}.csv"))?;
        let model = load_model(run.out_path(&ckpt))?;
        reports.push(evaluate(model.as_ref(), &split.test, mode)?);
        models.push(model);
    }
    run.cfg.model.pap = true;
    run.write(Path::new("metrics.csv"), &metrics_csv(&reports))?;

    let mut table = String::from("K,step,pap_on,pap_off,gap\n");
    let (on, off) = (&reports[0], &reports[1]);
    for k in K_GRID {
        for j in 0..mode.t_pred() {
            let (a, b) = (on.at(k, j)?, off.at(k, j)?);
            table.push_str(&format!("{k},{},{a},{b},{}\n", j + 1, a - b));
        }
        let (a, b) = (on.mean(k)?, off.mean(k)?);
        table.push_str(&format!("{k},mean,{a},{b},{}\n", a - b));
    }
    run.write(&out, &table)?;

    let probes = random_samples(models[0].as_ref(), 16, run.seed);
    let hist: Vec<_> = probes.iter().map(|s| &s.history).collect();
    let (p_on, p_off) = (models[0].predict_batch(&hist)?, models[1].predict_batch(&hist)?);
    let diff = p_on
        .iter()
        .zip(&p_off)
        .map(|(a, b)| a.scores().max_abs_diff(b.scores()))
        .fold(0.0, f64::max);
    run.extra.insert("output_max_abs_diff".into(), json!(diff));
    print!("{table}");
    println!("max |logit difference| on random inputs: {diff:.6}");
    run.finish()
}

fn cmd_gradcheck(common: Common) -> Result<()> {
    let mut run = Run::new("gradcheck", &common, |_| {})?;
    let mut worst: f64 = 0.0;
    for (name, r) in gradient_suite(run.seed)? {
        println!(
            "{name:<14} max_rel_err {:.3e} over {} entries (worst {})",
            r.max_rel_err, r.checked, r.worst
        );
        run.extra.insert(name, json!(r.max_rel_err));
        worst = worst.max(r.max_rel_err);
    }
    run.finish()?;
    if worst > MAX_GRAD_REL_ERR {
        return Err(Error::Validation(format!("gradient check failed: max rel err {worst:.3e} > {MAX_GRAD_REL_ERR:e}")).into());
    }
    Ok(())
}

fn cmd_bench(common: Common, mode: Option<Mode>, runs: usize, out: PathBuf) -> Result<()> {
    let mut run = Run::new("bench", &common, |c| {
        if let Some(m) = mode {
            c.model.mode = m;
        }
    })?;
    let mut models: Vec<Box<dyn BeamModel>> = Vec::new();
    let mut llm = BeamLlm::new(run.cfg.model.beamllm(run.cfg.scenario.n_beams, run.seed))?;
    // time the full prompt path rather than cache hits on a repeated input
    llm.set_prompt_cache_budget(0);
    models.push(Box::new(llm));
    for kind in [ModelKind::Rnn, ModelKind::Gru, ModelKind::Lstm] {
        run.cfg.model.kind = kind;
        models.push(build_model(&run.cfg, run.seed)?);
    }
    run.cfg.model.kind = ModelKind::Beamllm;
    let refs: Vec<&dyn BeamModel> = models.iter().map(|m| m.as_ref()).collect();
    let probes: Vec<_> = refs.iter().map(|m| random_samples(*m, 1, run.seed).remove(0).history).collect();
    let rows = complexity_report(&refs, &probes, runs)?;
    let csv = complexity_csv(&rows);
    run.write(&out, &csv)?;
    print!("{csv}");
    run.finish()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { common, out } => cmd_gen(common, out),
        Cmd::Train {
            common,
            model,
            mode,
            no_pap,
            data,
            out,
            epochs,
        } => cmd_train(common, model, mode, no_pap, data, out, epochs),
        Cmd::Eval {
            common,
            ckpt,
            data,
            mode,
            out,
        } => cmd_eval(common, ckpt, data, mode, out),
        Cmd::Ablate {
            common,
            mode,
            data,
            epochs,
            out,
        } => cmd_ablate(common, mode, data, epochs, out),
        Cmd::Gradcheck { common } => cmd_gradcheck(common),
        Cmd::Bench {
            common,
            mode,
            runs,
            out,
        } => cmd_bench(common, mode, runs, out),
    }
}

/// `error kind=<kind>: <message>` on a single line.
fn report(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("internal", Error::kind);
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error kind={kind}: {msg}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", report(&e));
            ExitCode::FAILURE
        }
    }
}
