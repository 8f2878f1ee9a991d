// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line entry points and the JSON configuration they read.
//!
//! Every subcommand takes the same flags; a JSON config file fills in what the
//! flags do not say. Exit codes: 0 on success, 2 on usage errors (bad flags,
//! missing input files, unknown experiment), 1 on anything else.

pub mod server;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    head_ablation_sweep, induction_candidates, induction_pass_rate, prefix_sweep, proxy_report_from, Outcome, Proxy,
};
use crate::attribution::head_attribution;
use crate::corpus::{gen_prefix_induction, gen_random_repeated, ActivationBuffer, ModelSource, TokenDataset};
use crate::error::{Error, Result};
use crate::metrics::{dashboard_from, evaluate, SparseActivations};
use crate::model::{build_induction_model, build_long_prefix_model, load_weights, Site, Tokenizer, Weights};
use crate::sae::{load_sae, save_sae, train, SaeParams, TrainConfig};
use crate::SCHEMA_VERSION;

/// Where model weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    File { path: PathBuf },
    InductionFixture { vocab: usize, max_seq: usize, sharpness: f64 },
    LongPrefixFixture { vocab: usize, max_seq: usize, sharpness: f64 },
}

impl ModelSpec {
    pub fn load(&self) -> Result<Weights> {
        match self {
            ModelSpec::File { path } => load_weights(path),
            ModelSpec::InductionFixture { vocab, max_seq, sharpness } => {
                build_induction_model(*vocab, *max_seq, *sharpness)
            }
            ModelSpec::LongPrefixFixture { vocab, max_seq, sharpness } => {
                build_long_prefix_model(*vocab, *max_seq, *sharpness)
            }
        }
    }
}

/// Where token sequences come from. Generated sets take the model's vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    File { path: PathBuf },
    RandomRepeated { n: usize, seq_len: usize, seed: u64 },
    PrefixInduction { n: usize, prefix_len: usize, seq_len: usize, seed: u64 },
}

impl DataSpec {
    pub fn load(&self, vocab: usize) -> Result<TokenDataset> {
        match *self {
            DataSpec::File { ref path } => TokenDataset::load(path),
            DataSpec::RandomRepeated { n, seq_len, seed } => gen_random_repeated(n, seq_len, vocab, seed),
            DataSpec::PrefixInduction {
                n,
                prefix_len,
                seq_len,
                seed,
            } => gen_prefix_induction(n, prefix_len, seq_len, vocab, seed),
        }
    }
}

/// Parameters read by `experiment`; each experiment uses a subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub layer: usize,
    pub head: usize,
    pub prefix_lens: Vec<usize>,
    /// Sequences generated per prefix length.
    pub n: usize,
    pub seq_len: usize,
    pub threshold: f64,
    pub n_examples: usize,
    /// Size of the low-attribution control group in `induction_family`.
    pub n_control: usize,
    pub feature: Option<usize>,
    pub proxy: Option<Proxy>,
    pub n_bins: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            layer: 1,
            head: 1,
            prefix_lens: vec![1, 2, 3, 4],
            n: 100,
            seq_len: 16,
            threshold: 0.6,
            n_examples: 200,
            n_control: 50,
            feature: None,
            proxy: None,
            n_bins: 10,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: Option<ModelSpec>,
    pub tokenizer: Option<PathBuf>,
    pub saes: Vec<PathBuf>,
    /// Training data, and the default data for every other command.
    pub data: Option<DataSpec>,
    /// Held-out data for evaluation; falls back to `data`.
    pub eval_data: Option<DataSpec>,
    pub site: Option<Site>,
    pub train: TrainConfig,
    pub buffer_capacity: usize,
    pub exclude_first_position: bool,
    /// Features to export dashboards for; empty means all.
    pub features: Vec<usize>,
    /// Top examples per dashboard.
    pub k: usize,
    pub experiment: ExperimentParams,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: None,
            tokenizer: None,
            saes: Vec::new(),
            data: None,
            eval_data: None,
            site: None,
            train: TrainConfig::default(),
            buffer_capacity: 16384,
            exclude_first_position: false,
            features: Vec::new(),
            k: 20,
            experiment: ExperimentParams::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Fold command-line flags over the file contents.
    pub fn with_flags(mut self, flags: &Flags) -> Self {
        if let Some(p) = &flags.model {
            self.model = Some(ModelSpec::File { path: p.clone() });
        }
        if !flags.saes.is_empty() {
            self.saes = flags.saes.clone();
        }
        if let Some(s) = flags.seed {
            self.train.seed = s;
        }
        self
    }

    pub fn weights(&self) -> Result<Weights> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no model given (use --model or a config 'model' entry)".into()))?
            .load()
    }

    fn data(&self, vocab: usize) -> Result<TokenDataset> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("config has no 'data' entry".into()))?
            .load(vocab)
    }

    fn eval_data(&self, vocab: usize) -> Result<TokenDataset> {
        match &self.eval_data {
            Some(d) => d.load(vocab),
            None => self.data(vocab),
        }
    }

    fn saes(&self) -> Result<Vec<SaeParams>> {
        if self.saes.is_empty() {
            return Err(Error::InvalidArgument("no SAE given (use --sae or a config 'saes' entry)".into()));
        }
        self.saes.iter().map(|p| load_sae(p)).collect()
    }

    /// Hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Short content hash identifying a set of weights.
pub fn model_id(weights: &Weights) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&weights.config).expect("config serializes"));
    for (name, t) in weights.named_tensors() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Parser, Debug)]
#[command(name = "attn-sae", version, about = "Train and inspect sparse autoencoders on attention outputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Model weights manifest; overrides the config's model.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// SAE manifest (repeatable); overrides the config's list.
    #[arg(long = "sae", global = true)]
    pub saes: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an SAE and write it with its evaluation report.
    Train,
    /// Evaluate SAEs on held-out data.
    Eval,
    /// Export feature dashboards.
    Dashboards,
    /// Run a named experiment.
    Experiment { name: String },
    /// Serve the JSON API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

pub const EXPERIMENTS: &[&str] = &["prefix_sweep", "head_sweep", "induction_family", "proxy_report"];

/// A failed command and its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::MissingFile { .. }) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

/// Parse arguments, run, print errors, and return the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    let cfg = match &cli.flags.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    }
    .with_flags(&cli.flags);
    let out = &cli.flags.out_dir;
    match &cli.command {
        Command::Experiment { name } if !EXPERIMENTS.contains(&name.as_str()) => {
            return Err(usage(format!(
                "unknown experiment '{name}'; valid experiments: {}",
                EXPERIMENTS.join(", ")
            )))
        }
        Command::Serve { host, port } => {
            let bundle = server::Bundle::from_config(&cfg)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| usage(format!("cannot start runtime: {e}")))?;
            return rt
                .block_on(server::serve(bundle, host, *port))
                .map_err(|e| usage(format!("cannot serve on {host}:{port}: {e}")));
        }
        _ => {}
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::Train => {
            let report = cmd_train(&cfg, out)?;
            println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
        }
        Command::Eval => {
            for p in cmd_eval(&cfg, out)? {
                println!("{}", p.display());
            }
        }
        Command::Dashboards => {
            let n = cmd_dashboards(&cfg, out)?.len();
            println!("wrote {n} dashboards to {}", out.join("dashboards").display());
        }
        Command::Experiment { name } => {
            let p = cmd_experiment(name, &cfg, out)?;
            println!("{}", p.display());
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Train on `data`, evaluate on `eval_data`, and write `sae.json`, `report.json`
/// and `stats.json` into `out`.
pub fn cmd_train(cfg: &Config, out: &Path) -> Result<crate::metrics::EvalReport> {
    let w = cfg.weights()?;
    let site = cfg
        .site
        .ok_or_else(|| Error::InvalidArgument("config has no 'site' entry".into()))?;
    let data = cfg.data(w.config.vocab)?;
    let src = ModelSource::new(&w, &data, site)?.exclude_first_position(cfg.exclude_first_position);
    let mut buf = ActivationBuffer::new(src, cfg.buffer_capacity, cfg.train.seed)?;
    let (sae, stats) = train(&mut buf, Some(site), &cfg.train)?;
    let report = evaluate(&w, &sae, &cfg.eval_data(w.config.vocab)?)?;
    save_sae(&sae, &out.join("sae.json"))?;
    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("stats.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "config_hash": cfg.hash(),
            "seed": cfg.train.seed,
            "stats": stats,
        }),
    )?;
    if stats.divergence_flag {
        // Artifacts stay on disk for inspection; the command still fails.
        let step = stats.rising_windows.first().copied().unwrap_or(0);
        return Err(Error::Diverged {
            step,
            detail: format!("smoothed loss rose in windows starting at {:?}", stats.rising_windows),
        });
    }
    Ok(report)
}

fn site_slug(sae: &SaeParams) -> String {
    sae.site.map(|s| s.to_string()).unwrap_or_else(|| "unsited".into())
}

/// One `report_<site>.json` per SAE.
pub fn cmd_eval(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let w = cfg.weights()?;
    let data = cfg.eval_data(w.config.vocab)?;
    let mut paths = Vec::new();
    for sae in cfg.saes()? {
        let report = evaluate(&w, &sae, &data)?;
        let p = out.join(format!("report_{}.json", site_slug(&sae)));
        write_json(&p, &report)?;
        paths.push(p);
    }
    Ok(paths)
}

/// One dashboard file per requested feature under `out/dashboards`.
pub fn cmd_dashboards(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let w = cfg.weights()?;
    let data = cfg.eval_data(w.config.vocab)?;
    let dir = out.join("dashboards");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    for sae in cfg.saes()? {
        let acts = SparseActivations::collect(&w, &sae, &data)?;
        let features: Vec<usize> = if cfg.features.is_empty() {
            (0..sae.d_sae()).collect()
        } else {
            cfg.features.clone()
        };
        for i in features {
            let rec = dashboard_from(&w, &sae, i, &data, &acts, cfg.k)?;
            let p = dir.join(format!("{}_feature_{i}.json", site_slug(&sae)));
            write_json(&p, &rec)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Run experiment `name` and write `out/<name>.json` (plus a CSV for sweeps).
pub fn cmd_experiment(name: &str, cfg: &Config, out: &Path) -> std::result::Result<PathBuf, CliError> {
    let result = run_experiment(name, cfg)?;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": name,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "result": result.json,
    });
    let p = out.join(format!("{name}.json"));
    write_json(&p, &doc)?;
    if let Some(csv) = result.csv {
        let c = out.join(format!("{name}.csv"));
        fs::write(&c, csv).map_err(|e| Error::io(&c, e))?;
    }
    Ok(p)
}

pub struct ExperimentOutput {
    pub json: Value,
    pub csv: Option<String>,
}

pub fn run_experiment(name: &str, cfg: &Config) -> std::result::Result<ExperimentOutput, CliError> {
    let p = &cfg.experiment;
    let seed = cfg.train.seed;
    let w = cfg.weights()?;
    let out = match name {
        "prefix_sweep" => {
            let pts = prefix_sweep(&w, p.layer, p.head, &p.prefix_lens, p.n, p.seq_len, seed)?;
            let mut csv = String::from("prefix_len,score\n");
            for pt in &pts {
                csv.push_str(&format!("{},{}\n", pt.prefix_len, pt.score));
            }
            ExperimentOutput {
                json: json!({ "layer": p.layer, "head": p.head, "points": pts }),
                csv: Some(csv),
            }
        }
        "head_sweep" => {
            let data = cfg.eval_data(w.config.vocab)?;
            let res = head_ablation_sweep(&w, p.layer, &data)?;
            let mut csv = String::from("head,clean,ablated,delta\n");
            for (h, r) in res.iter().enumerate() {
                csv.push_str(&format!("{h},{},{},{}\n", r.clean, r.ablated, r.delta));
            }
            ExperimentOutput {
                json: json!({ "layer": p.layer, "results": res }),
                csv: Some(csv),
            }
        }
        "induction_family" => ExperimentOutput {
            json: induction_family(&w, cfg)?,
            csv: None,
        },
        "proxy_report" => {
            let feature = p
                .feature
                .ok_or_else(|| Error::InvalidArgument("proxy_report needs experiment.feature".into()))?;
            let proxy = p.proxy.clone().unwrap_or(Proxy::Induction { target: None });
            let data = cfg.eval_data(w.config.vocab)?;
            let mut reports = Vec::new();
            for sae in cfg.saes()? {
                sae.check_feature(feature)?;
                let acts = SparseActivations::collect(&w, &sae, &data)?;
                reports.push(proxy_report_from(&acts, feature, &proxy, &data, p.n_bins)?);
            }
            ExperimentOutput {
                json: json!({ "reports": reports }),
                csv: None,
            }
        }
        other => {
            return Err(usage(format!(
                "unknown experiment '{other}'; valid experiments: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    Ok(out)
}

/// Selection heuristic then behavior heuristic, with a low-attribution control group.
fn induction_family(w: &Weights, cfg: &Config) -> Result<Value> {
    let p = &cfg.experiment;
    let data = cfg.eval_data(w.config.vocab)?;
    let n_heads = w.config.n_heads;
    let mut per_sae = Vec::new();
    for sae in cfg.saes()? {
        let fc = SparseActivations::collect(w, &sae, &data)?.fire_counts();
        let live: Vec<bool> = fc.iter().map(|c| *c > 0).collect();
        let selected = induction_candidates(&sae, p.head, n_heads, p.threshold, Some(&live))?;
        let control: Vec<usize> = (0..sae.d_sae())
            .filter(|&i| live[i] && head_attribution(&sae, i, n_heads).is_ok_and(|h| h[p.head] < 0.1))
            .take(p.n_control)
            .collect();
        let check = |ids: &[usize]| -> Result<(Vec<_>, usize)> {
            let rs = ids
                .iter()
                .map(|&i| induction_pass_rate(w, &sae, i, &data, p.n_examples, 0.0, cfg.train.seed ^ i as u64))
                .collect::<Result<Vec<_>>>()?;
            let passed = rs.iter().filter(|r| r.outcome == Outcome::Pass).count();
            Ok((rs, passed))
        };
        let (sel, sel_pass) = check(&selected)?;
        let (ctl, ctl_pass) = check(&control)?;
        per_sae.push(json!({
            "site": site_slug(&sae),
            "live": live.iter().filter(|l| **l).count(),
            "selected": selected,
            "selected_passing": sel_pass,
            "control": control,
            "control_passing": ctl_pass,
            "selected_results": sel,
            "control_results": ctl,
        }));
    }
    Ok(json!({ "head": p.head, "threshold": p.threshold, "saes": per_sae }))
}

/// Tokenizer from the config, or the synthetic one for the model's vocabulary.
fn tokenizer(cfg: &Config, w: &Weights) -> Result<Tokenizer> {
    match &cfg.tokenizer {
        Some(p) => {
            let t = Tokenizer::load(p)?;
            if t.vocab_size() != w.config.vocab {
                return Err(Error::Shape(format!(
                    "tokenizer has {} tokens, model vocab is {}",
                    t.vocab_size(),
                    w.config.vocab
                )));
            }
            Ok(t)
        }
        None => Ok(Tokenizer::synthetic(w.config.vocab)),
    }
}

/// SAEs keyed by their site string.
fn saes_by_site(saes: Vec<SaeParams>, w: &Weights) -> Result<BTreeMap<String, SaeParams>> {
    let mut out = BTreeMap::new();
    for sae in saes {
        sae.check_attach(&w.config)?;
        let key = site_slug(&sae);
        if out.insert(key.clone(), sae).is_some() {
            return Err(Error::InvalidArgument(format!("two SAEs at {key}")));
        }
    }
    Ok(out)
}
