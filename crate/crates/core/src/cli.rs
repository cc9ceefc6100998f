//! The `rflow` command line.
//!
//! Every command reads one resolved [`RunConfig`] and works inside
//! `output.dir`: `config.resolved`, `prior.rfpr`, `model.rflw`,
//! `metrics.csv`, `records.jsonl` and `estimates.csv`. CSV and JSONL artifacts
//! carry the resolved config and the checkpoint's SHA-256.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, ScanAxis, TrainSource};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::estimators::{c_function, kl_diagnostic, log_ratio, RatioEstimate};
use crate::lattice::{ActionParams, ReplicaGeometry};
use crate::oracle::{gaussian_log_ratio, quadrature_log_ratio};
use crate::pipeline::{evaluate, initial_model, load_checkpoint, prior_pool, sampler_for, train_model, TrainData};
use crate::protocol::{read_records, write_records, WorkRecord};
use crate::train::Checkpoint;

#[derive(Parser, Debug)]
#[command(name = "rflow", version, about = "Replica-defect partition function ratios for lattice phi^4 theory")]
#[command(after_help = "Any `--section.key=value` flag overrides the config file and RFLOW_SECTION__KEY variables.")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an equilibrium ensemble at cut l (the training pool when train.source = pool).
    Prior,
    /// Train the configured flow and write model.rflw and metrics.csv.
    Train,
    /// Evolve fresh prior samples and write records.jsonl.
    Sample,
    /// Turn records into ratio and c-function estimates.
    Estimate {
        /// Records to read instead of `<dir>/records.jsonl`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Re-evaluate one checkpoint along l, kappa or L without retraining.
    Scan {
        /// l, kappa or L (overrides scan.axis).
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values (overrides scan.values).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Exact reference values for the configured geometry.
    Oracle {
        /// Quadrature nodes at the coarsest level.
        #[arg(long, default_value_t = 32)]
        nodes: usize,
    },
    /// Merge estimate CSVs into one table.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance shared by every artifact of a run.
struct Provenance {
    config_text: String,
    config_sha: String,
    checkpoint_sha: Option<String>,
}

impl Provenance {
    fn new(cfg: &RunConfig, checkpoint: Option<&Checkpoint>) -> Self {
        let config_text = cfg.to_toml();
        Provenance {
            config_sha: sha256_hex(config_text.as_bytes()),
            checkpoint_sha: checkpoint.map(|c| sha256_hex(&c.to_bytes())),
            config_text,
        }
    }

    fn csv_header(&self, out: &mut impl Write, what: &str) -> Result<()> {
        writeln!(out, "# rflow {what}")?;
        writeln!(out, "# config_sha256: {}", self.config_sha)?;
        writeln!(out, "# checkpoint_sha256: {}", self.checkpoint_sha.as_deref().unwrap_or("none"))?;
        for line in self.config_text.lines() {
            writeln!(out, "# | {line}")?;
        }
        Ok(())
    }

    fn jsonl_meta(&self, cfg: &RunConfig) -> serde_json::Value {
        json!({ "meta": {
            "method": cfg.method.kind.tag(),
            "config_sha256": self.config_sha,
            "checkpoint_sha256": self.checkpoint_sha,
            "config": self.config_text,
        }})
    }
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn new(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.resolved"), cfg.to_toml())?;
        Ok(Run { cfg, dir })
    }

    fn prior_path(&self) -> PathBuf {
        self.dir.join("prior.rfpr")
    }

    fn checkpoint(&self) -> Result<Option<Checkpoint>> {
        match self.cfg.method.kind {
            crate::protocol::Method::Nemc => Ok(None),
            _ => load_checkpoint(&self.cfg.checkpoint_path()).map(Some),
        }
    }

    /// Training pool: the stored ensemble when it matches the run, else a
    /// fresh one.
    fn pool(&self, geom: &ReplicaGeometry, params: &ActionParams) -> Result<Ensemble> {
        let path = self.prior_path();
        if path.exists() {
            let e = Ensemble::load(&path)?;
            if &e.geometry == geom && e.params == *params {
                return Ok(e);
            }
            log::warn!("{} does not match the run; regenerating the pool", path.display());
        }
        prior_pool(geom, params, self.cfg.prior, self.cfg.seeds.prior)
    }

    fn prior(&self) -> Result<serde_json::Value> {
        let (geom, params) = (self.cfg.geometry()?, self.cfg.params()?);
        let e = prior_pool(&geom, &params, self.cfg.prior, self.cfg.seeds.prior)?;
        e.save(&self.prior_path())?;
        Ok(json!({ "prior": self.prior_path(), "samples": e.fields.len() }))
    }

    fn train(&self) -> Result<serde_json::Value> {
        let (geom, params) = (self.cfg.geometry()?, self.cfg.params()?);
        let model = initial_model(&self.cfg)?;
        let pool;
        let data = match self.cfg.train.source {
            TrainSource::Chain => TrainData::Chain {
                geometry: &geom,
                params,
                plan: self.cfg.train_chain_plan(),
                seed: derive_train_chain_seed(&self.cfg),
            },
            TrainSource::Pool => {
                pool = self.pool(&geom, &params)?;
                TrainData::Pool { ensemble: &pool, seed: derive_train_chain_seed(&self.cfg) }
            }
        };
        let trained = train_model(model, data, &self.cfg.train_config())?;
        let path = self.cfg.checkpoint_path();
        trained.checkpoint.save(&path)?;
        let prov = Provenance::new(&self.cfg, Some(&trained.checkpoint));
        let mut out = BufWriter::new(File::create(self.dir.join("metrics.csv"))?);
        prov.csv_header(&mut out, "metrics")?;
        writeln!(out, "era,step,mean_loss,ess,wallclock_s")?;
        for m in &trained.metrics {
            writeln!(out, "{},{},{},{},{}", m.era, m.step, m.mean_loss, m.ess, m.wallclock_s)?;
        }
        out.flush()?;
        let last = trained.metrics.last().copied();
        Ok(json!({ "checkpoint": path, "final_loss": last.map(|m| m.mean_loss), "final_ess": last.map(|m| m.ess) }))
    }

    fn sample(&self) -> Result<serde_json::Value> {
        let ck = self.checkpoint()?;
        let sampler = sampler_for(&self.cfg, ck.as_ref())?;
        let prov = Provenance::new(&self.cfg, ck.as_ref());
        let path = self.dir.join("records.jsonl");
        let mut out = BufWriter::new(File::create(&path)?);
        serde_json::to_writer(&mut out, &prov.jsonl_meta(&self.cfg)).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out)?;
        let mut n = 0;
        evaluate(
            &sampler,
            &self.cfg.geometry()?,
            &self.cfg.params()?,
            self.cfg.prior,
            self.cfg.sample.count,
            self.cfg.sample.chunk,
            self.cfg.seeds.sample,
            |recs| {
                n += recs.len();
                write_records(&mut out, recs)
            },
        )?;
        out.flush()?;
        Ok(json!({ "records": path, "count": n }))
    }

    fn estimate(&self, records: Option<PathBuf>) -> Result<serde_json::Value> {
        let path = records.unwrap_or_else(|| self.dir.join("records.jsonl"));
        let recs = read_records(BufReader::new(File::open(&path)?))?;
        if recs.is_empty() {
            return Err(Error::InvalidInput(format!("{} holds no work records", path.display())));
        }
        let checkpoint_sha = read_meta(&path)?.and_then(|m| m["checkpoint_sha256"].as_str().map(str::to_string));
        let mut prov = Provenance::new(&self.cfg, None);
        prov.checkpoint_sha = checkpoint_sha;
        let geom = self.cfg.geometry()?;
        let row = EstimateRow::new(&self.cfg, &geom, &recs)?;
        let out_path = self.dir.join("estimates.csv");
        let mut out = BufWriter::new(File::create(&out_path)?);
        prov.csv_header(&mut out, "estimates")?;
        writeln!(out, "{}", EstimateRow::HEADER)?;
        writeln!(out, "{}", row.csv())?;
        out.flush()?;
        Ok(json!({ "estimates": out_path, "ln_ratio": row.ratio.ln_ratio, "sigma": row.ratio.sigma, "ess": row.ratio.ess }))
    }

    fn scan(&self, axis: Option<String>, values: Vec<f64>) -> Result<serde_json::Value> {
        let axis = match axis.as_deref() {
            None => self.cfg.scan.axis,
            Some("l") => ScanAxis::Cut,
            Some("kappa") => ScanAxis::Kappa,
            Some("L") => ScanAxis::Volume,
            Some(other) => return Err(Error::Config(format!("unknown scan axis `{other}` (use l, kappa or L)"))),
        };
        let values = if values.is_empty() { self.cfg.scan.values.clone() } else { values };
        let points: Vec<f64> = match (axis, values.is_empty()) {
            (ScanAxis::Cut, true) => (0..self.cfg.geometry.extent_l).map(|l| l as f64).collect(),
            (_, true) => return Err(Error::Config("scan needs values for the kappa and L axes".into())),
            (_, false) => values,
        };
        let ck = self.checkpoint()?;
        let prov = Provenance::new(&self.cfg, ck.as_ref());
        let out_path = self.dir.join("estimates.csv");
        let mut out = BufWriter::new(File::create(&out_path)?);
        prov.csv_header(&mut out, "scan")?;
        writeln!(out, "{}", EstimateRow::HEADER)?;
        let mut summary = Vec::new();
        for (k, &v) in points.iter().enumerate() {
            let mut cfg = self.cfg.clone();
            scan_point(&mut cfg, axis, v)?;
            cfg.seeds.sample = crate::rng::derive_seed(self.cfg.seeds.sample, k as u64);
            let geom = cfg.geometry()?;
            let sampler = sampler_for(&cfg, ck.as_ref())?;
            let mut recs = Vec::new();
            evaluate(&sampler, &geom, &cfg.params()?, cfg.prior, cfg.sample.count, cfg.sample.chunk, cfg.seeds.sample, |r| {
                recs.extend_from_slice(r);
                Ok(())
            })?;
            let row = EstimateRow::new(&cfg, &geom, &recs)?;
            writeln!(out, "{}", row.csv())?;
            out.flush()?;
            summary.push(json!({ "value": v, "ln_ratio": row.ratio.ln_ratio, "sigma": row.ratio.sigma, "ess": row.ratio.ess }));
        }
        Ok(json!({ "estimates": out_path, "points": summary }))
    }

    fn oracle(&self, nodes: usize) -> Result<serde_json::Value> {
        let (geom, params) = (self.cfg.geometry()?, self.cfg.params()?);
        let next = geom.with_cut(geom.cut + 1)?;
        let mut out = json!({ "cut": geom.cut, "kappa": params.kappa, "lambda": params.lambda, "sites": geom.n_sites() });
        if params.lambda == 0.0 && geom.n_sites() <= 4096 {
            out["gaussian_log_ratio"] = json!(gaussian_log_ratio(&geom, &next, params.kappa)?);
        }
        if geom.n_sites() <= 8 {
            let q = quadrature_log_ratio(&geom, &params, nodes, 1e-5)?;
            out["quadrature_log_ratio"] = json!(q.value);
            out["quadrature_coarse"] = json!(q.coarse);
            out["quadrature_nodes"] = json!(q.nodes);
            out["quadrature_radius"] = json!(q.radius);
        }
        if out.get("gaussian_log_ratio").is_none() && out.get("quadrature_log_ratio").is_none() {
            return Err(Error::InvalidInput(
                "no exact oracle for this geometry: need lambda = 0 (determinant) or at most 8 sites (quadrature)".into(),
            ));
        }
        fs::write(self.dir.join("oracle.json"), serde_json::to_string_pretty(&out).unwrap())?;
        Ok(out)
    }
}

fn derive_train_chain_seed(cfg: &RunConfig) -> u64 {
    crate::rng::derive_seed(cfg.seeds.train, u64::MAX)
}

fn scan_point(cfg: &mut RunConfig, axis: ScanAxis, v: f64) -> Result<()> {
    let as_index = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("scan value {v} must be a non-negative integer")))
        }
    };
    match axis {
        ScanAxis::Cut => cfg.geometry.cut = as_index(v)?,
        ScanAxis::Kappa => cfg.action.kappa = v,
        ScanAxis::Volume => {
            // Keep the aspect ratio T/L when it is an integer.
            let g = &cfg.geometry;
            let l = as_index(v)?;
            if g.extent_t.is_multiple_of(g.extent_l) {
                cfg.geometry.extent_t = l * (g.extent_t / g.extent_l);
            }
            cfg.geometry.extent_l = l;
        }
    }
    cfg.validate()
}

fn read_meta(path: &Path) -> Result<Option<serde_json::Value>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let v: serde_json::Value = match serde_json::from_str(&first) {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    Ok(v.get("meta").cloned())
}

/// One ratio estimate with its c-function value and run coordinates.
pub struct EstimateRow {
    pub ratio: RatioEstimate,
    pub kl: f64,
    pub c2: f64,
    pub c2_sigma: f64,
    pub l_eff: f64,
    geom: ReplicaGeometry,
    cfg: RunConfig,
}

impl EstimateRow {
    pub const HEADER: &'static str = "l,l_eff,C2,sigma_C2,ln_ratio,sigma,sigma_gamma,ESS,sigma_ESS,N,cost,kl,method,direction,kappa,lambda,D,T,L,n,convention,abscissa";

    pub fn new(cfg: &RunConfig, geom: &ReplicaGeometry, recs: &[WorkRecord]) -> Result<Self> {
        let ratio = log_ratio(recs)?;
        let works: Vec<f64> = recs.iter().map(|r| r.work).collect();
        let kl = kl_diagnostic(&works, ratio.ln_ratio)?;
        let c = &c_function(&[(geom.cut, ratio.clone())], geom, cfg.estimate.boundary, cfg.estimate.abscissa)?[0];
        Ok(EstimateRow { c2: c.value, c2_sigma: c.sigma, l_eff: c.l_eff, ratio, kl, geom: geom.clone(), cfg: cfg.clone() })
    }

    pub fn csv(&self) -> String {
        let (r, g, c) = (&self.ratio, &self.geom, &self.cfg);
        let direction = match c.method.direction {
            crate::protocol::Direction::Forward => "forward",
            crate::protocol::Direction::Reverse => "reverse",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.cut,
            self.l_eff,
            self.c2,
            self.c2_sigma,
            r.ln_ratio,
            r.sigma,
            r.sigma_gamma,
            r.ess,
            r.ess_sigma,
            r.n,
            r.cost(),
            self.kl,
            r.method.tag(),
            direction,
            c.action.kappa,
            c.action.lambda,
            g.dim,
            g.extent_t,
            g.extent_x,
            g.n_replicas,
            c.estimate.boundary.tag(),
            c.estimate.abscissa.tag(),
        )
    }
}

/// Concatenates the data rows of CSVs sharing one header, tagging each row
/// with its source file.
pub fn merge_csvs(inputs: &[PathBuf], mut out: impl Write) -> Result<usize> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("report needs at least one CSV".into()));
    }
    let mut header: Option<String> = None;
    let mut rows = 0;
    for path in inputs {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let h = lines.next().ok_or_else(|| Error::Format(format!("{} has no header", path.display())))?;
        match &header {
            None => {
                writeln!(out, "{h},source")?;
                header = Some(h.to_string());
            }
            Some(prev) if prev != h => {
                return Err(Error::Format(format!("{} has a different header", path.display())));
            }
            Some(_) => {}
        }
        for l in lines {
            writeln!(out, "{l},{}", path.display())?;
            rows += 1;
        }
    }
    Ok(rows)
}

/// Runs one command; `env` supplies the `RFLOW_*` overrides. Returns the
/// summary printed on stdout.
pub fn run(args: Vec<String>, env: Vec<(String, String)>) -> Result<serde_json::Value> {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(std::io::stdout(), "{e}");
            return Ok(serde_json::Value::Null);
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    if let Some(n) = cli.threads {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let flags: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let cfg = RunConfig::resolve(text.as_deref(), env, flags)?;
    if let Command::Report { inputs, output } = cli.command {
        return match output {
            Some(p) => {
                let rows = merge_csvs(&inputs, BufWriter::new(File::create(&p)?))?;
                Ok(json!({ "report": p, "rows": rows }))
            }
            None => {
                let rows = merge_csvs(&inputs, std::io::stdout().lock())?;
                Ok(json!({ "rows": rows }))
            }
        };
    }
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Prior => run.prior(),
        Command::Train => run.train(),
        Command::Sample => run.sample(),
        Command::Estimate { records } => run.estimate(records),
        Command::Scan { axis, values } => run.scan(axis, values),
        Command::Oracle { nodes } => run.oracle(nodes),
        Command::Report { .. } => unreachable!(),
    }
}

/// Machine-readable error report for stderr.
pub fn error_json(e: &Error) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}
