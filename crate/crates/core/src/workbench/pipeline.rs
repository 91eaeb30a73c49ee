//! Stage runner. Every stage reads the artifacts of earlier stages from the
//! run directory, writes its own, and records a manifest with checksums of
//! both.
//!
//! Layout under the run directory:
//!
//! ```text
//! data/       source.json, corpus.txt
//! ckpt/       base.ckpt, sampler.ckpt
//! traj/       trajectories.jsonl, heldout.jsonl, train_samples.jsonl, heldout_samples.jsonl
//! traces/     <procedure>_k<K>_t<T>_<policy>.jsonl
//! metrics/    base_train.csv, sampler_train.csv, sampler_epochs.csv, sample_counters.csv,
//!             evaluation.csv, evaluation.json, kl_at_k.csv, summary.txt,
//!             throughput.csv, wall_time.csv
//! manifests/  <stage>.json
//! ```

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjust::{AdjustNet, JointSampler};
use crate::decoding::{decode_batch, write_traces, DecodeTrace, Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    benchmark, conditional_kl, nll_terms, sample_reference, tv_terms, write_long_csv, write_summary,
    BenchmarkConfig, Estimate, KlAtK, LongRow, ReferenceSample,
};
use crate::model::{train_base, Denoiser, NeuralDenoiser, TokenString};
use crate::numerics::RngStream;
use crate::training::{
    build_samples, harvest_trajectories, read_samples, train_sampler, write_metrics_csv,
    write_samples, write_trajectories, TrajectorySample,
};
use crate::workbench::checkpoint::{read_base, read_sampler, write_base, write_sampler};
use crate::workbench::{ExperimentConfig, SyntheticSource};

pub const SOURCE_FILE: &str = "data/source.json";
pub const CORPUS_FILE: &str = "data/corpus.txt";
pub const BASE_CKPT: &str = "ckpt/base.ckpt";
pub const SAMPLER_CKPT: &str = "ckpt/sampler.ckpt";
pub const TRAJECTORIES_FILE: &str = "traj/trajectories.jsonl";
pub const HELDOUT_FILE: &str = "traj/heldout.jsonl";
pub const TRAIN_SAMPLES_FILE: &str = "traj/train_samples.jsonl";
pub const HELDOUT_SAMPLES_FILE: &str = "traj/heldout_samples.jsonl";
pub const BASE_METRICS: &str = "metrics/base_train.csv";
pub const SAMPLER_METRICS: &str = "metrics/sampler_train.csv";
pub const SAMPLER_EPOCHS: &str = "metrics/sampler_epochs.csv";
pub const SAMPLE_COUNTERS: &str = "metrics/sample_counters.csv";
pub const EVALUATION_CSV: &str = "metrics/evaluation.csv";
pub const EVALUATION_JSON: &str = "metrics/evaluation.json";
pub const KL_CSV: &str = "metrics/kl_at_k.csv";
pub const SUMMARY_FILE: &str = "metrics/summary.txt";
pub const THROUGHPUT_CSV: &str = "metrics/throughput.csv";
/// Wall-clock timings; the only output that is not reproducible.
pub const WALL_TIME_CSV: &str = "metrics/wall_time.csv";

// Random streams of the experiment seed. Decoding uses streams counted up
// from the offsets below; everything else uses fixed streams above them.
const STREAM_SOURCE: u64 = 1 << 60;
const STREAM_DATA: u64 = STREAM_SOURCE + 1;
const STREAM_BASE_INIT: u64 = STREAM_SOURCE + 2;
const STREAM_BASE_TRAIN: u64 = STREAM_SOURCE + 3;
const STREAM_TRAIN_CUTS: u64 = STREAM_SOURCE + 4;
const STREAM_HELDOUT_CUTS: u64 = STREAM_SOURCE + 5;
const STREAM_SAMPLER_INIT: u64 = STREAM_SOURCE + 6;
const DECODE_HARVEST: u64 = 0;
const DECODE_HELDOUT: u64 = 1 << 40;
const DECODE_SAMPLE: u64 = 2 << 40;
const DECODE_REFERENCE: u64 = 3 << 40;
const DECODE_NLL: u64 = 4 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBase,
    Harvest,
    TrainSampler,
    Sample,
    Evaluate,
    Benchmark,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::Harvest,
        Stage::TrainSampler,
        Stage::Sample,
        Stage::Evaluate,
        Stage::Benchmark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::Harvest => "harvest",
            Stage::TrainSampler => "train-sampler",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Benchmark => "benchmark",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Record of one stage run: enough to rerun it and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: Stage,
    pub version: String,
    /// Effective configuration, as TOML, with `out_dir` recorded as `.`.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative path → SHA-256 of each artifact read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → SHA-256 of each reproducible artifact written.
    pub outputs: BTreeMap<String, String>,
    /// Written but not reproducible (timings).
    pub unverified: Vec<String>,
}

pub fn version_string() -> String {
    match option_env!("DLMJOINT_DESCRIBE") {
        Some(v) => v.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-setting metrics from the `evaluate` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcedureMetrics {
    pub procedure: Procedure,
    pub config: SamplingConfig,
    /// Monte-Carlo TV to the one-token-at-a-time joint of the base model.
    pub tv: Option<Estimate>,
    /// Negative log-likelihood under the exact source.
    pub nll: Estimate,
    /// Fraction of decoded strings the source gives probability zero.
    pub off_support: f64,
    pub tokens_per_macro_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvGap {
    pub config: SamplingConfig,
    /// Paired estimate of `TV(parallel) − TV(adjust)`.
    pub parallel_minus_adjust: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub procedures: Vec<ProcedureMetrics>,
    pub tv_gaps: Vec<TvGap>,
    pub kl_at_k: Vec<KlAtK>,
}

impl EvaluationReport {
    pub fn find(&self, procedure: Procedure, cfg: &SamplingConfig) -> Option<&ProcedureMetrics> {
        self.procedures
            .iter()
            .find(|m| m.procedure == procedure && m.config == *cfg)
    }
}

/// Procedures run at a grid point: the exact joint at `K = 1`, parallel and
/// joint decoding above it.
pub fn procedures_for(k: usize) -> &'static [Procedure] {
    if k == 1 {
        &[Procedure::ExactJoint]
    } else {
        &[Procedure::Parallel, Procedure::Adjust]
    }
}

/// File stem for a grid point.
pub fn setting_label(procedure: Procedure, cfg: &SamplingConfig) -> String {
    format!(
        "{}_k{}_t{}_{}",
        procedure.name(),
        cfg.k,
        cfg.temperature,
        cfg.policy.name()
    )
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    config_text: String,
    root: PathBuf,
}

struct StageOutput {
    inputs: Vec<&'static str>,
    outputs: Vec<String>,
    unverified: Vec<String>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        // Recorded without the run directory so a run can be moved or replayed elsewhere.
        let config_text = ExperimentConfig {
            out_dir: PathBuf::from("."),
            ..cfg.clone()
        }
        .to_toml()?;
        let root = cfg.out_dir.clone();
        Ok(Pipeline {
            cfg,
            config_text,
            root,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    /// Runs one stage and writes its manifest.
    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        let out = match stage {
            Stage::GenData => self.gen_data()?,
            Stage::TrainBase => self.train_base()?,
            Stage::Harvest => self.harvest()?,
            Stage::TrainSampler => self.train_sampler()?,
            Stage::Sample => self.sample()?,
            Stage::Evaluate => self.evaluate()?.1,
            Stage::Benchmark => self.benchmark()?,
        };
        let hash_all = |paths: Vec<String>| -> Result<BTreeMap<String, String>> {
            paths
                .into_iter()
                .map(|p| {
                    let full = self.path(&p);
                    let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
                    Ok((p, sha256_hex(&bytes)))
                })
                .collect()
        };
        let manifest = Manifest {
            stage,
            version: version_string(),
            config: self.config_text.clone(),
            config_hash: sha256_hex(self.config_text.as_bytes()),
            seed: self.cfg.seed,
            inputs: hash_all(out.inputs.iter().map(|s| s.to_string()).collect())?,
            outputs: hash_all(out.outputs)?,
            unverified: out.unverified,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        self.write_text(&format!("manifests/{}.json", stage.name()), &(text + "\n"))?;
        Ok(manifest)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    /// The stage's manifest, if it was written by this version under this
    /// configuration and every recorded file still has its checksum.
    pub fn current_manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let m = read_manifest(&path)?;
        if m.config != self.config_text || m.version != version_string() {
            return Ok(None);
        }
        for (rel, hash) in m.inputs.iter().chain(&m.outputs) {
            match fs::read(self.path(rel)) {
                Ok(bytes) if sha256_hex(&bytes) == *hash => {}
                _ => return Ok(None),
            }
        }
        Ok(Some(m))
    }

    /// Runs the stage unless it is already current.
    pub fn ensure(&self, stage: Stage) -> Result<(Manifest, bool)> {
        match self.current_manifest(stage)? {
            Some(m) => Ok((m, false)),
            None => Ok((self.run(stage)?, true)),
        }
    }

    fn create(&self, rel: &str) -> Result<BufWriter<fs::File>> {
        let full = self.path(rel);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = fs::File::create(&full).map_err(|e| Error::io(&full, e))?;
        Ok(BufWriter::new(f))
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let mut w = self.create(rel)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(self.path(rel), e))
    }

    fn open(&self, rel: &str, stage: Stage) -> Result<BufReader<fs::File>> {
        let full = self.path(rel);
        if !full.exists() {
            return Err(Error::MissingArtifact {
                path: full,
                stage: stage.name(),
            });
        }
        let f = fs::File::open(&full).map_err(|e| Error::io(&full, e))?;
        Ok(BufReader::new(f))
    }

    pub fn load_source(&self) -> Result<SyntheticSource> {
        let src: SyntheticSource = serde_json::from_reader(self.open(SOURCE_FILE, Stage::GenData)?)
            .map_err(|e| Error::Format(format!("{SOURCE_FILE}: {e}")))?;
        src.validate()?;
        Ok(src)
    }

    pub fn load_corpus(&self, src: &SyntheticSource) -> Result<Vec<TokenString>> {
        use std::io::BufRead;
        let vocab = src.vocab();
        let mut out = Vec::new();
        for line in self.open(CORPUS_FILE, Stage::GenData)?.lines() {
            let line = line.map_err(|e| Error::io(self.path(CORPUS_FILE), e))?;
            let tokens = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| Error::Format(format!("{CORPUS_FILE}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let x = TokenString::new(tokens, &vocab)?;
            if !x.is_complete() {
                return Err(Error::Format(format!("{CORPUS_FILE}: mask token in corpus")));
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn load_base(&self) -> Result<Arc<NeuralDenoiser>> {
        Ok(Arc::new(read_base(&self.path(BASE_CKPT))?))
    }

    pub fn load_sampler(&self, base: Arc<NeuralDenoiser>) -> Result<AdjustNet> {
        read_sampler(&self.path(SAMPLER_CKPT), base)
    }

    fn load_samples(&self, rel: &str) -> Result<Vec<TrajectorySample>> {
        read_samples(self.open(rel, Stage::Harvest)?)
    }

    fn stream(&self, id: u64) -> RngStream {
        RngStream::new(self.cfg.seed, id)
    }

    fn prompt(&self, base: &NeuralDenoiser) -> TokenString {
        TokenString::all_masked(base.max_len(), base.vocab())
    }

    fn gen_data(&self) -> Result<StageOutput> {
        let src = self.cfg.source.build(&mut self.stream(STREAM_SOURCE))?;
        let text = serde_json::to_string_pretty(&src).map_err(|e| Error::Format(e.to_string()))?;
        self.write_text(SOURCE_FILE, &(text + "\n"))?;
        let mut rng = self.stream(STREAM_DATA);
        let mut w = self.create(CORPUS_FILE)?;
        for _ in 0..self.cfg.data.n_strings {
            let x = src.sample(&mut rng)?;
            let line: Vec<String> = x.tokens().iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(self.path(CORPUS_FILE), e))?;
        }
        w.flush().map_err(|e| Error::io(self.path(CORPUS_FILE), e))?;
        Ok(StageOutput {
            inputs: vec![],
            outputs: vec![SOURCE_FILE.into(), CORPUS_FILE.into()],
            unverified: vec![],
        })
    }

    fn train_base(&self) -> Result<StageOutput> {
        let src = self.load_source()?;
        let corpus = self.load_corpus(&src)?;
        let init = NeuralDenoiser::new(src.vocab(), self.cfg.dims(src.len()), &mut self.stream(STREAM_BASE_INIT))?;
        let (model, report) = train_base(&init, &corpus, &self.cfg.base_training, &mut self.stream(STREAM_BASE_TRAIN))?;
        write_base(&self.path(BASE_CKPT), &model)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in report.losses.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", i + 1, l));
        }
        self.write_text(BASE_METRICS, &csv)?;
        Ok(StageOutput {
            inputs: vec![SOURCE_FILE, CORPUS_FILE],
            outputs: vec![BASE_CKPT.into(), BASE_METRICS.into()],
            unverified: vec![],
        })
    }

    fn harvest(&self) -> Result<StageOutput> {
        let base = self.load_base()?;
        let prompt = self.prompt(&base);
        let cfg = SamplingConfig {
            seed: self.cfg.seed,
            ..SamplingConfig::default()
        };
        let h = &self.cfg.harvest;
        let k = self.cfg.sampler_training.k;
        let train = harvest_trajectories(base.as_ref(), &prompt, h.trajectories, &cfg, DECODE_HARVEST)?;
        let held = harvest_trajectories(base.as_ref(), &prompt, h.heldout_trajectories, &cfg, DECODE_HELDOUT)?;
        let (train_s, _) = build_samples(&train, k, h.samples_per_trace, &mut self.stream(STREAM_TRAIN_CUTS))?;
        let (held_s, _) = build_samples(&held, k, h.samples_per_trace, &mut self.stream(STREAM_HELDOUT_CUTS))?;
        if train_s.is_empty() || held_s.is_empty() {
            return Err(Error::Config(format!(
                "harvest: strings of length {} are too short for k = {k}",
                prompt.len()
            )));
        }
        write_trajectories(self.create(TRAJECTORIES_FILE)?, &train)?;
        write_trajectories(self.create(HELDOUT_FILE)?, &held)?;
        write_samples(self.create(TRAIN_SAMPLES_FILE)?, &train_s)?;
        write_samples(self.create(HELDOUT_SAMPLES_FILE)?, &held_s)?;
        Ok(StageOutput {
            inputs: vec![BASE_CKPT],
            outputs: vec![
                TRAJECTORIES_FILE.into(),
                HELDOUT_FILE.into(),
                TRAIN_SAMPLES_FILE.into(),
                HELDOUT_SAMPLES_FILE.into(),
            ],
            unverified: vec![],
        })
    }

    fn train_sampler(&self) -> Result<StageOutput> {
        let base = self.load_base()?;
        let samples = self.load_samples(TRAIN_SAMPLES_FILE)?;
        let g0 = AdjustNet::new(base, &mut self.stream(STREAM_SAMPLER_INIT))?;
        let (g, hist) = train_sampler(&g0, &samples, &self.cfg.train_config())?;
        write_sampler(&self.path(SAMPLER_CKPT), &g)?;
        write_metrics_csv(self.create(SAMPLER_METRICS)?, &hist.steps)?;
        write_metrics_csv(self.create(SAMPLER_EPOCHS)?, &hist.epochs)?;
        Ok(StageOutput {
            inputs: vec![BASE_CKPT, TRAIN_SAMPLES_FILE],
            outputs: vec![SAMPLER_CKPT.into(), SAMPLER_METRICS.into(), SAMPLER_EPOCHS.into()],
            unverified: vec![],
        })
    }

    fn decode(
        &self,
        procedure: Procedure,
        base: &NeuralDenoiser,
        g: &AdjustNet,
        cfg: &SamplingConfig,
        n: usize,
        first_stream: u64,
    ) -> Result<Vec<(TokenString, DecodeTrace)>> {
        let starts = vec![self.prompt(base); n];
        let g: Option<&dyn JointSampler> = (procedure == Procedure::Adjust).then_some(g as &dyn JointSampler);
        decode_batch(procedure, base, g, &starts, cfg, first_stream, false)
    }

    fn sample(&self) -> Result<StageOutput> {
        let base = self.load_base()?;
        let g = self.load_sampler(base.clone())?;
        let mut outputs = Vec::new();
        let mut csv = String::from(
            "procedure,K,temperature,policy,strings,tokens,base_forwards,sampler_forwards,layer_pass_equivalents,cost_model_holds\n",
        );
        let blocks = base.layer_count();
        for cfg in self.cfg.sampling_configs() {
            for &procedure in procedures_for(cfg.k) {
                let runs = self.decode(procedure, &base, &g, &cfg, self.cfg.sampling.n_samples, DECODE_SAMPLE)?;
                let traces: Vec<DecodeTrace> = runs.into_iter().map(|(_, t)| t).collect();
                let rel = format!("traces/{}.jsonl", setting_label(procedure, &cfg));
                write_traces(self.create(&rel)?, &traces)?;
                outputs.push(rel);
                let (mut tokens, mut bf, mut sf, mut holds) = (0, 0, 0, true);
                for t in &traces {
                    let masks = t.initial.mask_count();
                    let want_base = masks.div_ceil(cfg.k);
                    let want_sampler = if procedure == Procedure::Adjust { masks - want_base } else { 0 };
                    holds &= t.base_forward_count == want_base && t.sampler_forward_count == want_sampler;
                    tokens += t.events.len();
                    bf += t.base_forward_count;
                    sf += t.sampler_forward_count;
                }
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    procedure.name(),
                    cfg.k,
                    cfg.temperature,
                    cfg.policy.name(),
                    traces.len(),
                    tokens,
                    bf,
                    sf,
                    bf * blocks + sf,
                    holds
                ));
            }
        }
        self.write_text(SAMPLE_COUNTERS, &csv)?;
        outputs.push(SAMPLE_COUNTERS.into());
        Ok(StageOutput {
            inputs: vec![BASE_CKPT, SAMPLER_CKPT],
            outputs,
            unverified: vec![],
        })
    }

    /// Runs the `evaluate` stage computation and returns its report.
    pub fn evaluate_report(&self) -> Result<EvaluationReport> {
        Ok(self.evaluate()?.0)
    }

    fn evaluate(&self) -> Result<(EvaluationReport, StageOutput)> {
        let src = self.load_source()?;
        let base = self.load_base()?;
        let g = self.load_sampler(base.clone())?;
        let held = self.load_samples(HELDOUT_SAMPLES_FILE)?;
        let prompt = self.prompt(&base);
        let e = &self.cfg.evaluation;

        let mut references: HashMap<(u64, u64, &'static str), Vec<ReferenceSample>> = HashMap::new();
        let mut report = EvaluationReport {
            procedures: Vec::new(),
            tv_gaps: Vec::new(),
            kl_at_k: Vec::new(),
        };
        for cfg in self.cfg.sampling_configs() {
            let mut terms: Vec<(Procedure, Vec<f64>)> = Vec::new();
            if cfg.k > 1 && !cfg.policy.is_random() {
                let key = (cfg.temperature.to_bits(), cfg.top_p.to_bits(), cfg.policy.name());
                if let Entry::Vacant(slot) = references.entry(key) {
                    slot.insert(sample_reference(base.as_ref(), &prompt, &cfg, e.tv_samples, DECODE_REFERENCE)?);
                }
                let reference = &references[&key];
                for &procedure in procedures_for(cfg.k) {
                    let gs: Option<&dyn JointSampler> = (procedure == Procedure::Adjust).then_some(&g as &dyn JointSampler);
                    terms.push((procedure, tv_terms(procedure, base.as_ref(), gs, &prompt, &cfg, reference)?));
                }
                report.tv_gaps.push(TvGap {
                    config: cfg.clone(),
                    parallel_minus_adjust: Estimate::paired_difference(&terms[0].1, &terms[1].1)?,
                });
            }
            for &procedure in procedures_for(cfg.k) {
                let runs = self.decode(procedure, &base, &g, &cfg, e.nll_samples, DECODE_NLL)?;
                let strings: Vec<TokenString> = runs.iter().map(|(x, _)| x.clone()).collect();
                let off = strings.iter().filter(|x| src.probability(x) == 0.0).count();
                let tokens: usize = runs.iter().map(|(_, t)| t.events.len()).sum();
                let forwards: usize = runs.iter().map(|(_, t)| t.base_forward_count).sum();
                let tv = if cfg.k == 1 {
                    // The reference procedure itself.
                    Some(Estimate {
                        mean: 0.0,
                        std_err: 0.0,
                        n: e.tv_samples,
                    })
                } else {
                    terms
                        .iter()
                        .find(|(p, _)| *p == procedure)
                        .map(|(_, t)| Estimate::from_values(t))
                };
                report.procedures.push(ProcedureMetrics {
                    procedure,
                    config: cfg.clone(),
                    tv,
                    nll: Estimate::from_values(&nll_terms(&src, &strings)),
                    off_support: off as f64 / strings.len() as f64,
                    tokens_per_macro_step: tokens as f64 / forwards as f64,
                });
            }
        }
        let kmax = self.cfg.sampler_training.k - 1;
        report.kl_at_k = conditional_kl(base.as_ref(), &g, &held, kmax, self.cfg.sampler_training.loss_positions)?;
        self.write_evaluation(&report, &src)?;
        Ok((
            report,
            StageOutput {
                inputs: vec![SOURCE_FILE, BASE_CKPT, SAMPLER_CKPT, HELDOUT_SAMPLES_FILE],
                outputs: vec![
                    EVALUATION_CSV.into(),
                    EVALUATION_JSON.into(),
                    KL_CSV.into(),
                    SUMMARY_FILE.into(),
                ],
                unverified: vec![],
            },
        ))
    }

    fn write_evaluation(&self, report: &EvaluationReport, src: &SyntheticSource) -> Result<()> {
        let s = &self.cfg.sampling;
        let tagged = s.temperatures.len() > 1 || s.policies.len() > 1;
        let metric = |name: &str, cfg: &SamplingConfig| {
            if tagged {
                format!("{name}[t={};policy={}]", cfg.temperature, cfg.policy.name())
            } else {
                name.to_string()
            }
        };
        let mut rows = Vec::new();
        let mut summary = vec![
            ("experiment".to_string(), self.cfg.name.clone()),
            ("seed".to_string(), self.cfg.seed.to_string()),
            ("source_entropy".to_string(), src.entropy().to_string()),
            (
                "tv_definition".to_string(),
                "Monte-Carlo total variation to the base model's one-token-per-step joint".to_string(),
            ),
        ];
        for m in &report.procedures {
            let mut push = |name: &str, value: f64| {
                rows.push(LongRow {
                    procedure: m.procedure.name().into(),
                    k: m.config.k,
                    metric: metric(name, &m.config),
                    value,
                })
            };
            if let Some(tv) = &m.tv {
                push("tv", tv.mean);
                push("tv_stderr", tv.std_err);
            }
            push("nll", m.nll.mean);
            push("nll_stderr", m.nll.std_err);
            push("off_support", m.off_support);
            push("tokens_per_macro_step", m.tokens_per_macro_step);
            let key = format!("{}.{}", setting_label(m.procedure, &m.config), "nll");
            summary.push((key, format!("{} ± {}", m.nll.mean, m.nll.std_err)));
            if let Some(tv) = &m.tv {
                let key = format!("{}.{}", setting_label(m.procedure, &m.config), "tv");
                summary.push((key, format!("{} ± {}", tv.mean, tv.std_err)));
            }
        }
        for gap in &report.tv_gaps {
            let e = &gap.parallel_minus_adjust;
            for (name, value) in [("tv_gap", e.mean), ("tv_gap_stderr", e.std_err), ("tv_gap_z", e.z_score())] {
                rows.push(LongRow {
                    procedure: "parallel_minus_adjust".into(),
                    k: gap.config.k,
                    metric: metric(name, &gap.config),
                    value,
                });
            }
            summary.push((
                format!("tv_gap_k{}_t{}_{}", gap.config.k, gap.config.temperature, gap.config.policy.name()),
                format!("{} (z = {})", e.mean, e.z_score()),
            ));
        }
        write_long_csv(self.create(EVALUATION_CSV)?, &rows)?;

        let mut kl = String::from("k,joint,marginal\n");
        for r in &report.kl_at_k {
            kl.push_str(&format!("{},{},{}\n", r.k, r.joint, r.marginal));
            summary.push((format!("kl_at_{}", r.k), format!("joint {} marginal {}", r.joint, r.marginal)));
        }
        self.write_text(KL_CSV, &kl)?;
        let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
        self.write_text(EVALUATION_JSON, &(json + "\n"))?;
        write_summary(self.create(SUMMARY_FILE)?, &summary)
    }

    fn benchmark(&self) -> Result<StageOutput> {
        let base = self.load_base()?;
        let g = self.load_sampler(base.clone())?;
        let prompt = self.prompt(&base);
        let b = &self.cfg.benchmark;
        let bench = BenchmarkConfig {
            warmup: b.warmup,
            repetitions: b.repetitions,
        };
        let mut counters = String::from(
            "procedure,K,temperature,policy,strings,blocks,tokens,base_forwards,sampler_forwards,tokens_per_macro_step,layer_pass_equivalents,cost_vs_parallel\n",
        );
        let mut times = String::from("procedure,K,temperature,policy,wall_time_s,tokens_per_second\n");
        for cfg in self.cfg.sampling_configs() {
            let mut parallel_cost = None;
            for &procedure in procedures_for(cfg.k) {
                let gs: Option<&dyn JointSampler> = (procedure == Procedure::Adjust).then_some(&g as &dyn JointSampler);
                let r = benchmark(procedure, base.as_ref(), gs, &prompt, &cfg, b.n_strings, &bench)?;
                if procedure != Procedure::Adjust {
                    parallel_cost = Some(r.layer_pass_equivalents);
                }
                let ratio = parallel_cost.map(|p| r.layer_pass_equivalents as f64 / p as f64).unwrap_or(f64::NAN);
                counters.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    procedure.name(),
                    cfg.k,
                    cfg.temperature,
                    cfg.policy.name(),
                    r.n_strings,
                    r.blocks,
                    r.tokens_generated,
                    r.base_forwards,
                    r.sampler_forwards,
                    r.tokens_per_macro_step,
                    r.layer_pass_equivalents,
                    ratio
                ));
                times.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    procedure.name(),
                    cfg.k,
                    cfg.temperature,
                    cfg.policy.name(),
                    r.wall_time,
                    r.tokens_per_second
                ));
            }
        }
        self.write_text(THROUGHPUT_CSV, &counters)?;
        self.write_text(WALL_TIME_CSV, &times)?;
        Ok(StageOutput {
            inputs: vec![BASE_CKPT, SAMPLER_CKPT],
            outputs: vec![THROUGHPUT_CSV.into()],
            unverified: vec![WALL_TIME_CSV.into()],
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reruns every stage up to the manifest's stage into `out_dir` using only
/// the manifest, then checks each recorded output checksum.
pub fn replay(manifest: &Manifest, out_dir: &Path) -> Result<Manifest> {
    if sha256_hex(manifest.config.as_bytes()) != manifest.config_hash {
        return Err(Error::ReplayMismatch {
            event: 0,
            detail: "manifest config does not match its hash".into(),
        });
    }
    let mut cfg = crate::workbench::parse_config(&manifest.config)?;
    cfg.out_dir = out_dir.to_path_buf();
    let p = Pipeline::new(cfg)?;
    let mut last = None;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= manifest.stage) {
        last = Some(p.run(stage)?);
    }
    let last = last.expect("at least one stage");
    for (i, (path, hash)) in manifest.outputs.iter().enumerate() {
        match last.outputs.get(path) {
            Some(h) if h == hash => {}
            Some(h) => {
                return Err(Error::ReplayMismatch {
                    event: i,
                    detail: format!("{path}: checksum {h}, manifest has {hash}"),
                })
            }
            None => {
                return Err(Error::ReplayMismatch {
                    event: i,
                    detail: format!("{path} was not produced"),
                })
            }
        }
    }
    Ok(last)
}
