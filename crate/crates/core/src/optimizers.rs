//! Prompt optimization strategies and the objective they maximize.
//!
//! All four methods start from [`Prompt::base`] and track the best prompt by
//! strict improvement, so the earliest of equally scored candidates wins.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{sample_items, split, Corpus, DatasetError, Exemplar, SampleMode};
use crate::llmclient::{CompletionRequest, LlmClient, LlmError, PROPOSER_TEMPERATURE};
use crate::prompts::{
    parse_proposal, render_instruction_proposal, render_proposer, Prompt, ProposerContext,
    DEFAULT_INSTRUCTION, FORMAT_REMINDER,
};
use crate::rng::{child_seed, substream};
use crate::smbo::{Sampler, SmboError, Study, TpeConfig};
use crate::sqlharness::{score_prompt, EvalReport, HarnessError, LatencyOptions, ScoreOptions};

#[derive(Debug, thiserror::Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("evaluation of trial {index} failed: {source}")]
    Trial {
        index: usize,
        #[source]
        source: HarnessError,
    },
    #[error("final evaluation failed: {0}")]
    Eval(#[source] HarnessError),
    #[error("proposer call in iteration {iteration} failed: {source}")]
    Proposer {
        iteration: usize,
        #[source]
        source: LlmError,
    },
    #[error("latency objective needs latency statistics in the report")]
    MissingLatency,
    #[error("no instruction-exemplar pair survived bootstrapping")]
    NoPairs,
    #[error(transparent)]
    Smbo(#[from] SmboError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Res,
    Ores,
    Joint,
    Ipo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Res => "res",
            Self::Ores => "ores",
            Self::Joint => "joint",
            Self::Ipo => "ipo",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "res" => Ok(Self::Res),
            "ores" => Ok(Self::Ores),
            "joint" | "mipro" => Ok(Self::Joint),
            "ipo" => Ok(Self::Ipo),
            other => Err(format!(
                "unknown method {other:?} (expected res, ores, joint or ipo)"
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    AccuracyOnly,
    AccuracyLatency,
}

impl FromStr for ObjectiveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "acc" | "accuracy" | "accuracy_only" => Ok(Self::AccuracyOnly),
            "acc+lat" | "accuracy_latency" => Ok(Self::AccuracyLatency),
            other => Err(format!(
                "unknown objective {other:?} (expected acc or acc+lat)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSpec {
    pub mode: ObjectiveMode,
    pub latency_weight: f64,
    /// Seconds; mean latencies at or above it incur the full penalty.
    pub latency_normalizer: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::AccuracyOnly,
            latency_weight: 0.2,
            latency_normalizer: 10.0,
        }
    }
}

impl ObjectiveSpec {
    pub fn accuracy_latency(latency_weight: f64, latency_normalizer: f64) -> Self {
        Self {
            mode: ObjectiveMode::AccuracyLatency,
            latency_weight,
            latency_normalizer,
        }
    }
}

/// `accuracy`, or `accuracy - λ·min(mean / normalizer, 1)` in latency mode.
///
/// The mean is [`EvalReport::latency_objective_mean`] when present (wrong
/// predictions charged the cap), else the pooled latency mean.
pub fn objective_score(report: &EvalReport, spec: &ObjectiveSpec) -> Result<f64, OptimizeError> {
    match spec.mode {
        ObjectiveMode::AccuracyOnly => Ok(report.accuracy),
        ObjectiveMode::AccuracyLatency => {
            let mean = report
                .latency_objective_mean
                .or(report.latency.map(|l| l.mean))
                .ok_or(OptimizeError::MissingLatency)?;
            Ok(penalized(report.accuracy, mean, spec))
        }
    }
}

pub fn penalized(accuracy: f64, mean_latency: f64, spec: &ObjectiveSpec) -> f64 {
    let normalized = if spec.latency_normalizer > 0.0 {
        (mean_latency / spec.latency_normalizer).min(1.0)
    } else {
        1.0
    };
    accuracy - spec.latency_weight * normalized.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub method: Method,
    pub num_trials: usize,
    pub num_iterations: usize,
    pub k_fixed: usize,
    /// Upper bound K for the ORES exemplar count; `None` means `min(100, |train|)`.
    pub k_max: Option<usize>,
    pub res_restarts: usize,
    pub valid_fraction: f64,
    pub valid_sample_size: usize,
    pub min_proposed_exemplars: usize,
    pub joint_pairs: usize,
    pub joint_set_size: usize,
    pub tpe: TpeConfig,
    pub objective: ObjectiveSpec,
    pub eval: ScoreOptions,
    pub proposer_model_id: String,
    pub proposer_temperature: f64,
    pub proposer_max_tokens: u32,
    pub seed: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            method: Method::Ores,
            num_trials: 20,
            num_iterations: 5,
            k_fixed: 10,
            k_max: None,
            res_restarts: 10,
            valid_fraction: 0.2,
            valid_sample_size: 30,
            min_proposed_exemplars: 5,
            joint_pairs: 10,
            joint_set_size: 10,
            tpe: TpeConfig::default(),
            objective: ObjectiveSpec::default(),
            eval: ScoreOptions::default(),
            proposer_model_id: "gpt-4o".into(),
            proposer_temperature: PROPOSER_TEMPERATURE,
            proposer_max_tokens: 4096,
            seed: 0,
        }
    }
}

impl OptimizationConfig {
    /// Evaluation options with latency measurement switched on when the
    /// objective needs it.
    pub fn score_options(&self) -> ScoreOptions {
        let mut opts = self.eval.clone();
        if self.objective.mode == ObjectiveMode::AccuracyLatency {
            opts.latency.get_or_insert_with(LatencyOptions::default);
        }
        opts.latency_cap = self.objective.latency_normalizer;
        opts
    }

    fn proposer_request(&self, text: String) -> CompletionRequest {
        CompletionRequest {
            prompt_text: text,
            temperature: self.proposer_temperature,
            max_output_tokens: self.proposer_max_tokens,
            model_id: self.proposer_model_id.clone(),
            tag: "proposer".into(),
        }
    }
}

/// One trial, restart or iteration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// True when this record became the new best.
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Prompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

impl IterationRecord {
    fn evaluated(
        index: usize,
        candidate: &Prompt,
        report: EvalReport,
        score: f64,
        accepted: bool,
    ) -> Self {
        Self {
            index,
            candidate: Some(candidate.clone()),
            params: BTreeMap::new(),
            accuracy: Some(report.accuracy),
            score: Some(score),
            accepted,
            note: None,
            report: Some(report),
        }
    }

    fn skipped(index: usize, note: String) -> Self {
        Self {
            index,
            params: BTreeMap::new(),
            accuracy: None,
            score: None,
            accepted: false,
            note: Some(note),
            candidate: None,
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationOutcome {
    pub prompt: Prompt,
    /// Evaluation of the returned prompt on the validation split.
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<Study>,
    pub iterations: Vec<IterationRecord>,
    /// Seconds spent in the whole run.
    pub wall_time: f64,
}

struct BestTracker {
    prompt: Prompt,
    score: f64,
    accuracy: f64,
    report: Option<EvalReport>,
    history: Vec<f64>,
    origin: Option<usize>,
}

impl BestTracker {
    fn new(base: Prompt) -> Self {
        Self {
            prompt: base,
            score: 0.0,
            accuracy: 0.0,
            report: None,
            history: Vec::new(),
            origin: None,
        }
    }

    fn offer(&mut self, index: usize, prompt: &Prompt, report: &EvalReport, score: f64) -> bool {
        if score > self.score {
            self.prompt = prompt.clone();
            self.score = score;
            self.accuracy = report.accuracy;
            self.report = Some(report.clone());
            self.history.push(score);
            self.origin = Some(index);
            true
        } else {
            false
        }
    }

    fn finish(
        mut self,
        method: Method,
        count_trials: Option<usize>,
        count_iters: Option<usize>,
    ) -> Prompt {
        let meta = &mut self.prompt.metadata;
        meta.method = method.as_str().into();
        meta.created_by_iteration = self.origin;
        meta.score_history = self.history;
        meta.trials = count_trials;
        meta.iterations = count_iters;
        meta.best_score = Some(self.score);
        self.prompt.metadata.est_tokens = Some(self.prompt.est_tokens());
        self.prompt
    }
}

/// Evaluates every candidate on `valid`. Returns the index of the first
/// candidate with the highest objective score, with all reports and scores.
pub fn evaluate_candidates(
    candidates: &[Prompt],
    valid: &Corpus,
    llm: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<(usize, Vec<(EvalReport, f64)>), OptimizeError> {
    if candidates.is_empty() {
        return Err(OptimizeError::Config("no candidates to evaluate".into()));
    }
    let opts = cfg.score_options();
    let mut out: Vec<(EvalReport, f64)> = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for (i, p) in candidates.iter().enumerate() {
        let report = score_prompt(llm, p, valid, &opts)
            .map_err(|source| OptimizeError::Trial { index: i, source })?;
        let score = objective_score(&report, &cfg.objective)?;
        if i > 0 && score > out[best].1 {
            best = i;
        }
        out.push((report, score));
    }
    Ok((best, out))
}

/// Best of `res_restarts` uniform samples of `k_fixed` exemplars.
pub fn run_res(
    train: &Corpus,
    valid: &Corpus,
    llm: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    let start = Instant::now();
    if train.is_empty() || valid.is_empty() {
        return Err(OptimizeError::Config(
            "RES needs non-empty train and validation sets".into(),
        ));
    }
    if cfg.res_restarts == 0 {
        return Err(OptimizeError::Config(
            "res_restarts must be at least 1".into(),
        ));
    }
    let opts = cfg.score_options();
    let mut study = Study::new(Sampler::Random);
    let mut records = Vec::with_capacity(cfg.res_restarts);
    let mut best: Option<(Prompt, EvalReport, f64, usize)> = None;
    let mut history = Vec::new();
    for r in 0..cfg.res_restarts {
        let sample = sample_items(
            &train.items,
            cfg.k_fixed,
            child_seed(cfg.seed, "res.restart", r as u64),
            SampleMode::Uniform,
        )?;
        let candidate = Prompt::new(DEFAULT_INSTRUCTION, sample);
        let report = score_prompt(llm, &candidate, valid, &opts)
            .map_err(|source| OptimizeError::Trial { index: r, source })?;
        let score = objective_score(&report, &cfg.objective)?;
        let params = BTreeMap::from([("restart".to_owned(), r as i64)]);
        study.add(params.clone(), score, question_ids(&candidate))?;
        let accepted = best.as_ref().is_none_or(|b| score > b.2);
        let mut rec = IterationRecord::evaluated(r, &candidate, report.clone(), score, accepted);
        if accepted {
            history.push(score);
            best = Some((candidate, report, score, r));
        }
        rec.params = params;
        log::info!(
            "res restart {r}: score {score:.4}{}",
            if accepted { " (best)" } else { "" }
        );
        records.push(rec);
    }
    let (mut prompt, report, score, origin) = best.expect("at least one restart");
    prompt.metadata.method = Method::Res.as_str().into();
    prompt.metadata.created_by_iteration = Some(origin);
    prompt.metadata.score_history = history;
    prompt.metadata.trials = Some(cfg.res_restarts);
    prompt.metadata.best_score = Some(score);
    prompt.metadata.est_tokens = Some(prompt.est_tokens());
    Ok(OptimizationOutcome {
        prompt,
        report,
        study: Some(study),
        iterations: records,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn question_ids(p: &Prompt) -> serde_json::Value {
    json!(p
        .exemplars
        .iter()
        .map(|e| e.question_id.as_str())
        .collect::<Vec<_>>())
}

/// Upper bound K for the exemplar count.
pub fn k_bound(cfg: &OptimizationConfig, train_len: usize) -> usize {
    cfg.k_max.unwrap_or(train_len.min(100))
}

/// Random exemplar selection with the exemplar count tuned by SMBO.
pub fn run_ores(
    corpus: &Corpus,
    llm: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    let start = Instant::now();
    let parts = split(corpus, cfg.valid_fraction, cfg.seed)?;
    let (train, valid) = (&parts.train, &parts.valid);
    let k_max = k_bound(cfg, train.len()) as i64;
    let opts = cfg.score_options();
    let mut study = Study::new(Sampler::Tpe(cfg.tpe));
    let mut rng = substream(cfg.seed, "ores.suggest");
    let mut best = BestTracker::new(Prompt::base());
    let mut records = Vec::with_capacity(cfg.num_trials);

    for i in 0..cfg.num_trials {
        let k = study.suggest_int("k", 0, k_max, &mut rng)?;
        let exemplars = sample_items(
            &train.items,
            k as usize,
            child_seed(cfg.seed, "ores.sample", i as u64),
            SampleMode::WithReplacement,
        )?;
        let candidate = Prompt::new(DEFAULT_INSTRUCTION, exemplars);
        let report = score_prompt(llm, &candidate, valid, &opts)
            .map_err(|source| OptimizeError::Trial { index: i, source })?;
        let score = objective_score(&report, &cfg.objective)?;
        let params = BTreeMap::from([("k".to_owned(), k)]);
        study.add(params.clone(), score, question_ids(&candidate))?;
        let accepted = best.offer(i, &candidate, &report, score);
        log::info!(
            "ores trial {i}: k={k} score {score:.4}{}",
            if accepted { " (best)" } else { "" }
        );
        let mut rec = IterationRecord::evaluated(i, &candidate, report, score, accepted);
        rec.params = params;
        records.push(rec);
    }

    let report = match best.report.take() {
        Some(r) => r,
        None => score_prompt(llm, &best.prompt, valid, &opts).map_err(OptimizeError::Eval)?,
    };
    Ok(OptimizationOutcome {
        prompt: best.finish(Method::Ores, Some(cfg.num_trials), None),
        report,
        study: Some(study),
        iterations: records,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Stage one of the joint optimizer: bootstraps `joint_pairs` exemplar sets
/// and asks the proposer for an instruction per set. Pairs whose
/// instruction cannot be obtained are skipped.
pub fn bootstrap_pairs(
    train: &Corpus,
    proposer: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<Vec<Prompt>, OptimizeError> {
    let size = cfg.joint_set_size.min(train.len());
    let mut pairs = Vec::with_capacity(cfg.joint_pairs);
    for n in 0..cfg.joint_pairs {
        let set = sample_items(
            &train.items,
            size,
            child_seed(cfg.seed, "joint.bootstrap", n as u64),
            SampleMode::Uniform,
        )?;
        let text = render_instruction_proposal(DEFAULT_INSTRUCTION, &set, set.len());
        let instruction = proposer
            .complete(&cfg.proposer_request(text))
            .map_err(|e| e.to_string())
            .and_then(|r| parse_proposal(&r.text).map_err(|e| e.to_string()));
        match instruction {
            Ok(p) => pairs.push(Prompt::new(p.instruction, set)),
            Err(e) => log::warn!("pair {n} skipped: {e}"),
        }
    }
    if pairs.is_empty() {
        return Err(OptimizeError::NoPairs);
    }
    Ok(pairs)
}

/// Stage two of the joint optimizer: SMBO over the pair index. Each pair is
/// evaluated at most once; repeated suggestions reuse the stored score.
pub fn select_pair(
    pairs: &[Prompt],
    valid: &Corpus,
    llm: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    let start = Instant::now();
    if pairs.is_empty() {
        return Err(OptimizeError::NoPairs);
    }
    if cfg.num_trials == 0 {
        return Err(OptimizeError::Config(
            "joint optimization needs at least one trial".into(),
        ));
    }
    let opts = cfg.score_options();
    let mut study = Study::new(Sampler::Tpe(cfg.tpe));
    let mut rng = substream(cfg.seed, "joint.suggest");
    let mut memo: BTreeMap<i64, (EvalReport, f64)> = BTreeMap::new();
    let mut best = BestTracker::new(pairs[0].clone());
    let mut records = Vec::with_capacity(cfg.num_trials);

    for i in 0..cfg.num_trials {
        let idx = study.suggest_int("pair", 0, pairs.len() as i64 - 1, &mut rng)?;
        let candidate = &pairs[idx as usize];
        let fresh = !memo.contains_key(&idx);
        if fresh {
            let report = score_prompt(llm, candidate, valid, &opts)
                .map_err(|source| OptimizeError::Trial { index: i, source })?;
            let score = objective_score(&report, &cfg.objective)?;
            memo.insert(idx, (report, score));
        }
        let (report, score) = memo[&idx].clone();
        let params = BTreeMap::from([("pair".to_owned(), idx)]);
        study.add(params.clone(), score, json!({ "pair": idx }))?;
        let accepted = best.offer(i, candidate, &report, score);
        log::info!(
            "joint trial {i}: pair {idx} score {score:.4}{}",
            if accepted { " (best)" } else { "" }
        );
        let mut rec = if fresh {
            IterationRecord::evaluated(i, candidate, report, score, accepted)
        } else {
            let mut r = IterationRecord::evaluated(i, candidate, report, score, accepted);
            r.report = None;
            r.note = Some("cached".into());
            r
        };
        rec.params = params;
        records.push(rec);
    }

    // A study where every pair scored 0 still returns a pair, not the base.
    let report = match best.report.take() {
        Some(r) => r,
        None => memo.values().next().expect("one trial ran").0.clone(),
    };
    Ok(OptimizationOutcome {
        prompt: best.finish(Method::Joint, Some(cfg.num_trials), None),
        report,
        study: Some(study),
        iterations: records,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Generates instruction-exemplar pairs and picks the best one.
pub fn run_joint(
    corpus: &Corpus,
    proposer: &LlmClient,
    generator: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    let start = Instant::now();
    let parts = split(corpus, cfg.valid_fraction, cfg.seed)?;
    let pairs = bootstrap_pairs(&parts.train, proposer, cfg)?;
    let mut outcome = select_pair(&pairs, &parts.valid, generator, cfg)?;
    outcome.wall_time = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Iterative prompt optimization with a proposer and a SQL generator.
///
/// Each iteration scores the proposal on a fresh sample of the training
/// split. The returned prompt's `best_score` is its objective score on the
/// held-out validation split; `score_history` lists the sample scores at
/// which the best prompt was replaced.
pub fn run_ipo(
    corpus: &Corpus,
    proposer: &LlmClient,
    generator: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    let start = Instant::now();
    if cfg.num_iterations == 0 {
        return Err(OptimizeError::Config(
            "IPO needs at least one iteration".into(),
        ));
    }
    let parts = split(corpus, cfg.valid_fraction, cfg.seed)?;
    let (train, held_out) = (&parts.train, &parts.valid);
    let opts = cfg.score_options();
    let base = Prompt::base();
    let mut best = BestTracker::new(base.clone());
    let mut current = (base, 0.0);
    let (mut wrong, mut correct): (Vec<Exemplar>, Vec<Exemplar>) = (Vec::new(), Vec::new());
    let mut records = Vec::with_capacity(cfg.num_iterations);

    for it in 0..cfg.num_iterations {
        let sample = train.with_items(sample_items(
            &train.items,
            cfg.valid_sample_size.min(train.len()),
            child_seed(cfg.seed, "ipo.sample", it as u64),
            SampleMode::Uniform,
        )?);
        let ctx = ProposerContext::new(
            (&best.prompt, best.accuracy),
            (&current.0, current.1),
            &wrong,
            &correct,
            cfg.min_proposed_exemplars,
        );
        let text = render_proposer(&ctx);
        let mut candidate = match propose(proposer, cfg, &text, it)? {
            Ok(p) => p,
            Err(note) => {
                log::warn!("ipo iteration {it}: {note}");
                records.push(IterationRecord::skipped(it, note));
                continue;
            }
        };
        if candidate.exemplars.len() < cfg.min_proposed_exemplars {
            let note = format!(
                "proposal rejected: {} exemplars, at least {} required",
                candidate.exemplars.len(),
                cfg.min_proposed_exemplars
            );
            log::warn!("ipo iteration {it}: {note}");
            records.push(IterationRecord::skipped(it, note));
            continue;
        }
        candidate.metadata.created_by_iteration = Some(it);
        let report = score_prompt(generator, &candidate, &sample, &opts)
            .map_err(|source| OptimizeError::Trial { index: it, source })?;
        let score = objective_score(&report, &cfg.objective)?;
        let accepted = best.offer(it, &candidate, &report, score);
        log::info!(
            "ipo iteration {it}: accuracy {:.4} score {score:.4}{}",
            report.accuracy,
            if accepted { " (best)" } else { "" }
        );
        wrong = report.wrong_examples.clone();
        correct = report.correct_examples.clone();
        let accuracy = report.accuracy;
        records.push(IterationRecord::evaluated(
            it, &candidate, report, score, accepted,
        ));
        current = (candidate, accuracy);
    }

    let final_report =
        score_prompt(generator, &best.prompt, held_out, &opts).map_err(OptimizeError::Eval)?;
    let final_score = objective_score(&final_report, &cfg.objective)?;
    let mut prompt = best.finish(Method::Ipo, None, Some(cfg.num_iterations));
    prompt.metadata.best_score = Some(final_score);
    Ok(OptimizationOutcome {
        prompt,
        report: final_report,
        study: None,
        iterations: records,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Calls the proposer, retrying once with a format reminder when the answer
/// does not parse. The inner error is a note for an aborted iteration.
fn propose(
    proposer: &LlmClient,
    cfg: &OptimizationConfig,
    text: &str,
    iteration: usize,
) -> Result<Result<Prompt, String>, OptimizeError> {
    let call = |t: String| {
        proposer
            .complete(&cfg.proposer_request(t))
            .map_err(|source| OptimizeError::Proposer { iteration, source })
    };
    let first = call(text.to_owned())?;
    match parse_proposal(&first.text) {
        Ok(p) => Ok(Ok(p)),
        Err(e1) => {
            log::warn!("ipo iteration {iteration}: unparseable proposal ({e1}), retrying");
            let second = call(format!("{text}{FORMAT_REMINDER}"))?;
            Ok(parse_proposal(&second.text)
                .map_err(|e2| format!("proposal unparseable twice: {e2}")))
        }
    }
}

/// Runs `cfg.method`. RES splits the corpus itself like the other methods.
pub fn optimize(
    corpus: &Corpus,
    proposer: &LlmClient,
    generator: &LlmClient,
    cfg: &OptimizationConfig,
) -> Result<OptimizationOutcome, OptimizeError> {
    match cfg.method {
        Method::Res => {
            let start = Instant::now();
            let parts = split(corpus, cfg.valid_fraction, cfg.seed)?;
            let mut out = run_res(&parts.train, &parts.valid, generator, cfg)?;
            out.wall_time = start.elapsed().as_secs_f64();
            Ok(out)
        }
        Method::Ores => run_ores(corpus, generator, cfg),
        Method::Joint => run_joint(corpus, proposer, generator, cfg),
        Method::Ipo => run_ipo(corpus, proposer, generator, cfg),
    }
}
