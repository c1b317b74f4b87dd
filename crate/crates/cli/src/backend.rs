//! Backend selection: live HTTP, strict replay, or a scripted oracle.

use std::path::PathBuf;
use std::str::FromStr;

use nl2sql_po::llmclient::oracle::{
    variant_request_gold, AnswerTable, GoldLookup, KDependent, TagCoverageProposer, VariantEcho,
};
use nl2sql_po::llmclient::{HttpConfig, OracleError, OraclePolicy, ReplayCache, API_KEY_ENV};
use nl2sql_po::prompts::proposer_current_prompt;
use nl2sql_po::{Exemplar, LlmClient};

use crate::UsageError;

/// How the scripted generator answers NL2SQL prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    /// Always the gold SQL.
    Gold,
    /// Gold SQL only when an exemplar shares the query's construct tag.
    Coverage,
    /// Accuracy peaked at five exemplars.
    KDependent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendKind {
    Live,
    Replay,
    Oracle(OracleKind),
}

impl FromStr for BackendKind {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "oracle" | "oracle:gold" => Ok(Self::Oracle(OracleKind::Gold)),
            "oracle:coverage" => Ok(Self::Oracle(OracleKind::Coverage)),
            "oracle:kdep" => Ok(Self::Oracle(OracleKind::KDependent)),
            other => Err(UsageError(format!(
                "unknown backend `{other}` (expected live, replay, oracle:gold, oracle:coverage or oracle:kdep)"
            ))),
        }
    }
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Live => "live",
            Self::Replay => "replay",
            Self::Oracle(OracleKind::Gold) => "oracle:gold",
            Self::Oracle(OracleKind::Coverage) => "oracle:coverage",
            Self::Oracle(OracleKind::KDependent) => "oracle:kdep",
        }
    }
}

/// One scripted model playing every role: proposer prompts go to the
/// tag-coverage proposer, variant requests to the variant echo, everything
/// else to the generator policy.
struct OracleRouter {
    generator: Box<dyn OraclePolicy>,
    proposer: TagCoverageProposer,
}

impl OraclePolicy for OracleRouter {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        if proposer_current_prompt(prompt).is_some() {
            self.proposer.respond(prompt)
        } else if variant_request_gold(prompt).is_some() {
            VariantEcho.respond(prompt)
        } else {
            self.generator.respond(prompt)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub cache: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub rpm: Option<u32>,
    pub min_exemplars: usize,
}

impl BackendSpec {
    /// Builds the client. `items` feeds the scripted policies.
    pub fn build(&self, items: &[Exemplar]) -> anyhow::Result<LlmClient> {
        let client = match &self.kind {
            BackendKind::Replay => {
                let dir = self
                    .cache
                    .as_ref()
                    .ok_or_else(|| UsageError("backend `replay` needs --cache DIR".into()))?;
                if !dir.is_dir() {
                    return Err(UsageError(format!(
                        "replay cache {} does not exist",
                        dir.display()
                    ))
                    .into());
                }
                return Ok(LlmClient::replay(ReplayCache::open(dir)?));
            }
            BackendKind::Live => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| UsageError("backend `live` needs --endpoint URL".into()))?;
                let mut config = HttpConfig::from_env(endpoint);
                if config.api_key.is_none() {
                    return Err(UsageError(format!(
                        "backend `live` needs {API_KEY_ENV} to be set"
                    ))
                    .into());
                }
                config.requests_per_minute = self.rpm;
                LlmClient::http(config)
            }
            BackendKind::Oracle(kind) => {
                let generator: Box<dyn OraclePolicy> = match kind {
                    OracleKind::Gold => Box::new(AnswerTable::from_gold(items)),
                    OracleKind::Coverage => Box::new(GoldLookup::new(items)),
                    OracleKind::KDependent => Box::new(KDependent::new(items, 5, 5.0)),
                };
                LlmClient::scripted(OracleRouter {
                    generator,
                    proposer: TagCoverageProposer::new(items, self.min_exemplars),
                })
            }
        };
        Ok(match &self.record {
            Some(dir) => client.with_recorder(ReplayCache::open(dir)?),
            None => client,
        })
    }
}
