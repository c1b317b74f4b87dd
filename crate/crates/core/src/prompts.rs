//! Prompt templates, rendering, and parsing of proposer output.
//!
//! Every prompt the crate sends goes through this module, so the text
//! layout here is the contract scripted oracles and golden files rely on.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Difficulty, Exemplar};
use crate::llmclient::estimate_tokens;

/// Instruction of the baseline (RES/ORES) prompt.
pub const DEFAULT_INSTRUCTION: &str =
    "Given natural language query, schema of the database and evidence, generate a sqlite SQL query";

pub const PROPOSER_TEMPLATE: &str = "#Instruction:
You are an expert in assisting another LLM for the task of generating SQL queries from natural language queries. You are given the following information:
1. The best prompt generated so far
2. The accuracy of the best prompt
3. The current prompt
4. The accuracy of the current prompt
5. A set of exemplars where the current prompt incorrectly generated the SQL query
6. A set of exemplars where the current prompt correctly generated the SQL query

#Goal:
Think step by step to generate a prompt comprising of two parts in JSON format:
1. Instruction for the LLM to generate SQL query for sqlite3 database
2. A set of diverse exemplars to assist the LLM in generating the SQL query.

#Best Prompt:
{best_prompt}

#Best Accuracy:
{best_accuracy}

#Current Prompt:
{current_prompt}

#Current Prompt Accuracy:
{current_accuracy}

#Wrong Exemplars:
{wrong_examples}

#Correct Exemplars:
{correct_examples}

#Output Format:
Return a JSON object with the keys \"instruction\" (string) and \"exemplars\" (array of objects with the keys \"nlq\", \"schema\", \"evidence\", \"sql\"). Provide at least {min_exemplars} diverse exemplars.

#Proposed Prompt:
";

/// Appended to the proposer prompt when its first answer could not be parsed.
pub const FORMAT_REMINDER: &str = "\n\nYour previous answer could not be parsed. Reply with only the JSON object: {\"instruction\": \"...\", \"exemplars\": [{\"nlq\": \"...\", \"schema\": \"...\", \"evidence\": \"...\", \"sql\": \"...\"}]}";

pub const VARIANT_TEMPLATE: &str = "#Instruction:
Given natural query, database schema, corresponding SQL, generate {num_variants} SQL variants. Generate only valid SQL query without any prefix or suffix:

#Query:
{query}

#Database Schema:
{db_schema}

#Ground Truth SQL:
{sql}

#SQL Variants:

{slots}";

/// Feedback caps for the proposer context.
pub const MAX_WRONG_EXAMPLES: usize = 10;
pub const MAX_CORRECT_EXAMPLES: usize = 5;

const EMPTY_LIST: &str = "None";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("proposal is not valid JSON: {0}")]
    MalformedJson(String),
    #[error("proposal is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("proposal key `{key}` has the wrong type (expected {expected})")]
    WrongType {
        key: &'static str,
        expected: &'static str,
    },
    #[error("proposal instruction is empty")]
    EmptyInstruction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_by_iteration: Option<usize>,
    #[serde(default)]
    pub score_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub est_tokens: Option<usize>,
}

/// An instruction plus an ordered exemplar list. Serialized as-is, this is
/// the optimized-prompt artifact consumed at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
    #[serde(default)]
    pub metadata: PromptMetadata,
}

impl Prompt {
    pub fn new(instruction: impl Into<String>, exemplars: Vec<Exemplar>) -> Self {
        Self {
            instruction: instruction.into(),
            exemplars,
            metadata: PromptMetadata::default(),
        }
    }

    /// The baseline prompt: default instruction, no exemplars.
    pub fn base() -> Self {
        let mut p = Self::new(DEFAULT_INSTRUCTION, Vec::new());
        p.metadata.method = "base".into();
        p
    }

    pub fn with_method(mut self, method: &str) -> Self {
        self.metadata.method = method.into();
        self
    }

    /// Estimated tokens of the prompt rendered without a query.
    pub fn est_tokens(&self) -> usize {
        estimate_tokens(&render_prompt_body(self))
    }
}

/// One `NLQ/SCHEMA/EVIDENCE/SQL` block as found in rendered text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExemplarBlock {
    pub nlq: String,
    pub schema: String,
    pub evidence: String,
    pub sql: String,
}

pub fn render_exemplar(e: &Exemplar) -> String {
    format!(
        "NLQ: {}\nSCHEMA: {}\nEVIDENCE: {}\nSQL: {}",
        e.nlq, e.schema_text, e.evidence, e.gold_sql
    )
}

fn render_exemplar_list(exemplars: &[Exemplar]) -> String {
    exemplars
        .iter()
        .map(render_exemplar)
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// `#Instruction` and `#Exemplars` sections, without the query.
fn render_prompt_body(prompt: &Prompt) -> String {
    let mut out = format!("#Instruction\n{}\n\n#Exemplars\n", prompt.instruction);
    if !prompt.exemplars.is_empty() {
        out.push_str(&render_exemplar_list(&prompt.exemplars));
        out.push('\n');
    }
    out
}

pub fn render_nl2sql(prompt: &Prompt, query: &Exemplar) -> String {
    let mut out = render_prompt_body(prompt);
    out.push_str(&format!(
        "\n#Query\nNLQ: {}\nSCHEMA: {}\nEVIDENCE: {}\nSQL:",
        query.nlq, query.schema_text, query.evidence
    ));
    out
}

/// Prompt serialization used inside the proposer context.
pub fn render_prompt_summary(prompt: &Prompt) -> String {
    let mut out = format!("#Instruction:\n{}\n\n#Exemplars:", prompt.instruction);
    if !prompt.exemplars.is_empty() {
        out.push('\n');
        out.push_str(&render_exemplar_list(&prompt.exemplars));
    }
    out
}

/// `0.5924` → `"59.24"`, rounding half up.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.2}", (ratio * 10_000.0).round() / 100.0)
}

#[derive(Debug, Clone)]
pub struct ProposerContext {
    pub best_prompt: Prompt,
    pub best_accuracy: f64,
    pub current_prompt: Prompt,
    pub current_accuracy: f64,
    pub wrong_examples: Vec<Exemplar>,
    pub correct_examples: Vec<Exemplar>,
    pub min_exemplars: usize,
}

impl ProposerContext {
    /// Builds a context, keeping the first [`MAX_WRONG_EXAMPLES`] wrong and
    /// [`MAX_CORRECT_EXAMPLES`] correct examples in their given order.
    pub fn new(
        best: (&Prompt, f64),
        current: (&Prompt, f64),
        wrong: &[Exemplar],
        correct: &[Exemplar],
        min_exemplars: usize,
    ) -> Self {
        Self {
            best_prompt: best.0.clone(),
            best_accuracy: best.1.clamp(0.0, 1.0),
            current_prompt: current.0.clone(),
            current_accuracy: current.1.clamp(0.0, 1.0),
            wrong_examples: wrong.iter().take(MAX_WRONG_EXAMPLES).cloned().collect(),
            correct_examples: correct.iter().take(MAX_CORRECT_EXAMPLES).cloned().collect(),
            min_exemplars,
        }
    }

    /// First-iteration context: best and current are both `base`, no feedback.
    pub fn initial(base: &Prompt, min_exemplars: usize) -> Self {
        Self::new((base, 0.0), (base, 0.0), &[], &[], min_exemplars)
    }
}

pub fn render_proposer(ctx: &ProposerContext) -> String {
    let list = |xs: &[Exemplar]| {
        if xs.is_empty() {
            EMPTY_LIST.to_owned()
        } else {
            render_exemplar_list(xs)
        }
    };
    PROPOSER_TEMPLATE
        .replace("{best_prompt}", &render_prompt_summary(&ctx.best_prompt))
        .replace("{best_accuracy}", &format_percent(ctx.best_accuracy))
        .replace(
            "{current_prompt}",
            &render_prompt_summary(&ctx.current_prompt),
        )
        .replace("{current_accuracy}", &format_percent(ctx.current_accuracy))
        .replace("{wrong_examples}", &list(&ctx.wrong_examples))
        .replace("{correct_examples}", &list(&ctx.correct_examples))
        .replace("{min_exemplars}", &ctx.min_exemplars.to_string())
}

/// Instruction-proposal prompt for the joint optimizer: the proposer
/// template seeded with one bootstrapped exemplar set and no feedback.
pub fn render_instruction_proposal(
    instruction: &str,
    exemplars: &[Exemplar],
    min_exemplars: usize,
) -> String {
    let seed = Prompt::new(instruction, exemplars.to_vec());
    render_proposer(&ProposerContext::initial(&seed, min_exemplars))
}

pub fn render_variant_request(
    nlq: &str,
    schema_text: &str,
    gold_sql: &str,
    num_variants: usize,
) -> String {
    let n = num_variants.max(1);
    let slots = (1..=n)
        .map(|i| format!("{i}."))
        .collect::<Vec<_>>()
        .join("\n\n");
    VARIANT_TEMPLATE
        .replace("{num_variants}", &n.to_string())
        .replace("{query}", nlq)
        .replace("{db_schema}", schema_text)
        .replace("{sql}", gold_sql)
        .replace("{slots}", &slots)
}

/// Removes a surrounding Markdown code fence (```` ``` ```` or ```` ```json ````).
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

pub fn parse_proposal(text: &str) -> Result<Prompt, PromptError> {
    let body = strip_code_fence(text);
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(first) => {
            // Models often wrap the object in prose; fall back to the outermost braces.
            let (Some(start), Some(end)) = (body.find('{'), body.rfind('}')) else {
                return Err(PromptError::MalformedJson(first.to_string()));
            };
            if end < start {
                return Err(PromptError::MalformedJson(first.to_string()));
            }
            serde_json::from_str(&body[start..=end])
                .map_err(|_| PromptError::MalformedJson(first.to_string()))?
        }
    };
    let obj = value.as_object().ok_or(PromptError::WrongType {
        key: "<root>",
        expected: "object",
    })?;
    let instruction = match obj.get("instruction") {
        None => return Err(PromptError::MissingKey("instruction")),
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(_) => {
            return Err(PromptError::WrongType {
                key: "instruction",
                expected: "string",
            })
        }
    };
    if instruction.is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    let items = match obj.get("exemplars") {
        None => return Err(PromptError::MissingKey("exemplars")),
        Some(Value::Array(a)) => a,
        Some(_) => {
            return Err(PromptError::WrongType {
                key: "exemplars",
                expected: "array",
            })
        }
    };
    let mut exemplars = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let field = |key: &'static str, required: bool| -> Result<String, PromptError> {
            match item.get(key) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Null) | None if !required => Ok(String::new()),
                None => Err(PromptError::MissingKey(key)),
                Some(_) => Err(PromptError::WrongType {
                    key,
                    expected: "string",
                }),
            }
        };
        if !item.is_object() {
            return Err(PromptError::WrongType {
                key: "exemplars[]",
                expected: "object",
            });
        }
        exemplars.push(Exemplar {
            question_id: format!("proposed-{i}"),
            db_id: String::new(),
            nlq: field("nlq", true)?,
            evidence: field("evidence", false)?,
            gold_sql: field("sql", true)?,
            difficulty: Difficulty::Unknown,
            // Pruned schemas from the proposer are kept verbatim.
            schema_text: field("schema", false)?,
        });
    }
    Ok(Prompt::new(instruction, exemplars).with_method("ipo"))
}

/// JSON form accepted by [`parse_proposal`].
pub fn proposal_json(prompt: &Prompt) -> Value {
    serde_json::json!({
        "instruction": prompt.instruction,
        "exemplars": prompt.exemplars.iter().map(|e| serde_json::json!({
            "nlq": e.nlq,
            "schema": e.schema_text,
            "evidence": e.evidence,
            "sql": e.gold_sql,
        })).collect::<Vec<_>>(),
    })
}

/// Parses consecutive `NLQ:` / `SCHEMA:` / `EVIDENCE:` / `SQL:` blocks.
/// Lines without a label continue the previous field.
pub fn parse_exemplar_blocks(text: &str) -> Vec<ExemplarBlock> {
    #[derive(Clone, Copy)]
    enum Field {
        Nlq,
        Schema,
        Evidence,
        Sql,
    }
    let mut blocks: Vec<ExemplarBlock> = Vec::new();
    let mut field: Option<Field> = None;
    for line in text.lines() {
        let (next, value) = if let Some(v) = line.strip_prefix("NLQ:") {
            blocks.push(ExemplarBlock::default());
            (Field::Nlq, v)
        } else if let Some(v) = line.strip_prefix("SCHEMA:") {
            (Field::Schema, v)
        } else if let Some(v) = line.strip_prefix("EVIDENCE:") {
            (Field::Evidence, v)
        } else if let Some(v) = line.strip_prefix("SQL:") {
            (Field::Sql, v)
        } else {
            if let (Some(f), Some(block)) = (field, blocks.last_mut()) {
                let slot = match f {
                    Field::Nlq => &mut block.nlq,
                    Field::Schema => &mut block.schema,
                    Field::Evidence => &mut block.evidence,
                    Field::Sql => &mut block.sql,
                };
                slot.push('\n');
                slot.push_str(line);
            }
            continue;
        };
        let Some(block) = blocks.last_mut() else {
            continue;
        };
        let value = value.strip_prefix(' ').unwrap_or(value).to_owned();
        match next {
            Field::Nlq => block.nlq = value,
            Field::Schema => block.schema = value,
            Field::Evidence => block.evidence = value,
            Field::Sql => block.sql = value,
        }
        field = Some(next);
    }
    for b in &mut blocks {
        for s in [&mut b.nlq, &mut b.schema, &mut b.evidence, &mut b.sql] {
            let trimmed = s.trim_end().to_owned();
            *s = trimmed;
        }
    }
    blocks
}

/// Text between the line equal to `start` and the next line equal to `end`
/// (or end of text).
fn section<'a>(text: &'a str, start: &str, end: Option<&str>) -> Option<&'a str> {
    let mut offset = 0;
    let mut begin = None;
    for line in text.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        match begin {
            None if bare == start => begin = Some(offset + line.len()),
            Some(b) if Some(bare) == end => return Some(&text[b..offset]),
            _ => {}
        }
        offset += line.len();
    }
    begin.map(|b| &text[b..])
}

/// The `#Query` block of a rendered NL2SQL prompt.
pub fn query_block(rendered: &str) -> Option<ExemplarBlock> {
    let q = section(rendered, "#Query", None)?;
    parse_exemplar_blocks(q).into_iter().next()
}

/// Exemplars of a rendered NL2SQL prompt.
pub fn exemplar_blocks(rendered: &str) -> Vec<ExemplarBlock> {
    section(rendered, "#Exemplars", Some("#Query"))
        .map(parse_exemplar_blocks)
        .unwrap_or_default()
}

/// The `#Current Prompt:` section of a rendered proposer prompt.
pub fn proposer_current_prompt(rendered: &str) -> Option<&str> {
    section(
        rendered,
        "#Current Prompt:",
        Some("#Current Prompt Accuracy:"),
    )
}
