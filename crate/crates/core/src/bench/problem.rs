use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim_bridge::module_names;

/// One benchmark task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub task_id: String,
    pub spec: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_testbench: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    /// Port declaration stub, e.g. `module top_module(input a, output y);`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_interface: Option<String>,
}

impl Problem {
    pub fn new(task_id: impl Into<String>, spec: impl Into<String>) -> Self {
        Problem {
            task_id: task_id.into(),
            spec: spec.into(),
            golden_testbench: None,
            reference_solution: None,
            module_interface: None,
        }
    }

    /// Name the design must use: the module in the interface stub, else the
    /// name the golden testbench instantiates, else `top_module`.
    pub fn dut_top(&self) -> String {
        if let Some(name) = self
            .module_interface
            .as_deref()
            .and_then(|m| module_names(m).into_iter().next())
        {
            return name;
        }
        if let Some(tb) = &self.golden_testbench {
            static RE: OnceLock<Regex> = OnceLock::new();
            let re = RE.get_or_init(|| Regex::new(r"(?m)^\s*(top_module|TopModule)\s+[A-Za-z_]").expect("static regex"));
            let found: Vec<&str> = re.captures_iter(tb).map(|c| c.get(1).expect("group").as_str()).collect();
            for name in ["top_module", "TopModule"] {
                if found.contains(&name) {
                    return name.to_string();
                }
            }
        }
        "top_module".to_string()
    }

    /// Specification text as handed to the agents, with the interface stub
    /// appended when it is not already part of the text.
    pub fn full_spec(&self) -> String {
        match &self.module_interface {
            Some(m) if !self.spec.contains(m.trim()) => {
                format!("{}\n\nModule interface:\n{}", self.spec.trim_end(), m.trim_end())
            }
            _ => self.spec.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    #[serde(rename = "verilogeval-v1")]
    VerilogEvalV1,
    #[serde(rename = "verilogeval-v2")]
    VerilogEvalV2,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "verilogeval-v1" => Ok(DatasetFormat::VerilogEvalV1),
            "verilogeval-v2" => Ok(DatasetFormat::VerilogEvalV2),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate task_id {0:?}")]
    DuplicateTaskId(String),
    #[error("{0}")]
    Layout(String),
}

fn io_err(path: &Path, e: std::io::Error) -> LoadError {
    LoadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn load_problems(path: &Path, format: DatasetFormat) -> Result<Vec<Problem>, LoadError> {
    let problems = match format {
        DatasetFormat::Jsonl => load_jsonl(path)?,
        DatasetFormat::VerilogEvalV1 => load_v1(path)?,
        DatasetFormat::VerilogEvalV2 => load_v2(path)?,
    };
    let mut seen = HashSet::new();
    for p in &problems {
        if !seen.insert(p.task_id.as_str()) {
            return Err(LoadError::DuplicateTaskId(p.task_id.clone()));
        }
    }
    Ok(problems)
}

fn parse_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| LoadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn load_jsonl(path: &Path) -> Result<Vec<Problem>, LoadError> {
    parse_lines::<Problem>(path)?
        .into_iter()
        .map(|(line, p)| {
            if p.spec.trim().is_empty() {
                Err(LoadError::Parse {
                    line,
                    message: "spec is empty".into(),
                })
            } else {
                Ok(p)
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct V1Line {
    task_id: String,
    #[serde(default, alias = "description")]
    detail_description: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    canonical_solution: Option<String>,
    #[serde(default)]
    test: Option<String>,
}

#[derive(Deserialize)]
struct V1Description {
    task_id: String,
    detail_description: String,
}

const V1_PROBLEMS: &str = "VerilogEval_Human.jsonl";
const V1_DESCRIPTIONS: &str = "VerilogDescription_Human.jsonl";

/// A merged JSONL file, or a directory holding the problem file and the
/// separate description file of the original distribution.
fn load_v1(path: &Path) -> Result<Vec<Problem>, LoadError> {
    let (problem_file, descriptions) = if path.is_dir() {
        let desc_path = path.join(V1_DESCRIPTIONS);
        let descs: HashMap<String, String> = parse_lines::<V1Description>(&desc_path)?
            .into_iter()
            .map(|(_, d)| (d.task_id, d.detail_description))
            .collect();
        (path.join(V1_PROBLEMS), descs)
    } else {
        (path.to_path_buf(), HashMap::new())
    };
    parse_lines::<V1Line>(&problem_file)?
        .into_iter()
        .map(|(line, v)| {
            let spec = v
                .detail_description
                .or_else(|| descriptions.get(&v.task_id).cloned())
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| LoadError::Parse {
                    line,
                    message: format!("no description for {}", v.task_id),
                })?;
            let reference = match (&v.prompt, &v.canonical_solution) {
                (Some(p), Some(body)) => Some(format!("{p}{body}")),
                _ => None,
            };
            Ok(Problem {
                task_id: v.task_id,
                spec,
                golden_testbench: v.test,
                reference_solution: reference,
                module_interface: v.prompt,
            })
        })
        .collect()
}

/// Directory of `<task>_prompt.txt`, `<task>_ref.sv` and `<task>_test.sv`.
fn load_v2(dir: &Path) -> Result<Vec<Problem>, LoadError> {
    if !dir.is_dir() {
        return Err(LoadError::Layout(format!("{} is not a directory", dir.display())));
    }
    let mut tasks: BTreeMap<String, [Option<String>; 3]> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let (task, slot) = if let Some(t) = name.strip_suffix("_prompt.txt") {
            (t, 0)
        } else if let Some(t) = name.strip_suffix("_ref.sv") {
            (t, 1)
        } else if let Some(t) = name.strip_suffix("_test.sv") {
            (t, 2)
        } else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        tasks.entry(task.to_string()).or_default()[slot] = Some(text);
    }
    tasks
        .into_iter()
        .map(|(task_id, [prompt, reference, test])| {
            let spec = prompt
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| LoadError::Layout(format!("{task_id}: missing or empty prompt file")))?;
            Ok(Problem {
                task_id,
                spec,
                golden_testbench: test,
                reference_solution: reference,
                module_interface: None,
            })
        })
        .collect()
}
