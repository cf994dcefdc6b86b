//! Flat `key = value` configuration layered as built-in defaults < preset <
//! config file < command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenPool,
    Train,
    Eval,
    Sweep,
    ExportAssoc,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::GenPool,
        Command::Train,
        Command::Eval,
        Command::Sweep,
        Command::ExportAssoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenPool => "gen-pool",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::ExportAssoc => "export-assoc",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

const G: u8 = 1;
const T: u8 = 2;
const E: u8 = 4;
const S: u8 = 8;
const A: u8 = 16;
const ALL: u8 = G | T | E | S | A;
const EVALS: u8 = E | S | A;

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    commands: u8,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, commands: u8, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default,
        commands,
        help,
    }
}

impl KeySpec {
    pub fn applies_to(&self, cmd: Command) -> bool {
        self.commands & cmd.bit() != 0
    }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", ALL, "base random seed"),
    key("out", "run", ALL, "output directory (gen-pool: pool file path)"),
    key("threads", "1", ALL, "worker threads; 1 keeps runs bit-reproducible"),
    key("preset", "toy", ALL, "toy or paper: base architecture and schedule"),
    key("family", "mamba", ALL, "transformer, linear_tf, performer or mamba"),
    key("moe-experts", "0", ALL, "dense mixture-of-experts width (0 disables)"),
    key("moe-hidden", "", ALL, "expert hidden width (default: ffn-hidden)"),
    key("discretization", "zoh", ALL, "zoh, paper_literal or euler"),
    key("lambda", "0.5", T, "selectivity regularization weight"),
    key("tasks", "", T | EVALS, "tasks (classes) per episode"),
    key("shots", "", T | EVALS, "shots per task"),
    key("vocab", "200", T, "target-code vocabulary size"),
    key("task-kind", "classification", T | EVALS, "classification, sine, rotation or completion"),
    key("shuffled", "false", T | EVALS, "interleave the stream instead of task-by-task order"),
    key("layers", "", T, "number of layers"),
    key("hidden", "", T, "residual width"),
    key("head-dim", "", T, "query/key width of attention families"),
    key("state-size", "", T, "selective SSM state size"),
    key("conv-width", "", T, "mamba convolution width"),
    key("expand", "", T, "mamba inner expansion"),
    key("dt-rank", "", T, "mamba timescale projection rank"),
    key("ffn-hidden", "", T, "feed-forward width of attention families"),
    key("performer-features", "", T, "performer random features"),
    key("max-positions", "2048", T, "learned positions of the transformer"),
    key("steps", "", T, "optimizer steps"),
    key("batch", "16", T, "episodes per step"),
    key("lr", "", T, "initial learning rate"),
    key("lr-decay-rate", "0.5", T, "learning-rate decay factor"),
    key("lr-decay-step", "", T, "steps between decays"),
    key("clip", "1.0", T, "global gradient-norm clip"),
    key("clip-with-selectivity", "false", T, "also clip when lambda > 0"),
    key("slct-layers", "final", T, "layers scored by the regularizer: final or all"),
    key("slct-positions", "queries", T, "positions scored by the regularizer: queries or stream"),
    key("eval-every", "0", T, "meta-test cadence in steps (needs test-pool)"),
    key("checkpoint-every", "0", T, "checkpoint cadence in steps"),
    key("train-pool", "", T, "meta-train pool file"),
    key("test-pool", "", T | EVALS, "meta-test pool file"),
    key("resume", "", T, "checkpoint to continue training from"),
    key("checkpoint", "", EVALS, "trained checkpoint"),
    key("episodes", "200", T | E | S, "meta-test episodes per setting"),
    key("tests-per-class", "5", T | EVALS, "test queries per class at meta-test time"),
    key("sigma", "0", E, "input noise std on 5 stream samples"),
    key("axis", "", S, "tasks, shots or noise"),
    key("values", "", S, "comma-separated sweep values"),
    key("episode-index", "0", A, "which seeded episode to export"),
    key("classes", "64", G, "pool classes"),
    key("items", "20", G, "items per class"),
    key("dim", "16", G, "embedding width"),
    key("std", "0.1", G, "cluster standard deviation"),
    key("first-class", "0", G, "id of the first class"),
];

/// Preset values for keys whose built-in default is empty.
fn preset_value(preset: &str, family: &str, key: &str) -> Option<&'static str> {
    // one wide SSM layer trains faster at toy scale than a deep narrow stack
    let toy_ssm = match key {
        "layers" => Some("1"),
        "hidden" => Some("128"),
        "lr" => Some("3e-3"),
        _ => None,
    };
    let toy = match key {
        "tasks" => "5",
        "shots" => "2",
        "layers" => "2",
        "hidden" => "48",
        "head-dim" => "16",
        "state-size" => "16",
        "conv-width" => "4",
        "expand" => "2",
        "dt-rank" => "4",
        "ffn-hidden" => "64",
        "performer-features" => "16",
        "steps" => "2000",
        "lr" => "5e-3",
        "lr-decay-step" => "1000",
        _ => return None,
    };
    let paper = match key {
        "tasks" => "20",
        "shots" => "5",
        "layers" => "4",
        "hidden" => "512",
        "head-dim" => "64",
        "state-size" => "128",
        "conv-width" => "4",
        "expand" => "2",
        "dt-rank" => "32",
        "ffn-hidden" => "2048",
        "performer-features" => "64",
        "steps" => "50000",
        "lr" => "1e-4",
        "lr-decay-step" => "10000",
        _ => return None,
    };
    match preset {
        "paper" => Some(paper),
        _ if family == "mamba" => toy_ssm.or(Some(toy)),
        _ => Some(toy),
    }
}

pub fn find_key(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value', got '{raw}'", n + 1)))?;
        let k = k.trim().replace('_', "-");
        if find_key(&k).is_none() {
            return Err(CliError::Usage(format!("config line {}: unknown key '{k}'", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Effective settings of one command invocation.
#[derive(Clone, Debug)]
pub struct Settings {
    pub command: Command,
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl Settings {
    /// Layers defaults, preset, `file` pairs and `flags` pairs, later layers
    /// winning. Keys foreign to `command` are rejected when given as flags.
    pub fn resolve(
        command: Command,
        file: &[(String, String)],
        flags: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut explicit_values = BTreeMap::new();
        for (k, v) in file.iter().chain(flags) {
            if find_key(k).is_none() {
                return Err(CliError::Usage(format!("unknown key '{k}'")));
            }
            explicit_values.insert(k.clone(), v.clone());
        }
        for (k, _) in flags {
            if !find_key(k).is_some_and(|s| s.applies_to(command)) {
                return Err(CliError::Usage(format!("'{k}' does not apply to {}", command.name())));
            }
        }
        let preset = explicit_values.get("preset").map_or("toy", String::as_str).to_string();
        if preset != "toy" && preset != "paper" {
            return Err(CliError::Usage(format!("unknown preset '{preset}' (valid: toy, paper)")));
        }
        let family = match explicit_values.get("family") {
            Some(f) => f.clone(),
            None => find_key("family").map_or("", |s| s.default).to_string(),
        };
        let mut values = BTreeMap::new();
        for spec in KEYS.iter().filter(|k| k.applies_to(command)) {
            let v = match explicit_values.get(spec.name) {
                Some(v) => v.clone(),
                None => match spec.default {
                    "" => preset_value(&preset, &family, spec.name).unwrap_or("").to_string(),
                    d => d.to_string(),
                },
            };
            values.insert(spec.name.to_string(), v);
        }
        if command == Command::GenPool && !explicit_values.contains_key("out") {
            values.insert("out".into(), "pool.bin".into());
        }
        Ok(Self {
            command,
            explicit: explicit_values.keys().filter(|k| values.contains_key(*k)).cloned().collect(),
            values,
        })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key '{key}' is not defined for {}", self.command.name()))
    }

    pub fn applies(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V, CliError>
    where
        V::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value '{raw}' for '{key}': {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Usage(format!("invalid boolean '{other}' for '{key}'"))),
        }
    }

    /// Non-empty path value, or a usage error naming the key.
    pub fn path(&self, key: &str) -> Result<&Path, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Usage(format!("'{key}' is required for {}", self.command.name()))),
            p => Ok(Path::new(p)),
        }
    }

    pub fn optional_path(&self, key: &str) -> Option<&Path> {
        match self.raw(key) {
            "" => None,
            p => Some(Path::new(p)),
        }
    }

    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>, CliError>
    where
        V::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(CliError::Usage(format!("'{key}' needs at least one value")));
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Usage(format!("invalid entry '{s}' in '{key}': {e}")))
            })
            .collect()
    }

    /// Every effective value, one `key = value` line each, sorted.
    pub fn to_resolved(&self) -> String {
        let mut s = format!("# {}\n", self.command.name());
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
