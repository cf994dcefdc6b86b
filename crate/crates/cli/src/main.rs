//! `mcl`: pools, meta-training, meta-testing, sweeps and association export.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgMatches};

use config::{parse_config_text, Command, Settings, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(mcl_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn cli() -> clap::Command {
    let mut app = clap::Command::new("mcl")
        .about("Meta-continual learning with attention and selective state-space sequence models")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help("flat key = value configuration file"),
        );
        for key in KEYS.iter().filter(|k| k.applies_to(cmd)) {
            sub = sub.arg(Arg::new(key.name).long(key.name).value_name("VALUE").help(key.help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn settings(cmd: Command, m: &ArgMatches) -> Result<Settings, CliError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config '{p}': {e}")))?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = KEYS
        .iter()
        .filter(|k| k.applies_to(cmd))
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    Settings::resolve(cmd, &file, &flags)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCL_LOG", "info")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cmd = Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("subcommands mirror Command::ALL");
    match settings(cmd, sub).and_then(|s| commands::run(&s)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
