//! `scn gen-data|train|eval|ablate|report --config PATH [--key=value ...]`

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use scn_core::config::{parse_config, RunConfig};

const USAGE: &str = "usage: scn <gen-data|train|eval|ablate|report> [--config PATH] [--key=value ...]

Settings come from the defaults, then the config file, then SCN_SEED, then flags.";

struct Invocation {
    command: String,
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut it = args.iter();
    let command = it.next().ok_or("missing command")?.clone();
    let mut config = None;
    let mut overrides = Vec::new();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(format!("unexpected argument `{arg}`"));
        };
        if flag == "config" {
            config = Some(PathBuf::from(it.next().ok_or("--config needs a path")?));
        } else if let Some(path) = flag.strip_prefix("config=") {
            config = Some(PathBuf::from(path));
        } else if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            return Err(format!("flag `{arg}` must be written --key=value"));
        }
    }
    Ok(Invocation {
        command,
        config,
        overrides,
    })
}

fn resolve(inv: &Invocation) -> scn_core::Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var("SCN_SEED") {
        overrides.push(("seed".to_string(), seed));
    }
    overrides.extend(inv.overrides.iter().cloned());
    parse_config(inv.config.as_deref(), &overrides)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if matches!(args.first().map(String::as_str), Some("-h" | "--help" | "help")) {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let inv = match parse_args(&args) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("error: {e}\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    let cfg = match resolve(&inv) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match inv.command.as_str() {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train_cmd(&cfg),
        "eval" => commands::eval_cmd(&cfg),
        "ablate" => commands::ablate_cmd(&cfg),
        "report" => commands::report_cmd(&cfg),
        other => {
            eprintln!("error: unknown command `{other}`\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
