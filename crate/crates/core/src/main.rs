//! Command-line front end: simulate, ulm, report, selftest.

use sonotrack::cli;
use sonotrack::config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
sonotrack — robot-tracked 4D ultrasound simulation and super-resolution toolkit

USAGE:
    sonotrack simulate --config <file> --out <dir> [--seed <n>]
    sonotrack ulm --record <dir> --out <dir>
    sonotrack report --record <dir> [--ulm <dir>] [--compare <dir>] --out <dir>
    sonotrack selftest

The config file is plain text (key = value with [sections]); `seed` is the
only mandatory key. Worker threads are capped by RAYON_NUM_THREADS.
";

struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    fn parse(raw: &[String]) -> Result<Args, String> {
        let mut flags = Vec::new();
        let mut i = 0;
        while i < raw.len() {
            let key = raw[i].clone();
            if !key.starts_with("--") {
                return Err(format!("unexpected argument: {key}"));
            }
            let val = raw.get(i + 1).cloned().ok_or(format!("{key} needs a value"))?;
            flags.push((key[2..].to_string(), val));
            i += 2;
        }
        Ok(Args { flags })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<PathBuf, String> {
        self.get(name).map(PathBuf::from).ok_or(format!("missing --{name}"))
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, String> {
    let mut cfg = match args.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {path}: {e}"))?;
            ExperimentConfig::parse(&text).map_err(|e| e.to_string())?
        }
        None => {
            let seed = args.get("seed").ok_or("either --config or --seed is required")?;
            ExperimentConfig::with_seed(seed.parse().map_err(|_| "bad --seed")?)
        }
    };
    if let Some(seed) = args.get("seed") {
        cfg.seed = seed.parse().map_err(|_| "bad --seed")?;
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        return Err("no subcommand".into());
    };
    let args = Args::parse(&argv[1..])?;
    match command.as_str() {
        "simulate" => {
            let cfg = load_config(&args)?;
            let out = args.require("out")?;
            let record = cli::cmd_simulate(&cfg, &out).map_err(|e| e.to_string())?;
            println!(
                "simulate: {} frames, retention {:.1}%, hash {} -> {}",
                record.frames.len(),
                100.0 * record.fov_retention(),
                record.config_hash,
                out.display()
            );
            Ok(())
        }
        "ulm" => {
            let record = args.require("record")?;
            let out = args.require("out")?;
            let outputs = cli::cmd_ulm(&record, &out).map_err(|e| e.to_string())?;
            println!(
                "ulm: {} tracks ({} before persistence), mean speed {:.3} mm/s -> {}",
                outputs.tracks.len(),
                outputs.tracks_before_filter,
                cli::mean_map_speed(&outputs.maps),
                out.display()
            );
            Ok(())
        }
        "report" => {
            let record = args.require("record")?;
            let out = args.require("out")?;
            let ulm = args.get("ulm").map(PathBuf::from);
            let compare = args.get("compare").map(PathBuf::from);
            let text = cli::cmd_report(&record, ulm.as_deref(), compare.as_deref(), &out)
                .map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(())
        }
        "selftest" => {
            let results = cli::cmd_selftest();
            let mut ok = true;
            for (name, pass) in &results {
                println!("{}: {}", name, if *pass { "PASS" } else { "FAIL" });
                ok &= pass;
            }
            if ok {
                Ok(())
            } else {
                Err("selftest failed".into())
            }
        }
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(format!("unknown subcommand: {other}"))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
