mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use rangeface::matching::Protocol;

use config::{flag_name, RunConfig, KEYS};

fn cli() -> Command {
    let mut cmd = Command::new("rangeface")
        .about("Range-image face recognition with SULD descriptors")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("settings file with `key = value` lines"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .value_parser(value_parser!(u64))
                .default_value("0")
                .global(true)
                .help("seed for synthetic data"),
        )
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .short('j')
                .value_name("N")
                .value_parser(value_parser!(usize))
                .default_value("0")
                .global(true)
                .help("worker threads, 0 for one per core"),
        )
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .action(ArgAction::SetTrue)
                .global(true)
                .help("log progress to stderr"),
        );
    for &(key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .global(true)
                .help_heading("Settings")
                .help(help),
        );
    }

    cmd.subcommand(
        Command::new("synth")
            .about("Generate synthetic face scans and a manifest")
            .arg(
                Arg::new("subjects")
                    .long("subjects")
                    .required(true)
                    .value_parser(value_parser!(u64).range(1..))
                    .help("number of subjects"),
            )
            .arg(
                Arg::new("scans")
                    .long("scans")
                    .required(true)
                    .value_parser(value_parser!(u64).range(1..=16))
                    .help("scans per subject"),
            )
            .arg(out_arg()),
    )
    .subcommand(
        Command::new("preprocess")
            .about("Register, rasterize and crop every scan of a manifest")
            .arg(manifest_arg())
            .arg(out_arg()),
    )
    .subcommand(
        Command::new("describe")
            .about("Detect significant points and build descriptors for each range image")
            .arg(
                Arg::new("input")
                    .long("input")
                    .required(true)
                    .value_parser(value_parser!(PathBuf))
                    .help("directory of preprocessed .pgm range images"),
            )
            .arg(out_arg()),
    )
    .subcommand(
        Command::new("match")
            .about("Count ratio-test matches between two descriptor files")
            .arg(Arg::new("a").required(true).value_parser(value_parser!(PathBuf)))
            .arg(Arg::new("b").required(true).value_parser(value_parser!(PathBuf))),
    )
    .subcommand(
        Command::new("evaluate")
            .about("Run identification protocols over a descriptor directory")
            .arg(manifest_arg())
            .arg(
                Arg::new("descriptors")
                    .long("descriptors")
                    .required(true)
                    .value_parser(value_parser!(PathBuf))
                    .help("directory of .suld files named <subject>_<scan>.suld"),
            )
            .arg(
                Arg::new("protocol")
                    .long("protocol")
                    .required(true)
                    .action(ArgAction::Append)
                    .value_delimiter(',')
                    .value_parser(|s: &str| s.parse::<Protocol>())
                    .help(format!("one or more of {}", Protocol::NAMES.join(", "))),
            )
            .arg(
                Arg::new("json")
                    .long("json")
                    .action(ArgAction::SetTrue)
                    .help("print the report as JSON"),
            ),
    )
}

fn manifest_arg() -> Arg {
    Arg::new("manifest")
        .long("manifest")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("tab-separated scan manifest")
}

fn out_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .short('o')
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("output directory")
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).with_context(|| format!("--{}", flag_name(key)))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let jobs = *m.get_one::<usize>("jobs").expect("has default");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let path = |id: &str| m.get_one::<PathBuf>(id).expect("required").clone();
    pool.install(|| match name {
        "synth" => commands::synth(
            &cfg,
            *m.get_one::<u64>("subjects").expect("required") as usize,
            *m.get_one::<u64>("scans").expect("required") as usize,
            *m.get_one::<u64>("seed").expect("has default"),
            &path("out"),
        ),
        "preprocess" => commands::preprocess(&cfg, &path("manifest"), &path("out")),
        "describe" => commands::describe(&cfg, &path("input"), &path("out")),
        "match" => commands::match_pair(&cfg, &path("a"), &path("b")),
        "evaluate" => {
            let protocols: Vec<Protocol> = m.get_many::<Protocol>("protocol").expect("required").cloned().collect();
            commands::evaluate(&cfg, &path("manifest"), &path("descriptors"), &protocols, m.get_flag("json"))
        }
        other => unreachable!("subcommand {other} is not registered"),
    })
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let level = if sub.get_flag("verbose") { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_reach_subcommands() {
        let m = cli()
            .try_get_matches_from(["rangeface", "match", "a.suld", "b.suld", "--matcher-ratio", "0.6", "-j", "2"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = run_config(sub).unwrap();
        assert_eq!(cfg.pipeline.matcher.ratio_threshold, 0.6);
        assert_eq!(*sub.get_one::<usize>("jobs").unwrap(), 2);
    }

    #[test]
    fn protocol_list_parses() {
        let m = cli()
            .try_get_matches_from([
                "rangeface", "evaluate", "--manifest", "m", "--descriptors", "d", "--protocol", "t1,loo", "--protocol", "T5",
            ])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let names: Vec<String> = sub.get_many::<Protocol>("protocol").unwrap().map(|p| p.name().to_string()).collect();
        assert_eq!(names, ["T1", "LOO", "T5"]);
    }

    #[test]
    fn unknown_protocol_is_a_usage_error() {
        let e = cli()
            .try_get_matches_from(["rangeface", "evaluate", "--manifest", "m", "--descriptors", "d", "--protocol", "T9"])
            .unwrap_err();
        assert_eq!(e.kind(), clap::error::ErrorKind::ValueValidation);
    }
}
