use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use i2p::config::{ConfigFile, RunConfig, FIELDS};
use i2p::dataset::ViewCache;
use i2p::exec::Threaded;
use i2p::formats::{load_checkpoint, write_file};
use i2p::run::{
    expand_grid, file_grid, per_class_csv, run_grid, run_pretrain, run_probe, run_render,
    summarize, sweep_grid, write_provenance, CHECKPOINT_FILE,
};
use i2p::{RunError, RunResult};
use i2p_core::model::I2pMae;

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn field_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("key = value configuration file; flags override it")];
    for (key, default, help) in FIELDS {
        let mut a = Arg::new(*key)
            .long(flag_name(key))
            .value_name("VALUE")
            .help(format!("{help} [{key}, default {default}]"));
        a = match *key {
            "probe.descriptor" => a.visible_alias("descriptor"),
            "output.dir" => a.visible_alias("out"),
            _ => a,
        };
        args.push(a);
    }
    args
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).args(field_args())
    };
    Command::new("i2p")
        .about("Image-to-point masked autoencoder pre-training and probing at desk scale")
        .long_about(
            "Image-to-point masked autoencoder pre-training and probing at desk scale.\n\n\
             Exit status: 0 on success, 2 for configuration or input errors, 3 when training hits a \
             non-finite value, 1 for I/O failures. I2P_THREADS sets the number of worker threads (default 1).",
        )
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("render", "Write depth, saliency and masked-token images of one sample"))
        .subcommand(sub("pretrain", "Pre-train and write a checkpoint and per-epoch metrics"))
        .subcommand(
            sub("probe", "Fit a linear SVM on frozen encoder features and report test accuracy").arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("checkpoint to probe [default <output.dir>/checkpoint.i2pt]"),
            ),
        )
        .subcommand(
            sub("ablate", "Pre-train and probe every point of a grid under every seed").arg(
                Arg::new("grid")
                    .long("grid")
                    .value_name("KEY=V1,V2")
                    .action(ArgAction::Append)
                    .help("grid axis; adds to grid.<key> lines of the config file"),
            ),
        )
        .subcommand(sub("sweep-data", "Pre-train and probe on growing fractions of the pre-training set"))
}

struct Resolved {
    cfg: RunConfig,
    file: Option<(PathBuf, String, ConfigFile)>,
    flags: Vec<(String, String)>,
}

fn resolve(m: &ArgMatches) -> RunResult<Resolved> {
    let mut cfg = RunConfig::default();
    let file = match m.get_one::<PathBuf>("config") {
        Some(path) => {
            let (parsed, text) = ConfigFile::read(path)?;
            for (k, v) in &parsed.entries {
                cfg.set(k, v)?;
            }
            Some((path.clone(), text, parsed))
        }
        None => None,
    };
    let mut flags = Vec::new();
    for (key, _, _) in FIELDS {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            let v = m.get_one::<String>(key).expect("flag has a value");
            cfg.set(key, v)?;
            flags.push((key.to_string(), v.clone()));
        }
    }
    Ok(Resolved { cfg, file, flags })
}

fn provenance(r: &Resolved, extra: &[(String, String)]) -> RunResult<()> {
    let mut flags = r.flags.clone();
    flags.extend_from_slice(extra);
    write_provenance(
        &r.cfg,
        r.file.as_ref().map(|(p, t, _)| (p.as_path(), t.as_str())),
        &flags,
    )
}

fn parse_grid_flag(s: &str) -> RunResult<(String, Vec<String>)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("--grid expects KEY=V1,V2, got '{s}'")))?;
    let values = v
        .split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect();
    Ok((k.trim().to_string(), values))
}

fn print_epoch(m: &i2p_core::train::EpochMetrics) {
    eprintln!(
        "epoch {:>4}  lr {:.3e}  loss_3d {:.6}  loss_2d {:.6}  total {:.6}",
        m.epoch, m.lr, m.loss_3d, m.loss_2d, m.loss_total
    );
}

fn run(name: &str, m: &ArgMatches) -> RunResult<()> {
    let r = resolve(m)?;
    let cfg = &r.cfg;
    let executor = Threaded::from_env();
    let mut cache = ViewCache::new();
    match name {
        "render" => {
            cfg.validate()?;
            provenance(&r, &[])?;
            for p in run_render(cfg)? {
                println!("{}", p.display());
            }
        }
        "pretrain" => {
            cfg.validate()?;
            provenance(&r, &[])?;
            let out = run_pretrain(
                cfg,
                &mut cache,
                &executor,
                Some(&cfg.out_dir),
                &mut print_epoch,
            )?;
            let last = out.metrics.last().expect("at least one epoch");
            println!(
                "final loss_3d {:.6} loss_2d {:.6} loss_total {:.6}",
                last.loss_3d, last.loss_2d, last.loss_total
            );
            println!("checkpoint {}", cfg.out_dir.join(CHECKPOINT_FILE).display());
        }
        "probe" => {
            cfg.validate()?;
            let ckpt = m
                .get_one::<PathBuf>("checkpoint")
                .cloned()
                .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            if !ckpt.is_file() {
                return Err(RunError::Config(format!(
                    "checkpoint {} does not exist",
                    ckpt.display()
                )));
            }
            let mut model = I2pMae::new(cfg.model_config(), cfg.train.seed)?;
            load_checkpoint(model.params_mut(), &ckpt)?;
            provenance(&r, &[("checkpoint".into(), ckpt.display().to_string())])?;
            let result = run_probe(&model, cfg, &ckpt.display().to_string())?;
            write_file(&cfg.out_dir.join("probe.csv"), &per_class_csv(&result)?)?;
            println!("accuracy {:.4}", result.accuracy);
        }
        "ablate" | "sweep-data" => {
            let grid = if name == "ablate" {
                let mut g = file_grid(r.file.as_ref().map(|(_, _, f)| f));
                for s in m.get_many::<String>("grid").into_iter().flatten() {
                    g.push(parse_grid_flag(s)?);
                }
                g
            } else {
                sweep_grid(cfg)
            };
            let points = expand_grid(cfg, &grid)?;
            let extra: Vec<(String, String)> = m
                .get_many::<String>("grid")
                .into_iter()
                .flatten()
                .map(|s| ("grid".to_string(), s.clone()))
                .collect();
            provenance(&r, &extra)?;
            let rows = run_grid(
                &points,
                &cfg.seeds,
                &mut cache,
                &executor,
                Some(&cfg.out_dir),
                &mut |row| {
                    eprintln!(
                        "{}  seed {}  accuracy {:.4}",
                        row.config_id, row.seed, row.accuracy
                    )
                },
            )?;
            for (id, n, mean, std) in summarize(&rows) {
                println!("{id}  runs {n}  accuracy {mean:.4} +- {std:.4}");
            }
            println!("results {}", cfg.out_dir.join("results.csv").display());
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
