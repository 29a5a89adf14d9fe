use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand, ValueEnum};
use extravar::config::{Assignments, RunConfig};
use extravar::{commands, CliError};

/// Stage-aware RoPE and entropy calibration for a toy scale-wise transformer.
#[derive(Parser)]
#[command(name = "extravar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory [default: $EXTRAVAR_OUT or ./out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    All,
    Height,
    Width,
    Oned,
}

#[derive(Subcommand)]
enum Command {
    /// Write the band-labelled RoPE frequency table.
    FreqTable {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
    },
    /// Capture training-resolution reference entropies.
    CaptureRef {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate token maps, possibly at an extrapolated side.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Compare a run with and without one band intervention.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        /// `kind:band:first-last[:T]`, e.g. `force:mid:6-9:T=L/6`.
        #[arg(long)]
        intervention: Option<String>,
    },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    target_side: Option<usize>,
    /// none, pi, ntk, yarn or stage-aware.
    #[arg(long)]
    remap: Option<String>,
    #[arg(long, value_enum)]
    calibrate: Option<OnOff>,
    /// Reference entropy file.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep attention maps matching `layer:head:step` (`*` for any).
    #[arg(long)]
    retain_maps: Option<String>,
}

impl RunFlags {
    fn pairs(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(v) = self.target_side {
            out.push(format!("run.target_side={v}"));
        }
        if let Some(v) = &self.remap {
            out.push(format!("run.remap={v}"));
        }
        if let Some(v) = self.calibrate {
            out.push(format!("run.calibrate={}", if matches!(v, OnOff::On) { "on" } else { "off" }));
        }
        if let Some(v) = &self.reference {
            out.push(format!("run.ref={}", v.display()));
        }
        if let Some(v) = self.seed {
            out.push(format!("run.seed={v}"));
        }
        if let Some(v) = &self.retain_maps {
            out.push(format!("run.retain_maps={v}"));
        }
        out
    }
}

fn load(common: &Common, extra: &[String]) -> Result<(RunConfig, PathBuf), CliError> {
    let mut a = match &common.config {
        Some(p) => Assignments::load(p)?,
        None => Assignments::default(),
    };
    for pair in common.sets.iter().chain(extra) {
        a.set_pair(pair)?;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("EXTRAVAR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((RunConfig::from_assignments(&a)?, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FreqTable { common, axis } => {
            let (cfg, out) = load(&common, &[])?;
            let axis = match axis {
                AxisArg::All => "all",
                AxisArg::Height => "height",
                AxisArg::Width => "width",
                AxisArg::Oned => "oned",
            };
            println!("{}", commands::freq_table(&cfg, axis, &out)?.display());
        }
        Command::CaptureRef { common, seed } => {
            let extra: Vec<String> = seed.map(|s| format!("run.seed={s}")).into_iter().collect();
            let (cfg, out) = load(&common, &extra)?;
            println!("{}", commands::capture_ref(&cfg, &out)?.display());
        }
        Command::Generate { common, run } => {
            let (cfg, out) = load(&common, &run.pairs())?;
            let report = commands::generate(&cfg, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", out.display());
        }
        Command::Probe {
            common,
            run,
            intervention,
        } => {
            let mut extra = run.pairs();
            if let Some(iv) = intervention {
                extra.push(format!("probe.intervention={iv}"));
            }
            let (cfg, out) = load(&common, &extra)?;
            let report = commands::probe(&cfg, &out)?;
            println!("{} -> {}", report.intervention, out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        process::exit(e.exit_code() as i32);
    }
}
