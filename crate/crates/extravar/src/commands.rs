//! The four subcommands, callable in-process.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use extravar_core::model::{Generation, HeadExecutor, Sequential, ToyModel};
use extravar_core::probe::{apply_intervention, Intervention, InterventionKind};
use extravar_core::reference::{capture_reference, ReferenceEntropyStore};
use extravar_core::rope::{banded_tables, Axis, Band};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, write_file};
use crate::parallel::Rayon;

fn executor(cfg: &RunConfig) -> &'static dyn HeadExecutor {
    if cfg.parallel {
        &Rayon
    } else {
        &Sequential
    }
}

/// Writes the band-labelled frequency table to `<out>/freq_table.csv`.
/// `axis` is `height`, `width`, `oned` or `all`.
pub fn freq_table(cfg: &RunConfig, axis: &str, out: &Path) -> Result<PathBuf> {
    let tables = banded_tables(&cfg.rope()).map_err(|e| CliError::config(e.to_string()))?;
    let wanted: Vec<_> = match axis {
        "all" => tables,
        name => {
            let picked: Vec<_> = tables.into_iter().filter(|t| t.axis.name() == name).collect();
            if picked.is_empty() {
                let modes = [Axis::Height, Axis::Width, Axis::OneD].map(Axis::name).join(", ");
                return Err(CliError::config(format!(
                    "axis {name:?} not available for this rope.axis_mode (axes: {modes}, all)"
                )));
            }
            picked
        }
    };
    let path = out.join("freq_table.csv");
    write_file(&path, formats::frequency_csv(&wanted))?;
    Ok(path)
}

/// Captures reference entropies at the training side with seed `cfg.seed`
/// and writes them to `<out>/refs/<config-hash>.entropy`.
pub fn capture_ref(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    if cfg.target_side != cfg.model.train_side {
        return Err(CliError::config(format!(
            "reference capture runs at the training side; run.target_side = {} but model.train_side = {}",
            cfg.target_side, cfg.model.train_side
        )));
    }
    let model = ToyModel::new(cfg.model_config()?)?;
    let store = capture_reference(&model, cfg.seed, cfg.reference_samples, executor(cfg))?;
    let path = formats::reference_path(out, &model.config().config_hash());
    formats::save_reference(&store, &path)?;
    Ok(path)
}

/// Loads the configured reference store, checking its hash if the config
/// pins one. Returns the store and its file hash.
fn load_reference(cfg: &RunConfig) -> Result<Option<(ReferenceEntropyStore, String)>> {
    let Some(path) = &cfg.reference else {
        if cfg.calibrate {
            return Err(CliError::Missing(
                "calibration is on but no reference store was given (--ref)".into(),
            ));
        }
        return Ok(None);
    };
    let hash = formats::file_sha256(path)?;
    if let Some(expected) = &cfg.reference_sha256 {
        if *expected != hash {
            return Err(CliError::Missing(format!(
                "{} has sha256 {hash}, the config expects {expected}",
                path.display()
            )));
        }
    }
    Ok(Some((formats::load_reference(path)?, hash)))
}

/// Outcome of [`generate`].
#[derive(Debug)]
pub struct GenerateReport {
    pub run: Generation,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn manifest(cfg: &RunConfig, hash: Option<String>) -> String {
    let mut cfg = cfg.clone();
    if hash.is_some() {
        cfg.reference_sha256 = hash;
    }
    let mut text = String::new();
    let _ = writeln!(text, "# extravar run manifest");
    let _ = writeln!(text, "# model config hash {}", cfg.model.config_hash());
    text.push_str(&cfg.render());
    text
}

/// Runs one generation and writes its artifacts under `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<GenerateReport> {
    let model = ToyModel::new(cfg.model_config()?)?;
    let reference = load_reference(cfg)?;
    let hash = reference.as_ref().map(|(_, h)| h.clone());
    let plan = cfg.plan(reference.map(|(s, _)| s))?;
    let run = model.generate(&plan, executor(cfg))?;

    let mut files = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out.join(name);
        write_file(&path, bytes)?;
        files.push(path);
        Ok(())
    };
    put("manifest.cfg".into(), manifest(cfg, hash).into_bytes())?;
    put("trace.csv".into(), formats::trace_csv(&run).into_bytes())?;
    put("stats.csv".into(), formats::stats_csv(&run).into_bytes())?;
    put("norms.csv".into(), formats::norms_csv(&run).into_bytes())?;
    for (k, map) in run.token_maps.iter().enumerate() {
        put(format!("tokens/step_{:02}.txt", k + 1), formats::token_grid(map).into_bytes())?;
    }
    for (&(l, h, k), m) in &run.trace.maps {
        put(format!("maps/attn_l{l}_h{h}_k{k:02}.bin"), formats::encode_matrix(m))?;
    }
    let warnings = run.trace.warnings.clone();
    Ok(GenerateReport { run, warnings, files })
}

/// Parses `kind:band:first-last[:T]` where kind is `nope`, `force` or
/// `zero`, and `T` (force only) is `<f>`, `L/<f>`, `T=<f>` or `T=L/<f>`.
pub fn parse_intervention(spec: &str, train_side: usize, total_steps: usize) -> Result<Intervention> {
    let bad = |msg: String| CliError::config(format!("intervention {spec:?}: {msg}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad("expected kind:band:first-last[:T]".into()));
    }
    let band = Band::parse(parts[1]).ok_or_else(|| bad(format!("unknown band {:?}", parts[1])))?;
    let (a, b) = parts[2]
        .split_once('-')
        .ok_or_else(|| bad(format!("step range {:?} is not first-last", parts[2])))?;
    let step = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("bad step {s:?}")));
    let (first_step, last_step) = (step(a)?, step(b)?);
    let wavelength = |t: &str| -> Result<f64> {
        let t = t.strip_prefix("T=").unwrap_or(t);
        let v = match t.strip_prefix("L/") {
            Some(div) => {
                let div: f64 = div.parse().map_err(|_| bad(format!("bad divisor {div:?}")))?;
                train_side as f64 / div
            }
            None => t.parse().map_err(|_| bad(format!("bad wavelength {t:?}")))?,
        };
        Ok(v)
    };
    let kind = match (parts[0], parts.get(3)) {
        ("nope" | "nope_substitute", None) => InterventionKind::NopeSubstitute,
        ("zero" | "zero_qk" | "zero_qk_features", None) => InterventionKind::ZeroQkFeatures,
        ("force" | "force_wavelength", Some(t)) => InterventionKind::ForceWavelength(wavelength(t)?),
        ("force" | "force_wavelength", None) => return Err(bad("force needs a wavelength".into())),
        ("nope" | "nope_substitute" | "zero" | "zero_qk" | "zero_qk_features", Some(_)) => {
            return Err(bad("only force takes a wavelength".into()))
        }
        (other, _) => return Err(bad(format!("unknown kind {other:?}"))),
    };
    let iv = Intervention {
        kind,
        band,
        first_step,
        last_step,
    };
    iv.validate(total_steps).map_err(|e| bad(e.to_string()))?;
    Ok(iv)
}

#[derive(Debug)]
pub struct ProbeReport {
    pub intervention: Intervention,
    pub base: Generation,
    pub probed: Generation,
    pub files: Vec<PathBuf>,
}

/// Runs the configured plan with and without `cfg.intervention` and writes
/// norm and frequency deltas.
pub fn probe(cfg: &RunConfig, out: &Path) -> Result<ProbeReport> {
    let spec = cfg
        .intervention
        .as_deref()
        .ok_or_else(|| CliError::config("no intervention given (--intervention)"))?;
    let model = ToyModel::new(cfg.model_config()?)?;
    let iv = parse_intervention(spec, cfg.model.train_side, cfg.model.total_steps)?;
    let reference = load_reference(cfg)?;
    let hash = reference.as_ref().map(|(_, h)| h.clone());
    let plan = cfg.plan(reference.map(|(s, _)| s))?;
    let probed_plan = apply_intervention(&plan, iv, model.config())?;
    let base = model.generate(&plan, executor(cfg))?;
    let probed = model.generate(&probed_plan, executor(cfg))?;

    let mut norms = String::from("step,band,base_norm,probed_norm,delta\n");
    for ((k, band, a), (_, _, b)) in formats::mean_band_norms(&base)
        .into_iter()
        .zip(formats::mean_band_norms(&probed))
    {
        let _ = writeln!(norms, "{k},{},{a:?},{b:?},{:?}", band.name(), b - a);
    }
    let mut angles = String::from("step,axis,j,band,base_theta,probed_theta,delta\n");
    for (x, y) in base.trace.steps.iter().zip(&probed.trace.steps) {
        for (axis, table) in model.tables().iter().enumerate() {
            for p in &table.pairs {
                let (a, b) = (x.frequencies[axis][p.index - 1], y.frequencies[axis][p.index - 1]);
                let band = p.band.map(Band::name).unwrap_or("");
                let _ = writeln!(
                    angles,
                    "{},{},{},{band},{a:?},{b:?},{:?}",
                    x.step,
                    table.axis.name(),
                    p.index,
                    b - a
                );
            }
        }
    }
    let mut files = Vec::new();
    for (name, text) in [
        ("manifest.cfg", manifest(cfg, hash)),
        ("probe_norms.csv", norms),
        ("probe_angles.csv", angles),
    ] {
        let path = out.join(name);
        write_file(&path, text)?;
        files.push(path);
    }
    Ok(ProbeReport {
        intervention: iv,
        base,
        probed,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intervention_specs() {
        let iv = parse_intervention("force:mid:6-9:T=L/6", 16, 13).unwrap();
        assert_eq!(iv.kind, InterventionKind::ForceWavelength(16.0 / 6.0));
        assert_eq!((iv.band, iv.first_step, iv.last_step), (Band::Mid, 6, 9));
        assert_eq!(
            parse_intervention("force:low:1-2:3.5", 16, 13).unwrap().kind,
            InterventionKind::ForceWavelength(3.5)
        );
        assert_eq!(
            parse_intervention("nope:verylow:1-13", 16, 13).unwrap().kind,
            InterventionKind::NopeSubstitute
        );
        assert_eq!(
            parse_intervention("zero:high:10-13", 16, 13).unwrap().kind,
            InterventionKind::ZeroQkFeatures
        );
        for bad in [
            "force:mid:0-99",
            "force:mid:6-9",
            "nope:verylow:1-13:T=4",
            "force:mid:6-9:T=0",
            "blur:mid:1-2",
            "nope:ultra:1-2",
            "nope:mid:3",
            "nope:mid",
            "nope:mid:5-4",
        ] {
            assert!(matches!(parse_intervention(bad, 16, 13), Err(CliError::Config(_))), "{bad}");
        }
    }
}
