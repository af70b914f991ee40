use std::fs;
use std::path::{Path, PathBuf};

use gbtd_core::archspec::{self, builtin, ArchSpec, CountConvention, FlopConvention};
use gbtd_core::convmap::{direct_conv2d, factored_forward, FactoredConvUnit};
use gbtd_core::cru::{self, CollectiveGroup};
use gbtd_core::decomp::archive::{self, sha256_hex};
use gbtd_core::decomp::{btd_als, random_btd, AlsConfig, ModeRank};
use gbtd_core::{io, relative_error, DenseTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::cli::{AlsArgs, CountArgs, DecomposeArgs, SynthArgs, VerifyArgs};

/// Largest relative error `verify` accepts.
pub const VERIFY_TOLERANCE: f64 = 1e-5;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(gbtd_core::Error),
}

impl From<gbtd_core::Error> for Failure {
    fn from(e: gbtd_core::Error) -> Self {
        Self::Core(e)
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// A finished command: JSON for stdout, prose for stderr, and whether the
/// command's check passed.
pub struct Report {
    pub json: Value,
    pub summary: String,
    pub passed: bool,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `--rank`. Entries are counts or `*`/`_` for an unfactorized mode.
/// With `modes` (1-based) the entries apply to those modes only, and a single
/// entry is repeated for all of them; other modes stay unfactorized.
pub fn parse_ranks(rank: &str, modes: Option<&[usize]>, order: usize) -> Outcome<Vec<ModeRank>> {
    let entries = rank
        .split(',')
        .map(|tok| match tok.trim() {
            "*" | "_" => Ok(None),
            t => t
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .map(Some)
                .ok_or_else(|| usage(format!("invalid rank entry {t:?}"))),
        })
        .collect::<Outcome<Vec<_>>>()?;
    let Some(modes) = modes else {
        if entries.len() != order {
            return Err(usage(format!(
                "--rank has {} entries for an order-{order} tensor",
                entries.len()
            )));
        }
        return Ok(entries);
    };
    let mut ranks = vec![None; order];
    if entries.len() != 1 && entries.len() != modes.len() {
        return Err(usage(format!(
            "--rank has {} entries for {} modes",
            entries.len(),
            modes.len()
        )));
    }
    for (i, &m) in modes.iter().enumerate() {
        if m == 0 || m > order {
            return Err(usage(format!("mode {m} out of range 1..={order}")));
        }
        if ranks[m - 1].is_some() {
            return Err(usage(format!("mode {m} listed twice")));
        }
        ranks[m - 1] = entries[if entries.len() == 1 { 0 } else { i }];
    }
    Ok(ranks)
}

fn als_config(a: &AlsArgs) -> AlsConfig {
    AlsConfig {
        max_sweeps: a.sweeps,
        tol: a.tol,
        seed: a.seed,
        ridge: a.ridge,
        restarts: a.restarts,
        ..AlsConfig::default()
    }
}

fn als_json(cfg: &AlsConfig) -> Value {
    json!({
        "max_sweeps": cfg.max_sweeps,
        "tol": cfg.tol,
        "ridge": cfg.ridge,
        "restarts": cfg.restarts,
        "seed": cfg.seed,
    })
}

fn file_digest(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| {
        Failure::Core(gbtd_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    Ok(sha256_hex(&bytes))
}

fn ranks_json(ranks: &[ModeRank]) -> Value {
    json!(ranks)
}

pub fn synth(a: &SynthArgs) -> Outcome<Report> {
    let ranks = parse_ranks(&a.rank, a.modes.as_deref(), a.shape.len())?;
    let d = random_btd(&a.shape, a.terms, &ranks, a.seed)?;
    let tensor = d.reconstruct();
    io::write_tensor(&a.out, &tensor)?;
    let truth = a
        .truth
        .clone()
        .unwrap_or_else(|| a.out.with_extension("truth"));
    archive::write_archive(&truth, &d, &[0.0])?;
    let json = json!({
        "command": "synth",
        "shape": a.shape,
        "terms": a.terms,
        "rank_signature": ranks_json(&ranks),
        "seed": a.seed,
        "tensor": {"path": a.out.display().to_string(), "sha256": file_digest(&a.out)?},
        "truth_archive": truth.display().to_string(),
    });
    let summary = format!(
        "synth: wrote {} (shape {:?}, R={}) and ground truth {}",
        a.out.display(),
        a.shape,
        a.terms,
        truth.display()
    );
    Ok(Report {
        json,
        summary,
        passed: true,
    })
}

pub fn decompose(a: &DecomposeArgs) -> Outcome<Report> {
    let cfg = als_config(&a.als);
    let mut inputs = Vec::new();
    let mut tensors = Vec::new();
    for path in &a.inputs {
        tensors.push(io::read_tensor(path)?);
        inputs.push(json!({"path": path.display().to_string(), "sha256": file_digest(path)?}));
    }
    let first = &tensors[0];
    let ranks = parse_ranks(&a.rank, a.modes.as_deref(), first.ndim())?;
    let (kind, units, fit) = if tensors.len() > 1 {
        if ranks.len() != 4
            || ranks[0].is_some()
            || ranks[1].is_some()
            || ranks[2].is_none()
            || ranks[3].is_none()
        {
            return Err(usage(
                "several inputs are factored collectively and need 4-D kernels with --modes 3,4",
            ));
        }
        let kernels = tensors
            .into_iter()
            .map(gbtd_core::convmap::ConvKernel::new)
            .collect::<Result<Vec<_>, _>>()?;
        let (group, fit) = cru::collective_fit(
            &kernels,
            a.terms,
            ranks[2].unwrap(),
            ranks[3].unwrap(),
            &cfg,
        )?;
        clear_units(&a.out)?;
        cru::write_collective_archive(&a.out, &group, &fit.error_trace, a.window)?;
        ("collective", group.num_units(), fit)
    } else {
        let fit = btd_als(first, a.terms, &ranks, &cfg)?;
        clear_units(&a.out)?;
        archive::write_archive(&a.out, &fit.decomposition, &fit.error_trace)?;
        let conv = FactoredConvUnit::from_decomposition(&fit.decomposition).is_ok();
        (if conv { "factored_conv" } else { "btd" }, 1, fit)
    };
    let json = json!({
        "command": "decompose",
        "inputs": inputs,
        "kind": kind,
        "units": units,
        "terms": a.terms,
        "rank_signature": ranks_json(&ranks),
        "als": als_json(&cfg),
        "error_trace": fit.error_trace,
        "final_error": fit.final_error(),
        "sweeps": fit.error_trace.len(),
        "restart": fit.restart,
        "archive": a.out.display().to_string(),
    });
    let summary = format!(
        "decompose: {kind} archive {} with R={}, relative error {:.3e} after {} sweeps",
        a.out.display(),
        a.terms,
        fit.final_error(),
        fit.error_trace.len()
    );
    Ok(Report {
        json,
        summary,
        passed: true,
    })
}

/// A stale `units.json` would make a plain archive look collective.
fn clear_units(dir: &Path) -> Outcome<()> {
    let path = dir.join(cru::UNITS_FILE);
    match fs::remove_file(&path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Failure::Core(gbtd_core::Error::Io { path, source: e })),
    }
}

/// Trial `t` draws its input from stream `t` of a ChaCha8 generator seeded
/// with `seed`, so results do not depend on how trials are scheduled.
fn trial_input(seed: u64, trial: usize, shape: &[usize]) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0)).expect("finite")
}

fn max_error(errors: &[f64]) -> f64 {
    errors.iter().cloned().fold(0.0, f64::max)
}

fn as_format(e: gbtd_core::Error) -> Failure {
    match e {
        e @ (gbtd_core::Error::Format { .. } | gbtd_core::Error::Io { .. }) => Failure::Core(e),
        other => Failure::Core(gbtd_core::Error::Format {
            what: "archive".into(),
            reason: other.to_string(),
        }),
    }
}

pub fn verify(a: &VerifyArgs) -> Outcome<Report> {
    if a.trials == 0 || a.size == 0 {
        return Err(usage("--trials and --size must be positive"));
    }
    let dir = &a.archive;
    let (kind, per_unit): (&str, Vec<Vec<f64>>) = if cru::is_collective_archive(dir) {
        let (group, _, _) = cru::read_collective_archive(dir).map_err(as_format)?;
        ("collective", verify_group(&group, a)?)
    } else {
        let (d, _) = archive::read_archive(dir).map_err(as_format)?;
        let unit = FactoredConvUnit::from_decomposition(&d).map_err(as_format)?;
        let kernel = unit.compose();
        let shape = [a.size, a.size, unit.in_channels()];
        let errors = (0..a.trials)
            .into_par_iter()
            .map(|t| {
                let u = trial_input(a.seed, t, &shape);
                relative_error(&factored_forward(&u, &unit)?, &direct_conv2d(&u, &kernel)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        ("factored_conv", vec![errors])
    };
    let worst = per_unit.iter().map(|e| max_error(e)).fold(0.0, f64::max);
    let passed = worst <= VERIFY_TOLERANCE;
    let units: Vec<Value> = per_unit
        .iter()
        .enumerate()
        .map(|(l, e)| json!({"unit": l + 1, "max_relative_error": max_error(e), "trial_errors": e}))
        .collect();
    let json = json!({
        "command": "verify",
        "archive": dir.display().to_string(),
        "meta_sha256": file_digest(&dir.join(archive::META_FILE))?,
        "kind": kind,
        "trials": a.trials,
        "seed": a.seed,
        "size": a.size,
        "tolerance": VERIFY_TOLERANCE,
        "max_relative_error": worst,
        "units": units,
        "status": if passed { "PASS" } else { "FAIL" },
    });
    let summary = format!(
        "verify: {} {kind} archive, {} unit(s), max relative error {worst:.3e} over {} trials",
        if passed { "PASS" } else { "FAIL" },
        per_unit.len(),
        a.trials
    );
    Ok(Report {
        json,
        summary,
        passed,
    })
}

fn verify_group(group: &CollectiveGroup, a: &VerifyArgs) -> Outcome<Vec<Vec<f64>>> {
    let shape = [a.size, a.size, group.in_channels()];
    (0..group.num_units())
        .map(|l| {
            let kernel = group.unit_kernel(l)?;
            let extra = group.extra_pointwise().map(|e| &e[l]);
            (0..a.trials)
                .into_par_iter()
                .map(|t| {
                    let u = trial_input(a.seed, t, &shape);
                    let mut want = direct_conv2d(&u, &kernel)?;
                    if let Some(e) = extra {
                        want = e.apply(&want)?;
                    }
                    relative_error(&group.unit_forward(l, &u)?, &want)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::from)
        })
        .collect()
}

fn load_arch(arch: &str) -> Outcome<ArchSpec> {
    let path = PathBuf::from(arch);
    if path.is_file() {
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::Core(gbtd_core::Error::Io { path, source: e }))?;
        Ok(ArchSpec::from_json(&text)?)
    } else {
        Ok(builtin(arch)?)
    }
}

pub fn count(a: &CountArgs) -> Outcome<Report> {
    let spec = load_arch(&a.arch)?;
    let conv = CountConvention {
        flops: FlopConvention::from_name(&a.convention).map_err(|e| usage(e.to_string()))?,
        include_norm: !a.no_norm,
        sharing: !a.no_sharing,
        ..CountConvention::default()
    };
    let report = archspec::count(&spec, a.input_size, &conv)?;
    let mut json = serde_json::to_value(&report).map_err(gbtd_core::Error::from)?;
    json["command"] = json!("count");
    json["arch"] = json!(a.arch);
    let summary = format!(
        "count: {} has {:.3}e6 parameters, {:.3}e9 FLOPs ({:?}), {} MB",
        report.name,
        report.params as f64 / 1e6,
        report.flops as f64 / 1e9,
        conv.flops,
        report.model_size_mb
    );
    Ok(Report {
        json,
        summary,
        passed: true,
    })
}

pub fn arch(name: &str) -> Outcome<Report> {
    let spec = load_arch(name)?;
    let json = serde_json::to_value(&spec).map_err(gbtd_core::Error::from)?;
    Ok(Report {
        summary: format!("arch: {} with {} stages", spec.name, spec.stages.len()),
        json,
        passed: true,
    })
}
