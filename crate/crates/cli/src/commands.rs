use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aoe_core::analysis::{
    emit_heatmap, emit_histogram, reasoning_frequency_file, summarize_diffs, HistogramSpec,
};
use aoe_core::fixtures::{generate_base, generate_variant, FixtureSpec};
use aoe_core::merge::{
    compute_diffs, dry_run_report, execute_merge, load_or_compute_diffs, plan_merge,
    threshold_sweep, validate_compatibility, DiffCache, DiffRecord, MergeConfig, MergePlan,
};
use aoe_core::parallel::ExecOptions;
use aoe_core::recipe::{load_scheme, Recipe};
use aoe_core::safetensors::{
    compare_checkpoints, open_checkpoint, open_checkpoint_unchecked, validate_checkpoint,
    CheckpointIndex, INDEX_SUFFIX, SHARD_SUFFIX,
};
use aoe_core::taxonomy::NamingScheme;
use serde::Serialize;

use crate::{
    Cli, Command, DiffArgs, FixtureArgs, Global, MergeArgs, Overrides, PlanArgs, ReportArgs,
    ReportKind, SweepArgs, ThinkFreqArgs, ValidateArgs, EXIT_VALIDATION,
};

const REPORT_FILE: &str = "merge_report.json";

pub fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Diff(a) => diff(g, a),
        Command::Plan(a) => plan(g, a),
        Command::Merge(a) => merge(g, a),
        Command::Sweep(a) => sweep(g, a),
        Command::Report(a) => report(g, a),
        Command::ThinkFreq(a) => think_freq(a),
        Command::Validate(a) => validate(a),
        Command::Fixture(a) => fixture(a),
    }
}

fn exec_options(g: &Global) -> ExecOptions {
    ExecOptions {
        threads: g.threads,
        max_resident_bytes: g.max_resident_bytes,
    }
}

fn default_scheme(g: &Global) -> Result<Option<NamingScheme>> {
    g.scheme
        .as_deref()
        .map(|p| load_scheme(p).with_context(|| format!("loading scheme {}", p.display())))
        .transpose()
}

fn open_models(paths: &[PathBuf]) -> Result<Vec<CheckpointIndex>> {
    paths
        .iter()
        .map(|p| open_checkpoint(p).with_context(|| format!("opening {}", p.display())))
        .collect()
}

fn load_config(g: &Global, recipe: &Path, o: &Overrides) -> Result<MergeConfig> {
    let mut r = Recipe::load(recipe)?;
    if let Some(d) = o.delta {
        r.delta = d;
    }
    if let Some(l) = &o.lambda {
        r.lambdas = l.clone();
    }
    let dir = recipe.parent().unwrap_or(Path::new("."));
    Ok(r.to_config(dir, default_scheme(g)?.as_ref())?)
}

fn diffs_for(
    g: &Global,
    config: &MergeConfig,
    models: &[CheckpointIndex],
    cache: Option<&Path>,
    save: bool,
) -> Result<Vec<DiffRecord>> {
    let opts = exec_options(g);
    if save {
        let (records, reused) = load_or_compute_diffs(cache, models, &config.scheme, &opts)?;
        if reused {
            log::info!("reusing diff cache {}", cache.unwrap().display());
        }
        return Ok(records);
    }
    if let Some(path) = cache.filter(|p| p.is_file()) {
        let c = DiffCache::load(path)?;
        if c.matches(models) {
            return Ok(c.records_for(&config.scheme));
        }
    }
    Ok(compute_diffs(models, &config.scheme, &opts)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn diff(g: &Global, a: &DiffArgs) -> Result<u8> {
    let models = open_models(&a.models)?;
    let report = validate_compatibility(&models);
    if !report.is_empty() {
        eprintln!("models are incompatible:\n{report}");
        return Ok(EXIT_VALIDATION);
    }
    let scheme = default_scheme(g)?.unwrap_or_default();
    let records = compute_diffs(&models, &scheme, &exec_options(g))?;
    DiffCache::new(&models, records.clone())
        .save(&a.out)
        .with_context(|| format!("writing diff cache {}", a.out.display()))?;
    let summary = summarize_diffs(&records);
    if a.json {
        emit(None, &json(&summary)?)?;
    } else {
        print!("{summary}");
    }
    Ok(0)
}

fn build_plan(g: &Global, recipe: &Path, o: &Overrides, save_cache: bool) -> Result<(MergePlan, Vec<CheckpointIndex>)> {
    let config = load_config(g, recipe, o)?;
    let models = open_models(&config.models)?;
    let diffs = diffs_for(g, &config, &models, o.diffs.as_deref(), save_cache)?;
    let plan = plan_merge(&config, &models, &diffs)?;
    Ok((plan, models))
}

fn plan(g: &Global, a: &PlanArgs) -> Result<u8> {
    let (plan, _) = build_plan(g, &a.recipe, &a.overrides, true)?;
    if let Some(out) = &a.out {
        plan.save(out)?;
    }
    if a.json {
        emit(None, &json(&plan)?)?;
    } else {
        println!("{}", plan.summary());
    }
    Ok(0)
}

/// Refuses a non-empty output directory unless `force`, in which case stale
/// checkpoint files and the previous report are removed.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    if !dir.is_dir() {
        bail!("output {} exists and is not a directory", dir.display());
    }
    let entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    if entries.is_empty() {
        return Ok(());
    }
    if !force {
        bail!(
            "output directory {} is not empty (use --force to replace its checkpoint)",
            dir.display()
        );
    }
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(SHARD_SUFFIX) || name.ends_with(INDEX_SUFFIX) || name == REPORT_FILE {
            std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn merge(g: &Global, a: &MergeArgs) -> Result<u8> {
    let (plan, models) = match (&a.plan, &a.recipe) {
        (Some(path), _) => {
            if a.overrides.delta.is_some() || a.overrides.lambda.is_some() {
                bail!(aoe_core::Error::InvalidConfig(
                    "--delta and --lambda cannot change a saved plan".into()
                ));
            }
            let plan = MergePlan::load(path)?;
            let models = open_models(&plan.config.models)?;
            (plan, models)
        }
        (None, Some(recipe)) => build_plan(g, recipe, &a.overrides, !a.dry_run)?,
        (None, None) => unreachable!("clap requires a recipe or --plan"),
    };
    if a.dry_run {
        eprintln!("{}", plan.summary());
        emit(None, &json(&dry_run_report(&plan))?)?;
        return Ok(0);
    }
    prepare_output(&a.out, a.force)?;
    let report = execute_merge(&plan, &models, &a.out, &exec_options(g))?;
    let report_path = a.report.clone().unwrap_or_else(|| a.out.join(REPORT_FILE));
    report.save(&report_path)?;
    eprintln!("{}", plan.summary());
    eprintln!(
        "wrote {} tensors to {} in {} ms ({} warnings)",
        report.tensors.len(),
        a.out.display(),
        report.elapsed_ms,
        report.warnings.len()
    );
    if a.json {
        emit(None, &json(&report)?)?;
    }
    Ok(0)
}

fn sweep(g: &Global, a: &SweepArgs) -> Result<u8> {
    let overrides = Overrides {
        delta: None,
        lambda: None,
        diffs: a.diffs.clone(),
    };
    let config = load_config(g, &a.recipe, &overrides)?;
    if let Some(bad) = a.deltas.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        bail!(aoe_core::Error::InvalidConfig(format!(
            "--deltas: {bad} is not a finite number >= 0"
        )));
    }
    let models = open_models(&config.models)?;
    let diffs = diffs_for(g, &config, &models, a.diffs.as_deref(), true)?;
    let table = threshold_sweep(&diffs, &config, &a.deltas);
    emit(a.out.as_deref(), &table.to_csv())?;
    Ok(0)
}

fn report(g: &Global, a: &ReportArgs) -> Result<u8> {
    if !a.cache.is_file() {
        bail!("diff cache {} does not exist", a.cache.display());
    }
    let cache = DiffCache::load(&a.cache)?;
    let scheme = default_scheme(g)?.unwrap_or_default();
    let records = cache.records_for(&scheme);
    let csv = match a.kind {
        ReportKind::Heatmap => emit_heatmap(&records, a.aggregate).to_csv(),
        ReportKind::Histogram => {
            let spec = match (&a.edges, &a.log_bins) {
                (Some(edges), _) => HistogramSpec::new(edges.clone(), a.cutoff)?,
                (None, Some(b)) => {
                    if b.len() != 3 || b[2].fract() != 0.0 || b[2] < 1.0 {
                        bail!(aoe_core::Error::InvalidHistogram(format!(
                            "--log-bins takes LO,HI,COUNT with a positive integer COUNT, got {b:?}"
                        )));
                    }
                    HistogramSpec::log_spaced(b[0], b[1], b[2] as usize, a.cutoff)?
                }
                (None, None) => HistogramSpec::log_spaced(1e-3, 1.0, 30, a.cutoff)?,
            };
            let h = emit_histogram(&records, &spec)?;
            eprintln!(
                "{} records: {} binned, {} excluded ({} below cutoff, {} out of range, {} non-finite)",
                h.total,
                h.included(),
                h.excluded,
                h.below_cutoff,
                h.out_of_range,
                h.non_finite
            );
            h.to_csv()
        }
    };
    emit(a.out.as_deref(), &csv)?;
    Ok(0)
}

fn think_freq(a: &ThinkFreqArgs) -> Result<u8> {
    let stats = reasoning_frequency_file(&a.transcript, &a.open_tag, &a.close_tag)?;
    if stats.malformed > 0 {
        eprintln!("skipped {} malformed records", stats.malformed);
    }
    let text = json(&stats)?;
    if let Some(out) = &a.out {
        emit(Some(out), &text)?;
    }
    emit(None, &text)?;
    Ok(0)
}

#[derive(Serialize)]
struct ValidationOutput {
    path: PathBuf,
    error: Option<String>,
    violations: Vec<aoe_core::safetensors::Violation>,
}

fn validate(a: &ValidateArgs) -> Result<u8> {
    let mut outputs = Vec::new();
    let mut opened = Vec::new();
    for p in &a.paths {
        match open_checkpoint_unchecked(p) {
            Ok(index) => {
                let report = validate_checkpoint(&index);
                outputs.push(ValidationOutput {
                    path: p.clone(),
                    error: None,
                    violations: report.violations,
                });
                opened.push(index);
            }
            Err(e) => outputs.push(ValidationOutput {
                path: p.clone(),
                error: Some(e.to_string()),
                violations: Vec::new(),
            }),
        }
    }
    let mut compatibility = Vec::new();
    if opened.len() > 1 {
        let refs: Vec<&CheckpointIndex> = opened.iter().collect();
        compatibility = compare_checkpoints(&refs).violations;
    }
    let failed = outputs.iter().any(|o| o.error.is_some() || !o.violations.is_empty())
        || !compatibility.is_empty();
    if a.json {
        #[derive(Serialize)]
        struct All<'a> {
            checkpoints: &'a [ValidationOutput],
            compatibility: &'a [aoe_core::safetensors::Violation],
            ok: bool,
        }
        emit(
            None,
            &json(&All {
                checkpoints: &outputs,
                compatibility: &compatibility,
                ok: !failed,
            })?,
        )?;
    } else {
        for o in &outputs {
            match (&o.error, o.violations.is_empty()) {
                (Some(e), _) => println!("{}: unreadable: {e}", o.path.display()),
                (None, true) => println!("{}: ok", o.path.display()),
                (None, false) => {
                    println!("{}: {} violations", o.path.display(), o.violations.len());
                    for v in &o.violations {
                        println!("  {v}");
                    }
                }
            }
        }
        if !compatibility.is_empty() {
            println!("compatibility: {} violations", compatibility.len());
            for v in &compatibility {
                println!("  {v}");
            }
        }
    }
    Ok(if failed { EXIT_VALIDATION } else { 0 })
}

fn fixture(a: &FixtureArgs) -> Result<u8> {
    let spec = FixtureSpec::load(&a.spec)?;
    prepare_output(&a.out, false)?;
    let (base, manifest) = generate_base(&spec, &a.out.join("base"))?;
    let (_, expected) = generate_variant(&spec, &spec.perturbations, &a.out.join("variant"))?;
    let perturbed = expected.tensors.values().filter(|e| e.expected_diff != 0.0).count();
    eprintln!(
        "wrote {} tensors in {} shard(s), {} parameters; {} perturbed in the variant",
        manifest.tensors.len(),
        base.shards.len(),
        spec.parameter_count()?,
        perturbed
    );
    Ok(0)
}
