//! End-to-end acceptance checks against the `aoe` binary. Prints one PASS or
//! FAIL line per criterion and exits non-zero if any fails.

mod fuzz;
mod oracle;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use aoe_core::fixtures::virtual_index;
use aoe_core::safetensors::{open_checkpoint, read_all, write_checkpoint, OutputPolicy, TensorSpec};
use aoe_core::taxonomy::{census, Group, NamingScheme, SubsetSpec};
use oracle::{load_dir, manifest_groups, sha256_hex, RawTensor, Scenario};
use serde_json::{json, Value};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

const DELTA: f64 = 0.0025;

/// Planted difference levels of the main fixture pair, one per group. Router
/// gates include a 4-element bias, too small for noise to land near its
/// sigma, so they get a constant shift.
const LEVELS: [(&str, &str, f64); 5] = [
    ("dense_mlp", "gaussian", 0.001),
    ("attention", "gaussian", 0.002),
    ("shared_expert_mlp", "gaussian", 0.002),
    ("expert_gate", "shift", 0.003),
    ("routed_expert_mlp", "gaussian", 0.004),
];

fn aoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aoe"))
        .args(args)
        .output()
        .expect("spawn aoe")
}

fn aoe_ok(args: &[&str]) -> Result<Output, String> {
    let out = aoe(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "aoe {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

/// Fixture spec text for the main pair: about 2M F32 parameters.
fn main_fixture_spec() -> String {
    let mut text = String::from(
        "layers = 5\ndense_layers = 2\nexperts = 4\nshared_experts = 1\nhidden = 128\n\
         intermediate = 512\nmoe_intermediate = 192\nheads = 4\nhead_dim = 32\nrope_dim = 16\n\
         q_lora_rank = 64\nkv_lora_rank = 32\nvocab = 1024\nshards = 2\nseed = 20250101\n",
    );
    for (i, (group, kind, level)) in LEVELS.iter().enumerate() {
        text.push_str(&format!(
            "\n[[perturbations]]\nkind = \"{kind}\"\nmagnitude = {level}\nseed = {i}\nselect = {{ group = \"{group}\" }}\n"
        ));
    }
    text
}

struct Fixtures {
    root: PathBuf,
    base: PathBuf,
    variant: PathBuf,
    base_tensors: BTreeMap<String, RawTensor>,
    variant_tensors: BTreeMap<String, RawTensor>,
    groups: BTreeMap<String, (String, String)>,
}

fn make_fixtures(root: &Path) -> Result<Fixtures, String> {
    let spec = root.join("pair.toml");
    std::fs::write(&spec, main_fixture_spec()).unwrap();
    let dir = root.join("pair");
    aoe_ok(&["fixture", s(&spec), "-o", s(&dir)])?;
    let (base, variant) = (dir.join("base"), dir.join("variant"));
    Ok(Fixtures {
        root: root.to_path_buf(),
        base_tensors: load_dir(&base),
        variant_tensors: load_dir(&variant),
        groups: manifest_groups(&base),
        base,
        variant,
    })
}

const LAMBDAS: [[f64; 2]; 3] = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
const SUBSETS: [(&str, bool, f64); 3] = [("full", false, 0.0), ("experts", true, 0.0), ("thresholded", false, DELTA)];

fn scenario_name(l: [f64; 2], subset: &str) -> String {
    format!("l{}-{}_{subset}", l[0], l[1])
}

fn recipe(dir: &Path, name: &str, models: &[&Path], lambdas: &[f64], experts_only: bool, delta: f64) -> PathBuf {
    let mode = if experts_only { "experts-only" } else { "full" };
    write_json(
        &dir.join(format!("{name}.json")),
        &json!({
            "models": models,
            "lambdas": lambdas,
            "delta": delta,
            "subset": {"mode": mode},
        }),
    )
}

/// Everything one worker count produces; compared across worker counts.
#[derive(Default, PartialEq)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn add_dir(&mut self, label: &str, dir: &Path) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if name != "merge_report.json" {
                self.files.insert(format!("{label}/{name}"), std::fs::read(&p).unwrap());
            }
        }
    }
}

struct Run {
    threads: usize,
    work: PathBuf,
    artifacts: Artifacts,
    merged: BTreeMap<String, PathBuf>,
}

impl Run {
    fn new(f: &Fixtures, threads: usize) -> Self {
        let work = f.root.join(format!("threads{threads}"));
        std::fs::create_dir_all(&work).unwrap();
        Run {
            threads,
            work,
            artifacts: Artifacts::default(),
            merged: BTreeMap::new(),
        }
    }

    fn aoe(&self, args: &[&str]) -> Result<Output, String> {
        let t = self.threads.to_string();
        let mut all = vec!["--threads", t.as_str()];
        all.extend_from_slice(args);
        aoe_ok(&all)
    }
}

fn compare_to(out: &BTreeMap<String, RawTensor>, want: &BTreeMap<String, RawTensor>) -> Result<(), String> {
    ensure!(
        out.keys().eq(want.keys()),
        "tensor sets differ: {} vs {}",
        out.len(),
        want.len()
    );
    let bad: Vec<&String> = want.iter().filter(|(n, t)| &out[*n] != *t).map(|(n, _)| n).collect();
    ensure!(bad.is_empty(), "{} tensors differ, first {}", bad.len(), bad[0]);
    Ok(())
}

/// Criterion 1: the 3x3 grid against the in-memory oracle.
fn c1(f: &Fixtures, run: &mut Run) -> Check {
    let start = Instant::now();
    let cache = run.work.join("diffs.json");
    for l in LAMBDAS {
        for (subset, experts_only, delta) in SUBSETS {
            let name = scenario_name(l, subset);
            let r = recipe(&run.work, &name, &[&f.base, &f.variant], &l, experts_only, delta);
            let out = run.work.join(&name);
            run.aoe(&["merge", s(&r), "--diffs", s(&cache), "-o", s(&out)])?;
            let got = load_dir(&out);
            let want = oracle::merge(
                &f.base_tensors,
                &f.variant_tensors,
                &f.groups,
                &Scenario { lambdas: l, experts_only, delta },
            );
            compare_to(&got, &want).map_err(|e| format!("{name}: {e}"))?;
            run.artifacts.add_dir(&name, &out);
            run.merged.insert(name, out);
        }
    }
    run.artifacts.files.insert("diffs.json".into(), std::fs::read(&cache).unwrap());
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "grid took {secs:.1} s");
    Ok(format!("9/9 scenarios bit-exact, {} tensors each, {secs:.1} s", f.base_tensors.len()))
}

/// Criterion 2: one-hot on the base reproduces every base payload.
fn c2(f: &Fixtures, run: &Run) -> Check {
    let mut checked = 0;
    for (subset, _, _) in SUBSETS {
        let name = scenario_name([1.0, 0.0], subset);
        let got = load_dir(run.merged.get(&name).ok_or("grid output missing")?);
        compare_to(&got, &f.base_tensors).map_err(|e| format!("{name}: {e}"))?;
        checked += got.len();
    }
    Ok(format!("{checked}/{checked} tensors identical to base"))
}

/// Criterion 3: experts from the variant, everything else from the base,
/// checked against the manifest checksums.
fn c3(f: &Fixtures, run: &Run) -> Check {
    let name = scenario_name([0.0, 1.0], "experts");
    let got = load_dir(run.merged.get(&name).ok_or("grid output missing")?);
    let (mut routed, mut gates, mut other) = (0, 0, 0);
    ensure!(got.len() == f.groups.len(), "{} tensors, manifest has {}", got.len(), f.groups.len());
    for (tensor, (group, base_sum)) in &f.groups {
        let out = sha256_hex(&got[tensor].bytes);
        if group == "routed_expert_mlp" {
            let variant_sum = sha256_hex(&f.variant_tensors[tensor].bytes);
            ensure!(&variant_sum != base_sum, "{tensor}: variant was not perturbed");
            ensure!(out == variant_sum, "{tensor}: routed expert differs from the variant");
            routed += 1;
        } else {
            ensure!(&out == base_sum, "{tensor} ({group}) differs from the base checksum");
            if group == "expert_gate" {
                gates += 1;
            }
            other += 1;
        }
    }
    ensure!(gates > 0, "no router gates in the fixture");
    Ok(format!("{routed} routed from variant, {other} from base ({gates} gate tensors)"))
}

/// Criterion 4: planted constant shift and gaussian noise.
fn c4(root: &Path, run: &mut Run) -> Check {
    let dir = root.join(format!("planted{}", run.threads));
    let spec = write_json(
        &root.join(format!("planted{}.json", run.threads)),
        &json!({
            "hidden": 64, "intermediate": 128, "moe_intermediate": 64, "seed": 3,
            "group_dtypes": {"routed_expert_mlp": "F64"},
            "perturbations": [
                {"select": {"group": "routed_expert_mlp"}, "kind": "shift", "magnitude": 0.01},
                {"select": {"group": "dense_mlp"}, "kind": "gaussian", "magnitude": 0.02, "seed": 1},
            ],
        }),
    );
    aoe_ok(&["fixture", s(&spec), "-o", s(&dir)])?;
    let cache = dir.join("diffs.json");
    run.aoe(&["diff", s(&dir.join("base")), s(&dir.join("variant")), "-o", s(&cache)])?;
    let numel: BTreeMap<String, u64> = load_dir(&dir.join("base"))
        .into_iter()
        .map(|(n, t)| (n, t.shape.iter().product()))
        .collect();
    let cache_json: Value = serde_json::from_slice(&std::fs::read(&cache).unwrap()).unwrap();
    let (mut worst_shift, mut worst_gauss, mut zeros) = (0.0f64, 0.0f64, 0);
    for r in cache_json["records"].as_array().unwrap() {
        let name = r["name"].as_str().unwrap();
        let d = r["max_diff"].as_f64().ok_or_else(|| format!("{name}: non-finite diff"))?;
        match r["category"]["group"].as_str().unwrap() {
            "routed_expert_mlp" => {
                let rel = (d - 0.01).abs() / 0.01;
                ensure!(rel < 1e-10, "{name}: shift diff {d} (relative error {rel:e})");
                worst_shift = worst_shift.max(rel);
            }
            "dense_mlp" => {
                ensure!(numel[name] >= 4096, "{name}: only {} elements", numel[name]);
                let rel = (d - 0.02).abs() / 0.02;
                ensure!(rel <= 0.10, "{name}: gaussian diff {d} is {:.1}% off", rel * 100.0);
                worst_gauss = worst_gauss.max(rel);
            }
            group => {
                ensure!(d == 0.0, "{name} ({group}): diff {d}, expected 0");
                zeros += 1;
            }
        }
    }
    run.artifacts
        .files
        .insert("planted_records.json".into(), cache_json["records"].to_string().into_bytes());
    Ok(format!(
        "shift rel err <= {worst_shift:.1e}, gaussian within {:.2}%, {zeros} untouched at 0",
        worst_gauss * 100.0
    ))
}

fn parse_sweep(csv: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = csv.lines();
    let header: Vec<String> = lines.next().ok_or("empty sweep")?.split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().map_err(|e| format!("{v}: {e}"))).collect())
        .collect::<Result<Vec<Vec<f64>>, String>>()?;
    Ok((header, rows))
}

/// Criterion 5: sweep totals never increase with delta, the planted levels
/// drop out in order, and the comparison is strict.
fn c5(f: &Fixtures, run: &mut Run) -> Check {
    let r = recipe(&run.work, "sweep", &[&f.base, &f.variant], &[0.5, 0.5], false, 0.0);
    let cache = run.work.join("sweep_diffs.json");
    let mut grid: Vec<f64> = (0..=60).map(|i| i as f64 * 1e-4).collect();
    grid.extend([0.0015, 0.0025, 0.0035, 0.0045]);
    grid.sort_by(f64::total_cmp);
    let deltas: Vec<String> = grid.iter().map(|d| d.to_string()).collect();
    let out = run.aoe(&["sweep", s(&r), "--diffs", s(&cache), "--deltas", &deltas.join(",")])?;
    let csv = String::from_utf8(out.stdout).unwrap();
    run.artifacts.files.insert("sweep.csv".into(), csv.clone().into_bytes());
    let (header, rows) = parse_sweep(&csv)?;
    ensure!(rows.len() == grid.len(), "{} rows for {} deltas", rows.len(), grid.len());
    let total_col = header.iter().position(|h| h == "total").ok_or("no total column")?;
    for w in rows.windows(2) {
        ensure!(
            w[1][total_col] <= w[0][total_col],
            "total rises from {} to {} between delta {} and {}",
            w[0][total_col],
            w[1][total_col],
            w[0][0],
            w[1][0]
        );
    }

    let count = |group: &str| f.groups.values().filter(|(g, _)| g == group).count() as f64;
    for probe in [0.0015, 0.0025, 0.0035] {
        let row = rows.iter().find(|r| r[0] == probe).ok_or("probe delta missing")?;
        for (group, _, level) in LEVELS {
            let col = header.iter().position(|h| h == group).ok_or("missing group column")?;
            let want = if level > probe { count(group) } else { 0.0 };
            ensure!(row[col] == want, "delta {probe}: {group} has {} merged, expected {want}", row[col]);
        }
    }

    let cache_json: Value = serde_json::from_slice(&std::fs::read(&cache).unwrap()).unwrap();
    let record = cache_json["records"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["category"]["group"] == "routed_expert_mlp")
        .ok_or("no routed expert record")?;
    let name = record["name"].as_str().unwrap();
    let exact = record["max_diff"].as_f64().unwrap();
    let action = |delta: f64| -> Result<String, String> {
        let d = delta.to_string();
        let out = run.aoe(&["plan", s(&r), "--diffs", s(&cache), "--delta", &d, "--json"])?;
        let plan: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        let decision = plan["decisions"]
            .as_array()
            .unwrap()
            .iter()
            .find(|d| d["name"] == name)
            .ok_or("tensor missing from plan")?;
        Ok(decision["action"].as_str().unwrap().to_string())
    };
    let at = action(exact)?;
    let below = action(exact.next_down())?;
    ensure!(at == "copy_base", "delta == max_diff gave {at}");
    ensure!(below == "merge", "delta just below max_diff gave {below}");
    Ok(format!("{} deltas monotone, stepwise exclusion as planted, boundary strict", grid.len()))
}

/// Criterion 6: a checkpoint merged with itself is unchanged.
fn c6(f: &Fixtures, run: &mut Run) -> Check {
    let mut n = 0;
    for (label, model, tensors) in [("base", &f.base, &f.base_tensors), ("variant", &f.variant, &f.variant_tensors)] {
        let r = recipe(&run.work, &format!("self_{label}"), &[model, model], &[0.5, 0.5], false, 0.0);
        let out = run.work.join(format!("self_{label}"));
        run.aoe(&["merge", s(&r), "-o", s(&out)])?;
        compare_to(&load_dir(&out), tensors).map_err(|e| format!("{label}: {e}"))?;
        run.artifacts.add_dir(&format!("self_{label}"), &out);
        n += tensors.len();
    }
    Ok(format!("{n} tensors reproduced"))
}

fn rewrite(src: &Path, dst: &Path) -> Result<(), String> {
    let index = open_checkpoint(src).map_err(|e| e.to_string())?;
    let tensors: Vec<(TensorSpec, Vec<u8>)> = read_all(&index)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(info, raw)| (TensorSpec::from(&info), raw))
        .collect();
    write_checkpoint(dst, tensors, &OutputPolicy::MirrorSource, Some(&index), &BTreeMap::new())
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn checkpoint_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().contains(".safetensors"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Criterion 7: byte-stable rewrites and rejection of malformed headers.
fn c7(f: &Fixtures) -> Check {
    let root = f.root.join("roundtrip");
    let sources = [f.base.clone(), f.variant.clone(), f.root.join("threads1").join(scenario_name([0.5, 0.5], "full"))];
    for (i, src) in sources.iter().enumerate() {
        let (w1, w2) = (root.join(format!("{i}_w1")), root.join(format!("{i}_w2")));
        rewrite(src, &w1)?;
        rewrite(&w1, &w2)?;
        let first = checkpoint_files(&w1);
        ensure!(first == checkpoint_files(&w2), "{}: second rewrite differs", src.display());
        compare_to(&load_dir(&w1), &load_dir(src)).map_err(|e| format!("{}: {e}", src.display()))?;
    }

    let fuzz_dir = root.join("fuzz");
    std::fs::create_dir_all(&fuzz_dir).unwrap();
    let cases = fuzz::cases(1200);
    let mut rejected = 0;
    for (batch_no, batch) in cases.chunks(100).enumerate() {
        let paths: Vec<PathBuf> = batch
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let p = fuzz_dir.join(format!("case{batch_no}_{i}.safetensors"));
                std::fs::write(&p, img).unwrap();
                p
            })
            .collect();
        for (p, img) in paths.iter().zip(batch) {
            let parsed = catch_unwind(|| aoe_core::safetensors::parse_header(img));
            ensure!(parsed.is_ok(), "{}: parser panicked", p.display());
            ensure!(parsed.unwrap().is_err(), "{}: parser accepted a malformed header", p.display());
        }
        let mut args = vec!["validate", "--json"];
        args.extend(paths.iter().map(|p| s(p)));
        let out = aoe(&args);
        ensure!(out.status.code() == Some(2), "validate exited with {:?}", out.status.code());
        let report: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        for c in report["checkpoints"].as_array().unwrap() {
            let flagged = !c["error"].is_null() || !c["violations"].as_array().unwrap().is_empty();
            ensure!(flagged, "{} validated clean", c["path"]);
            rejected += 1;
        }
    }
    ensure!(rejected == cases.len(), "{rejected} of {} cases reported", cases.len());
    Ok(format!("{} checkpoints rewrite byte-stable; {rejected} malformed headers rejected", sources.len()))
}

/// Criterion 8: tensor census at DeepSeek-V3 scale.
fn c8() -> Check {
    let spec = aoe_core::fixtures::FixtureSpec {
        layers: 61,
        dense_layers: 3,
        experts: 256,
        hidden: 1,
        intermediate: 1,
        moe_intermediate: 1,
        heads: 1,
        head_dim: 1,
        rope_dim: 1,
        q_lora_rank: 1,
        kv_lora_rank: 1,
        vocab: 1,
        ..Default::default()
    };
    let index = virtual_index(&spec).map_err(|e| e.to_string())?;
    let scheme = NamingScheme::deepseek_v3();
    let routed = census(&index, &scheme).tensors_in(Group::RoutedExpertMlp);
    let want = (61 - 3) * 256 * 3;
    ensure!(want == 44_544, "arithmetic");
    ensure!(routed == want, "census counts {routed} routed expert tensors");
    let subset = SubsetSpec::experts_only();
    let selected: Vec<&String> = index.tensors.keys().filter(|n| subset.contains(n, &scheme.classify(n))).collect();
    ensure!(selected.len() as u64 == want, "experts-only selects {}", selected.len());
    ensure!(selected.iter().all(|n| is_routed_expert(n)), "experts-only selected a non-expert tensor");
    Ok(format!("{routed} routed expert tensors of {}, all selected by experts-only", index.len()))
}

/// `model.layers.L.mlp.experts.E.{gate,up,down}_proj.weight` with L a MoE layer.
fn is_routed_expert(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    parts.len() == 8
        && parts[..2] == ["model", "layers"]
        && parts[2].parse::<u32>().is_ok_and(|l| (3..61).contains(&l))
        && parts[3..5] == ["mlp", "experts"]
        && parts[5].parse::<u32>().is_ok_and(|e| e < 256)
        && ["gate_proj", "up_proj", "down_proj"].contains(&parts[6])
        && parts[7] == "weight"
}

/// Criterion 9: reasoning frequency on planted transcripts.
fn c9(root: &Path) -> Check {
    let mut seen = Vec::new();
    for (closed, want) in [(8, 1.0), (0, 0.0), (5, 0.625)] {
        let path = root.join(format!("transcript{closed}.jsonl"));
        let text: String = (0..8)
            .map(|i| {
                let response = if i < closed {
                    format!("<think>step {i}</think>answer {i}")
                } else {
                    format!("answer {i} with no reasoning")
                };
                json!({"id": format!("r{i}"), "response": response}).to_string() + "\n"
            })
            .collect();
        std::fs::write(&path, text).unwrap();
        let stats_path = root.join(format!("stats{closed}.json"));
        aoe_ok(&["think-freq", s(&path), "-o", s(&stats_path)])?;
        let stats: Value = serde_json::from_slice(&std::fs::read(&stats_path).unwrap()).unwrap();
        let got = stats["frequency"].as_f64().ok_or("no frequency")?;
        ensure!(got == want, "{closed}/8 closed gave {got}, expected {want}");
        seen.push(got.to_string());
    }
    Ok(format!("frequencies {}", seen.join(" / ")))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

/// Criteria 1 to 6 at one worker count.
fn core_criteria(f: &Fixtures, threads: usize) -> (Vec<(&'static str, Check)>, Artifacts) {
    let mut run = Run::new(f, threads);
    let mut results = vec![("C1 merge matches whole-model oracle on the 3x3 grid", guarded(|| c1(f, &mut run)))];
    results.push(("C2 lambda=(1,0) reproduces the base", guarded(|| c2(f, &run))));
    results.push(("C3 experts-only merge follows the manifest", guarded(|| c3(f, &run))));
    results.push(("C4 planted differences are measured exactly", guarded(|| c4(&f.root, &mut run))));
    results.push(("C5 sweep is monotone and the threshold strict", guarded(|| c5(f, &mut run))));
    results.push(("C6 self-merge is a fixed point", guarded(|| c6(f, &mut run))));
    (results, run.artifacts)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut lines: Vec<(String, Check)> = Vec::new();
    let fixtures = make_fixtures(tmp.path());
    let fixtures = match fixtures {
        Ok(f) => f,
        Err(e) => {
            println!("FAIL  fixture generation: {e}");
            std::process::exit(1);
        }
    };

    let (first, reference) = core_criteria(&fixtures, 1);
    for (label, r) in &first {
        lines.push((label.to_string(), r.clone()));
    }
    lines.push(("C7 rewrites are byte-stable and bad headers rejected".into(), guarded(|| c7(&fixtures))));
    lines.push(("C8 DeepSeek-scale census".into(), guarded(c8)));
    lines.push(("C9 reasoning frequency endpoints".into(), guarded(|| c9(tmp.path()))));

    let c10 = guarded(|| {
        let mut notes = Vec::new();
        for threads in [2, 8] {
            let (results, artifacts) = core_criteria(&fixtures, threads);
            for (label, r) in results {
                r.map_err(|e| format!("threads={threads}: {label}: {e}"))?;
            }
            ensure!(
                artifacts.files.keys().eq(reference.files.keys()),
                "threads={threads}: different artifact set"
            );
            let differing: Vec<&String> = artifacts
                .files
                .iter()
                .filter(|(k, v)| reference.files[*k] != **v)
                .map(|(k, _)| k)
                .collect();
            ensure!(differing.is_empty(), "threads={threads}: {} artifacts differ, e.g. {}", differing.len(), differing[0]);
            notes.push(threads.to_string());
        }
        ensure!(first.iter().all(|(_, r)| r.is_ok()), "criteria 1-6 fail at threads=1");
        Ok(format!("{} artifacts identical at threads 1, {}", reference.files.len(), notes.join(", ")))
    });
    lines.push(("C10 results independent of worker count".into(), c10));

    let mut failed = 0;
    for (label, r) in &lines {
        match r {
            Ok(detail) => println!("PASS  {label}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {label}: {e}");
            }
        }
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
