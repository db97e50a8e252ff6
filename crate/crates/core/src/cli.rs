//! Command-line front end.
//!
//! Every subcommand first echoes its fully resolved configuration as
//! `key = value` lines, then runs, then writes its output files.
//! Exit codes: 0 on success, 1 when a check fails or a run errors, 2 on
//! usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, SuiteConfig};
use crate::attention::Variant;
use crate::autograd::{DEFAULT_STEP, DEFAULT_TOL};
use crate::bench;
use crate::error::{Error, Result};
use crate::gradcheck::{self, Target};
use crate::io::{self as dio, WeightsFile};
use crate::metrics::{self, AttentionSource, ConsistencyRow, Truth};
use crate::scene::{self, SceneConfig, SceneSample};
use crate::tensor::{self, Precision};
use crate::train::{self, ModelAttention, ToyModel, TrainConfig};

/// Suites run by `check`, with a one-line description each.
pub const CHECK_SUITES: &[(&str, &str)] = &[
    (
        "elimination",
        "query-mean shift leaves every attention row unchanged",
    ),
    (
        "whitening",
        "raw logits equal whitened pairwise plus unary split",
    ),
    (
        "factorization",
        "softmax of a sum equals the renormalised product of softmaxes",
    ),
    (
        "prop1-maximum",
        "mean embeddings beat random perturbations of the objective",
    ),
    (
        "prop1-stationarity",
        "objective gradient vanishes at the mean embeddings",
    ),
    (
        "eigenvalue",
        "pair scatter matrix has trace 1 and top eigenvalue at most 1",
    ),
    (
        "coupling",
        "product form attenuates pairwise gradients, sum form does not",
    ),
    ("row-sum", "attention rows sum to the variant's constant"),
];

#[derive(Debug, Parser)]
#[command(
    name = "dnllab",
    version,
    about = "Disentangled non-local attention toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the numerical identity suites.
    Check(CheckArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train the toy segmentation model.
    Train(TrainArgs),
    /// Consistency table, mIoU and attention maps for trained models.
    Analyze(AnalyzeArgs),
    /// Parameter, FLOP and latency tables.
    Bench(BenchArgs),
    /// Attention maps for one query pixel.
    ExportMaps(ExportArgs),
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instances per suite; each suite has its own default.
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// One of the six block variants or `model`; all when omitted.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "4x3x3")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` file; explicit flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Add larger sizes and channel widths.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    scene_seed: u64,
    /// Query pixel as `ROW,COL`.
    #[arg(long)]
    query: String,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI with process stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = Precision::from_env().and_then(|p| {
        tensor::set_precision(p);
        dispatch(cli.command, p, out)
    });
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Invalid(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Returns whether every check passed.
fn dispatch(cmd: Command, p: Precision, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Check(a) => cmd_check(a, p, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, p, out),
        Command::Train(a) => cmd_train(a, p, out),
        Command::Analyze(a) => cmd_analyze(a, p, out),
        Command::Bench(a) => cmd_bench(a, p, out),
        Command::ExportMaps(a) => cmd_export(a, p, out),
    }
}

fn echo(
    out: &mut dyn Write,
    command: &str,
    p: Precision,
    pairs: &[(String, String)],
) -> Result<()> {
    writeln!(out, "# dnllab {command}")?;
    writeln!(out, "precision = {p}")?;
    out.write_all(dio::render_flat_config(pairs).as_bytes())?;
    writeln!(out)?;
    Ok(())
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn cmd_check(a: CheckArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    let instances = a.instances.map_or("default".to_string(), |n| n.to_string());
    echo(
        out,
        "check",
        p,
        &[kv("seed", a.seed), kv("instances", instances)],
    )?;
    let cfg = SuiteConfig {
        seed: a.seed,
        instances: a.instances,
    };
    let mut all = true;
    for suite in analysis::suites() {
        let desc = CHECK_SUITES
            .iter()
            .find(|(n, _)| *n == suite.name)
            .map(|(_, d)| *d)
            .ok_or_else(|| Error::Domain(format!("suite {} is not registered", suite.name)))?;
        let r = suite.execute(&cfg)?;
        all &= r.pass;
        writeln!(
            out,
            "{:<19} {}  max_err={:.3e}  tol={:.0e}  n={}  ({desc})",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.max_abs_error,
            r.tol,
            r.instances_tested,
        )?;
    }
    writeln!(out, "overall: {}", if all { "PASS" } else { "FAIL" })?;
    Ok(all)
}

fn cmd_gradcheck(a: GradcheckArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    let size = gradcheck::parse_size(&a.size)?;
    let targets = match &a.variant {
        Some(v) => vec![v.parse::<Target>()?],
        None => Target::all(),
    };
    let names: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
    echo(
        out,
        "gradcheck",
        p,
        &[
            kv("variant", names.join(",")),
            kv("size", format!("{}x{}x{}", size.0, size.1, size.2)),
            kv("seed", a.seed),
            kv("step", DEFAULT_STEP),
            kv("tol", DEFAULT_TOL),
        ],
    )?;
    let mut all = true;
    for t in targets {
        let r = gradcheck::check(t, size, a.seed, DEFAULT_STEP, DEFAULT_TOL)?;
        all &= r.pass;
        if r.pass {
            writeln!(
                out,
                "{t:<11} PASS rel_err<{:.0e} (max {:.2e} over {} entries)",
                r.tol, r.max_rel_error, r.entries_checked
            )?;
        } else {
            writeln!(
                out,
                "{t:<11} FAIL rel_err={:.2e} (worst leaf {}, {} non-finite probes)",
                r.max_rel_error,
                r.worst_leaf.as_deref().unwrap_or("-"),
                r.flagged.len(),
            )?;
        }
    }
    Ok(all)
}

fn parse_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in dio::read_flat_config(path)? {
            cfg.set(&k, &v)?;
        }
    }
    for s in &a.sets {
        let (k, v) = parse_set(s)?;
        cfg.set(&k, &v)?;
    }
    if let Some(v) = &a.variant {
        cfg.set("variant", v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// File stem shared by a run's trace, weights and config.
pub fn run_stem(cfg: &TrainConfig) -> String {
    format!("{}_s{}", cfg.arch, cfg.seed)
}

fn cmd_train(a: TrainArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    let cfg = resolve_train_config(&a)?;
    let mut pairs = cfg.pairs();
    pairs.push(kv("out", a.out.display()));
    echo(out, "train", p, &pairs)?;

    let (outcome, _, _) = train::train_run(&cfg)?;
    for t in &outcome.trace {
        writeln!(
            out,
            "iter {:>6}  lr {:.6}  loss {:.6}  train_miou {:.4}  val_miou {:.4}",
            t.iter, t.lr, t.loss, t.train_miou, t.val_miou
        )?;
    }
    let stem = run_stem(&cfg);
    fs::create_dir_all(&a.out)?;
    let trace = a.out.join(format!("trace_{stem}.csv"));
    let weights = a.out.join(format!("weights_{stem}.bin"));
    let config = a.out.join(format!("config_{stem}.txt"));
    fs::write(&trace, train::trace_csv(&outcome.trace))?;
    outcome.model.to_weights(&cfg).save(&weights)?;
    fs::write(&config, dio::render_flat_config(&cfg.pairs()))?;
    for path in [&trace, &weights, &config] {
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(true)
}

/// Held-out scenes for analysis, disjoint in seed stream from training data.
pub fn analysis_scenes(cfg: &SceneConfig, seed: u64, n: usize) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    (0..n)
        .map(|_| scene::generate_scene(rng.next_u64(), cfg))
        .collect()
}

fn mean_row(label: String, rows: &[&ConsistencyRow]) -> ConsistencyRow {
    let n = rows.len() as f64;
    let mean = |f: fn(&ConsistencyRow) -> Option<f64>| -> Option<f64> {
        rows.iter()
            .map(|r| f(r))
            .sum::<Option<f64>>()
            .map(|s| s / n)
    };
    ConsistencyRow {
        label,
        pair_within: mean(|r| r.pair_within),
        pair_boundary: mean(|r| r.pair_boundary),
        unary_boundary: mean(|r| r.unary_boundary),
    }
}

fn write_query_maps(
    dir: &Path,
    prefix: &str,
    d: &crate::attention::AttentionDecomposition,
    (r, c): (usize, usize),
    (h, w): (usize, usize),
) -> Result<Vec<PathBuf>> {
    let i = r * w + c;
    let terms: [(&str, &[f64]); 3] = [
        ("total", d.total.row(i)),
        ("pairwise", d.pairwise_norm.row(i)),
        ("unary", d.unary_norm.data()),
    ];
    let mut written = Vec::new();
    for (term, values) in terms {
        let path = dir.join(format!("{prefix}q{r}_{c}_{term}.pgm"));
        dio::write_pgm(&path, values, w, h)?;
        written.push(path);
    }
    Ok(written)
}

fn cmd_analyze(a: AnalyzeArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    if a.scenes == 0 {
        return Err(Error::Invalid("--scenes must be positive".into()));
    }
    let mut pairs = vec![kv(
        "weights",
        a.weights
            .iter()
            .map(|w| w.display().to_string())
            .collect::<Vec<_>>()
            .join(","),
    )];
    pairs.extend([
        kv("out", a.out.display()),
        kv("scene_seed", a.scene_seed),
        kv("scenes", a.scenes),
        kv("random_seed", a.random_seed),
    ]);
    echo(out, "analyze", p, &pairs)?;

    let mut models: Vec<(TrainConfig, ToyModel)> = Vec::new();
    for path in &a.weights {
        models.push(ToyModel::from_weights(&WeightsFile::load(path)?)?);
    }
    let scene_cfg = models[0].0.scene.clone();
    if models.iter().any(|(c, _)| c.scene != scene_cfg) {
        return Err(Error::Invalid(
            "all models must share one scene configuration".into(),
        ));
    }
    let scenes = analysis_scenes(&scene_cfg, a.scene_seed, a.scenes)?;
    let truth: Vec<Truth<'_>> = scenes
        .iter()
        .map(|s| (&s.features, &s.labels, &s.boundary))
        .collect();

    let labels: Vec<String> = models.iter().map(|(c, _)| run_stem(c)).collect();
    let wrapped: Vec<ModelAttention<'_>> = models.iter().map(|(_, m)| ModelAttention(m)).collect();
    let sources: Vec<(String, &dyn AttentionSource)> = models
        .iter()
        .zip(&labels)
        .zip(&wrapped)
        .filter(|(((c, _), _), _)| c.arch.variant().is_some())
        .map(|((_, l), w)| (l.clone(), w as &dyn AttentionSource))
        .collect();
    let mut report = metrics::consistency_table(&sources, &truth, a.random_seed)?;

    // one mean row per variant trained under several seeds
    let mut groups: BTreeMap<Variant, Vec<usize>> = BTreeMap::new();
    for (i, (c, _)) in models.iter().enumerate() {
        if let Some(v) = c.arch.variant() {
            groups.entry(v).or_default().push(i);
        }
    }
    let random = report.rows.pop().expect("random row");
    for (v, idx) in &groups {
        if idx.len() > 1 {
            let rows: Vec<&ConsistencyRow> =
                idx.iter().filter_map(|&i| report.row(&labels[i])).collect();
            let row = mean_row(format!("{v}_mean"), &rows);
            report.rows.push(row);
        }
    }
    report.rows.push(random);

    let mut miou = String::from("variant,seed,loss,miou\n");
    for (c, m) in &models {
        let (loss, mi) = train::evaluate(m, &scenes, scene_cfg.categories)?;
        miou.push_str(&format!("{},{},{:.6},{:.6}\n", c.arch, c.seed, loss, mi));
    }
    let meta = dio::render_flat_config(&[
        kv("samples", report.samples),
        kv("weighting", report.weighting),
        kv("scene_seed", a.scene_seed),
        kv("random_seed", a.random_seed),
        kv("boundary_radius", scene_cfg.boundary_radius),
        kv("models", labels.join(",")),
    ]);

    let table_rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            vec![
                r.label.clone(),
                cell(r.pair_within),
                cell(r.pair_boundary),
                cell(r.unary_boundary),
            ]
        })
        .collect();
    out.write_all(
        bench::aligned_table(
            &["variant", "pair∩within", "pair∩boundary", "unary∩boundary"],
            &table_rows,
        )
        .as_bytes(),
    )?;
    out.write_all(miou.as_bytes())?;

    fs::create_dir_all(&a.out)?;
    let mut written = vec![
        a.out.join("consistency.csv"),
        a.out.join("consistency_meta.txt"),
        a.out.join("miou.csv"),
    ];
    fs::write(&written[0], report.to_csv())?;
    fs::write(&written[1], meta)?;
    fs::write(&written[2], miou)?;
    let (h, w) = (scene_cfg.height, scene_cfg.width);
    let query = (h / 2, w / 2);
    for ((c, m), label) in models.iter().zip(&labels) {
        if c.arch.variant().is_some() {
            let d = m.attention(&scenes[0].features)?;
            written.extend(write_query_maps(
                &a.out,
                &format!("{label}_"),
                &d,
                query,
                (h, w),
            )?);
        }
    }
    for path in written {
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(true)
}

const BENCH_SIZES: [(usize, usize, usize); 1] = [(16, 32, 32)];
const BENCH_SWEEP_SIZES: [(usize, usize, usize); 4] =
    [(16, 32, 32), (64, 16, 16), (64, 32, 32), (128, 32, 32)];
const OVERHEAD_HWS: [u64; 5] = [1, 64, 1024, 4096, 9409];
const OVERHEAD_CHANNELS: [u64; 5] = [64, 128, 256, 512, 1024];

fn cmd_bench(a: BenchArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    let mut pairs = vec![
        kv("sweep", a.sweep),
        kv("reps", a.reps),
        kv("warmup", a.warmup),
    ];
    pairs.push(kv(
        "out",
        a.out
            .as_ref()
            .map_or("-".to_string(), |o| o.display().to_string()),
    ));
    echo(out, "bench", p, &pairs)?;

    let channels: &[u64] = if a.sweep { &OVERHEAD_CHANNELS } else { &[512] };
    let mut overhead = Vec::new();
    for &c in channels {
        overhead.extend(bench::overhead_report(c, &OVERHEAD_HWS)?);
    }
    let sizes: &[(usize, usize, usize)] = if a.sweep {
        &BENCH_SWEEP_SIZES
    } else {
        &BENCH_SIZES
    };
    let rows = bench::latency_bench(&Variant::ALL, sizes, a.reps, a.warmup)?;

    out.write_all(bench::overhead_table(&overhead).as_bytes())?;
    out.write_all(bench::complexity_table(&rows).as_bytes())?;
    for &(c, h, w) in sizes {
        if let Some(r) = bench::dnl_nl_ratio(&rows, c, h, w) {
            writeln!(out, "DNL/NL median latency at C={c}, {h}x{w}: {r:.3}")?;
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let o = dir.join("overhead.csv");
        let c = dir.join("complexity.csv");
        fs::write(&o, bench::overhead_csv(&overhead))?;
        fs::write(&c, bench::complexity_csv(&rows))?;
        writeln!(out, "wrote {}\nwrote {}", o.display(), c.display())?;
    }
    Ok(true)
}

/// Parses `ROW,COL`.
pub fn parse_query(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("query must look like ROW,COL, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

fn cmd_export(a: ExportArgs, p: Precision, out: &mut dyn Write) -> Result<bool> {
    let (r, c) = parse_query(&a.query)?;
    echo(
        out,
        "export-maps",
        p,
        &[
            kv("weights", a.weights.display()),
            kv("scene_seed", a.scene_seed),
            kv("query", format!("{r},{c}")),
            kv("out", a.out.display()),
        ],
    )?;
    let (cfg, model) = ToyModel::from_weights(&WeightsFile::load(&a.weights)?)?;
    let (h, w) = (cfg.scene.height, cfg.scene.width);
    if r >= h || c >= w {
        return Err(Error::Invalid(format!("query {r},{c} outside {h}x{w}")));
    }
    if cfg.arch.variant().is_none() {
        return Err(Error::Invalid(
            "baseline model has no attention maps".into(),
        ));
    }
    let s = scene::generate_scene(a.scene_seed, &cfg.scene)?;
    let d = model.attention(&s.features)?;
    fs::create_dir_all(&a.out)?;
    for path in write_query_maps(&a.out, "", &d, (r, c), (h, w))? {
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("dnllab").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn every_suite_is_registered() {
        let registered: BTreeSet<&str> = CHECK_SUITES.iter().map(|(n, _)| *n).collect();
        let available: BTreeSet<&str> = analysis::suites().iter().map(|s| s.name).collect();
        assert_eq!(registered, available);
        assert_eq!(registered.len(), CHECK_SUITES.len());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["check", "--bogus"]).0, 2);
        assert_eq!(run_capture(&["gradcheck", "--size", "4x3"]).0, 2);
        assert_eq!(run_capture(&["gradcheck", "--variant", "XL"]).0, 2);
        assert_eq!(run_capture(&["train", "--set", "nokey"]).0, 2);
        assert_eq!(run_capture(&[]).0, 2);
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("export-maps"));
    }

    #[test]
    fn gradcheck_dnl_prints_pass() {
        let (code, out, _) = run_capture(&["gradcheck", "--variant", "DNL", "--size", "4x3x3"]);
        assert_eq!(code, 0);
        assert!(out.contains("precision = f64"));
        assert!(out.contains("PASS rel_err<1e-6"), "{out}");
    }

    #[test]
    fn query_parsing() {
        assert_eq!(parse_query("3, 7").unwrap(), (3, 7));
        assert!(parse_query("3").is_err());
        assert!(parse_query("a,b").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(
            &path,
            "variant = NL\nseed = 4\niterations = 7\nchannels = 8\n",
        )
        .unwrap();
        let a = TrainArgs {
            variant: None,
            seed: Some(9),
            config: Some(path),
            iterations: None,
            sets: vec!["channels=6".into()],
            out: "runs".into(),
        };
        let cfg = resolve_train_config(&a).unwrap();
        assert_eq!(cfg.arch, train::Arch::Block(Variant::NL));
        assert_eq!((cfg.seed, cfg.iterations, cfg.channels), (9, 7, 6));
    }

    #[test]
    fn mean_row_skips_absent_terms() {
        let a = ConsistencyRow {
            label: "a".into(),
            pair_within: Some(0.2),
            pair_boundary: Some(0.4),
            unary_boundary: None,
        };
        let b = ConsistencyRow {
            label: "b".into(),
            pair_within: Some(0.4),
            pair_boundary: Some(0.0),
            unary_boundary: None,
        };
        let m = mean_row("m".into(), &[&a, &b]);
        assert!((m.pair_within.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(m.unary_boundary, None);
    }
}
