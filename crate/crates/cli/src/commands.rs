use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use halloc_core::corpus::{self, CanonicalPool, GenerationRecord, SCHEMA_VERSION};
use halloc_core::features::{self, FeatureMatrix};
use halloc_core::harness::{
    self, AnnotatedRecord, EvalReport, GroupBy, ModelSpec, Sample,
};
use halloc_core::localize::{self, HallucinationLabel};
use halloc_core::normalize;
use halloc_core::predict::{self, EncoderConfig, ModelKind, TrainConfig};
use halloc_core::{demo, syntax, FeatureMode, Language};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;
use crate::UsageError;

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) => dir.join(p),
            None => p.to_path_buf(),
        }
    }
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        data_dir: cli.data_dir,
    };
    match cli.command {
        Command::Validate(a) => validate(&ctx, a),
        Command::Normalize(a) => normalize_cmd(&ctx, a),
        Command::Localize(a) => localize_cmd(&ctx, a),
        Command::Featurize(a) => featurize(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Predict(a) => predict_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Cross(a) => cross(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::DemoFigure1 => demo_figure1(),
    }
}

fn thread_pool(jobs: &JobsArg) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.jobs)
        .build()
        .context("starting worker threads")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(contents.as_bytes())?;
    out.flush().with_context(|| format!("writing {}", path.display()))
}

fn load(ctx: &Ctx, input: &Path, lang: Option<Lang>) -> Result<Vec<GenerationRecord>> {
    let path = ctx.path(input);
    let records = corpus::load_records(&path)?;
    if let Some(lang) = lang {
        let lang = Language::from(lang);
        if let Some(r) = records.iter().find(|r| r.language != lang) {
            bail!("record {} is {}, expected {lang}", r.id, r.language);
        }
    }
    log::info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

#[derive(Serialize)]
struct ValidationSummary {
    schema_version: u32,
    records: usize,
    invalid: usize,
    canonical_problems: Option<usize>,
    canonical_solutions: Option<usize>,
}

fn validate(ctx: &Ctx, a: ValidateArgs) -> Result<()> {
    let path = ctx.path(&a.input);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut summary = ValidationSummary {
        schema_version: SCHEMA_VERSION,
        records: 0,
        invalid: 0,
        canonical_problems: None,
        canonical_solutions: None,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        summary.records += 1;
        if let Err(e) = corpus::parse_record(line, i + 1) {
            summary.invalid += 1;
            eprintln!("{}: {e}", path.display());
        }
    }
    if let Some(canon) = &a.canon {
        let pools = corpus::load_canonicals(&ctx.path(canon))?;
        summary.canonical_problems = Some(pools.len());
        summary.canonical_solutions = Some(pools.values().map(|p| p.solutions.len()).sum());
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if summary.invalid > 0 {
        bail!("{} of {} records are invalid", summary.invalid, summary.records);
    }
    Ok(())
}

#[derive(Serialize)]
struct NormalizeOutput<'a> {
    language: Language,
    normalized: &'a str,
    rename_table: &'a [(String, String)],
    collisions: &'a [String],
}

fn normalize_cmd(ctx: &Ctx, a: NormalizeArgs) -> Result<()> {
    let source = match &a.input {
        Some(p) if p.as_os_str() != "-" => {
            let p = ctx.path(p);
            fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?
        }
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading standard input")?;
            s
        }
    };
    let language = Language::from(a.lang);
    let tree = syntax::parse(&source, language)?;
    if tree.has_errors() {
        log::warn!("source has syntax errors; only well-formed definition sites are renamed");
    }
    let program = normalize::normalize_tree(&tree, (0, source.len()));
    let output = NormalizeOutput {
        language,
        normalized: &program.normalized,
        rename_table: &program.rename_table,
        collisions: &program.collisions,
    };
    let json = serde_json::to_string_pretty(&output)? + "\n";
    match &a.out {
        Some(p) => write_file(&ctx.path(p), &json),
        None => {
            io::stdout().write_all(json.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct LocalizeDebug<'a> {
    id: &'a str,
    #[serde(flatten)]
    label: &'a HallucinationLabel,
}

fn localize_cmd(ctx: &Ctx, a: LocalizeArgs) -> Result<()> {
    let records = load(ctx, &a.input, a.lang)?;
    let pools = corpus::load_canonicals(&ctx.path(&a.canon))?;
    let labels: Vec<HallucinationLabel> = thread_pool(&a.jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let pool: &CanonicalPool = pools
                    .get(&r.problem_id)
                    .ok_or_else(|| anyhow!("record {}: no canonical solutions for problem {}", r.id, r.problem_id))?;
                localize::localize(r, pool).with_context(|| format!("record {}", r.id))
            })
            .collect::<Result<_>>()
    })?;
    let labeled: Vec<GenerationRecord> = records
        .iter()
        .zip(&labels)
        .map(|(r, l)| GenerationRecord {
            gold_index: l.index,
            ..r.clone()
        })
        .collect();
    let out = ctx.path(&a.out);
    let mut w = create(&out)?;
    corpus::write_records(&mut w, &labeled)?;
    w.flush()?;
    if let Some(debug) = &a.debug_out {
        let mut w = create(&ctx.path(debug))?;
        for (r, label) in records.iter().zip(&labels) {
            serde_json::to_writer(&mut w, &LocalizeDebug { id: &r.id, label })?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let matched = labels.iter().filter(|l| l.matched).count();
    eprintln!(
        "localized {} records: {} with a hallucination index, {} matching a canonical solution",
        labels.len(),
        labels.len() - matched,
        matched
    );
    Ok(())
}

fn annotate_all(records: &[GenerationRecord]) -> Result<Vec<AnnotatedRecord>> {
    records
        .par_iter()
        .map(|r| AnnotatedRecord::new(r.clone()).map_err(Into::into))
        .collect()
}

fn samples(records: &[GenerationRecord], mode: FeatureMode) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| Sample::from_record(r, mode).map_err(Into::into))
        .collect()
}

fn featurize(ctx: &Ctx, a: FeaturizeArgs) -> Result<()> {
    let records = load(ctx, &a.input, a.lang)?;
    let mode = FeatureMode::from(a.mode);
    let samples = thread_pool(&a.jobs)?.install(|| samples(&records, mode))?;
    let matrices: Vec<(String, FeatureMatrix)> = samples.into_iter().map(|s| (s.id, s.matrix)).collect();
    let out = ctx.path(&a.out);
    let mut w = create(&out)?;
    features::write_container(&mut w, mode, a.seed, &matrices)?;
    w.flush()?;
    eprintln!(
        "wrote {} {} matrices ({} columns, seed {}) to {}",
        matrices.len(),
        mode.as_str(),
        mode.width(),
        a.seed,
        out.display()
    );
    Ok(())
}

fn parse_model(args: &ModelArgs, allow_reference: bool) -> Result<Option<ModelKind>> {
    let mode = FeatureMode::from(args.mode);
    let kind = match (&args.model, args.encoder) {
        (Some(_), Some(_)) => return Err(usage("--model and --encoder are mutually exclusive")),
        (None, Some(e)) => ModelKind::pointer(e.into()),
        (Some(m), None) if allow_reference && (m == "oracle" || m.starts_with("constant-")) => return Ok(None),
        (Some(m), None) => m.parse().map_err(usage)?,
        (None, None) => match mode {
            FeatureMode::PerToken => ModelKind::TreeEnsemble,
            FeatureMode::PerSample => ModelKind::RecurrentPointer,
        },
    };
    if kind.mode() != mode {
        return Err(usage(format!("{kind} is a {} model, not {}", kind.mode().as_str(), mode.as_str())));
    }
    Ok(Some(kind))
}

fn train_config(args: &ModelArgs, kind: ModelKind) -> Result<TrainConfig> {
    let mut c = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = args.downsample_ratio {
        c.downsample_ratio = v;
    }
    if let Some(v) = args.trees {
        c.forest.trees = v;
    }
    if let Some(v) = args.max_depth {
        c.forest.max_depth = v;
    }
    if let Some(v) = args.ff_hidden {
        c.feed_forward_hidden = v;
    }
    let encoder_flags = args.hidden_dim.is_some()
        || args.layers.is_some()
        || args.heads.is_some()
        || args.ff_dim.is_some()
        || args.kernel_size.is_some()
        || args.cell.is_some();
    match kind.encoder() {
        Some(e) if encoder_flags => {
            let mut enc = EncoderConfig::default_for(e);
            if let Some(v) = args.hidden_dim {
                enc.hidden_dim = v;
                enc.pointer_dim = v;
            }
            if let Some(v) = args.layers {
                enc.layers = v;
            }
            if let Some(v) = args.heads {
                enc.heads = v;
            }
            if let Some(v) = args.ff_dim {
                enc.ff_dim = v;
            }
            if let Some(v) = args.kernel_size {
                enc.kernel_size = v;
            }
            if let Some(v) = args.cell {
                enc.cell = v.into();
            }
            c.encoder = Some(enc);
        }
        None if encoder_flags => return Err(usage(format!("encoder flags do not apply to {kind}"))),
        _ => {}
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn model_spec(args: &ModelArgs, threshold: f64) -> Result<ModelSpec> {
    match parse_model(args, true)? {
        Some(kind) => Ok(ModelSpec::Trained {
            kind,
            config: train_config(args, kind)?,
            threshold,
        }),
        None => {
            let m = args.model.as_deref().unwrap_or_default();
            if m == "oracle" {
                return Ok(ModelSpec::Oracle);
            }
            let index = m["constant-".len()..]
                .parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| usage(format!("bad constant predictor {m:?}; expected constant-<index ≥ 1>")))?;
            Ok(ModelSpec::ConstantIndex { index })
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    Ok(())
}

fn require_labeled(records: &[GenerationRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.gold_index.is_none()) {
        bail!("record {} has no gold_index; run `halloc localize` first", r.id);
    }
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let kind = parse_model(&a.model, false)?.expect("reference predictors are rejected");
    let config = train_config(&a.model, kind)?;
    let records = load(ctx, &a.input, None)?;
    require_labeled(&records)?;
    let samples = thread_pool(&a.jobs)?.install(|| samples(&records, kind.mode()))?;
    let matrices: Vec<FeatureMatrix> = samples.into_iter().map(|s| s.matrix).collect();
    let model = predict::train(&matrices, kind, &config)?;
    let out = ctx.path(&a.out);
    predict::save_model(&model, &out)?;
    for w in &model.training_meta.warnings {
        log::warn!("{w}");
    }
    eprintln!(
        "trained {kind} on {} examples from {} records (seed {}); wrote {}",
        model.training_meta.training_examples,
        records.len(),
        config.seed,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    predicted_index: Option<usize>,
    gold_index: Option<usize>,
}

fn predict_cmd(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    let model = predict::load_model(&ctx.path(&a.model_file))?;
    let records = load(ctx, &a.input, None)?;
    let predictions: Vec<Option<usize>> = thread_pool(&a.jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let s = Sample::from_record(r, model.mode())?;
                predict::predict_index(&model, &s.matrix, a.threshold).with_context(|| format!("record {}", r.id))
            })
            .collect::<Result<_>>()
    })?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(&ctx.path(p))?),
        None => Box::new(io::stdout().lock()),
    };
    for (r, p) in records.iter().zip(&predictions) {
        serde_json::to_writer(
            &mut out,
            &PredictionLine {
                id: &r.id,
                predicted_index: *p,
                gold_index: r.gold_index,
            },
        )?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn write_report(out_dir: &Path, report: &EvalReport) -> Result<()> {
    let stem = report.file_stem();
    write_file(&out_dir.join(format!("{stem}.csv")), &report.to_csv()?)?;
    write_file(
        &out_dir.join(format!("{stem}.json")),
        &(serde_json::to_string_pretty(report)? + "\n"),
    )?;
    println!(
        "{} {} {} (k={}, seed={}, digest {})",
        report.protocol,
        report.mode.as_str(),
        report.model,
        report.k,
        report.seed,
        &report.config_digest[..12]
    );
    for c in &report.cells {
        println!(
            "  {:>20} -> {:<20} {:>8} ({}/{})",
            c.train_group,
            c.test_group,
            c.accuracy.map_or("n/a".into(), |a| format!("{:.2}%", 100.0 * a)),
            c.counts.matches,
            c.counts.evaluated
        );
    }
    if let Some(acc) = report.overall_accuracy {
        println!("  overall {:.2}% ({}/{})", 100.0 * acc, report.overall.matches, report.overall.evaluated);
    }
    log::info!("reports written to {}/{stem}.{{csv,json}}", out_dir.display());
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    if a.k < 2 {
        return Err(usage("--k must be at least 2"));
    }
    let spec = model_spec(&a.model, a.threshold)?;
    let mode = FeatureMode::from(a.model.mode);
    let records = load(ctx, &a.input, None)?;
    require_labeled(&records)?;
    let samples = thread_pool(&a.jobs)?.install(|| samples(&records, mode))?;
    let plan = harness::make_folds(&samples, a.regime, a.k, a.model.seed)?;
    let report = harness::evaluate(&plan, &samples, &spec, mode)?;
    write_report(&ctx.path(&a.out_dir), &report)
}

fn cross(ctx: &Ctx, a: CrossArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    if a.k < 2 {
        return Err(usage("--k must be at least 2"));
    }
    let spec = model_spec(&a.model, a.threshold)?;
    let mode = FeatureMode::from(a.model.mode);
    let records = load(ctx, &a.input, None)?;
    require_labeled(&records)?;
    let samples = thread_pool(&a.jobs)?.install(|| samples(&records, mode))?;
    let report = harness::cross_matrix(&samples, &spec, mode, a.k, a.model.seed)?;
    write_report(&ctx.path(&a.out_dir), &report)
}

#[derive(Serialize)]
struct Analysis<'a> {
    records: usize,
    labeled: usize,
    rates: Vec<harness::RateTable>,
    proportions: Vec<harness::ProportionTable>,
    distributions: &'a harness::DistributionReport,
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> Result<()> {
    let records = load(ctx, &a.input, None)?;
    let annotated = thread_pool(&a.jobs)?.install(|| annotate_all(&records))?;
    let out_dir = ctx.path(&a.out_dir);
    let denominator = match a.rate_denominator {
        harness::RateDenominator::Prefix => "prefix",
        harness::RateDenominator::All => "all",
    };
    let mut rates = Vec::new();
    let mut proportions = Vec::new();
    for group_by in [GroupBy::Model, GroupBy::Dataset, GroupBy::All] {
        let rate = harness::type_rate_table(&annotated, group_by, a.rate_denominator);
        write_file(
            &out_dir.join(format!("type-rates-{}-{denominator}.csv", group_by.as_str())),
            &rate.to_csv()?,
        )?;
        rates.push(rate);
        let prop = harness::type_proportion_table(&annotated, group_by);
        write_file(
            &out_dir.join(format!("type-proportions-{}.csv", group_by.as_str())),
            &prop.to_csv()?,
        )?;
        proportions.push(prop);
    }
    let distributions = harness::distribution_report(&annotated);
    write_file(&out_dir.join("distributions.csv"), &distributions.to_csv()?)?;
    let labeled = records.iter().filter(|r| r.gold_index.is_some()).count();
    let analysis = Analysis {
        records: records.len(),
        labeled,
        rates,
        proportions,
        distributions: &distributions,
    };
    write_file(
        &out_dir.join(format!("analysis-{denominator}.json")),
        &(serde_json::to_string_pretty(&analysis)? + "\n"),
    )?;
    println!("{} records ({labeled} labeled)", records.len());
    if let Some(row) = analysis.rates.iter().find(|t| t.group_by == GroupBy::All).and_then(|t| t.groups.get("all")) {
        println!("hallucination rate by token type ({denominator} denominator):");
        for (t, c) in row {
            println!("  {:<15} {:>7.2}% ({}/{})", t.name(), 100.0 * c.rate, c.hallucinated, c.total);
        }
    }
    log::info!("tables written to {}", out_dir.display());
    Ok(())
}

fn demo_figure1() -> Result<()> {
    let fig = demo::worked_example()?;
    println!("prompt:     {}", demo::PROMPT.trim_end());
    println!("generated:  {}", fig.generated.original);
    println!("normalized: {}", fig.generated.normalized);
    for (i, c) in fig.canonicals.iter().enumerate() {
        let index = fig.label.per_canonical.get(i).and_then(|o| o.index);
        println!(
            "canonical {}: {}  (mismatch at token {})",
            i + 1,
            c.normalized,
            index.map_or("none".into(), |i| i.to_string())
        );
    }
    let index = fig.index().ok_or_else(|| anyhow!("the example unexpectedly matched a canonical solution"))?;
    println!("hallucinated token: {:?}", fig.token().unwrap_or_default());
    println!("hallucination token index: {index}");
    Ok(())
}
