use std::fs::File;
use std::path::Path;

use drum_core::adapter::{forward, load_checkpoint, save_checkpoint, AdapterConfig, AdapterParams, PersonalizationRequest};
use drum_core::coreset::{coreset_sample, sample_count, CoresetConfig};
use drum_core::eval::{
    evaluate, line_chart_svg, run_ablation, run_alpha_sweep, run_sampling_sweep, select_references, write_alpha_csv,
    write_reports_csv, EvalConfig, EvalReport, HistoryScope, SamplingMethod, Series,
};
use drum_core::guidance::GuidanceConfig;
use drum_core::store::{gen_synthetic, load_corpus, save_corpus, EmbeddingCorpus, PromptRecord, Provenance, SyntheticSpec};
use drum_core::trainer::{train, TrainConfig};
use drum_core::{DrumError, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{create_dir, read_json, sidecar, write_json, RunRecorder, RUN_MANIFEST};
use crate::{
    Cli, Command, EvalFlags, EvaluateArgs, GenArgs, InspectArgs, Method, PersonalizeArgs, SampleArgs, SweepArgs,
    SweepKind, TrainArgs,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => gen(cli, a),
        Command::Inspect(a) => inspect(a),
        Command::Sample(a) => sample(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Personalize(a) => personalize(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn seed_or(cli: &Cli, fallback: u64) -> u64 {
    cli.seed.unwrap_or(fallback)
}

fn load(path: &Path) -> Result<EmbeddingCorpus> {
    let corpus = load_corpus(path)?;
    eprintln!("loaded {} records from {}", corpus.len(), path.display());
    Ok(corpus)
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$( if let Some(v) = a.$flag { spec.$field = v; } )*};
    }
    set!(users => n_users, history => history_len, d_sim => d_sim, d_cond => d_cond,
         max_tokens => max_tokens, archetypes => archetypes, noise => noise);
    spec.seed = seed_or(cli, spec.seed);

    let mut run = RunRecorder::new("gen-synthetic", spec.seed, cli.threads);
    run.config(&spec)?;
    let corpus = gen_synthetic(&spec)?;
    create_dir(&a.out)?;
    save_corpus(&corpus, &a.out)?;
    eprintln!("wrote {} records ({} users) to {}", corpus.len(), spec.n_users, a.out.display());
    run.output(&a.out);
    run.finish(&a.out.join(RUN_MANIFEST))
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let c = load_corpus(&a.corpus)?;
    println!("records: {}", c.len());
    println!("users: {}", c.users().len());
    println!("d_sim: {}", c.d_sim);
    println!("d_cond: {}", c.d_cond);
    println!("max_tokens: {}", c.max_tokens);
    println!("encoder: {}", c.manifest.encoder);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub ratio: f64,
    pub sample_size: usize,
    pub approx_size: usize,
    pub seed: u64,
    pub use_preferences: bool,
    pub user: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileFile {
    /// Indices into the source corpus, in selection order.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub config: ProfileConfig,
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let seed = seed_or(cli, 0);
    let pool: Vec<usize> = match &a.user {
        Some(u) => corpus
            .users()
            .into_iter()
            .find(|g| &g.user == u)
            .map(|g| g.history)
            .ok_or_else(|| DrumError::Invalid(format!("no user {u:?} in corpus")))?,
        None => (0..corpus.len()).collect(),
    };
    let sub = corpus.subset(&pool);
    let cfg = CoresetConfig {
        sample_size: sample_count(a.ratio, sub.len())?,
        approx_size: a.k.unwrap_or(sub.len()),
        seed,
        use_preferences: !a.no_preferences,
    };
    let profile = coreset_sample(&sub, &cfg)?;
    let out = ProfileFile {
        indices: profile.indices.iter().map(|&i| pool[i]).collect(),
        ids: profile.source_ids,
        config: ProfileConfig {
            ratio: a.ratio,
            sample_size: cfg.sample_size,
            approx_size: cfg.approx_size,
            seed,
            use_preferences: cfg.use_preferences,
            user: a.user.clone(),
        },
    };

    let mut run = RunRecorder::new("sample", seed, cli.threads);
    run.config(&out.config)?;
    run.input("corpus", &a.corpus);
    write_json(&a.out, &out)?;
    eprintln!("selected {} of {} records", out.indices.len(), sub.len());
    run.output(&a.out);
    run.finish(&sidecar(&a.out))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    adapter: Option<AdapterConfig>,
    train: TrainConfig,
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let mut file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let t = &mut file.train;
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.lr {
        t.lr_init = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.holdout {
        t.holdout = v;
    }
    t.grad_check |= a.grad_check;
    t.seed = seed_or(cli, t.seed);
    let seed = t.seed;

    let (init, step0) = match &a.init {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            (ck.params, ck.step)
        }
        None => {
            let mut cfg = file.adapter.unwrap_or(AdapterConfig { n_layers: 10, ..AdapterConfig::toy(corpus.d_cond) });
            if let Some(v) = a.layers {
                cfg.n_layers = v;
            }
            if let Some(v) = a.heads {
                cfg.n_heads = v;
            }
            (AdapterParams::init(cfg, seed)?, 0)
        }
    };
    file.adapter = Some(*init.config());

    let mut run = RunRecorder::new("train", seed, cli.threads);
    run.config(&file)?;
    run.input("corpus", &a.corpus);
    if let Some(p) = &a.init {
        run.input("init", p);
    }
    eprintln!(
        "training {} parameters for {} steps (batch {}, lr {})",
        init.len(),
        file.train.total_steps,
        file.train.batch_size,
        file.train.lr_init
    );
    let (params, report) = train(&corpus, &init, &file.train)?;
    eprintln!(
        "done in {:.1}s: train cosine {:.5}, held-out {}",
        report.wall_clock_secs,
        report.final_train_cosine,
        report.final_holdout_cosine.map_or("n/a".to_string(), |c| format!("{c:.5}"))
    );

    create_dir(&a.out)?;
    save_checkpoint(&a.out, &params, step0 + report.steps as u64, seed)?;
    let report_path = a.out.join("train_report.json");
    write_json(&report_path, &report)?;
    run.output(&a.out);
    run.output(&report_path);
    run.finish(&a.out.join(RUN_MANIFEST))
}

fn record<'a>(corpus: &'a EmbeddingCorpus, id: &str) -> Result<&'a PromptRecord> {
    corpus
        .index_of(id)
        .map(|i| &corpus.records[i])
        .ok_or_else(|| DrumError::Invalid(format!("no record {id:?} in corpus")))
}

fn personalize(cli: &Cli, a: &PersonalizeArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let ck = load_checkpoint(&a.params)?;
    let profile: ProfileFile = read_json(&a.profile)?;
    let target = record(&corpus, &a.target_id)?.clone();
    let references = profile.ids.iter().map(|id| record(&corpus, id).cloned()).collect::<Result<Vec<_>>>()?;
    let guidance = if a.no_guidance {
        GuidanceConfig { alpha: a.alpha, enabled: false }
    } else {
        GuidanceConfig::new(a.alpha)
    };
    let req = PersonalizationRequest {
        target: target.clone(),
        references,
        guidance,
        uncond: corpus.uncond.clone(),
    };
    let out = forward(&ck.params, &req)?;

    let mut extras = corpus.manifest.extras.clone();
    extras.insert("personalized_target".into(), a.target_id.clone());
    extras.insert("alpha".into(), a.alpha.to_string());
    extras.insert("guidance".into(), (!a.no_guidance).to_string());
    extras.insert("references".into(), profile.ids.join(","));
    let result = EmbeddingCorpus {
        records: vec![PromptRecord {
            condition: out.condition.mapv(|x| x as f32),
            class_embedding: out.class_embedding.map(|c| c.iter().map(|&x| x as f32).collect()),
            ..target
        }],
        d_sim: corpus.d_sim,
        d_cond: corpus.d_cond,
        max_tokens: corpus.max_tokens,
        uncond: corpus.uncond.clone(),
        manifest: Provenance {
            encoder: corpus.manifest.encoder.clone(),
            extras,
        },
    };

    let seed = seed_or(cli, 0);
    let mut run = RunRecorder::new("personalize", seed, cli.threads);
    run.config(&serde_json::json!({
        "target_id": a.target_id,
        "alpha": a.alpha,
        "guidance": !a.no_guidance,
        "references": profile.ids,
    }))?;
    run.input("params", &a.params);
    run.input("corpus", &a.corpus);
    run.input("profile", &a.profile);
    create_dir(&a.out)?;
    save_corpus(&result, &a.out)?;
    eprintln!("personalized {} against {} references", a.target_id, profile.ids.len());
    run.output(&a.out);
    run.finish(&a.out.join(RUN_MANIFEST))
}

fn sampling_method(m: Method) -> SamplingMethod {
    match m {
        Method::Coreset => SamplingMethod::Coreset,
        Method::Random => SamplingMethod::Random,
        Method::Uniform => SamplingMethod::Uniform,
        Method::Full => SamplingMethod::Full,
    }
}

fn eval_config(cli: &Cli, f: &EvalFlags, label: &str) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = match &f.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::new(label, 0.3, SamplingMethod::Coreset, 0.1, 0),
    };
    if let Some(v) = f.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = f.ratio {
        cfg.ratio = v;
    }
    if f.k.is_some() {
        cfg.approx_size = f.k;
    }
    if f.no_preferences {
        cfg.use_preferences = false;
    }
    if let Some(n) = f.history_recent {
        cfg.history_scope = HistoryScope::Recent(n);
    }
    cfg.seed = seed_or(cli, cfg.seed);
    Ok(cfg)
}

fn load_eval_inputs(f: &EvalFlags) -> Result<(EmbeddingCorpus, AdapterParams)> {
    let corpus = load(&f.corpus)?;
    let params = load_checkpoint(&f.params)?.params;
    Ok((corpus, params))
}

fn write_reports(dir: &Path, stem: &str, reports: &[EvalReport], run: &mut RunRecorder) -> Result<()> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    write_json(&json, reports)?;
    let file = File::create(&csv).map_err(|e| DrumError::io(&csv, e))?;
    write_reports_csv(reports, file)?;
    for r in reports {
        eprintln!(
            "{:>14}  target {:.4}  history {:.4}",
            r.config.label, r.target_align, r.history_align
        );
    }
    run.output(&json);
    run.output(&csv);
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut cfg = eval_config(cli, &a.common, "evaluate")?;
    if let Some(m) = a.method {
        cfg.sampling = sampling_method(m);
    }
    if a.no_guidance {
        cfg.guidance = false;
    }
    let (corpus, params) = load_eval_inputs(&a.common)?;
    let mut run = RunRecorder::new("evaluate", cfg.seed, cli.threads);
    run.config(&cfg)?;
    run.input("corpus", &a.common.corpus);
    run.input("params", &a.common.params);

    let baseline = evaluate(&corpus, &params, &cfg.baseline_of(), None)?;
    let report = evaluate(&corpus, &params, &cfg, Some(&baseline))?;
    let out = &a.common.out;
    create_dir(out)?;
    write_reports(out, "report", &[baseline, report], &mut run)?;
    run.finish(&out.join(RUN_MANIFEST))
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let label = match a.kind {
        SweepKind::Sampling => "sampling",
        SweepKind::Alpha => "alpha",
        SweepKind::Ablation => "ablation",
    };
    let base = eval_config(cli, &a.common, label)?;
    let (corpus, params) = load_eval_inputs(&a.common)?;
    let mut run = RunRecorder::new("sweep", base.seed, cli.threads);
    let out = &a.common.out;
    create_dir(out)?;
    run.input("corpus", &a.common.corpus);
    run.input("params", &a.common.params);

    match a.kind {
        SweepKind::Sampling => {
            let methods: Vec<SamplingMethod> = a.methods.iter().map(|&m| sampling_method(m)).collect();
            run.config(&serde_json::json!({ "kind": label, "base": base, "methods": methods, "ratios": a.ratios }))?;
            let reports = run_sampling_sweep(&corpus, &params, &base, &methods, &a.ratios)?;
            write_reports(out, "sweep", &reports, &mut run)?;
            if a.plot {
                let series: Vec<Series> = methods
                    .iter()
                    .map(|m| Series {
                        name: m.name().to_string(),
                        points: reports
                            .iter()
                            .filter(|r| r.config.sampling == *m)
                            .map(|r| (r.config.ratio, r.history_align))
                            .collect(),
                    })
                    .collect();
                let svg = line_chart_svg("History align by sampling ratio", "sampling ratio", "history align", &series);
                write_svg(out, &svg, &mut run)?;
            }
        }
        SweepKind::Ablation => {
            run.config(&serde_json::json!({ "kind": label, "base": base }))?;
            let reports = run_ablation(&corpus, &params, &base)?;
            write_reports(out, "sweep", &reports, &mut run)?;
            if a.plot {
                eprintln!("the ablation sweep has no line chart; skipping --plot");
            }
        }
        SweepKind::Alpha => {
            let groups = corpus.users();
            let target_idx = match &a.target_id {
                Some(id) => corpus
                    .index_of(id)
                    .ok_or_else(|| DrumError::Invalid(format!("no record {id:?} in corpus")))?,
                None => groups
                    .iter()
                    .find_map(|g| g.targets.first().copied())
                    .ok_or_else(|| DrumError::Invalid("corpus has no target record".into()))?,
            };
            let target = corpus.records[target_idx].clone();
            let references: Vec<PromptRecord> = match &a.profile {
                Some(p) => {
                    run.input("profile", p);
                    let profile: ProfileFile = read_json(p)?;
                    profile.ids.iter().map(|id| record(&corpus, id).cloned()).collect::<Result<_>>()?
                }
                None => {
                    let group = groups
                        .iter()
                        .find(|g| g.user == target.user())
                        .ok_or_else(|| DrumError::Invalid(format!("no user for {:?}", target.id)))?;
                    let cfg = EvalConfig { sampling: SamplingMethod::Coreset, ..base.clone() };
                    select_references(&corpus, &group.history, &cfg, cfg.seed)?
                        .into_iter()
                        .map(|i| corpus.records[i].clone())
                        .collect()
                }
            };
            run.config(&serde_json::json!({
                "kind": label,
                "target_id": target.id,
                "references": references.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
                "alphas": a.alphas,
            }))?;
            let rows = run_alpha_sweep(&target, &references, &corpus.uncond, &params, &a.alphas)?;
            let json = out.join("sweep.json");
            let csv = out.join("sweep.csv");
            write_json(&json, &rows)?;
            write_alpha_csv(&rows, File::create(&csv).map_err(|e| DrumError::io(&csv, e))?)?;
            for r in &rows {
                eprintln!(
                    "alpha {:.2}  cond->target {:.4}  cond->refs {:.4}",
                    r.alpha, r.condition_target_cosine, r.condition_reference_cosine
                );
            }
            run.output(&json);
            run.output(&csv);
            if a.plot {
                let mut series = vec![
                    Series {
                        name: "cond vs target".into(),
                        points: rows.iter().map(|r| (r.alpha, r.condition_target_cosine)).collect(),
                    },
                    Series {
                        name: "cond vs refs".into(),
                        points: rows.iter().map(|r| (r.alpha, r.condition_reference_cosine)).collect(),
                    },
                ];
                let aligned: [(&str, Vec<(f64, f64)>); 2] = [
                    ("target align", rows.iter().filter_map(|r| r.target_align.map(|v| (r.alpha, v))).collect()),
                    ("reference align", rows.iter().filter_map(|r| r.reference_align.map(|v| (r.alpha, v))).collect()),
                ];
                for (name, points) in aligned {
                    if !points.is_empty() {
                        series.push(Series { name: name.to_string(), points });
                    }
                }
                let svg = line_chart_svg("Personalization degree", "alpha", "similarity", &series);
                write_svg(out, &svg, &mut run)?;
            }
        }
    }
    run.finish(&out.join(RUN_MANIFEST))
}

fn write_svg(dir: &Path, svg: &str, run: &mut RunRecorder) -> Result<()> {
    let path = dir.join("sweep.svg");
    std::fs::write(&path, svg).map_err(|e| DrumError::io(&path, e))?;
    run.output(&path);
    Ok(())
}
