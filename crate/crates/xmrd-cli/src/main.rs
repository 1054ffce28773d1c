//! Command-line driver for the cross-modal retrieval pipeline.
//!
//! One command per process; every artifact is written atomically and
//! carries the hash of the effective run configuration, so any output can
//! be regenerated from its metadata plus the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xmrd_core::cca::fit_cca;
use xmrd_core::ckpt::{
    load_cca_model, load_joint_model, store_cca_model, store_joint_model, Checkpoint,
    CheckpointMeta,
};
use xmrd_core::config::RunConfig;
use xmrd_core::dataset::{
    build_protocol, generate_attributes, generate_synthetic, ingest_dataset, serialize_dataset,
    Dataset, DatasetIndex, Payload, ProtocolMode, RetrievalProtocol, Split, SyntheticSpec,
};
use xmrd_core::eval::{
    assemble_features, attribute_flip_experiment, encode_dataset, evaluate,
    paired_training_features, rank_gallery, EvaluationReport, Scenario,
};
use xmrd_core::nn::{gradcheck::standard_suite, Encoder};
use xmrd_core::text::{build_dictionary, Dictionary, EmbeddingTable};
use xmrd_core::train::{
    apply_strategy, build_training_set, init_joint_model, run_stage, train_language_only,
    train_vision_only, InitSource, JointClassifier, PretrainedStore, StrategyPlan, TrainingSet,
};
use xmrd_core::util::atomic_write;
use xmrd_core::{CcaModel64, FeatureStore64, JointModel64, TrainingSet64};

#[derive(Parser)]
#[command(
    name = "xmrd",
    about = "Cross-modal person retrieval: synthetic data, joint training, CCA alignment, retrieval evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic synthetic train/test datasets.
    SynthGen(SynthGenArgs),
    /// Normalize a raw JSONL dataset and print an ingestion report.
    Ingest(IngestArgs),
    /// Build a single-shot retrieval protocol from a test dataset.
    BuildProtocol(BuildProtocolArgs),
    /// Train the joint model for one or both stages.
    Train(TrainArgs),
    /// Fit CCA on the training features of a trained model.
    FitCca(FitCcaArgs),
    /// Dump encoded features of a dataset to a checkpoint file.
    Encode(EncodeArgs),
    /// Ranked gallery list for one query sample.
    Retrieve(RetrieveArgs),
    /// Evaluate retrieval scenarios; writes JSON reports plus a CSV row per
    /// (scenario, protocol, seed).
    Evaluate(EvaluateArgs),
    /// Attribute-flip sensitivity curve.
    AttrSensitivity(AttrSensitivityArgs),
    /// Finite-difference verification of every layer kind and both stacks.
    Gradcheck(GradcheckArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthGen(a) => cmd_synth_gen(a),
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::BuildProtocol(a) => cmd_build_protocol(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::FitCca(a) => cmd_fit_cca(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Retrieve(a) => cmd_retrieve(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::AttrSensitivity(a) => cmd_attr_sensitivity(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ---------------------------------------------------------------- plumbing

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_split(path: &Path, split: Split) -> Result<Dataset> {
    let (ds, _) = ingest_dataset(path, split)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds)
}

/// The dictionary is a pure function of the train corpus and min_count, so
/// every command rebuilds it rather than trusting a sidecar file.
fn dictionary_for(cfg: &RunConfig, train_ds: &Dataset) -> Result<Dictionary> {
    let corpus: Vec<&str> = train_ds
        .samples()
        .iter()
        .filter_map(|s| match &s.payload {
            Payload::Text(t) => Some(t.as_str()),
            Payload::Vision(_) => None,
        })
        .collect();
    Ok(build_dictionary(&corpus, cfg.dictionary_min_count)?)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(JointModel64, CheckpointMeta)> {
    let ck = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = load_joint_model::<f64>(&ck, &cfg.arch)?;
    Ok((model, ck.meta))
}

fn encoded_test_features(
    cfg: &RunConfig,
    model: &JointModel64,
) -> Result<(Dataset, FeatureStore64)> {
    let train_ds = load_split(&cfg.train_data, Split::Train)?;
    let dict = dictionary_for(cfg, &train_ds)?;
    let test_ds = load_split(&cfg.test_data, Split::Test)?;
    let store = encode_dataset(
        &test_ds,
        &model.vision,
        &model.language,
        &model.embedding,
        &dict,
        cfg.arch.l_max,
    )?;
    Ok((test_ds, store))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} {s:?}: {e}")))
        .collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

// ------------------------------------------------------------- subcommands

#[derive(Args)]
struct SynthGenArgs {
    /// JSON file holding {"train": <spec>, "test": <spec>}.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for train.jsonl, test.jsonl, attributes.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    train: SyntheticSpec,
    test: SyntheticSpec,
}

fn cmd_synth_gen(a: SynthGenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec)
        .with_context(|| format!("reading spec {}", a.spec.display()))?;
    let file: SynthFile = serde_json::from_str(&text).context("parsing synthetic spec")?;
    std::fs::create_dir_all(&a.out)?;

    let train = generate_synthetic(&file.train, Split::Train)?;
    let test = generate_synthetic(&file.test, Split::Test)?;
    serialize_dataset(&train, &a.out.join("train.jsonl"))?;
    serialize_dataset(&test, &a.out.join("test.jsonl"))?;
    let attrs = generate_attributes(&file.test)?;
    write_json(&a.out.join("attributes.json"), &attrs)?;

    println!(
        "{}",
        serde_json::json!({
            "train_samples": train.samples().len(),
            "test_samples": test.samples().len(),
            "train_identities": train.identity_count(),
            "test_identities": test.identity_count(),
            "attribute_bits": attrs.values().next().map_or(0, |v| v.len()),
            "out": a.out,
        })
    );
    Ok(())
}

#[derive(Args)]
struct IngestArgs {
    /// Raw JSONL dataset file.
    #[arg(long)]
    input: PathBuf,
    /// Split the file belongs to: train or test.
    #[arg(long)]
    split: String,
    /// Normalized dataset output path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(text: &str) -> Result<Split> {
    match text {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (ds, report) = ingest_dataset(&a.input, split)?;
    serialize_dataset(&ds, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Args)]
struct BuildProtocolArgs {
    /// Test-split dataset file.
    #[arg(long)]
    data: PathBuf,
    /// across_pose or within_pose.
    #[arg(long, default_value = "across_pose")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Protocol JSON output path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_build_protocol(a: BuildProtocolArgs) -> Result<()> {
    let ds = load_split(&a.data, Split::Test)?;
    let mode: ProtocolMode = a.mode.parse()?;
    let (protocol, report) = build_protocol(&ds, mode, a.seed)?;
    protocol.save(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's strategy id (1-5).
    #[arg(long)]
    strategy: Option<u8>,
    /// Stages to run in order, e.g. "1" or "1,2".
    #[arg(long, default_value = "1")]
    stage: String,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.strategy {
        cfg.train.strategy = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let stages: Vec<u8> = parse_list(&a.stage, "stage")?;
    if stages.is_empty() || stages.iter().any(|&s| s == 0 || s > 2) || !stages.is_sorted() {
        bail!("--stage must be \"1\", \"2\", or \"1,2\"");
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    let train_ds = load_split(&cfg.train_data, Split::Train)?;
    let dict = dictionary_for(&cfg, &train_ds)?;
    dict.save(&cfg.out_dir.join("dictionary.json"))?;
    let set: TrainingSet64 = build_training_set(&train_ds, &dict, cfg.arch.l_max)?;

    let plan = apply_strategy(cfg.train.strategy)?;
    let store = prepare_pretrained(&cfg, &plan, &train_ds, &set, &dict)?;
    let mut model = init_joint_model::<f64>(
        &cfg.arch,
        dict.vocab_size(),
        set.classes,
        &plan,
        &store,
        cfg.train.seed,
    )?;

    for &stage in &stages {
        let mut tc = cfg.train.clone();
        tc.stage = stage;
        let mut log = Vec::new();
        let records = run_stage(&mut model, &set, &tc, &plan, Some(&mut log))?;
        let tag = format!(
            "strategy{}-seed{}-stage{stage}",
            cfg.train.strategy, cfg.train.seed
        );
        atomic_write(&cfg.out_dir.join(format!("train-{tag}.jsonl")), &log)?;

        let mut ck = Checkpoint::new(CheckpointMeta {
            config_hash: cfg.hash(),
            seed: cfg.train.seed,
            stage: stage as u32,
            epoch: records.len() as u32,
            extra: cfg.meta_extra(),
        });
        store_joint_model(&mut ck, &model)?;
        let ck_path = cfg.out_dir.join(format!("model-{tag}.ck"));
        ck.save(&ck_path)?;

        let last = records.last().expect("at least one epoch");
        println!(
            "stage {stage}: epochs {} L_img {:.4} L_txt {:.4} acc_img {:.3} acc_txt {:.3} -> {}",
            records.len(),
            last.l_img,
            last.l_txt,
            last.acc_img,
            last.acc_txt,
            ck_path.display()
        );
    }
    Ok(())
}

/// Trains whatever pretrained inputs the strategy's init table demands:
/// task-pretrained branches come from single-modality training on the task
/// data; the auxiliary vision checkpoint comes from view (pose) prediction,
/// an unrelated label space over the same images.
fn prepare_pretrained(
    cfg: &RunConfig,
    plan: &StrategyPlan,
    train_ds: &Dataset,
    set: &TrainingSet64,
    dict: &Dictionary,
) -> Result<PretrainedStore<f64>> {
    let mut store = PretrainedStore::default();
    let mut pre_cfg = cfg.train.clone();
    pre_cfg.stage = 1;

    if plan.vision.init == InitSource::TaskPretrained {
        let mut enc = Encoder::vision(cfg.arch.vision_input, &cfg.arch.vision, pre_cfg.seed)?;
        let mut cls = JointClassifier::new_seeded(set.classes, enc.feature_dim(), pre_cfg.seed);
        train_vision_only(&mut enc, &mut cls, set, &pre_cfg)?;
        store.vision_task = Some(enc);
    }
    if plan.vision.init == InitSource::AuxiliaryPretrained {
        let (labels, classes) = view_labels(train_ds);
        let aux = TrainingSet {
            vision: set.vision.clone(),
            labels,
            tokens: Vec::new(),
            token_labels: Vec::new(),
            text_choices: Vec::new(),
            classes,
        };
        let mut enc = Encoder::vision(cfg.arch.vision_input, &cfg.arch.vision, pre_cfg.seed)?;
        let mut cls = JointClassifier::new_seeded(classes, enc.feature_dim(), pre_cfg.seed);
        train_vision_only(&mut enc, &mut cls, &aux, &pre_cfg)?;
        store.vision_auxiliary = Some(enc);
    }
    if plan.language.init == InitSource::TaskPretrained {
        let mut enc = Encoder::language(cfg.arch.l_max, cfg.arch.e_dim, &cfg.arch.language, pre_cfg.seed)?;
        let mut emb = EmbeddingTable::new_seeded(dict.vocab_size(), cfg.arch.e_dim, pre_cfg.seed);
        let mut cls = JointClassifier::new_seeded(set.classes, enc.feature_dim(), pre_cfg.seed);
        train_language_only(&mut enc, &mut emb, &mut cls, set, &pre_cfg)?;
        store.language_task = Some((enc, emb));
    }
    if plan.language.init == InitSource::AuxiliaryPretrained {
        bail!("no auxiliary-pretrained language checkpoint is defined");
    }
    Ok(store)
}

/// View-id labels for every vision row, in training-set row order
/// (identity, then view, then sample id).
fn view_labels(ds: &Dataset) -> (Vec<u32>, usize) {
    let index = DatasetIndex::build(ds);
    let mut class_of: BTreeMap<i64, u32> = BTreeMap::new();
    let mut labels = Vec::new();
    for identity in index.identities() {
        if let Some(views) = index.views(identity) {
            for (&view, samples) in views {
                let next = class_of.len() as u32;
                let class = *class_of.entry(view).or_insert(next);
                labels.extend(std::iter::repeat_n(class, samples.vision.len()));
            }
        }
    }
    (labels, class_of.len())
}

#[derive(Args)]
struct FitCcaArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trained joint-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// CCA checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_fit_cca(a: FitCcaArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, meta) = load_model(&cfg, &a.checkpoint)?;
    let train_ds = load_split(&cfg.train_data, Split::Train)?;
    let dict = dictionary_for(&cfg, &train_ds)?;
    let store = encode_dataset(
        &train_ds,
        &model.vision,
        &model.language,
        &model.embedding,
        &dict,
        cfg.arch.l_max,
    )?;
    let (x, y) = paired_training_features(&train_ds, &store)?;
    let cca = fit_cca(&x, &y, cfg.cca_regularization)?;

    let mut extra = cfg.meta_extra();
    extra.insert(
        "top_correlation".to_string(),
        format!("{:.6}", cca.correlations()[0]),
    );
    extra.insert("pairs".to_string(), x.ncols().to_string());
    let mut ck = Checkpoint::new(CheckpointMeta {
        config_hash: cfg.hash(),
        seed: meta.seed,
        stage: meta.stage,
        epoch: meta.epoch,
        extra,
    });
    store_cca_model(&mut ck, &cca)?;
    ck.save(&a.out)?;

    println!(
        "fitted {} components on {} pairs, top correlation {:.4} -> {}",
        cca.components(),
        x.ncols(),
        cca.correlations()[0],
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to encode.
    #[arg(long)]
    data: PathBuf,
    /// Split of that file: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Feature checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, meta) = load_model(&cfg, &a.checkpoint)?;
    let train_ds = load_split(&cfg.train_data, Split::Train)?;
    let dict = dictionary_for(&cfg, &train_ds)?;
    let ds = load_split(&a.data, parse_split(&a.split)?)?;
    let store = encode_dataset(
        &ds,
        &model.vision,
        &model.language,
        &model.embedding,
        &dict,
        cfg.arch.l_max,
    )?;

    let mut ck = Checkpoint::new(CheckpointMeta {
        config_hash: cfg.hash(),
        seed: meta.seed,
        stage: meta.stage,
        epoch: meta.epoch,
        extra: cfg.meta_extra(),
    });
    for (id, feat) in store.iter() {
        ck.put_vector(&format!("feat/{id}"), feat)?;
    }
    ck.save(&a.out)?;
    println!(
        "encoded {} samples at {} dims -> {}",
        store.len(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Protocol JSON file.
    #[arg(long)]
    protocol: PathBuf,
    /// One of VxV, LxL, LxV, VLxV, VLxVL.
    #[arg(long)]
    scenario: String,
    /// CCA checkpoint (required for LxV and VLxV).
    #[arg(long)]
    cca: Option<PathBuf>,
    /// Query sample id to rank the gallery for.
    #[arg(long)]
    query: String,
    /// Gallery entries to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn load_cca(path: &Option<PathBuf>) -> Result<Option<CcaModel64>> {
    match path {
        Some(p) => Ok(Some(load_cca_model::<f64>(&Checkpoint::load(p)?)?)),
        None => Ok(None),
    }
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, _) = load_model(&cfg, &a.checkpoint)?;
    let (test_ds, store) = encoded_test_features(&cfg, &model)?;
    let protocol = RetrievalProtocol::load(&a.protocol)?;
    protocol.check(&test_ds)?;
    let scenario: Scenario = a.scenario.parse()?;
    let cca = load_cca(&a.cca)?;

    let assembled = assemble_features(&test_ds, &protocol, &store, scenario, cca.as_ref())?;
    let ranking = rank_gallery(&assembled)?;
    let q = assembled
        .query_ids
        .iter()
        .position(|id| id == &a.query)
        .with_context(|| format!("{:?} is not a {scenario} query in this protocol", a.query))?;

    let rows: Vec<serde_json::Value> = ranking.order[q]
        .iter()
        .take(a.top)
        .enumerate()
        .map(|(rank, &g)| {
            serde_json::json!({
                "rank": rank + 1,
                "sample_id": assembled.gallery_ids[g],
                "identity": test_ds.identity_name(assembled.gallery_identity[g]),
                "correct": assembled.gallery_identity[g] == assembled.query_identity[q],
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "query": a.query,
            "scenario": scenario.to_string(),
            "first_match_rank": ranking.first_match_rank[q],
            "gallery": rows,
        }))?
    );
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    /// Comma-separated scenario list; defaults to the config's list.
    #[arg(long)]
    scenarios: Option<String>,
    /// CCA checkpoint (required for LxV and VLxV).
    #[arg(long)]
    cca: Option<PathBuf>,
    /// Report directory; defaults to <out_dir>/reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let scenarios: Vec<Scenario> = match &a.scenarios {
        Some(list) => parse_list(list, "scenario")?,
        None => cfg.scenarios.clone(),
    };
    let (model, _) = load_model(&cfg, &a.checkpoint)?;
    let (test_ds, store) = encoded_test_features(&cfg, &model)?;
    let protocol = RetrievalProtocol::load(&a.protocol)?;
    protocol.check(&test_ds)?;
    let cca = load_cca(&a.cca)?;

    let out_dir = a.out.unwrap_or_else(|| cfg.out_dir.join("reports"));
    std::fs::create_dir_all(&out_dir)?;
    let mode = protocol.mode.to_string();
    let mut csv = String::from(EvaluationReport::csv_header());
    csv.push('\n');
    for &scenario in &scenarios {
        let assembled = assemble_features(&test_ds, &protocol, &store, scenario, cca.as_ref())?;
        let metrics = evaluate(&rank_gallery(&assembled)?)?;
        let mut report =
            EvaluationReport::new(scenario, &mode, protocol.seed, metrics, assembled.note.clone());
        report.note = match report.note {
            Some(n) => Some(format!("{n}; config {}", cfg.hash())),
            None => Some(format!("config {}", cfg.hash())),
        };
        write_json(
            &out_dir.join(format!("report-{scenario}-{mode}-seed{}.json", protocol.seed)),
            &report,
        )?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
        println!(
            "{scenario}: rank@1 {:.2}% rank@5 {:.2}% mAP {:.2}% medR {}",
            report.metrics.rank1, report.metrics.rank5, report.metrics.map, report.metrics.medr
        );
    }
    atomic_write(
        &out_dir.join(format!("reports-{mode}-seed{}.csv", protocol.seed)),
        csv.as_bytes(),
    )?;
    Ok(())
}

#[derive(Args)]
struct AttrSensitivityArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    /// JSON map of identity name to binary attribute vector.
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long, default_value_t = 5)]
    max_flips: usize,
    /// Comma-separated seeds; defaults to the config's seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Curve output path; defaults to <out_dir>/attr-sensitivity.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_attr_sensitivity(a: AttrSensitivityArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (model, _) = load_model(&cfg, &a.checkpoint)?;
    let (test_ds, store) = encoded_test_features(&cfg, &model)?;
    let protocol = RetrievalProtocol::load(&a.protocol)?;
    protocol.check(&test_ds)?;
    let attrs: BTreeMap<String, Vec<u8>> =
        serde_json::from_str(&std::fs::read_to_string(&a.attributes)?)
            .context("parsing attribute file")?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(list) => parse_list(list, "seed")?,
        None => cfg.seeds.clone(),
    };

    let curve = attribute_flip_experiment(&test_ds, &protocol, &store, &attrs, a.max_flips, &seeds)?;
    for point in &curve {
        println!(
            "flips {:>2}: mean rank@1 {:.2}% over {} seeds",
            point.n_flips,
            point.mean_rank1,
            point.per_seed_rank1.len()
        );
    }
    let out = a
        .out
        .unwrap_or_else(|| cfg.out_dir.join("attr-sensitivity.json"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_json(
        &out,
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "protocol_mode": protocol.mode.to_string(),
            "protocol_seed": protocol.seed,
            "seeds": seeds,
            "curve": curve,
        }),
    )?;
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Finite-difference budget per encoder.
    #[arg(long, default_value_t = 5000)]
    max_params: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = standard_suite(a.tolerance, a.max_params, a.seed)?;
    let mut failed = 0usize;
    for r in &reports {
        println!(
            "{} {:<12} max rel {:.3e} over {}/{} params (worst {})",
            if r.pass { "PASS" } else { "FAIL" },
            r.encoder,
            r.max_rel_error,
            r.checked_parameters,
            r.total_parameters,
            r.worst_parameter
        );
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    Ok(())
}
