use std::path::{Path, PathBuf};

use serde::Serialize;

use csi_core::datamodel::{
    load_interactions, load_reactions, strata_stats, write_interactions, write_reactions, InteractionSet, LoadReport,
    StrataStatistics,
};
use csi_core::experiment::{
    evaluate_checkpoint, grid_tau, prepare, run_ablations, run_experiment, Ablation, Dataset, ExperimentConfig,
    ExperimentReport, Stratification,
};
use csi_core::pipeline::{Checkpoint, ModelKind};
use csi_core::stratify::{
    stratify_by_compound, stratify_by_reaction_feature, stratify_by_sequence, CongruentViewSet, Keying,
};
use csi_core::synth::{generate, PlantedConfig};

use crate::error::{CliError, CliResult};
use crate::manifest::OutputDir;
use crate::svg;

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
}

impl Global {
    fn output(&self, command: &str) -> CliResult<OutputDir> {
        OutputDir::create(&self.out, command, self.seed, self.threads)
    }
}

/// Starting point for experiment settings before the config file and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size encoders and epoch budgets.
    Full,
    /// Small encoders and budgets for planted benchmarks.
    Desk,
}

/// Settings that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub stratification: Option<String>,
    pub drop: Vec<String>,
    pub tau: Option<f64>,
}

/// Overlays `overlay` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value, path: &str) -> CliResult<()> {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::config(format!("unknown config key '{here}'")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn read_config_file(path: &Path) -> CliResult<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let parsed = if is_toml {
        toml::from_str::<toml::Value>(&text)
            .map_err(|e| e.to_string())
            .and_then(|v| serde_json::to_value(v).map_err(|e| e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn experiment_config(global: &Global, preset: Preset, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let base = match preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = &global.config {
        merge(&mut value, read_config_file(path)?, "")?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(seed) = global.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(name) = &overrides.stratification {
        cfg.stratification = name.parse().map_err(|e: csi_core::experiment::ExperimentError| CliError::config(e.to_string()))?;
    }
    if !overrides.drop.is_empty() {
        cfg.drop = overrides
            .drop
            .iter()
            .map(|d| d.parse::<Ablation>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    if let Some(tau) = overrides.tau {
        cfg.train.tau = tau;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Input {
    pub dataset: Dataset,
    pub files: Vec<PathBuf>,
    pub load: Option<LoadReport>,
}

/// Reads an interactions TSV, or a `reactions.jsonl` with its sibling
/// `compounds.tsv` and `sequences.tsv`. A directory resolves to its
/// `interactions.tsv`, falling back to `reactions.jsonl`.
pub fn load_input(path: &Path) -> CliResult<Input> {
    let path = if path.is_dir() {
        let tsv = path.join("interactions.tsv");
        if tsv.exists() {
            tsv
        } else {
            path.join("reactions.jsonl")
        }
    } else {
        path.to_path_buf()
    };
    let located = |e: csi_core::datamodel::DataError| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    };
    if path.extension().is_some_and(|e| e == "jsonl") {
        let (reactions, induced) = load_reactions(&path).map_err(located)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Ok(Input {
            dataset: Dataset {
                interactions: induced,
                reactions: Some(reactions),
            },
            files: vec![path.clone(), dir.join("compounds.tsv"), dir.join("sequences.tsv")],
            load: None,
        })
    } else {
        let (interactions, report) = load_interactions(&path).map_err(located)?;
        Ok(Input {
            dataset: Dataset {
                interactions,
                reactions: None,
            },
            files: vec![path],
            load: Some(report),
        })
    }
}

fn record_inputs(out: &mut OutputDir, input: &Input) -> CliResult<()> {
    for f in &input.files {
        out.add_input(f)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DatasetCounts {
    pub interactions: usize,
    pub compounds: usize,
    pub sequences: usize,
    pub compound_to_sequence_ratio: f64,
    pub labeled_negatives: usize,
    pub reactions: Option<usize>,
}

impl DatasetCounts {
    fn of(dataset: &Dataset) -> Self {
        let s = dataset.interactions.base_stats();
        Self {
            interactions: s.interactions,
            compounds: s.compounds,
            sequences: s.sequences,
            compound_to_sequence_ratio: if s.sequences == 0 {
                0.0
            } else {
                s.compounds as f64 / s.sequences as f64
            },
            labeled_negatives: s.labeled_negatives,
            reactions: dataset.reactions.as_ref().map(|r| r.reactions().len()),
        }
    }

    fn line(&self) -> String {
        format!(
            "interactions {}, compounds {}, sequences {}, compound-to-sequence ratio {:.2}",
            self.interactions, self.compounds, self.sequences, self.compound_to_sequence_ratio
        )
    }
}

fn write_tsv(out: &mut OutputDir, name: &str, set: &InteractionSet) -> CliResult<()> {
    let mut buf = Vec::new();
    write_interactions(set, &mut buf).expect("writing to memory");
    out.write(name, buf)
}

fn write_reaction_bundle(out: &mut OutputDir, dataset: &Dataset) -> CliResult<()> {
    if let Some(reactions) = &dataset.reactions {
        let dir = out.path("reactions");
        std::fs::create_dir_all(&dir)
            .and_then(|_| write_reactions(reactions, &dir))
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        for name in ["reactions/reactions.jsonl", "reactions/compounds.tsv", "reactions/sequences.tsv"] {
            out.record(name);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestReport {
    #[serde(flatten)]
    counts: DatasetCounts,
    load: Option<LoadReport>,
}

pub fn ingest(global: &Global, path: &Path) -> CliResult<()> {
    let input = load_input(path)?;
    let mut out = global.output("ingest")?;
    record_inputs(&mut out, &input)?;
    out.set_config(&serde_json::json!({ "input": path.display().to_string() }));
    let report = IngestReport {
        counts: DatasetCounts::of(&input.dataset),
        load: input.load.clone(),
    };
    write_tsv(&mut out, "interactions.tsv", &input.dataset.interactions)?;
    write_reaction_bundle(&mut out, &input.dataset)?;
    out.write_json("ingest_report.json", &report)?;
    out.finish()?;
    println!("{}", report.counts.line());
    Ok(())
}

const KEYINGS: [Keying; 5] = [Keying::Compound, Keying::Sequence, Keying::Reaction, Keying::Rclass, Keying::Ec];

fn views(dataset: &Dataset, keying: Keying) -> CliResult<CongruentViewSet> {
    match keying {
        Keying::Compound => Ok(stratify_by_compound(&dataset.interactions)),
        Keying::Sequence => Ok(stratify_by_sequence(&dataset.interactions)),
        other => {
            let reactions = dataset
                .reactions
                .as_ref()
                .ok_or_else(|| CliError::config(format!("keying '{other}' needs a reactions.jsonl input")))?;
            Ok(stratify_by_reaction_feature(reactions, other)?)
        }
    }
}

#[derive(Debug, Serialize)]
struct KeyingSummary {
    keying: String,
    keys: usize,
    eligible_keys: usize,
    tuples: usize,
    /// Object counts per stratum; absent when there are no strata.
    objects: Option<StrataStatistics>,
}

impl KeyingSummary {
    fn of(views: &CongruentViewSet) -> Self {
        Self {
            keying: views.keying.name().to_string(),
            keys: views.strata.len(),
            eligible_keys: views.eligible_keys().len(),
            tuples: views.total_tuples(),
            objects: strata_stats(&views.object_sets()).ok(),
        }
    }

    fn line(&self) -> String {
        let size = self
            .objects
            .as_ref()
            .map_or("-".to_string(), |s| format!("{:.2} (max {})", s.average_size, s.max_size));
        format!(
            "{:<9} keys {:>6}  eligible {:>6}  tuples {:>9}  mean objects {size}",
            self.keying, self.keys, self.eligible_keys, self.tuples
        )
    }
}

#[derive(Debug, Serialize)]
struct StatsReport {
    dataset: DatasetCounts,
    strata: Vec<KeyingSummary>,
}

pub fn stats(global: &Global, path: &Path) -> CliResult<()> {
    let input = load_input(path)?;
    let mut out = global.output("stats")?;
    record_inputs(&mut out, &input)?;
    out.set_config(&serde_json::json!({ "input": path.display().to_string() }));
    let keyings = if input.dataset.reactions.is_some() { &KEYINGS[..] } else { &KEYINGS[..2] };
    let strata = keyings
        .iter()
        .map(|&k| views(&input.dataset, k).map(|v| KeyingSummary::of(&v)))
        .collect::<CliResult<Vec<_>>>()?;
    let report = StatsReport {
        dataset: DatasetCounts::of(&input.dataset),
        strata,
    };
    out.write_json("stats.json", &report)?;
    out.finish()?;
    println!("{}", report.dataset.line());
    for s in &report.strata {
        println!("{}", s.line());
    }
    Ok(())
}

pub fn stratify(global: &Global, path: &Path, keying: &str) -> CliResult<()> {
    let keying: Keying = keying.parse().map_err(|e: csi_core::stratify::StratifyError| {
        CliError::config(format!("{e}; expected one of compound, sequence, reaction, rclass, ec"))
    })?;
    let input = load_input(path)?;
    let mut out = global.output("stratify")?;
    record_inputs(&mut out, &input)?;
    out.set_config(&serde_json::json!({ "input": path.display().to_string(), "keying": keying.name() }));
    let views = views(&input.dataset, keying)?;
    let mut lines = Vec::new();
    views.write_json_lines(&mut lines).expect("writing to memory");
    out.write("strata.jsonl", lines)?;
    let summary = KeyingSummary::of(&views);
    out.write_json("strata_stats.json", &summary)?;
    out.finish()?;
    println!("{}", summary.line());
    Ok(())
}

pub fn synth(global: &Global, config: PlantedConfig) -> CliResult<()> {
    config.validate().map_err(|e| CliError::config(e.to_string()))?;
    let bundle = generate(&config)?;
    let mut out = global.output("synth")?;
    out.set_config(&config);
    write_tsv(&mut out, "interactions.tsv", &bundle.interactions)?;
    out.write("labels.tsv", bundle.labels_tsv())?;
    let dataset = Dataset {
        interactions: bundle.interactions,
        reactions: bundle.reactions,
    };
    write_reaction_bundle(&mut out, &dataset)?;
    out.finish()?;
    println!("{}", DatasetCounts::of(&dataset).line());
    if let Some(r) = &dataset.reactions {
        println!("reactions {} in {}", r.reactions().len(), global.out.join("reactions").display());
    }
    Ok(())
}

fn ratio_of(label: &str) -> usize {
    label.split(':').next().and_then(|r| r.parse().ok()).unwrap_or(usize::MAX)
}

/// Metric labels in numeric ratio order, then the unseen set.
fn columns(reports: &[&ExperimentReport]) -> Vec<String> {
    let mut labels: Vec<String> = reports.first().map_or_else(Vec::new, |r| r.test.keys().cloned().collect());
    labels.sort_by_key(|l| ratio_of(l));
    if reports.iter().any(|r| r.unseen.is_some()) {
        labels.push("unseen".into());
    }
    labels
}

fn ap_values(report: &ExperimentReport, columns: &[String]) -> Vec<f64> {
    columns
        .iter()
        .map(|c| {
            let m = if c == "unseen" { report.unseen.as_ref() } else { report.test.get(c) };
            m.map_or(f64::NAN, |m| m.overall.ap)
        })
        .collect()
}

fn print_table(reports: &[&ExperimentReport]) {
    let cols = columns(reports);
    let header: Vec<String> = cols.iter().map(|c| format!("{c:>8}")).collect();
    println!("{:<28} AP {}", "model", header.join(""));
    for r in reports {
        let values: Vec<String> = ap_values(r, &cols).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("{:<28}    {}", r.model, values.join(""));
    }
}

fn bars(reports: &[&ExperimentReport]) -> String {
    let cols = columns(reports);
    let rows: Vec<(String, Vec<f64>)> = reports.iter().map(|r| (r.model.clone(), ap_values(r, &cols))).collect();
    svg::metric_bars("Average precision by negative ratio", &cols, &rows)
}

pub fn run(global: &Global, path: &Path, preset: Preset, overrides: &Overrides, charts: bool) -> CliResult<()> {
    let cfg = experiment_config(global, preset, overrides)?;
    let input = load_input(path)?;
    let mut out = global.output("run")?;
    record_inputs(&mut out, &input)?;
    out.set_config(&cfg);
    let outcome = run_experiment(&input.dataset, &cfg)?;
    out.write("model.csi", outcome.checkpoint.to_bytes())?;
    out.write("training_log.jsonl", outcome.log.to_json_lines())?;
    out.write_json("report.json", &outcome.report)?;
    if charts {
        out.write("loss_curves.svg", svg::loss_curves(&outcome.log))?;
        out.write("metrics.svg", bars(&[&outcome.report]))?;
    }
    out.finish()?;
    print_table(&[&outcome.report]);
    Ok(())
}

fn checkpoint_name(ck: &Checkpoint, path: &Path) -> String {
    let kind = match &ck.meta.model {
        ModelKind::Baseline => "baseline".to_string(),
        ModelKind::Contrastive(mode) => format!("{mode:?}"),
    };
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    format!("{stem} ({kind})")
}

pub fn evaluate(
    global: &Global,
    path: &Path,
    checkpoint: &Path,
    preset: Preset,
    ratios: &[usize],
    charts: bool,
) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = experiment_config(global, preset, &Overrides::default())?;
    cfg.encoder = ck.meta.encoder.clone();
    cfg.train = ck.meta.train.clone();
    cfg.split.seed = global.seed.unwrap_or(ck.meta.train.seed);
    if !ratios.is_empty() {
        cfg.test_ratios = ratios.to_vec();
    }
    cfg.validate()?;
    let input = load_input(path)?;
    let mut out = global.output("evaluate")?;
    record_inputs(&mut out, &input)?;
    out.add_input(checkpoint)?;
    out.set_config(&cfg);
    let prepared = prepare(&input.dataset, &cfg)?;
    let report = evaluate_checkpoint(&ck, &prepared, &checkpoint_name(&ck, checkpoint))?;
    out.write_json("evaluation.json", &report)?;
    if charts {
        out.write("metrics.svg", bars(&[&report]))?;
    }
    out.finish()?;
    print_table(&[&report]);
    Ok(())
}

pub fn ablate(global: &Global, path: &Path, preset: Preset, overrides: &Overrides, charts: bool) -> CliResult<()> {
    let cfg = experiment_config(global, preset, overrides)?;
    if !cfg.drop.is_empty() || cfg.stratification == Stratification::None {
        return Err(CliError::config(
            "ablate takes a contrastive stratification and no drop list; it runs every variant itself",
        ));
    }
    let input = load_input(path)?;
    let mut out = global.output("ablate")?;
    record_inputs(&mut out, &input)?;
    out.set_config(&cfg);
    let reports = run_ablations(&input.dataset, &cfg)?;
    out.write_json("ablations.json", &reports)?;
    let refs: Vec<&ExperimentReport> = reports.iter().collect();
    if charts {
        out.write("metrics.svg", bars(&refs))?;
    }
    out.finish()?;
    print_table(&refs);
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridEntry<'a> {
    tau: f64,
    report: &'a ExperimentReport,
}

pub fn grid(global: &Global, path: &Path, preset: Preset, overrides: &Overrides, taus: &[f64], charts: bool) -> CliResult<()> {
    let cfg = experiment_config(global, preset, overrides)?;
    let input = load_input(path)?;
    let mut out = global.output("grid-tau")?;
    record_inputs(&mut out, &input)?;
    let mut snapshot = serde_json::to_value(&cfg).expect("config serializes");
    snapshot["taus"] = serde_json::json!(taus);
    out.set_config(&snapshot);
    let results = grid_tau(&input.dataset, &cfg, taus)?;
    let entries: Vec<GridEntry> = results.iter().map(|(tau, report)| GridEntry { tau: *tau, report }).collect();
    out.write_json("grid.json", &entries)?;
    let refs: Vec<&ExperimentReport> = results.iter().map(|(_, r)| r).collect();
    if charts {
        out.write("metrics.svg", bars(&refs))?;
    }
    out.finish()?;
    print_table(&refs);
    Ok(())
}
