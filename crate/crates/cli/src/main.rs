use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relex::corpus::synth::{gen_synthetic, GenSpec};
use relex::corpus::{load_corpus_dir, write_split, Corpus, RelationInstance, Split};
use relex::eval::{
    ec_overlap, load_human_annotations, plausibility, rationales, rc_micro, validate_annotations,
    AttributionMethod, Report,
};
use relex::neural::{Ablation, Model};
use relex::rulegen::{generate_ruleset, merge_rulesets, GenConfig, GenMode};
use relex::rules::{annotate_explanations, annotate_instances, parse_rules, rule_predictions, RuleSet};
use relex::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "relex", version, about = "Joint relation and explanation classification with rule induction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, its seeded rules and simulated human rationales.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and training log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "none")]
        ablate: Ablation,
    },
    /// Predict a label and rationale for every instance of a split.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score relation predictions against gold labels.
    EvalRc {
        #[arg(long, value_delimiter = ',', required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rationales against the explanations the rules produce.
    EvalEc {
        #[arg(long, value_delimiter = ',', required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rationales against human annotations.
    EvalPlausibility {
        #[arg(long, value_delimiter = ',', required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn model rationales into syntactic rules.
    GenRules {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        manual: PathBuf,
        #[arg(long)]
        mode: GenMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict with rule files merged in argument order.
    RunRules {
        #[arg(long, value_delimiter = ',', required = true)]
        rules: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain predictions with the model's rationale or a baseline method.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "ours")]
        method: AttributionMethod,
        #[arg(long, default_value_t = 3)]
        topn: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Written next to every output so a run can be repeated.
#[derive(Debug, Default, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: Vec<PathBuf>,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
    wall_clock_secs: f64,
}

/// One line of a prediction, rule-prediction or explanation file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default)]
    rationale: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nrc_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rule_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<String>,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

fn write_report(path: &Path, report: &Report) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, report.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    print!("{report}");
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus_dir(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_rules(path: &Path) -> Result<RuleSet> {
    parse_rules(path).with_context(|| format!("reading rules from {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model from {}", path.display()))
}

fn row_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn rationale_map(records: &[Record]) -> BTreeMap<String, BTreeSet<usize>> {
    records.iter().map(|r| (r.id.clone(), r.rationale.clone())).collect()
}

fn run(cmd: Command, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::GenData { spec, seed, out } => {
            m.command = "gen-data".into();
            let gen_spec = match &spec {
                Some(p) => GenSpec::from_path(p)?,
                None => GenSpec::builtin(),
            };
            m.config.extend(spec);
            m.seeds.push(seed);
            let syn = gen_synthetic(&gen_spec, seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for split in [Split::Train, Split::Dev, Split::Test] {
                let path = out.join(split.file_name());
                write_split(&path, syn.corpus.split(split))?;
                m.outputs.push(path);
            }
            let rules = out.join("manual.rules");
            syn.manual_rules.write(&rules)?;
            let human = out.join("human_test.jsonl");
            let mut text = String::new();
            for a in &syn.human {
                text.push_str(&serde_json::to_string(a)?);
                text.push('\n');
            }
            std::fs::write(&human, text)?;
            m.outputs.extend([rules, human]);
            log::info!(
                "wrote {} instances and {} manual rules to {}",
                syn.corpus.len(),
                syn.manual_rules.len(),
                out.display()
            );
        }
        Command::Train { corpus, rules, config, out, ablate } => {
            m.command = "train".into();
            let cfg = match &config {
                Some(p) => TrainConfig::from_path(p)?,
                None => TrainConfig::default(),
            };
            m.config.extend(config);
            m.seeds.push(cfg.model.seed);
            let data = load_corpus(&corpus)?;
            let manual = load_rules(&rules)?;
            m.inputs.extend([corpus, rules]);
            let annotations = annotate_explanations(&manual, &data);
            log::info!(
                "{} of {} training instances annotated by rules",
                annotations.len(),
                data.train.len()
            );
            let (model, log) = train(&data, &annotations, &cfg, ablate)?;
            ensure_parent(&out)?;
            model.save(&out)?;
            let log_path = sidecar(&out, ".log.jsonl");
            log.write(&log_path)?;
            m.outputs.extend([out, log_path]);
        }
        Command::Predict { model, corpus, split, out } => {
            m.command = "predict".into();
            let net = load_model(&model)?;
            let data = load_corpus(&corpus)?;
            m.inputs.extend([model, corpus]);
            let records = data
                .split(split)
                .iter()
                .map(|inst| {
                    let p = net.predict(inst)?;
                    Ok(Record {
                        id: inst.id.clone(),
                        label: Some(p.label),
                        rationale: p.rationale,
                        nrc_score: p.nrc_score,
                        ..Record::default()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_records(&out, &records)?;
            m.outputs.push(out);
        }
        Command::EvalRc { pred, corpus, split, out } => {
            m.command = "eval-rc".into();
            let data = load_corpus(&corpus)?;
            let golds: BTreeMap<String, String> =
                data.split(split).iter().map(|i| (i.id.clone(), i.relation.clone())).collect();
            let mut report = Report::default();
            for p in &pred {
                let records = read_records(p)?;
                let mut preds = BTreeMap::new();
                for r in records {
                    let label = r.label.with_context(|| format!("{}: record {} has no label", p.display(), r.id))?;
                    preds.insert(r.id, label);
                }
                report.push(row_name(p), rc_micro(&preds, &golds)?);
            }
            m.inputs.extend(pred);
            m.inputs.push(corpus);
            write_report(&out, &report)?;
            m.outputs.push(out);
        }
        Command::EvalEc { pred, corpus, split, rules, out } => {
            m.command = "eval-ec".into();
            let data = load_corpus(&corpus)?;
            let manual = load_rules(&rules)?;
            let golds: BTreeMap<String, BTreeSet<usize>> = annotate_instances(&manual, data.split(split))
                .into_iter()
                .map(|(id, labels)| (id, labels.tokens()))
                .collect();
            let mut report = Report::default();
            for p in &pred {
                report.push(row_name(p), ec_overlap(&rationale_map(&read_records(p)?), &golds));
            }
            m.inputs.extend(pred);
            m.inputs.extend([corpus, rules]);
            write_report(&out, &report)?;
            m.outputs.push(out);
        }
        Command::EvalPlausibility { pred, human, corpus, split, out } => {
            m.command = "eval-plausibility".into();
            let data = load_corpus(&corpus)?;
            let annotations = load_human_annotations(&human)?;
            validate_annotations(&annotations, data.split(split))?;
            let mut report = Report::default();
            for p in &pred {
                report.push(row_name(p), plausibility(&rationale_map(&read_records(p)?), &annotations)?);
            }
            m.inputs.extend(pred);
            m.inputs.extend([human, corpus]);
            write_report(&out, &report)?;
            m.outputs.push(out);
        }
        Command::GenRules { model, corpus, split, manual, mode, out } => {
            m.command = "gen-rules".into();
            let net = load_model(&model)?;
            let data = load_corpus(&corpus)?;
            let manual_rules = load_rules(&manual)?;
            let instances = data.split(split);
            let annotations = annotate_instances(&manual_rules, instances);
            let rules = generate_ruleset(&net, instances, &manual_rules, mode, &annotations, &GenConfig::default())?;
            log::info!("generated {} rules from {} instances", rules.len(), instances.len());
            ensure_parent(&out)?;
            rules.write(&out)?;
            m.inputs.extend([model, corpus, manual]);
            m.outputs.push(out);
        }
        Command::RunRules { rules, corpus, split, out } => {
            m.command = "run-rules".into();
            let sets = rules.iter().map(|p| load_rules(p)).collect::<Result<Vec<_>>>()?;
            let merged = merge_rulesets(&sets);
            let data = load_corpus(&corpus)?;
            let records: Vec<Record> = data
                .split(split)
                .iter()
                .map(|inst| {
                    let p = rule_predictions(&merged, inst);
                    Record {
                        id: inst.id.clone(),
                        label: Some(p.label),
                        rationale: p.trigger_tokens,
                        rule_id: p.rule_id,
                        ..Record::default()
                    }
                })
                .collect();
            write_records(&out, &records)?;
            let preds = records.iter().map(|r| (r.id.clone(), r.label.clone().unwrap_or_default())).collect();
            let golds = gold_labels(data.split(split));
            let mut report = Report::default();
            report.push(format!("rules ({} merged)", merged.len()), rc_micro(&preds, &golds)?);
            print!("{report}");
            m.inputs.extend(rules);
            m.inputs.push(corpus);
            m.outputs.push(out);
        }
        Command::Explain { model, corpus, split, method, topn, out } => {
            m.command = "explain".into();
            let net = load_model(&model)?;
            let data = load_corpus(&corpus)?;
            let instances = data.split(split);
            let sets = rationales(method, &net, instances, topn)?;
            let records: Vec<Record> = instances
                .iter()
                .map(|inst| Record {
                    id: inst.id.clone(),
                    rationale: sets[&inst.id].clone(),
                    method: Some(method.to_string()),
                    ..Record::default()
                })
                .collect();
            write_records(&out, &records)?;
            m.inputs.extend([model, corpus]);
            m.outputs.push(out);
        }
    }
    Ok(())
}

fn gold_labels(instances: &[RelationInstance]) -> BTreeMap<String, String> {
    instances.iter().map(|i| (i.id.clone(), i.relation.clone())).collect()
}

fn manifest_path(m: &RunManifest) -> Option<PathBuf> {
    let first = m.outputs.first()?;
    Some(if m.command == "gen-data" {
        first.parent().map_or_else(|| PathBuf::from("manifest.json"), |d| d.join("manifest.json"))
    } else {
        sidecar(first, ".manifest.json")
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let mut manifest = RunManifest {
        args: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        ..RunManifest::default()
    };
    let result = run(cli.command, &mut manifest).and_then(|()| {
        manifest.wall_clock_secs = start.elapsed().as_secs_f64();
        let Some(path) = manifest_path(&manifest) else {
            bail!("command produced no output");
        };
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    });
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
