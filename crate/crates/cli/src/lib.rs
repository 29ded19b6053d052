//! Subcommands of the `etrag` binary. Every command writes a manifest into
//! its output directory before doing any work.

pub mod args;
pub mod manifest;

use anyhow::{anyhow, Context, Result};
use args::{AblateArgs, Cli, Command, EvalArgs, GenArgs, RetrieveArgs, Split, StatsArgs, SweepArgs, TrainArgs};
use etrag::corpus::{
    generate_synthetic, load_jsonl, write_jsonl_string, Instance, RelationSchema, SchemaFile, Vocabulary,
};
use etrag::encoder::embed_many;
use etrag::evalx::{contains_subsequence, evaluate, k_sweep, retrieval_stats, selection_overlap, sweep_csv};
use etrag::pipeline::{embed_queries, DbIndex};
use etrag::retriever::{hard_topk, Database};
use etrag::training::{
    apply_ablation, build_database, history_csv, initial_model, train, Ablation, Checkpoint, TrainConfig,
};
use manifest::{RunDir, UsageError};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Exit status for a failed command: 1 for bad flags, 3 for a numerical
/// abort, 2 for everything about the data.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<etrag::Error>() {
            return match e {
                etrag::Error::NonFinite { .. } => EXIT_NUMERIC,
                etrag::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// A task directory as written by `gen`.
pub struct Data {
    pub schema: RelationSchema,
    pub vocab: Vocabulary,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub files: Vec<PathBuf>,
}

impl Data {
    pub fn split(&self, s: Split) -> &[Instance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, id: &str) -> Option<&Instance> {
        self.train.iter().chain(&self.dev).chain(&self.test).find(|i| i.id == id)
    }
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "dev.jsonl", "test.jsonl"];

pub fn load_data(dir: &Path) -> Result<Data> {
    let schema_path = dir.join("schema.json");
    let text = std::fs::read_to_string(&schema_path).with_context(|| format!("reading {}", schema_path.display()))?;
    let file: SchemaFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", schema_path.display()))?;
    let (schema, vocab) = RelationSchema::from_file(&file).map_err(etrag::Error::from)?;
    let mut files = vec![schema_path];
    let mut splits = Vec::new();
    for name in SPLIT_FILES {
        let p = dir.join(name);
        splits.push(
            load_jsonl(&p, &schema, &vocab)
                .map_err(etrag::Error::from)
                .with_context(|| format!("loading {}", p.display()))?,
        );
        files.push(p);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Data { schema, vocab, train, dev, test, files })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn cmd_gen(a: &GenArgs) -> Result<PathBuf> {
    let cfg = a.config();
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut run =
        RunDir::create(&a.out.resolve("gen"), a.out.force, "gen", json!({ "synthetic": cfg }), Some(cfg.seed), &[])?;
    let task = generate_synthetic(&cfg).map_err(etrag::Error::from)?;
    run.write("schema.json", serde_json::to_string_pretty(&task.schema.to_file(&task.vocab))?)?;
    for (name, split) in SPLIT_FILES.iter().zip([&task.train, &task.dev, &task.test]) {
        run.write(name, write_jsonl_string(split, &task.schema, &task.vocab))?;
    }
    eprintln!("wrote {}/{}/{} instances to {}", task.train.len(), task.dev.len(), task.test.len(), run.path.display());
    run.finish()
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let model_cfg = a.flags.model_config(data.vocab.len());
    let cfg = a.flags.train_config();
    cfg.validate()?;
    let config = json!({ "data": a.data, "model": model_cfg, "train": cfg });
    let mut run = RunDir::create(&a.out.resolve("train"), a.out.force, "train", config, Some(cfg.seed), &data.files)?;
    eprintln!(
        "training {} (seed {}, patience {}) on {} instances",
        cfg.ablation,
        cfg.seed,
        cfg.patience,
        data.train.len()
    );
    let out = train(&data.train, &data.dev, &data.schema, &model_cfg, &cfg)?;
    run.write("metrics.csv", history_csv(&out.history))?;
    out.best.save(&run.file("checkpoint.json"))?;
    run.record("checkpoint.json")?;
    let summary =
        format!("steps_run={} stopped_early={} best_step={}\n", out.steps_run, out.stopped_early, out.best.step);
    run.write("summary.txt", &summary)?;
    eprint!("{summary}");
    run.finish()
}

/// Database of a checkpoint, rebuilt from the training split it was drawn from.
fn checkpoint_index(ck: &Checkpoint, data: &Data) -> Result<(Database, DbIndex)> {
    let db = build_database(&data.train, &ck.train_config);
    let repr = apply_ablation(&ck.train_config).retrieval.representation;
    let index = DbIndex::build(&ck.model, &db, &data.schema, repr)?;
    Ok((db, index))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let mut inputs = data.files.clone();
    inputs.push(a.checkpoint.clone());
    let mut run = RunDir::create(&a.out.resolve("eval"), a.out.force, "eval", serde_json::to_value(a)?, None, &inputs)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let wiring = apply_ablation(&ck.train_config);
    let index = if wiring.retrieval.enabled() { Some(checkpoint_index(&ck, &data)?.1) } else { None };
    let report = evaluate(&ck.model, data.split(a.split), &data.schema, index.as_ref(), &wiring.retrieval)?;
    run.write("report.json", serde_json::to_string_pretty(&report)?)?;
    run.write("report.txt", format!("{report}\n"))?;
    println!("{report}");
    run.finish()
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let model_cfg = a.flags.model_config(data.vocab.len());
    let cfg = a.flags.train_config();
    if a.ks.is_empty() {
        return Err(UsageError("--ks must name at least one value".into()).into());
    }
    let config = json!({ "data": a.data, "model": model_cfg, "train": cfg, "ks": a.ks, "jobs": a.jobs });
    let mut run = RunDir::create(&a.out.resolve("sweep"), a.out.force, "sweep", config, Some(cfg.seed), &data.files)?;
    let rows = k_sweep(&data.train, &data.dev, &data.test, &data.schema, &model_cfg, &cfg, &a.ks, a.jobs)?;
    let csv = sweep_csv(&rows);
    run.write("sweep.csv", &csv)?;
    print!("{csv}");
    run.finish()
}

pub fn cmd_stats(a: &StatsArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let mut inputs = data.files.clone();
    inputs.push(a.checkpoint.clone());
    let mut run =
        RunDir::create(&a.out.resolve("stats"), a.out.force, "stats", serde_json::to_value(a)?, None, &inputs)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let wiring = apply_ablation(&ck.train_config);
    let (db, index) = checkpoint_index(&ck, &data)?;
    let queries = data.split(a.split);
    let trained = retrieval_stats(&ck.model, queries, &db, &index, &data.schema, &a.levels)?;
    let init = initial_model(&ck.model.config, &ck.train_config);
    let init_index = DbIndex::build(&init, &db, &data.schema, index.representation)?;
    let untrained = retrieval_stats(&init, queries, &db, &init_index, &data.schema, &a.levels)?;
    let k = wiring.retrieval.k.max(1);
    let overlap = selection_overlap(&ck.model, queries, &index, &data.schema, k, wiring.retrieval.tau)?;
    run.write("stats_trained.csv", trained.to_csv())?;
    run.write("stats_untrained.csv", untrained.to_csv())?;
    let mut summary = String::new();
    for (name, s) in [("trained", &trained), ("untrained", &untrained)] {
        for l in &s.levels {
            summary.push_str(&format!(
                "{name} top-{}: label {:.3} entity {:.3} related {:.3} | any: label {:.3} entity {:.3} related {:.3}\n",
                l.k,
                l.pairs.label_match,
                l.pairs.entity_match,
                l.pairs.related,
                l.any.label_match,
                l.any.entity_match,
                l.any.related
            ));
        }
    }
    summary.push_str(&format!("hard/soft selection overlap at k={k}: {overlap:.3}\n"));
    run.write("summary.txt", &summary)?;
    print!("{summary}");
    run.finish()
}

pub fn cmd_retrieve(a: &RetrieveArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let mut inputs = data.files.clone();
    inputs.push(a.checkpoint.clone());
    let mut run =
        RunDir::create(&a.out.resolve("retrieve"), a.out.force, "retrieve", serde_json::to_value(a)?, None, &inputs)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let query = data.find(&a.id).ok_or_else(|| UsageError(format!("no instance with id {:?}", a.id)))?;
    let (db, index) = checkpoint_index(&ck, &data)?;
    let emb = if a.as_stored {
        let kind = index.representation.db_kind(query);
        let enc = &ck.model.config.encoder;
        embed_many(&ck.model.store, &ck.model.encoder, enc, &[query], |_| kind, &data.schema)?.remove(0)
    } else {
        embed_queries(&ck.model, &[query], &data.schema, index.representation)?.remove(0)
    };
    let (idx, dists) = hard_topk(&emb, &index.embeddings, a.k.min(index.len()))?;
    let mut csv = String::from("rank,id,distance,label,label_match,head_match,tail_match\n");
    for (rank, (&d, dist)) in idx.iter().zip(&dists).enumerate() {
        let inst = &db.instances[d];
        let label = data.schema.label(inst.relation).unwrap_or("?");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rank + 1,
            inst.id,
            dist,
            label,
            inst.relation == query.relation,
            contains_subsequence(&inst.tokens, query.head_tokens()),
            contains_subsequence(&inst.tokens, query.tail_tokens()),
        ));
    }
    run.write("neighbours.csv", &csv)?;
    print!("{csv}");
    run.finish()
}

/// Runs `f` over `items` with up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(items.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    *n += 1;
                    *n - 1
                };
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("job slot") = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("job slot").ok_or_else(|| anyhow!("job did not run"))?).collect()
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub steps_run: usize,
}

pub fn ablation_table(rows: &[AblationRow], order: &[Ablation]) -> String {
    let mut out = String::from("configuration           mean F1   std F1   runs\n");
    for &a in order {
        let f: Vec<f64> = rows.iter().filter(|r| r.ablation == a).map(|r| r.f1).collect();
        if f.is_empty() {
            continue;
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f.len() as f64;
        out.push_str(&format!("{:<22} {:>8.2} {:>8.2} {:>6}\n", a.name(), 100.0 * mean, 100.0 * var.sqrt(), f.len()));
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<PathBuf> {
    let data = load_data(&a.data)?;
    let model_cfg = a.flags.model_config(data.vocab.len());
    let base = a.flags.train_config();
    base.validate()?;
    if a.seeds == 0 || a.ablations.is_empty() {
        return Err(UsageError("--seeds and --ablations must be non-empty".into()).into());
    }
    let config = json!({
        "data": a.data, "model": model_cfg, "train": base, "seeds": a.seeds, "ablations": a.ablations, "jobs": a.jobs,
    });
    let mut run =
        RunDir::create(&a.out.resolve("ablate"), a.out.force, "ablate", config, Some(base.seed), &data.files)?;
    let jobs: Vec<(Ablation, u64)> =
        a.ablations.iter().flat_map(|&ab| (0..a.seeds).map(move |s| (ab, base.seed + s))).collect();
    let rows = parallel_map(&jobs, a.jobs, |&(ablation, seed)| {
        let cfg = TrainConfig { ablation, seed, ..base.clone() };
        let (out, r) =
            etrag::evalx::train_and_evaluate(&data.train, &data.dev, &data.test, &data.schema, &model_cfg, &cfg)?;
        eprintln!("{ablation} seed {seed}: F1 {:.4} after {} steps", r.f1, out.steps_run);
        Ok(AblationRow { ablation, seed, precision: r.precision, recall: r.recall, f1: r.f1, steps_run: out.steps_run })
    })?;
    let mut csv = String::from("ablation,seed,precision,recall,f1,steps_run\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.ablation, r.seed, r.precision, r.recall, r.f1, r.steps_run));
    }
    run.write("ablation.csv", &csv)?;
    let table = ablation_table(&rows, &a.ablations);
    run.write("table.txt", &table)?;
    print!("{table}");
    run.finish()
}
