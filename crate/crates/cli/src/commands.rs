use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use darer::checkpoint::Checkpoint;
use darer::data::{
    embedding_table, generate_synthetic, load_word_vectors, Corpus, EncodedDialog, LabelSpace, RuleSet, Split,
    SyntheticConfig, Vocabulary,
};
use darer::model::{argmax_rows, Darer, Variant};
use darer::training::{evaluate, train as fit, EpochRecord, Evaluation, IgnoreLabels, StepMetrics, TaskMetrics};
use darer::verify::{gradient_suite, ComponentCheck};
use darer::layers::Ctx;
use darer::tensor::Tape;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{ConfigArgs, OutArgs};

pub const OUT_ENV: &str = "DARER_OUT";

fn out_dir(out: &OutArgs) -> Result<PathBuf> {
    let dir = match &out.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn resolve(args: &ConfigArgs, epochs: Option<usize>) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(e) = epochs {
        overrides.push(format!("epochs={e}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::resolve(args.config.as_deref(), &overrides)
}

fn load_corpus(data: &str) -> Result<Corpus> {
    if data == "synthetic" {
        Ok(generate_synthetic(&SyntheticConfig::default())?)
    } else {
        Corpus::load(Path::new(data)).with_context(|| format!("loading corpus from {data}"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ignore_labels(labels: &LabelSpace, sentiment: &str, act: &str) -> Result<IgnoreLabels> {
    let find = |kind: &str, l: &str| -> Result<Option<usize>> {
        Ok(if l.is_empty() { None } else { Some(labels.label_index(kind, l)?) })
    };
    Ok(IgnoreLabels {
        sentiment: find("sentiment", sentiment)?,
        act: find("act", act)?,
    })
}

fn name_task(m: &mut TaskMetrics, names: &[String]) {
    for (c, name) in m.per_class.iter_mut().zip(names) {
        c.label = name.clone();
    }
    if let Some(i) = m.ignored_label.as_mut() {
        let k: usize = i[1..].parse().expect("generic label");
        *i = names[k].clone();
    }
}

/// Replaces the generic class names of an evaluation with the corpus labels.
fn name_labels(e: &mut Evaluation, labels: &LabelSpace) {
    name_task(&mut e.sentiment, &labels.sentiment_labels);
    name_task(&mut e.act, &labels.act_labels);
    for s in &mut e.per_step {
        name_task(&mut s.sentiment, &labels.sentiment_labels);
        name_task(&mut s.act, &labels.act_labels);
    }
}

fn name_record(r: &mut EpochRecord, labels: &LabelSpace) {
    if let Some(m) = r.sentiment.as_mut() {
        name_task(m, &labels.sentiment_labels);
    }
    if let Some(m) = r.act.as_mut() {
        name_task(m, &labels.act_labels);
    }
}

struct Prepared {
    corpus: Corpus,
    vocab: Vocabulary,
    train: Vec<EncodedDialog>,
    dev: Vec<EncodedDialog>,
    test: Vec<EncodedDialog>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = load_corpus(&cfg.data)?;
    let vocab = corpus.vocabulary();
    Ok(Prepared {
        train: corpus.encode(Split::Train, &vocab)?,
        dev: corpus.encode(Split::Dev, &vocab)?,
        test: corpus.encode(Split::Test, &vocab)?,
        vocab,
        corpus,
    })
}

fn build_model(cfg: &RunConfig, data: &Prepared) -> Result<Darer> {
    let vectors = if cfg.word_vectors.is_empty() {
        None
    } else {
        Some(load_word_vectors(Path::new(&cfg.word_vectors), cfg.d_word)?)
    };
    let emb = embedding_table(&data.vocab, vectors.as_ref(), cfg.d_word, cfg.seed)?;
    Ok(Darer::new(cfg.model_config(&data.corpus.labels), emb, cfg.seed)?)
}

#[derive(Serialize)]
struct Header<'a> {
    config: &'a RunConfig,
    parameters: usize,
}

#[derive(Serialize)]
struct TrainMetrics {
    best_epoch: usize,
    epochs_run: usize,
    dev: Evaluation,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<Evaluation>,
}

struct Trained {
    model: Darer,
    best_epoch: usize,
    epochs_run: usize,
    dev: Evaluation,
}

/// Trains under `cfg`, streaming history records to `history` when given.
fn run_training(cfg: &RunConfig, data: &Prepared, history: Option<&mut dyn Write>, tag: &str) -> Result<Trained> {
    let mut model = build_model(cfg, data)?;
    let labels = &data.corpus.labels;
    let ignore = ignore_labels(labels, &cfg.ignore_sentiment, &cfg.ignore_act)?;
    let mut history = history;
    if let Some(w) = history.as_deref_mut() {
        serde_json::to_writer(&mut *w, &Header { config: cfg, parameters: model.store.num_scalars() })?;
        writeln!(w)?;
    }
    let start = Instant::now();
    let outcome = fit(&mut model, &data.train, &data.dev, &cfg.train_config(), ignore, |r| {
        let mut r = r.clone();
        name_record(&mut r, labels);
        if let Some(w) = history.as_deref_mut() {
            serde_json::to_writer(&mut *w, &r).map_err(darer::Error::from)?;
            writeln!(w)?;
        }
        match (&r.sentiment, &r.act) {
            (Some(s), Some(a)) => eprintln!(
                "{tag}epoch {:>3}  dev loss {:.4}  sentiment acc {:.3} F1 {:.3}  act acc {:.3} F1 {:.3}{}  [{:.0}s]",
                r.epoch,
                r.loss.total,
                s.accuracy,
                s.macro_f1,
                a.accuracy,
                a.macro_f1,
                if r.best == Some(true) { "  *" } else { "" },
                start.elapsed().as_secs_f64()
            ),
            _ => eprintln!("{tag}epoch {:>3}  train loss {:.4}", r.epoch, r.loss.total),
        }
        Ok(())
    })?;
    let mut dev = outcome.best_dev;
    name_labels(&mut dev, labels);
    Ok(Trained {
        model,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        dev,
    })
}

pub fn train(args: &ConfigArgs, out: &OutArgs, epochs: Option<usize>, force: bool) -> Result<()> {
    let cfg = resolve(args, epochs)?;
    let dir = out_dir(out)?;
    let ck_path = dir.join("checkpoint.json");
    if ck_path.exists() && !force {
        bail!("{} exists; pass --force to overwrite it", ck_path.display());
    }
    let data = prepare(&cfg)?;
    let history_path = dir.join("history.jsonl");
    let mut history = BufWriter::new(File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?);
    let t = run_training(&cfg, &data, Some(&mut history), "")?;
    history.flush()?;

    let labels = &data.corpus.labels;
    let test = if data.test.is_empty() {
        None
    } else {
        let ignore = ignore_labels(labels, &cfg.ignore_sentiment, &cfg.ignore_act)?;
        let mut e = evaluate(&t.model, &data.test, ignore)?;
        name_labels(&mut e, labels);
        Some(e)
    };
    Checkpoint::from_model(&t.model, &data.vocab, labels).save(&ck_path)?;
    write_json(
        &dir.join("metrics.json"),
        &TrainMetrics {
            best_epoch: t.best_epoch,
            epochs_run: t.epochs_run,
            dev: t.dev,
            test,
        },
    )?;
    eprintln!("best epoch {}; wrote {}", t.best_epoch, dir.display());
    Ok(())
}

fn load_checkpoint(path: &Path, args: &ConfigArgs) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut overrides = args.set.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::resolve_over(Some(RunConfig::from_model(&ck.config)), args.config.as_deref(), &overrides)?;
    ck.check_config(&cfg.model_config(&ck.labels))?;
    Ok((ck, cfg))
}

fn encode_split(ck: &Checkpoint, corpus: &Corpus, split: Split) -> Result<Vec<EncodedDialog>> {
    corpus
        .split(split)
        .iter()
        .map(|d| Ok(EncodedDialog::encode(d, &ck.vocab, &ck.labels, split)?))
        .collect()
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    dialogs: usize,
    utterances: usize,
    steps: usize,
    loss: darer::training::LossBreakdown,
    sentiment: TaskMetrics,
    act: TaskMetrics,
    mean_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_step: Option<Vec<StepMetrics>>,
}

fn parse_ignore(labels: &LabelSpace, flags: &[String], cfg: &RunConfig) -> Result<IgnoreLabels> {
    let mut ignore = ignore_labels(labels, &cfg.ignore_sentiment, &cfg.ignore_act)?;
    for flag in flags {
        let (task, label) = match flag.split_once(':') {
            Some((t, l)) => (Some(t), l),
            None => (None, flag.as_str()),
        };
        match task {
            Some("sentiment") => ignore.sentiment = Some(labels.label_index("sentiment", label)?),
            Some("act") => ignore.act = Some(labels.label_index("act", label)?),
            Some(t) => bail!("unknown task {t:?} in --ignore-label (sentiment|act)"),
            None => {
                if let Ok(i) = labels.label_index("sentiment", label) {
                    ignore.sentiment = Some(i);
                } else if let Ok(i) = labels.label_index("act", label) {
                    ignore.act = Some(i);
                } else {
                    bail!("--ignore-label {label:?} names no sentiment or act label");
                }
            }
        }
    }
    Ok(ignore)
}

pub fn eval(
    checkpoint: &Path,
    split: &str,
    per_step: bool,
    ignore_flags: &[String],
    args: &ConfigArgs,
    out: &OutArgs,
) -> Result<()> {
    let split = Split::parse(split)?;
    let (ck, cfg) = load_checkpoint(checkpoint, args)?;
    let model = ck.to_model()?;
    let corpus = load_corpus(&cfg.data)?;
    let data = encode_split(&ck, &corpus, split)?;
    if data.is_empty() {
        bail!("split {split} is empty");
    }
    let ignore = parse_ignore(&ck.labels, ignore_flags, &cfg)?;
    let mut e = evaluate(&model, &data, ignore)?;
    name_labels(&mut e, &ck.labels);
    if per_step {
        eprintln!("{:>4}  {:<9} {:>7} {:>7} {:>7} {:>7}", "step", "task", "P", "R", "F1", "acc");
        for s in &e.per_step {
            for (task, m) in [("sentiment", &s.sentiment), ("act", &s.act)] {
                eprintln!(
                    "{:>4}  {task:<9} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                    s.step, m.macro_precision, m.macro_recall, m.macro_f1, m.accuracy
                );
            }
        }
    }
    let report = EvalReport {
        split: split.name().into(),
        dialogs: e.dialogs,
        utterances: e.utterances,
        steps: model.config.steps,
        loss: e.loss,
        sentiment: e.sentiment,
        act: e.act,
        mean_f1: e.mean_f1,
        per_step: per_step.then_some(e.per_step),
    };
    let path = out_dir(out)?.join(format!("eval-{}.json", split.name()));
    write_json(&path, &report)?;
    eprintln!(
        "sentiment F1 {:.4}  act F1 {:.4}; wrote {}",
        report.sentiment.macro_f1,
        report.act.macro_f1,
        path.display()
    );
    Ok(())
}

pub fn sweep_t(t_values: &[usize], args: &ConfigArgs, out: &OutArgs, epochs: Option<usize>) -> Result<()> {
    if t_values.is_empty() {
        bail!("--t-values is empty");
    }
    let base = resolve(args, epochs)?;
    let data = prepare(&base)?;
    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let cfg = RunConfig { steps: t, ..base.clone() };
        let r = run_training(&cfg, &data, None, &format!("T={t} "))?;
        rows.push(format!(
            "{t},{},{},{},{}",
            r.dev.sentiment.macro_f1, r.dev.act.macro_f1, r.dev.mean_f1, r.best_epoch
        ));
    }
    let path = out_dir(out)?.join("sweep.csv");
    let mut text = String::from("T,sentiment_f1,act_f1,mean_f1,best_epoch\n");
    for row in &rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(&path, &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct RelationDump {
    id: usize,
    name: String,
    /// `weights[i][j]`: attention of node `i` on neighbor `j`
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AttentionDump {
    dialog: String,
    step: usize,
    nodes: Vec<String>,
    texts: Vec<String>,
    predicted_sentiment: Vec<String>,
    predicted_act: Vec<String>,
    gold_sentiment: Vec<String>,
    gold_act: Vec<String>,
    relations: Vec<RelationDump>,
}

pub fn inspect(checkpoint: &Path, dialog: &str, step: usize, args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let (ck, cfg) = load_checkpoint(checkpoint, args)?;
    if ck.config.variant != Variant::Reteformer {
        bail!(
            "unsupported variant {}: attention maps exist only for reteformer checkpoints",
            ck.config.variant.as_str()
        );
    }
    if !ck.config.use_dtr_layer {
        bail!("checkpoint has no reasoning graph layer (use_dtr_layer = false)");
    }
    if step == 0 || step > ck.config.steps {
        bail!("step must be in 1..={}, got {step}", ck.config.steps);
    }
    let corpus = load_corpus(&cfg.data)?;
    let (split, d) = Split::ALL
        .iter()
        .find_map(|&s| corpus.split(s).iter().find(|d| d.id == dialog).map(|d| (s, d)))
        .with_context(|| format!("no dialog with id {dialog:?}"))?;
    let enc = EncodedDialog::encode(d, &ck.vocab, &ck.labels, split)?;
    let model = ck.to_model()?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&model.store);
    let outs = model.forward_dialog(&mut tape, &mut ctx, &enc.tokens, &enc.speakers)?;
    let n = enc.len();
    let graph = model.drtg(n)?;
    let relations = outs.attention[step - 1]
        .iter()
        .enumerate()
        .map(|(r, a)| {
            let weights = match a {
                Some(v) => {
                    let m = tape.value(*v);
                    (0..2 * n).map(|i| m.row_slice(i).to_vec()).collect()
                }
                None => vec![vec![0.0; 2 * n]; 2 * n],
            };
            RelationDump {
                id: r + 1,
                name: graph.relation_name(r + 1).to_string(),
                weights,
            }
        })
        .collect();
    let names = |idx: &[usize], labels: &[String]| idx.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>();
    let dump = AttentionDump {
        dialog: d.id.clone(),
        step,
        nodes: (1..=n).map(|i| format!("s_{i}")).chain((1..=n).map(|i| format!("a_{i}"))).collect(),
        texts: d.utterances.iter().map(|u| u.text.clone()).collect(),
        predicted_sentiment: names(&argmax_rows(tape.value(outs.p_s[step])), &ck.labels.sentiment_labels),
        predicted_act: names(&argmax_rows(tape.value(outs.p_a[step])), &ck.labels.act_labels),
        gold_sentiment: names(&enc.sentiments, &ck.labels.sentiment_labels),
        gold_act: names(&enc.acts, &ck.labels.act_labels),
        relations,
    };
    let safe: String = dialog.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect();
    let path = out_dir(out)?.join(format!("attention-{safe}-step{step}.json"));
    write_json(&path, &dump)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    h: f64,
    tol: f64,
    seeds: u64,
    max_error: f64,
    passed: bool,
    checks: Vec<ComponentCheck>,
}

pub fn gradcheck(seeds: u64, h: f64, tol: f64, out: &OutArgs) -> Result<()> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for seed in 0..seeds {
        checks.extend(gradient_suite(seed, h, tol)?);
    }
    let mut components: Vec<&str> = checks.iter().map(|c| c.component.as_str()).collect();
    components.sort_unstable();
    components.dedup();
    for comp in &components {
        let worst = checks
            .iter()
            .filter(|c| c.component == *comp)
            .map(|c| c.max_error)
            .fold(0.0, f64::max);
        eprintln!("{comp:<18} max rel error {worst:.3e}  {}", if worst <= tol { "ok" } else { "FAILED" });
    }
    let report = GradcheckReport {
        h,
        tol,
        seeds,
        max_error: checks.iter().map(|c| c.max_error).fold(0.0, f64::max),
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    let path = out_dir(out)?.join("gradcheck.json");
    write_json(&path, &report)?;
    eprintln!(
        "{} checks over {seeds} seeds in {:.1}s; max error {:.3e}; wrote {}",
        report.checks.len(),
        start.elapsed().as_secs_f64(),
        report.max_error,
        path.display()
    );
    if !report.passed {
        bail!("gradient check failed (tolerance {tol:e})");
    }
    Ok(())
}

pub fn gen_synth(out: &OutArgs, seed: u64, train: usize, dev: usize, test: usize, disable: &[String]) -> Result<()> {
    let mut rules = RuleSet::default();
    for r in disable {
        match r.as_str() {
            "r1" => rules.disagreement_flips = false,
            "r2" => rules.agreement_copies = false,
            "r3" => rules.question_answer = false,
            _ => bail!("unknown rule {r:?} (r1|r2|r3)"),
        }
    }
    let cfg = SyntheticConfig {
        num_train: train,
        num_dev: dev,
        num_test: test,
        seed,
        rules,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg)?;
    let dir = out_dir(out)?;
    corpus.save(&dir)?;
    eprintln!("wrote {train}/{dev}/{test} dialogs to {}", dir.display());
    Ok(())
}
