use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use super::data::{self, read_text};
use super::rundir::{self, load_run, prepare, write_new, DataKeys, CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE};
use super::*;
use crate::analysis::{
    capture_activations, fit_scaling, log_grid, probe_eval, probe_examples, shuffle_trees, synthetic_points,
    train_structural_probe, ProbeConfig, ScalingPoint, StructuralProbe,
};
use crate::config::{kv_text, KvConfig};
use crate::embed::{analogy, cooccurrence, pca_embed, CountTransform};
use crate::grammar::{
    cyk_parse, generate, grammar_entropy_floor, inside_logprob, synth_task, to_cnf, GenerateOptions, Grammar,
    InductionParams, ModularAddParams, ParseTree, TaskDataset, TaskItem, TaskKind,
};
use crate::lm::UniformModel;
use crate::model::{count_params, sample, write_checkpoint, ModelConfig};
use crate::ngram::{fit_ngram, perplexity};
use crate::rng::derived;
use crate::tensor::Tensor;
use crate::text::{detokenize, tokenize, Vocab, EOS};
use crate::train::{eval_windows, evaluate, init_params, train, TrainConfig, TrainData};

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(a, seed, out),
        Command::Generate(a) => cmd_generate(a, seed, out),
        Command::Perplexity(a) => cmd_perplexity(a, out),
        Command::Ngram(a) => cmd_ngram(a, out),
        Command::Embed(a) => cmd_embed(a, out),
        Command::Grammar(g) => cmd_grammar(g, seed.unwrap_or(0), out),
        Command::Task(t) => cmd_task(t, seed.unwrap_or(0), out),
        Command::Scaling(s) => cmd_scaling(s, seed, out),
        Command::Probe(p) => cmd_probe(p, seed, out),
    }
}

fn emit(out: &mut dyn Write, v: &serde_json::Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value") + "\n"
}

// ---------------------------------------------------------------- train

/// Loaded training data plus its vocabulary.
fn load_data(keys: &DataKeys, test_fraction: f64) -> Result<(Vocab, TrainData)> {
    match (&keys.corpus, &keys.task) {
        (Some(c), None) => {
            let tok = data::tokenizer(&keys.tokenizer)?;
            let pieces = data::corpus_tokens(Path::new(c), &tok)?;
            let vocab = data::corpus_vocab(&pieces, keys.max_vocab)?;
            let ids = data::ids(&pieces, &vocab);
            Ok((vocab, TrainData::split_corpus(&ids, test_fraction)?))
        }
        (None, Some(t)) => {
            let (vocab, train, test) = read_task_dir(Path::new(t))?;
            Ok((vocab, TrainData::Task { train, test }))
        }
        (Some(_), Some(_)) => Err(LmError::Config("give either corpus or task, not both".into())),
        (None, None) => Err(LmError::Config("no training data (set corpus or task)".into())),
    }
}

fn read_task_dir(dir: &Path) -> Result<(Vocab, Vec<TaskItem>, Vec<TaskItem>)> {
    let vocab = Vocab::from_text(&read_text(&dir.join(VOCAB_FILE))?)?;
    let train = TaskDataset::from_jsonl(&read_text(&dir.join("train.jsonl"))?)?;
    let test = TaskDataset::from_jsonl(&read_text(&dir.join("test.jsonl"))?)?;
    for item in train.iter().chain(&test) {
        if item.prompt.iter().chain([&item.answer]).any(|&t| t >= vocab.len()) {
            return Err(LmError::Data(format!("{}: token id outside the vocabulary", dir.display())));
        }
    }
    Ok((vocab, train, test))
}

/// Run config from `--config`, `--set` and flags (flags win).
fn gather_config(config: Option<&Path>, sets: &[String]) -> Result<KvConfig> {
    let mut kv = match config {
        Some(p) => KvConfig::parse(&read_text(p)?)?,
        None => KvConfig::new(),
    };
    kv.merge(&parse_sets(sets)?);
    Ok(kv)
}

struct Prepared {
    keys: DataKeys,
    vocab: Vocab,
    data: TrainData,
    model: ModelConfig,
    train: TrainConfig,
}

fn prepare_training(mut kv: KvConfig) -> Result<Prepared> {
    let keys = DataKeys::take(&mut kv)?;
    let test_fraction = match kv.take_str("test_fraction") {
        Some(v) => {
            kv.set("test_fraction", &v);
            v.parse()
                .map_err(|_| LmError::Config(format!("bad value {v:?} for test_fraction")))?
        }
        None => TrainConfig::default().test_fraction,
    };
    let (vocab, data) = load_data(&keys, test_fraction)?;
    match kv.take::<usize>("vocab_size")? {
        Some(v) if v != vocab.len() => {
            return Err(LmError::Config(format!(
                "vocab_size = {v} but the data has {} types",
                vocab.len()
            )))
        }
        _ => kv.set("vocab_size", vocab.len()),
    }
    let model = ModelConfig::from_kv(&mut kv)?;
    let train = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(Prepared {
        keys,
        vocab,
        data,
        model,
        train,
    })
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut kv = gather_config(a.config.as_deref(), &a.set)?;
    if let Some(c) = &a.corpus {
        kv.set("corpus", c.display());
    }
    if let Some(t) = &a.task {
        kv.set("task", t.display());
    }
    if let Some(s) = a.steps {
        kv.set("steps", s);
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    let p = prepare_training(kv)?;
    let dir = prepare(&a.out)?;
    write_new(&dir.join(CONFIG_FILE), rundir::run_config_text(&p.keys, &p.model, &p.train))?;
    write_new(&dir.join(VOCAB_FILE), p.vocab.to_text())?;
    let model = init_params(p.model.clone(), p.train.seed)?;
    let outcome = train(model, &p.data, &p.train)?;
    let rec = &outcome.record;
    write_new(&dir.join("metrics.jsonl"), rec.to_jsonl())?;
    write_new(&dir.join("timing.jsonl"), rec.timing_jsonl())?;
    write_new(&dir.join("summary.csv"), rec.summary_csv())?;
    if rec.diverged.is_none() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &outcome.model)?;
        write_new(&dir.join(CHECKPOINT_FILE), bytes)?;
    }
    let last = |s: &str| rec.last(s).map(|e| json!({"loss": e.loss, "accuracy": e.accuracy}));
    emit(
        out,
        &json!({
            "run": dir.display().to_string(),
            "steps": rec.final_step,
            "params": outcome.model.num_params(),
            "train": last("train"),
            "test": last("test"),
        }),
    )?;
    outcome.into_result().map(|_| ())
}

// ---------------------------------------------------------------- generate

fn cmd_generate(a: GenerateArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let run = load_run(&a.run)?;
    let prompt = tokenize(&a.prompt, &run.tokenizer, &run.vocab);
    let mut rng = derived(seed.unwrap_or(run.train.seed), "generate");
    let mut new = sample(&run.model, &prompt, a.temperature, a.max_len, &mut rng)?;
    if new.last() == Some(&EOS) {
        new.pop();
    }
    let mut all = prompt;
    all.extend(new);
    writeln!(out, "{}", detokenize(&all, &run.tokenizer, &run.vocab))?;
    Ok(())
}

// ---------------------------------------------------------------- perplexity

fn cmd_perplexity(a: PerplexityArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(dir) = &a.run {
        let run = load_run(dir)?;
        let pieces = run.tokenizer.split(&read_text(&a.corpus)?);
        let ids = data::ids(&pieces, &run.vocab);
        let len = run.model.config().window().unwrap_or(run.train.seq_len);
        let stride = a.stride.unwrap_or((len / 2).max(1));
        let windows = eval_windows(&ids, len, stride);
        if windows.is_empty() {
            return Err(LmError::Data("corpus is too short to score".into()));
        }
        let (nll, correct, n) = evaluate(&run.model, &windows)?;
        let ce = nll / n as f64;
        return emit(
            out,
            &json!({"model": run.model.config().kind(), "tokens": n, "cross_entropy": ce,
                    "perplexity": ce.exp(), "accuracy": correct as f64 / n as f64}),
        );
    }
    if !a.uniform {
        return Err(LmError::Config("choose a model: --uniform or --run <dir>".into()));
    }
    let tok = data::tokenizer(&a.tokenizer)?;
    let pieces = data::corpus_tokens(&a.corpus, &tok)?;
    let distinct = pieces.iter().collect::<BTreeSet<_>>().len();
    let v = a.vocab_size.unwrap_or(distinct);
    if v < distinct {
        return Err(LmError::Config(format!("--vocab-size {v} is below the {distinct} distinct tokens")));
    }
    // Ids only need to be distinct and below v.
    let index: std::collections::BTreeMap<&String, usize> =
        pieces.iter().collect::<BTreeSet<_>>().into_iter().enumerate().map(|(i, t)| (t, i)).collect();
    let ids: Vec<usize> = pieces.iter().map(|t| index[t]).collect();
    let r = perplexity(&UniformModel { vocab_size: v }, &ids)?;
    emit(
        out,
        &json!({"model": "uniform", "vocab_size": v, "tokens": r.tokens,
                "cross_entropy": r.cross_entropy, "perplexity": r.perplexity}),
    )
}

// ---------------------------------------------------------------- ngram

fn cmd_ngram(a: NgramArgs, out: &mut dyn Write) -> Result<()> {
    let tok = data::tokenizer(&a.tokenizer)?;
    let pieces = data::corpus_tokens(&a.train, &tok)?;
    let vocab = data::corpus_vocab(&pieces, None)?;
    let ids = data::ids(&pieces, &vocab);
    let model = fit_ngram(&ids, a.order, a.k, vocab.len())?;
    if a.dump {
        write!(out, "{}", model.dump())?;
    }
    let eval = match &a.eval {
        None => None,
        Some(p) => {
            let ids = tokenize(&read_text(p)?, &tok, &vocab);
            let r = perplexity(&model, &ids)?;
            Some(json!({"tokens": r.tokens, "cross_entropy": finite(r.cross_entropy),
                        "perplexity": finite(r.perplexity), "zero_probability_at": r.zero_probability_at}))
        }
    };
    emit(
        out,
        &json!({"order": a.order, "k": a.k, "vocab_size": vocab.len(), "train_tokens": ids.len(), "eval": eval}),
    )
}

/// JSON has no infinity; `null` stands for it.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

// ---------------------------------------------------------------- embed

fn cmd_embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let tok = data::tokenizer(&a.tokenizer)?;
    let pieces = data::corpus_tokens(&a.corpus, &tok)?;
    let vocab = data::corpus_vocab(&pieces, None)?;
    let ids = data::ids(&pieces, &vocab);
    let m = cooccurrence(&ids, a.window, vocab.len())?;
    let transform = if a.log { CountTransform::Log1p } else { CountTransform::Raw };
    let e = pca_embed(&m, a.dim, transform)?;
    let mut answers = Vec::new();
    for q in &a.analogy {
        let words: Vec<&str> = q.split_whitespace().collect();
        let [x, y, z] = words[..] else {
            return Err(LmError::Config(format!("--analogy expects three words, got {q:?}")));
        };
        let lookup = |w: &str| {
            vocab
                .get(w)
                .ok_or_else(|| LmError::Data(format!("analogy word {w:?} is not in the corpus")))
        };
        let (ia, ib, ic) = (lookup(x)?, lookup(y)?, lookup(z)?);
        let exclude: BTreeSet<usize> = [ia, ib, ic].into();
        let d = analogy(&e, ia, ib, ic, &exclude)?;
        answers.push(json!({"query": q, "answer": vocab.token(d)}));
    }
    if let Some(path) = &a.out {
        let mut text = String::new();
        for w in 0..vocab.len() {
            let v: Vec<String> = e.vector(w).iter().map(|x| x.to_string()).collect();
            text += &format!("{}\t{}\n", vocab.token(w).escape_default(), v.join(" "));
        }
        fs::write(path, text)?;
    }
    emit(
        out,
        &json!({"vocab_size": vocab.len(), "dim": e.dim(), "window": a.window,
                "reconstruction_error": e.reconstruction_error(&m, transform), "analogies": answers}),
    )
}

// ---------------------------------------------------------------- grammar

fn cmd_grammar(c: GrammarCommand, seed: u64, out: &mut dyn Write) -> Result<()> {
    match c {
        GrammarCommand::Gen { source, n, trees, out: file } => {
            let g = data::grammar(&source.grammar, source.uniform)?;
            let mut rng = derived(seed, "grammar");
            let mut text = String::new();
            for _ in 0..n {
                let s = generate(&g, &mut rng, GenerateOptions::default())?;
                text += &g.tokens_to_string(&s.tokens);
                text.push('\n');
                if trees {
                    text += &s.tree.render(&g);
                    text.push('\n');
                }
            }
            match file {
                Some(p) => fs::write(p, text)?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        GrammarCommand::Parse { source, input, indent } => {
            let g = data::grammar(&source.grammar, source.uniform)?;
            let tree = best_parse(&g, &input)?;
            if indent {
                write!(out, "{}", tree.render_indented(&g))?;
            } else {
                writeln!(out, "{}", tree.render(&g))?;
            }
        }
        GrammarCommand::Inside { source, input } => {
            let g = data::grammar(&source.grammar, source.uniform)?;
            if !g.is_probabilistic() {
                return Err(LmError::Config("inside probabilities need a probabilistic grammar (try --uniform)".into()));
            }
            let cnf = to_cnf(&g)?;
            let lp = inside_logprob(cnf.grammar(), &g.tokens_from_str(&input)?)?;
            emit(out, &json!({"input": input, "log_prob": finite(lp), "prob": lp.exp()}))?;
        }
        GrammarCommand::Entropy {
            source,
            samples,
            terminator,
        } => {
            let g = data::grammar(&source.grammar, source.uniform)?;
            let e = grammar_entropy_floor(&g, samples, &mut derived(seed, "entropy"), GenerateOptions::default(), terminator)?;
            emit(
                out,
                &json!({"nats_per_token": e.nats_per_token, "std_error": e.std_error, "samples": e.samples,
                        "mean_length": e.mean_length, "mean_nll": e.mean_nll, "restarts": e.restarts}),
            )?;
        }
    }
    Ok(())
}

fn best_parse(g: &Grammar, input: &str) -> Result<ParseTree> {
    let tokens = g.tokens_from_str(input)?;
    let cnf = to_cnf(g)?;
    match cyk_parse(cnf.grammar(), &tokens)? {
        Some(t) => cnf.to_source_tree(&t),
        None => Err(LmError::Data(format!("{input:?} is not in the language of the grammar"))),
    }
}

// ---------------------------------------------------------------- task

fn cmd_task(c: TaskCommand, seed: u64, out: &mut dyn Write) -> Result<()> {
    let (kind, o, echo) = match c {
        TaskCommand::ModularAdd {
            modulus,
            train_fraction,
            samples,
            out,
        } => (
            TaskKind::ModularAdd(ModularAddParams {
                modulus,
                train_fraction,
                samples,
            }),
            out,
            vec![
                ("task", "modular_add".to_string()),
                ("modulus", modulus.to_string()),
                ("train_fraction", train_fraction.to_string()),
                ("samples", samples.map_or("all".into(), |s| s.to_string())),
            ],
        ),
        TaskCommand::Induction {
            vocab,
            seq_len,
            n_train,
            n_test,
            heldout,
            out,
        } => (
            TaskKind::Induction(InductionParams {
                vocab,
                seq_len,
                n_train,
                n_test,
                heldout_fraction: heldout,
            }),
            out,
            vec![
                ("task", "induction".to_string()),
                ("vocab", vocab.to_string()),
                ("seq_len", seq_len.to_string()),
                ("n_train", n_train.to_string()),
                ("n_test", n_test.to_string()),
                ("heldout", heldout.to_string()),
            ],
        ),
    };
    let ds = synth_task(kind, &mut derived(seed, "task"))?;
    let dir = prepare(&o)?;
    let mut echo = echo;
    echo.push(("seed", seed.to_string()));
    write_new(&dir.join(CONFIG_FILE), kv_text(&echo))?;
    write_new(&dir.join(VOCAB_FILE), ds.vocab.to_text())?;
    write_new(&dir.join("train.jsonl"), TaskDataset::to_jsonl(&ds.train))?;
    write_new(&dir.join("test.jsonl"), TaskDataset::to_jsonl(&ds.test))?;
    emit(
        out,
        &json!({"dir": dir.display().to_string(), "vocab_size": ds.vocab.len(),
                "train": ds.train.len(), "test": ds.test.len()}),
    )
}

// ---------------------------------------------------------------- scaling

fn list(kv: &mut KvConfig, key: &str) -> Result<Vec<f64>> {
    let s: String = kv.take_required(key)?;
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| LmError::Config(format!("bad entry {x:?} in {key}")))
        })
        .collect()
}

pub fn read_points(path: &Path) -> Result<Vec<ScalingPoint>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| LmError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn points_csv(points: &[ScalingPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| LmError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| LmError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn cmd_scaling(c: ScalingCommand, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    match c {
        ScalingCommand::Synth {
            p_c,
            d_c,
            alpha_p,
            alpha_d,
            noise,
            out: path,
        } => {
            let ps = log_grid(1e5, 1e11, 9);
            let ds = log_grid(1e6, 1e12, 9);
            let mut rng = derived(seed.unwrap_or(0), "noise");
            let noise = (noise > 0.0).then_some((noise, &mut rng));
            let pts = synthetic_points(p_c, d_c, alpha_p, alpha_d, &ps, &ds, noise);
            fs::write(&path, points_csv(&pts)?)?;
            emit(out, &json!({"points": pts.len(), "file": path.display().to_string()}))
        }
        ScalingCommand::Fit { points, out: o } => {
            let pts = read_points(&points)?;
            let fit = fit_scaling(&pts)?;
            let mut v = serde_json::to_value(&fit).expect("plain struct");
            v["format_version"] = json!(1);
            let dir = prepare(&o)?;
            write_new(&dir.join("fit.json"), pretty(&v))?;
            emit(out, &v)
        }
        ScalingCommand::Grid { config, set, out: o } => {
            let mut kv = gather_config(Some(&config), &set)?;
            if let Some(s) = seed {
                kv.set("seed", s);
            }
            let widths = list(&mut kv, "grid_p")?;
            let budgets = list(&mut kv, "grid_tokens")?;
            // Validate the shared part once with the first width.
            let mut probe = kv.clone();
            probe.set("p", widths.first().copied().unwrap_or(0.0) as usize);
            probe.set("steps", 1);
            let base = prepare_training(probe)?;
            let dir = prepare(&o)?;
            write_new(
                &dir.join(CONFIG_FILE),
                format!(
                    "{}grid_p={}\ngrid_tokens={}\n",
                    rundir::run_config_text(&base.keys, &base.model, &base.train),
                    join(&widths),
                    join(&budgets)
                ),
            )?;
            let jobs: Vec<(f64, f64)> = widths.iter().flat_map(|&p| budgets.iter().map(move |&d| (p, d))).collect();
            let per_step = match base.data {
                TrainData::Corpus { .. } => base.train.batch_tokens as f64,
                TrainData::Task { .. } => base.train.batch_items as f64,
            };
            let results: Vec<ScalingPoint> = jobs
                .par_iter()
                .map(|&(p, d)| {
                    let mut k = kv.clone();
                    k.set("p", p as usize);
                    let steps = (d / per_step).round().max(1.0) as usize;
                    k.set("steps", steps);
                    let run = prepare_training(k)?;
                    let params = count_params(&run.model).exact as f64;
                    let model = init_params(run.model, run.train.seed)?;
                    let (_, rec) = train(model, &run.data, &run.train)?.into_result()?;
                    let loss = rec.last("test").map(|e| e.loss).unwrap_or(f64::NAN);
                    Ok(ScalingPoint {
                        params,
                        tokens: steps as f64 * per_step,
                        loss,
                    })
                })
                .collect::<Result<_>>()?;
            write_new(&dir.join("points.csv"), points_csv(&results)?)?;
            emit(out, &json!({"points": results.len(), "dir": dir.display().to_string()}))
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------- probe

/// Grammar samples whose terminals are all in the run vocabulary.
fn probe_sentences(
    g: &Grammar,
    vocab: &Vocab,
    n: usize,
    window: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<(Vec<usize>, ParseTree)>> {
    let mut ids = Vec::with_capacity(g.terminals().len());
    for t in g.terminals() {
        ids.push(vocab.get(t).ok_or_else(|| {
            LmError::Data(format!("grammar terminal {t:?} is not in the model vocabulary"))
        })?);
    }
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(LmError::Data("grammar rarely yields sentences that fit the model window".into()));
        }
        let s = generate(g, rng, GenerateOptions::default())?;
        if s.tokens.len() < 2 || s.tokens.len() >= window {
            continue;
        }
        out.push((s.tokens.iter().map(|&t| ids[t]).collect(), s.tree));
    }
    Ok(out)
}

fn cmd_probe(c: ProbeCommand, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    match c {
        ProbeCommand::Capture {
            run,
            input,
            layers,
            attention,
            out: o,
        } => {
            let run = load_run(&run)?;
            let mut ids = vec![crate::text::BOS];
            ids.extend(tokenize(&input, &run.tokenizer, &run.vocab));
            let trace = capture_activations(&run.model, &ids, &layers, attention)?;
            let dir = prepare(&o)?;
            trace.write_dir(&dir)?;
            emit(
                out,
                &json!({"dir": dir.display().to_string(), "layers": trace.labels, "tokens": ids.len()}),
            )
        }
        ProbeCommand::Train {
            run,
            source,
            layer,
            rank,
            sentences,
            steps,
            lr,
            control,
            out: o,
        } => {
            let seed = seed.unwrap_or(0);
            let r = load_run(&run)?;
            let g = data::grammar(&source.grammar, source.uniform)?;
            let window = r.model.config().window().unwrap_or(usize::MAX);
            let sents = probe_sentences(&g, &r.vocab, sentences, window, &mut derived(seed, "probe-data"))?;
            let mut ex = probe_examples(&r.model, layer, &sents)?;
            if control {
                ex = shuffle_trees(&ex, &mut derived(seed, "control"));
            }
            let mut probe = train_structural_probe(&ex, &ProbeConfig { rank, steps, lr, seed })?;
            probe.layer = Some(layer);
            let score = probe_eval(&probe, &ex)?;
            let dir = prepare(&o)?;
            write_new(&dir.join("probe.tlm"), probe.projection.to_bytes())?;
            let v = json!({
                "format_version": 1, "layer": layer, "rank": rank, "control": control,
                "sentences": ex.len(), "final_loss": probe.loss_curve.last(),
                "train_spearman": score.spearman, "train_rmse": score.rmse,
            });
            write_new(&dir.join("probe.json"), pretty(&v))?;
            write_new(
                &dir.join("loss_curve.jsonl"),
                probe
                    .loss_curve
                    .iter()
                    .enumerate()
                    .map(|(s, l)| format!("{}\n", json!({"format_version": 1, "step": s, "split": "train", "metric": "probe_loss", "value": l})))
                    .collect::<String>(),
            )?;
            emit(out, &v)
        }
        ProbeCommand::Eval {
            run,
            probe,
            source,
            sentences,
            control,
        } => {
            let seed = seed.unwrap_or(0);
            let r = load_run(&run)?;
            let meta: serde_json::Value = serde_json::from_str(&read_text(&probe.join("probe.json"))?)
                .map_err(|e| LmError::Data(format!("probe.json: {e}")))?;
            let layer = meta["layer"]
                .as_u64()
                .ok_or_else(|| LmError::Data("probe.json has no layer".into()))? as usize;
            let bytes = fs::read(probe.join("probe.tlm"))?;
            let projection = Tensor::read_from(&mut bytes.as_slice())?;
            let p = StructuralProbe {
                projection,
                layer: Some(layer),
                loss_curve: vec![],
            };
            let g = data::grammar(&source.grammar, source.uniform)?;
            let window = r.model.config().window().unwrap_or(usize::MAX);
            let sents = probe_sentences(&g, &r.vocab, sentences, window, &mut derived(seed, "probe-eval"))?;
            let mut ex = probe_examples(&r.model, layer, &sents)?;
            if control {
                ex = shuffle_trees(&ex, &mut derived(seed, "control-eval"));
            }
            let s = probe_eval(&p, &ex)?;
            emit(
                out,
                &json!({"layer": layer, "spearman": s.spearman, "rmse": s.rmse,
                        "sentences": s.sentences, "skipped": s.skipped}),
            )
        }
    }
}
