use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use passage_distill::checkpoint;
use passage_distill::eval::{evaluate, Metric, Run};
use passage_distill::experiment::{heldout_set, init_pair, seed_offset, select_indices};
use passage_distill::index::{build_index, measure_latency, search, EmbeddingIndex};
use passage_distill::text::{
    build_train_groups, build_vocab, gen_synthetic, load_corpus, load_qrels, load_queries, QuerySet, SeqLens, SyntheticSpec,
    Vocabulary,
};
use passage_distill::train::{fit, save_pair, CheckpointSink};
use passage_distill::{Encoder, Error, Role};

use crate::config::FileConfig;
use crate::{Cli, CliError, Command, EncodeArgs, EvalArgs, GenDataArgs, LatencyArgs, SearchArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const CORPUS: &str = "corpus.tsv";
pub const QUERIES: &str = "queries.tsv";
pub const QRELS: &str = "qrels.tsv";
pub const TRAIN_SPLIT: &str = "train.ids";
pub const HELDOUT_SPLIT: &str = "heldout.ids";
pub const RETRIEVER: &str = "model.retriever";
pub const VOCAB: &str = "vocab.txt";
pub const HISTORY: &str = "history.jsonl";
pub const INDEX: &str = "index.pdix";
pub const RUN: &str = "run.tsv";

pub fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Encode(a) => encode(&cfg, a),
        Command::Search(a) => search_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Latency(a) => latency(&cfg, a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn lens_from(meta: &BTreeMap<String, String>, path: &Path) -> Result<SeqLens> {
    let get = |key: &str| -> Result<usize> {
        meta.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| {
            CliError::Core(Error::Corrupt {
                path: path.to_path_buf(),
                message: format!("metadata lacks `{key}`"),
            })
        })
    };
    Ok(SeqLens {
        query: get("query_len")?,
        doc: get("doc_len")?,
    })
}

struct Model {
    retriever: Encoder,
    vocab: Vocabulary,
    lens: SeqLens,
}

fn load_model(dir: &Path) -> Result<Model> {
    let path = dir.join(RETRIEVER);
    let ck = checkpoint::load(&path)?;
    if ck.encoder.role() != Role::Retriever {
        return Err(Error::Invalid(format!("{} does not hold a retriever", path.display())).into());
    }
    let lens = lens_from(&ck.metadata, &path)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    Ok(Model {
        retriever: ck.encoder,
        vocab,
        lens,
    })
}

fn gen_data(cfg: &FileConfig, a: GenDataArgs) -> Result<()> {
    let d = &cfg.data;
    let out = a.out.unwrap_or_else(|| d.dir.clone());
    let train_q = a.train_queries.unwrap_or(d.train_queries);
    let held_q = a.heldout_queries.unwrap_or(d.heldout_queries);
    let seed = a.seed.unwrap_or(cfg.seed);
    let spec = SyntheticSpec {
        num_docs: a.num_docs.unwrap_or(d.num_docs),
        num_queries: train_q + held_q,
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        doc_len: a.doc_len.unwrap_or(d.doc_len),
        query_len: a.query_len.unwrap_or(d.query_len),
        seed: seed + seed_offset::DATA,
    };
    let names = [CORPUS, QUERIES, QRELS, TRAIN_SPLIT, HELDOUT_SPLIT];
    if !a.overwrite {
        if let Some(p) = names.iter().map(|n| out.join(n)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --overwrite to replace it", p.display())));
        }
    }
    let data = gen_synthetic(&spec)?;
    create_dir(&out)?;
    let ids: Vec<&str> = data.queries.iter().map(|(q, _)| q).collect();
    let (train_ids, held_ids) = ids.split_at(train_q);
    let manifest = |ids: &[&str]| ids.iter().map(|i| format!("{i}\n")).collect::<String>();
    write(&out.join(CORPUS), data.store.to_tsv())?;
    write(&out.join(QUERIES), data.queries.to_tsv())?;
    write(&out.join(QRELS), data.qrels.to_tsv())?;
    write(&out.join(TRAIN_SPLIT), manifest(train_ids))?;
    write(&out.join(HELDOUT_SPLIT), manifest(held_ids))?;
    println!(
        "wrote {} docs, {} train + {} held-out queries to {}",
        data.store.len(),
        train_ids.len(),
        held_ids.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &FileConfig, a: TrainArgs) -> Result<()> {
    let data_dir = a.data.unwrap_or_else(|| cfg.data.dir.clone());
    let out = a.out.unwrap_or_else(|| cfg.model.dir.clone());
    let seed = a.seed.unwrap_or(cfg.seed);
    let mut tc = cfg.train.clone();
    tc.mode = a.mode.unwrap_or(tc.mode);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.group_size = a.group_size.unwrap_or(tc.group_size);
    tc.lr_retriever = a.lr_retriever.unwrap_or(tc.lr_retriever);
    tc.lr_ranker = a.lr_ranker.unwrap_or(tc.lr_ranker);
    tc.checkpoint_every = a.checkpoint_every.or(tc.checkpoint_every);
    tc.seed = seed + seed_offset::TRAIN;
    tc.validate()?;
    let lens = SeqLens {
        query: cfg.data.query_len,
        doc: cfg.data.doc_len,
    };

    let store = load_corpus(&data_dir.join(CORPUS))?;
    let queries = load_queries(&data_dir.join(QUERIES))?;
    let qrels = load_qrels(&data_dir.join(QRELS))?;
    let train_q = queries.subset(&read_ids(&data_dir.join(TRAIN_SPLIT))?)?;
    let held_path = data_dir.join(HELDOUT_SPLIT);
    let held_q = if held_path.exists() {
        Some(queries.subset(&read_ids(&held_path)?)?)
    } else {
        None
    };
    let texts: Vec<&str> = train_q.iter().map(|(_, t)| t).collect();
    let vocab = build_vocab(&store, &texts, cfg.data.min_freq)?;
    let groups = build_train_groups(&train_q, &qrels, &store, &vocab, lens, tc.group_size, seed + seed_offset::GROUPS)?;
    let heldout = held_q.as_ref().filter(|q| !q.is_empty()).map(|q| heldout_set(q, &qrels, &store, &vocab, lens));
    let (retriever, ranker) = init_pair(&cfg.model.retriever, &cfg.model.ranker, vocab.size(), lens, seed)?;

    create_dir(&out)?;
    vocab.save(&out.join(VOCAB))?;
    let mut metadata = BTreeMap::new();
    metadata.insert("query_len".to_string(), lens.query.to_string());
    metadata.insert("doc_len".to_string(), lens.doc.to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    let sink = CheckpointSink { dir: out.clone(), metadata };
    let fitted = match fit(&tc, retriever, ranker, &groups, heldout.as_ref(), Some(&sink)) {
        Ok(f) => f,
        Err(Error::Diverged { steps, message, history }) => {
            history.save(&out.join(HISTORY))?;
            return Err(Error::Diverged { steps, message, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    fitted.history.save(&out.join(HISTORY))?;
    let (rp, kp) = save_pair(&sink, "model", &fitted.retriever, &fitted.ranker, tc.mode, tc.epochs)?;
    match fitted.history.final_mrr10() {
        Some(m) => println!(
            "mode {} trained {} epochs; held-out MRR@10 {:.4}; wrote {} and {}",
            tc.mode,
            tc.epochs,
            m,
            rp.display(),
            kp.display()
        ),
        None => println!("mode {} trained {} epochs; wrote {} and {}", tc.mode, tc.epochs, rp.display(), kp.display()),
    }
    Ok(())
}

fn encode(cfg: &FileConfig, a: EncodeArgs) -> Result<()> {
    let model_dir = a.model.unwrap_or_else(|| cfg.model.dir.clone());
    let data_dir = a.data.unwrap_or_else(|| cfg.data.dir.clone());
    let out = a.out.unwrap_or_else(|| model_dir.join(INDEX));
    let model = load_model(&model_dir)?;
    let store = load_corpus(&data_dir.join(CORPUS))?;
    let index = build_index(&model.retriever, &store, &model.vocab, model.lens, a.similarity.unwrap_or(cfg.search.similarity))?;
    index.save(&out)?;
    println!("indexed {} docs (dim {}) into {}", index.len(), index.dim(), out.display());
    Ok(())
}

fn query_set(cfg: &FileConfig, queries: Option<PathBuf>, data: Option<PathBuf>, split: Option<&Path>) -> Result<QuerySet> {
    let data_dir = data.unwrap_or_else(|| cfg.data.dir.clone());
    let all = load_queries(&queries.unwrap_or_else(|| data_dir.join(QUERIES)))?;
    match split {
        Some(p) => Ok(all.subset(&read_ids(p)?)?),
        None => Ok(all),
    }
}

fn search_cmd(cfg: &FileConfig, a: SearchArgs) -> Result<()> {
    let model_dir = a.model.unwrap_or_else(|| cfg.model.dir.clone());
    let index_path = a.index.unwrap_or_else(|| model_dir.join(INDEX));
    let out = a.out.unwrap_or_else(|| model_dir.join(RUN));
    let k = a.k.unwrap_or(cfg.search.k);
    let index = EmbeddingIndex::load(&index_path)?;
    let model = load_model(&model_dir)?;
    let queries = query_set(cfg, a.queries, a.data, a.split.as_deref())?;
    let mut run = Run::default();
    let mut ranker_calls = 0;
    for (qid, text) in queries.iter() {
        let res = search(&index, text, &model.retriever, &model.vocab, k)?;
        ranker_calls += res.ranker_calls;
        run.insert(qid, res.hits)?;
    }
    run.save(&out)?;
    println!("searched {} queries at k={k}; ranker calls {ranker_calls}; wrote {}", queries.len(), out.display());
    Ok(())
}

fn eval_cmd(cfg: &FileConfig, a: EvalArgs) -> Result<()> {
    let model_dir = a.model.unwrap_or_else(|| cfg.model.dir.clone());
    let data_dir = a.data.unwrap_or_else(|| cfg.data.dir.clone());
    let run = Run::load(&a.run.unwrap_or_else(|| model_dir.join(RUN)))?;
    let qrels = load_qrels(&a.qrels.unwrap_or_else(|| data_dir.join(QRELS)))?;
    let names = a.metrics.unwrap_or_else(|| cfg.eval.metrics.clone());
    let metrics = names
        .iter()
        .map(|m| m.trim().parse::<Metric>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report = evaluate(&run, &qrels, &metrics)?;
    print!("{}", report.to_table());
    if let Some(p) = a.records {
        write(&p, report.to_records())?;
    }
    Ok(())
}

fn latency(cfg: &FileConfig, a: LatencyArgs) -> Result<()> {
    let model_dir = a.model.unwrap_or_else(|| cfg.model.dir.clone());
    let index_path = a.index.unwrap_or_else(|| model_dir.join(INDEX));
    let seed = a.seed.unwrap_or(cfg.seed);
    let index = EmbeddingIndex::load(&index_path)?;
    let model = load_model(&model_dir)?;
    let queries = query_set(cfg, a.queries, a.data, None)?;
    let texts: Vec<&str> = queries.iter().map(|(_, t)| t).collect();
    let picked: Vec<String> = select_indices(texts.len(), a.num_queries.unwrap_or(cfg.latency.queries), seed + seed_offset::LATENCY)
        .into_iter()
        .map(|i| texts[i].to_string())
        .collect();
    let stats = measure_latency(
        &index,
        &picked,
        &model.retriever,
        &model.vocab,
        a.k.unwrap_or(cfg.search.k),
        a.repetitions.unwrap_or(cfg.latency.repetitions),
    )?;
    let record = serde_json::json!({
        "queries": picked.len(),
        "docs": index.len(),
        "mean_us": stats.mean_us,
        "p50_us": stats.p50_us,
        "p95_us": stats.p95_us,
        "ranker_calls": stats.ranker_calls,
    });
    println!("{record}");
    if let Some(p) = a.out {
        write(&p, format!("{record}\n"))?;
    }
    Ok(())
}
