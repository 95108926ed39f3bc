use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lexnmt::data::{
    read_lines, unk_rate, BpeModel, DataError, EncodedCorpus, ParallelCorpus, Vocabulary, BOS, PAD,
};
use lexnmt::eval;
use lexnmt::infer::{self, BeamConfig, InferError};
use lexnmt::model::Model;
use lexnmt::tensor::Real;
use lexnmt::train::{self, peek_precision, Checkpoint, DevSet, LogRow, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::{
    BpeApplyArgs, BpeLearnArgs, EvaluateArgs, InspectArgs, LexiconArgs, PrepArgs, SignificanceArgs,
    TrainArgs, TranslateArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?)
}

fn write_lines<I, L>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = L>,
    L: AsRef<[String]>,
{
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.as_ref().join(" "));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Parallel corpus from two files; a line-count mismatch is a usage error.
fn read_parallel(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    match ParallelCorpus::new(read(src)?, read(tgt)?) {
        Ok(c) => Ok(c),
        Err(e @ DataError::LineCountMismatch { .. }) => Err(usage(format!(
            "{} and {}: {e}",
            src.display(),
            tgt.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Vocabulary::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn prep(a: &PrepArgs) -> Result<()> {
    let corpus = read_parallel(&a.src, &a.tgt)?;
    let kept = corpus.filter_by_length(a.max_len);
    if kept.is_empty() {
        bail!("no sentence pairs left after length filtering (max_len {})", a.max_len);
    }
    let sv = Vocabulary::build(kept.sources(), a.min_count)?;
    let tv = Vocabulary::build(kept.targets(), a.min_count)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_text(&a.out_dir.join("vocab.src"), &sv.to_text())?;
    write_text(&a.out_dir.join("vocab.tgt"), &tv.to_text())?;
    write_lines(&a.out_dir.join("train.src"), kept.sources())?;
    write_lines(&a.out_dir.join("train.tgt"), kept.targets())?;
    let report = format!(
        "pairs_read = {}\npairs_kept = {}\nsrc_vocab = {}\ntgt_vocab = {}\nsrc_unk_rate = {:.6}\ntgt_unk_rate = {:.6}\n",
        corpus.len(),
        kept.len(),
        sv.len(),
        tv.len(),
        unk_rate(kept.sources(), &sv),
        unk_rate(kept.targets(), &tv),
    );
    write_text(&a.out_dir.join("prep.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn bpe_learn(a: &BpeLearnArgs) -> Result<()> {
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(read(p)?);
    }
    let model = BpeModel::learn(&lines, a.merges);
    write_text(&a.output, &model.to_text())?;
    eprintln!("learned {} merges", model.merges().len());
    Ok(())
}

fn load_bpe(path: &Path) -> Result<BpeModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading BPE model {}", path.display()))?;
    BpeModel::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn bpe_apply(a: &BpeApplyArgs) -> Result<()> {
    let model = load_bpe(&a.model)?;
    let convert = |m: &BpeModel, lines: Vec<Vec<String>>| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| if a.undo { BpeModel::undo(l) } else { m.apply(l) })
            .collect()
    };
    let (Some(tgt_in), Some(tgt_out)) = (&a.tgt_input, &a.tgt_output) else {
        return write_lines(&a.output, convert(&model, read(&a.input)?));
    };
    let tgt_model = match &a.tgt_model {
        Some(p) => load_bpe(p)?,
        None => model.clone(),
    };
    let corpus = read_parallel(&a.input, tgt_in)?;
    let (src, tgt): (Vec<_>, Vec<_>) = corpus.pairs.into_iter().unzip();
    let mut seg = ParallelCorpus::new(convert(&model, src), convert(&tgt_model, tgt))?;
    if a.augment_singleton_unk {
        seg = seg.augment_singleton_unk();
    }
    write_lines(&a.output, seg.sources())?;
    write_lines(tgt_out, seg.targets())
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    let d = &mut cfg.data;
    let set = |slot: &mut Option<std::path::PathBuf>, v: &Option<std::path::PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    set(&mut d.train_src, &a.train_src);
    set(&mut d.train_tgt, &a.train_tgt);
    set(&mut d.dev_src, &a.dev_src);
    set(&mut d.dev_tgt, &a.dev_tgt);
    if let Some(v) = &a.out_dir {
        d.out_dir.clone_from(v);
    }
    if let Some(v) = a.min_count {
        d.min_count = v;
    }
    if let Some(v) = a.max_len {
        d.max_len = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.variant {
        m.variant = v;
    }
    if a.r.is_some() {
        m.radius = a.r;
    }
    if let Some(v) = a.hidden_size {
        m.hidden_size = v;
    }
    if let Some(v) = a.layers {
        m.num_layers = v;
    }
    if let Some(v) = a.dropout {
        m.dropout = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.dev_beam {
        t.dev_beam.beam_size = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = v;
    }
}

struct TrainData {
    corpus: EncodedCorpus,
    dev: Option<DevSet>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

fn load_train_data(cfg: &RunConfig, vocabs: Option<(Vocabulary, Vocabulary)>) -> Result<TrainData> {
    let d = &cfg.data;
    let (Some(src), Some(tgt)) = (&d.train_src, &d.train_tgt) else {
        return Err(usage("training data missing: set data.train_src and data.train_tgt"));
    };
    let mut corpus = read_parallel(src, tgt)?.filter_by_length(d.max_len);
    if d.augment_singleton_unk {
        corpus = corpus.augment_singleton_unk();
    }
    if corpus.is_empty() {
        bail!("no training pairs left after length filtering (max_len {})", d.max_len);
    }
    let (src_vocab, tgt_vocab) = match vocabs {
        Some(v) => v,
        None => {
            let sv = match &d.src_vocab {
                Some(p) => load_vocab(p)?,
                None => Vocabulary::build(corpus.sources(), d.min_count)?,
            };
            let tv = match &d.tgt_vocab {
                Some(p) => load_vocab(p)?,
                None => Vocabulary::build(corpus.targets(), d.min_count)?,
            };
            (sv, tv)
        }
    };
    let dev = match (&d.dev_src, &d.dev_tgt) {
        (Some(s), Some(t)) => {
            let pc = read_parallel(s, t)?;
            let nonempty = ParallelCorpus {
                pairs: pc.pairs.iter().filter(|(s, _)| !s.is_empty()).cloned().collect(),
            };
            Some(DevSet {
                encoded: nonempty.encode(&src_vocab, &tgt_vocab),
                sources: pc.sources().cloned().collect(),
                references: pc.targets().cloned().collect(),
            })
        }
        (None, None) => None,
        _ => return Err(usage("dev_src and dev_tgt must be given together")),
    };
    Ok(TrainData {
        corpus: corpus.encode(&src_vocab, &tgt_vocab),
        dev,
        src_vocab,
        tgt_vocab,
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, a);
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if a.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match &a.resume {
        Some(path) => match peek_precision(path)?.as_str() {
            "f32" => resume::<f32>(&cfg, a, path),
            "f64" => resume::<f64>(&cfg, a, path),
            other => bail!("unsupported checkpoint precision {other}"),
        },
        None => {
            // Validate the model section before reading any data.
            cfg.model.model_config(1, 1)?;
            match cfg.precision {
                Precision::F32 => fresh::<f32>(&cfg),
                Precision::F64 => fresh::<f64>(&cfg),
            }
        }
    }
}

fn fresh<T: Real>(cfg: &RunConfig) -> Result<()> {
    let data = load_train_data(cfg, None)?;
    let mc = cfg.model.model_config(data.src_vocab.len(), data.tgt_vocab.len())?;
    let trainer = Trainer::new(Model::<T>::zeros(mc)?, cfg.train.clone())?;
    run_training(cfg, trainer, data, false)
}

fn resume<T: Real>(cfg: &RunConfig, a: &TrainArgs, path: &Path) -> Result<()> {
    let ck = Checkpoint::<T>::load(path)?;
    let vocabs = (ck.src_vocab.clone(), ck.tgt_vocab.clone());
    let mut trainer = Trainer::from_checkpoint(ck)?;
    if let Some(e) = a.epochs {
        trainer.config.epochs = e;
    }
    let data = load_train_data(cfg, Some(vocabs))?;
    run_training(cfg, trainer, data, true)
}

fn run_training<T: Real>(cfg: &RunConfig, mut trainer: Trainer<T>, data: TrainData, append: bool) -> Result<()> {
    let out = &cfg.data.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let log_path = out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if !append || log.metadata()?.len() == 0 {
        writeln!(log, "{}", LogRow::HEADER)?;
    }
    eprintln!(
        "training {} ({} parameters) on {} pairs; source vocab {}, target vocab {}",
        trainer.model.config.variant,
        trainer.model.params.num_scalars(),
        data.corpus.len(),
        data.src_vocab.len(),
        data.tgt_vocab.len()
    );
    let mut io_error = None;
    let outcome = train::train(
        &mut trainer,
        &data.corpus,
        data.dev.as_ref(),
        &data.src_vocab,
        &data.tgt_vocab,
        |row| {
            eprintln!("{row}");
            if let Err(e) = writeln!(log, "{row}") {
                io_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_error {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    outcome.best.save(&out.join("best.ck"))?;
    outcome.latest.save(&out.join("last.ck"))?;
    if let Some(reason) = outcome.aborted {
        bail!("training stopped early: {reason}; the last good checkpoint is in {}", out.display());
    }
    eprintln!("best checkpoint: epoch {:?}", outcome.best.progress.best_epoch);
    Ok(())
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    match peek_precision(&a.checkpoint)?.as_str() {
        "f32" => translate_with::<f32>(a),
        "f64" => translate_with::<f64>(a),
        other => bail!("unsupported checkpoint precision {other}"),
    }
}

fn translate_with<T: Real>(a: &TranslateArgs) -> Result<()> {
    let cfg = BeamConfig {
        beam_size: a.beam,
        alpha: a.alpha,
        max_len: a.max_len,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let sentences = read(&a.input)?;
    let results = infer::translate_corpus(&ck.model, &ck.src_vocab, &ck.tgt_vocab, &sentences, &cfg, !a.no_replace_unk);
    let mut text = String::new();
    let mut dump = String::new();
    for (i, (res, src)) in results.into_iter().zip(&sentences).enumerate() {
        let (tokens, attention) = match res {
            Ok(t) => (t.tokens, t.attention),
            Err(InferError::EmptySource) => (Vec::new(), Vec::new()),
            Err(e) => return Err(anyhow!(e).context(format!("line {}", i + 1))),
        };
        text.push_str(&tokens.join(" "));
        text.push('\n');
        dump.push_str(&infer::format_attention(i, &attention, src.len()));
    }
    if let Some(p) = &a.dump_attention {
        write_text(p, &dump)?;
    }
    output(a.output.as_deref(), &text)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = eval::bleu(&read(&a.hyp)?, &read(&a.reference)?, a.max_n)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn significance(a: &SignificanceArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = eval::bootstrap_significance(
        &read(&a.hyp_a)?,
        &read(&a.hyp_b)?,
        &read(&a.reference)?,
        a.resamples,
        &mut rng,
    )?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn lexicon(a: &LexiconArgs) -> Result<()> {
    match peek_precision(&a.checkpoint)?.as_str() {
        "f32" => lexicon_with::<f32>(a),
        "f64" => lexicon_with::<f64>(a),
        other => bail!("unsupported checkpoint precision {other}"),
    }
}

fn lexicon_with<T: Real>(a: &LexiconArgs) -> Result<()> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let mut text = String::new();
    for entry in ck.model.extract_lexicon(a.top_k)? {
        let row: Vec<(&str, f64)> = entry
            .translations
            .iter()
            .map(|&(e, p)| (ck.tgt_vocab.token(e), p))
            .collect();
        text.push_str(&lexnmt::model::format_lexicon_row(ck.src_vocab.token(entry.src), &row));
        text.push('\n');
    }
    output(a.output.as_deref(), &text)
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    match peek_precision(&a.checkpoint)?.as_str() {
        "f32" => inspect_with::<f32>(a),
        "f64" => inspect_with::<f64>(a),
        other => bail!("unsupported checkpoint precision {other}"),
    }
}

fn inspect_with<T: Real>(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let (sv, tv) = (&ck.src_vocab, &ck.tgt_vocab);
    let src: Vec<usize> = sv.encode(&lexnmt::data::tokenize(&a.source), false, false);
    if src.is_empty() {
        return Err(usage("--source is empty"));
    }
    let target = lexnmt::data::tokenize(&a.target);
    let position = a.position.unwrap_or(target.len());
    if position > target.len() {
        return Err(usage(format!(
            "--position {position} is past the end of a {}-word target",
            target.len()
        )));
    }
    let tgt_ids = tv.encode(&target, false, false);
    let (h, h_lex, _) = ck.model.step_state(&src, &tgt_ids[..position])?;
    let candidates: Vec<usize> = match &a.candidates {
        Some(c) => lexnmt::data::tokenize(c).iter().map(|w| tv.id(w)).collect(),
        None => {
            let logits = ck.model.logits_for(&h, h_lex.as_deref())?;
            let mut order: Vec<usize> = (0..logits.len()).filter(|&i| i != PAD && i != BOS).collect();
            order.sort_by(|&x, &y| logits[y].partial_cmp(&logits[x]).unwrap().then(x.cmp(&y)));
            let mut c: Vec<usize> = order.into_iter().take(a.top).collect();
            if let Some(&gold) = tgt_ids.get(position) {
                if !c.contains(&gold) {
                    c.push(gold);
                }
            }
            c
        }
    };
    let rows = ck.model.inspect_logits(&h, h_lex.as_deref(), &candidates)?;
    let lex = ck.model.config.variant.has_lex();
    let mut out = String::from("word\t|W_e|\t|h|\tcos\tb_e\tlogit");
    if lex {
        out.push_str("\t|W_l|\t|h_l|\tcos_l\tb_l\tlex_logit\ttotal");
    }
    out.push('\n');
    for r in &rows {
        let _ = write!(
            out,
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            tv.token(r.id),
            r.w_norm,
            r.h_norm,
            r.cos,
            r.bias,
            r.logit
        );
        if let Some(l) = &r.lex {
            let _ = write!(
                out,
                "\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
                l.w_norm, l.h_norm, l.cos, l.bias, l.logit, r.total
            );
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
