mod common;

use common::DictionaryCopy;
use lexnmt::data::{BpeModel, ParallelCorpus, Vocabulary};
use lexnmt::eval::{bleu, perplexity};
use lexnmt::infer::{translate_corpus, BeamConfig};
use lexnmt::model::{Model, ModelConfig, Variant};
use lexnmt::train::{train, DevSet, TrainConfig, Trainer};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn memorizes_a_tiny_corpus_and_translates_it_back() {
    let src = ["a b c", "b c d", "d a", "c c a b"];
    let tgt = ["x y z", "y z w", "w x", "z z x y"];
    let corpus = ParallelCorpus::new(src.map(toks).to_vec(), tgt.map(toks).to_vec()).unwrap();
    let sv = Vocabulary::build(corpus.sources(), 1).unwrap();
    let tv = Vocabulary::build(corpus.targets(), 1).unwrap();
    let enc = corpus.encode(&sv, &tv);
    let cfg = ModelConfig::new(Variant::Tied, sv.len(), tv.len(), 32);
    let tc = TrainConfig { batch_size: 2, init_range: 0.1, ..Default::default() };
    let mut t = Trainer::new(Model::<f64>::zeros(cfg).unwrap(), tc).unwrap();
    let mut ppl = f64::INFINITY;
    for _ in 0..200 {
        t.train_epoch(&enc).unwrap();
        ppl = perplexity(&t.model, &enc, 4).unwrap();
        if ppl < 1.3 {
            break;
        }
    }
    assert!(ppl < 1.3, "train ppl {ppl}");

    let sources: Vec<Vec<String>> = corpus.sources().cloned().collect();
    let refs: Vec<Vec<String>> = corpus.targets().cloned().collect();
    let hyps: Vec<Vec<String>> = translate_corpus(&t.model, &sv, &tv, &sources, &BeamConfig::default(), true)
        .into_iter()
        .map(|r| r.unwrap().tokens)
        .collect();
    assert_eq!(hyps, refs);
    assert_eq!(bleu(&hyps, &refs, 4).unwrap().bleu, 100.0);
}

#[test]
fn best_checkpoint_tracks_the_highest_dev_bleu() {
    let data = DictionaryCopy::new(10, 30, 6, (2, 4), 4);
    let dev = DevSet {
        sources: data.held_out.sources().cloned().collect(),
        references: data.held_out.targets().cloned().collect(),
        encoded: data.held_out_encoded(),
    };
    let cfg = ModelConfig::new(Variant::FixnormLex, data.src_vocab.len(), data.tgt_vocab.len(), 16);
    let tc = TrainConfig {
        epochs: 6,
        batch_size: 8,
        init_range: 0.1,
        dev_beam: BeamConfig { beam_size: 2, ..Default::default() },
        ..Default::default()
    };
    let mut t = Trainer::new(Model::<f64>::zeros(cfg).unwrap(), tc).unwrap();
    let mut seen = 0;
    let out = train(&mut t, &data.encoded(), Some(&dev), &data.src_vocab, &data.tgt_vocab, |_| seen += 1).unwrap();
    assert_eq!(seen, 6);
    assert!(out.aborted.is_none());
    let best = out.log.iter().map(|r| r.dev_bleu.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.progress.best_metric, Some(best));
    let first_best = out.log.iter().find(|r| r.dev_bleu == Some(best)).unwrap();
    assert_eq!(out.best.progress.epoch, first_best.epoch);
    assert_eq!(out.latest.progress.epoch, 6);
}

#[test]
fn bpe_segmented_training_data_round_trips() {
    let lines: Vec<Vec<String>> = ["lower lowest newer", "newest low", "wider widest"].map(toks).to_vec();
    let model = BpeModel::learn(lines.iter(), 8);
    for line in &lines {
        let seg = model.apply(line);
        assert!(seg.len() >= line.len());
        assert_eq!(&BpeModel::undo(&seg), line);
    }
}
