//! Zero-shot evaluation: Yes/No scoring with ROC-AUC for classification,
//! greedy generation with numeric extraction and RMSE for regression, and
//! attention-map export.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    encode, encode_with_attention, generate_greedy, score_yes_no, yes_probability, ModelError, ModelParams,
};
use crate::molgraph::MolGraph;
use crate::structure::GraphStructure;
use crate::tasks::{extract_number, Label, TaskKind, TaskRecord};
use crate::tokenizer::Vocab;
use crate::train::{prepare, TrainError};

/// Maximum tokens generated for a regression answer.
pub const MAX_ANSWER_TOKENS: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC-AUC needs both classes")]
    SingleClass,
    #[error("no generated answer contained a number")]
    NoExtractions,
    #[error("task {task_id} is a {found} task")]
    WrongKind { task_id: String, found: &'static str },
    #[error("score and label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Prepare(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("attention dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::SingleClass => "SingleClass",
            EvalError::NoExtractions => "NoExtractions",
            EvalError::WrongKind { .. } => "WrongTaskKind",
            EvalError::LengthMismatch(..) => "LengthMismatch",
            EvalError::Prepare(e) => e.code(),
            EvalError::Model(e) => e.code(),
            EvalError::Format(_) => "Format",
            EvalError::Io(_) => "IoError",
        }
    }
}

/// Mann-Whitney U statistic over `n_pos * n_neg`, ties given average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps average ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let avg2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    (sse / predictions.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extraction_rate: Option<f64>,
}

/// Reports for several tasks plus the macro average per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_rmse: Option<f64>,
}

impl EvalSummary {
    pub fn new(reports: Vec<EvalReport>) -> Self {
        let mean = |metric: &str| {
            let v: Vec<f64> = reports.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            macro_roc_auc: mean("roc_auc"),
            macro_rmse: mean("rmse"),
            reports,
        }
    }
}

fn expect_kind(task: &TaskRecord, kind: TaskKind) -> Result<(), EvalError> {
    if task.kind == kind {
        Ok(())
    } else {
        Err(EvalError::WrongKind {
            task_id: task.task_id.clone(),
            found: task.kind.as_str(),
        })
    }
}

/// `P(Yes)` from the first decoding step for every test-split sample, with labels.
pub fn classification_scores(
    task: &TaskRecord,
    p: &ModelParams,
    vocab: &Vocab,
    split_seed: u64,
) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    expect_kind(task, TaskKind::Classification)?;
    let data = prepare(std::slice::from_ref(task), vocab, split_seed)?;
    let (yes, no) = (vocab.yes_id(), vocab.no_id());
    let scores: Vec<f64> = data
        .test
        .par_iter()
        .map(|e| {
            let enc = encode(p, &data.structures[e.structure], &e.instruction)?;
            let (sy, sn) = score_yes_no(p, &enc, yes, no)?;
            Ok(yes_probability(sy, sn))
        })
        .collect::<Result<_, ModelError>>()?;
    let labels = data.test.iter().map(|e| e.label == Label::Positive).collect();
    Ok((scores, labels))
}

pub fn zero_shot_classify(
    task: &TaskRecord,
    p: &ModelParams,
    vocab: &Vocab,
    split_seed: u64,
) -> Result<EvalReport, EvalError> {
    let (scores, labels) = classification_scores(task, p, vocab, split_seed)?;
    Ok(EvalReport {
        task_id: task.task_id.clone(),
        metric: "roc_auc".into(),
        value: roc_auc(&scores, &labels)?,
        n_samples: scores.len(),
        extraction_rate: None,
    })
}

/// Decoded answer text for every test-split sample, with targets.
pub fn regression_answers(
    task: &TaskRecord,
    p: &ModelParams,
    vocab: &Vocab,
    split_seed: u64,
) -> Result<(Vec<String>, Vec<f64>), EvalError> {
    expect_kind(task, TaskKind::Regression)?;
    let data = prepare(std::slice::from_ref(task), vocab, split_seed)?;
    let answers: Vec<String> = data
        .test
        .par_iter()
        .map(|e| {
            let enc = encode(p, &data.structures[e.structure], &e.instruction)?;
            Ok(vocab.decode(&generate_greedy(p, &enc, MAX_ANSWER_TOKENS)?))
        })
        .collect::<Result<_, ModelError>>()?;
    let targets = data.test.iter().map(|e| e.label.value().unwrap_or(f64::NAN)).collect();
    Ok((answers, targets))
}

/// RMSE over answers containing a number; failures only lower the rate.
pub fn score_regression(task_id: &str, answers: &[String], targets: &[f64]) -> Result<EvalReport, EvalError> {
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for (a, &t) in answers.iter().zip(targets) {
        if let Some(x) = extract_number(a) {
            preds.push(x);
            truth.push(t);
        }
    }
    if preds.is_empty() {
        return Err(EvalError::NoExtractions);
    }
    Ok(EvalReport {
        task_id: task_id.to_string(),
        metric: "rmse".into(),
        value: rmse(&preds, &truth),
        n_samples: answers.len(),
        extraction_rate: Some(preds.len() as f64 / answers.len() as f64),
    })
}

pub fn zero_shot_regress(
    task: &TaskRecord,
    p: &ModelParams,
    vocab: &Vocab,
    split_seed: u64,
) -> Result<EvalReport, EvalError> {
    let (answers, targets) = regression_answers(task, p, vocab, split_seed)?;
    score_regression(&task.task_id, &answers, &targets)
}

pub fn evaluate(task: &TaskRecord, p: &ModelParams, vocab: &Vocab, split_seed: u64) -> Result<EvalReport, EvalError> {
    match task.kind {
        TaskKind::Classification => zero_shot_classify(task, p, vocab, split_seed),
        TaskKind::Regression => zero_shot_regress(task, p, vocab, split_seed),
    }
}

/// Encoder self-attention for one (graph, instruction) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// Atom symbols (suffixed with the node index) then instruction tokens.
    pub labels: Vec<String>,
    /// `maps[layer][head]` is a row-major `len x len` matrix.
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl AttentionDump {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn weight(&self, layer: usize, head: usize, q: usize, k: usize) -> f64 {
        self.maps[layer][head][q * self.len() + k]
    }
}

pub fn attention_dump(
    g: &MolGraph,
    instruction: &str,
    p: &ModelParams,
    vocab: &Vocab,
) -> Result<AttentionDump, EvalError> {
    let ids = vocab.encode(instruction);
    let s = GraphStructure::new(g.clone());
    let (_, maps) = encode_with_attention(p, &s, &ids)?;
    let mut labels: Vec<String> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{}{i}", a.symbol()))
        .collect();
    labels.extend(ids.iter().map(|&id| vocab.token(id).unwrap_or("<unk>").to_string()));
    let t = labels.len();
    let heads = p.config.n_heads;
    let maps = maps
        .into_iter()
        .map(|m| (0..heads).map(|h| m[h * t * t..(h + 1) * t * t].to_vec()).collect())
        .collect();
    Ok(AttentionDump { labels, maps })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn parse_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

#[derive(Serialize, Deserialize)]
struct DumpSidecar {
    labels: Vec<String>,
    n_graph: usize,
    layers: usize,
    heads: usize,
    files: Vec<String>,
}

/// Writes `layer{l}_head{h}.csv` files (header row and first column carry the
/// labels) and `labels.json` into `dir`.
pub fn export_attention(
    g: &MolGraph,
    instruction: &str,
    p: &ModelParams,
    vocab: &Vocab,
    dir: &Path,
) -> Result<AttentionDump, EvalError> {
    let dump = attention_dump(g, instruction, p, vocab)?;
    std::fs::create_dir_all(dir)?;
    let header: Vec<String> = dump.labels.iter().map(|l| csv_field(l)).collect();
    let mut files = Vec::new();
    for (l, layer) in dump.maps.iter().enumerate() {
        for (h, map) in layer.iter().enumerate() {
            let name = format!("layer{l}_head{h}.csv");
            let mut text = format!("query,{}\n", header.join(","));
            for (q, label) in header.iter().enumerate() {
                text.push_str(label);
                for k in 0..dump.len() {
                    // `{:e}` round-trips f64 exactly.
                    text.push_str(&format!(",{:e}", map[q * dump.len() + k]));
                }
                text.push('\n');
            }
            std::fs::write(dir.join(&name), text)?;
            files.push(name);
        }
    }
    let sidecar = DumpSidecar {
        labels: dump.labels.clone(),
        n_graph: g.n_nodes(),
        layers: dump.maps.len(),
        heads: p.config.n_heads,
        files,
    };
    std::fs::write(
        dir.join("labels.json"),
        serde_json::to_string_pretty(&sidecar).expect("serializable"),
    )?;
    Ok(dump)
}

pub fn load_attention(dir: &Path) -> Result<AttentionDump, EvalError> {
    let sidecar: DumpSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)
        .map_err(|e| EvalError::Format(e.to_string()))?;
    let t = sidecar.labels.len();
    let mut maps = vec![Vec::with_capacity(sidecar.heads); sidecar.layers];
    for (i, name) in sidecar.files.iter().enumerate() {
        let text = std::fs::read_to_string(dir.join(name))?;
        let mut lines = text.lines();
        let header = parse_csv_line(lines.next().unwrap_or_default());
        if header[1..] != sidecar.labels[..] {
            return Err(EvalError::Format(format!("{name}: header does not match labels")));
        }
        let mut map = Vec::with_capacity(t * t);
        for line in lines {
            let fields = parse_csv_line(line);
            for f in &fields[1..] {
                map.push(
                    f.parse::<f64>()
                        .map_err(|e| EvalError::Format(format!("{name}: {e}")))?,
                );
            }
        }
        if map.len() != t * t {
            return Err(EvalError::Format(format!(
                "{name}: expected {} cells, found {}",
                t * t,
                map.len()
            )));
        }
        maps[i / sidecar.heads].push(map);
    }
    Ok(AttentionDump {
        labels: sidecar.labels,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::ModelConfig;
    use crate::molgraph::parse_smiles;
    use crate::tasks::synth::{synth_tasks, CatalogConfig, TaskType};

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(roc_auc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(
            roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(roc_auc(&s, &[true; 4]), Err(EvalError::SingleClass)));
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(data in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            match roc_auc(&scores, &labels) {
                Ok(a) => prop_assert_eq!(a, brute_auc(&scores, &labels)),
                Err(_) => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
            }
        }

        #[test]
        fn negated_scores_complement(
            labels in prop::collection::vec(any::<bool>(), 2..50),
            seed in any::<u64>(),
        ) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mut scores: Vec<f64> = (0..labels.len()).map(|i| i as f64).collect();
            use rand::seq::SliceRandom;
            scores.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_identities() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let t = [1.0, 2.0, 3.0, 6.0];
        let mean = 3.0;
        let std = (t.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
        assert!((rmse(&[mean; 4], &t) - std).abs() < 1e-15);
    }

    #[test]
    fn failed_extractions_count_only_in_rate() {
        let answers = [
            "3".to_string(),
            "no idea".to_string(),
            "5.50".to_string(),
            "7".to_string(),
        ];
        let r = score_regression("t", &answers, &[3.0, 100.0, 5.0, 8.0]).unwrap();
        assert_eq!(r.extraction_rate, Some(0.75));
        assert!((r.value - ((0.25 + 1.0) / 3.0f64).sqrt()).abs() < 1e-15);
        assert!(matches!(
            score_regression("t", &["x".to_string()], &[1.0]),
            Err(EvalError::NoExtractions)
        ));
    }

    fn untrained(vocab: &Vocab) -> ModelParams {
        ModelParams::init(ModelConfig::small(vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn symmetric_model_scores_at_chance() {
        let c = CatalogConfig {
            n_molecules: 2000,
            trained: vec![TaskType::RingPresence],
            unseen: vec![],
        };
        let task = synth_tasks(&c, 4).eval.remove(0);
        let vocab = crate::train::build_vocab(std::slice::from_ref(&task)).unwrap();
        let mut p = untrained(&vocab);
        // Yes and No share one output row, so no sample is preferred.
        let yes = p.token_embedding.row(vocab.yes_id() as usize).to_vec();
        p.token_embedding.row_mut(vocab.no_id() as usize).copy_from_slice(&yes);
        let r = zero_shot_classify(&task, &p, &vocab, 0).unwrap();
        assert_eq!(r.n_samples, 200);
        assert!((r.value - 0.5).abs() <= 0.1, "{}", r.value);
    }

    #[test]
    fn single_class_and_wrong_kind_rejected() {
        let c = CatalogConfig {
            n_molecules: 20,
            trained: vec![TaskType::HeavyAtomsAtLeast(1), TaskType::HeavyAtomCount],
            unseen: vec![],
        };
        let corpus = synth_tasks(&c, 4);
        let vocab = crate::train::build_vocab(&corpus.eval).unwrap();
        let p = untrained(&vocab);
        assert!(matches!(
            zero_shot_classify(&corpus.eval[0], &p, &vocab, 0),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            zero_shot_regress(&corpus.eval[0], &p, &vocab, 0),
            Err(EvalError::WrongKind { .. })
        ));
    }

    #[test]
    fn attention_export_round_trips() {
        let vocab = Vocab::build(&["is there a ring, in \"this\" molecule"]).unwrap();
        let mut p = untrained(&vocab);
        p.randomize_bias_tables(1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let g = parse_smiles("c1ccccc1CC(=O)O").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dump = export_attention(&g, "Is there a ring, in \"this\" molecule?", &p, &vocab, dir.path()).unwrap();
        let n = g.n_nodes();
        for layer in &dump.maps {
            for map in layer {
                for q in 0..dump.len() {
                    let row = &map[q * dump.len()..(q + 1) * dump.len()];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    if q < n {
                        assert!(row[n..].iter().all(|&w| w < 1e-20));
                    }
                }
            }
        }
        assert_eq!(dump.labels[0], "C0");
        assert!(dump.labels.contains(&",".to_string()));
        assert_eq!(load_attention(dir.path()).unwrap(), dump);
    }
}
