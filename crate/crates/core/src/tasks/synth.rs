//! Synthetic molecule pool and property tasks whose labels come from graph
//! oracles, plus an independent text-level recomputation used to validate
//! loaded datasets.

use std::fmt;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Label, Sample, TaskKind, TaskRecord};
use crate::molgraph::{parse_smiles, BondType, MolGraph};
use crate::structure::connected_components;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskType {
    RingPresence,
    AromaticPresence,
    HalogenPresence,
    HeavyAtomsAtLeast(u32),
    MultiFragment,
    HeavyAtomCount,
    RingCount,
    HalogenCount,
}

impl TaskType {
    pub fn name(&self) -> String {
        match self {
            TaskType::RingPresence => "ring_presence".into(),
            TaskType::AromaticPresence => "aromatic_presence".into(),
            TaskType::HalogenPresence => "halogen_presence".into(),
            TaskType::HeavyAtomsAtLeast(k) => format!("heavy_atoms_ge_{k}"),
            TaskType::MultiFragment => "multi_fragment".into(),
            TaskType::HeavyAtomCount => "heavy_atom_count".into(),
            TaskType::RingCount => "ring_count".into(),
            TaskType::HalogenCount => "halogen_count".into(),
        }
    }

    pub fn from_name(name: &str) -> Option<TaskType> {
        Some(match name {
            "ring_presence" => TaskType::RingPresence,
            "aromatic_presence" => TaskType::AromaticPresence,
            "halogen_presence" => TaskType::HalogenPresence,
            "multi_fragment" => TaskType::MultiFragment,
            "heavy_atom_count" => TaskType::HeavyAtomCount,
            "ring_count" => TaskType::RingCount,
            "halogen_count" => TaskType::HalogenCount,
            other => TaskType::HeavyAtomsAtLeast(other.strip_prefix("heavy_atoms_ge_")?.parse().ok()?),
        })
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskType::HeavyAtomCount | TaskType::RingCount | TaskType::HalogenCount => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }

    /// Label from the parsed graph.
    pub fn label(&self, g: &MolGraph) -> Label {
        let p = GraphProperties::of(g);
        match *self {
            TaskType::RingPresence => Label::from_bool(p.rings > 0),
            TaskType::AromaticPresence => Label::from_bool(p.aromatic_atoms > 0),
            TaskType::HalogenPresence => Label::from_bool(p.halogens > 0),
            TaskType::HeavyAtomsAtLeast(k) => Label::from_bool(p.heavy_atoms >= k as usize),
            TaskType::MultiFragment => Label::from_bool(p.fragments > 1),
            TaskType::HeavyAtomCount => Label::Value(p.heavy_atoms as f64),
            TaskType::RingCount => Label::Value(p.rings as f64),
            TaskType::HalogenCount => Label::Value(p.halogens as f64),
        }
    }

    /// Instruction templates: three used for pretraining and one held out.
    fn templates(&self) -> [&'static str; 4] {
        match self {
            TaskType::RingPresence => [
                "Does the molecule contain a ring?",
                "Is there a ring in this molecule?",
                "Answer yes if the molecule has a ring.",
                "Can a ring be found in the molecule structure?",
            ],
            TaskType::AromaticPresence => [
                "Does the molecule contain an aromatic atom?",
                "Is any atom of this molecule aromatic?",
                "Answer yes if the molecule has aromatic atoms.",
                "Can an aromatic atom be found in the molecule structure?",
            ],
            TaskType::HalogenPresence => [
                "Does the molecule contain a halogen atom?",
                "Is any atom of this molecule a halogen?",
                "Answer yes if the molecule has halogen atoms.",
                "Can a halogen atom be found in the molecule structure?",
            ],
            TaskType::HeavyAtomsAtLeast(_) => [
                "Does the molecule have at least {k} heavy atoms?",
                "Is the number of heavy atoms in this molecule at least {k}?",
                "Answer yes if the molecule has {k} or more heavy atoms.",
                "Can at least {k} heavy atoms be found in the molecule structure?",
            ],
            TaskType::MultiFragment => [
                "Does the molecule contain more than one fragment?",
                "Is this molecule made of several disconnected fragments?",
                "Answer yes if the molecule has more than one fragment.",
                "Can more than one fragment be found in the molecule structure?",
            ],
            TaskType::HeavyAtomCount => [
                "How many heavy atoms does the molecule have?",
                "What is the number of heavy atoms in this molecule?",
                "Count the heavy atoms of the molecule.",
                "How many heavy atoms can be found in the molecule structure?",
            ],
            TaskType::RingCount => [
                "How many rings does the molecule have?",
                "What is the number of rings in this molecule?",
                "Count the rings of the molecule.",
                "How many rings can be found in the molecule structure?",
            ],
            TaskType::HalogenCount => [
                "How many halogen atoms does the molecule have?",
                "What is the number of halogen atoms in this molecule?",
                "Count the halogen atoms of the molecule.",
                "How many halogen atoms can be found in the molecule structure?",
            ],
        }
    }

    /// Phrasing `i` in `0..3` is a training phrasing; `3` is held out.
    pub fn instruction(&self, i: usize) -> String {
        let t = self.templates()[i];
        match self {
            TaskType::HeavyAtomsAtLeast(k) => t.replace("{k}", &k.to_string()),
            _ => t.to_string(),
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub const TRAIN_PHRASINGS: usize = 3;
pub const HELDOUT_PHRASING: usize = 3;

/// Graph-level counts behind every synthetic label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphProperties {
    pub heavy_atoms: usize,
    /// Cyclomatic number `|E| - |V| + components`.
    pub rings: usize,
    pub aromatic_atoms: usize,
    pub halogens: usize,
    pub fragments: usize,
}

pub fn is_halogen(z: u8) -> bool {
    matches!(z, 9 | 17 | 35 | 53)
}

impl GraphProperties {
    pub fn of(g: &MolGraph) -> Self {
        let components = connected_components(g);
        let mut aromatic = vec![false; g.n_nodes()];
        for e in g.edges.iter().filter(|e| e.feat.bond_type == BondType::Aromatic) {
            aromatic[e.src] = true;
            aromatic[e.dst] = true;
        }
        Self {
            heavy_atoms: g.n_nodes(),
            rings: g.edges.len() + components - g.n_nodes(),
            aromatic_atoms: aromatic.iter().filter(|&&a| a).count(),
            halogens: g.nodes.iter().filter(|a| is_halogen(a.atomic_number)).count(),
            fragments: components,
        }
    }

    /// Same counts read off the SMILES text: atom tokens, ring-closure
    /// digits, lowercase symbols and dots.
    pub fn from_text(smiles: &str) -> Self {
        static TOKEN: OnceLock<Regex> = OnceLock::new();
        let re = TOKEN.get_or_init(|| {
            Regex::new(r"\[(?:\d+)?([A-Za-z][a-z]?)[^\]]*\]|(Cl|Br|[BCNOPSFI]|[bcnops])|%(\d\d)|(\d)|(\.)")
                .expect("valid pattern")
        });
        let mut p = GraphProperties {
            heavy_atoms: 0,
            rings: 0,
            aromatic_atoms: 0,
            halogens: 0,
            fragments: 1,
        };
        let mut closures = 0;
        for cap in re.captures_iter(smiles) {
            let sym = cap.get(1).or_else(|| cap.get(2)).map(|m| m.as_str());
            if let Some(sym) = sym {
                p.heavy_atoms += 1;
                if sym.starts_with(|c: char| c.is_ascii_lowercase()) {
                    p.aromatic_atoms += 1;
                }
                if matches!(sym, "F" | "Cl" | "Br" | "I") {
                    p.halogens += 1;
                }
            } else if cap.get(3).is_some() || cap.get(4).is_some() {
                closures += 1;
            } else {
                p.fragments += 1;
            }
        }
        p.rings = closures / 2;
        p
    }
}

const CHAIN_ATOMS: [&str; 7] = ["C", "C", "C", "C", "C", "N", "O"];
const HALOGENS: [&str; 4] = ["F", "Cl", "Br", "I"];
const COUNTERIONS: [&str; 6] = ["[Na+]", "[K+]", "O", "CO", "N", "[NH4+]"];

fn ring_unit(rng: &mut ChaCha8Rng, label: u8) -> (String, usize) {
    let l = label.to_string();
    if rng.random_bool(0.5) {
        let s = if rng.random_bool(0.7) {
            format!("c{l}ccccc{l}")
        } else {
            format!("c{l}ccncc{l}")
        };
        (s, 6)
    } else {
        let size = rng.random_range(3..=6);
        let mut s = format!("C{l}");
        for _ in 1..size - 1 {
            s.push_str(if rng.random_bool(0.15) { "N" } else { "C" });
        }
        s.push_str(&format!("C{l}"));
        (s, size)
    }
}

/// One random molecule with about 2 to 22 heavy atoms, rings and halogens present
/// about half of the time, and an occasional counterion fragment.
pub fn random_smiles(rng: &mut ChaCha8Rng) -> String {
    let target: usize = if rng.random_bool(0.3) {
        rng.random_range(2..=4)
    } else {
        rng.random_range(5..=22)
    };
    let n_rings = if rng.random_bool(if target < 5 { 0.25 } else { 0.5 }) {
        if rng.random_bool(0.25) {
            2
        } else {
            1
        }
    } else {
        0
    };
    let n_halogens = if rng.random_bool(0.45) {
        rng.random_range(1..=3)
    } else {
        0
    };

    let mut units: Vec<(String, usize, bool)> = Vec::new(); // text, atoms, attachable carbon
    let mut atoms = 0;
    for r in 0..n_rings {
        let (s, n) = ring_unit(rng, r as u8 + 1);
        atoms += n;
        units.push((s, n, false));
    }
    let chain = target.saturating_sub(atoms + n_halogens).max(1);
    for _ in 0..chain {
        let a = *CHAIN_ATOMS.choose(rng).expect("non-empty");
        units.push((a.to_string(), 1, a == "C"));
    }
    // Keep a ring's position random but never split another ring.
    for i in (1..units.len()).rev() {
        let j = rng.random_range(0..=i);
        units.swap(i, j);
    }
    let carbons: Vec<usize> = (0..units.len()).filter(|&i| units[i].2).collect();
    let mut branches = vec![String::new(); units.len()];
    let mut lead = String::new();
    for _ in 0..n_halogens {
        let x = *HALOGENS.choose(rng).expect("non-empty");
        match carbons.choose(rng) {
            Some(&c) if branches[c].len() < 6 => branches[c].push_str(&format!("({x})")),
            _ if lead.is_empty() => lead.push_str(x),
            _ => {
                units.push((x.to_string(), 1, false));
                branches.push(String::new());
            }
        }
    }

    let mut s = lead;
    for (i, (text, _, carbon)) in units.iter().enumerate() {
        let prev_carbon = i > 0 && units[i - 1].2 && branches[i - 1].is_empty();
        if *carbon && prev_carbon && rng.random_bool(0.12) {
            s.push('=');
        }
        s.push_str(text);
        s.push_str(&branches[i]);
    }
    if rng.random_bool(0.25) {
        s.push('.');
        s.push_str(COUNTERIONS.choose(rng).expect("non-empty"));
    }
    s
}

pub fn molecule_pool(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_smiles(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub n_molecules: usize,
    /// Types pretrained under three phrasings and evaluated under a fourth.
    pub trained: Vec<TaskType>,
    /// Types never seen in pretraining, evaluated under their first phrasing.
    pub unseen: Vec<TaskType>,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_molecules: 600,
            trained: vec![
                TaskType::RingPresence,
                TaskType::AromaticPresence,
                TaskType::HalogenPresence,
                TaskType::HeavyAtomsAtLeast(5),
                TaskType::HeavyAtomsAtLeast(15),
                TaskType::MultiFragment,
                TaskType::HeavyAtomCount,
            ],
            unseen: vec![TaskType::HeavyAtomsAtLeast(10)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pretrain: Vec<TaskRecord>,
    pub eval: Vec<TaskRecord>,
}

/// Task ids are `<type>@p<i>` for pretraining phrasings, `<type>@heldout` for
/// the held-out phrasing and `<type>@unseen` for unseen types. Every record
/// lists the whole pool in pool order, so one index split separates training
/// molecules from test molecules across all records.
pub fn synth_tasks(config: &CatalogConfig, pool_seed: u64) -> SynthCorpus {
    let pool = molecule_pool(config.n_molecules, pool_seed);
    let graphs: Vec<MolGraph> = pool
        .iter()
        .map(|s| parse_smiles(s).expect("generator emits valid SMILES"))
        .collect();
    let record = |t: TaskType, suffix: String, phrasing: usize| TaskRecord {
        task_id: format!("{}@{suffix}", t.name()),
        kind: t.kind(),
        instruction: t.instruction(phrasing),
        samples: pool
            .iter()
            .zip(&graphs)
            .map(|(s, g)| Sample {
                smiles: s.clone(),
                label: t.label(g),
            })
            .collect(),
    };
    let mut pretrain = Vec::new();
    let mut eval = Vec::new();
    for &t in &config.trained {
        for i in 0..TRAIN_PHRASINGS {
            pretrain.push(record(t, format!("p{i}"), i));
        }
        eval.push(record(t, "heldout".into(), HELDOUT_PHRASING));
    }
    for &t in &config.unseen {
        eval.push(record(t, "unseen".into(), 0));
    }
    SynthCorpus { pretrain, eval }
}

/// Task type encoded in a synthetic task id.
pub fn task_type_of(task_id: &str) -> Option<TaskType> {
    TaskType::from_name(task_id.split('@').next()?)
}

#[derive(Debug, Error, PartialEq)]
#[error("task {task_id}: sample {index} ({smiles}) is labeled {stored:?}, recomputed {expected:?}")]
pub struct LabelMismatch {
    pub task_id: String,
    pub index: usize,
    pub smiles: String,
    pub stored: Label,
    pub expected: Label,
}

fn text_label(t: TaskType, p: &GraphProperties) -> Label {
    match t {
        TaskType::RingPresence => Label::from_bool(p.rings > 0),
        TaskType::AromaticPresence => Label::from_bool(p.aromatic_atoms > 0),
        TaskType::HalogenPresence => Label::from_bool(p.halogens > 0),
        TaskType::HeavyAtomsAtLeast(k) => Label::from_bool(p.heavy_atoms >= k as usize),
        TaskType::MultiFragment => Label::from_bool(p.fragments > 1),
        TaskType::HeavyAtomCount => Label::Value(p.heavy_atoms as f64),
        TaskType::RingCount => Label::Value(p.rings as f64),
        TaskType::HalogenCount => Label::Value(p.halogens as f64),
    }
}

/// Recomputes every label of every synthetic task from the SMILES text.
/// Records whose id names no synthetic type are skipped.
pub fn verify_labels(tasks: &[TaskRecord]) -> Result<(), LabelMismatch> {
    for task in tasks {
        let Some(t) = task_type_of(&task.task_id) else {
            continue;
        };
        for (index, s) in task.samples.iter().enumerate() {
            let expected = text_label(t, &GraphProperties::from_text(&s.smiles));
            if expected != s.label {
                return Err(LabelMismatch {
                    task_id: task.task_id.clone(),
                    index,
                    smiles: s.smiles.clone(),
                    stored: s.label,
                    expected,
                });
            }
        }
    }
    Ok(())
}
