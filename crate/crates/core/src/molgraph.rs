//! SMILES ingestion into a heavy-atom molecular graph.
//!
//! Each atom carries two feature dimensions (atomic number, chirality tag) and
//! each bond carries two (bond type, stereo). Hydrogens stay implicit, aromatic
//! bonds are kept as their own bond type, and bracket isotopes/charges/classes
//! are parsed and dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element symbols indexed by `atomic_number - 1`.
const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",
    "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce",
    "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir",
    "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm",
    "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc",
    "Lv", "Ts", "Og",
];

pub const MAX_ATOMIC_NUMBER: u8 = 118;

/// Returns the element symbol for an atomic number in `1..=118`.
pub fn element_symbol(atomic_number: u8) -> Option<&'static str> {
    ELEMENTS.get(usize::from(atomic_number).checked_sub(1)?).copied()
}

fn atomic_number_of(symbol: &str) -> Option<u8> {
    ELEMENTS.iter().position(|&s| s == symbol).map(|i| (i + 1) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chirality {
    None,
    Cw,
    Ccw,
    Other,
}

impl Chirality {
    pub const COUNT: usize = 4;

    fn slot(self) -> usize {
        match self {
            Chirality::None => 0,
            Chirality::Cw => 1,
            Chirality::Ccw => 2,
            Chirality::Other => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub const COUNT: usize = 4;

    fn slot(self) -> usize {
        match self {
            BondType::Single => 0,
            BondType::Double => 1,
            BondType::Triple => 2,
            BondType::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondStereo {
    None,
    Cis,
    Trans,
    Other,
}

impl BondStereo {
    pub const COUNT: usize = 4;

    fn slot(self) -> usize {
        match self {
            BondStereo::None => 0,
            BondStereo::Cis => 1,
            BondStereo::Trans => 2,
            BondStereo::Other => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomFeature {
    pub atomic_number: u8,
    pub chirality: Chirality,
}

impl AtomFeature {
    pub fn new(atomic_number: u8, chirality: Chirality) -> Self {
        Self {
            atomic_number,
            chirality,
        }
    }

    pub fn symbol(&self) -> &'static str {
        element_symbol(self.atomic_number).unwrap_or("?")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondFeature {
    pub bond_type: BondType,
    pub stereo: BondStereo,
}

impl BondFeature {
    pub const SINGLE: BondFeature = BondFeature {
        bond_type: BondType::Single,
        stereo: BondStereo::None,
    };

    pub fn new(bond_type: BondType, stereo: BondStereo) -> Self {
        Self { bond_type, stereo }
    }
}

/// Size of the flattened atom-feature embedding table.
pub const ATOM_VOCAB_SIZE: usize = MAX_ATOMIC_NUMBER as usize * Chirality::COUNT;
/// Size of the flattened bond-feature embedding table.
pub const BOND_VOCAB_SIZE: usize = BondType::COUNT * BondStereo::COUNT;

pub fn atom_vocab_index(a: AtomFeature) -> usize {
    debug_assert!((1..=MAX_ATOMIC_NUMBER).contains(&a.atomic_number));
    (usize::from(a.atomic_number) - 1) * Chirality::COUNT + a.chirality.slot()
}

pub fn bond_vocab_index(b: BondFeature) -> usize {
    b.bond_type.slot() * BondStereo::COUNT + b.stereo.slot()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub feat: BondFeature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolGraph {
    pub nodes: Vec<AtomFeature>,
    pub edges: Vec<Edge>,
    pub n_fragments: usize,
}

impl MolGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Applies a node relabeling: old node `i` becomes node `perm[i]`.
    /// Edges are re-normalized to `src < dst` and kept in their original order.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.nodes.len());
        let mut nodes = self.nodes.clone();
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old];
        }
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.src], perm[e.dst]);
                Edge {
                    src: a.min(b),
                    dst: a.max(b),
                    feat: e.feat,
                }
            })
            .collect();
        MolGraph {
            nodes,
            edges,
            n_fragments: self.n_fragments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    EmptyInput { offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("ring bond opened at byte {offset} is never closed")]
    UnclosedRingBond { offset: usize },
    #[error("unknown atom symbol at byte {offset}")]
    UnknownAtomSymbol { offset: usize },
    #[error("unexpected character at byte {offset}")]
    UnexpectedCharacter { offset: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom")]
    DanglingBond { offset: usize },
    #[error("invalid ring bond at byte {offset}")]
    InvalidRingBond { offset: usize },
}

impl SmilesError {
    pub fn offset(&self) -> usize {
        match *self {
            SmilesError::EmptyInput { offset }
            | SmilesError::UnbalancedParenthesis { offset }
            | SmilesError::UnclosedRingBond { offset }
            | SmilesError::UnknownAtomSymbol { offset }
            | SmilesError::UnexpectedCharacter { offset }
            | SmilesError::DanglingBond { offset }
            | SmilesError::InvalidRingBond { offset } => offset,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SmilesError::EmptyInput { .. } => "EmptyInput",
            SmilesError::UnbalancedParenthesis { .. } => "UnbalancedParenthesis",
            SmilesError::UnclosedRingBond { .. } => "UnclosedRingBond",
            SmilesError::UnknownAtomSymbol { .. } => "UnknownAtomSymbol",
            SmilesError::UnexpectedCharacter { .. } => "UnexpectedCharacter",
            SmilesError::DanglingBond { .. } => "DanglingBond",
            SmilesError::InvalidRingBond { .. } => "InvalidRingBond",
        }
    }
}

/// An explicit bond symbol plus the byte offset it was read at.
#[derive(Debug, Clone, Copy)]
struct PendingBond {
    feat: BondFeature,
    offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct OpenRing {
    atom: usize,
    bond: Option<PendingBond>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    nodes: Vec<AtomFeature>,
    aromatic: Vec<bool>,
    edges: Vec<Edge>,
    rings: [Option<OpenRing>; 100],
    branch_stack: Vec<(usize, usize)>,
    prev: Option<usize>,
    pending: Option<PendingBond>,
    n_fragments: usize,
}

pub fn parse_smiles(text: &str) -> Result<MolGraph, SmilesError> {
    if text.is_empty() {
        return Err(SmilesError::EmptyInput { offset: 0 });
    }
    Parser {
        bytes: text.as_bytes(),
        pos: 0,
        nodes: Vec::new(),
        aromatic: Vec::new(),
        edges: Vec::new(),
        rings: [None; 100],
        branch_stack: Vec::new(),
        prev: None,
        pending: None,
        n_fragments: 1,
    }
    .run()
}

impl Parser<'_> {
    fn run(mut self) -> Result<MolGraph, SmilesError> {
        while self.pos < self.bytes.len() {
            let offset = self.pos;
            match self.bytes[offset] {
                b'(' => {
                    let Some(prev) = self.prev else {
                        return Err(SmilesError::UnbalancedParenthesis { offset });
                    };
                    if self.pending.is_some() {
                        return Err(SmilesError::UnexpectedCharacter { offset });
                    }
                    self.branch_stack.push((prev, offset));
                    self.pos += 1;
                    if self.peek() == Some(b')') {
                        return Err(SmilesError::UnexpectedCharacter { offset: self.pos });
                    }
                }
                b')' => {
                    if let Some(p) = self.pending {
                        return Err(SmilesError::DanglingBond { offset: p.offset });
                    }
                    let Some((atom, _)) = self.branch_stack.pop() else {
                        return Err(SmilesError::UnbalancedParenthesis { offset });
                    };
                    self.prev = Some(atom);
                    self.pos += 1;
                }
                b'.' => {
                    if let Some(p) = self.pending {
                        return Err(SmilesError::DanglingBond { offset: p.offset });
                    }
                    if let Some(&(_, open)) = self.branch_stack.last() {
                        return Err(SmilesError::UnbalancedParenthesis { offset: open });
                    }
                    if self.prev.is_none() {
                        return Err(SmilesError::UnexpectedCharacter { offset });
                    }
                    self.prev = None;
                    self.n_fragments += 1;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.pending.is_some() || self.prev.is_none() {
                        return Err(SmilesError::UnexpectedCharacter { offset });
                    }
                    let feat = match self.bytes[offset] {
                        b'-' => BondFeature::SINGLE,
                        b'=' => BondFeature::new(BondType::Double, BondStereo::None),
                        b'#' => BondFeature::new(BondType::Triple, BondStereo::None),
                        b':' => BondFeature::new(BondType::Aromatic, BondStereo::None),
                        _ => BondFeature::new(BondType::Single, BondStereo::Other),
                    };
                    self.pending = Some(PendingBond { feat, offset });
                    self.pos += 1;
                }
                b'0'..=b'9' => {
                    let label = usize::from(self.bytes[offset] - b'0');
                    self.pos += 1;
                    self.ring_bond(label, offset)?;
                }
                b'%' => {
                    let digits = self.bytes.get(offset + 1..offset + 3);
                    let label = match digits {
                        Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                            usize::from(a - b'0') * 10 + usize::from(b - b'0')
                        }
                        _ => return Err(SmilesError::InvalidRingBond { offset }),
                    };
                    self.pos += 3;
                    self.ring_bond(label, offset)?;
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom.0, atom.1);
                }
                _ => {
                    let (feat, aromatic) = self.organic_atom()?;
                    self.add_atom(feat, aromatic);
                }
            }
        }
        if let Some(p) = self.pending {
            return Err(SmilesError::DanglingBond { offset: p.offset });
        }
        if let Some(&(_, open)) = self.branch_stack.first() {
            return Err(SmilesError::UnbalancedParenthesis { offset: open });
        }
        if let Some(open) = self.rings.iter().flatten().map(|r| r.offset).min() {
            return Err(SmilesError::UnclosedRingBond { offset: open });
        }
        if self.nodes.is_empty() {
            return Err(SmilesError::EmptyInput { offset: 0 });
        }
        Ok(MolGraph {
            nodes: self.nodes,
            edges: self.edges,
            n_fragments: self.n_fragments,
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn implicit_bond(&self, a: usize, b: usize) -> BondFeature {
        if self.aromatic[a] && self.aromatic[b] {
            BondFeature::new(BondType::Aromatic, BondStereo::None)
        } else {
            BondFeature::SINGLE
        }
    }

    fn add_atom(&mut self, feat: AtomFeature, aromatic: bool) {
        let idx = self.nodes.len();
        self.nodes.push(feat);
        self.aromatic.push(aromatic);
        if let Some(prev) = self.prev {
            let bond = match self.pending.take() {
                Some(p) => p.feat,
                None => self.implicit_bond(prev, idx),
            };
            // prev < idx always holds for chain bonds
            self.edges.push(Edge {
                src: prev,
                dst: idx,
                feat: bond,
            });
        }
        self.prev = Some(idx);
    }

    fn ring_bond(&mut self, label: usize, offset: usize) -> Result<(), SmilesError> {
        let Some(atom) = self.prev else {
            return Err(SmilesError::UnexpectedCharacter { offset });
        };
        let bond = self.pending.take();
        match self.rings[label].take() {
            None => {
                self.rings[label] = Some(OpenRing { atom, bond, offset });
            }
            Some(open) => {
                let feat = match (open.bond, bond) {
                    (Some(a), Some(b)) if a.feat != b.feat => {
                        return Err(SmilesError::InvalidRingBond { offset });
                    }
                    (Some(a), _) => a.feat,
                    (None, Some(b)) => b.feat,
                    (None, None) => self.implicit_bond(open.atom, atom),
                };
                let (src, dst) = (open.atom.min(atom), open.atom.max(atom));
                if src == dst || self.edges.iter().any(|e| e.src == src && e.dst == dst) {
                    return Err(SmilesError::InvalidRingBond { offset });
                }
                self.edges.push(Edge { src, dst, feat });
            }
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<(AtomFeature, bool), SmilesError> {
        let offset = self.pos;
        let c = self.bytes[offset];
        let next = self.bytes.get(offset + 1).copied();
        let (z, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => (17, false, 2),
            (b'B', Some(b'r')) => (35, false, 2),
            (b'B', _) => (5, false, 1),
            (b'C', _) => (6, false, 1),
            (b'N', _) => (7, false, 1),
            (b'O', _) => (8, false, 1),
            (b'P', _) => (15, false, 1),
            (b'S', _) => (16, false, 1),
            (b'F', _) => (9, false, 1),
            (b'I', _) => (53, false, 1),
            (b'b', _) => (5, true, 1),
            (b'c', _) => (6, true, 1),
            (b'n', _) => (7, true, 1),
            (b'o', _) => (8, true, 1),
            (b'p', _) => (15, true, 1),
            (b's', _) => (16, true, 1),
            (c, _) if c.is_ascii_alphabetic() || c == b'*' => return Err(SmilesError::UnknownAtomSymbol { offset }),
            _ => return Err(SmilesError::UnexpectedCharacter { offset }),
        };
        self.pos += len;
        Ok((AtomFeature::new(z, Chirality::None), aromatic))
    }

    /// `[<isotope?><symbol><chiral?><H-count?><charge?><:class?>]`
    fn bracket_atom(&mut self) -> Result<(AtomFeature, bool), SmilesError> {
        let open = self.pos;
        self.pos += 1;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }

        let (z, aromatic) = self.bracket_symbol()?;

        let mut chirality = Chirality::None;
        if self.peek() == Some(b'@') {
            self.pos += 1;
            chirality = Chirality::Ccw;
            if self.peek() == Some(b'@') {
                self.pos += 1;
                chirality = Chirality::Cw;
            } else if [b"TH", b"AL", b"SP", b"TB", b"OH"]
                .iter()
                .any(|class| self.bytes[self.pos..].starts_with(*class))
            {
                // @TH1, @AL2, @SP3, @TB5, @OH12 ...
                self.pos += 2;
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
                chirality = Chirality::Other;
            }
        }

        if self.peek() == Some(b'H') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }

        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            while self.peek().is_some_and(|d| d.is_ascii_digit() || d == c) {
                self.pos += 1;
            }
        }

        if self.peek() == Some(b':') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }

        match self.peek() {
            Some(b']') => {
                self.pos += 1;
                Ok((AtomFeature::new(z, chirality), aromatic))
            }
            Some(_) => Err(SmilesError::UnexpectedCharacter { offset: self.pos }),
            None => Err(SmilesError::UnexpectedCharacter { offset: open }),
        }
    }

    fn bracket_symbol(&mut self) -> Result<(u8, bool), SmilesError> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        for aromatic in ["se", "as"] {
            if rest.starts_with(aromatic.as_bytes()) {
                self.pos += 2;
                let z = if aromatic == "se" { 34 } else { 33 };
                return Ok((z, true));
            }
        }
        match rest.first() {
            Some(&c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's')) => {
                self.pos += 1;
                let z = match c {
                    b'b' => 5,
                    b'c' => 6,
                    b'n' => 7,
                    b'o' => 8,
                    b'p' => 15,
                    _ => 16,
                };
                Ok((z, true))
            }
            Some(c) if c.is_ascii_uppercase() => {
                // Prefer the two-letter symbol when it names an element.
                if let Some(&d) = rest.get(1).filter(|d| d.is_ascii_lowercase()) {
                    let two = [*c, d];
                    let two = std::str::from_utf8(&two).expect("ascii");
                    if let Some(z) = atomic_number_of(two) {
                        self.pos += 2;
                        return Ok((z, false));
                    }
                }
                let one = std::str::from_utf8(&rest[..1]).expect("ascii");
                match atomic_number_of(one) {
                    Some(z) => {
                        self.pos += 1;
                        Ok((z, false))
                    }
                    None => Err(SmilesError::UnknownAtomSymbol { offset: start }),
                }
            }
            Some(c) if c.is_ascii_alphabetic() || *c == b'*' => Err(SmilesError::UnknownAtomSymbol { offset: start }),
            Some(_) => Err(SmilesError::UnexpectedCharacter { offset: start }),
            None => Err(SmilesError::UnexpectedCharacter { offset: start - 1 }),
        }
    }
}
