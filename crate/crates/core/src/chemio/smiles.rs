//! SMILES reader for the organic subset plus bracket atoms.

use std::collections::BTreeMap;

use super::elements::{self, ElementInfo};
use super::graph::{
    AtomFeatures, BondFeatures, BondStereo, BondType, Chirality, MolecularGraph,
};
use super::ChemError;

#[derive(Debug, Clone)]
struct RawAtom {
    info: &'static ElementInfo,
    aromatic: bool,
    bracket: bool,
    isotope: Option<u32>,
    hydrogens: u8,
    charge: i8,
    chirality: Chirality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy)]
struct RawBond {
    a: usize,
    b: usize,
    kind: BondType,
    stereo: BondStereo,
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    atoms: Vec<RawAtom>,
    bonds: Vec<RawBond>,
    branches: Vec<usize>,
    rings: BTreeMap<u32, (usize, Option<BondSymbol>, usize)>,
    prev: Option<usize>,
    pending: Option<(BondSymbol, usize)>,
    branch_just_opened: bool,
}

fn syntax(position: usize, message: impl Into<String>) -> ChemError {
    ChemError::Syntax {
        position,
        message: message.into(),
    }
}

/// Parses a SMILES string into a featurised molecular graph.
///
/// Atom order follows the order atoms appear in the string; bonds are
/// listed in the order they are closed.
pub fn parse_smiles(smiles: &str) -> Result<MolecularGraph, ChemError> {
    let trimmed = smiles.trim();
    if trimmed.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    let mut p = Parser {
        chars: trimmed.chars().collect(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        branches: Vec::new(),
        rings: BTreeMap::new(),
        prev: None,
        pending: None,
        branch_just_opened: false,
    };
    p.run()?;
    build_graph(p.atoms, p.bonds)
}

impl Parser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn run(&mut self) -> Result<(), ChemError> {
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                '(' => {
                    if self.prev.is_none() {
                        return Err(syntax(at, "branch opened without a preceding atom"));
                    }
                    if self.pending.is_some() {
                        return Err(syntax(at, "bond symbol before branch"));
                    }
                    self.branches.push(self.prev.unwrap());
                    self.branch_just_opened = true;
                    self.pos += 1;
                }
                ')' => {
                    if self.branch_just_opened {
                        return Err(syntax(at, "empty branch"));
                    }
                    if let Some((_, p)) = self.pending {
                        return Err(syntax(p, "dangling bond"));
                    }
                    let top = self
                        .branches
                        .pop()
                        .ok_or_else(|| syntax(at, "unbalanced ')'"))?;
                    self.prev = Some(top);
                    self.pos += 1;
                }
                '-' | '=' | '#' | ':' | '/' | '\\' => {
                    if self.prev.is_none() {
                        return Err(syntax(at, "bond without a preceding atom"));
                    }
                    if self.pending.is_some() {
                        return Err(syntax(at, "consecutive bond symbols"));
                    }
                    let sym = match c {
                        '-' => BondSymbol::Single,
                        '=' => BondSymbol::Double,
                        '#' => BondSymbol::Triple,
                        ':' => BondSymbol::Aromatic,
                        '/' => BondSymbol::Up,
                        _ => BondSymbol::Down,
                    };
                    self.pending = Some((sym, at));
                    self.pos += 1;
                }
                '.' => {
                    if let Some((_, p)) = self.pending {
                        return Err(syntax(p, "dangling bond"));
                    }
                    if self.prev.is_none() {
                        return Err(syntax(at, "'.' without a preceding atom"));
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                '0'..='9' | '%' => self.ring_closure()?,
                '[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, at)?;
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, at)?;
                }
            }
        }
        if let Some((_, p)) = self.pending {
            return Err(syntax(p, "dangling bond"));
        }
        if !self.branches.is_empty() {
            return Err(syntax(self.chars.len(), "unbalanced '('"));
        }
        if let Some((label, &(_, _, p))) = self.rings.iter().next() {
            return Err(syntax(p, format!("unclosed ring bond {label}")));
        }
        if self.atoms.is_empty() {
            return Err(syntax(0, "no atoms"));
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<RawAtom, ChemError> {
        let at = self.pos;
        let c = self.peek().unwrap();
        let (symbol, aromatic, width) = match (c, self.peek_at(1)) {
            ('C', Some('l')) => ("Cl", false, 2),
            ('B', Some('r')) => ("Br", false, 2),
            ('B', _) => ("B", false, 1),
            ('C', _) => ("C", false, 1),
            ('N', _) => ("N", false, 1),
            ('O', _) => ("O", false, 1),
            ('P', _) => ("P", false, 1),
            ('S', _) => ("S", false, 1),
            ('F', _) => ("F", false, 1),
            ('I', _) => ("I", false, 1),
            ('b', _) => ("B", true, 1),
            ('c', _) => ("C", true, 1),
            ('n', _) => ("N", true, 1),
            ('o', _) => ("O", true, 1),
            ('p', _) => ("P", true, 1),
            ('s', _) => ("S", true, 1),
            _ => return Err(syntax(at, format!("unexpected character '{c}'"))),
        };
        self.pos += width;
        Ok(RawAtom {
            info: elements::lookup(symbol).expect("organic subset is in the table"),
            aromatic,
            bracket: false,
            isotope: None,
            hydrogens: 0,
            charge: 0,
            chirality: Chirality::Unspecified,
        })
    }

    fn digits(&mut self) -> Option<u32> {
        let start = self.pos;
        while matches!(self.peek(), Some('0'..='9')) {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            self.chars[start..self.pos].iter().collect::<String>().parse().ok()
        }
    }

    fn bracket_atom(&mut self) -> Result<RawAtom, ChemError> {
        let open = self.pos;
        self.pos += 1;
        let isotope = self.digits();

        let sym_at = self.pos;
        let first = self
            .peek()
            .ok_or_else(|| syntax(open, "unterminated bracket atom"))?;
        let (symbol, aromatic) = if first.is_ascii_uppercase() {
            let two: Option<String> = self
                .peek_at(1)
                .filter(char::is_ascii_lowercase)
                .map(|l| format!("{first}{l}"));
            match two.filter(|s| elements::lookup(s).is_some()) {
                Some(s) => {
                    self.pos += 2;
                    (s, false)
                }
                None => {
                    self.pos += 1;
                    (first.to_string(), false)
                }
            }
        } else if first.is_ascii_lowercase() {
            let two: String = [Some(first), self.peek_at(1)].into_iter().flatten().collect();
            if two == "se" || two == "as" || two == "te" {
                self.pos += 2;
                (capitalize(&two), true)
            } else if matches!(first, 'b' | 'c' | 'n' | 'o' | 'p' | 's') {
                self.pos += 1;
                (first.to_ascii_uppercase().to_string(), true)
            } else {
                return Err(syntax(sym_at, format!("unknown aromatic symbol '{first}'")));
            }
        } else {
            return Err(syntax(sym_at, "expected element symbol"));
        };
        let info = elements::lookup(&symbol)
            .ok_or_else(|| syntax(sym_at, format!("unknown element symbol '{symbol}'")))?;

        let mut chirality = Chirality::Unspecified;
        if self.peek() == Some('@') {
            self.pos += 1;
            if self.peek() == Some('@') {
                self.pos += 1;
                chirality = Chirality::Clockwise;
            } else if matches!(self.peek(), Some('T' | 'A' | 'S' | 'O'))
                && matches!(self.peek_at(1), Some('H' | 'L' | 'P' | 'B'))
            {
                self.pos += 2;
                self.digits();
                chirality = Chirality::Other;
            } else {
                chirality = Chirality::CounterClockwise;
            }
        }

        let mut hydrogens = 0u8;
        if self.peek() == Some('H') {
            self.pos += 1;
            hydrogens = self.digits().map_or(1, |n| n.min(9) as u8);
        }

        let mut charge: i32 = 0;
        if let Some(sign @ ('+' | '-')) = self.peek() {
            let unit = if sign == '+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.digits() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }

        if self.peek() == Some(':') {
            self.pos += 1;
            if self.digits().is_none() {
                return Err(syntax(self.pos, "atom class requires digits"));
            }
        }
        if self.peek() != Some(']') {
            return Err(syntax(self.pos, "expected ']'"));
        }
        self.pos += 1;
        Ok(RawAtom {
            info,
            aromatic,
            bracket: true,
            isotope,
            hydrogens,
            charge: charge.clamp(-9, 9) as i8,
            chirality,
        })
    }

    fn add_atom(&mut self, atom: RawAtom, at: usize) -> Result<(), ChemError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(prev) = self.prev {
            let sym = self.pending.take().map(|(s, _)| s);
            self.add_bond(prev, idx, sym, at)?;
        }
        self.prev = Some(idx);
        self.branch_just_opened = false;
        Ok(())
    }

    fn add_bond(&mut self, a: usize, b: usize, sym: Option<BondSymbol>, at: usize) -> Result<(), ChemError> {
        if a == b {
            return Err(syntax(at, "ring bond from an atom to itself"));
        }
        if self
            .bonds
            .iter()
            .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
        {
            return Err(syntax(at, "duplicate bond"));
        }
        let (kind, stereo) = match sym {
            Some(BondSymbol::Single) => (BondType::Single, BondStereo::None),
            Some(BondSymbol::Double) => (BondType::Double, BondStereo::None),
            Some(BondSymbol::Triple) => (BondType::Triple, BondStereo::None),
            Some(BondSymbol::Aromatic) => (BondType::Aromatic, BondStereo::None),
            Some(BondSymbol::Up) => (BondType::Single, BondStereo::Up),
            Some(BondSymbol::Down) => (BondType::Single, BondStereo::Down),
            None if self.atoms[a].aromatic && self.atoms[b].aromatic => (BondType::Aromatic, BondStereo::None),
            None => (BondType::Single, BondStereo::None),
        };
        self.bonds.push(RawBond { a, b, kind, stereo });
        Ok(())
    }

    fn ring_closure(&mut self) -> Result<(), ChemError> {
        let at = self.pos;
        let label = if self.peek() == Some('%') {
            self.pos += 1;
            let (d1, d2) = (self.peek(), self.peek_at(1));
            match (d1, d2) {
                (Some(a @ '0'..='9'), Some(b @ '0'..='9')) => {
                    self.pos += 2;
                    (a as u32 - '0' as u32) * 10 + (b as u32 - '0' as u32)
                }
                _ => return Err(syntax(at, "'%' must be followed by two digits")),
            }
        } else {
            let d = self.peek().unwrap() as u32 - '0' as u32;
            self.pos += 1;
            d
        };
        let current = self
            .prev
            .ok_or_else(|| syntax(at, "ring bond without a preceding atom"))?;
        let sym = self.pending.take().map(|(s, _)| s);
        match self.rings.remove(&label) {
            Some((other, open_sym, _)) => {
                let resolved = match (open_sym, sym) {
                    (Some(x), Some(y)) if x != y => {
                        return Err(syntax(at, format!("conflicting bond symbols on ring bond {label}")))
                    }
                    (x, y) => x.or(y),
                };
                self.add_bond(other, current, resolved, at)?;
            }
            None => {
                self.rings.insert(label, (current, sym, at));
            }
        }
        Ok(())
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn bond_order(kind: BondType) -> u32 {
    match kind {
        BondType::Single | BondType::Aromatic => 1,
        BondType::Double => 2,
        BondType::Triple => 3,
    }
}

/// Bonds whose removal disconnects their endpoints (Tarjan bridge finding).
fn bridges(n: usize, bonds: &[RawBond]) -> Vec<bool> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, b) in bonds.iter().enumerate() {
        adj[b.a].push((b.b, i));
        adj[b.b].push((b.a, i));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; bonds.len()];
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // iterative DFS: (node, parent edge, next neighbour index)
        let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (v, parent_edge, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let (w, e) = adj[v][*next];
                *next += 1;
                if e == parent_edge {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, e, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(u, _, _)) = stack.last() {
                    low[u] = low[u].min(low[v]);
                    if low[v] > disc[u] {
                        is_bridge[parent_edge] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

/// Valence list for a charged atom, taken from its isoelectronic neighbour
/// in the organic subset.
fn charged_valences(info: &ElementInfo, charge: i8) -> &'static [u8] {
    if charge == 0 {
        return info.valences;
    }
    elements::by_number(i32::from(info.number) - i32::from(charge))
        .map(|e| e.valences)
        .unwrap_or(&[])
}

fn build_graph(raw_atoms: Vec<RawAtom>, raw_bonds: Vec<RawBond>) -> Result<MolecularGraph, ChemError> {
    let n = raw_atoms.len();
    let bridge = bridges(n, &raw_bonds);
    let ring_bond: Vec<bool> = bridge.iter().map(|b| !b).collect();

    let mut order_sum = vec![0u32; n];
    let mut aromatic_bonds = vec![0u32; n];
    let mut degree = vec![0u8; n];
    let mut in_ring = vec![false; n];
    let mut unsaturated = vec![false; n];
    for (i, b) in raw_bonds.iter().enumerate() {
        for end in [b.a, b.b] {
            order_sum[end] += bond_order(b.kind);
            degree[end] = degree[end].saturating_add(1);
            if b.kind == BondType::Aromatic {
                aromatic_bonds[end] += 1;
            }
            if b.kind != BondType::Single {
                unsaturated[end] = true;
            }
            if ring_bond[i] {
                in_ring[end] = true;
            }
        }
    }

    let atoms = raw_atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let aromatic_extra = u32::from(a.aromatic);
            let used = order_sum[i] + aromatic_extra;
            let hydrogens = if a.bracket {
                a.hydrogens
            } else {
                a.info
                    .valences
                    .iter()
                    .map(|&v| u32::from(v))
                    .find(|&v| v >= used)
                    .map_or(0, |v| (v - used) as u8)
            };
            let radicals = if a.bracket {
                let have = used + u32::from(a.hydrogens);
                charged_valences(a.info, a.charge)
                    .first()
                    .map_or(0, |&v| u32::from(v).saturating_sub(have) as u8)
            } else {
                0
            };
            // aromatic bonds contribute 1.5 to the reported valence
            let valence = order_sum[i] as f64 + 0.5 * f64::from(aromatic_bonds[i]) + f64::from(hydrogens);
            AtomFeatures {
                symbol: a.info.symbol.to_string(),
                element_class: elements::element_class(a.info.symbol),
                atomic_mass: a.isotope.map_or(a.info.mass, f64::from),
                valence: valence.round() as u8,
                in_ring: in_ring[i],
                formal_charge: a.charge,
                radical_electrons: radicals,
                chirality: a.chirality,
                degree: degree[i],
                num_hydrogens: hydrogens,
                aromatic: a.aromatic,
            }
        })
        .collect();

    let bonds = raw_bonds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let multiple = |end: usize, skip: usize| {
                raw_bonds
                    .iter()
                    .enumerate()
                    .any(|(j, o)| j != skip && (o.a == end || o.b == end) && o.kind != BondType::Single)
            };
            let conjugated = match b.kind {
                BondType::Aromatic => true,
                BondType::Single => unsaturated[b.a] && unsaturated[b.b],
                BondType::Double | BondType::Triple => {
                    multiple(b.a, i) || multiple(b.b, i) || {
                        // multiple bond next to a single bond leading to an unsaturated atom
                        raw_bonds.iter().any(|o| {
                            o.kind == BondType::Single
                                && ((o.a == b.a || o.a == b.b) && unsaturated[o.b]
                                    || (o.b == b.a || o.b == b.b) && unsaturated[o.a])
                        })
                    }
                }
            };
            (
                b.a,
                b.b,
                BondFeatures {
                    bond_type: b.kind,
                    in_ring: ring_bond[i],
                    conjugated,
                    stereo: b.stereo,
                },
            )
        })
        .collect();

    MolecularGraph::new(atoms, bonds)
}
