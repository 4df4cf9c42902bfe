/// One-hot element vocabulary: the organic subset followed by "other".
pub const ELEMENT_VOCAB: [&str; 10] = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];
pub const ELEMENT_CLASSES: usize = ELEMENT_VOCAB.len() + 1;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ElementInfo {
    pub symbol: &'static str,
    pub number: u8,
    pub mass: f64,
    /// Default valences for implicit-hydrogen perception; empty for elements
    /// outside the organic subset.
    pub valences: &'static [u8],
}

const fn el(symbol: &'static str, number: u8, mass: f64, valences: &'static [u8]) -> ElementInfo {
    ElementInfo {
        symbol,
        number,
        mass,
        valences,
    }
}

static TABLE: &[ElementInfo] = &[
    el("H", 1, 1.008, &[1]),
    el("He", 2, 4.003, &[]),
    el("Li", 3, 6.94, &[]),
    el("Be", 4, 9.012, &[]),
    el("B", 5, 10.811, &[3]),
    el("C", 6, 12.011, &[4]),
    el("N", 7, 14.007, &[3, 5]),
    el("O", 8, 15.999, &[2]),
    el("F", 9, 18.998, &[1]),
    el("Ne", 10, 20.180, &[]),
    el("Na", 11, 22.990, &[]),
    el("Mg", 12, 24.305, &[]),
    el("Al", 13, 26.982, &[]),
    el("Si", 14, 28.086, &[]),
    el("P", 15, 30.974, &[3, 5]),
    el("S", 16, 32.065, &[2, 4, 6]),
    el("Cl", 17, 35.453, &[1]),
    el("Ar", 18, 39.948, &[]),
    el("K", 19, 39.098, &[]),
    el("Ca", 20, 40.078, &[]),
    el("Sc", 21, 44.956, &[]),
    el("Ti", 22, 47.867, &[]),
    el("V", 23, 50.942, &[]),
    el("Cr", 24, 51.996, &[]),
    el("Mn", 25, 54.938, &[]),
    el("Fe", 26, 55.845, &[]),
    el("Co", 27, 58.933, &[]),
    el("Ni", 28, 58.693, &[]),
    el("Cu", 29, 63.546, &[]),
    el("Zn", 30, 65.38, &[]),
    el("Ga", 31, 69.723, &[]),
    el("Ge", 32, 72.630, &[]),
    el("As", 33, 74.922, &[]),
    el("Se", 34, 78.971, &[]),
    el("Br", 35, 79.904, &[1]),
    el("Kr", 36, 83.798, &[]),
    el("Rb", 37, 85.468, &[]),
    el("Sr", 38, 87.62, &[]),
    el("Y", 39, 88.906, &[]),
    el("Zr", 40, 91.224, &[]),
    el("Mo", 42, 95.95, &[]),
    el("Ru", 44, 101.07, &[]),
    el("Rh", 45, 102.906, &[]),
    el("Pd", 46, 106.42, &[]),
    el("Ag", 47, 107.868, &[]),
    el("Cd", 48, 112.414, &[]),
    el("In", 49, 114.818, &[]),
    el("Sn", 50, 118.710, &[]),
    el("Sb", 51, 121.760, &[]),
    el("Te", 52, 127.60, &[]),
    el("I", 53, 126.904, &[1]),
    el("Xe", 54, 131.293, &[]),
    el("Cs", 55, 132.905, &[]),
    el("Ba", 56, 137.327, &[]),
    el("Gd", 64, 157.25, &[]),
    el("W", 74, 183.84, &[]),
    el("Pt", 78, 195.084, &[]),
    el("Au", 79, 196.967, &[]),
    el("Hg", 80, 200.592, &[]),
    el("Tl", 81, 204.38, &[]),
    el("Pb", 82, 207.2, &[]),
    el("Bi", 83, 208.980, &[]),
];

pub(crate) fn lookup(symbol: &str) -> Option<&'static ElementInfo> {
    TABLE.iter().find(|e| e.symbol == symbol)
}

pub(crate) fn by_number(number: i32) -> Option<&'static ElementInfo> {
    TABLE.iter().find(|e| i32::from(e.number) == number)
}

/// Position of `symbol` in the one-hot vocabulary; unknown symbols map to
/// the trailing "other" slot.
pub fn element_class(symbol: &str) -> usize {
    ELEMENT_VOCAB
        .iter()
        .position(|s| *s == symbol)
        .unwrap_or(ELEMENT_VOCAB.len())
}
