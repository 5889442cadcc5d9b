use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Input modalities in canonical sequence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Optical,
    Sar,
    Dem,
    Map,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Optical, Modality::Sar, Modality::Dem, Modality::Map];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
            Modality::Dem => "dem",
            Modality::Map => "map",
        }
    }

    /// Raster channel count.
    pub fn channels(self) -> usize {
        match self {
            Modality::Optical => 3,
            Modality::Sar => 2,
            Modality::Dem | Modality::Map => 1,
        }
    }

    /// Whether the raster holds class ids rather than measurements.
    pub fn is_categorical(self) -> bool {
        self == Modality::Map
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown modality `{s}`")))
    }
}

/// A subset of [`Modality::ALL`]; iteration is always in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b1111);

    pub fn from_bits(bits: u8) -> Self {
        ModalitySet(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn single(m: Modality) -> Self {
        ModalitySet(1 << m.index())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn with(self, m: Modality) -> Self {
        ModalitySet(self.0 | (1 << m.index()))
    }

    pub fn without(self, m: Modality) -> Self {
        ModalitySet(self.0 & !(1 << m.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    /// Every non-empty subset of `self`, largest first; within one size,
    /// lexicographic in canonical order.
    pub fn nonempty_subsets(self) -> Vec<ModalitySet> {
        let members: Vec<Modality> = self.iter().collect();
        let mut out: Vec<(usize, Vec<usize>, ModalitySet)> = Vec::new();
        for mask in 1u32..(1 << members.len()) {
            let picked: Vec<usize> = (0..members.len()).filter(|i| mask & (1 << i) != 0).collect();
            let set = picked.iter().fold(ModalitySet::EMPTY, |s, &i| s.with(members[i]));
            out.push((picked.len(), picked, set));
        }
        out.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        out.into_iter().map(|(_, _, s)| s).collect()
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(ModalitySet::EMPTY, ModalitySet::with)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        s.split(['+', ','])
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<Modality>())
            .collect::<Result<ModalitySet, Error>>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_follow_table_grouping() {
        let subsets = ModalitySet::FULL.nonempty_subsets();
        assert_eq!(subsets.len(), 15);
        assert_eq!(subsets[0], ModalitySet::FULL);
        let sizes: Vec<usize> = subsets.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1]);
        assert_eq!(subsets[1].to_string(), "optical+sar+dem");
        assert_eq!(subsets[14].to_string(), "map");
        let three: ModalitySet = "optical+sar+dem".parse().unwrap();
        assert_eq!(three.nonempty_subsets().len(), 7);
    }

    #[test]
    fn display_round_trips() {
        let s: ModalitySet = "map,sar".parse().unwrap();
        assert_eq!(s.to_string(), "sar+map");
        assert_eq!(s.to_string().parse::<ModalitySet>().unwrap(), s);
        assert!("radar".parse::<ModalitySet>().is_err());
    }
}
