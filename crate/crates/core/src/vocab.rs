use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const UNK: &str = "<unk>";

/// String-to-id table. Id 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub const UNK_ID: usize = 0;

    /// `<unk>`, then `reserved`, then every item seen at least `min_count`
    /// times, most frequent first and alphabetical within a count.
    pub fn build<I, S>(items: I, min_count: usize, reserved: &[&str]) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in items {
            *counts.entry(s.as_ref().to_string()).or_default() += 1;
        }
        let mut out: Vec<String> = Vec::with_capacity(counts.len() + 1 + reserved.len());
        out.push(UNK.to_string());
        for r in reserved {
            if !out.iter().any(|x| x == r) {
                out.push(r.to_string());
            }
        }
        let mut ranked: Vec<(&String, &usize)> =
            counts.iter().filter(|(s, &c)| c >= min_count && !out.contains(s)).collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        out.extend(ranked.into_iter().map(|(s, _)| s.clone()));
        Vocab::from(out)
    }

    pub fn id(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, s: &str) -> bool {
        self.index.contains_key(s)
    }

    pub fn get(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocab::build(["b", "a", "b", "c", "c", "c", "d"], 1, &["<q>"]);
        assert_eq!(v.get(0), Some(UNK));
        assert_eq!(v.get(1), Some("<q>"));
        assert_eq!(v.get(2), Some("c"));
        assert_eq!(v.get(3), Some("b"));
        assert_eq!(v.get(4), Some("a"));
        assert_eq!(v.id("zzz"), Vocab::UNK_ID);
        let v2 = Vocab::build(["b", "a", "b"], 2, &[]);
        assert_eq!(v2.len(), 2);
        assert_eq!(v2.id("a"), Vocab::UNK_ID);
    }
}
