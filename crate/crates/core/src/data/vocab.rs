use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FieldSpec;

use super::InteractionRecord;

pub const PAD_INDEX: usize = 0;
pub const UNKNOWN_INDEX: usize = 1;
const FIRST_VALUE: usize = 2;

/// Value ↔ index map of one field. Index 0 pads, 1 is unknown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FieldVocab {
    pub name: String,
    values: Vec<String>,
    index: HashMap<String, usize>,
}

impl FieldVocab {
    pub fn new(name: impl Into<String>) -> Self {
        FieldVocab {
            name: name.into(),
            ..Default::default()
        }
    }

    fn add(&mut self, value: &str) -> usize {
        if let Some(&i) = self.index.get(value) {
            return i;
        }
        let i = FIRST_VALUE + self.values.len();
        self.values.push(value.to_string());
        self.index.insert(value.to_string(), i);
        i
    }

    pub fn encode(&self, value: &str) -> usize {
        self.index.get(value).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        index.checked_sub(FIRST_VALUE).and_then(|i| self.values.get(i)).map(String::as_str)
    }

    /// Table rows, reserved rows included.
    pub fn size(&self) -> usize {
        FIRST_VALUE + self.values.len()
    }
}

/// Per-field vocabularies, item field first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    fields: Vec<FieldVocab>,
}

impl Vocab {
    /// Assigns indices in order of first appearance.
    pub fn build(records: &[InteractionRecord]) -> Self {
        let mut fields = vec![FieldVocab::new("item")];
        if let Some(first) = records.first() {
            fields.extend(first.side_fields.iter().map(|(n, _)| FieldVocab::new(n.clone())));
        }
        for r in records {
            fields[0].add(&r.item_id);
            for (f, (_, v)) in fields[1..].iter_mut().zip(&r.side_fields) {
                f.add(v);
            }
        }
        Vocab { fields }
    }

    pub fn fields(&self) -> &[FieldVocab] {
        &self.fields
    }

    pub fn items(&self) -> &FieldVocab {
        &self.fields[0]
    }

    pub fn field_specs(&self) -> Vec<FieldSpec> {
        self.fields
            .iter()
            .map(|f| FieldSpec {
                name: f.name.clone(),
                vocab: f.size(),
            })
            .collect()
    }

    /// Field indices of one record, item first.
    pub fn encode(&self, r: &InteractionRecord) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.fields.len());
        out.push(self.fields[0].encode(&r.item_id));
        for (f, (_, v)) in self.fields[1..].iter().zip(&r.side_fields) {
            out.push(f.encode(v));
        }
        out
    }

    /// `field<TAB>index<TAB>value` lines, one per non-reserved entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            for (i, v) in f.values.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", f.name, i + FIRST_VALUE, v));
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut fields: Vec<FieldVocab> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Data(format!("vocab line {}: `{line}`", n + 1));
            let mut cols = line.splitn(3, '\t');
            let (name, index, value) = (
                cols.next().ok_or_else(bad)?,
                cols.next().ok_or_else(bad)?,
                cols.next().ok_or_else(bad)?,
            );
            let index: usize = index.parse().map_err(|_| bad())?;
            if fields.last().is_none_or(|f| f.name != name) {
                if fields.iter().any(|f| f.name == name) {
                    return Err(bad());
                }
                fields.push(FieldVocab::new(name));
            }
            let f = fields.last_mut().unwrap();
            if f.add(value) != index {
                return Err(bad());
            }
        }
        if fields.first().is_none_or(|f| f.name != "item") {
            return Err(Error::Data("vocab must start with the `item` field".into()));
        }
        Ok(Vocab { fields })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<InteractionRecord> {
        vec![
            InteractionRecord::new("u1", "b", 1).with_field("genre", "x"),
            InteractionRecord::new("u1", "a", 2).with_field("genre", "y"),
            InteractionRecord::new("u2", "b", 3).with_field("genre", "x"),
        ]
    }

    #[test]
    fn indices_start_after_reserved_rows() {
        let v = Vocab::build(&records());
        assert_eq!(v.items().encode("b"), 2);
        assert_eq!(v.items().encode("a"), 3);
        assert_eq!(v.items().encode("zzz"), UNKNOWN_INDEX);
        assert_eq!(v.items().decode(3), Some("a"));
        assert_eq!(v.items().decode(PAD_INDEX), None);
        assert_eq!(v.field_specs()[1].vocab, 4);
        assert_eq!(v.encode(&records()[1]), vec![3, 3]);
    }

    #[test]
    fn save_load_is_stable() {
        let v = Vocab::build(&records());
        let back = Vocab::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tsv("item\t5\tx\n").is_err());
    }
}
