//! Tabular traffic ingestion, feature dropping, row textualization and
//! deterministic train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    HighCardinality,
    Redundant,
    RawPayload,
    NullOnly,
}

/// A cell is `None` when empty or a null marker (`nan`, `null`, `none`).
pub type Cell = Option<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTable {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    pub label_column: String,
    /// Columns removed so far, with the reason.
    pub dropped: Vec<(String, DropReason)>,
}

fn parse_cell(raw: &str) -> Cell {
    let t = raw.trim();
    if t.is_empty()
        || ["nan", "null", "none"]
            .iter()
            .any(|m| t.eq_ignore_ascii_case(m))
    {
        None
    } else {
        Some(raw.to_owned())
    }
}

fn detect_kind<'a>(values: impl Iterator<Item = &'a str>) -> ColumnKind {
    let mut numeric = true;
    let mut text = false;
    for v in values {
        if numeric && v.trim().parse::<f64>().is_err() {
            numeric = false;
        }
        if v.chars().any(char::is_whitespace) || v.chars().count() > 64 {
            text = true;
        }
    }
    match (numeric, text) {
        (true, _) => ColumnKind::Numeric,
        (false, true) => ColumnKind::Text,
        (false, false) => ColumnKind::Categorical,
    }
}

impl FlowTable {
    pub fn load(path: impl AsRef<Path>, label_column: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, label_column)
    }

    /// Parses CSV with a header row. All-null columns other than the label
    /// are dropped with reason `null_only`.
    pub fn from_reader(reader: impl Read, label_column: &str) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers: Vec<String> = csv
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|h| h.trim().to_owned())
            .collect();
        let label_idx = headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| Error::Schema(format!("label column {label_column:?} not in header")))?;
        let mut rows = Vec::new();
        for (i, record) in csv.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(line),
                message: e.to_string(),
            })?;
            if record.len() != headers.len() {
                return Err(Error::Parse {
                    line: record.position().map(|p| p.line() as usize).unwrap_or(line),
                    message: format!("expected {} fields, found {}", headers.len(), record.len()),
                });
            }
            rows.push(record.iter().map(parse_cell).collect::<Vec<_>>());
        }

        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for (c, name) in headers.iter().enumerate() {
            let all_null = rows.iter().all(|r: &Vec<Cell>| r[c].is_none());
            if all_null && c != label_idx && !rows.is_empty() {
                dropped.push((name.clone(), DropReason::NullOnly));
            } else {
                keep.push(c);
            }
        }
        let columns = keep
            .iter()
            .map(|&c| Column {
                name: headers[c].clone(),
                kind: detect_kind(rows.iter().filter_map(|r| r[c].as_deref())),
            })
            .collect();
        let rows = rows
            .into_iter()
            .map(|r| keep.iter().map(|&c| r[c].clone()).collect())
            .collect();
        Ok(FlowTable {
            columns,
            rows,
            label_column: label_column.to_owned(),
            dropped,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn label_index(&self) -> usize {
        self.column_index(&self.label_column)
            .expect("label column is never dropped")
    }

    pub fn labels(&self) -> Vec<String> {
        let li = self.label_index();
        self.rows.iter().map(|r| render(&r[li])).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sub-table with the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> FlowTable {
        FlowTable {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            label_column: self.label_column.clone(),
            dropped: self.dropped.clone(),
        }
    }

    /// Writes the table back out as CSV, nulls as empty cells.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let csv_err = |e: csv::Error| Error::io(path, e.into());
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.as_deref().unwrap_or("")))
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn render(cell: &Cell) -> String {
    cell.clone().unwrap_or_else(|| NULL_TEXT.to_owned())
}

pub const NULL_TEXT: &str = "none";

pub const DEFAULT_DROPS: [(&str, DropReason); 5] = [
    ("http.request.full_uri", DropReason::HighCardinality),
    ("ip.src_host", DropReason::HighCardinality),
    ("ip.dst_host", DropReason::HighCardinality),
    ("arp.src.proto_ipv4", DropReason::Redundant),
    ("tcp.payload", DropReason::RawPayload),
];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeaturePolicy {
    pub drop: BTreeSet<String>,
    #[serde(default)]
    pub reasons: BTreeMap<String, DropReason>,
}

impl FeaturePolicy {
    /// Columns excluded for high cardinality, redundancy or raw payload.
    pub fn edge_iiot_default() -> Self {
        FeaturePolicy {
            drop: DEFAULT_DROPS.iter().map(|(c, _)| (*c).to_owned()).collect(),
            reasons: DEFAULT_DROPS
                .iter()
                .map(|(c, r)| ((*c).to_owned(), *r))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        FeaturePolicy::default()
    }

    /// Reads a policy file `{"drop":[...]}` with optional `"reasons"`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyOutcome {
    pub table: FlowTable,
    pub warnings: Vec<String>,
}

/// Removes the policy's columns. Unknown names and the label column are
/// skipped with a warning.
pub fn apply_policy(table: &FlowTable, policy: &FeaturePolicy) -> PolicyOutcome {
    let mut warnings = Vec::new();
    for name in &policy.drop {
        if *name == table.label_column {
            warnings.push(format!("policy names the label column {name:?}; kept"));
        } else if table.column_index(name).is_none() {
            warnings.push(format!("policy column {name:?} not present"));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let keep: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.name == table.label_column || !policy.drop.contains(&c.name))
        .map(|(i, _)| i)
        .collect();
    let mut dropped = table.dropped.clone();
    for c in &table.columns {
        if c.name != table.label_column && policy.drop.contains(&c.name) {
            let reason = policy
                .reasons
                .get(&c.name)
                .copied()
                .unwrap_or(DropReason::Redundant);
            dropped.push((c.name.clone(), reason));
        }
    }
    PolicyOutcome {
        table: FlowTable {
            columns: keep.iter().map(|&i| table.columns[i].clone()).collect(),
            rows: table
                .rows
                .iter()
                .map(|r| keep.iter().map(|&i| r[i].clone()).collect())
                .collect(),
            label_column: table.label_column.clone(),
            dropped,
        },
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualizedRow {
    pub text: String,
    pub label: String,
}

/// Renders each row as `name: value` pairs in column order, label column
/// excluded, nulls as `none`.
pub fn textualize(table: &FlowTable) -> Result<Vec<TextualizedRow>> {
    let li = table.label_index();
    if table.columns.len() < 2 {
        return Err(Error::Precondition("table has no feature columns".into()));
    }
    Ok(table
        .rows
        .iter()
        .map(|row| {
            let text = table
                .columns
                .iter()
                .zip(row)
                .enumerate()
                .filter(|(i, _)| *i != li)
                .map(|(_, (col, cell))| format!("{}: {}", col.name, render(cell)))
                .collect::<Vec<_>>()
                .join(" ");
            TextualizedRow {
                text,
                label: render(&row[li]),
            }
        })
        .collect())
}

/// splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Fisher-Yates from the back, `j = next % (i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// `ratio * n` rounded half away from zero, tolerant of representation
/// error.
fn quota(ratio: f64, n: usize) -> (usize, f64) {
    let exact = ratio * n as f64;
    let nearest = exact.round();
    let snapped = if (exact - nearest).abs() < 1e-9 {
        nearest
    } else {
        exact
    };
    let floor = snapped.floor();
    (floor as usize, snapped - floor)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    /// Row indices into the source table, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Deterministic train/test partition.
///
/// Stratified: each class gets `floor(ratio * count)` training rows, and the
/// leftover seats up to `round(ratio * N)` go to the classes with the
/// largest remainders (ties by class name). Classes with fewer than two rows
/// go wholly to train and are left out of the quota arithmetic. Rows are
/// chosen by a splitmix64 Fisher-Yates shuffle per class, classes visited
/// in name order.
pub fn split_indices(labels: &[String], ratio: f64, seed: u64, stratified: bool) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param("ratio", format!("{ratio} not in (0, 1)")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut warnings = Vec::new();

    if !stratified {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        rng.shuffle(&mut all);
        let (floor, frac) = quota(ratio, labels.len());
        let take = floor + usize::from(frac >= 0.5);
        train.extend_from_slice(&all[..take]);
        test.extend_from_slice(&all[take..]);
    } else {
        let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            classes.entry(l.as_str()).or_default().push(i);
        }
        let eligible: Vec<(&str, usize)> = classes
            .iter()
            .filter(|(_, rows)| rows.len() >= 2)
            .map(|(c, rows)| (*c, rows.len()))
            .collect();
        let eligible_total: usize = eligible.iter().map(|(_, n)| n).sum();
        let (target_floor, target_frac) = quota(ratio, eligible_total);
        let target = target_floor + usize::from(target_frac >= 0.5);

        let mut quotas: BTreeMap<&str, usize> = BTreeMap::new();
        let mut remainders: Vec<(f64, &str)> = Vec::new();
        for (c, n) in &eligible {
            let (floor, frac) = quota(ratio, *n);
            quotas.insert(c, floor);
            remainders.push((frac, c));
        }
        let assigned: usize = quotas.values().sum();
        remainders.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(b.1))
        });
        for (_, c) in remainders.iter().take(target.saturating_sub(assigned)) {
            *quotas.get_mut(c).expect("eligible class") += 1;
        }
        for (class, rows) in &classes {
            let mut rows = rows.clone();
            match quotas.get(class) {
                Some(&q) => {
                    rng.shuffle(&mut rows);
                    train.extend_from_slice(&rows[..q]);
                    test.extend_from_slice(&rows[q..]);
                }
                None => {
                    warnings.push(format!(
                        "class {class:?} has {} row(s); kept whole in train",
                        rows.len()
                    ));
                    train.extend_from_slice(&rows);
                }
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        test,
        warnings,
    })
}

pub fn split(
    table: &FlowTable,
    ratio: f64,
    seed: u64,
    stratified: bool,
) -> Result<(FlowTable, FlowTable, Vec<String>)> {
    let s = split_indices(&table.labels(), ratio, seed, stratified)?;
    Ok((table.select(&s.train), table.select(&s.test), s.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(csv: &str, label: &str) -> Result<FlowTable> {
        FlowTable::from_reader(csv.as_bytes(), label)
    }

    #[test]
    fn null_only_columns_are_dropped() {
        let t = table("a,b,label\n1,,x\n2,,y\n", "label").unwrap();
        let names: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["a", "label"]);
        assert_eq!(t.dropped, vec![("b".to_owned(), DropReason::NullOnly)]);
        assert_eq!(t.columns[0].kind, ColumnKind::Numeric);
    }

    #[test]
    fn header_only_and_errors() {
        assert_eq!(table("a,label\n", "label").unwrap().len(), 0);
        assert!(matches!(
            table("a,b\n1,2\n", "label"),
            Err(Error::Schema(_))
        ));
        match table("a,label\n1,x\n2,y,z\n", "label") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn quoted_fields() {
        let t = table("uri,label\n\"/a,b\",x\n", "label").unwrap();
        assert_eq!(t.rows[0][0].as_deref(), Some("/a,b"));
    }

    #[test]
    fn default_policy_drops_payload() {
        let t = table(
            "tcp.payload,ip.src_host,tcp.len,Attack_type\nabcd,10.0.0.1,4,Normal\n",
            "Attack_type",
        )
        .unwrap();
        let out = apply_policy(&t, &FeaturePolicy::edge_iiot_default());
        assert!(out.table.column_index("tcp.payload").is_none());
        assert!(out.table.column_index("ip.src_host").is_none());
        assert!(out.table.column_index("tcp.len").is_some());
        assert!(out
            .table
            .dropped
            .contains(&("tcp.payload".to_owned(), DropReason::RawPayload)));
        // Three default columns are absent from this table.
        assert_eq!(out.warnings.len(), 3);
    }

    #[test]
    fn empty_and_unknown_policies_are_identity() {
        let t = table("a,label\n1,x\n", "label").unwrap();
        assert_eq!(apply_policy(&t, &FeaturePolicy::empty()).table, t);
        let p = FeaturePolicy {
            drop: ["missing".to_owned(), "label".to_owned()].into(),
            reasons: Default::default(),
        };
        let out = apply_policy(&t, &p);
        assert_eq!(out.table, t);
        assert_eq!(out.warnings.len(), 2);
    }

    #[test]
    fn textualize_rows() {
        let t = table("ip.src,label\n192.168.1.1,Normal\n", "label").unwrap();
        let rows = textualize(&t).unwrap();
        assert_eq!(rows[0].text, "ip.src: 192.168.1.1");
        assert_eq!(rows[0].label, "Normal");

        let t = table("a,b,label\n1,2,x\n1,,x\n", "label").unwrap();
        let rows = textualize(&t).unwrap();
        assert_eq!(
            rows[0],
            TextualizedRow {
                text: "a: 1 b: 2".into(),
                label: "x".into()
            }
        );
        assert_eq!(rows[1].text, "a: 1 b: none");
    }

    #[test]
    fn label_in_the_middle_is_excluded() {
        let t = table("a,label,b\n1,x,2\n", "label").unwrap();
        assert_eq!(textualize(&t).unwrap()[0].text, "a: 1 b: 2");
        assert!(textualize(&table("label\nx\n", "label").unwrap()).is_err());
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 1234567 from the published reference code.
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
    }

    fn labels(counts: &[(&str, usize)]) -> Vec<String> {
        counts
            .iter()
            .flat_map(|(c, n)| std::iter::repeat_n(c.to_string(), *n))
            .collect()
    }

    #[test]
    fn split_arithmetic() {
        let s = split_indices(&labels(&[("a", 10)]), 0.8, 7, true).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));

        let l = labels(&[("a", 6), ("b", 4)]);
        let s = split_indices(&l, 0.5, 3, true).unwrap();
        let count = |idx: &[usize], c: &str| idx.iter().filter(|&&i| l[i] == c).count();
        assert_eq!((count(&s.train, "a"), count(&s.test, "a")), (3, 3));
        assert_eq!((count(&s.train, "b"), count(&s.test, "b")), (2, 2));
    }

    #[test]
    fn largest_remainder_hits_global_target() {
        // 0.5 * (3 + 3 + 3) = 4.5 -> 5 seats; floors give 1 each, remainders
        // 0.5 each, so two classes (by name) get an extra seat.
        let l = labels(&[("a", 3), ("b", 3), ("c", 3)]);
        let s = split_indices(&l, 0.5, 0, true).unwrap();
        assert_eq!(s.train.len(), 5);
        let count = |c: &str| s.train.iter().filter(|&&i| l[i] == c).count();
        assert_eq!((count("a"), count("b"), count("c")), (2, 2, 1));
    }

    #[test]
    fn singleton_class_goes_to_train() {
        let l = labels(&[("a", 5), ("rare", 1)]);
        let s = split_indices(&l, 0.8, 1, true).unwrap();
        assert!(s.train.contains(&5));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn unstratified_and_bad_ratio() {
        let l = labels(&[("a", 7), ("b", 3)]);
        let s = split_indices(&l, 0.8, 9, false).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert!(split_indices(&l, 1.0, 0, true).is_err());
        assert!(split_indices(&l, 0.0, 0, true).is_err());
    }
}
