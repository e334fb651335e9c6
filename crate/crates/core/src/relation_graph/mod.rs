//! Dated stock-relation graphs built from entity–property–entity records.
//!
//! Stocks are nodes; two stocks are joined by a first-order edge when a
//! whitelisted record links their entities directly (either direction), and
//! by a second-order edge when both entities link to a common third entity.
//! Edges are undirected and every node carries a self-loop.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_relations, read_universe, write_relations, write_universe};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("ticker {0} is mapped more than once")]
    DuplicateTicker(String),
    #[error("entity {entity} is mapped by both {first} and {second}")]
    DuplicateEntity {
        entity: String,
        first: String,
        second: String,
    },
    #[error("no graph snapshot on or before {0}")]
    NoSnapshot(NaiveDate),
    #[error("unknown ticker {0}")]
    UnknownTicker(String),
    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

/// One `subject —property→ object` statement valid from a date.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationRecord {
    pub subject: String,
    pub property: String,
    pub object: String,
    pub valid_from: NaiveDate,
}

/// Company-relation properties that may create edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyWhitelist(BTreeSet<String>);

impl PropertyWhitelist {
    /// Property id standing in for a contract relation, which has no public id.
    pub const CONTRACT: &'static str = "PContract";

    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(props: I) -> Self {
        Self(props.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, property: &str) -> bool {
        self.0.contains(property)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl Default for PropertyWhitelist {
    /// owned by, subsidiary of, controlled by, has part, has contract with.
    fn default() -> Self {
        Self::new(["P127", "P355", "P836", "P1553", Self::CONTRACT])
    }
}

/// Ticker ↔ entity mapping with canonical (sorted) ticker order.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    tickers: Vec<String>,
    entities: Vec<String>,
}

impl Universe {
    pub fn new<I, T, E>(pairs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (T, E)>,
        T: Into<String>,
        E: Into<String>,
    {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let mut owners: HashMap<String, String> = HashMap::new();
        for (ticker, entity) in pairs {
            let (ticker, entity) = (ticker.into(), entity.into());
            if let Some(first) = owners.get(&entity) {
                return Err(GraphError::DuplicateEntity {
                    entity,
                    first: first.clone(),
                    second: ticker,
                });
            }
            if map.insert(ticker.clone(), entity.clone()).is_some() {
                return Err(GraphError::DuplicateTicker(ticker));
            }
            owners.insert(entity, ticker);
        }
        let (tickers, entities) = map.into_iter().unzip();
        Ok(Self { tickers, entities })
    }

    pub fn len(&self) -> usize {
        self.tickers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickers.is_empty()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn entity(&self, index: usize) -> &str {
        &self.entities[index]
    }

    pub fn index_of(&self, ticker: &str) -> Option<usize> {
        self.tickers.binary_search_by(|t| t.as_str().cmp(ticker)).ok()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.tickers.iter().map(String::as_str).zip(self.entities.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeOrder {
    First,
    Second,
}

/// Why two stocks are connected. Directed statements are kept here even
/// though the adjacency itself is symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeInfo {
    pub order: EdgeOrder,
    /// Direct statements between the two entities (first order).
    pub links: Vec<RelationRecord>,
    /// Shared intermediate entities (second order).
    pub via: Vec<String>,
}

/// Relation graph valid from `snapshot_date`.
#[derive(Debug, Clone, PartialEq)]
pub struct StockGraph {
    pub snapshot_date: NaiveDate,
    tickers: Vec<String>,
    entities: Vec<String>,
    neighbors: Vec<BTreeSet<usize>>,
    edges: BTreeMap<(usize, usize), EdgeInfo>,
}

/// Records skipped while building a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphBuildReport {
    pub non_whitelisted: usize,
    pub not_yet_valid: usize,
    pub self_relations: usize,
}

impl StockGraph {
    /// Graph over `tickers` with the given undirected edges, each recorded as
    /// first order without supporting statements.
    pub fn from_pairs(snapshot_date: NaiveDate, tickers: Vec<String>, pairs: &[(usize, usize)]) -> Self {
        let mut g = Self::isolated(snapshot_date, tickers);
        for &(a, b) in pairs {
            if a == b {
                continue;
            }
            g.neighbors[a].insert(b);
            g.neighbors[b].insert(a);
            g.edges.entry((a.min(b), a.max(b))).or_insert_with(|| EdgeInfo {
                order: EdgeOrder::First,
                links: Vec::new(),
                via: Vec::new(),
            });
        }
        g
    }

    /// Graph over `tickers` with self-loops only.
    pub fn isolated(snapshot_date: NaiveDate, tickers: Vec<String>) -> Self {
        let neighbors = (0..tickers.len()).map(|i| BTreeSet::from([i])).collect();
        Self {
            snapshot_date,
            entities: vec![String::new(); tickers.len()],
            tickers,
            neighbors,
            edges: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tickers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickers.is_empty()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn index_of(&self, ticker: &str) -> Option<usize> {
        self.tickers.iter().position(|t| t == ticker)
    }

    /// `N_i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&j)
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&EdgeInfo> {
        self.edges.get(&(i.min(j), i.max(j)))
    }

    /// Non-self edges as `(i, j, info)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &EdgeInfo)> {
        self.edges.iter().map(|(&(i, j), info)| (i, j, info))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Row-major `N × N` neighbourhood mask.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut mask = vec![false; n * n];
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                mask[i * n + j] = true;
            }
        }
        mask
    }

    /// Same nodes with every non-self edge removed.
    pub fn without_edges(&self) -> Self {
        let mut g = Self::isolated(self.snapshot_date, self.tickers.clone());
        g.entities = self.entities.clone();
        g
    }

    /// Subgraph on the given tickers, in the given order. Tickers unknown to
    /// this graph become isolated nodes.
    pub fn induced(&self, tickers: &[String]) -> Self {
        let index: Vec<Option<usize>> = tickers.iter().map(|t| self.index_of(t)).collect();
        let mut g = Self::isolated(self.snapshot_date, tickers.to_vec());
        for (a, ia) in index.iter().enumerate() {
            let Some(ia) = ia else { continue };
            g.entities[a] = self.entities[*ia].clone();
            for (b, ib) in index.iter().enumerate().skip(a + 1) {
                if let Some(info) = ib.and_then(|ib| self.edge(*ia, ib)) {
                    g.neighbors[a].insert(b);
                    g.neighbors[b].insert(a);
                    g.edges.insert((a, b), info.clone());
                }
            }
        }
        g
    }

    /// Checks symmetry, self-loops and index bounds.
    pub fn is_well_formed(&self) -> bool {
        let n = self.len();
        self.neighbors.iter().enumerate().all(|(i, ns)| {
            ns.contains(&i) && ns.iter().all(|&j| j < n && self.neighbors[j].contains(&i))
        })
    }

    /// Human-readable adjacency dump.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# stock relation graph\n");
        out.push_str(&format!("snapshot {}\n", self.snapshot_date));
        out.push_str(&format!("nodes {}\n", self.len()));
        for (i, t) in self.tickers.iter().enumerate() {
            let entity = if self.entities[i].is_empty() { "-" } else { &self.entities[i] };
            out.push_str(&format!("node {i} {t} {entity}\n"));
        }
        for (i, ns) in self.neighbors.iter().enumerate() {
            let list: Vec<String> = ns.iter().map(ToString::to_string).collect();
            out.push_str(&format!("adj {i}: {}\n", list.join(" ")));
        }
        for (i, j, info) in self.edges() {
            match info.order {
                EdgeOrder::First => {
                    let links: Vec<String> = info
                        .links
                        .iter()
                        .map(|r| format!("{}>{}>{}", r.subject, r.property, r.object))
                        .collect();
                    out.push_str(&format!("edge {i} {j} first {}\n", links.join(",")));
                }
                EdgeOrder::Second => {
                    out.push_str(&format!("edge {i} {j} second via={}\n", info.via.join(",")));
                }
            }
        }
        out
    }
}

/// Builds the snapshot for `snapshot_date` from records valid on or before it.
pub fn build_graph(
    records: &[RelationRecord],
    universe: &Universe,
    snapshot_date: NaiveDate,
    whitelist: &PropertyWhitelist,
) -> (StockGraph, GraphBuildReport) {
    let mut report = GraphBuildReport::default();
    // Undirected entity adjacency with the statements behind each link.
    let mut adjacency: BTreeMap<&str, BTreeMap<&str, Vec<&RelationRecord>>> = BTreeMap::new();
    for r in records {
        if !whitelist.contains(&r.property) {
            report.non_whitelisted += 1;
            continue;
        }
        if r.valid_from > snapshot_date {
            report.not_yet_valid += 1;
            continue;
        }
        if r.subject == r.object {
            report.self_relations += 1;
            continue;
        }
        adjacency.entry(&r.subject).or_default().entry(&r.object).or_default().push(r);
        adjacency.entry(&r.object).or_default().entry(&r.subject).or_default().push(r);
    }

    let n = universe.len();
    let mut graph = StockGraph::isolated(snapshot_date, universe.tickers().to_vec());
    graph.entities = (0..n).map(|i| universe.entity(i).to_string()).collect();
    let node_of: HashMap<&str, usize> = (0..n).map(|i| (universe.entity(i), i)).collect();

    for i in 0..n {
        let Some(links) = adjacency.get(universe.entity(i)) else { continue };
        for (other, recs) in links {
            if let Some(&j) = node_of.get(other) {
                if i < j {
                    let mut recs: Vec<RelationRecord> = recs.iter().map(|r| (*r).clone()).collect();
                    recs.sort();
                    graph.edges.insert(
                        (i, j),
                        EdgeInfo {
                            order: EdgeOrder::First,
                            links: recs,
                            via: Vec::new(),
                        },
                    );
                }
            }
        }
    }

    let mut second: BTreeMap<(usize, usize), BTreeSet<&str>> = BTreeMap::new();
    for (mid, links) in &adjacency {
        let ends: Vec<usize> = links.keys().filter_map(|e| node_of.get(e).copied()).collect();
        for (a, &i) in ends.iter().enumerate() {
            for &j in &ends[a + 1..] {
                let key = (i.min(j), i.max(j));
                if i != j && !graph.edges.contains_key(&key) {
                    second.entry(key).or_default().insert(mid);
                }
            }
        }
    }
    for (key, via) in second {
        graph.edges.insert(
            key,
            EdgeInfo {
                order: EdgeOrder::Second,
                links: Vec::new(),
                via: via.into_iter().map(String::from).collect(),
            },
        );
    }

    for &(i, j) in graph.edges.keys() {
        graph.neighbors[i].insert(j);
        graph.neighbors[j].insert(i);
    }
    (graph, report)
}

/// January 1 of every year from `first`'s year through `last`'s year.
pub fn yearly_snapshot_dates(first: NaiveDate, last: NaiveDate) -> Vec<NaiveDate> {
    (first.year()..=last.year())
        .filter_map(|y| NaiveDate::from_ymd_opt(y, 1, 1))
        .collect()
}

/// Builds one snapshot per date, returned sorted by date.
pub fn build_snapshots(
    records: &[RelationRecord],
    universe: &Universe,
    dates: &[NaiveDate],
    whitelist: &PropertyWhitelist,
) -> Vec<StockGraph> {
    let mut dates = dates.to_vec();
    dates.sort();
    dates.dedup();
    dates
        .into_iter()
        .map(|d| build_graph(records, universe, d, whitelist).0)
        .collect()
}

/// Latest snapshot dated on or before `date`. `snapshots` must be sorted.
pub fn snapshot_for_date(snapshots: &[StockGraph], date: NaiveDate) -> Result<&StockGraph, GraphError> {
    let idx = snapshots.partition_point(|g| g.snapshot_date <= date);
    if idx == 0 {
        return Err(GraphError::NoSnapshot(date));
    }
    Ok(&snapshots[idx - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn rec(s: &str, p: &str, o: &str) -> RelationRecord {
        RelationRecord {
            subject: s.into(),
            property: p.into(),
            object: o.into(),
            valid_from: d(2018, 1, 1),
        }
    }

    fn universe() -> Universe {
        Universe::new([("AAA", "Q1"), ("BBB", "Q2"), ("CCC", "Q3")]).unwrap()
    }

    #[test]
    fn first_order_edge_from_ownership() {
        let (g, _) = build_graph(&[rec("Q1", "P127", "Q2")], &universe(), d(2020, 1, 1), &PropertyWhitelist::default());
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
        let info = g.edge(1, 0).unwrap();
        assert_eq!(info.order, EdgeOrder::First);
        assert_eq!(info.links[0].subject, "Q1");
        assert!(!g.has_edge(0, 2));
        assert!(g.is_well_formed());
    }

    #[test]
    fn empty_records_give_self_loops_only() {
        let (g, _) = build_graph(&[], &universe(), d(2020, 1, 1), &PropertyWhitelist::default());
        for i in 0..3 {
            assert_eq!(g.neighbors(i).iter().copied().collect::<Vec<_>>(), vec![i]);
        }
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn second_order_through_outside_entity() {
        let recs = [rec("Q1", "P355", "X9"), rec("Q3", "P127", "X9")];
        let (g, _) = build_graph(&recs, &universe(), d(2020, 1, 1), &PropertyWhitelist::default());
        let info = g.edge(0, 2).unwrap();
        assert_eq!(info.order, EdgeOrder::Second);
        assert_eq!(info.via, vec!["X9".to_string()]);
    }

    #[test]
    fn filters_properties_dates_and_self_relations() {
        let mut late = rec("Q1", "P127", "Q3");
        late.valid_from = d(2021, 6, 1);
        let recs = [rec("Q1", "P31", "Q2"), late, rec("Q2", "P127", "Q2")];
        let (g, report) = build_graph(&recs, &universe(), d(2021, 1, 1), &PropertyWhitelist::default());
        assert_eq!(g.edge_count(), 0);
        assert_eq!(
            report,
            GraphBuildReport {
                non_whitelisted: 1,
                not_yet_valid: 1,
                self_relations: 1
            }
        );
    }

    #[test]
    fn contract_property_is_whitelisted() {
        let (g, _) = build_graph(
            &[rec("Q2", PropertyWhitelist::CONTRACT, "Q3")],
            &universe(),
            d(2020, 1, 1),
            &PropertyWhitelist::default(),
        );
        assert!(g.has_edge(1, 2));
    }

    #[test]
    fn duplicate_mappings_rejected() {
        assert!(matches!(
            Universe::new([("AAA", "Q1"), ("AAA", "Q2")]),
            Err(GraphError::DuplicateTicker(_))
        ));
        assert!(matches!(
            Universe::new([("AAA", "Q1"), ("BBB", "Q1")]),
            Err(GraphError::DuplicateEntity { .. })
        ));
    }

    #[test]
    fn snapshot_lookup() {
        let u = universe();
        let snaps = build_snapshots(&[], &u, &[d(2021, 1, 1), d(2019, 1, 1), d(2020, 1, 1)], &PropertyWhitelist::default());
        assert_eq!(snapshot_for_date(&snaps, d(2019, 6, 1)).unwrap().snapshot_date, d(2019, 1, 1));
        assert_eq!(snapshot_for_date(&snaps, d(2020, 1, 1)).unwrap().snapshot_date, d(2020, 1, 1));
        assert_eq!(snapshot_for_date(&snaps, d(2021, 12, 1)).unwrap().snapshot_date, d(2021, 1, 1));
        assert!(matches!(snapshot_for_date(&snaps, d(2018, 12, 31)), Err(GraphError::NoSnapshot(_))));
        // linear-scan oracle over a spread of dates
        for offset in 0..1200 {
            let q = d(2018, 12, 1) + chrono::Days::new(offset);
            let expected = snaps.iter().filter(|g| g.snapshot_date <= q).last().map(|g| g.snapshot_date);
            assert_eq!(snapshot_for_date(&snaps, q).ok().map(|g| g.snapshot_date), expected);
        }
    }

    #[test]
    fn induced_and_ablation() {
        let (g, _) = build_graph(&[rec("Q1", "P127", "Q3")], &universe(), d(2020, 1, 1), &PropertyWhitelist::default());
        let sub = g.induced(&["CCC".to_string(), "AAA".to_string(), "ZZZ".to_string()]);
        assert!(sub.has_edge(0, 1));
        assert_eq!(sub.neighbors(2).len(), 1);
        assert!(sub.is_well_formed());
        assert_eq!(g.without_edges().edge_count(), 0);
        let text = g.export_text();
        assert!(text.contains("edge 0 2 first Q1>P127>Q3"), "{text}");
    }

    #[test]
    fn yearly_dates() {
        assert_eq!(
            yearly_snapshot_dates(d(2019, 1, 2), d(2021, 3, 1)),
            vec![d(2019, 1, 1), d(2020, 1, 1), d(2021, 1, 1)]
        );
    }
}
