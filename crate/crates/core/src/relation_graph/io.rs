use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{GraphError, RelationRecord, Universe};

#[derive(Debug, Serialize, Deserialize)]
struct UniverseRow {
    ticker: String,
    entity_id: String,
}

fn csv_err(context: &'static str) -> impl Fn(csv::Error) -> GraphError {
    move |source| GraphError::Csv {
        context: context.to_string(),
        source,
    }
}

/// Reads `subject,property,object,valid_from` rows.
pub fn read_relations<R: Read>(reader: R) -> Result<Vec<RelationRecord>, GraphError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(csv_err("relations csv"))).collect()
}

/// Reads `ticker,entity_id` rows.
pub fn read_universe<R: Read>(reader: R) -> Result<Universe, GraphError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows: Vec<UniverseRow> = rdr
        .deserialize()
        .map(|r| r.map_err(csv_err("universe csv")))
        .collect::<Result<_, _>>()?;
    Universe::new(rows.into_iter().map(|r| (r.ticker, r.entity_id)))
}

pub fn write_relations<W: Write>(writer: W, records: &[RelationRecord]) -> Result<(), GraphError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r).map_err(csv_err("relations csv"))?;
    }
    wtr.flush().map_err(|e| csv_err("relations csv")(e.into()))
}

pub fn write_universe<W: Write>(writer: W, universe: &Universe) -> Result<(), GraphError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (ticker, entity) in universe.pairs() {
        wtr.serialize(UniverseRow {
            ticker: ticker.to_string(),
            entity_id: entity.to_string(),
        })
        .map_err(csv_err("universe csv"))?;
    }
    wtr.flush().map_err(|e| csv_err("universe csv")(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_both_formats() {
        let rel = "subject,property,object,valid_from\nQ1,P127,Q2,2019-01-01\n";
        let recs = read_relations(rel.as_bytes()).unwrap();
        assert_eq!(recs[0].property, "P127");
        let uni = read_universe("ticker,entity_id\nBBB,Q2\nAAA,Q1\n".as_bytes()).unwrap();
        assert_eq!(uni.tickers(), &["AAA".to_string(), "BBB".to_string()]);

        let mut buf = Vec::new();
        write_universe(&mut buf, &uni).unwrap();
        assert_eq!(read_universe(buf.as_slice()).unwrap(), uni);
        let mut buf = Vec::new();
        write_relations(&mut buf, &recs).unwrap();
        assert_eq!(read_relations(buf.as_slice()).unwrap(), recs);
    }
}
