//! Corpus CSV schema and the ground-truth JSON sidecar.
//!
//! The unit-level schema is `rct_id,x,d,y,t` with optional columns `m`,
//! `profit_per_unit`, and `time_index`. Trials are grouped by id with row
//! order preserved; a missing `m` defaults to the trial's unit count.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use super::{Corpus, CorpusError, Provenance, Rct, UnitRecord};

struct RctBuilder {
    id: String,
    units: Vec<UnitRecord>,
    m: Option<u64>,
    profit_per_unit: Option<f64>,
    time_index: Option<i64>,
}

struct Columns {
    rct_id: usize,
    x: usize,
    d: usize,
    y: usize,
    t: usize,
    m: Option<usize>,
    profit_per_unit: Option<usize>,
    time_index: Option<usize>,
}

impl Columns {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self, CorpusError> {
        let find = |name: &'static str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(CorpusError::MissingColumn(name))
        };
        let optional = |name: &str| headers.iter().position(|h| h == name);
        Ok(Self {
            rct_id: find("rct_id")?,
            x: find("x")?,
            d: find("d")?,
            y: find("y")?,
            t: find("t")?,
            m: optional("m"),
            profit_per_unit: optional("profit_per_unit"),
            time_index: optional("time_index"),
        })
    }
}

fn parse_finite(field: &str, name: &str, line: u64) -> Result<f64, CorpusError> {
    let value: f64 = field.trim().parse().map_err(|_| CorpusError::MalformedRow {
        line,
        reason: format!("cannot parse `{name}` from {field:?}"),
    })?;
    if !value.is_finite() {
        return Err(CorpusError::MalformedRow {
            line,
            reason: format!("`{name}` must be finite, got {field:?}"),
        });
    }
    Ok(value)
}

/// Reads a corpus from CSV, rejecting malformed rows by line number and
/// undersized trials by id.
pub fn ingest_csv(source: impl Read) -> Result<Corpus, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let columns = Columns::from_headers(reader.headers()?)?;

    let mut order: Vec<RctBuilder> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |col: usize| record.get(col).unwrap_or("");

        let x = parse_finite(get(columns.x), "x", line)?;
        let d = parse_finite(get(columns.d), "d", line)?;
        let y = parse_finite(get(columns.y), "y", line)?;
        let treated = match get(columns.t).trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(CorpusError::MalformedRow {
                    line,
                    reason: format!("`t` must be 0 or 1, got {other:?}"),
                })
            }
        };
        if d < 0.0 {
            return Err(CorpusError::MalformedRow {
                line,
                reason: format!("`d` must be nonnegative, got {d}"),
            });
        }
        let unit = UnitRecord { x, d, y, treated };

        let id = get(columns.rct_id).trim().to_string();
        if id.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty rct_id".to_string(),
            });
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(RctBuilder {
                id: id.clone(),
                units: Vec::new(),
                m: None,
                profit_per_unit: None,
                time_index: None,
            });
            order.len() - 1
        });
        let builder = &mut order[slot];
        builder.units.push(unit);

        if let Some(col) = columns.m {
            let field = get(col).trim();
            if !field.is_empty() {
                let m: u64 = field.parse().map_err(|_| CorpusError::MalformedRow {
                    line,
                    reason: format!("cannot parse `m` from {field:?}"),
                })?;
                if builder.m.replace(m).is_some_and(|old| old != m) {
                    return Err(CorpusError::InconsistentField {
                        id: builder.id.clone(),
                        field: "m",
                    });
                }
            }
        }
        if let Some(col) = columns.profit_per_unit {
            let field = get(col).trim();
            if !field.is_empty() {
                let p = parse_finite(field, "profit_per_unit", line)?;
                if builder.profit_per_unit.replace(p).is_some_and(|old| old != p) {
                    return Err(CorpusError::InconsistentField {
                        id: builder.id.clone(),
                        field: "profit_per_unit",
                    });
                }
            }
        }
        if let Some(col) = columns.time_index {
            let field = get(col).trim();
            if !field.is_empty() {
                let t: i64 = field.parse().map_err(|_| CorpusError::MalformedRow {
                    line,
                    reason: format!("cannot parse `time_index` from {field:?}"),
                })?;
                if builder.time_index.replace(t).is_some_and(|old| old != t) {
                    return Err(CorpusError::InconsistentField {
                        id: builder.id.clone(),
                        field: "time_index",
                    });
                }
            }
        }
    }

    let rcts = order
        .into_iter()
        .map(|b| {
            let m = b.m.unwrap_or(b.units.len() as u64);
            Rct::new(b.id, b.units, m, b.profit_per_unit, None, b.time_index)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(rcts, Provenance::Ingested)
}

/// Writes a corpus back to the unit-level CSV schema. Optional columns are
/// emitted only when some trial carries them.
pub fn write_corpus_csv(corpus: &Corpus, mut out: impl Write) -> Result<(), CorpusError> {
    let with_profit = corpus.rcts().iter().any(|r| r.profit_per_unit().is_some());
    let with_time = corpus.rcts().iter().any(|r| r.time_index().is_some());

    let mut header = String::from("rct_id,x,d,y,t,m");
    if with_profit {
        header.push_str(",profit_per_unit");
    }
    if with_time {
        header.push_str(",time_index");
    }
    writeln!(out, "{header}")?;

    for rct in corpus.rcts() {
        for unit in rct.units() {
            let mut row = format!(
                "{},{},{},{},{},{}",
                rct.id(),
                unit.x,
                unit.d,
                unit.y,
                u8::from(unit.treated),
                rct.population()
            );
            if with_profit {
                row.push(',');
                if let Some(p) = rct.profit_per_unit() {
                    row.push_str(&p.to_string());
                }
            }
            if with_time {
                row.push(',');
                if let Some(t) = rct.time_index() {
                    row.push_str(&t.to_string());
                }
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// Writes the `{rct_id: true_delta}` ground-truth sidecar for trials that
/// carry a known effect.
pub fn write_truth_json(corpus: &Corpus, mut out: impl Write) -> Result<(), CorpusError> {
    let truth: BTreeMap<&str, f64> = corpus
        .rcts()
        .iter()
        .filter_map(|r| r.true_delta().map(|d| (r.id(), d)))
        .collect();
    serde_json::to_writer_pretty(&mut out, &truth).map_err(std::io::Error::other)?;
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "rct_id,x,d,y,t\n\
                         a,1.0,0.5,2.0,0\n\
                         a,1.5,0.5,2.5,0\n\
                         a,1.0,0.5,3.0,1\n\
                         a,2.0,0.5,4.0,1\n";

    #[test]
    fn four_row_single_rct() {
        let corpus = ingest_csv(BASIC.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 1);
        let rct = &corpus.rcts()[0];
        assert_eq!(rct.n_treated(), 2);
        assert_eq!(rct.population(), 4);
        assert_eq!(rct.units().len(), 4);
    }

    #[test]
    fn negative_auxiliary_names_row() {
        let text = "rct_id,x,d,y,t\n\
                    a,1,0,2,0\na,1,0,2,0\na,1,-1,3,1\na,1,0,4,1\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err();
        match err {
            CorpusError::MalformedRow { line, reason } => {
                assert_eq!(line, 4);
                assert!(reason.contains('d'), "{reason}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn bad_treatment_flag_names_row() {
        let text = "rct_id,x,d,y,t\na,1,0,2,2\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { line: 2, .. }));
    }

    #[test]
    fn rejects_nan_values() {
        let text = "rct_id,x,d,y,t\na,NaN,0,2,0\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { line: 2, .. }));
    }

    #[test]
    fn undersized_rct_named() {
        let text = "rct_id,x,d,y,t\n\
                    tiny,1,0,2,0\ntiny,1,0,2,0\ntiny,1,0,3,1\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err();
        match err {
            CorpusError::ArmTooSmall { id, .. } => assert_eq!(id, "tiny"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn interleaved_ids_match_group_by_oracle() {
        let text = "rct_id,x,d,y,t\n\
                    a,1,0,10,0\nb,2,0,20,0\na,3,0,11,0\nb,4,0,21,0\n\
                    a,5,0,12,1\nb,6,0,22,1\na,7,0,13,1\nb,8,0,23,1\n";
        let corpus = ingest_csv(text.as_bytes()).unwrap();

        // Straightforward group-by on the same rows.
        let mut oracle: HashMap<&str, Vec<(f64, bool)>> = HashMap::new();
        for row in text.lines().skip(1) {
            let parts: Vec<&str> = row.split(',').collect();
            oracle
                .entry(parts[0])
                .or_default()
                .push((parts[3].parse().unwrap(), parts[4] == "1"));
        }

        assert_eq!(corpus.len(), 2);
        for rct in corpus.rcts() {
            let want = &oracle[rct.id()];
            let got: Vec<(f64, bool)> =
                rct.units().iter().map(|u| (u.y, u.treated)).collect();
            assert_eq!(&got, want);
        }
        assert_eq!(corpus.rcts()[0].id(), "a");
        assert_eq!(corpus.rcts()[1].id(), "b");
    }

    #[test]
    fn optional_columns_round_trip() {
        let text = "rct_id,x,d,y,t,m,profit_per_unit,time_index\n\
                    a,1,0,2,0,10,1.5,3\na,1,0,2,0,10,1.5,3\n\
                    a,1,0,3,1,10,1.5,3\na,1,0,4,1,10,1.5,3\n";
        let corpus = ingest_csv(text.as_bytes()).unwrap();
        let rct = &corpus.rcts()[0];
        assert_eq!(rct.population(), 10);
        assert_eq!(rct.profit_per_unit(), Some(1.5));
        assert_eq!(rct.time_index(), Some(3));

        let mut bytes = Vec::new();
        write_corpus_csv(&corpus, &mut bytes).unwrap();
        let again = ingest_csv(bytes.as_slice()).unwrap();
        assert_eq!(corpus.rcts(), again.rcts());
    }

    #[test]
    fn m_smaller_than_units_rejected() {
        let text = "rct_id,x,d,y,t,m\n\
                    a,1,0,2,0,2\na,1,0,2,0,2\na,1,0,3,1,2\na,1,0,4,1,2\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::PopulationTooSmall { .. }));
    }

    #[test]
    fn truth_sidecar_lists_synthetic_deltas() {
        let cfg = crate::GeneratorConfig {
            n_rcts: 3,
            units_per_rct: (10, 12),
            ..Default::default()
        };
        let corpus = crate::corpus::simulate_corpus(&cfg, 9).unwrap();
        let mut bytes = Vec::new();
        write_truth_json(&corpus, &mut bytes).unwrap();
        let parsed: BTreeMap<String, f64> = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(parsed.len(), 3);
        for rct in corpus.rcts() {
            assert_eq!(parsed[rct.id()], rct.true_delta().unwrap());
        }
    }
}
