use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{aggregate, EvalRecord};

pub const RECORDS_HEADER: &str = "# testbed records v1";
pub const LEADERBOARD_HEADER: &str = "# testbed leaderboard v1";

const RECORD_COLUMNS: [&str; 10] = [
    "agent",
    "beta",
    "train_size",
    "tau",
    "kl_or_nll",
    "stderr",
    "count",
    "seconds",
    "seed",
    "failed",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Records as CSV. Floats use the shortest representation that parses back
/// to the same value.
pub fn write_records_csv<W: Write>(mut out: W, records: &[EvalRecord]) -> Result<()> {
    writeln!(out, "{RECORDS_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.write_record([
            r.agent.clone(),
            opt(r.beta),
            opt(r.train_size),
            r.tau.to_string(),
            r.kl_or_nll.to_string(),
            r.stderr.to_string(),
            r.count.to_string(),
            r.seconds.to_string(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn records_to_csv(records: &[EvalRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_records_csv(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, line: usize, col: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    row[col].parse().map_err(|e: T::Err| Error::Parse {
        row: line,
        column: RECORD_COLUMNS[col].to_string(),
        message: e.to_string(),
    })
}

fn opt_field<T: std::str::FromStr>(row: &csv::StringRecord, line: usize, col: usize) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if row[col].is_empty() {
        Ok(None)
    } else {
        field(row, line, col).map(Some)
    }
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(RECORD_COLUMNS) {
        return Err(Error::Parse {
            row: 0,
            column: "(header)".into(),
            message: format!("expected columns {}", RECORD_COLUMNS.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 1;
        records.push(EvalRecord {
            agent: row[0].to_string(),
            beta: opt_field(&row, line, 1)?,
            train_size: opt_field(&row, line, 2)?,
            tau: field(&row, line, 3)?,
            kl_or_nll: field(&row, line, 4)?,
            stderr: field(&row, line, 5)?,
            count: field(&row, line, 6)?,
            seconds: field(&row, line, 7)?,
            seed: field(&row, line, 8)?,
            error: (!row[9].is_empty()).then(|| row[9].to_string()),
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub agent: String,
    pub tau: usize,
    pub kl_or_nll: f64,
    pub stderr: f64,
    pub count: usize,
    /// Aggregate score divided by the baseline's aggregate at the same `tau`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub baseline: String,
    pub rows: Vec<LeaderboardRow>,
}

/// Aggregate the per-cell records per `(agent, tau)` and normalise by the
/// baseline agent. Timing is left out so the output is reproducible.
pub fn emit_report(records: &[EvalRecord], baseline: &str) -> Result<Leaderboard> {
    let summary = aggregate(records);
    let mut rows = Vec::new();
    for r in &summary {
        let base = summary
            .iter()
            .find(|b| b.agent == baseline && b.tau == r.tau)
            .ok_or_else(|| Error::usage(format!("baseline agent \"{baseline}\" has no records at tau = {}", r.tau)))?;
        rows.push(LeaderboardRow {
            agent: r.agent.clone(),
            tau: r.tau,
            kl_or_nll: r.kl_or_nll,
            stderr: r.stderr,
            count: r.count,
            normalized: r.kl_or_nll / base.kl_or_nll,
        });
    }
    if rows.is_empty() {
        return Err(Error::usage("no per-cell records to report"));
    }
    rows.sort_by(|a, b| a.tau.cmp(&b.tau).then(a.agent.cmp(&b.agent)));
    Ok(Leaderboard {
        baseline: baseline.to_string(),
        rows,
    })
}

impl Leaderboard {
    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        writeln!(buf, "{LEADERBOARD_HEADER}")?;
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["agent", "tau", "kl_or_nll", "stderr", "count", "normalized"])?;
        for r in &self.rows {
            w.write_record([
                r.agent.clone(),
                r.tau.to_string(),
                r.kl_or_nll.to_string(),
                r.stderr.to_string(),
                r.count.to_string(),
                r.normalized.to_string(),
            ])?;
        }
        w.flush()?;
        drop(w);
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(agent: &str, t: Option<usize>, tau: usize, kl: f64) -> EvalRecord {
        EvalRecord {
            agent: agent.into(),
            beta: t.map(|_| 0.1),
            train_size: t,
            tau,
            kl_or_nll: kl,
            stderr: 0.01,
            count: 50,
            seconds: 1.5,
            seed: 7,
            error: None,
        }
    }

    fn fixture() -> Vec<EvalRecord> {
        vec![
            record("mlp", Some(10), 1, 0.4),
            record("mlp", Some(30), 1, 0.2),
            record("mlp", Some(10), 100, 20.0),
            record("mlp", Some(30), 100, 10.0),
            record("half", Some(10), 1, 0.2),
            record("half", Some(30), 1, 0.1),
            record("half", Some(10), 100, 10.0),
            record("half", Some(30), 100, 5.0),
        ]
    }

    #[test]
    fn baseline_normalises_to_one_and_ratios_follow() {
        let board = emit_report(&fixture(), "mlp").unwrap();
        assert_eq!(board.rows.len(), 4);
        for row in &board.rows {
            let want = if row.agent == "mlp" { 1.0 } else { 0.5 };
            assert!((row.normalized - want).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn missing_baseline_is_a_usage_error() {
        assert!(matches!(emit_report(&fixture(), "ensemble"), Err(Error::Usage(_))));
    }

    #[test]
    fn reports_are_byte_reproducible_and_ignore_timing() {
        let a = emit_report(&fixture(), "mlp").unwrap();
        let mut slow = fixture();
        slow.iter_mut().for_each(|r| r.seconds *= 10.0);
        slow.reverse();
        let b = emit_report(&slow, "mlp").unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.to_csv().unwrap().starts_with(LEADERBOARD_HEADER));
    }

    #[test]
    fn records_round_trip_with_special_values() {
        let mut records = fixture();
        records.push(EvalRecord {
            error: Some("agent training failed, badly".into()),
            kl_or_nll: f64::NAN,
            stderr: f64::INFINITY,
            ..record("odd,name", None, 3, 0.0)
        });
        let text = records_to_csv(&records).unwrap();
        assert!(text.starts_with(RECORDS_HEADER));
        let back = read_records_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), records.len());
        assert_eq!(back[..8], records[..8]);
        assert!(back[8].kl_or_nll.is_nan() && back[8].stderr == f64::INFINITY);
        assert_eq!(back[8].agent, "odd,name");
        assert_eq!(back[8].error, records[8].error);
    }

    #[test]
    fn bad_cells_are_located() {
        let text = format!("{RECORDS_HEADER}\n{}\nmlp,0.1,10,1,abc,0,1,0,0,\n", RECORD_COLUMNS.join(","));
        match read_records_csv(text.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "kl_or_nll")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn finite_records_round_trip_exactly(kl in -1e6f64..1e6, se in 0.0f64..10.0, beta in 1e-3f64..1.0, seed in any::<u64>()) {
            let r = EvalRecord { beta: Some(beta), seed, stderr: se, ..record("a", Some(3), 1, kl) };
            let back = read_records_csv(records_to_csv(std::slice::from_ref(&r)).unwrap().as_bytes()).unwrap();
            prop_assert_eq!(back, vec![r]);
        }

        #[test]
        fn normalised_scores_are_scale_free(c in 1e-3f64..1e3) {
            let scaled: Vec<EvalRecord> = fixture().into_iter().map(|r| EvalRecord { kl_or_nll: r.kl_or_nll * c, ..r }).collect();
            let a = emit_report(&fixture(), "mlp").unwrap();
            let b = emit_report(&scaled, "mlp").unwrap();
            for (x, y) in a.rows.iter().zip(&b.rows) {
                prop_assert!((x.normalized - y.normalized).abs() <= 1e-12 * x.normalized.abs().max(1.0));
            }
        }
    }
}
