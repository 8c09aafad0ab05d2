//! Long-format replicate CSVs and wide outcome CSVs.
//!
//! Replicates: header `subject_id,replicate_index,value`; one row per
//! observed day; absent rows are missing days. Outcomes: header
//! `subject_id,<outcome>,<covariate...>`. Empty or `NA` cells are missing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{OutcomePanel, ReplicatePanel};

pub const REPLICATE_HEADER: [&str; 3] = ["subject_id", "replicate_index", "value"];

fn parse_cell(raw: &str, what: impl Fn() -> String) -> Result<Option<f64>> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Data(format!("{}: `{t}` is not a number", what())))
}

/// Reads a long-format replicate file. Subjects keep first-appearance order;
/// replicates are ordered by index within each subject.
pub fn read_replicates<R: Read>(reader: R) -> Result<ReplicatePanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let header: Vec<&str> = headers.iter().collect();
    if header != REPLICATE_HEADER {
        return Err(Error::Data(format!(
            "replicate file header must be `{}`, found `{}`",
            REPLICATE_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<i64, Option<f64>>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let id = rec[0].to_string();
        let idx: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: replicate_index `{}` is not an integer", &rec[1])))?;
        let value = parse_cell(&rec[2], || format!("line {line}"))?;
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if entry.insert(idx, value).is_some() {
            return Err(Error::Data(format!(
                "duplicate (subject, replicate) key (`{id}`, {idx}) at line {line}"
            )));
        }
    }
    if order.is_empty() {
        return Err(Error::Data("replicate file has no rows".into()));
    }
    let width = rows.values().map(|m| m.values().filter(|v| v.is_some()).count()).max().unwrap_or(0);
    for id in &order {
        if rows[id].values().all(Option::is_none) {
            return Err(Error::Data(format!("subject `{id}` has zero observed replicates")));
        }
    }
    let n = order.len();
    let mut values = DMatrix::from_element(n, width, f64::NAN);
    let mut observed = DMatrix::from_element(n, width, false);
    for (i, id) in order.iter().enumerate() {
        for (slot, v) in rows[id].values().flatten().enumerate() {
            values[(i, slot)] = *v;
            observed[(i, slot)] = true;
        }
    }
    ReplicatePanel::new(order, values, observed, None)
}

/// Writes observed replicates in long format with 17 significant digits,
/// which round-trips every `f64` exactly.
pub fn write_replicates<W: Write>(panel: &ReplicatePanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPLICATE_HEADER)?;
    for (i, id) in panel.subject_ids().iter().enumerate() {
        for j in 0..panel.max_replicates() {
            if panel.observed()[(i, j)] {
                let v = format!("{:.16e}", panel.values()[(i, j)]);
                w.write_record([id.as_str(), &(j + 1).to_string(), &v])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the outcome file, selecting `outcome` and `covariates` by name.
pub fn read_outcomes<R: Read>(reader: R, outcome: &str, covariates: &[String]) -> Result<OutcomePanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("subject_id") {
        return Err(Error::Data("outcome file must start with a `subject_id` column".into()));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .filter(|&p| p > 0)
            .ok_or_else(|| Error::Data(format!("unknown column `{name}` in outcome file")))
    };
    let y_col = find(outcome)?;
    let c_cols: Vec<usize> = covariates.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut y = Vec::new();
    let mut c = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate subject `{id}` in outcome file at line {line}")));
        }
        let cell = |k: usize| -> Result<f64> {
            let raw = rec.get(k).unwrap_or("");
            Ok(parse_cell(raw, || format!("line {line}, column `{}`", &headers[k]))?.unwrap_or(f64::NAN))
        };
        y.push(cell(y_col)?);
        for &k in &c_cols {
            c.push(cell(k)?);
        }
        ids.push(id);
    }
    let n = ids.len();
    let p = c_cols.len();
    OutcomePanel::new(
        ids,
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, p, &c),
        covariates.to_vec(),
    )
}

pub fn write_outcomes<W: Write>(outcomes: &OutcomePanel, outcome_name: &str, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), outcome_name.to_string()];
    header.extend(outcomes.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..outcomes.len() {
        let mut row = vec![outcomes.subject_ids[i].clone(), format!("{:.16e}", outcomes.y[i])];
        row.extend(outcomes.covariates.row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Restricts both panels to their shared subjects, in replicate-panel order.
pub fn align(panel: &ReplicatePanel, outcomes: &OutcomePanel) -> Result<(ReplicatePanel, OutcomePanel)> {
    let index: HashMap<&str, usize> = outcomes
        .subject_ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let (rows, out_rows): (Vec<usize>, Vec<usize>) = panel
        .subject_ids()
        .iter()
        .enumerate()
        .filter_map(|(i, id)| index.get(id.as_str()).map(|&k| (i, k)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::Data("replicate and outcome files share no subject ids".into()));
    }
    let sub = panel.select(&rows)?;
    let out = OutcomePanel::new(
        out_rows.iter().map(|&k| outcomes.subject_ids[k].clone()).collect(),
        DVector::from_iterator(out_rows.len(), out_rows.iter().map(|&k| outcomes.y[k])),
        outcomes.covariates.select_rows(out_rows.iter()),
        outcomes.covariate_names.clone(),
    )?;
    Ok((sub, out))
}
