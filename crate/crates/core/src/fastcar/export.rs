//! CSV exports of temporal scores and replay statistics.

use super::ReplayStats;
use crate::error::{Error, Result};
use crate::model::TasEntry;
use crate::scalar::Scalar;

/// One `(token, layer, head)` row of the temporal-score trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TasRow {
    pub layer: usize,
    pub t: usize,
    pub i: usize,
    pub head: usize,
    pub score: f64,
    pub mean: f64,
    pub replayed: bool,
}

pub const TAS_HEADER: &str = "layer,t,i,head,score,mean,replayed";
pub const STATS_HEADER: &str = "layer,eligible,replayed,ratio";

pub fn tas_rows<S: Scalar>(entries: &[TasEntry<S>]) -> Vec<TasRow> {
    entries
        .iter()
        .flat_map(|e| {
            let r = &e.record;
            r.heads.iter().enumerate().map(move |(head, s)| TasRow {
                layer: r.layer,
                t: r.t,
                i: r.i,
                head,
                score: s.as_f64(),
                mean: r.mean.as_f64(),
                replayed: e.replayed,
            })
        })
        .collect()
}

pub fn write_tas_csv<S: Scalar>(entries: &[TasEntry<S>]) -> String {
    let mut out = format!("{TAS_HEADER}\n");
    for r in tas_rows(entries) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer, r.t, r.i, r.head, r.score, r.mean, r.replayed as u8
        ));
    }
    out
}

fn field<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {s:?}")))
}

fn rows(text: &str, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::Parse(format!("expected header {header:?}"))),
    }
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let cols: Vec<String> = l.split(',').map(str::to_owned).collect();
            if cols.len() != width {
                return Err(Error::Parse(format!(
                    "line {}: expected {width} columns",
                    n + 1
                )));
            }
            Ok((n + 1, cols))
        })
        .collect()
}

pub fn read_tas_csv(text: &str) -> Result<Vec<TasRow>> {
    rows(text, TAS_HEADER)?
        .into_iter()
        .map(|(n, c)| {
            Ok(TasRow {
                layer: field(&c[0], n)?,
                t: field(&c[1], n)?,
                i: field(&c[2], n)?,
                head: field(&c[3], n)?,
                score: field(&c[4], n)?,
                mean: field(&c[5], n)?,
                replayed: field::<u8>(&c[6], n)? != 0,
            })
        })
        .collect()
}

pub fn write_stats_csv(stats: &ReplayStats) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for l in 0..stats.eligible.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l,
            stats.eligible[l],
            stats.replayed[l],
            stats.layer_ratio(l)
        ));
    }
    out
}

pub fn read_stats_csv(text: &str) -> Result<ReplayStats> {
    let parsed = rows(text, STATS_HEADER)?;
    let mut stats = ReplayStats::new(parsed.len());
    for (idx, (n, c)) in parsed.into_iter().enumerate() {
        let layer: usize = field(&c[0], n)?;
        if layer != idx {
            return Err(Error::Parse(format!(
                "line {n}: layers must be listed in order"
            )));
        }
        stats.eligible[idx] = field(&c[1], n)?;
        stats.replayed[idx] = field(&c[2], n)?;
    }
    Ok(stats)
}
