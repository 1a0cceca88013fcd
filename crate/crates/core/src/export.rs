//! Line-oriented export formats: per-input explanation records, saliency
//! records, and run-record files. One record per line, `key=value` fields
//! separated by single spaces; vector fields are comma-separated.

use crate::bla::{HardExplanation, SoftExplanation};
use crate::error::{Error, Result};
use crate::saliency::{Method, SaliencyMap};
use crate::train::ExplainedInput;
use std::io::Write;
use std::path::Path;

fn join_floats(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad float '{t}' in record")))
        })
        .collect()
}

fn fields_of(line: &str) -> Result<Vec<(&str, &str)>> {
    line.split_whitespace()
        .map(|part| {
            part.split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed record field '{part}'")))
        })
        .collect()
}

fn lookup<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config(format!("record missing field '{key}'")))
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad grid '{s}'")))?;
    Ok((
        h.parse()
            .map_err(|_| Error::Config(format!("bad grid '{s}'")))?,
        w.parse()
            .map_err(|_| Error::Config(format!("bad grid '{s}'")))?,
    ))
}

/// One explanation record line: index, label, prediction, grid, soft
/// explanation q, hard explanation bits, and the hard size.
pub fn explanation_record(e: &ExplainedInput) -> String {
    let delta: String = e
        .hard
        .delta
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect();
    format!(
        "index={} label={} prediction={} grid={}x{} size={} q={} delta={}",
        e.index,
        e.label,
        e.prediction,
        e.soft.grid.0,
        e.soft.grid.1,
        e.hard.size(),
        join_floats(&e.soft.q),
        delta
    )
}

pub fn parse_explanation_record(line: &str) -> Result<ExplainedInput> {
    let fields = fields_of(line)?;
    let grid = parse_grid(lookup(&fields, "grid")?)?;
    let q = parse_floats(lookup(&fields, "q")?)?;
    let delta: Vec<bool> = lookup(&fields, "delta")?
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Config(format!("bad delta bit '{other}'"))),
        })
        .collect::<Result<_>>()?;
    if q.len() != grid.0 * grid.1 || delta.len() != q.len() {
        return Err(Error::Config(format!(
            "record fields disagree with grid {}x{}",
            grid.0, grid.1
        )));
    }
    let size: usize = lookup(&fields, "size")?
        .parse()
        .map_err(|_| Error::Config("bad size".into()))?;
    if size != delta.iter().filter(|&&b| b).count() {
        return Err(Error::Config(
            "size field disagrees with delta bits".into(),
        ));
    }
    Ok(ExplainedInput {
        index: lookup(&fields, "index")?
            .parse()
            .map_err(|_| Error::Config("bad index".into()))?,
        prediction: lookup(&fields, "prediction")?
            .parse()
            .map_err(|_| Error::Config("bad prediction".into()))?,
        label: lookup(&fields, "label")?
            .parse()
            .map_err(|_| Error::Config("bad label".into()))?,
        soft: SoftExplanation { q, grid },
        hard: HardExplanation { delta, grid },
    })
}

/// One saliency record line: index, method tag, grid, scores.
pub fn saliency_record(index: usize, map: &SaliencyMap) -> String {
    format!(
        "index={} method={} grid={}x{} scores={}",
        index,
        map.method,
        map.grid.0,
        map.grid.1,
        join_floats(&map.scores)
    )
}

pub fn parse_saliency_record(line: &str) -> Result<(usize, SaliencyMap)> {
    let fields = fields_of(line)?;
    let grid = parse_grid(lookup(&fields, "grid")?)?;
    let scores = parse_floats(lookup(&fields, "scores")?)?;
    if scores.len() != grid.0 * grid.1 {
        return Err(Error::Config(format!(
            "{} scores for a {}x{} grid",
            scores.len(),
            grid.0,
            grid.1
        )));
    }
    let method = match lookup(&fields, "method")? {
        "CAM" => Method::Cam,
        "LIME" => Method::Lime,
        "BLA-SOFT" => Method::BlaSoft,
        "RANDOM" => Method::Random,
        other => return Err(Error::Config(format!("unknown method tag '{other}'"))),
    };
    Ok((
        lookup(&fields, "index")?
            .parse()
            .map_err(|_| Error::Config("bad index".into()))?,
        SaliencyMap {
            scores,
            grid,
            method,
        },
    ))
}

/// Writes records (any line-per-item iterator) to a file with a trailing
/// newline per record.
pub fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads non-empty lines from a record file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}
