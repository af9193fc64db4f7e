//! Counting-process CSV, the heart-transplant covariate construction, and
//! report emission (CSV, JSON, SVG).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::censor::CensorCurve;
use crate::data::{CovariatePath, Dataset, Subject};
use crate::error::{Error, Result};
use crate::sim::{SimSubjectTruth, StudyReport};

/// How the instrument vector Z is built from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum InstrumentRule {
    /// `z_*` columns, constant within a subject.
    #[default]
    Columns,
    /// Z̃ = X(Y), the covariates in force at the last observation time.
    AtY,
}

impl std::str::FromStr for InstrumentRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "columns" => Ok(Self::Columns),
            "at-y" | "covariates-at-y" => Ok(Self::AtY),
            other => Err(Error::Config(format!("unknown instrument rule '{other}' (use columns or at-y)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingProcessRow {
    pub subject_id: String,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
    pub instruments: Vec<f64>,
}

/// A dataset together with the names it was read under.
#[derive(Debug, Clone)]
pub struct NamedDataset {
    pub dataset: Dataset,
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
}

fn parse_number(field: &str, column: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("column '{column}': '{field}' is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("column '{column}' is not finite") });
    }
    Ok(v)
}

/// Reads counting-process rows. Lines starting with `#` are comments.
pub fn read_rows<R: Read>(reader: R) -> Result<(Vec<CountingProcessRow>, Vec<String>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column '{name}'") })
    };
    let (ci, cs, ct, ce) = (find("id")?, find("start")?, find("stop")?, find("event")?);
    let mut cov_cols = Vec::new();
    let mut inst_cols = Vec::new();
    for (k, h) in headers.iter().enumerate() {
        if [ci, cs, ct, ce].contains(&k) {
            continue;
        }
        if h.starts_with("z_") {
            inst_cols.push(k);
        } else {
            cov_cols.push(k);
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |k: usize| rec.get(k).unwrap_or("");
        let start = parse_number(get(cs), "start", line)?;
        let stop = parse_number(get(ct), "stop", line)?;
        let event = match get(ce) {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse { line, message: format!("event must be 0 or 1, got '{other}'") }),
        };
        if start < 0.0 || stop <= start {
            return Err(Error::Parse { line, message: format!("need 0 <= start < stop, got ({start}, {stop})") });
        }
        let covariates =
            cov_cols.iter().map(|&k| parse_number(get(k), &headers[k], line)).collect::<Result<Vec<_>>>()?;
        let instruments =
            inst_cols.iter().map(|&k| parse_number(get(k), &headers[k], line)).collect::<Result<Vec<_>>>()?;
        rows.push(CountingProcessRow { subject_id: get(ci).to_string(), start, stop, event, covariates, instruments });
    }
    let cov_names = cov_cols.iter().map(|&k| headers[k].clone()).collect();
    let inst_names = inst_cols.iter().map(|&k| headers[k].clone()).collect();
    Ok((rows, cov_names, inst_names))
}

/// Groups rows into subjects and checks each subject's rows are contiguous
/// from 0 with at most a final event.
pub fn assemble(rows: &[CountingProcessRow], rule: InstrumentRule) -> Result<(Dataset, Vec<String>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&CountingProcessRow>> = HashMap::new();
    for r in rows {
        let g = groups.entry(r.subject_id.as_str()).or_default();
        if g.is_empty() {
            order.push(&r.subject_id);
        }
        g.push(r);
    }
    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let g = &groups[id];
        let err = |message: String| Error::Record { subject: id.to_string(), message };
        if g[0].start != 0.0 {
            return Err(err(format!("first row starts at {} instead of 0", g[0].start)));
        }
        for w in g.windows(2) {
            if w[1].start < w[0].stop {
                return Err(err(format!("rows overlap at ({}, {}] and ({}, {}]", w[0].start, w[0].stop, w[1].start, w[1].stop)));
            }
            if w[1].start > w[0].stop {
                return Err(err(format!("gap between {} and {}", w[0].stop, w[1].start)));
            }
            if w[0].event {
                return Err(err(format!("event on a non-final row ending at {}", w[0].stop)));
            }
        }
        let last = g[g.len() - 1];
        let starts = g.iter().map(|r| r.start).collect();
        let values = g
            .iter()
            .map(|r| std::iter::once(1.0).chain(r.covariates.iter().copied()).collect())
            .collect();
        let path = CovariatePath::new(starts, values).map_err(|e| err(e.to_string()))?;
        let z = match rule {
            InstrumentRule::AtY => path.value_at(last.stop)?.to_vec(),
            InstrumentRule::Columns => {
                if g.iter().any(|r| r.instruments != g[0].instruments) {
                    return Err(err("instrument columns change within the subject".into()));
                }
                if g[0].instruments.len() != g[0].covariates.len() {
                    return Err(err(format!(
                        "{} instrument columns for {} covariates; use the at-y rule or add z_ columns",
                        g[0].instruments.len(),
                        g[0].covariates.len()
                    )));
                }
                std::iter::once(1.0).chain(g[0].instruments.iter().copied()).collect()
            }
        };
        subjects.push(Subject::new(last.stop, last.event, path, z));
    }
    let dataset = Dataset::new(subjects);
    dataset.ensure_valid()?;
    Ok((dataset, order.into_iter().map(str::to_string).collect()))
}

/// ingest(csv, rule)
pub fn ingest<R: Read>(reader: R, rule: InstrumentRule) -> Result<NamedDataset> {
    let (rows, covariate_names, _) = read_rows(reader)?;
    let (dataset, ids) = assemble(&rows, rule)?;
    Ok(NamedDataset { dataset, ids, covariate_names })
}

pub fn ingest_path(path: &Path, rule: InstrumentRule) -> Result<NamedDataset> {
    ingest(std::fs::File::open(path)?, rule)
}

/// Counting-process rows for a dataset. Segments starting at or after Y are dropped.
pub fn dataset_rows(dataset: &Dataset, ids: Option<&[String]>) -> Vec<CountingProcessRow> {
    let mut rows = Vec::new();
    for (i, s) in dataset.subjects().iter().enumerate() {
        let id = ids.map_or_else(|| (i + 1).to_string(), |ids| ids[i].clone());
        let segs: Vec<_> = s.path.segments().filter(|(a, _, _)| *a < s.y).collect();
        for (k, (a, b, x)) in segs.iter().enumerate() {
            let last = k + 1 == segs.len();
            rows.push(CountingProcessRow {
                subject_id: id.clone(),
                start: *a,
                stop: if last { s.y } else { *b },
                event: last && s.delta,
                covariates: x[1..].to_vec(),
                instruments: s.z[1..].to_vec(),
            });
        }
    }
    rows
}

/// Writes rows with shortest round-trip float formatting.
pub fn write_rows<W: Write>(
    out: W,
    rows: &[CountingProcessRow],
    covariate_names: &[String],
    header_comment: Option<&str>,
) -> Result<()> {
    let mut out = out;
    if let Some(c) = header_comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let n_inst = rows.first().map_or(0, |r| r.instruments.len());
    let mut header = vec!["id".to_string(), "start".into(), "stop".into(), "event".into()];
    header.extend(covariate_names.iter().cloned());
    header.extend((1..=n_inst).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone(), r.start.to_string(), r.stop.to_string(), u8::from(r.event).to_string()];
        rec.extend(r.covariates.iter().map(f64::to_string));
        rec.extend(r.instruments.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn default_covariate_names(dim: usize) -> Vec<String> {
    (1..dim).map(|k| format!("x{k}")).collect()
}

/// emit(dataset) as CSV text.
pub fn emit(dataset: &Dataset, ids: Option<&[String]>, covariate_names: Option<&[String]>) -> Result<String> {
    let names = covariate_names.map_or_else(|| default_covariate_names(dataset.dim()), <[String]>::to_vec);
    let mut buf = Vec::new();
    write_rows(&mut buf, &dataset_rows(dataset, ids), &names, None)?;
    String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))
}

/// One heart-transplant candidate, times in days since acceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct StanfordRecord {
    pub id: String,
    pub wait: Option<f64>,
    pub last_seen: f64,
    pub died: bool,
    pub age_at_transplant: Option<f64>,
    pub mismatch: Option<f64>,
}

pub const STANFORD_COVARIATES: [&str; 3] = ["transplant", "age", "mismatch"];

fn parse_date(s: &str, line: usize, column: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| Error::Parse { line, message: format!("column '{column}': bad date '{s}'") })
}

/// Reads raw dated records (columns id, birth_date, accept_date, tx_date,
/// fu_date, fustat, mscore).
///
/// A follow-up of 0 days becomes 0.5, and a transplant on the last day is moved
/// half a day earlier. Transplanted patients without a mismatch score are
/// dropped with a log message.
pub fn read_stanford_raw<R: Read>(reader: R) -> Result<Vec<StanfordRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column '{name}'") })
    };
    let cols = [col("id")?, col("birth_date")?, col("accept_date")?, col("tx_date")?, col("fu_date")?, col("fustat")?, col("mscore")?];
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |k: usize| rec.get(cols[k]).unwrap_or("").trim();
        let birth = parse_date(get(1), line, "birth_date")?;
        let accept = parse_date(get(2), line, "accept_date")?;
        let fu = parse_date(get(4), line, "fu_date")?;
        let days = |d: NaiveDate| (d - accept).num_days() as f64;
        let mut last_seen = days(fu);
        if last_seen < 0.0 {
            return Err(Error::Parse { line, message: "follow-up precedes acceptance".into() });
        }
        if last_seen == 0.0 {
            last_seen = 0.5;
        }
        let died = match get(5) {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse { line, message: format!("fustat must be 0 or 1, got '{other}'") }),
        };
        let (mut wait, mut age, mut mismatch) = (None, None, None);
        if !get(3).is_empty() {
            let tx = parse_date(get(3), line, "tx_date")?;
            if get(6).is_empty() || get(6) == "NA" {
                log::info!("dropping patient {} (transplanted, no mismatch score)", get(0));
                continue;
            }
            let mut w = days(tx);
            if w == last_seen {
                w -= 0.5;
            }
            wait = Some(w);
            age = Some((tx - birth).num_days() as f64 / 365.25);
            mismatch = Some(parse_number(get(6), "mscore", line)?);
        }
        out.push(StanfordRecord { id: get(0).to_string(), wait, last_seen, died, age_at_transplant: age, mismatch });
    }
    Ok(out)
}

/// stanford_covariates(records): transplant status I(t ≥ W), age at
/// transplant minus 35 and mismatch minus 0.5 from the transplant on, zero before.
pub fn stanford_covariates(records: &[StanfordRecord]) -> Result<Vec<CountingProcessRow>> {
    let mut rows = Vec::new();
    for r in records {
        let err = |message: String| Error::Record { subject: r.id.clone(), message };
        let row = |start: f64, stop: f64, event: bool, x: Vec<f64>| CountingProcessRow {
            subject_id: r.id.clone(),
            start,
            stop,
            event,
            covariates: x,
            instruments: vec![],
        };
        match r.wait {
            None => rows.push(row(0.0, r.last_seen, r.died, vec![0.0; 3])),
            Some(w) => {
                if w >= r.last_seen {
                    return Err(err(format!("transplant at {w} is not before last follow-up {}", r.last_seen)));
                }
                if w < 0.0 {
                    return Err(err(format!("negative waiting time {w}")));
                }
                let age = r.age_at_transplant.ok_or_else(|| err("transplanted without age".into()))?;
                let mm = r.mismatch.ok_or_else(|| err("transplanted without mismatch score".into()))?;
                let after = vec![1.0, age - 35.0, mm - 0.5];
                if w > 0.0 {
                    rows.push(row(0.0, w, false, vec![0.0; 3]));
                }
                rows.push(row(w, r.last_seen, r.died, after));
            }
        }
    }
    Ok(rows)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn censor_curve_csv(curve: &CensorCurve) -> String {
    let mut s = String::from("time,survival,cumhaz\n");
    for ((t, g), l) in curve.jump_times().iter().zip(curve.survival_values()).zip(curve.cumhaz_values()) {
        let _ = writeln!(s, "{t},{g},{l}");
    }
    s
}

pub fn truth_csv(truth: &[SimSubjectTruth]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, t) in truth.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            t.tau.to_string(),
            t.t_true.to_string(),
            t.c.to_string(),
            t.s1.to_string(),
            t.s2.to_string(),
            t.v1.to_string(),
            t.v2.to_string(),
            t.z1.to_string(),
            t.z2.to_string(),
            t.w1.to_string(),
            t.w2.to_string(),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("id,tau,t_true,c,s1,s2,v1,v2,z1,z2,w1,w2\n{body}"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// The study table; undefined statistics are left empty.
pub fn study_csv(report: &StudyReport) -> String {
    let mut s = String::from("scenario,n,censoring,coefficient,mean,median,sd,iqsd,coverage\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.n,
            r.censoring,
            r.coefficient,
            opt(r.mean),
            opt(r.median),
            opt(r.sd),
            opt(r.iqsd),
            opt(r.coverage)
        );
    }
    s
}

/// One point of a quantile-coefficient curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub q: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("q,estimate,ci_lo,ci_hi\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.q, p.estimate, p.lower, p.upper);
    }
    s
}

/// Estimate against q with a shaded pointwise interval band.
pub fn curve_svg(title: &str, points: &[CurvePoint]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", w / 2.0, escape(title));
    let finite: Vec<&CurvePoint> =
        points.iter().filter(|p| p.estimate.is_finite() && p.lower.is_finite() && p.upper.is_finite()).collect();
    if finite.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let qmin = finite.iter().map(|p| p.q).fold(f64::INFINITY, f64::min);
    let qmax = finite.iter().map(|p| p.q).fold(f64::NEG_INFINITY, f64::max);
    let mut ymin = finite.iter().map(|p| p.lower.min(p.estimate)).fold(f64::INFINITY, f64::min);
    let mut ymax = finite.iter().map(|p| p.upper.max(p.estimate)).fold(f64::NEG_INFINITY, f64::max);
    if ymin > 0.0 {
        ymin = 0.0;
    }
    if ymax < 0.0 {
        ymax = 0.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let qspan = if qmax > qmin { qmax - qmin } else { 1.0 };
    let px = |q: f64| m + (q - qmin) / qspan * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - ymin) / (ymax - ymin) * (h - 2.0 * m);
    let band: Vec<String> = finite
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.q), py(p.upper)))
        .chain(finite.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.q), py(p.lower))))
        .collect();
    let _ = writeln!(s, "<polygon points=\"{}\" fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\"/>", band.join(" "));
    let line: Vec<String> = finite.iter().map(|p| format!("{:.2},{:.2}", px(p.q), py(p.estimate))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\"/>", line.join(" "));
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>", py(0.0), w - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{m}\" y2=\"{m}\" stroke=\"black\"/>", h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>", h - m, w - m);
    for (v, anchor) in [(qmin, "start"), (qmax, "end")] {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\">{v:.2}</text>", px(v), h - m + 16.0);
    }
    for v in [ymin, ymax] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{v:.3}</text>", m - 4.0, py(v) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">q</text>", w / 2.0, h - 8.0);
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
