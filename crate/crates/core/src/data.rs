//! Observed left-truncated, right-censored data and its counting-process
//! bookkeeping.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};

/// One recruited subject: observed end `y = min(T, A + C)`, truncation time
/// `a`, failure indicator, error-prone covariates `w` and exact incidence
/// covariates `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub y: f64,
    pub a: f64,
    pub delta: bool,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
}

impl Subject {
    pub fn new(y: f64, a: f64, delta: bool, w: Vec<f64>, z: Vec<f64>) -> Self {
        Self { y, a, delta, w, z }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.y.is_finite() || !self.a.is_finite() {
            return Err(format!("times must be finite (y={}, a={})", self.y, self.a));
        }
        if self.a < 0.0 {
            return Err(format!("truncation time a={} is negative", self.a));
        }
        if self.a > self.y {
            return Err(format!("truncation time a={} exceeds observed time y={}", self.a, self.y));
        }
        if self.w.iter().chain(&self.z).any(|v| !v.is_finite()) {
            return Err("covariates must be finite".into());
        }
        Ok(())
    }
}

/// Risk-set indicator `R(t) = I(a <= t <= y)`.
pub fn at_risk(s: &Subject, t: f64) -> bool {
    s.a <= t && t <= s.y
}

/// Distinct uncensored times with their tie multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTimes {
    pub times: Vec<f64>,
    pub multiplicities: Vec<u32>,
}

pub fn event_times(subjects: &[Subject]) -> Result<EventTimes> {
    let mut raw: Vec<f64> = subjects.iter().filter(|s| s.delta).map(|s| s.y).collect();
    if raw.is_empty() {
        return Err(Error::NotEstimable);
    }
    raw.sort_by(|a, b| a.total_cmp(b));
    let mut times = Vec::new();
    let mut multiplicities: Vec<u32> = Vec::new();
    for t in raw {
        if times.last() == Some(&t) {
            *multiplicities.last_mut().unwrap() += 1;
        } else {
            times.push(t);
            multiplicities.push(1);
        }
    }
    Ok(EventTimes { times, multiplicities })
}

/// Counting-process layout of a sample over its distinct event times.
///
/// Levels are indexed `0..=K`: level 0 is the `-inf` value before the first
/// jump and level `k` is `H(t_k)`. Subject `i` is at risk at event `k` exactly
/// when `entry[i] < k <= exit[i]`.
#[derive(Debug, Clone)]
pub struct EventGrid {
    pub(crate) times: Vec<f64>,
    pub(crate) dn: Vec<f64>,
    pub(crate) risk_ptr: Vec<usize>,
    /// Built on first use; large generated samples often never need it.
    risk_idx: OnceLock<Vec<u32>>,
    pub(crate) entry: Vec<usize>,
    pub(crate) exit: Vec<usize>,
}

impl EventGrid {
    fn build(subjects: &[Subject], events: &EventTimes) -> Self {
        let times = events.times.clone();
        let k = times.len();
        let entry: Vec<usize> = subjects
            .iter()
            .map(|s| times.partition_point(|&t| t < s.a))
            .collect();
        let exit: Vec<usize> = subjects
            .iter()
            .map(|s| times.partition_point(|&t| t <= s.y))
            .collect();
        let mut diff = vec![0isize; k + 2];
        for (&e, &x) in entry.iter().zip(&exit) {
            if x > e {
                diff[e + 1] += 1;
                diff[x + 1] -= 1;
            }
        }
        let mut risk_ptr = vec![0usize; k + 1];
        let mut running = 0isize;
        for j in 1..=k {
            running += diff[j];
            risk_ptr[j] = risk_ptr[j - 1] + running as usize;
        }
        Self {
            times,
            dn: events.multiplicities.iter().map(|&m| m as f64).collect(),
            risk_ptr,
            risk_idx: OnceLock::new(),
            entry,
            exit,
        }
    }

    pub fn n_events(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Subjects at risk at event `k` (1-based).
    #[inline]
    pub fn risk_set(&self, k: usize) -> &[u32] {
        let idx = self.risk_idx.get_or_init(|| self.build_index());
        &idx[self.risk_ptr[k - 1]..self.risk_ptr[k]]
    }

    fn build_index(&self) -> Vec<u32> {
        // risk_ptr[j-1]..risk_ptr[j] holds event j (1-based)
        let k = self.times.len();
        let mut fill = self.risk_ptr.clone();
        let mut idx = vec![0u32; self.risk_ptr[k]];
        for (i, (&e, &x)) in self.entry.iter().zip(&self.exit).enumerate() {
            for j in (e + 1)..=x {
                idx[fill[j - 1]] = i as u32;
                fill[j - 1] += 1;
            }
        }
        idx
    }

    pub fn entry_level(&self, i: usize) -> usize {
        self.entry[i]
    }

    pub fn exit_level(&self, i: usize) -> usize {
        self.exit[i]
    }
}

/// A validated observed sample. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Sample {
    subjects: Vec<Subject>,
    p: usize,
    q: usize,
    events: EventTimes,
    grid: EventGrid,
}

impl Sample {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::Domain("sample has no subjects".into()))?;
        let (p, q) = (first.w.len(), first.z.len());
        let mut issues = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            if s.w.len() != p || s.z.len() != q {
                issues.push(RowIssue {
                    row: i + 1,
                    message: format!(
                        "covariate widths ({}, {}) differ from ({p}, {q})",
                        s.w.len(),
                        s.z.len()
                    ),
                });
            } else if let Err(message) = s.validate() {
                issues.push(RowIssue { row: i + 1, message });
            }
        }
        if !issues.is_empty() {
            return Err(Error::Ingest(issues));
        }
        let events = event_times(&subjects)?;
        let grid = EventGrid::build(&subjects, &events);
        Ok(Self {
            subjects,
            p,
            q,
            events,
            grid,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn events(&self) -> &EventTimes {
        &self.events
    }

    pub fn grid(&self) -> &EventGrid {
        &self.grid
    }

    pub fn censoring_rate(&self) -> f64 {
        self.subjects.iter().filter(|s| !s.delta).count() as f64 / self.n() as f64
    }

    /// Error-prone covariates as an `n x p` matrix.
    pub fn w_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.p, |i, j| self.subjects[i].w[j])
    }

    /// Incidence covariates as an `n x q` matrix.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.q, |i, j| self.subjects[i].z[j])
    }

    /// Administrative cutoff at `tau`: subjects entering after `tau` are
    /// dropped and follow-up beyond `tau` is censored at `tau`.
    pub fn truncate_at(&self, tau: f64) -> Result<Sample> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive and finite, got {tau}")));
        }
        let subjects = self
            .subjects
            .iter()
            .filter(|s| s.a <= tau)
            .map(|s| {
                let mut s = s.clone();
                if s.y > tau {
                    s.y = tau;
                    s.delta = false;
                }
                s
            })
            .collect::<Vec<_>>();
        Sample::new(subjects)
    }

    /// Same subjects with the latency covariates replaced row by row.
    pub fn with_latency(&self, w: &DMatrix<f64>) -> Result<Sample> {
        if w.nrows() != self.n() {
            return Err(Error::Domain("covariate row count does not match sample".into()));
        }
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut s = s.clone();
                s.w = w.row(i).iter().copied().collect();
                s
            })
            .collect();
        Sample::new(subjects)
    }
}

/// Diagnostic columns attached to simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    /// True (error-free) latency covariate.
    pub x: f64,
    /// Uncured indicator.
    pub pi: bool,
    /// Latent failure time of the susceptible component (drawn for all).
    pub tstar: f64,
}

fn header_for(p: usize, q: usize, latent: bool) -> Vec<String> {
    let mut h = vec!["y".to_string(), "a".to_string(), "delta".to_string()];
    h.extend((1..=p).map(|j| format!("w{j}")));
    h.extend((1..=q).map(|j| format!("z{j}")));
    if latent {
        h.extend(["x", "pi", "tstar"].map(String::from));
    }
    h
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

/// Writes the data-file CSV. `latent`, when given, must have one record per
/// subject and adds the `x,pi,tstar` diagnostic columns.
pub fn write_sample<W: Write>(
    writer: W,
    sample: &Sample,
    latent: Option<&[LatentRecord]>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(header_for(sample.p(), sample.q(), latent.is_some()))?;
    for (i, s) in sample.subjects().iter().enumerate() {
        let mut rec = vec![fmt_f64(s.y), fmt_f64(s.a), (s.delta as u8).to_string()];
        rec.extend(s.w.iter().map(|&v| fmt_f64(v)));
        rec.extend(s.z.iter().map(|&v| fmt_f64(v)));
        if let Some(lat) = latent {
            let l = &lat[i];
            rec.extend([fmt_f64(l.x), (l.pi as u8).to_string(), fmt_f64(l.tstar)]);
        }
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_sample(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    write_sample(File::create(path)?, sample, None)
}

/// Column layout recovered from a header.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub p: usize,
    pub q: usize,
    pub latent: bool,
}

impl Schema {
    fn from_header(header: &csv::StringRecord) -> Result<Schema> {
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        let p = cols.iter().filter(|c| is_indexed(c, 'w')).count();
        let q = cols.iter().filter(|c| is_indexed(c, 'z')).count();
        let latent = cols.len() >= 3 && cols[cols.len() - 3..] == ["x", "pi", "tstar"];
        let expected = header_for(p, q, latent);
        if cols != expected {
            return Err(Error::Schema(format!(
                "header [{}] does not match expected [{}]",
                cols.join(","),
                expected.join(",")
            )));
        }
        Ok(Schema { p, q, latent })
    }
}

fn is_indexed(col: &str, prefix: char) -> bool {
    col.strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

fn parse_cell(raw: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("non-numeric {what} cell '{raw}'"))?;
    Ok(v)
}

/// Reads a data CSV (`y,a,delta,w1..wp,z1..zq[,x,pi,tstar]`). All row-level
/// problems are collected before failing.
pub fn read_sample<R: Read>(reader: R) -> Result<(Sample, Option<Vec<LatentRecord>>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let schema = Schema::from_header(&header)?;
    let width = header.len();
    let mut subjects = Vec::new();
    let mut latent = Vec::new();
    let mut issues = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != width {
            issues.push(RowIssue {
                row,
                message: format!("ragged row: {} cells, expected {width}", rec.len()),
            });
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, String> = rec
            .iter()
            .zip(header.iter())
            .map(|(cell, name)| parse_cell(cell, name))
            .collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(message) => {
                issues.push(RowIssue { row, message });
                continue;
            }
        };
        let delta = match vals[2] {
            0.0 => false,
            1.0 => true,
            d => {
                issues.push(RowIssue {
                    row,
                    message: format!("delta must be 0 or 1, got {d}"),
                });
                continue;
            }
        };
        let s = Subject::new(
            vals[0],
            vals[1],
            delta,
            vals[3..3 + schema.p].to_vec(),
            vals[3 + schema.p..3 + schema.p + schema.q].to_vec(),
        );
        if let Err(message) = s.validate() {
            issues.push(RowIssue { row, message });
            continue;
        }
        if schema.latent {
            let o = 3 + schema.p + schema.q;
            latent.push(LatentRecord {
                x: vals[o],
                pi: vals[o + 1] != 0.0,
                tstar: vals[o + 2],
            });
        }
        subjects.push(s);
    }
    if !issues.is_empty() {
        return Err(Error::Ingest(issues));
    }
    let sample = Sample::new(subjects)?;
    Ok((sample, schema.latent.then_some(latent)))
}

pub fn load_sample(path: impl AsRef<Path>) -> Result<Sample> {
    Ok(read_sample(File::open(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(y: f64, a: f64, d: bool) -> Subject {
        Subject::new(y, a, d, vec![0.0], vec![0.0])
    }

    #[test]
    fn risk_indicator_window() {
        let s = subj(1.0, 0.2, true);
        assert!(at_risk(&s, 0.5));
        assert!(!at_risk(&s, 0.1));
        assert!(at_risk(&s, 1.0));
        assert!(at_risk(&s, 0.2));
        assert!(!at_risk(&s, 1.0000001));
    }

    #[test]
    fn event_times_sorted_with_ties() {
        let e = event_times(&[subj(2.0, 0.0, true), subj(3.0, 0.0, false), subj(1.0, 0.0, true)])
            .unwrap();
        assert_eq!(e.times, vec![1.0, 2.0]);
        assert_eq!(e.multiplicities, vec![1, 1]);
        let e = event_times(&[subj(2.0, 0.0, true), subj(2.0, 0.0, true)]).unwrap();
        assert_eq!(e.times, vec![2.0]);
        assert_eq!(e.multiplicities, vec![2]);
        assert!(matches!(
            event_times(&[subj(2.0, 0.0, false), subj(1.0, 0.0, false)]),
            Err(Error::NotEstimable)
        ));
    }

    #[test]
    fn grid_matches_risk_indicator() {
        let subjects = vec![
            subj(2.0, 0.0, true),
            subj(3.0, 1.5, false),
            subj(1.0, 0.5, true),
            subj(2.0, 2.0, false),
            subj(4.0, 3.1, true),
        ];
        let sample = Sample::new(subjects.clone()).unwrap();
        let g = sample.grid();
        assert_eq!(g.times(), &[1.0, 2.0, 4.0]);
        for k in 1..=g.n_events() {
            let t = g.times()[k - 1];
            let expected: Vec<u32> = subjects
                .iter()
                .enumerate()
                .filter(|(_, s)| at_risk(s, t))
                .map(|(i, _)| i as u32)
                .collect();
            assert_eq!(g.risk_set(k), expected.as_slice(), "event {k}");
        }
        // censored at an event time stays at risk at that time
        assert!(g.risk_set(2).contains(&3));
    }

    #[test]
    fn sample_rejects_inconsistent_rows() {
        let err = Sample::new(vec![subj(1.0, 2.0, true), subj(1.0, 0.0, true)]).unwrap_err();
        match err {
            Error::Ingest(issues) => assert_eq!(issues[0].row, 1),
            e => panic!("unexpected {e}"),
        }
        let ragged = vec![
            subj(1.0, 0.0, true),
            Subject::new(2.0, 0.0, true, vec![0.0, 1.0], vec![0.0]),
        ];
        assert!(matches!(Sample::new(ragged), Err(Error::Ingest(_))));
    }

    #[test]
    fn csv_ingest_reports_rows() {
        let good = "y,a,delta,w1,z1\n1.0,0.1,1,0.5,-0.2\n2.0,0.0,0,1.5,0.3\n3,1,1,0,0\n";
        let (s, lat) = read_sample(good.as_bytes()).unwrap();
        assert_eq!(s.n(), 3);
        assert!(lat.is_none());

        let bad = "y,a,delta,w1,z1\n1.0,0.1,1,0.5,-0.2\n1,2,1,0,0\n";
        match read_sample(bad.as_bytes()).unwrap_err() {
            Error::Ingest(issues) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].row, 2);
                assert!(issues[0].message.contains("exceeds"));
            }
            e => panic!("unexpected {e}"),
        }

        let ragged = "y,a,delta,w1,w2,z1\n1,0,1,0,0,0\n2,0,1,0,0,0,9\n";
        match read_sample(ragged.as_bytes()).unwrap_err() {
            Error::Ingest(issues) => {
                assert_eq!(issues[0].row, 2);
                assert!(issues[0].message.contains("ragged"));
            }
            e => panic!("unexpected {e}"),
        }

        let nonnum = "y,a,delta,w1,z1\n1,0,yes,0,0\n";
        assert!(matches!(read_sample(nonnum.as_bytes()), Err(Error::Ingest(_))));
        let delta2 = "y,a,delta,w1,z1\n1,0,2,0,0\n";
        assert!(matches!(read_sample(delta2.as_bytes()), Err(Error::Ingest(_))));
        let header = "y,a,d,w1,z1\n1,0,1,0,0\n";
        assert!(matches!(read_sample(header.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn administrative_cutoff() {
        let s = Sample::new(vec![subj(1.0, 0.0, true), subj(5.0, 0.5, true), subj(6.0, 4.5, true)])
            .unwrap();
        let t = s.truncate_at(4.0).unwrap();
        assert_eq!(t.n(), 2);
        assert_eq!(t.subjects()[1].y, 4.0);
        assert!(!t.subjects()[1].delta);
        assert_eq!(t.events().times, vec![1.0]);
    }
}
