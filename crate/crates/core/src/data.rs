//! Censored observations with step-function covariate paths.
//!
//! A [`CovariatePath`] is stored as segment start times `0 = t0 < t1 < ...`
//! and one value vector per segment. Segment `k` covers `[t_k, t_{k+1})`,
//! the last one extends to infinity. Every value vector carries the
//! constant 1 in its first coordinate, so the same vector multiplies the
//! full coefficient vector including the intercept.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePath {
    starts: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

impl CovariatePath {
    /// Builds a path from segment start times and per-segment values.
    pub fn new(starts: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if starts.is_empty() {
            return Err(Error::Domain("covariate path needs at least one segment".into()));
        }
        if starts.len() != values.len() {
            return Err(Error::Domain(format!(
                "{} breakpoints but {} segment values",
                starts.len(),
                values.len()
            )));
        }
        if starts[0] != 0.0 {
            return Err(Error::Domain(format!("first breakpoint must be 0, got {}", starts[0])));
        }
        if let Some(w) = starts.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::Domain(format!(
                "breakpoints must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if starts.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("breakpoints must be finite".into()));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::Domain("segment values must be nonempty".into()));
        }
        let mut flat = Vec::with_capacity(dim * values.len());
        for v in &values {
            if v.len() != dim {
                return Err(Error::Dimension { expected: dim, found: v.len() });
            }
            if v[0] != 1.0 {
                return Err(Error::Domain(format!(
                    "segment intercept coordinate must be 1, got {}",
                    v[0]
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("segment values must be finite".into()));
            }
            flat.extend_from_slice(v);
        }
        Ok(Self { starts, values: flat, dim })
    }

    /// A path that never changes.
    pub fn constant(value: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0], vec![value])
    }

    /// Dimension of each value vector (p + 1).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_segments(&self) -> usize {
        self.starts.len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.starts
    }

    pub fn segment_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Start and (possibly infinite) end of segment `k`.
    pub fn segment_bounds(&self, k: usize) -> (f64, f64) {
        let end = self.starts.get(k + 1).copied().unwrap_or(f64::INFINITY);
        (self.starts[k], end)
    }

    /// Index of the segment containing `t`.
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("path evaluated at negative time {t}")));
        }
        Ok(self.starts.partition_point(|&s| s <= t) - 1)
    }

    /// X(t): the stored value of the segment whose half-open interval contains `t`.
    pub fn value_at(&self, t: f64) -> Result<&[f64]> {
        Ok(self.segment_value(self.segment_index(t)?))
    }

    /// Iterates `(start, end, value)` over all segments.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, &[f64])> + '_ {
        (0..self.n_segments()).map(move |k| {
            let (a, b) = self.segment_bounds(k);
            (a, b, self.segment_value(k))
        })
    }

    /// The same path with every non-intercept coordinate multiplied by `factor`.
    pub fn scaled(&self, factor: &[f64]) -> Result<Self> {
        if factor.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: factor.len() });
        }
        let values = (0..self.n_segments())
            .map(|k| {
                let v = self.segment_value(k);
                std::iter::once(1.0)
                    .chain(v.iter().zip(factor).skip(1).map(|(x, f)| x * f))
                    .collect()
            })
            .collect();
        Self::new(self.starts.clone(), values)
    }
}

/// path_value(path, t)
pub fn path_value(path: &CovariatePath, t: f64) -> Result<&[f64]> {
    path.value_at(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    /// Observed time min(T, C).
    pub y: f64,
    /// True when the failure was observed.
    pub delta: bool,
    pub path: CovariatePath,
    /// Instrument vector with leading 1.
    pub z: Vec<f64>,
}

impl Subject {
    pub fn new(y: f64, delta: bool, path: CovariatePath, z: Vec<f64>) -> Self {
        Self { y, delta, path, z }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    subjects: Vec<Subject>,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Self {
        Self { subjects }
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Covariate dimension p + 1 taken from the first subject.
    pub fn dim(&self) -> usize {
        self.subjects.first().map_or(0, Subject::dim)
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }

    pub fn times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.y).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.delta).collect()
    }

    /// Checks every type invariant; an empty result means the dataset can be fitted.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    /// Returns `Err(InvalidData)` unless [`Dataset::validate`] is clean.
    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty);
        }
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else if v.iter().all(|v| v.kind == ViolationKind::NoEvents) {
            Err(Error::NoEvents)
        } else {
            Err(Error::InvalidData(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyDataset,
    ObservedTime,
    InterceptCoordinate,
    NonFiniteInstrument,
    DimensionMismatch,
    NoEvents,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::EmptyDataset => "empty dataset",
            ViolationKind::ObservedTime => "observed time",
            ViolationKind::InterceptCoordinate => "intercept coordinate",
            ViolationKind::NonFiniteInstrument => "finite instrument",
            ViolationKind::DimensionMismatch => "dimension",
            ViolationKind::NoEvents => "no events",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending subject, absent for dataset-level violations.
    pub subject: Option<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subject {
            Some(i) => write!(f, "subject {i}: {} ({})", self.kind.name(), self.detail),
            None => write!(f, "{} ({})", self.kind.name(), self.detail),
        }
    }
}

pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if dataset.is_empty() {
        out.push(Violation {
            subject: None,
            kind: ViolationKind::EmptyDataset,
            detail: "dataset has no subjects".into(),
        });
        return out;
    }
    let dim = dataset.dim();
    for (i, s) in dataset.subjects().iter().enumerate() {
        let mut push = |kind, detail: String| {
            out.push(Violation { subject: Some(i), kind, detail });
        };
        if !(s.y.is_finite() && s.y >= 0.0) {
            push(ViolationKind::ObservedTime, format!("y = {} must be finite and >= 0", s.y));
        }
        if s.z.first() != Some(&1.0) {
            push(
                ViolationKind::InterceptCoordinate,
                format!("instrument first coordinate is {:?}, expected 1", s.z.first()),
            );
        }
        if s.z.iter().any(|x| !x.is_finite()) {
            push(ViolationKind::NonFiniteInstrument, "instrument has non-finite entries".into());
        }
        if s.path.dim() != s.z.len() {
            push(
                ViolationKind::DimensionMismatch,
                format!("path dimension {} but instrument dimension {}", s.path.dim(), s.z.len()),
            );
        }
        if s.z.len() != dim {
            push(
                ViolationKind::DimensionMismatch,
                format!("dimension {} differs from dataset dimension {dim}", s.z.len()),
            );
        }
    }
    if dataset.n_events() == 0 {
        out.push(Violation {
            subject: None,
            kind: ViolationKind::NoEvents,
            detail: "all subjects are censored".into(),
        });
    }
    out
}
