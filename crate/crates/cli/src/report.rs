//! Report bundle and its JSON encoding.

use std::collections::BTreeMap;
use std::io::{self, Write};

use abtroika::decoherence::{ModeCrossCheck, OverlapResult, ScalingSummary, SweepRow};
use abtroika::phases::PhaseReport;
use abtroika::quadrature::PvOracleCheck;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// Pass when `value <= tolerance`.
    Upper,
    /// Pass when `value >= tolerance`.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub value: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub pass: bool,
    pub enabled: bool,
    pub stage: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseEntry {
    pub beta: f64,
    pub report: PhaseReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdealPhases {
    pub phi_ab: f64,
    pub half_circle: f64,
    pub phi21: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceStudy {
    pub beta: f64,
    pub epsilon: Vec<f64>,
    pub a: Vec<f64>,
    pub error: Vec<f64>,
    pub slope: f64,
    pub reduced: f64,
    pub unreduced: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// The configuration as parsed, in the input text format.
    pub config: String,
    pub stage_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct ReportBundle {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ideal_phases: Option<IdealPhases>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub phase_reports: Vec<PhaseEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap_result: Option<OverlapResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_control: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep_lambda: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep_beta: Vec<SweepRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pv_oracles: Option<PvOracleCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceStudy>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_checks: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub crosscheck: Vec<ModeCrossCheck>,
    pub checks: BTreeMap<String, Check>,
    pub provenance: Option<Provenance>,
}

impl ReportBundle {
    pub fn failures(&self) -> Vec<(&String, &Check)> {
        self.checks.iter().filter(|(_, c)| c.enabled && !c.pass).collect()
    }
}

/// Pretty JSON with every float written to 17 significant digits.
pub struct FullPrecision(PrettyFormatter<'static>);

impl FullPrecision {
    pub fn new() -> Self {
        Self(PrettyFormatter::new())
    }
}

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision::new());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}
