//! Core data types shared across the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default source-detector separation of long channels in metres.
pub const DEFAULT_LONG_DISTANCE_M: f64 = 0.03;
/// Default separation of short (superficial) channels in metres.
pub const DEFAULT_SHORT_DISTANCE_M: f64 = 0.008;
/// Default sampling rate of the acquisition system.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 3.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    Long,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hemisphere {
    Left,
    Right,
}

/// Participant group. Classification is binary: `Patient` is label 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Patient,
    Control,
}

impl Group {
    pub fn label(self) -> u8 {
        match self {
            Group::Patient => 1,
            Group::Control => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Single,
    Dual,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chromophore {
    Hbo,
    Hbr,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Data(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(ChannelKind { Long => "long", Short => "short" });
text_enum!(Hemisphere { Left => "left", Right => "right" });
text_enum!(Group { Patient => "patient", Control => "control" });
text_enum!(Task { Single => "single", Dual => "dual", Rest => "rest" });
text_enum!(Chromophore { Hbo => "hbo", Hbr => "hbr" });

/// One source-detector pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub source: String,
    pub detector: String,
    pub distance_m: f64,
    pub kind: ChannelKind,
    pub hemisphere: Hemisphere,
}

impl Channel {
    /// Label such as `S7-D6`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.source, self.detector)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    pub sources: Vec<String>,
    pub detectors: Vec<String>,
    pub channels: Vec<Channel>,
    /// Named channel groups (regions of interest).
    pub roi_map: BTreeMap<String, Vec<String>>,
}

impl Montage {
    /// Eight sources and eight detectors over both motor cortices: twenty long
    /// channels at 3 cm plus one short channel per source.
    ///
    /// ROIs: `left` (channels of S1-S4), `right` (channels of S5-S8) and
    /// `supramarginal` (S7-D6, S7-D7).
    pub fn default_motor() -> Self {
        let sources: Vec<String> = (1..=8).map(|i| format!("S{i}")).collect();
        let mut detectors: Vec<String> = (1..=8).map(|i| format!("D{i}")).collect();
        detectors.extend((1..=8).map(|i| format!("SD{i}")));

        // Each hemisphere: a 4x4 staggered grid yielding ten channels.
        let left_pairs = [
            (1, 1), (1, 2), (2, 1), (2, 2), (2, 3),
            (3, 2), (3, 3), (3, 4), (4, 3), (4, 4),
        ];
        let mut channels = Vec::new();
        for (hemi, offset) in [(Hemisphere::Left, 0), (Hemisphere::Right, 4)] {
            for &(s, d) in &left_pairs {
                channels.push(Channel {
                    source: format!("S{}", s + offset),
                    detector: format!("D{}", d + offset),
                    distance_m: DEFAULT_LONG_DISTANCE_M,
                    kind: ChannelKind::Long,
                    hemisphere: hemi,
                });
            }
        }
        for s in 1..=8 {
            channels.push(Channel {
                source: format!("S{s}"),
                detector: format!("SD{s}"),
                distance_m: DEFAULT_SHORT_DISTANCE_M,
                kind: ChannelKind::Short,
                hemisphere: if s <= 4 { Hemisphere::Left } else { Hemisphere::Right },
            });
        }

        let long_of = |hemi: Hemisphere| -> Vec<String> {
            channels
                .iter()
                .filter(|c| c.kind == ChannelKind::Long && c.hemisphere == hemi)
                .map(Channel::id)
                .collect()
        };
        let mut roi_map = BTreeMap::new();
        roi_map.insert("left".to_string(), long_of(Hemisphere::Left));
        roi_map.insert("right".to_string(), long_of(Hemisphere::Right));
        roi_map.insert(
            "supramarginal".to_string(),
            vec!["S7-D6".to_string(), "S7-D7".to_string()],
        );

        Montage {
            sources,
            detectors,
            channels,
            roi_map,
        }
    }

    pub fn channel(&self, id: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id() == id)
    }

    pub fn channel_ids(&self) -> Vec<String> {
        self.channels.iter().map(Channel::id).collect()
    }

    pub fn long_channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(|c| c.kind == ChannelKind::Long)
    }

    pub fn short_channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(|c| c.kind == ChannelKind::Short)
    }

    pub fn validate(&self) -> Result<()> {
        let sources: BTreeSet<&str> = self.sources.iter().map(String::as_str).collect();
        let detectors: BTreeSet<&str> = self.detectors.iter().map(String::as_str).collect();
        if sources.len() != self.sources.len() || detectors.len() != self.detectors.len() {
            return Err(Error::Data("duplicate source or detector id".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.channels {
            if !sources.contains(c.source.as_str()) {
                return Err(Error::Data(format!(
                    "channel {} references undeclared source {}",
                    c.id(),
                    c.source
                )));
            }
            if !detectors.contains(c.detector.as_str()) {
                return Err(Error::Data(format!(
                    "channel {} references undeclared detector {}",
                    c.id(),
                    c.detector
                )));
            }
            if !(c.distance_m.is_finite() && c.distance_m > 0.0) {
                return Err(Error::Data(format!("channel {} has non-positive distance", c.id())));
            }
            if !seen.insert(c.id()) {
                return Err(Error::Data(format!("duplicate channel {}", c.id())));
            }
        }
        let min_long = self
            .long_channels()
            .map(|c| c.distance_m)
            .fold(f64::INFINITY, f64::min);
        let max_short = self
            .short_channels()
            .map(|c| c.distance_m)
            .fold(f64::NEG_INFINITY, f64::max);
        if min_long <= max_short {
            return Err(Error::Data(format!(
                "long-channel distance {min_long} must exceed short-channel distance {max_short}"
            )));
        }
        for (name, members) in &self.roi_map {
            let mut in_roi = BTreeSet::new();
            for m in members {
                if !seen.contains(m) {
                    return Err(Error::Data(format!("ROI {name} references unknown channel {m}")));
                }
                if !in_roi.insert(m) {
                    return Err(Error::Data(format!("ROI {name} lists channel {m} twice")));
                }
            }
        }
        Ok(())
    }
}

/// A time interval tagged with a task label.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub task: Task,
}

impl Annotation {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

/// Raw two-wavelength optical intensities for one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub participant_id: String,
    pub group: Group,
    pub sample_rate_hz: f64,
    pub wavelengths_nm: [f64; 2],
    /// Channel ids, in montage order, that the intensity rows refer to.
    pub channels: Vec<String>,
    /// `intensity[w][c][t]`: wavelength index, channel index, sample.
    pub intensity: [Vec<Vec<f64>>; 2],
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn n_samples(&self) -> usize {
        self.intensity[0].first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == id)
    }

    pub fn validate(&self) -> Result<()> {
        let who = &self.participant_id;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!("{who}: sample rate must be positive")));
        }
        if self.wavelengths_nm.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Data(format!("{who}: wavelengths must be positive")));
        }
        let n = self.n_samples();
        for (w, rows) in self.intensity.iter().enumerate() {
            if rows.len() != self.channels.len() {
                return Err(Error::Data(format!(
                    "{who}: wavelength {w} has {} channel series, expected {}",
                    rows.len(),
                    self.channels.len()
                )));
            }
            for (c, series) in rows.iter().enumerate() {
                if series.len() != n {
                    return Err(Error::Data(format!(
                        "{who}: channel {} has {} samples, expected {n}",
                        self.channels[c],
                        series.len()
                    )));
                }
                if let Some(t) = series.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
                    return Err(Error::Data(format!(
                        "{who}: non-positive intensity in channel {} at sample {t}",
                        self.channels[c]
                    )));
                }
            }
        }
        validate_annotations(who, &self.annotations, self.duration_s())
    }
}

fn validate_annotations(who: &str, annotations: &[Annotation], duration_s: f64) -> Result<()> {
    // Tolerance of a thousandth of a sample absorbs decimal round-off.
    let eps = 1e-9;
    for a in annotations {
        if !(a.onset_s.is_finite() && a.duration_s.is_finite()) || a.onset_s < 0.0 || a.duration_s <= 0.0 {
            return Err(Error::Data(format!(
                "{who}: annotation at {} s has invalid timing",
                a.onset_s
            )));
        }
        if a.end_s() > duration_s + eps {
            return Err(Error::Data(format!(
                "{who}: annotation [{}, {}] s exceeds recording duration {duration_s} s",
                a.onset_s,
                a.end_s()
            )));
        }
    }
    let mut sorted: Vec<&Annotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    for pair in sorted.windows(2) {
        if pair[1].onset_s < pair[0].end_s() - eps {
            return Err(Error::Data(format!(
                "{who}: annotations at {} s and {} s overlap",
                pair[0].onset_s, pair[1].onset_s
            )));
        }
    }
    Ok(())
}

/// One applied processing step and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceStep {
    pub step: String,
    pub params: String,
}

/// Hemoglobin concentration changes (mol/L) for the long channels of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct HemoSeries {
    pub participant_id: String,
    pub group: Group,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    pub hbo: Vec<Vec<f64>>,
    pub hbr: Vec<Vec<f64>>,
    pub annotations: Vec<Annotation>,
    provenance: Vec<ProvenanceStep>,
}

impl HemoSeries {
    pub fn new(
        participant_id: impl Into<String>,
        group: Group,
        sample_rate_hz: f64,
        channels: Vec<String>,
        hbo: Vec<Vec<f64>>,
        hbr: Vec<Vec<f64>>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let h = HemoSeries {
            participant_id: participant_id.into(),
            group,
            sample_rate_hz,
            channels,
            hbo,
            hbr,
            annotations,
            provenance: Vec::new(),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn n_samples(&self) -> usize {
        self.hbo.first().map_or(0, Vec::len)
    }

    pub fn series(&self, chromophore: Chromophore) -> &[Vec<f64>] {
        match chromophore {
            Chromophore::Hbo => &self.hbo,
            Chromophore::Hbr => &self.hbr,
        }
    }

    pub fn provenance(&self) -> &[ProvenanceStep] {
        &self.provenance
    }

    /// Appends a step record; existing records are never altered.
    pub fn record(&mut self, step: impl Into<String>, params: impl Into<String>) {
        self.provenance.push(ProvenanceStep {
            step: step.into(),
            params: params.into(),
        });
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        if self.hbo.len() != self.channels.len() || self.hbr.len() != self.channels.len() {
            return Err(Error::Data(format!(
                "{}: hbo/hbr channel sets differ from channel list",
                self.participant_id
            )));
        }
        if self.hbo.iter().chain(&self.hbr).any(|s| s.len() != n) {
            return Err(Error::Data(format!(
                "{}: hbo/hbr series lengths differ",
                self.participant_id
            )));
        }
        Ok(())
    }
}

/// One task-aligned window.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub participant_id: String,
    pub group: Group,
    pub task: Task,
    pub trial: usize,
    /// `hbo[c][t]` over `window_samples` samples.
    pub hbo: Vec<Vec<f64>>,
    pub hbr: Vec<Vec<f64>>,
}

impl Epoch {
    pub fn series(&self, chromophore: Chromophore) -> &[Vec<f64>] {
        match chromophore {
            Chromophore::Hbo => &self.hbo,
            Chromophore::Hbr => &self.hbr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub window_samples: usize,
    pub epochs: Vec<Epoch>,
}

impl EpochSet {
    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        for e in &self.epochs {
            if e.hbo.len() != self.channels.len() || e.hbr.len() != self.channels.len() {
                return Err(Error::Data(format!(
                    "epoch {}/{}/{} has wrong channel count",
                    e.participant_id, e.task, e.trial
                )));
            }
            if e.hbo.iter().chain(&e.hbr).any(|w| w.len() != self.window_samples) {
                return Err(Error::Data(format!(
                    "epoch {}/{}/{} window length differs from {}",
                    e.participant_id, e.task, e.trial, self.window_samples
                )));
            }
            if !keys.insert((e.participant_id.clone(), e.task, e.trial)) {
                return Err(Error::Data(format!(
                    "duplicate trial index {} for {}/{}",
                    e.trial, e.participant_id, e.task
                )));
            }
        }
        Ok(())
    }

    /// Concatenates epoch sets over the same channels and window length.
    pub fn merge(sets: Vec<EpochSet>) -> Result<EpochSet> {
        let mut iter = sets.into_iter();
        let Some(mut first) = iter.next() else {
            return Err(Error::Data("no epoch sets to merge".into()));
        };
        for s in iter {
            if s.channels != first.channels || s.window_samples != first.window_samples {
                return Err(Error::Data("cannot merge epoch sets with different layouts".into()));
            }
            first.epochs.extend(s.epochs);
        }
        first.validate()?;
        Ok(first)
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub creator: String,
    pub seed: Option<u64>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            creator: format!("nirscope {}", env!("CARGO_PKG_VERSION")),
            seed: None,
        }
    }
}

/// A montage plus one raw recording per participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sample_rate_hz: f64,
    pub wavelengths_nm: [f64; 2],
    pub montage: Montage,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn empty(montage: Montage) -> Self {
        Dataset {
            manifest: Manifest::default(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            wavelengths_nm: [760.0, 850.0],
            montage,
            recordings: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.montage.validate()?;
        let ids = self.montage.channel_ids();
        let mut seen = BTreeSet::new();
        for r in &self.recordings {
            if !seen.insert(r.participant_id.as_str()) {
                return Err(Error::Data(format!("duplicate participant id {}", r.participant_id)));
            }
            if r.participant_id.is_empty()
                || !r
                    .participant_id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::Data(format!(
                    "participant id '{}' must be nonempty ASCII alphanumerics, '-' or '_'",
                    r.participant_id
                )));
            }
            if r.sample_rate_hz != self.sample_rate_hz || r.wavelengths_nm != self.wavelengths_nm {
                return Err(Error::Data(format!(
                    "{}: sample rate or wavelengths differ from dataset",
                    r.participant_id
                )));
            }
            if r.channels != ids {
                return Err(Error::Data(format!(
                    "{}: channel list does not match montage order",
                    r.participant_id
                )));
            }
            r.validate()?;
        }
        Ok(())
    }

    /// Errors unless both groups are represented.
    pub fn require_both_groups(&self) -> Result<()> {
        for g in [Group::Patient, Group::Control] {
            if !self.recordings.iter().any(|r| r.group == g) {
                return Err(Error::Data(format!("dataset has no {g} participants")));
            }
        }
        Ok(())
    }

    pub fn participants(&self) -> Vec<(String, Group)> {
        self.recordings
            .iter()
            .map(|r| (r.participant_id.clone(), r.group))
            .collect()
    }
}
