//! On-disk dataset container.
//!
//! A dataset directory holds `manifest.toml` plus one CSV per participant per
//! wavelength. Every real number is written with 17 significant digits so
//! that a save/load cycle is bit-exact.
//!
//! ```text
//! schema_version = 1
//! creator = "nirscope 0.1.0"
//! sample_rate_hz = 3.8999999999999999e0
//! wavelengths_nm = [7.6000000000000000e2, 8.5000000000000000e2]
//!
//! [montage]
//! sources = ["S1", ...]
//! detectors = ["D1", ...]
//! channels = [
//!   "S1,D1,2.9999999999999999e-2,long,left",   # source,detector,distance_m,kind,hemisphere
//! ]
//!
//! [montage.roi]
//! "left" = ["S1-D1", ...]
//!
//! [[participants]]
//! id = "p01"
//! group = "patient"
//! files = ["p01_wl1.csv", "p01_wl2.csv"]
//! annotations = [
//!   "2.0000000000000000e1,2.0000000000000000e1,single",   # onset_s,duration_s,label
//! ]
//! ```
//!
//! Channel CSVs start with `t_s,<ch1>,<ch2>,...` and hold one LF-terminated
//! row per sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{
    Annotation, Channel, Dataset, HemoSeries, Manifest, Montage, ProvenanceStep, Recording,
    SCHEMA_VERSION,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const HEMO_MANIFEST_FILE: &str = "hemo.toml";

/// Decimal rendering with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn string_array(items: &[String]) -> String {
    let inner: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", inner.join(", "))
}

fn rows_block(key: &str, rows: &[String], out: &mut String) {
    if rows.is_empty() {
        let _ = writeln!(out, "{key} = []");
        return;
    }
    let _ = writeln!(out, "{key} = [");
    for r in rows {
        let _ = writeln!(out, "  {},", quote(r));
    }
    let _ = writeln!(out, "]");
}

fn annotation_row(a: &Annotation) -> String {
    format!("{},{},{}", fmt_f64(a.onset_s), fmt_f64(a.duration_s), a.task)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_series_csv(path: &Path, channels: &[String], sample_rate_hz: f64, rows: &[Vec<f64>]) -> Result<()> {
    let n = rows.first().map_or(0, Vec::len);
    let mut out = String::with_capacity(n * (channels.len() + 1) * 24);
    out.push_str("t_s");
    for c in channels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for t in 0..n {
        out.push_str(&fmt_f64(t as f64 / sample_rate_hz));
        for r in rows {
            out.push(',');
            out.push_str(&fmt_f64(r[t]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Reads a channel CSV, returning the column-major series.
fn read_series_csv(path: &Path, expected: &[String]) -> Result<Vec<Vec<f64>>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(&name, Some(1), e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"t_s") || cols[1..] != expected.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::parse(
            &name,
            Some(1),
            format!("header must be t_s followed by the montage channels ({} columns)", expected.len()),
        ));
    }
    let mut series = vec![Vec::new(); expected.len()];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            Error::parse(&name, line, format!("channel-length mismatch or malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line());
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(&name, line, format!("not a number: '{field}'")))?;
            if i > 0 {
                series[i - 1].push(v);
            }
        }
    }
    Ok(series)
}

fn locate_line(text: &str, needle: &str) -> Option<u64> {
    text.lines()
        .position(|l| l.contains(needle))
        .map(|i| i as u64 + 1)
}

fn render_montage(m: &Montage, out: &mut String) {
    let _ = writeln!(out, "[montage]");
    let _ = writeln!(out, "sources = {}", string_array(&m.sources));
    let _ = writeln!(out, "detectors = {}", string_array(&m.detectors));
    let rows: Vec<String> = m
        .channels
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{},{}",
                c.source,
                c.detector,
                fmt_f64(c.distance_m),
                c.kind,
                c.hemisphere
            )
        })
        .collect();
    rows_block("channels", &rows, out);
    let _ = writeln!(out);
    let _ = writeln!(out, "[montage.roi]");
    for (name, members) in &m.roi_map {
        let _ = writeln!(out, "{} = {}", quote(name), string_array(members));
    }
}

fn participant_files(id: &str) -> [String; 2] {
    [format!("{id}_wl1.csv"), format!("{id}_wl2.csv")]
}

/// Writes `d` to `dir`, creating it if needed. Invalid datasets are refused
/// before anything touches the disk.
pub fn save_dataset(d: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    d.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut out = String::new();
    let _ = writeln!(out, "schema_version = {}", d.manifest.schema_version);
    let _ = writeln!(out, "creator = {}", quote(&d.manifest.creator));
    if let Some(seed) = d.manifest.seed {
        let _ = writeln!(out, "seed = {seed}");
    }
    let _ = writeln!(out, "sample_rate_hz = {}", fmt_f64(d.sample_rate_hz));
    let _ = writeln!(
        out,
        "wavelengths_nm = [{}, {}]",
        fmt_f64(d.wavelengths_nm[0]),
        fmt_f64(d.wavelengths_nm[1])
    );
    let _ = writeln!(out);
    render_montage(&d.montage, &mut out);
    if d.recordings.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "participants = []");
    }
    for r in &d.recordings {
        let files = participant_files(&r.participant_id);
        let _ = writeln!(out);
        let _ = writeln!(out, "[[participants]]");
        let _ = writeln!(out, "id = {}", quote(&r.participant_id));
        let _ = writeln!(out, "group = {}", quote(r.group.as_str()));
        let _ = writeln!(out, "files = {}", string_array(&files));
        let rows: Vec<String> = r.annotations.iter().map(annotation_row).collect();
        rows_block("annotations", &rows, &mut out);
        for (w, file) in files.iter().enumerate() {
            write_series_csv(&dir.join(file), &r.channels, r.sample_rate_hz, &r.intensity[w])?;
        }
    }
    write_file(&dir.join(MANIFEST_FILE), &out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: u32,
    creator: String,
    seed: Option<u64>,
    sample_rate_hz: f64,
    wavelengths_nm: [f64; 2],
    montage: RawMontage,
    #[serde(default)]
    participants: Vec<RawParticipant>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMontage {
    sources: Vec<String>,
    detectors: Vec<String>,
    channels: Vec<String>,
    #[serde(default)]
    roi: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParticipant {
    id: String,
    group: String,
    files: Vec<String>,
    #[serde(default)]
    annotations: Vec<String>,
}

fn parse_channel_row(row: &str) -> std::result::Result<Channel, String> {
    let f: Vec<&str> = row.split(',').map(str::trim).collect();
    if f.len() != 5 {
        return Err(format!("channel row '{row}' needs 5 fields"));
    }
    Ok(Channel {
        source: f[0].to_string(),
        detector: f[1].to_string(),
        distance_m: f[2].parse().map_err(|_| format!("bad distance '{}'", f[2]))?,
        kind: f[3].parse().map_err(|e: Error| e.to_string())?,
        hemisphere: f[4].parse().map_err(|e: Error| e.to_string())?,
    })
}

fn parse_annotation_row(row: &str) -> std::result::Result<Annotation, String> {
    let f: Vec<&str> = row.split(',').map(str::trim).collect();
    if f.len() != 3 {
        return Err(format!("annotation row '{row}' needs onset_s,duration_s,label"));
    }
    Ok(Annotation {
        onset_s: f[0].parse().map_err(|_| format!("bad onset '{}'", f[0]))?,
        duration_s: f[1].parse().map_err(|_| format!("bad duration '{}'", f[1]))?,
        task: f[2].parse().map_err(|e: Error| e.to_string())?,
    })
}

fn parse_montage(raw: RawMontage, text: &str, file: &str) -> Result<Montage> {
    let mut channels = Vec::with_capacity(raw.channels.len());
    for row in &raw.channels {
        channels.push(parse_channel_row(row).map_err(|m| Error::parse(file, locate_line(text, row), m))?);
    }
    Ok(Montage {
        sources: raw.sources,
        detectors: raw.detectors,
        channels,
        roi_map: raw.roi,
    })
}

fn read_manifest_text(dir: &Path, file_name: &str) -> Result<String> {
    let path = dir.join(file_name);
    if !path.exists() {
        return Err(Error::parse(path.display().to_string(), None, "missing manifest"));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

fn toml_error(file: &str, text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
    Error::parse(file, line, e.message().to_string())
}

/// Reads a dataset directory written by [`save_dataset`] and validates it.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = read_manifest_text(dir, MANIFEST_FILE)?;
    let file = dir.join(MANIFEST_FILE).display().to_string();
    let raw: RawManifest = toml::from_str(&text).map_err(|e| toml_error(&file, &text, e))?;
    if raw.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(
            &file,
            locate_line(&text, "schema_version"),
            format!("schema version {} does not match supported version {SCHEMA_VERSION}", raw.schema_version),
        ));
    }
    let montage = parse_montage(raw.montage, &text, &file)?;
    let channel_ids = montage.channel_ids();

    let mut recordings = Vec::with_capacity(raw.participants.len());
    for p in raw.participants {
        let id_line = locate_line(&text, &format!("id = {}", quote(&p.id)));
        let group = p
            .group
            .parse()
            .map_err(|e: Error| Error::parse(&file, id_line, e.to_string()))?;
        if p.files.len() != 2 {
            return Err(Error::parse(&file, id_line, format!("participant {} needs two wavelength files", p.id)));
        }
        let mut annotations = Vec::with_capacity(p.annotations.len());
        for row in &p.annotations {
            annotations.push(parse_annotation_row(row).map_err(|m| Error::parse(&file, locate_line(&text, row), m))?);
        }
        let mut intensity: [Vec<Vec<f64>>; 2] = Default::default();
        for (w, f) in p.files.iter().enumerate() {
            let path = dir.join(f);
            if !path.exists() {
                return Err(Error::parse(
                    &file,
                    locate_line(&text, f),
                    format!("missing participant file {f} for {}", p.id),
                ));
            }
            intensity[w] = read_series_csv(&path, &channel_ids)?;
        }
        let n0 = intensity[0].first().map_or(0, Vec::len);
        let n1 = intensity[1].first().map_or(0, Vec::len);
        if n0 != n1 {
            return Err(Error::parse(
                dir.join(&p.files[1]).display().to_string(),
                None,
                format!("channel-length mismatch: {n1} samples vs {n0} at the first wavelength"),
            ));
        }
        let rec = Recording {
            participant_id: p.id,
            group,
            sample_rate_hz: raw.sample_rate_hz,
            wavelengths_nm: raw.wavelengths_nm,
            channels: channel_ids.clone(),
            intensity,
            annotations,
        };
        rec.validate().map_err(|e| match e {
            Error::Data(m) => Error::parse(&file, id_line, m),
            other => other,
        })?;
        recordings.push(rec);
    }

    let d = Dataset {
        manifest: Manifest {
            schema_version: raw.schema_version,
            creator: raw.creator,
            seed: raw.seed,
        },
        sample_rate_hz: raw.sample_rate_hz,
        wavelengths_nm: raw.wavelengths_nm,
        montage,
        recordings,
    };
    d.validate()?;
    Ok(d)
}

/// Writes preprocessed concentration series: `hemo.toml` plus
/// `<id>_hbo.csv` / `<id>_hbr.csv` per participant.
pub fn save_hemo(series: &[HemoSeries], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = String::new();
    let _ = writeln!(out, "schema_version = {SCHEMA_VERSION}");
    if series.is_empty() {
        let _ = writeln!(out, "participants = []");
    }
    for h in series {
        h.validate()?;
        let files = [format!("{}_hbo.csv", h.participant_id), format!("{}_hbr.csv", h.participant_id)];
        let _ = writeln!(out);
        let _ = writeln!(out, "[[participants]]");
        let _ = writeln!(out, "id = {}", quote(&h.participant_id));
        let _ = writeln!(out, "group = {}", quote(h.group.as_str()));
        let _ = writeln!(out, "sample_rate_hz = {}", fmt_f64(h.sample_rate_hz));
        let _ = writeln!(out, "channels = {}", string_array(&h.channels));
        let _ = writeln!(out, "files = {}", string_array(&files));
        let rows: Vec<String> = h.annotations.iter().map(annotation_row).collect();
        rows_block("annotations", &rows, &mut out);
        let prov: Vec<String> = h
            .provenance()
            .iter()
            .map(|p| format!("{}|{}", p.step, p.params))
            .collect();
        rows_block("provenance", &prov, &mut out);
        write_series_csv(&dir.join(&files[0]), &h.channels, h.sample_rate_hz, &h.hbo)?;
        write_series_csv(&dir.join(&files[1]), &h.channels, h.sample_rate_hz, &h.hbr)?;
    }
    write_file(&dir.join(HEMO_MANIFEST_FILE), &out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHemoManifest {
    schema_version: u32,
    #[serde(default)]
    participants: Vec<RawHemo>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHemo {
    id: String,
    group: String,
    sample_rate_hz: f64,
    channels: Vec<String>,
    files: [String; 2],
    #[serde(default)]
    annotations: Vec<String>,
    #[serde(default)]
    provenance: Vec<String>,
}

pub fn load_hemo(dir: impl AsRef<Path>) -> Result<Vec<HemoSeries>> {
    let dir = dir.as_ref();
    let text = read_manifest_text(dir, HEMO_MANIFEST_FILE)?;
    let file = dir.join(HEMO_MANIFEST_FILE).display().to_string();
    let raw: RawHemoManifest = toml::from_str(&text).map_err(|e| toml_error(&file, &text, e))?;
    if raw.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(&file, None, "schema-version mismatch"));
    }
    let mut out = Vec::new();
    for p in raw.participants {
        let group = p.group.parse()?;
        let mut annotations = Vec::new();
        for row in &p.annotations {
            annotations.push(parse_annotation_row(row).map_err(|m| Error::parse(&file, locate_line(&text, row), m))?);
        }
        let mut data: [Vec<Vec<f64>>; 2] = Default::default();
        for (i, f) in p.files.iter().enumerate() {
            let path = dir.join(f);
            if !path.exists() {
                return Err(Error::parse(&file, locate_line(&text, f), format!("missing participant file {f}")));
            }
            data[i] = read_series_csv(&path, &p.channels)?;
        }
        let [hbo, hbr] = data;
        let mut h = HemoSeries::new(p.id, group, p.sample_rate_hz, p.channels, hbo, hbr, annotations)?;
        for row in p.provenance {
            let (step, params) = row.split_once('|').unwrap_or((row.as_str(), ""));
            h.record(step, params);
        }
        out.push(h);
    }
    Ok(out)
}

impl ProvenanceStep {
    pub fn render(&self) -> String {
        format!("{}: {}", self.step, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, Task};

    fn small_dataset() -> Dataset {
        let montage = Montage::default_motor();
        let ids = montage.channel_ids();
        let n = 30;
        let mut d = Dataset::empty(montage);
        d.manifest.seed = Some(11);
        for (k, group) in [Group::Patient, Group::Control].into_iter().enumerate() {
            let rows: Vec<Vec<f64>> = (0..ids.len())
                .map(|c| (0..n).map(|t| 1.0 + 0.01 * ((c * 7 + t * 3 + k) as f64).sin() + 1e-17 * t as f64).collect())
                .collect();
            d.recordings.push(Recording {
                participant_id: format!("p{k:02}"),
                group,
                sample_rate_hz: d.sample_rate_hz,
                wavelengths_nm: d.wavelengths_nm,
                channels: ids.clone(),
                intensity: [rows.clone(), rows.iter().map(|r| r.iter().map(|v| v * 1.1).collect()).collect()],
                annotations: vec![Annotation { onset_s: 1.0 / 3.0, duration_s: 2.5, task: Task::Dual }],
            });
        }
        d
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let d = small_dataset();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&d, a.path()).unwrap();
        let back = load_dataset(a.path()).unwrap();
        assert_eq!(back, d);
        save_dataset(&back, b.path()).unwrap();
        for f in ["manifest.toml", "p00_wl1.csv", "p01_wl2.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn empty_dataset_has_empty_participant_list() {
        let d = Dataset::empty(Montage::default_motor());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("participants = []"));
        assert_eq!(load_dataset(dir.path()).unwrap().recordings.len(), 0);
    }

    #[test]
    fn missing_participant_file_is_reported() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        fs::remove_file(dir.path().join("p01_wl2.csv")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing participant file"), "{err}");
        assert!(err.contains("manifest.toml:"), "{err}");
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing manifest"), "{err}");
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("schema_version = 1", "schema_version = 9");
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("schema version 9"), "{err}");
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn channel_length_mismatch_is_reported() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("p00_wl2.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("channel-length mismatch"), "{err}");
    }

    #[test]
    fn ragged_row_reports_line() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("p00_wl1.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[4] = lines[4].rsplit_once(',').unwrap().0.to_string();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("p00_wl1.csv:5"), "{err}");
    }

    #[test]
    fn nonpositive_intensity_is_reported() {
        let d = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("p01_wl1.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
        fields[2] = "-1.0".into();
        lines[3] = fields.join(",");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("non-positive intensity"), "{err}");
    }

    #[test]
    fn annotation_past_end_refused_on_save() {
        let mut d = small_dataset();
        d.recordings[0].annotations[0].duration_s = 100.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(save_dataset(&d, dir.path()).is_err());
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn hemo_round_trip() {
        let mut h = HemoSeries::new(
            "p07",
            Group::Control,
            3.9,
            vec!["S1-D1".into(), "S2-D1".into()],
            vec![vec![1e-7, -2e-7, 3.3e-9], vec![0.0; 3]],
            vec![vec![-1e-8; 3], vec![5e-8; 3]],
            vec![Annotation { onset_s: 0.0, duration_s: 0.5, task: Task::Single }],
        )
        .unwrap();
        h.record("bandpass", "low=0.05,high=0.7");
        let dir = tempfile::tempdir().unwrap();
        save_hemo(std::slice::from_ref(&h), dir.path()).unwrap();
        assert_eq!(load_hemo(dir.path()).unwrap(), vec![h]);
    }
}
