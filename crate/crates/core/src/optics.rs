//! Optical density and modified Beer-Lambert inversion.
//!
//! Concentrations are in mol/L, extinction coefficients in L·mol⁻¹·cm⁻¹ and
//! source-detector distances in metres.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Extinction coefficients and pathlength factor at one wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtinctionRow<T> {
    pub wavelength_nm: T,
    pub eps_hbo: T,
    pub eps_hbr: T,
    pub dpf: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionTable<T> {
    rows: Vec<ExtinctionRow<T>>,
}

/// Default differential pathlength factor at every wavelength.
pub const DEFAULT_DPF: f64 = 6.0;

impl<T: Real> ExtinctionTable<T> {
    pub fn new(rows: Vec<ExtinctionRow<T>>) -> Result<Self> {
        for r in &rows {
            let ok = [r.wavelength_nm, r.eps_hbo, r.eps_hbr, r.dpf]
                .iter()
                .all(|v| v.is_finite() && *v > T::zero());
            if !ok {
                return Err(Error::Data(format!(
                    "extinction row at {} nm must hold positive finite values",
                    r.wavelength_nm
                )));
            }
        }
        Ok(ExtinctionTable { rows })
    }

    /// Commonly used literature values (tabulated molar extinction of
    /// hemoglobin in water) at 760 and 850 nm, DPF 6 at both.
    pub fn default_table() -> Self {
        let row = |w: f64, o: f64, r: f64| ExtinctionRow {
            wavelength_nm: T::lit(w),
            eps_hbo: T::lit(o),
            eps_hbr: T::lit(r),
            dpf: T::lit(DEFAULT_DPF),
        };
        ExtinctionTable {
            rows: vec![row(760.0, 586.0, 1548.52), row(850.0, 1058.0, 691.32)],
        }
    }

    pub fn rows(&self) -> &[ExtinctionRow<T>] {
        &self.rows
    }

    pub fn lookup(&self, wavelength_nm: T) -> Result<&ExtinctionRow<T>> {
        let tol = T::lit(1e-6);
        self.rows
            .iter()
            .find(|r| (r.wavelength_nm - wavelength_nm).abs() <= tol)
            .ok_or_else(|| Error::Data(format!("wavelength {wavelength_nm} nm missing from extinction table")))
    }

    /// Parses `wavelength_nm,eps_hbo,eps_hbr,dpf` rows (with that header).
    pub fn from_csv_str(text: &str, source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::parse(source, Some(1), e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["wavelength_nm", "eps_hbo", "eps_hbr", "dpf"] {
            return Err(Error::parse(source, Some(1), "expected header wavelength_nm,eps_hbo,eps_hbr,dpf"));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::parse(source, e.position().map(|p| p.line()), e.to_string()))?;
            let line = rec.position().map(|p| p.line());
            let mut v = [T::zero(); 4];
            for (i, f) in rec.iter().enumerate() {
                let x: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(source, line, format!("not a number: '{f}'")))?;
                v[i] = T::lit(x);
            }
            rows.push(ExtinctionRow {
                wavelength_nm: v[0],
                eps_hbo: v[1],
                eps_hbr: v[2],
                dpf: v[3],
            });
        }
        Self::new(rows)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    /// The 2×2 system mapping (ΔHbO, ΔHbR) to ΔOD at the two wavelengths.
    pub fn system(&self, wavelengths_nm: [T; 2], distance_m: T) -> Result<MbllSystem<T>> {
        if !(distance_m.is_finite() && distance_m > T::zero()) {
            return Err(Error::Config(format!("distance must be positive, got {distance_m}")));
        }
        let distance_cm = distance_m * T::lit(100.0);
        let a = self.lookup(wavelengths_nm[0])?;
        let b = self.lookup(wavelengths_nm[1])?;
        let m = [
            [a.eps_hbo * distance_cm * a.dpf, a.eps_hbr * distance_cm * a.dpf],
            [b.eps_hbo * distance_cm * b.dpf, b.eps_hbr * distance_cm * b.dpf],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let scale = (m[0][0] * m[1][1]).abs() + (m[0][1] * m[1][0]).abs();
        if !(det.abs() > T::tol(-12) * scale) {
            return Err(Error::Numerical(format!(
                "singular extinction matrix for wavelengths {} and {} nm",
                wavelengths_nm[0], wavelengths_nm[1]
            )));
        }
        Ok(MbllSystem { m, det })
    }
}

/// Pre-factored modified Beer-Lambert system for one channel geometry.
#[derive(Debug, Clone, Copy)]
pub struct MbllSystem<T> {
    m: [[T; 2]; 2],
    det: T,
}

impl<T: Real> MbllSystem<T> {
    /// ΔOD at both wavelengths for the given concentration changes.
    #[inline]
    pub fn forward(&self, hbo: T, hbr: T) -> (T, T) {
        (
            self.m[0][0] * hbo + self.m[0][1] * hbr,
            self.m[1][0] * hbo + self.m[1][1] * hbr,
        )
    }

    /// Exact solution of the 2×2 system by Cramer's rule.
    #[inline]
    pub fn invert(&self, od1: T, od2: T) -> (T, T) {
        let hbo = (self.m[1][1] * od1 - self.m[0][1] * od2) / self.det;
        let hbr = (self.m[0][0] * od2 - self.m[1][0] * od1) / self.det;
        (hbo, hbr)
    }
}

/// `od[t] = -ln(intensity[t] / reference)`; the reference defaults to the series mean.
pub fn intensity_to_od<T: Real>(intensity: &[T], reference: Option<T>) -> Result<Vec<T>> {
    if let Some(i) = intensity.iter().position(|&v| !(v.is_finite() && v > T::zero())) {
        return Err(Error::Data(format!("non-positive intensity at sample {i}")));
    }
    let reference = reference.unwrap_or_else(|| crate::scalar::mean(intensity));
    if !(reference.is_finite() && reference > T::zero()) {
        return Err(Error::Data(format!("reference intensity must be positive, got {reference}")));
    }
    Ok(intensity.iter().map(|&v| -(v / reference).ln()).collect())
}

/// Inverts two optical-density series into (ΔHbO, ΔHbR) in mol/L.
pub fn mbll_invert<T: Real>(
    od: [&[T]; 2],
    wavelengths_nm: [T; 2],
    distance_m: T,
    table: &ExtinctionTable<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if od[0].len() != od[1].len() {
        return Err(Error::Data(format!(
            "optical density series lengths differ: {} vs {}",
            od[0].len(),
            od[1].len()
        )));
    }
    let sys = table.system(wavelengths_nm, distance_m)?;
    Ok(od[0].iter().zip(od[1]).map(|(&a, &b)| sys.invert(a, b)).unzip())
}

/// Forward model: concentration changes to optical density at both wavelengths.
pub fn mbll_forward<T: Real>(
    hbo: &[T],
    hbr: &[T],
    wavelengths_nm: [T; 2],
    distance_m: T,
    table: &ExtinctionTable<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if hbo.len() != hbr.len() {
        return Err(Error::Data("hbo/hbr lengths differ".into()));
    }
    let sys = table.system(wavelengths_nm, distance_m)?;
    Ok(hbo.iter().zip(hbr).map(|(&o, &r)| sys.forward(o, r)).unzip())
}
