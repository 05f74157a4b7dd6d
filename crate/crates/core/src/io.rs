//! File formats: the MSC binary cube container and the small CSV formats
//! used for single spectra and reflectance libraries.
//!
//! MSC layout (all integers and floats little-endian):
//!
//! ```text
//! "MSC1" | u32 height | u32 width | u32 bands | u8 flags
//!        | [f32; bands] wavelengths   (only when flags & 1)
//!        | [f32; height*width*bands] payload, pixel-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cube::{validate_wavelengths, SpectralCube};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSC1";
const FLAG_WAVELENGTHS: u8 = 1;

pub fn load_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let mut reader = BufReader::new(File::open(path)?);
    read_cube(&mut reader)
}

pub fn save_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    // Invariants are enforced at construction; re-check in case of f32 overflow.
    if let Some(i) = cube.data().iter().position(|v| !(*v as f32).is_finite()) {
        return Err(Error::Validation {
            index: i,
            message: "value overflows f32 storage".into(),
        });
    }
    let mut writer = BufWriter::new(File::create(path)?);
    write_cube(cube, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn write_cube<W: Write>(cube: &SpectralCube, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    for dim in [cube.height(), cube.width(), cube.bands()] {
        let dim = u32::try_from(dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let flags = if cube.wavelengths().is_some() {
        FLAG_WAVELENGTHS
    } else {
        0
    };
    out.write_all(&[flags])?;
    if let Some(wl) = cube.wavelengths() {
        for w in wl {
            out.write_all(&(*w as f32).to_le_bytes())?;
        }
    }
    for v in cube.data() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cube<R: Read>(input: &mut R) -> Result<SpectralCube> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated header".into()))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let [height, width, bands] = dims;
    let mut flags = [0u8; 1];
    input
        .read_exact(&mut flags)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if flags[0] & !FLAG_WAVELENGTHS != 0 {
        return Err(Error::Format(format!("unknown flag bits {:#04x}", flags[0])));
    }
    let wavelengths = if flags[0] & FLAG_WAVELENGTHS != 0 {
        let wl = read_f32s(input, bands, "wavelengths")?;
        validate_wavelengths(&wl, bands)?;
        Some(wl)
    } else {
        None
    };
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(bands))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let data = read_f32s(input, count, "payload")?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let mut cube = SpectralCube::new(height, width, bands, data)?;
    cube.set_wavelengths(wavelengths);
    Ok(cube)
}

fn read_f32s<R: Read>(input: &mut R, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// A sampled curve: one value per wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSpectrum {
    pub wavelengths: Vec<f64>,
    pub values: Vec<f64>,
}

impl SampledSpectrum {
    /// Picks the samples at `targets`, which must all appear in the curve.
    pub fn select(&self, targets: &[f64]) -> Result<Vec<f64>> {
        select_by_wavelength(&self.wavelengths, targets)
            .map(|idx| idx.into_iter().map(|i| self.values[i]).collect())
    }
}

pub(crate) fn select_by_wavelength(available: &[f64], targets: &[f64]) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|t| {
            available
                .iter()
                .position(|w| (w - t).abs() <= 1e-3)
                .ok_or_else(|| Error::Format(format!("no sample at wavelength {t} nm")))
        })
        .collect()
}

fn parse_num(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {field:?} as a number")))
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(input)
}

/// Reads `wavelength,value` lines. A non-numeric first line is taken as a header.
pub fn read_spectrum_csv<R: Read>(input: R) -> Result<SampledSpectrum> {
    let mut wavelengths = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in csv_reader(input).records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Format(format!("line {}: expected two fields", i + 1)));
        }
        if i == 0 && rec[0].trim().parse::<f64>().is_err() {
            continue;
        }
        wavelengths.push(parse_num(&rec[0], i + 1)?);
        values.push(parse_num(&rec[1], i + 1)?);
    }
    if values.is_empty() {
        return Err(Error::Format("spectrum file has no samples".into()));
    }
    validate_wavelengths(&wavelengths, values.len())?;
    Ok(SampledSpectrum {
        wavelengths,
        values,
    })
}

pub fn load_spectrum_csv(path: impl AsRef<Path>) -> Result<SampledSpectrum> {
    read_spectrum_csv(File::open(path)?)
}

pub fn write_spectrum_csv<W: Write>(spectrum: &SampledSpectrum, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (wl, v) in spectrum.wavelengths.iter().zip(&spectrum.values) {
        w.write_record([wl.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_spectrum_csv(spectrum: &SampledSpectrum, path: impl AsRef<Path>) -> Result<()> {
    write_spectrum_csv(spectrum, File::create(path)?)
}

/// Header row of wavelengths followed by one spectrum per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTable {
    pub wavelengths: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table_csv<R: Read>(input: R) -> Result<SpectrumTable> {
    let mut records = csv_reader(input).into_records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format("table has no header row".into()))??;
    let wavelengths = header
        .iter()
        .map(|f| parse_num(f, 1))
        .collect::<Result<Vec<_>>>()?;
    validate_wavelengths(&wavelengths, wavelengths.len())?;
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != wavelengths.len() {
            return Err(Error::Format(format!(
                "line {}: expected {} fields, found {}",
                i + 2,
                wavelengths.len(),
                rec.len()
            )));
        }
        rows.push(
            rec.iter()
                .map(|f| parse_num(f, i + 2))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(SpectrumTable { wavelengths, rows })
}

pub fn write_table_csv<W: Write>(table: &SpectrumTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(table.wavelengths.iter().map(|v| v.to_string()))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
