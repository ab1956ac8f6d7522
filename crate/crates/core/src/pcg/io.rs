//! WAV ingest, label manifests and the binary segment cache.
//!
//! Segment cache layout, little-endian:
//!
//! ```text
//! header  "QIVC" | version u16 | reserved u16 (0) | count u32 | length u32 (2000)
//! record  label u8 | id length u16 | id bytes | window u32 | length × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{at, Error, Result};
use crate::pcg::signal::{Label, Recording, Segment, SEGMENT_LEN};

pub const CACHE_MAGIC: &[u8; 4] = b"QIVC";
pub const CACHE_VERSION: u16 = 1;

/// Reads 16-bit PCM. Multi-channel files keep channel 0 and report a
/// warning.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, f64, Option<String>)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let ch = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(reader.len() as usize / ch);
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if i % ch == 0 {
            samples.push(s as f64 / 32768.0);
        }
    }
    let warning = (ch > 1).then(|| format!("{}: {ch} channels, using channel 0", path.display()));
    Ok((samples, spec.sample_rate as f64, warning))
}

/// Writes mono 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for &s in samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

/// `recording_id,relative_path,label` rows; an optional header row with
/// those names is skipped. Paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected 3",
                path.display(),
                line + 1,
                rec.len()
            )));
        }
        if line == 0 && &rec[0] == "recording_id" {
            continue;
        }
        out.push(ManifestEntry {
            id: rec[0].to_string(),
            path: base.join(&rec[1]),
            label: rec[2].parse()?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, String, Label)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["recording_id", "relative_path", "label"]).map_err(|e| Error::Io(e.to_string()))?;
    for (id, rel, label) in entries {
        w.write_record([id.as_str(), rel.as_str(), &label.to_string()]).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every manifest entry. Returns recordings and ingest warnings.
pub fn load_recordings(manifest: &Path) -> Result<(Vec<Recording>, Vec<String>)> {
    let mut recs = Vec::new();
    let mut warnings = Vec::new();
    for e in read_manifest(manifest)? {
        let (samples, sample_rate, warn) = read_wav(&e.path)?;
        warnings.extend(warn);
        recs.push(Recording {
            id: e.id,
            samples,
            sample_rate,
            label: e.label,
        });
    }
    Ok((recs, warnings))
}

pub fn write_cache(path: &Path, segments: &[Segment]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(at(path))?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&u32::try_from(segments.len()).map_err(|_| Error::invalid("too many segments"))?.to_le_bytes())?;
    w.write_all(&(SEGMENT_LEN as u32).to_le_bytes())?;
    for s in segments {
        if s.values.len() != SEGMENT_LEN {
            return Err(Error::shape("segment cache", "segment length", SEGMENT_LEN, s.values.len()));
        }
        w.write_all(&[s.label.index() as u8])?;
        let id = s.recording_id.as_bytes();
        w.write_all(&u16::try_from(id.len()).map_err(|_| Error::invalid("recording id too long"))?.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&s.window.to_le_bytes())?;
        for &v in &s.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Data("segment cache: truncated".into()))?;
    Ok(b)
}

pub fn read_cache(path: &Path) -> Result<Vec<Segment>> {
    let mut r = BufReader::new(File::open(path).map_err(at(path))?);
    if &read_exact::<4>(&mut r)? != CACHE_MAGIC {
        return Err(Error::Data(format!("{}: not a segment cache", path.display())));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("segment cache: unsupported version {version}")));
    }
    let _reserved = read_exact::<2>(&mut r)?;
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if len != SEGMENT_LEN {
        return Err(Error::Data(format!("segment cache: length {len}, expected {SEGMENT_LEN}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = Label::from_index(read_exact::<1>(&mut r)?[0] as usize)?;
        let n = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut id = vec![0u8; n];
        r.read_exact(&mut id).map_err(|_| Error::Data("segment cache: truncated".into()))?;
        let recording_id = String::from_utf8(id).map_err(|_| Error::Data("segment cache: id is not UTF-8".into()))?;
        let window = u32::from_le_bytes(read_exact(&mut r)?);
        let mut raw = vec![0u8; 4 * len];
        r.read_exact(&mut raw).map_err(|_| Error::Data("segment cache: truncated".into()))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        out.push(Segment {
            values,
            label,
            recording_id,
            window,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Data("segment cache: trailing bytes".into()));
    }
    Ok(out)
}
