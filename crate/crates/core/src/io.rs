//! On-disk formats: spectrum files, ground-truth manifests and track lists.
//! All writers are atomic (temporary file in the target directory, then
//! rename), so a failed command leaves no partial output.
//!
//! Spectrum file layout:
//!
//! ```text
//! TLSSPEC 1\n
//! <header: one line of JSON>\n
//! <body: little-endian f64>
//! ```
//!
//! The body holds the frequency axis (Hz), the bias axis (V/m), then the
//! grid as (re, im) pairs, frequency-major: cell (fi, bi) is pair
//! `fi * n_bias + bi`. The header records the shape and the SHA-256 of the
//! body.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::{ResonatorModel, SweepWindow, TwoLevelSystem};
use crate::pipeline::{MatchReport, TlsTrack};
use crate::spectrum::BiasSpectrum;
use crate::units::{DEBYE, GHZ, KHZ, KV_PER_M, PLANCK};

pub const SPECTRUM_MAGIC: &str = "TLSSPEC 1";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumHeader {
    pub format_version: u32,
    pub toolkit_version: String,
    pub n_freq: usize,
    pub n_bias: usize,
    pub freq_unit: String,
    pub bias_unit: String,
    pub layout: String,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    pub resonator: Option<ResonatorModel>,
    pub body_sha256: String,
}

impl SpectrumHeader {
    fn body_len(&self) -> Option<usize> {
        let cells = self.n_freq.checked_mul(self.n_bias)?;
        cells.checked_mul(2)?.checked_add(self.n_freq)?.checked_add(self.n_bias)?.checked_mul(8)
    }
}

/// Provenance stored with a spectrum.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectrumMeta {
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    pub resonator: Option<ResonatorModel>,
}

fn encode_body(spec: &BiasSpectrum) -> Vec<u8> {
    let mut body = Vec::with_capacity(8 * (spec.freqs.len() + spec.biases.len() + 2 * spec.data.len()));
    for x in spec.freqs.iter().chain(&spec.biases) {
        body.extend_from_slice(&x.to_le_bytes());
    }
    for z in &spec.data {
        body.extend_from_slice(&z.re.to_le_bytes());
        body.extend_from_slice(&z.im.to_le_bytes());
    }
    body
}

pub fn encode_spectrum(spec: &BiasSpectrum, meta: &SpectrumMeta) -> Vec<u8> {
    let body = encode_body(spec);
    let header = SpectrumHeader {
        format_version: 1,
        toolkit_version: TOOLKIT_VERSION.into(),
        n_freq: spec.n_freq(),
        n_bias: spec.n_bias(),
        freq_unit: "Hz".into(),
        bias_unit: "V/m".into(),
        layout: "f64le: freqs, biases, (re, im) frequency-major".into(),
        seed: meta.seed,
        config_sha256: meta.config_sha256.clone(),
        resonator: meta.resonator,
        body_sha256: hex::encode(Sha256::digest(&body)),
    };
    let mut out = Vec::with_capacity(body.len() + 1024);
    out.extend_from_slice(SPECTRUM_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    out
}

pub fn decode_spectrum(bytes: &[u8]) -> Result<(BiasSpectrum, SpectrumHeader)> {
    let mut lines = bytes.splitn(3, |b| *b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != SPECTRUM_MAGIC.as_bytes() {
        return Err(Error::data("not a spectrum file (bad magic line)"));
    }
    let head = lines.next().ok_or_else(|| Error::data("missing spectrum header"))?;
    let body = lines.next().ok_or_else(|| Error::data("missing spectrum body"))?;
    let header: SpectrumHeader =
        serde_json::from_slice(head).map_err(|e| Error::data(format!("bad spectrum header: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::data(format!("unsupported format version {}", header.format_version)));
    }
    let expected = header.body_len().ok_or_else(|| Error::data("grid shape overflows"))?;
    if body.len() != expected {
        return Err(Error::data(format!("body is {} bytes, header implies {expected}", body.len())));
    }
    if hex::encode(Sha256::digest(body)) != header.body_sha256 {
        return Err(Error::data("checksum mismatch: spectrum body is corrupted"));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (nf, nb) = (header.n_freq, header.n_bias);
    let freqs = vals[..nf].to_vec();
    let biases = vals[nf..nf + nb].to_vec();
    let data = vals[nf + nb..].chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
    let spec = BiasSpectrum::new(freqs, biases, data).map_err(|e| Error::data(e.to_string()))?;
    Ok((spec, header))
}

pub fn write_spectrum(path: &Path, spec: &BiasSpectrum, meta: &SpectrumMeta) -> Result<()> {
    write_atomic(path, &encode_spectrum(spec, meta))
}

pub fn read_spectrum(path: &Path) -> Result<(BiasSpectrum, SpectrumHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_spectrum(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// One ground-truth defect in display units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub delta0_ghz: f64,
    pub delta_ghz: f64,
    pub pz_debye: f64,
    pub vertex_bias_kvpm: f64,
    pub gamma_khz: f64,
    pub sigma_noise_khz: f64,
    pub resolvable: bool,
}

impl TruthRecord {
    pub fn new(t: &TwoLevelSystem, resolvable: bool) -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        Self {
            delta0_ghz: t.delta0 / PLANCK / GHZ,
            delta_ghz: t.delta / PLANCK / GHZ,
            pz_debye: t.pz / DEBYE,
            vertex_bias_kvpm: t.vertex_bias() / KV_PER_M,
            gamma_khz: t.gamma / two_pi / KHZ,
            sigma_noise_khz: t.sigma_noise / two_pi / KHZ,
            resolvable,
        }
    }

    pub fn tls(&self) -> TwoLevelSystem {
        let two_pi = 2.0 * std::f64::consts::PI;
        TwoLevelSystem {
            delta: self.delta_ghz * GHZ * PLANCK,
            delta0: self.delta0_ghz * GHZ * PLANCK,
            pz: self.pz_debye * DEBYE,
            gamma: self.gamma_khz * KHZ * two_pi,
            sigma_noise: self.sigma_noise_khz * KHZ * two_pi,
        }
    }
}

/// Ground truth of a simulated spectrum. Only defects whose vertex lies in
/// the sweep window are listed; `n_ensemble` counts all drawn defects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub n_ensemble: usize,
    pub window: SweepWindow,
    pub resonator: ResonatorModel,
    pub observable: Vec<TruthRecord>,
}

impl Manifest {
    pub fn resolvable(&self) -> Vec<TwoLevelSystem> {
        self.observable.iter().filter(|r| r.resolvable).map(TruthRecord::tls).collect()
    }

    pub fn observable_tls(&self) -> Vec<TwoLevelSystem> {
        self.observable.iter().map(TruthRecord::tls).collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))
}

/// One row of a track-list file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub delta0_ghz: f64,
    pub vertex_bias_kvpm: f64,
    pub pz_debye: f64,
    /// Mean squared frequency residual (kHz²).
    pub rss: f64,
    pub n_points: usize,
}

impl From<&TlsTrack> for TrackRecord {
    fn from(t: &TlsTrack) -> Self {
        Self {
            delta0_ghz: t.vertex_frequency() / GHZ,
            vertex_bias_kvpm: t.vertex_bias / KV_PER_M,
            pz_debye: t.pz / DEBYE,
            rss: t.rss / (KHZ * KHZ),
            n_points: t.n_points,
        }
    }
}

/// Track list as CSV. Lines starting with `#` carry provenance (toolkit
/// version, config hash, spectrum checksum) and, when ground truth was
/// available, the match report.
pub fn encode_tracks(
    tracks: &[TrackRecord],
    config_sha256: &str,
    spectrum_sha256: &str,
    report: Option<&MatchReport>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "# tlspec {TOOLKIT_VERSION}").unwrap();
    writeln!(out, "# config_sha256 {config_sha256}").unwrap();
    writeln!(out, "# spectrum_sha256 {spectrum_sha256}").unwrap();
    writeln!(out, "# units: delta0 GHz, vertex bias kV/m, pz Debye, rss kHz^2").unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        if tracks.is_empty() {
            w.write_record(["delta0_ghz", "vertex_bias_kvpm", "pz_debye", "rss", "n_points"])
                .map_err(|e| Error::data(e.to_string()))?;
        }
        for t in tracks {
            w.serialize(t).map_err(|e| Error::data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::data(e.to_string()))?;
    }
    if let Some(r) = report {
        writeln!(out, "# truth resolvable {} tracks {} matched {}", r.n_truth, r.n_tracks, r.matches.len()).unwrap();
        writeln!(out, "# recall {:.6} precision {:.6}", r.recall, r.precision).unwrap();
        if let Some(m) = r.median_pz_error() {
            writeln!(out, "# median_pz_rel_error {m:.6}").unwrap();
        }
    }
    Ok(out)
}

pub fn decode_tracks(bytes: &[u8]) -> Result<Vec<TrackRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    r.deserialize().map(|row| row.map_err(|e| Error::data(format!("bad track row: {e}")))).collect()
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tracks(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes rows of numbers as CSV with a header line.
pub fn encode_table(header: &[&str], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::data(e.to_string()))?;
    for row in rows {
        w.write_record(row.iter().map(|x| format!("{x:e}"))).map_err(|e| Error::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BiasSpectrum {
        let freqs = vec![4.9e9, 5.0e9, 5.1e9];
        let biases = vec![-1.0, 0.0, 1.0, 2.0];
        let data = (0..12).map(|i| Complex64::new(i as f64 * 0.1, -(i as f64).sqrt())).collect();
        BiasSpectrum::new(freqs, biases, data).unwrap()
    }

    #[test]
    fn spectrum_round_trip_is_exact() {
        let s = grid();
        let meta = SpectrumMeta { seed: Some(9), config_sha256: Some("ab".into()), resonator: None };
        let bytes = encode_spectrum(&s, &meta);
        let (back, h) = decode_spectrum(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!((h.n_freq, h.n_bias, h.seed), (3, 4, Some(9)));
        assert_eq!(encode_spectrum(&back, &meta), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_spectrum(&grid(), &SpectrumMeta::default());
        let n = bytes.len();
        bytes[n - 3] ^= 1;
        assert!(matches!(decode_spectrum(&bytes), Err(Error::Data(m)) if m.contains("checksum")));
        let short = &encode_spectrum(&grid(), &SpectrumMeta::default())[..n - 8];
        assert!(matches!(decode_spectrum(short), Err(Error::Data(_))));
        assert!(decode_spectrum(b"NOPE\n{}\n").is_err());
    }

    #[test]
    fn tracks_round_trip() {
        let rows = vec![
            TrackRecord { delta0_ghz: 5.001, vertex_bias_kvpm: -12.5, pz_debye: 3.25, rss: 12.0, n_points: 40 },
            TrackRecord { delta0_ghz: 4.995, vertex_bias_kvpm: 30.0, pz_debye: 1.5, rss: 3.0, n_points: 9 },
        ];
        let bytes = encode_tracks(&rows, "c", "s", None).unwrap();
        assert_eq!(decode_tracks(&bytes).unwrap(), rows);
        let empty = encode_tracks(&[], "c", "s", None).unwrap();
        assert!(decode_tracks(&empty).unwrap().is_empty());
        let text = String::from_utf8(empty).unwrap();
        assert!(text.contains("delta0_ghz,vertex_bias_kvpm,pz_debye,rss,n_points"));
    }

    #[test]
    fn truth_record_round_trip() {
        let t = TwoLevelSystem { delta: 1e-25, delta0: 3.3e-24, pz: 4.0 * DEBYE, gamma: 6.0e4, sigma_noise: 0.0 };
        let back = TruthRecord::new(&t, true).tls();
        assert!((back.delta0 / t.delta0 - 1.0).abs() < 1e-12);
        assert!((back.pz / t.pz - 1.0).abs() < 1e-12);
        assert!((back.vertex_bias() / t.vertex_bias() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
