//! On-disk dataset model: FVEC binary feature matrices plus a JSON manifest
//! carrying video-level labels and optional frame-level annotation spans.
//!
//! FVEC layout (little-endian, bit-exact):
//! bytes 0-3 magic "FVEC"; 4-5 version = 1 (u16); 6-7 reserved = 0;
//! 8-11 T (u32); 12-15 D (u32); then T*D float32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const FVEC_MAGIC: [u8; 4] = *b"FVEC";
pub const FVEC_VERSION: u16 = 1;

/// Per-video T x D matrix of snippet feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub video_id: String,
    pub data: Mat,
}

impl FeatureMatrix {
    pub fn new(video_id: impl Into<String>, data: Mat) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::DimMismatch("feature matrix must be at least 1x1".into()));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureMatrix { video_id: video_id.into(), data })
    }

    pub fn num_snippets(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Writes a feature matrix in the FVEC layout. Values are stored as f32.
pub fn write_features(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    if !matrix.data.is_finite() {
        return Err(Error::NonFinite(format!("matrix for video {}", matrix.video_id)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| w.write_all(buf).map_err(|e| Error::io(path, e));
    write(&FVEC_MAGIC)?;
    write(&FVEC_VERSION.to_le_bytes())?;
    write(&0u16.to_le_bytes())?;
    write(&(matrix.num_snippets() as u32).to_le_bytes())?;
    write(&(matrix.dim() as u32).to_le_bytes())?;
    for &v in matrix.data.data() {
        write(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an FVEC header without touching the payload.
pub fn read_header(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if head[0..4] != FVEC_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != FVEC_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let d = u32::from_le_bytes([head[12], head[13], head[14], head[15]]) as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(path, format!("degenerate shape {t}x{d}")));
    }
    Ok((t, d))
}

/// Reads an FVEC file, validating magic, version, shape, and finiteness.
pub fn read_features(path: &Path, video_id: impl Into<String>) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (t, d) = read_header_from(&mut r, path)?;
    let mut payload = vec![0u8; t * d * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(path, format!("truncated payload, expected {t}x{d} f32")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(t * d);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} contains non-finite value", path.display())));
        }
        data.push(v);
    }
    FeatureMatrix::new(video_id, Mat::from_vec(t, d, data))
}

/// Half-open frame span `[start_frame, end_frame)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSpan(pub u64, pub u64);

impl AnnotationSpan {
    pub fn start(&self) -> u64 {
        self.0
    }

    pub fn end(&self) -> u64 {
        self.1
    }

    pub fn len(&self) -> u64 {
        self.1 - self.0
    }

    pub fn is_empty(&self) -> bool {
        self.1 <= self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: u8,
    pub num_frames: u64,
    #[serde(default)]
    pub spans: Vec<AnnotationSpan>,
    pub feature_path: String,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }

    /// Snippet count implied by the frame count (short videos yield one snippet).
    pub fn expected_num_snippets(&self, snippet_len: u64) -> usize {
        if self.num_frames < snippet_len {
            1
        } else {
            (self.num_frames / snippet_len) as usize
        }
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Manifest(format!("video {}: label must be 0 or 1", self.video_id)));
        }
        if self.num_frames == 0 {
            return Err(Error::Manifest(format!("video {}: num_frames must be positive", self.video_id)));
        }
        if self.label == 0 && !self.spans.is_empty() {
            return Err(Error::Manifest(format!(
                "video {}: normal video must not carry annotation spans",
                self.video_id
            )));
        }
        let mut prev_end = 0u64;
        for (i, span) in self.spans.iter().enumerate() {
            if span.is_empty() {
                return Err(Error::Manifest(format!(
                    "video {}: span {i} is empty ({} >= {})",
                    self.video_id, span.0, span.1
                )));
            }
            if i > 0 && span.0 < prev_end {
                return Err(Error::Manifest(format!(
                    "video {}: spans overlap or are unsorted at index {i}",
                    self.video_id
                )));
            }
            prev_end = span.1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<VideoRecord>,
    #[serde(default)]
    pub val: Vec<VideoRecord>,
    #[serde(default)]
    pub test: Vec<VideoRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub snippet_len: u64,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[VideoRecord] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn all_records(&self) -> impl Iterator<Item = &VideoRecord> {
        self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test)
    }

    /// Structural validation: record invariants, unique ids, at least one
    /// abnormal and one normal training video.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Manifest("dim must be positive".into()));
        }
        if self.snippet_len == 0 {
            return Err(Error::Manifest("snippet_len must be positive".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for rec in self.all_records() {
            rec.validate()?;
            if !ids.insert(rec.video_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video_id {:?}", rec.video_id)));
            }
        }
        let abn = self.splits.train.iter().filter(|r| r.is_abnormal()).count();
        let nrm = self.splits.train.len() - abn;
        if abn == 0 || nrm == 0 {
            return Err(Error::Manifest(format!(
                "train split needs at least 1 abnormal and 1 normal video (got {abn}/{nrm})"
            )));
        }
        Ok(())
    }

    /// Resolves a record's feature path relative to the manifest directory.
    pub fn resolve_feature_path(&self, base_dir: &Path, rec: &VideoRecord) -> PathBuf {
        base_dir.join(&rec.feature_path)
    }
}

/// A manifest bound to the directory its feature files live in.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
}

impl Corpus {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let base_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Corpus { manifest, base_dir })
    }

    pub fn load_features(&self, rec: &VideoRecord) -> Result<FeatureMatrix> {
        let path = self.manifest.resolve_feature_path(&self.base_dir, rec);
        let m = read_features(&path, rec.video_id.clone())?;
        if m.dim() != self.manifest.dim {
            return Err(Error::DimMismatch(format!(
                "video {}: feature dim {} != manifest dim {}",
                rec.video_id,
                m.dim(),
                self.manifest.dim
            )));
        }
        let expected = rec.expected_num_snippets(self.manifest.snippet_len);
        if m.num_snippets() != expected {
            return Err(Error::DimMismatch(format!(
                "video {}: {} snippets on disk, {} implied by num_frames={}",
                rec.video_id,
                m.num_snippets(),
                expected,
                rec.num_frames
            )));
        }
        Ok(m)
    }

    /// Deep validation: every feature file exists with the manifest's dim and
    /// the snippet count implied by the record's frame count.
    pub fn validate_features(&self) -> Result<()> {
        for rec in self.manifest.all_records() {
            let path = self.manifest.resolve_feature_path(&self.base_dir, rec);
            let (t, d) = read_header(&path)?;
            if d != self.manifest.dim {
                return Err(Error::DimMismatch(format!(
                    "video {}: feature dim {d} != manifest dim {}",
                    rec.video_id, self.manifest.dim
                )));
            }
            let expected = rec.expected_num_snippets(self.manifest.snippet_len);
            if t != expected {
                return Err(Error::DimMismatch(format!(
                    "video {}: {t} snippets on disk, {expected} implied by num_frames",
                    rec.video_id
                )));
            }
            if let Some(last) = rec.spans.last() {
                if last.end() > rec.num_frames {
                    return Err(Error::Manifest(format!(
                        "video {}: span ends at {} beyond num_frames {}",
                        rec.video_id,
                        last.end(),
                        rec.num_frames
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates a manifest; checks every feature path resolves to a file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    manifest.validate()?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    for rec in manifest.all_records() {
        let fpath = manifest.resolve_feature_path(base_dir, rec);
        if !fpath.is_file() {
            return Err(Error::Manifest(format!(
                "video {}: feature file {} not found",
                rec.video_id,
                fpath.display()
            )));
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-frame binary ground truth from a record's annotation spans.
pub fn frame_labels_from_spans(record: &VideoRecord) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; record.num_frames as usize];
    for span in &record.spans {
        if span.end() > record.num_frames {
            return Err(Error::Manifest(format!(
                "video {}: span end {} beyond num_frames {}",
                record.video_id,
                span.end(),
                record.num_frames
            )));
        }
        for f in span.start()..span.end() {
            labels[f as usize] = 1;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn record(id: &str, label: u8, num_frames: u64, spans: Vec<(u64, u64)>) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            label,
            num_frames,
            spans: spans.into_iter().map(|(s, e)| AnnotationSpan(s, e)).collect(),
            feature_path: format!("{id}.fvec"),
        }
    }

    #[test]
    fn fvec_round_trip_small() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.fvec");
        let m = FeatureMatrix::new("a", Mat::from_vec(1, 2, vec![3.0, 4.0])).unwrap();
        write_features(&m, &path).unwrap();
        // header 16 bytes + 2 f32 payload
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 8);
        let back = read_features(&path, "a").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fvec_payload_size_320x1024() {
        // byte-count arithmetic from the format definition
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.fvec");
        let m = FeatureMatrix::new("big", Mat::zeros(320, 1024)).unwrap();
        write_features(&m, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 320 * 1024 * 4);
    }

    #[test]
    fn nan_matrix_rejected() {
        assert!(matches!(
            FeatureMatrix::new("x", Mat::from_vec(1, 1, vec![f64::NAN])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fvec");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_features(&path, "bad"), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.fvec");
        let m = FeatureMatrix::new("t", Mat::zeros(10, 4)).unwrap();
        write_features(&m, &path).unwrap();
        // chop off the last row
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = read_features(&path, "t").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn manifest_rejects_normal_with_spans() {
        let m = DatasetManifest {
            name: "t".into(),
            dim: 4,
            snippet_len: 16,
            splits: Splits {
                train: vec![
                    record("a", 1, 160, vec![(0, 32)]),
                    record("n", 0, 160, vec![(0, 16)]),
                ],
                ..Default::default()
            },
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_rejects_overlapping_spans() {
        let m = DatasetManifest {
            name: "t".into(),
            dim: 4,
            snippet_len: 16,
            splits: Splits {
                train: vec![
                    record("a", 1, 160, vec![(0, 20), (10, 30)]),
                    record("n", 0, 160, vec![]),
                ],
                ..Default::default()
            },
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let m = DatasetManifest {
            name: "t".into(),
            dim: 4,
            snippet_len: 16,
            splits: Splits {
                train: vec![record("a", 1, 160, vec![(0, 16)]), record("n", 0, 160, vec![])],
                test: vec![record("a", 0, 160, vec![])],
                ..Default::default()
            },
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn minimal_manifest_accepted() {
        let m = DatasetManifest {
            name: "t".into(),
            dim: 4,
            snippet_len: 16,
            splits: Splits {
                train: vec![record("a", 1, 160, vec![(0, 16)]), record("n", 0, 160, vec![])],
                ..Default::default()
            },
        };
        m.validate().unwrap();
    }

    #[test]
    fn frame_labels_basic() {
        let r = record("a", 1, 10, vec![(2, 5)]);
        assert_eq!(frame_labels_from_spans(&r).unwrap(), vec![0, 0, 1, 1, 1, 0, 0, 0, 0, 0]);
        let r = record("n", 0, 4, vec![]);
        assert_eq!(frame_labels_from_spans(&r).unwrap(), vec![0; 4]);
        let r = record("f", 1, 8, vec![(0, 8)]);
        assert_eq!(frame_labels_from_spans(&r).unwrap(), vec![1; 8]);
    }

    #[test]
    fn frame_labels_out_of_range_span() {
        let r = record("a", 1, 10, vec![(5, 12)]);
        assert!(frame_labels_from_spans(&r).is_err());
    }

    #[test]
    fn short_video_rule() {
        let r = record("s", 0, 7, vec![]);
        assert_eq!(r.expected_num_snippets(16), 1);
        let r = record("s2", 0, 47, vec![]);
        assert_eq!(r.expected_num_snippets(16), 2);
    }
}
