//! Embedding-sequence persistence, dataset manifests, synthetic data
//! generation, and padded batching.
//!
//! Sequence file layout (EMBSEQ01, all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EMBSEQ01"
//! version  u32      1
//! label    u32
//! n        u64      frames
//! d        u64      embedding dimension
//! id_len   u16      followed by id_len UTF-8 bytes
//! data     n*d f64  row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{BinaryMask, Matrix, SeededRng};

const MAGIC: &[u8; 8] = b"EMBSEQ01";
const VERSION: u32 = 1;
/// Upper bound on either declared dimension; anything larger is a
/// corrupt or hostile file at this artifact's scale.
const MAX_DIM: u64 = 1 << 24;

/// One utterance's frame-level embedding matrix with its label.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub id: String,
    pub label: usize,
    pub x: Matrix,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

pub fn write_sequence(path: &Path, seq: &EmbeddingSequence) -> Result<()> {
    if seq.x.rows() == 0 {
        return Err(Error::InvalidArgument("sequence needs at least one frame".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(seq.label as u32).to_le_bytes())?;
    w.write_all(&(seq.x.rows() as u64).to_le_bytes())?;
    w.write_all(&(seq.x.cols() as u64).to_le_bytes())?;
    let id_bytes = seq.id.as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument("sequence id too long".into()));
    }
    w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
    w.write_all(id_bytes)?;
    for v in seq.x.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_sequence(path: &Path) -> Result<EmbeddingSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(path.display().to_string()));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut u32buf, path)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    read_exact_or_truncated(&mut r, &mut u32buf, path)?;
    let label = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut u64buf, path)?;
    let n = u64::from_le_bytes(u64buf);
    read_exact_or_truncated(&mut r, &mut u64buf, path)?;
    let d = u64::from_le_bytes(u64buf);
    if n == 0 || d == 0 || n > MAX_DIM || d > MAX_DIM || n.checked_mul(d).is_none() {
        return Err(Error::ShapeOverflow(path.display().to_string()));
    }
    let mut u16buf = [0u8; 2];
    read_exact_or_truncated(&mut r, &mut u16buf, path)?;
    let id_len = u16::from_le_bytes(u16buf) as usize;
    let mut id_bytes = vec![0u8; id_len];
    read_exact_or_truncated(&mut r, &mut id_bytes, path)?;
    let id = String::from_utf8(id_bytes)
        .map_err(|_| Error::InvalidArgument("sequence id is not UTF-8".into()))?;
    let count = (n * d) as usize;
    let mut data = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        read_exact_or_truncated(&mut r, &mut f64buf, path)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    let x = Matrix::from_vec(n as usize, d as usize, data)?;
    Ok(EmbeddingSequence { id, label, x })
}

/// One manifest entry: a sequence file with its label and frame count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub n: usize,
}

/// JSON dataset manifest; paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d_model: usize,
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let manifest: DatasetManifest = serde_json::from_reader(file)?;
        for entry in &manifest.entries {
            if entry.label >= manifest.labels.len() {
                return Err(Error::Config(format!(
                    "manifest entry {} has label {} outside {} classes",
                    entry.path,
                    entry.label,
                    manifest.labels.len()
                )));
            }
        }
        Ok(manifest)
    }

    /// Reads every referenced file and checks it against the manifest.
    pub fn load_sequences(&self, base_dir: &Path) -> Result<Vec<EmbeddingSequence>> {
        let mut out = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let seq = read_sequence(&base_dir.join(&entry.path))?;
            if seq.label != entry.label || seq.len() != entry.n || seq.x.cols() != self.d_model {
                return Err(Error::Config(format!(
                    "manifest entry {} disagrees with file contents",
                    entry.path
                )));
            }
            out.push(seq);
        }
        Ok(out)
    }
}

/// Loads a manifest and all sequences it references.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<EmbeddingSequence>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let seqs = manifest.load_sequences(&base)?;
    Ok((manifest, seqs))
}

/// Parameters for the synthetic per-class Gaussian generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub d_model: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub class_mean_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.d_model == 0 {
            return Err(Error::InvalidArgument("classes and d_model must be positive".into()));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::InvalidArgument("need 1 <= n_min <= n_max".into()));
        }
        if self.class_mean_scale < 0.0 || self.noise_scale < 0.0 {
            return Err(Error::InvalidArgument("scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Fixed unit-direction class means scaled by `class_mean_scale`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::new(self.seed).derive("class-means");
        (0..self.classes)
            .map(|_| {
                let raw: Vec<f64> = (0..self.d_model).map(|_| rng.next_normal()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v / norm * self.class_mean_scale).collect()
            })
            .collect()
    }
}

/// Generates `per_class` sequences per class: each frame is the class
/// mean plus isotropic Gaussian noise; lengths are uniform in the
/// configured range. Deterministic per seed.
pub fn gen_synthetic(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<EmbeddingSequence>> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = SeededRng::new(spec.seed).derive("frames");
    let mut out = Vec::with_capacity(spec.classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let n = spec.n_min + rng.next_below(spec.n_max - spec.n_min + 1);
            let mut x = Matrix::zeros(n, spec.d_model);
            for row in 0..n {
                for (j, m) in mean.iter().enumerate() {
                    x.set(row, j, m + spec.noise_scale * rng.next_normal());
                }
            }
            out.push(EmbeddingSequence {
                id: format!("class{}_{:04}", c, i),
                label: c,
                x,
            });
        }
    }
    Ok(out)
}

/// A padded batch: sequences zero-padded to the batch's max length, one
/// prefix-valid mask per sequence, labels aligned.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<Matrix>,
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Splits the dataset into padded batches, shuffling deterministically
/// when asked. Each batch is padded to its own max length.
pub fn make_batches(
    data: &[EmbeddingSequence],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        SeededRng::new(seed).derive("batch-order").shuffle(&mut order);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let max_n = chunk.iter().map(|&i| data[i].len()).max().unwrap_or(0);
        let mut x = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut ids = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let seq = &data[i];
            x.push(seq.x.pad_rows(max_n));
            masks.push(BinaryMask::prefix(seq.len(), max_n)?);
            labels.push(seq.label);
            ids.push(seq.id.clone());
        }
        batches.push(Batch { x, masks, labels, ids });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian_matrix;
    use std::collections::BTreeMap;

    fn sample_sequence(seed: u64, n: usize, d: usize, label: usize) -> EmbeddingSequence {
        EmbeddingSequence {
            id: format!("seq-{}", seed),
            label,
            x: gaussian_matrix(&mut SeededRng::new(seed), n, d),
        }
    }

    #[test]
    fn sequence_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.embseq");
        let seq = sample_sequence(41, 7, 16, 3);
        write_sequence(&path, &seq).unwrap();
        let back = read_sequence(&path).unwrap();
        assert_eq!(back.id, seq.id);
        assert_eq!(back.label, seq.label);
        assert_eq!(back.x, seq.x);
    }

    #[test]
    fn truncated_file_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.embseq");
        let seq = sample_sequence(42, 5, 4, 0);
        write_sequence(&path, &seq).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embseq");
        std::fs::write(&path, b"NOTMAGIC________________").unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.embseq");
        let seq = sample_sequence(43, 2, 2, 0);
        write_sequence(&path, &seq).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::Version(9))));
    }

    #[test]
    fn absurd_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.embseq");
        let seq = sample_sequence(44, 2, 2, 0);
        write_sequence(&path, &seq).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Overwrite n with an absurd value.
        bytes[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::ShapeOverflow(_))));
    }

    /// Golden fixture pinned in the repo: the format must stay readable
    /// byte-for-byte regardless of the platform that wrote it.
    #[test]
    fn golden_fixture_reads_identically() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.embseq");
        let seq = read_sequence(&path).unwrap();
        assert_eq!(seq.id, "golden-utt");
        assert_eq!(seq.label, 2);
        assert_eq!(seq.x.rows(), 3);
        assert_eq!(seq.x.cols(), 4);
        let want = [
            0.0, 0.5, -1.25, 3.0,
            -0.0078125, 42.0, -1e-3, 2.5e8,
            1.0, -2.0, 0.75, -0.375,
        ];
        for (a, b) in seq.x.data().iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
        // Re-serializing reproduces the pinned bytes exactly.
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("copy.embseq");
        write_sequence(&out, &seq).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&out).unwrap());
    }

    #[test]
    fn synthetic_deterministic_and_noise_free_case() {
        let spec = SyntheticSpec {
            classes: 3,
            d_model: 8,
            n_min: 4,
            n_max: 9,
            class_mean_scale: 2.0,
            noise_scale: 0.0,
            seed: 7,
        };
        let a = gen_synthetic(&spec, 5).unwrap();
        let b = gen_synthetic(&spec, 5).unwrap();
        assert_eq!(a.len(), 15);
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.x, t.x);
            assert_eq!(s.id, t.id);
        }
        // Zero noise: every frame equals the class mean.
        let means = spec.class_means();
        for seq in &a {
            for i in 0..seq.len() {
                for (j, m) in means[seq.label].iter().enumerate() {
                    assert_eq!(seq.x.get(i, j), *m);
                }
            }
        }
    }

    /// With a 4:1 mean/noise ratio a mean-pooled nearest-centroid rule
    /// must classify nearly everything; the task is learnable.
    #[test]
    fn synthetic_is_separable_by_centroids() {
        let spec = SyntheticSpec {
            classes: 5,
            d_model: 16,
            n_min: 20,
            n_max: 40,
            class_mean_scale: 4.0,
            noise_scale: 1.0,
            seed: 11,
        };
        let all = gen_synthetic(&spec, 40).unwrap();
        let (fit, held): (Vec<_>, Vec<_>) = all
            .iter()
            .enumerate()
            .partition(|(i, _)| i % 2 == 0);

        let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (_, seq) in &fit {
            let entry = centroids
                .entry(seq.label)
                .or_insert_with(|| (vec![0.0; spec.d_model], 0));
            for i in 0..seq.len() {
                for (acc, v) in entry.0.iter_mut().zip(seq.x.row(i)) {
                    *acc += v;
                }
            }
            entry.1 += seq.len();
        }
        let centroids: Vec<(usize, Vec<f64>)> = centroids
            .into_iter()
            .map(|(l, (sum, count))| (l, sum.iter().map(|v| v / count as f64).collect()))
            .collect();

        let mut correct = 0;
        for (_, seq) in &held {
            let mut pooled = vec![0.0; spec.d_model];
            for i in 0..seq.len() {
                for (acc, v) in pooled.iter_mut().zip(seq.x.row(i)) {
                    *acc += v;
                }
            }
            for v in &mut pooled {
                *v /= seq.len() as f64;
            }
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(&pooled).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.1.iter().zip(&pooled).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if best == seq.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.99, "centroid accuracy {}", acc);
    }

    #[test]
    fn batches_pad_and_mask() {
        let data = vec![
            sample_sequence(50, 3, 4, 0),
            sample_sequence(51, 5, 4, 1),
        ];
        let batches = make_batches(&data, 2, 0, false).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.x[0].rows(), 5);
        assert_eq!(b.masks[0].n_valid(), 3);
        assert_eq!(b.masks[0].len(), 5);
        for i in 3..5 {
            assert!(b.x[0].row(i).iter().all(|v| *v == 0.0));
        }
        assert_eq!(b.masks[1].n_valid(), 5);
    }

    #[test]
    fn batching_preserves_the_dataset() {
        let data: Vec<EmbeddingSequence> = (0..13)
            .map(|i| sample_sequence(60 + i, 2 + (i as usize % 5), 3, i as usize % 4))
            .collect();
        let batches = make_batches(&data, 4, 123, true).unwrap();
        let mut seen: Vec<(String, usize, Vec<f64>)> = Vec::new();
        for b in &batches {
            for (((x, mask), label), id) in
                b.x.iter().zip(&b.masks).zip(&b.labels).zip(&b.ids)
            {
                let valid = x.slice_rows(0, mask.n_valid());
                seen.push((id.clone(), *label, valid.data().to_vec()));
            }
        }
        assert_eq!(seen.len(), data.len());
        seen.sort_by(|a, b| a.0.cmp(&b.0));
        let mut want: Vec<(String, usize, Vec<f64>)> = data
            .iter()
            .map(|s| (s.id.clone(), s.label, s.x.data().to_vec()))
            .collect();
        want.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(seen, want);
    }

    #[test]
    fn equal_length_batches_fully_valid() {
        let data = vec![sample_sequence(70, 4, 3, 0), sample_sequence(71, 4, 3, 1)];
        let batches = make_batches(&data, 2, 0, false).unwrap();
        assert!(batches[0].masks.iter().all(|m| m.n_valid() == m.len()));
    }
}
