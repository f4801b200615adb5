//! Query-to-reference matching: sequence fingerprinting, per-segment ANN
//! lookup, offset compensation and voting, full-precision sequence scoring,
//! and top-1 hit-rate evaluation.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{Encoder, Fingerprint};
use crate::error::{Error, Result};
use crate::features::{extract_features, segment, MelExtractor, SegmentSpec, WaveBuffer};
use crate::index::IvfPqIndex;

/// One reference track's span of global segment ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: u64,
    pub source: String,
    pub first_segment: u64,
    pub n_segments: u64,
}

/// Full-precision reference fingerprints indexed by global segment id, plus
/// the track manifest and the segmentation the fingerprints were cut with.
#[derive(Debug, Clone, Default)]
pub struct ReferenceDb {
    pub dim: usize,
    fingerprints: Vec<f32>,
    pub tracks: Vec<TrackRecord>,
    pub window_s: f64,
    pub hop_s: f64,
}

impl ReferenceDb {
    pub fn new(dim: usize, spec: &SegmentSpec) -> Self {
        ReferenceDb {
            dim,
            fingerprints: Vec::new(),
            tracks: Vec::new(),
            window_s: spec.window_s,
            hop_s: spec.hop_s,
        }
    }

    /// Total number of reference segments.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.fingerprints.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fingerprint(&self, id: u64) -> &[f32] {
        let id = id as usize;
        &self.fingerprints[id * self.dim..(id + 1) * self.dim]
    }

    pub fn fingerprints(&self) -> &[f32] {
        &self.fingerprints
    }

    /// Append a track's fingerprints; segment ids stay dense and consecutive.
    pub fn add_track(&mut self, track_id: u64, source: &str, fps: &[Fingerprint]) -> Result<()> {
        if fps.is_empty() {
            return Err(Error::data(format!("track {track_id} has no segments")));
        }
        if self.tracks.iter().any(|t| t.track_id == track_id) {
            return Err(Error::data(format!("duplicate track id {track_id}")));
        }
        let first = self.len() as u64;
        for fp in fps {
            if fp.dim() != self.dim {
                return Err(Error::data("fingerprint dimension mismatch"));
            }
            self.fingerprints.extend_from_slice(fp.as_slice());
        }
        self.tracks.push(TrackRecord {
            track_id,
            source: source.to_string(),
            first_segment: first,
            n_segments: fps.len() as u64,
        });
        Ok(())
    }

    /// Track record containing the given global segment id.
    pub fn track_of(&self, segment_id: u64) -> Option<&TrackRecord> {
        self.tracks
            .iter()
            .find(|t| segment_id >= t.first_segment && segment_id < t.first_segment + t.n_segments)
    }

    /// Start time in milliseconds of a segment within its track.
    pub fn segment_start_ms(&self, segment_id: u64) -> Option<f64> {
        let t = self.track_of(segment_id)?;
        Some((segment_id - t.first_segment) as f64 * self.hop_s * 1000.0)
    }

    /// Write the fingerprint store ("GRFP") and the companion manifest.
    pub fn save(&self, store_path: &Path, manifest_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(store_path)?);
        w.write_all(b"GRFP")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.dim as u16).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.fingerprints {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let mut m = BufWriter::new(std::fs::File::create(manifest_path)?);
        writeln!(m, "# window_s={}", self.window_s)?;
        writeln!(m, "# hop_s={}", self.hop_s)?;
        for t in &self.tracks {
            writeln!(m, "{}\t{}\t{}\t{}", t.track_id, t.source, t.first_segment, t.n_segments)?;
        }
        m.flush()?;
        Ok(())
    }

    pub fn load(store_path: &Path, manifest_path: &Path) -> Result<Self> {
        let file = std::fs::File::open(store_path).map_err(|e| {
            Error::data(format!("cannot open fingerprint store {}: {e}", store_path.display()))
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GRFP" {
            return Err(Error::format(format!(
                "{} is not a fingerprint store (bad magic)",
                store_path.display()
            )));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != 1 {
            return Err(Error::format(format!("unsupported store version {version}")));
        }
        r.read_exact(&mut b2)?;
        let dim = u16::from_le_bytes(b2) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut fingerprints = Vec::with_capacity(count * dim);
        let mut b4 = [0u8; 4];
        for _ in 0..count * dim {
            r.read_exact(&mut b4)?;
            fingerprints.push(f32::from_le_bytes(b4));
        }
        let text = std::fs::read_to_string(manifest_path).map_err(|e| {
            Error::data(format!("cannot read manifest {}: {e}", manifest_path.display()))
        })?;
        let mut db = ReferenceDb {
            dim,
            fingerprints,
            tracks: Vec::new(),
            window_s: 1.0,
            hop_s: 0.1,
        };
        let mut expected_first = 0u64;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("window_s=") {
                    db.window_s = v.parse().map_err(|_| Error::format("bad window_s"))?;
                } else if let Some(v) = rest.trim().strip_prefix("hop_s=") {
                    db.hop_s = v.parse().map_err(|_| Error::format("bad hop_s"))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(format!(
                    "manifest line {}: expected 4 tab-separated fields",
                    lineno + 1
                )));
            }
            let rec = TrackRecord {
                track_id: fields[0].parse().map_err(|_| Error::format("bad track id"))?,
                source: fields[1].to_string(),
                first_segment: fields[2].parse().map_err(|_| Error::format("bad segment id"))?,
                n_segments: fields[3].parse().map_err(|_| Error::format("bad segment count"))?,
            };
            if rec.first_segment != expected_first {
                return Err(Error::format("manifest segment ids are not dense"));
            }
            expected_first += rec.n_segments;
            db.tracks.push(rec);
        }
        if expected_first as usize != db.len() {
            return Err(Error::format(format!(
                "manifest covers {expected_first} segments but store holds {}",
                db.len()
            )));
        }
        Ok(db)
    }
}

/// Cut a track into overlapping segments and encode one fingerprint per
/// segment in temporal order (inference mode; deterministic).
pub fn fingerprint_track(
    wave: &WaveBuffer,
    encoder: &Encoder,
    spec: &SegmentSpec,
    extractor: &MelExtractor,
) -> Result<Vec<Fingerprint>> {
    let segments = segment(wave, spec)?;
    let feats = segments
        .iter()
        .map(|s| extract_features(s, extractor))
        .collect::<Result<Vec<_>>>()?;
    encoder.encode(&feats)
}

/// Offset compensation: subtract the query-segment position from each
/// retrieved id so every row votes for the query's starting reference id.
/// Negative entries remain in the matrix but are discarded from candidacy.
pub fn offset_compensate(retrieved: &[Vec<u64>]) -> Vec<Vec<i64>> {
    retrieved
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&id| id as i64 - i as i64).collect())
        .collect()
}

/// Unique non-negative candidate start ids within the database bound,
/// sorted ascending.
pub fn candidate_set(compensated: &[Vec<i64>], total_segments: u64) -> Vec<u64> {
    let mut set: Vec<u64> = compensated
        .iter()
        .flatten()
        .filter(|&&id| id >= 0 && (id as u64) < total_segments)
        .map(|&id| id as u64)
        .collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// Mean inner product between the query sequence and the reference run
/// starting at `k`, in double precision. Returns `None` when the run would
/// cross a track boundary or the end of the database.
pub fn sequence_score(query: &[Fingerprint], db: &ReferenceDb, k: u64) -> Option<f64> {
    let m = query.len() as u64;
    if m == 0 || k + m > db.len() as u64 {
        return None;
    }
    let track = db.track_of(k)?;
    if k + m > track.first_segment + track.n_segments {
        return None; // crosses a track boundary
    }
    let mut acc = 0.0f64;
    for (j, q) in query.iter().enumerate() {
        let r = db.fingerprint(k + j as u64);
        let mut dot = 0.0f64;
        for (a, b) in q.as_slice().iter().zip(r) {
            dot += *a as f64 * *b as f64;
        }
        acc += dot;
    }
    Some(acc / m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub track_id: u64,
    pub start_segment: u64,
    /// Predicted start time within the track, in milliseconds.
    pub start_ms: f64,
    /// Mean inner product over the aligned sequence.
    pub score: f64,
    /// Score gap to the best candidate with a different start.
    pub runner_up_margin: f64,
}

/// End-to-end identification of one query waveform. `n` is the ANN fan-out
/// per query segment; `min_score` optionally rejects weak matches.
pub fn identify(
    query_wave: &WaveBuffer,
    db: &ReferenceDb,
    index: &IvfPqIndex,
    encoder: &Encoder,
    extractor: &MelExtractor,
    nprobe: usize,
    n: usize,
    min_score: Option<f64>,
) -> Result<Option<MatchResult>> {
    let spec = SegmentSpec { window_s: db.window_s, hop_s: db.hop_s };
    spec.validate()?;
    if db.is_empty() {
        return Err(Error::data("reference database is empty"));
    }
    let query = fingerprint_track(query_wave, encoder, &spec, extractor)?;
    let mut retrieved = Vec::with_capacity(query.len());
    for q in &query {
        let hits = index.search(q.as_slice(), n, nprobe)?;
        retrieved.push(hits.into_iter().map(|(id, _)| id).collect::<Vec<u64>>());
    }
    let compensated = offset_compensate(&retrieved);
    let candidates = candidate_set(&compensated, db.len() as u64);
    let mut best: Option<(f64, u64)> = None;
    let mut runner: Option<f64> = None;
    for k in candidates {
        let Some(score) = sequence_score(&query, db, k) else {
            continue;
        };
        match best {
            Some((bs, _)) if score > bs => {
                runner = Some(bs);
                best = Some((score, k));
            }
            Some((bs, _)) => {
                if runner.map_or(true, |r| score > r) && score < bs {
                    runner = Some(score);
                }
            }
            None => best = Some((score, k)),
        }
    }
    let Some((score, k)) = best else {
        return Ok(None);
    };
    if let Some(min) = min_score {
        if score < min {
            return Ok(None);
        }
    }
    let track = db.track_of(k).expect("candidate validated against manifest");
    Ok(Some(MatchResult {
        track_id: track.track_id,
        start_segment: k,
        start_ms: (k - track.first_segment) as f64 * db.hop_s * 1000.0,
        score,
        runner_up_margin: runner.map_or(score, |r| score - r),
    }))
}

/// A labeled evaluation query.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub wave: WaveBuffer,
    pub true_track: u64,
    pub true_start_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub top1_hit_rate: f64,
    pub margin_ms: f64,
}

/// Top-1 hit rate: a query counts as correct when the predicted track
/// matches and the predicted start time is within `margin_ms` of the truth.
pub fn evaluate(
    queries: &[EvalQuery],
    db: &ReferenceDb,
    index: &IvfPqIndex,
    encoder: &Encoder,
    nprobe: usize,
    n: usize,
    margin_ms: f64,
) -> Result<EvalReport> {
    let results: Vec<bool> = queries
        .par_iter()
        .map(|q| {
            let extractor = MelExtractor::new(Default::default());
            let m = identify(&q.wave, db, index, encoder, &extractor, nprobe, n, None)?;
            Ok(m.is_some_and(|m| {
                m.track_id == q.true_track && (m.start_ms - q.true_start_ms).abs() <= margin_ms
            }))
        })
        .collect::<Result<_>>()?;
    let correct = results.iter().filter(|&&c| c).count();
    Ok(EvalReport {
        total: queries.len(),
        correct,
        top1_hit_rate: 100.0 * correct as f64 / queries.len().max(1) as f64,
        margin_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, StageConfig};
    use crate::index::IndexConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tiny_encoder() -> Encoder {
        let cfg = EncoderConfig {
            in_mels: 64,
            in_frames: 32,
            stem_channels: vec![8, 8],
            stem_strides: vec![(4, 2), (4, 2)],
            node_dim: 8,
            k: 3,
            stages: vec![StageConfig { blocks: 1, channels: 8, downsample: false }],
            embed_dim: 16,
        };
        Encoder::new(cfg, 11).unwrap()
    }

    fn noise_track(seed: u64, samples: usize) -> WaveBuffer {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        WaveBuffer::new((0..samples).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    fn unit_fp(dim: usize, axis: usize) -> Fingerprint {
        let mut v = vec![0.0f32; dim];
        v[axis] = 1.0;
        Fingerprint(v)
    }

    #[test]
    fn fingerprint_track_segment_counts() {
        let enc = tiny_encoder();
        let spec = SegmentSpec::default();
        let extractor = MelExtractor::new(Default::default());
        let fps =
            fingerprint_track(&noise_track(1, 30 * 16_000), &enc, &spec, &extractor).unwrap();
        assert_eq!(fps.len(), 291);
        let fps = fingerprint_track(&noise_track(2, 16_000), &enc, &spec, &extractor).unwrap();
        assert_eq!(fps.len(), 1);
    }

    #[test]
    fn offset_compensate_arithmetic() {
        // m = 1: identity.
        let single = offset_compensate(&[vec![7, 3]]);
        assert_eq!(single, vec![vec![7, 3]]);
        // Hit id 105 in row 5 compensates to 100.
        let rows: Vec<Vec<u64>> = (0..6).map(|_| vec![105]).collect();
        let comp = offset_compensate(&rows);
        assert_eq!(comp[5], vec![100]);
        // I*[i][j] + i reconstructs I exactly.
        let rows = vec![vec![4, 9], vec![1, 2], vec![0, 30]];
        let comp = offset_compensate(&rows);
        for (i, row) in comp.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!((v + i as i64) as u64, rows[i][j]);
            }
        }
    }

    #[test]
    fn candidate_set_filters_and_dedupes() {
        let comp = vec![vec![5, -1, 5], vec![5, 900]];
        assert_eq!(candidate_set(&comp, 100), vec![5]);
        assert_eq!(candidate_set(&[vec![-3], vec![-1]], 100), Vec::<u64>::new());
        let comp = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert!(candidate_set(&comp, 100).len() <= 6);
    }

    fn basis_db(n: usize, dim: usize) -> ReferenceDb {
        let mut db = ReferenceDb::new(dim, &SegmentSpec::default());
        let fps: Vec<Fingerprint> = (0..n).map(|i| unit_fp(dim, i % dim)).collect();
        db.add_track(0, "t0", &fps).unwrap();
        db
    }

    #[test]
    fn sequence_score_exact_and_orthogonal() {
        let db = basis_db(8, 16);
        let q: Vec<Fingerprint> = (2..5).map(|i| unit_fp(16, i)).collect();
        assert!((sequence_score(&q, &db, 2).unwrap() - 1.0).abs() < 1e-9);
        // Orthogonal to everything at offset 10.. none exist; shift by 8 axes.
        let q: Vec<Fingerprint> = (0..3).map(|i| unit_fp(16, 8 + i)).collect();
        assert_eq!(sequence_score(&q, &db, 0).unwrap(), 0.0);
    }

    #[test]
    fn sequence_score_matches_loop_oracle() {
        let dim = 16;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut db = ReferenceDb::new(dim, &SegmentSpec::default());
        let fps: Vec<Fingerprint> = (0..20)
            .map(|_| {
                let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                Fingerprint(v)
            })
            .collect();
        db.add_track(0, "t0", &fps).unwrap();
        let q: Vec<Fingerprint> = (0..3).map(|_| fps[rng.gen_range(0..20)].clone()).collect();
        for k in [0u64, 5, 17] {
            let got = sequence_score(&q, &db, k).unwrap();
            let mut want = 0.0f64;
            for j in 0..3 {
                for c in 0..dim {
                    want += q[j].0[c] as f64 * db.fingerprint(k + j as u64)[c] as f64;
                }
            }
            want /= 3.0;
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn sequence_score_rejects_boundary_crossing() {
        let mut db = ReferenceDb::new(4, &SegmentSpec::default());
        db.add_track(0, "a", &[unit_fp(4, 0), unit_fp(4, 1)]).unwrap();
        db.add_track(1, "b", &[unit_fp(4, 2), unit_fp(4, 3)]).unwrap();
        let q = vec![unit_fp(4, 1), unit_fp(4, 2)];
        assert!(sequence_score(&q, &db, 1).is_none());
        assert!(sequence_score(&q, &db, 2).is_some());
        assert!(sequence_score(&q, &db, 3).is_none());
    }

    /// Build a two-track db with a real (random-weight) encoder and return
    /// everything needed for identify tests.
    fn small_pipeline() -> (ReferenceDb, IvfPqIndex, Encoder, Vec<WaveBuffer>) {
        let enc = tiny_encoder();
        let spec = SegmentSpec::default();
        let extractor = MelExtractor::new(Default::default());
        let tracks: Vec<WaveBuffer> = (0..2).map(|i| noise_track(50 + i, 4 * 16_000)).collect();
        let mut db = ReferenceDb::new(16, &spec);
        for (i, t) in tracks.iter().enumerate() {
            let fps = fingerprint_track(t, &enc, &spec, &extractor).unwrap();
            db.add_track(i as u64, &format!("t{i}"), &fps).unwrap();
        }
        let cfg = IndexConfig {
            n_centroids: 8,
            m_subspaces: 4,
            dim: 16,
            ..Default::default()
        };
        let mut index = IvfPqIndex::train(db.fingerprints(), cfg).unwrap();
        let ids: Vec<u64> = (0..db.len() as u64).collect();
        index.add(db.fingerprints(), &ids).unwrap();
        (db, index, enc, tracks)
    }

    #[test]
    fn identify_clean_self_retrieval() {
        let (db, index, enc, tracks) = small_pipeline();
        let extractor = MelExtractor::new(Default::default());
        // Query = exact copy of segments 10..29 of track 1 (hop 0.1 s).
        let hop = 1600;
        let start = 10 * hop;
        let len = 16_000 + 19 * hop;
        let wave = WaveBuffer::new(
            tracks[1].samples[start..start + len].to_vec(),
            16_000,
        )
        .unwrap();
        let m = identify(&wave, &db, &index, &enc, &extractor, 8, 20, None)
            .unwrap()
            .expect("match");
        assert_eq!(m.track_id, 1);
        let first = db.tracks[1].first_segment;
        assert_eq!(m.start_segment, first + 10);
        assert!((m.score - 1.0).abs() < 1e-5, "score {}", m.score);
        assert!((m.start_ms - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn identify_single_segment_reduces_to_ann_top1() {
        let (db, index, enc, tracks) = small_pipeline();
        let extractor = MelExtractor::new(Default::default());
        let wave = WaveBuffer::new(tracks[0].samples[..16_000].to_vec(), 16_000).unwrap();
        let m = identify(&wave, &db, &index, &enc, &extractor, 8, 20, None)
            .unwrap()
            .expect("match");
        assert_eq!(m.track_id, 0);
        assert_eq!(m.start_segment, 0);
    }

    #[test]
    fn identify_rejects_short_query() {
        let (db, index, enc, _) = small_pipeline();
        let extractor = MelExtractor::new(Default::default());
        let wave = noise_track(9, 1000);
        assert!(identify(&wave, &db, &index, &enc, &extractor, 8, 20, None).is_err());
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let (db, index, enc, tracks) = small_pipeline();
        let queries: Vec<EvalQuery> = (0..4)
            .map(|i| {
                let start = i * 3200;
                EvalQuery {
                    wave: WaveBuffer::new(
                        tracks[i % 2].samples[start..start + 2 * 16_000].to_vec(),
                        16_000,
                    )
                    .unwrap(),
                    true_track: (i % 2) as u64,
                    true_start_ms: start as f64 / 16.0,
                }
            })
            .collect();
        let report = evaluate(&queries, &db, &index, &enc, 8, 20, 50.0).unwrap();
        assert_eq!(report.correct, 4);
        assert_eq!(report.top1_hit_rate, 100.0);
        // Order invariance.
        let reversed: Vec<EvalQuery> = queries.into_iter().rev().collect();
        let r2 = evaluate(&reversed, &db, &index, &enc, 8, 20, 50.0).unwrap();
        assert_eq!(report.top1_hit_rate, r2.top1_hit_rate);
    }

    #[test]
    fn db_round_trip_is_byte_identical() {
        let (db, _, _, _) = small_pipeline();
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("fp.grfp");
        let manifest = dir.path().join("fp.manifest");
        db.save(&store, &manifest).unwrap();
        let loaded = ReferenceDb::load(&store, &manifest).unwrap();
        assert_eq!(db.fingerprints(), loaded.fingerprints());
        assert_eq!(db.tracks, loaded.tracks);
        assert_eq!(db.hop_s, loaded.hop_s);
        let store2 = dir.path().join("fp2.grfp");
        let manifest2 = dir.path().join("fp2.manifest");
        loaded.save(&store2, &manifest2).unwrap();
        assert_eq!(std::fs::read(&store).unwrap(), std::fs::read(&store2).unwrap());
        assert_eq!(std::fs::read(&manifest).unwrap(), std::fs::read(&manifest2).unwrap());
    }
}
