//! On-disk formats: binary trajectories, dataset directories, normalization
//! statistics and model checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::{Episode, GenConfig, Segment, SplitDataset};
use crate::domain::{
    CombinedInput, NormStats, Trajectory, VehicleState, INPUT_DIM, INPUT_NAMES, STATE_DIM, STATE_NAMES,
};
use crate::edmd::EdmdDictionary;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::koopman::{BilinearKoopmanModel, Observables};
use crate::plant::PlantParams;

pub const SCHEMA_VERSION: u32 = 1;
const HEADER_BYTES: usize = 12;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `{K: u32, n: u32, m+l: u32}` little-endian, then `K + 1` state rows and
/// `K` input rows of little-endian `f64`.
pub fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let k = t.len();
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * ((k + 1) * STATE_DIM + k * INPUT_DIM));
    for v in [k as u32, STATE_DIM as u32, INPUT_DIM as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &t.states {
        for v in s.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for u in &t.inputs {
        for v in u.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_trajectory(bytes: &[u8], dt: f64, path: &Path) -> Result<Trajectory> {
    let err = |offset: usize, msg: String| Error::Parse { path: path.to_path_buf(), offset, msg };
    if bytes.len() < HEADER_BYTES {
        return Err(err(bytes.len(), format!("header needs {HEADER_BYTES} bytes")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (k, n, m) = (word(0), word(1), word(2));
    if n != STATE_DIM {
        return Err(err(4, format!("state dimension {n}, expected {STATE_DIM}")));
    }
    if m != INPUT_DIM {
        return Err(err(8, format!("input dimension {m}, expected {INPUT_DIM}")));
    }
    let expected = HEADER_BYTES + 8 * ((k + 1) * n + k * m);
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes for K = {k}, found {}", bytes.len()),
        ));
    }
    let mut pos = HEADER_BYTES;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    let states = (0..=k)
        .map(|_| VehicleState::from_array(std::array::from_fn(|_| next())))
        .collect();
    let inputs = (0..k)
        .map(|_| CombinedInput::from_array(std::array::from_fn(|_| next())))
        .collect();
    Ok(Trajectory { states, inputs, dt })
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    fs::write(path, encode_trajectory(t)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path, dt: f64) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectory(&bytes, dt, path)
}

/// CSV view in the binary file's order: state rows, then input rows.
pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut s = format!("kind,k,{}\n", STATE_NAMES.join(","));
    for (k, x) in t.states.iter().enumerate() {
        let vals: Vec<String> = x.to_array().iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&format!("state,{k},{}\n", vals.join(",")));
    }
    s.push_str(&format!("kind,k,{}\n", INPUT_NAMES.join(",")));
    for (k, u) in t.inputs.iter().enumerate() {
        let vals: Vec<String> = u.to_array().iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&format!("input,{k},{}\n", vals.join(",")));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStatsFile {
    pub states: Vec<ComponentStats>,
    pub inputs: Vec<ComponentStats>,
}

impl From<&NormStats> for NormStatsFile {
    fn from(s: &NormStats) -> Self {
        let named = |names: &[&str], mean: &[f64], std: &[f64]| {
            names
                .iter()
                .zip(mean.iter().zip(std))
                .map(|(n, (m, s))| ComponentStats { name: n.to_string(), mean: *m, std: *s })
                .collect()
        };
        Self {
            states: named(&STATE_NAMES, &s.state_mean, &s.state_std),
            inputs: named(&INPUT_NAMES, &s.input_mean, &s.input_std),
        }
    }
}

impl NormStatsFile {
    pub fn to_stats(&self) -> Result<NormStats> {
        fn pick<const D: usize>(entries: &[ComponentStats], names: [&str; D]) -> Result<([f64; D], [f64; D])> {
            let mut mean = [0.0; D];
            let mut std = [0.0; D];
            for (i, name) in names.iter().enumerate() {
                let e = entries
                    .iter()
                    .find(|e| e.name == *name)
                    .ok_or_else(|| Error::Config(format!("normalization statistics lack `{name}`")))?;
                mean[i] = e.mean;
                std[i] = e.std;
            }
            Ok((mean, std))
        }
        let (state_mean, state_std) = pick(&self.states, STATE_NAMES)?;
        let (input_mean, input_std) = pick(&self.inputs, INPUT_NAMES)?;
        let stats = NormStats { state_mean, state_std, input_mean, input_std };
        stats.validate()?;
        Ok(stats)
    }
}

pub fn save_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    write_json(path, &NormStatsFile::from(stats))
}

pub fn load_norm_stats(path: &Path) -> Result<NormStats> {
    read_json::<NormStatsFile>(path)?.to_stats()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub file: String,
    pub episode: usize,
    pub segment: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode: usize,
    pub kappa: f64,
    pub redraws: usize,
    /// Steps at which the curvature guard was breached in the kept draw.
    pub guard_breaches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dt: f64,
    pub seed: u64,
    pub counts: Counts,
    pub plant: PlantParams,
    pub generation: GenConfig,
    pub norm_stats_file: String,
    pub train: Vec<SegmentEntry>,
    pub val: Vec<SegmentEntry>,
    pub test: Vec<SegmentEntry>,
    pub episodes: Vec<EpisodeEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORM_STATS_FILE: &str = "norm_stats.json";

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub split: SplitDataset,
    pub stats: NormStats,
}

/// Writes `manifest.json`, `norm_stats.json` and one binary file per
/// segment under `train/`, `val/`, `test/`.
pub fn save_dataset(
    dir: &Path,
    split: &SplitDataset,
    episodes: &[Episode],
    gen: &GenConfig,
    plant: &PlantParams,
    stats: &NormStats,
) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (name, segs) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut list = Vec::with_capacity(segs.len());
        for seg in segs {
            let file = format!("{name}/ep{:05}_seg{:02}.bin", seg.episode, seg.index);
            write_trajectory(&dir.join(&file), &seg.trajectory)?;
            list.push(SegmentEntry { file, episode: seg.episode, segment: seg.index, kappa: seg.kappa });
        }
        entries.push(list);
    }
    let test = entries.pop().unwrap_or_default();
    let val = entries.pop().unwrap_or_default();
    let train = entries.pop().unwrap_or_default();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dt: gen.dt,
        seed: gen.seed,
        counts: Counts { episodes: episodes.len(), train: train.len(), val: val.len(), test: test.len() },
        plant: *plant,
        generation: gen.clone(),
        norm_stats_file: NORM_STATS_FILE.into(),
        train,
        val,
        test,
        episodes: episodes
            .iter()
            .map(|e| EpisodeEntry {
                episode: e.index,
                kappa: e.kappa,
                redraws: e.redraws,
                guard_breaches: e.guard_breaches.clone(),
            })
            .collect(),
    };
    save_norm_stats(&dir.join(NORM_STATS_FILE), stats)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "dataset schema version {} (supported: {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let load = |list: &[SegmentEntry]| -> Result<Vec<Segment>> {
        list.iter()
            .map(|e| {
                Ok(Segment {
                    episode: e.episode,
                    index: e.segment,
                    kappa: e.kappa,
                    trajectory: read_trajectory(&dir.join(&e.file), manifest.dt)?,
                })
            })
            .collect()
    };
    let split = SplitDataset {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        test: load(&manifest.test)?,
    };
    let stats = load_norm_stats(&dir.join(&manifest.norm_stats_file))?;
    Ok(Dataset { manifest, split, stats })
}

/// Row-major nested arrays.
fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Encoder observables (MDBK or MDK).
    Deep,
    Edmdk,
    Lti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFile {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdmdFile {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub p: usize,
    pub n: usize,
    /// `[n, hidden..., p − n]` for deep models, empty otherwise.
    pub layer_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edmd: Option<EdmdFile>,
    /// Identity observables carry a trailing constant.
    #[serde(default)]
    pub constant: bool,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// `H_1..H_3`, empty for linear models.
    pub h: Vec<Vec<Vec<f64>>>,
    pub norm_stats: NormStatsFile,
    /// Echo of the configuration that produced the model.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &BilinearKoopmanModel<f64>, config: serde_json::Value) -> Result<Self> {
        model.validate()?;
        let (kind, layer_sizes, encoder, edmd, constant) = match &model.observables {
            Observables::Encoder(e) => (
                CheckpointKind::Deep,
                e.layer_sizes(),
                Some(EncoderFile {
                    weights: e.weights.iter().map(rows).collect(),
                    biases: e.biases.iter().map(|b| b.iter().copied().collect()).collect(),
                }),
                None,
                false,
            ),
            Observables::Edmd(d) => (
                CheckpointKind::Edmdk,
                Vec::new(),
                None,
                Some(EdmdFile {
                    centers: d.centers.iter().map(|c| c.iter().copied().collect()).collect(),
                    sigma: d.sigma,
                }),
                false,
            ),
            Observables::Identity { constant, .. } => (CheckpointKind::Lti, Vec::new(), None, None, *constant),
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind,
            p: model.p(),
            n: model.n(),
            layer_sizes,
            encoder,
            edmd,
            constant,
            a: rows(&model.a),
            b: rows(&model.b),
            h: model.h.iter().map(rows).collect(),
            norm_stats: NormStatsFile::from(&model.stats),
            config,
        })
    }

    /// Rebuilds the model and checks every declared dimension.
    pub fn to_model(&self) -> Result<BilinearKoopmanModel<f64>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("checkpoint schema version {}", self.schema_version)));
        }
        let observables = match self.kind {
            CheckpointKind::Deep => {
                let file = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::Config("deep checkpoint without encoder".into()))?;
                let weights = file
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(l, w)| from_rows(w, &format!("encoder.W{l}")))
                    .collect::<Result<Vec<_>>>()?;
                let biases = file.biases.iter().map(|b| DVector::from_column_slice(b)).collect();
                let enc = Encoder { weights, biases };
                enc.validate()?;
                if enc.layer_sizes() != self.layer_sizes {
                    return Err(Error::Dimension(format!(
                        "encoder layers {:?} differ from declared {:?}",
                        enc.layer_sizes(),
                        self.layer_sizes
                    )));
                }
                Observables::Encoder(enc)
            }
            CheckpointKind::Edmdk => {
                let file = self
                    .edmd
                    .as_ref()
                    .ok_or_else(|| Error::Config("EDMDK checkpoint without dictionary".into()))?;
                if file.centers.iter().any(|c| c.len() != STATE_DIM) {
                    return Err(Error::Dimension("RBF centers must have 6 components".into()));
                }
                Observables::Edmd(EdmdDictionary {
                    centers: file.centers.iter().map(|c| DVector::from_column_slice(c)).collect(),
                    sigma: file.sigma,
                })
            }
            CheckpointKind::Lti => Observables::Identity { n: self.n, constant: self.constant },
        };
        let lifted = observables.lifted_dim();
        if lifted != self.p {
            return Err(Error::Dimension(format!("observables give p = {lifted}, checkpoint declares p = {}", self.p)));
        }
        if observables.state_dim() != self.n {
            return Err(Error::Dimension(format!("checkpoint declares n = {}", self.n)));
        }
        let model = BilinearKoopmanModel {
            observables,
            a: from_rows(&self.a, "A")?,
            b: from_rows(&self.b, "B")?,
            h: self
                .h
                .iter()
                .enumerate()
                .map(|(i, h)| from_rows(h, &format!("H{}", i + 1)))
                .collect::<Result<Vec<_>>>()?,
            stats: self.norm_stats.to_stats()?,
        };
        if model.b.ncols() != INPUT_DIM {
            return Err(Error::Dimension(format!("B has {} columns, expected {INPUT_DIM}", model.b.ncols())));
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &BilinearKoopmanModel<f64>, config: serde_json::Value) -> Result<()> {
    write_json(path, &Checkpoint::from_model(model, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(BilinearKoopmanModel<f64>, Checkpoint)> {
    let ckpt: Checkpoint = read_json(path)?;
    let model = ckpt.to_model().map_err(|e| match e {
        Error::Dimension(msg) => Error::Dimension(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok((model, ckpt))
}

/// Dense CSV of a matrix, shortest round-trip float formatting.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in m.row_iter() {
        let vals: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let row = line
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        offset,
                        msg: format!("line {}: `{v}`: {e}", rows.len() + 1),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        offset += line.len() + 1;
    }
    from_rows(&rows, &path.display().to_string())
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::DEFAULT_HIDDEN;
    use proptest::prelude::*;

    fn sample_traj(k: usize, seed: f64) -> Trajectory {
        Trajectory {
            states: (0..=k)
                .map(|i| VehicleState::from_array(std::array::from_fn(|c| seed * (i as f64 + 0.1) / (c as f64 + 3.0))))
                .collect(),
            inputs: (0..k).map(|i| CombinedInput::new(0.01 * i as f64, -0.3, 1e-3 / seed)).collect(),
            dt: 0.025,
        }
    }

    fn stats() -> NormStats {
        NormStats {
            state_mean: [20.0, 0.1, 0.0, 0.5, -0.2, 0.01],
            state_std: [5.0, 0.5, 0.2, 0.1, 1.0, 0.05],
            input_mean: [0.0, 0.1, 1e-4],
            input_std: [0.2, 0.4, 0.002],
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_exact(
            k in 0usize..30,
            vals in proptest::collection::vec(-1e6f64..1e6, 6 * 31 + 3 * 30),
        ) {
            let mut it = vals.into_iter();
            let t = Trajectory {
                states: (0..=k).map(|_| VehicleState::from_array(std::array::from_fn(|_| it.next().unwrap()))).collect(),
                inputs: (0..k).map(|_| CombinedInput::from_array(std::array::from_fn(|_| it.next().unwrap()))).collect(),
                dt: 0.025,
            };
            let back = decode_trajectory(&encode_trajectory(&t), 0.025, Path::new("t")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn truncated_and_wrong_headers_are_parse_errors() {
        let bytes = encode_trajectory(&sample_traj(5, 1.0));
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            match decode_trajectory(&bytes[..cut], 0.025, Path::new("x.bin")) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode_trajectory(&bad, 0.025, Path::new("x")), Err(Error::Parse { offset: 4, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_trajectory(&long, 0.025, Path::new("x")).is_err());
    }

    #[test]
    fn csv_export_mirrors_binary_order() {
        let t = sample_traj(2, 1.0);
        let csv = trajectory_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1 + 2);
        assert!(lines[1].starts_with("state,0,"));
        assert!(lines[5].starts_with("input,0,"));
        let v: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(v, t.states[1].vx);
    }

    #[test]
    fn norm_stats_json_names_components() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_norm_stats(&p, &stats()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"yaw_rate\"") && text.contains("\"kappa\""));
        assert_eq!(load_norm_stats(&p).unwrap(), stats());
        fs::write(&p, text.replace("\"epsi\"", "\"psi\"")).unwrap();
        assert!(matches!(load_norm_stats(&p), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = GenConfig { n_episodes: 6, episode_len_steps: 40, segment_len_steps: 20, ..GenConfig::default() };
        let episodes = crate::data::generate_episodes(&cfg, &Default::default()).unwrap();
        let split = crate::data::segment_and_split(&episodes, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &split, &episodes, &cfg, &PlantParams::default(), &stats()).unwrap();
        assert_eq!(manifest.counts.train + manifest.counts.val + manifest.counts.test, 12);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, manifest);
        assert_eq!(back.stats, stats());
        for (a, b) in split.train.iter().zip(&back.split.train) {
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!((a.episode, a.index), (b.episode, b.index));
        }
        assert_eq!(back.split.test.len(), split.test.len());
    }

    fn deep_model() -> BilinearKoopmanModel<f64> {
        let enc = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 4);
        let mut m = BilinearKoopmanModel::persistence(Observables::Encoder(enc), stats(), true);
        m.a[(3, 7)] = 0.125;
        m.h[1][(0, 65)] = -1e-7;
        m
    }

    #[test]
    fn checkpoints_round_trip_for_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let models = [
            deep_model(),
            BilinearKoopmanModel::persistence(Observables::Edmd(EdmdDictionary::standard()), stats(), false),
            BilinearKoopmanModel::persistence(Observables::Identity { n: 6, constant: false }, stats(), false),
        ];
        for (i, m) in models.iter().enumerate() {
            let p = dir.path().join(format!("m{i}.json"));
            save_checkpoint(&p, m, serde_json::json!({"note": i})).unwrap();
            let (back, ckpt) = load_checkpoint(&p).unwrap();
            assert_eq!(&back, m);
            assert_eq!(ckpt.p, m.p());
        }
    }

    #[test]
    fn checkpoint_with_wrong_p_is_rejected() {
        let mut ckpt = Checkpoint::from_model(&deep_model(), serde_json::Value::Null).unwrap();
        ckpt.p = 65;
        assert!(matches!(ckpt.to_model(), Err(Error::Dimension(_))));
        let mut ckpt = Checkpoint::from_model(&deep_model(), serde_json::Value::Null).unwrap();
        ckpt.a.pop();
        assert!(matches!(ckpt.to_model(), Err(Error::Dimension(_))));
        let mut ckpt = Checkpoint::from_model(&deep_model(), serde_json::Value::Null).unwrap();
        ckpt.layer_sizes[1] = 31;
        assert!(ckpt.to_model().is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = DMatrix::from_fn(5, 4, |i, j| (i as f64 + 1.0).sqrt() / (j as f64 + 7.0) - 1e-17);
        let back = parse_matrix_csv(&matrix_csv(&m), Path::new("m.csv")).unwrap();
        assert_eq!(back, m);
        let err = parse_matrix_csv("1,2\n3,x\n", Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }), "{err}");
    }
}
