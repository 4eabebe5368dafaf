use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{simulate_scene, toy, ArrayGeometry, Interferer, NoiseSpec, SceneSpec, SimulatedScene};
use crate::error::{Error, Result};
use crate::signal::write_wav;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of `manifest.jsonl`. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture_path: String,
    pub speech_path: String,
    pub noise_path: String,
    /// Space-separated token ids.
    pub transcript: String,
    pub snr_db: f64,
    pub azimuth: f64,
    pub seed: u64,
    pub geometry: ArrayGeometry,
}

impl ManifestRecord {
    pub fn tokens(&self) -> Result<Vec<u32>> {
        self.transcript
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::Parse(format!("transcript token {t:?}: {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

/// Parameters for drawing a batch of toy scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub num_utterances: usize,
    pub seed: u64,
    pub snr_db: (f64, f64),
    pub diffuse_db: f64,
    pub directional_noise: bool,
    /// Minimum angular separation between speech and interferer, radians.
    pub min_separation: f64,
    pub geometry: ArrayGeometry,
    pub toy: toy::ToyConfig,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            seed: 0,
            snr_db: (0.0, 10.0),
            diffuse_db: -20.0,
            directional_noise: true,
            min_separation: 40f64.to_radians(),
            geometry: ArrayGeometry::default(),
            toy: toy::ToyConfig::default(),
        }
    }
}

impl DatasetRecipe {
    /// Scene specs, each a pure function of `(seed, index)`.
    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        (0..self.num_utterances).map(|i| self.scene_spec(i)).collect()
    }

    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (transcript, source) = toy::utterance(&self.toy, &mut rng);
        let lo = 20f64.to_radians();
        let hi = 160f64.to_radians();
        let azimuth = rng.random_range(lo..hi);
        let interferer = if self.directional_noise {
            let mut a = rng.random_range(lo..hi);
            while (a - azimuth).abs() < self.min_separation {
                a = rng.random_range(lo..hi);
            }
            Some(Interferer {
                azimuth: a,
                elevation: 0.0,
            })
        } else {
            None
        };
        let snr_db = if self.snr_db.0 < self.snr_db.1 {
            rng.random_range(self.snr_db.0..self.snr_db.1)
        } else {
            self.snr_db.0
        };
        SceneSpec {
            id: format!("utt{index:05}"),
            source,
            transcript,
            azimuth,
            elevation: 0.0,
            noise: NoiseSpec {
                interferer,
                diffuse_db: self.diffuse_db,
            },
            snr_db,
            reference_channel: 0,
            geometry: self.geometry.clone(),
            seed: rng.random(),
        }
    }

    pub fn scenes(&self) -> Result<Vec<SimulatedScene>> {
        self.scene_specs().iter().map(simulate_scene).collect()
    }
}

/// Render every scene to `out_dir` as `{id}_{mix,speech,noise}.wav` plus a
/// JSON-lines manifest.
pub fn synth_dataset(specs: &[SceneSpec], out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(specs.len());
    for spec in specs {
        let scene = simulate_scene(spec)?;
        let mix = format!("{}_mix.wav", spec.id);
        let speech = format!("{}_speech.wav", spec.id);
        let noise = format!("{}_noise.wav", spec.id);
        write_wav(dir.join(&mix), &scene.mixture)?;
        write_wav(dir.join(&speech), &scene.speech_image)?;
        write_wav(dir.join(&noise), &scene.noise_image)?;
        records.push(ManifestRecord {
            id: spec.id.clone(),
            mixture_path: mix,
            speech_path: speech,
            noise_path: noise,
            transcript: spec
                .transcript
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            snr_db: spec.snr_db,
            azimuth: spec.azimuth,
            seed: spec.seed,
            geometry: spec.geometry.clone(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Manifest {
        dir: dir.to_path_buf(),
        records,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(Manifest {
        dir: dir.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::read_wav;

    fn small_recipe() -> DatasetRecipe {
        DatasetRecipe {
            num_utterances: 3,
            seed: 7,
            ..DatasetRecipe::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let specs = small_recipe().scene_specs();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(&specs, a.path()).unwrap();
        synth_dataset(&specs, b.path()).unwrap();
        assert_eq!(ma.records.len(), 3);
        for r in &ma.records {
            for p in [&r.mixture_path, &r.speech_path, &r.noise_path] {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn reread_snr_matches() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&small_recipe().scene_specs(), dir.path()).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
        for r in &back.records {
            let s = read_wav(back.path(&r.speech_path)).unwrap();
            let n = read_wav(back.path(&r.noise_path)).unwrap();
            let got = 10.0 * (s.power(0) / n.power(0)).log10();
            assert!((got - r.snr_db).abs() < 0.1, "{got} vs {}", r.snr_db);
            assert!(!r.tokens().unwrap().is_empty());
        }
    }

    #[test]
    fn io_failure_names_path() {
        let specs = small_recipe().scene_specs();
        let err = synth_dataset(&specs[..1], "/proc/definitely/not/writable").unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("/proc/definitely"));
    }
}
