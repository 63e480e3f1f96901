//! Procedural road scenes: a perspective road of configurable curvature on
//! textured ground, with weather variants that create a deliberate domain
//! gap (clear scenes for the labeled source split; snow/gravel scenes for
//! the steering-only target split). Every scene comes with both the road
//! mask and the steering angle; manifests decide which labels a split
//! exposes.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imgproc::{save_image_rgb, save_mask};
use super::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::DatasetKind;
use crate::rng;
use crate::tensor::ArrayDyn;

/// Steering angle = clamp(gain · curvature, −1, 1).
pub const STEER_GAIN: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Snow,
    Gravel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneParams {
    /// Lateral road-center offset at the bottom row, as a fraction of the
    /// image width; sign is the turn direction.
    pub curvature: f64,
    /// Road width at the bottom row, in pixels.
    pub road_width: f64,
    /// Horizon row as a fraction of the height.
    pub horizon: f64,
    /// Additive image noise amplitude.
    pub noise_level: f64,
    pub weather: Weather,
}

impl SynthSceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.road_width > 0.0) {
            return Err(Error::contract("generate_synth_scene", "road_width must be positive"));
        }
        if self.curvature.abs() > 0.4 {
            return Err(Error::contract(
                "generate_synth_scene",
                "curvature beyond ±0.4 drives the road out of frame",
            ));
        }
        if !(0.1..=0.8).contains(&self.horizon) {
            return Err(Error::contract("generate_synth_scene", "horizon must lie in [0.1, 0.8]"));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(Error::contract("generate_synth_scene", "noise_level must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// A rendered scene: image `[3,H,W]`, mask `[1,H,W]`, normalized angle.
pub struct SynthScene {
    pub image: ArrayDyn,
    pub mask: ArrayDyn,
    pub angle: f64,
}

/// Road center and half-width at depth `t ∈ [0,1]` (0 = horizon, 1 = bottom).
fn road_geometry(params: &SynthSceneParams, w: usize, t: f64) -> (f64, f64) {
    let center = (w as f64 - 1.0) / 2.0 + params.curvature * t * t * w as f64;
    let half_width = params.road_width * (0.10 + 0.90 * t) / 2.0;
    (center, half_width)
}

pub fn generate_synth_scene(
    params: &SynthSceneParams,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<SynthScene> {
    params.validate()?;
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::contract("generate_synth_scene", format!("scene {h}x{w} too small")));
    }
    let horizon_row = (params.horizon * h as f64).floor() as usize;

    let mut mask = ArrayD::zeros(IxDyn(&[1, h, w]));
    for y in horizon_row..h {
        let t = if h - 1 == horizon_row {
            1.0
        } else {
            (y - horizon_row) as f64 / (h - 1 - horizon_row) as f64
        };
        let (center, half_width) = road_geometry(params, w, t);
        for x in 0..w {
            if (x as f64 - center).abs() <= half_width {
                mask[[0, y, x]] = 1.0;
            }
        }
    }

    // weather palettes: [sky, ground, road] RGB plus texture amplitudes
    let (sky, ground, road, ground_amp, road_amp) = match params.weather {
        Weather::Clear => {
            ([0.58, 0.70, 0.86], [0.30, 0.48, 0.22], [0.30, 0.30, 0.34], 0.05, 0.02)
        }
        Weather::Snow => {
            ([0.66, 0.68, 0.73], [0.80, 0.82, 0.86], [0.55, 0.56, 0.60], 0.04, 0.05)
        }
        Weather::Gravel => {
            ([0.70, 0.66, 0.58], [0.46, 0.40, 0.30], [0.44, 0.41, 0.36], 0.07, 0.06)
        }
    };

    let mut image = ArrayD::zeros(IxDyn(&[3, h, w]));
    // image-level lighting jitter widens the appearance spread per weather
    let lighting = rng.gen_range(-0.05..0.05);
    for y in 0..h {
        for x in 0..w {
            let texture = rng.gen_range(-1.0..1.0);
            let on_road = mask[[0, y, x]] == 1.0;
            let (base, amp) = if y < horizon_row {
                (sky, 0.01)
            } else if on_road {
                (road, road_amp)
            } else {
                (ground, ground_amp)
            };
            // snow drifts partially cover road edges, eroding its contrast
            let snow_drift = if params.weather == Weather::Snow && on_road {
                let t = (y - horizon_row) as f64 / (h - horizon_row) as f64;
                let (center, half_width) = road_geometry(params, w, t.max(1e-9));
                let edge = ((x as f64 - center).abs() / half_width.max(1.0)).min(1.0);
                if edge > 0.6 && texture > -0.2 {
                    0.6
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let depth_shade = if y >= horizon_row {
                let t = (y - horizon_row) as f64 / (h - horizon_row) as f64;
                0.06 * (1.0 - t)
            } else {
                0.0
            };
            for c in 0..3 {
                let mut v = base[c] + amp * texture + lighting + depth_shade;
                v = v * (1.0 - snow_drift) + 0.85 * snow_drift;
                v += rng.gen_range(-0.5..0.5) * params.noise_level;
                image[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }

    let angle = (STEER_GAIN * params.curvature).clamp(-1.0, 1.0);
    Ok(SynthScene { image, mask, angle })
}

/// Draws plausible scene parameters for one sample.
pub fn sample_scene_params(rng: &mut ChaCha8Rng, weather: Weather, width: usize) -> SynthSceneParams {
    SynthSceneParams {
        curvature: rng.gen_range(-0.32..=0.32),
        road_width: rng.gen_range(0.28..=0.55) * width as f64,
        horizon: rng.gen_range(0.30..=0.45),
        noise_level: rng.gen_range(0.02..=0.08),
        weather,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDatasetSpec {
    pub n_train_source: usize,
    pub n_train_target: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Source (labeled) image size.
    pub source_size: (usize, usize),
    /// Target (steering) image size.
    pub target_size: (usize, usize),
    /// Raw-angle scale written to manifests (raw = normalized · max_angle).
    pub max_angle: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            n_train_source: 200,
            n_train_target: 400,
            n_val: 100,
            n_test: 100,
            seed: 0,
            source_size: (64, 64),
            target_size: (64, 96),
            max_angle: 540.0,
        }
    }
}

pub struct SynthSummary {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

fn target_weather(rng: &mut ChaCha8Rng) -> Weather {
    if rng.gen_bool(0.5) {
        Weather::Snow
    } else {
        Weather::Gravel
    }
}

/// Writes `root/source/{images,masks,train.tsv}` and
/// `root/target/{images,masks,train.tsv,val.tsv,test.tsv}`. Deterministic
/// for a fixed spec.
pub fn write_synth_dataset(root: &Path, spec: &SynthDatasetSpec) -> Result<SynthSummary> {
    let io = |ctx: String, e: std::io::Error| Error::io(ctx, e);
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| io(format!("creating {}", p.display()), e))
    };
    let source_root = root.join("source");
    let target_root = root.join("target");
    mkdir(&source_root.join("images"))?;
    mkdir(&source_root.join("masks"))?;
    mkdir(&target_root.join("images"))?;
    mkdir(&target_root.join("masks"))?;

    // labeled source split: clear weather, image + mask
    let mut source_entries = Vec::new();
    for i in 0..spec.n_train_source {
        let mut r = rng::stream(spec.seed, "synth_source", i as u64);
        let params = sample_scene_params(&mut r, Weather::Clear, spec.source_size.1);
        let scene = generate_synth_scene(&params, spec.source_size, &mut r)?;
        let id = format!("s{i:06}");
        save_image_rgb(&source_root.join(format!("images/{id}.png")), &scene.image)?;
        save_mask(&source_root.join(format!("masks/{id}.png")), &scene.mask)?;
        source_entries.push(ManifestEntry {
            id: id.clone(),
            image: format!("images/{id}.png"),
            mask: Some(format!("masks/{id}.png")),
            angle_raw: None,
            timestamp: None,
        });
    }
    let source_manifest = DatasetManifest {
        root: source_root.clone(),
        kind: DatasetKind::Source,
        split: Split::Train,
        max_angle: spec.max_angle,
        entries: source_entries,
    };
    source_manifest.save(&source_root.join("train.tsv"))?;

    // steering-only target split plus annotated val/test splits
    let write_target = |prefix: &str, purpose: &str, count: usize, split: Split, with_mask: bool| -> Result<usize> {
        let mut entries = Vec::new();
        for i in 0..count {
            let mut r = rng::stream(spec.seed, purpose, i as u64);
            let weather = target_weather(&mut r);
            let params = sample_scene_params(&mut r, weather, spec.target_size.1);
            let scene = generate_synth_scene(&params, spec.target_size, &mut r)?;
            let id = format!("{prefix}{i:06}");
            save_image_rgb(&target_root.join(format!("images/{id}.png")), &scene.image)?;
            let mask = if with_mask {
                save_mask(&target_root.join(format!("masks/{id}.png")), &scene.mask)?;
                Some(format!("masks/{id}.png"))
            } else {
                None
            };
            entries.push(ManifestEntry {
                id: id.clone(),
                image: format!("images/{id}.png"),
                mask,
                angle_raw: Some(scene.angle * spec.max_angle),
                timestamp: Some(format!("2024-06-01T00:{:02}:{:02}Z", i / 60 % 60, i % 60)),
            });
        }
        let manifest = DatasetManifest {
            root: target_root.clone(),
            kind: DatasetKind::Target,
            split,
            max_angle: spec.max_angle,
            entries,
        };
        let file = match split {
            Split::Train => "train.tsv",
            Split::Val => "val.tsv",
            Split::Test => "test.tsv",
        };
        manifest.save(&target_root.join(file))?;
        Ok(count)
    };
    let target_train = write_target("t", "synth_target", spec.n_train_target, Split::Train, false)?;
    let target_val = write_target("v", "synth_val", spec.n_val, Split::Val, true)?;
    let target_test = write_target("e", "synth_test", spec.n_test, Split::Test, true)?;

    Ok(SynthSummary {
        source_train: spec.n_train_source,
        target_train,
        target_val,
        target_test,
    })
}
