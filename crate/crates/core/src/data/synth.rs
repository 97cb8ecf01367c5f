//! Synthetic affect corpus: a smooth latent (valence, arousal) walk per video,
//! labels derived from it, and noisy linear features of the labels.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::seed;
use crate::task::{AU_SENTINEL, EXPR_SENTINEL, NUM_AUS, NUM_EXPR, VA_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SentinelRates {
    pub va: f64,
    pub expr: f64,
    pub au: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub input_dim: usize,
    pub sentinel_rates: SentinelRates,
    /// Per-dimension feature noise standard deviation.
    pub feature_noise: f64,
    /// Log-scale spread of a per-frame gain on the affect part of the
    /// features. It blurs intensity but not direction.
    pub intensity_jitter: f64,
    pub walk_step: f64,
    pub walk_momentum: f64,
    pub au_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_videos: 8,
            frames_per_video: 500,
            input_dim: 32,
            sentinel_rates: SentinelRates::default(),
            feature_noise: 0.15,
            intensity_jitter: 0.3,
            walk_step: 0.01,
            walk_momentum: 0.9,
            au_noise: 0.1,
        }
    }
}

/// Octant of the angle of `(v, a)`, counter-clockwise from (-1, 0).
pub fn octant(v: f64, a: f64) -> i32 {
    let k = ((a.atan2(v) + PI) / (PI / 4.0)).floor() as i32;
    k.rem_euclid(NUM_EXPR as i32)
}

/// The fixed random maps shared by every video.
struct Generator {
    probes: [[f64; 2]; NUM_AUS],
    probe_bias: [f64; NUM_AUS],
    /// `input_dim` rows of `2 + NUM_AUS` weights.
    embedding: Vec<Vec<f64>>,
}

impl Generator {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = seed::stream(cfg.seed, "synth.maps");
        let std = Normal::new(0.0, 1.0).expect("valid normal");
        let mut probes = [[0.0; 2]; NUM_AUS];
        let mut probe_bias = [0.0; NUM_AUS];
        for j in 0..NUM_AUS {
            let theta = rng.random_range(0.0..2.0 * PI);
            probes[j] = [1.5 * theta.cos(), 1.5 * theta.sin()];
            probe_bias[j] = rng.random_range(-0.4..0.4);
        }
        let embedding = (0..cfg.input_dim)
            .map(|_| (0..2 + NUM_AUS).map(|_| std.sample(&mut rng)).collect())
            .collect();
        Generator {
            probes,
            probe_bias,
            embedding,
        }
    }
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("sentinel rate {name} = {r} not in [0, 1)")))
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<AnnotationRecord>> {
    check_rate("va", cfg.sentinel_rates.va)?;
    check_rate("expr", cfg.sentinel_rates.expr)?;
    check_rate("au", cfg.sentinel_rates.au)?;
    if cfg.input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    if !(cfg.feature_noise >= 0.0
        && cfg.au_noise >= 0.0
        && cfg.walk_step >= 0.0
        && cfg.intensity_jitter >= 0.0)
    {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    let g = Generator::new(cfg);
    let step = Normal::new(0.0, cfg.walk_step).map_err(|e| Error::Config(e.to_string()))?;
    let au_noise = Normal::new(0.0, cfg.au_noise).map_err(|e| Error::Config(e.to_string()))?;
    let feat_noise =
        Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut out = Vec::with_capacity(cfg.num_videos * cfg.frames_per_video);
    for vid in 0..cfg.num_videos {
        let video_id = format!("vid{vid:03}");
        let mut rng = seed::stream(cfg.seed, &format!("synth.video.{vid}"));
        let mut mask_rng = seed::stream(cfg.seed, &format!("synth.sentinel.{vid}"));
        let mut pos = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        let mut vel = [0.0f64; 2];
        for frame in 0..cfg.frames_per_video {
            for k in 0..2 {
                vel[k] = cfg.walk_momentum * vel[k] + step.sample(&mut rng);
                pos[k] += vel[k];
                // reflect off the box walls
                if pos[k].abs() > 1.0 {
                    pos[k] = pos[k].signum() * (2.0 - pos[k].abs());
                    vel[k] = -vel[k];
                }
                pos[k] = pos[k].clamp(-1.0, 1.0);
            }
            let [v, a] = pos;
            let mut aus = [0i8; NUM_AUS];
            for j in 0..NUM_AUS {
                let z = g.probes[j][0] * v + g.probes[j][1] * a + g.probe_bias[j];
                aus[j] = (z + au_noise.sample(&mut rng) > 0.0) as i8;
            }
            let j = cfg.intensity_jitter;
            let gain = (j * rng.sample::<f64, _>(rand_distr::StandardNormal) - j * j / 2.0).exp();
            let mut latent = vec![gain * v, gain * a];
            latent.extend(aus.iter().map(|&b| b as f64));
            let features = g
                .embedding
                .iter()
                .map(|row| {
                    let clean: f64 = row.iter().zip(&latent).map(|(w, z)| w * z).sum();
                    clean + feat_noise.sample(&mut rng)
                })
                .collect();

            let rates = cfg.sentinel_rates;
            let drop_va = mask_rng.random::<f64>() < rates.va;
            let drop_expr = mask_rng.random::<f64>() < rates.expr;
            let drop_au = mask_rng.random::<f64>() < rates.au;
            out.push(AnnotationRecord {
                video_id: video_id.clone(),
                frame_index: frame as u32,
                valence: if drop_va { VA_SENTINEL } else { v },
                arousal: if drop_va { VA_SENTINEL } else { a },
                expression: if drop_expr { EXPR_SENTINEL } else { octant(v, a) },
                aus: if drop_au { [AU_SENTINEL; NUM_AUS] } else { aus },
                features,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    fn small() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            frames_per_video: 40,
            input_dim: 6,
            ..Default::default()
        }
    }

    #[test]
    fn octants_cover_all_classes() {
        let mut seen = [false; 8];
        for k in 0..16 {
            let t = k as f64 * PI / 8.0 + 0.01;
            seen[octant(t.cos(), t.sin()) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(octant(-1.0, -1e-9), 0);
        assert_eq!(octant(-1.0, 1e-9), 7);
    }

    #[test]
    fn zero_rates_give_fully_valid_records() {
        let recs = synth_generate(&small()).unwrap();
        assert_eq!(recs.len(), 80);
        for r in &recs {
            r.validate(0).unwrap();
            for t in TaskKind::ALL {
                assert!(r.is_valid_for(t));
            }
            assert_eq!(r.features.len(), 6);
        }
    }

    #[test]
    fn deterministic_and_rates_checked() {
        assert_eq!(synth_generate(&small()).unwrap(), synth_generate(&small()).unwrap());
        let mut cfg = small();
        cfg.sentinel_rates.va = 1.0;
        assert!(synth_generate(&cfg).is_err());
        cfg.sentinel_rates.va = 0.5;
        let recs = synth_generate(&cfg).unwrap();
        let dropped = recs.iter().filter(|r| r.valence == VA_SENTINEL).count();
        assert!(dropped > 10 && dropped < 70);
        assert!(recs.iter().all(|r| r.validate(0).is_ok()));
    }
}
