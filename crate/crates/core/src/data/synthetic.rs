//! Synthetic multimodal corpus with per-modality signal strength.
//!
//! For a label `y ~ U[-3, 3]` every row of modality `m` is
//! `snr_m · s_m · y · u_m + ε`, where `u_m` is a fixed unit direction,
//! `ε ~ N(0, I)` and `s_m = -1` with probability `p_flip_m` (the modality
//! contradicts the label) and `+1` otherwise. Visual and acoustic rows are
//! additionally hit by noise bursts: with probability `burst_rate` a row
//! receives extra `N(0, burst_scale² I)` noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};
use crate::model::{InputWidths, Modality};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Signal-to-noise ratio per modality, indexed text, visual, acoustic.
    pub snr: [f32; 3],
    /// Probability that a modality's evidence contradicts the label. The
    /// default profile leaves text clean and flips visual and acoustic
    /// evidence for one sample in five.
    pub p_flip: [f32; 3],
    /// Per-row burst probability on the visual and acoustic sequences.
    pub burst_rate: f32,
    pub burst_scale: f32,
    /// Inclusive sequence-length ranges.
    pub lengths: [(usize, usize); 3],
    pub widths: InputWidths,
    pub val_fraction: f32,
    pub test_fraction: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            snr: [4.0, 1.0, 1.0],
            p_flip: [0.0, 0.2, 0.2],
            burst_rate: 0.0,
            burst_scale: 4.0,
            lengths: [(8, 20), (20, 40), (30, 60)],
            widths: InputWidths {
                text: 16,
                visual: 8,
                acoustic: 8,
            },
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("SNRs must be positive, got {:?}", self.snr)));
        }
        if self.p_flip.iter().any(|p| !(0.0..0.5).contains(p)) {
            return Err(Error::Config(format!("flip probabilities must lie in [0, 0.5), got {:?}", self.p_flip)));
        }
        if !(0.0..=1.0).contains(&self.burst_rate) || !(self.burst_scale >= 0.0) {
            return Err(Error::Config("burst rate must lie in [0, 1] and scale be >= 0".into()));
        }
        if self.lengths.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::Config(format!("bad length ranges {:?}", self.lengths)));
        }
        let w = self.widths;
        if w.text == 0 || w.visual == 0 || w.acoustic == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(0.0..=1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.test_fraction) || f > 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples;
        let val = (n as f64 * f64::from(self.val_fraction)).round() as usize;
        let test = ((n as f64 * f64::from(self.test_fraction)).round() as usize).min(n - val.min(n));
        (n - val - test, val, test)
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f32>> = Modality::ALL
        .iter()
        .map(|&m| unit_direction(&mut rng, cfg.widths.get(m)))
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let label: f32 = rng.random_range(LABEL_MIN..=LABEL_MAX);
        let mut seqs = Vec::with_capacity(3);
        for m in Modality::ALL {
            let k = m.index();
            let d = cfg.widths.get(m);
            let (lo, hi) = cfg.lengths[k];
            let t = rng.random_range(lo..=hi);
            let flipped = rng.random::<f32>() < cfg.p_flip[k];
            let sign = if flipped { -1.0 } else { 1.0 };
            let amplitude = cfg.snr[k] * sign * label;
            let bursty = m != Modality::Text && cfg.burst_rate > 0.0;
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..t {
                let burst = bursty && rng.random::<f32>() < cfg.burst_rate;
                for u in &directions[k] {
                    let mut noise: f32 = StandardNormal.sample(&mut rng);
                    if burst {
                        let b: f32 = StandardNormal.sample(&mut rng);
                        noise += cfg.burst_scale * b;
                    }
                    data.push(amplitude * u + noise);
                }
            }
            seqs.push(Tensor::from_vec(&[t, d], data)?);
        }
        let acoustic = seqs.pop().expect("three");
        let visual = seqs.pop().expect("three");
        let text = seqs.pop().expect("three");
        samples.push(Sample::new(format!("syn-{}-{i:06}", cfg.seed), text, visual, acoustic, label)?);
    }

    let (n_train, n_val, _) = cfg.split_sizes();
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Dataset {
        widths: cfg.widths,
        train: samples,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_add_up() {
        let cfg = SyntheticConfig {
            n_samples: 2500,
            ..Default::default()
        };
        assert_eq!(cfg.split_sizes(), (2000, 250, 250));
        let d = generate_synthetic(&SyntheticConfig {
            n_samples: 33,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.train.len() + d.val.len() + d.test.len(), 33);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SyntheticConfig::default();
        c.snr[1] = 0.0;
        assert!(c.validate().is_err());
        let mut c = SyntheticConfig::default();
        c.p_flip[0] = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lengths_respect_ranges() {
        let d = generate_synthetic(&SyntheticConfig {
            n_samples: 50,
            ..Default::default()
        })
        .unwrap();
        for s in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!((8..=20).contains(&s.len(Modality::Text)));
            assert!((20..=40).contains(&s.len(Modality::Visual)));
            assert!((30..=60).contains(&s.len(Modality::Acoustic)));
        }
    }
}
