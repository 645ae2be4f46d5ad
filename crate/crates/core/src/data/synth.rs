use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use super::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const BURN_IN: usize = 50;

/// Shared sparse cross-component mixing `M = I + S`: each off-diagonal entry
/// of `S` is nonzero with probability `density`, uniform in `±weight`.
/// The matrix depends only on its own seed, so datasets generated with
/// different subject seeds still share it.
///
/// On top of the mixed sources every component receives
/// `driver_weight · d_t`, where `d` is one more per-subject series from the
/// same process (a global signal common to all components).
#[derive(Clone, Debug, PartialEq)]
pub struct MixingSpec {
    pub density: f64,
    pub weight: f64,
    pub driver_weight: f64,
    pub seed: u64,
}

impl Default for MixingSpec {
    fn default() -> Self {
        MixingSpec {
            density: 0.05,
            weight: 0.3,
            driver_weight: 3.0,
            seed: 0,
        }
    }
}

/// Per-component process, for a subject of class `k` with `(α₁, α₂)`:
///
/// `x_t = α₁·x_{t−1} + α₂·tanh(x_{t−2}) + a·√p·(j_t − 1) + σ·η_t`
///
/// with `η ~ N(0, 1)` and sparse jumps `j_t = ε_t / p` with probability
/// `p = jump_rate` (else 0), `ε ~ Exp(1)`; `j` has unit mean and `p = 1`
/// gives a dense `a·(ε_t − 1)`. Rare large jumps followed by decay are
/// what makes the direction visible in short windows. The skewed
/// innovation and the nonlinear lag each break time-reversal symmetry.
/// `gaussian_only` drops the jump term and linearizes the lag (`α₂·x_{t−2}`), leaving a
/// linear Gaussian AR(2) process, which is statistically reversible.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub components: usize,
    pub timepoints: usize,
    pub subjects_per_class: usize,
    pub n_classes: usize,
    /// `(α₁, α₂)` per class.
    pub ar_coefficients: Vec<(f64, f64)>,
    pub asymmetry_strength: f64,
    /// Fraction of steps carrying a skewed innovation (see above).
    pub jump_rate: f64,
    pub noise_scale: f64,
    pub gaussian_only: bool,
    pub mixing: MixingSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            components: 53,
            timepoints: 140,
            subjects_per_class: 10,
            n_classes: 2,
            ar_coefficients: vec![(0.6, 0.2), (0.3, 0.4)],
            asymmetry_strength: 1.5,
            jump_rate: 0.1,
            noise_scale: 1.0,
            gaussian_only: false,
            mixing: MixingSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.components == 0 || self.timepoints == 0 {
            return bad("components and timepoints must be positive".into());
        }
        if self.subjects_per_class == 0 || self.n_classes == 0 {
            return bad("need at least one class and one subject per class".into());
        }
        if self.ar_coefficients.len() != self.n_classes {
            return bad(format!(
                "{} coefficient pairs for {} classes",
                self.ar_coefficients.len(),
                self.n_classes
            ));
        }
        for (k, &(a1, a2)) in self.ar_coefficients.iter().enumerate() {
            if !(a1.abs() + a2.abs() < 1.0) {
                return bad(format!("class {k}: unstable coefficients |{a1}| + |{a2}| >= 1"));
            }
        }
        if !(self.asymmetry_strength >= 0.0) || !self.asymmetry_strength.is_finite() {
            return bad(format!("asymmetry strength {} must be >= 0", self.asymmetry_strength));
        }
        if !(self.jump_rate > 0.0 && self.jump_rate <= 1.0) {
            return bad(format!("jump rate {} must lie in (0, 1]", self.jump_rate));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return bad(format!("noise scale {} must be > 0", self.noise_scale));
        }
        let m = &self.mixing;
        if !(0.0..=1.0).contains(&m.density) || !m.weight.is_finite() || !m.driver_weight.is_finite() {
            return bad(format!(
                "mixing density {} / weight {} / driver weight {}",
                m.density, m.weight, m.driver_weight
            ));
        }
        Ok(())
    }

    fn mixing_matrix(&self) -> Vec<f64> {
        let c = self.components;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.mixing.seed, &[0x4D4958]));
        let mut m = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                // Draw both numbers for every entry so the matrix is stable
                // under changes to density.
                let hit: f64 = rng.gen();
                let w: f64 = rng.gen_range(-1.0..1.0);
                if i == j {
                    m[i * c + j] = 1.0;
                } else if hit < self.mixing.density {
                    m[i * c + j] = w * self.mixing.weight;
                }
            }
        }
        m
    }

    fn component_series(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (a1, a2) = self.ar_coefficients[class];
        let mut x = vec![0.0f64; BURN_IN + self.timepoints];
        for t in 0..x.len() {
            let prev = if t >= 1 { x[t - 1] } else { 0.0 };
            let prev2 = if t >= 2 { x[t - 2] } else { 0.0 };
            let eta: f64 = rng.sample(StandardNormal);
            x[t] = if self.gaussian_only {
                a1 * prev + a2 * prev2 + self.noise_scale * eta
            } else {
                let eps: f64 = rng.sample(Exp1);
                let p = self.jump_rate;
                let hit = p >= 1.0 || rng.gen::<f64>() < p;
                let jump = if hit { eps / p } else { 0.0 };
                a1 * prev + a2 * prev2.tanh() + self.asymmetry_strength * p.sqrt() * (jump - 1.0) + self.noise_scale * eta
            };
        }
        x.drain(..BURN_IN);
        x
    }
}

/// Generates `n_classes × subjects_per_class` subjects; a pure function of
/// the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (c, t) = (config.components, config.timepoints);
    let mix = config.mixing_matrix();
    let mut records = Vec::with_capacity(config.n_classes * config.subjects_per_class);
    for class in 0..config.n_classes {
        for i in 0..config.subjects_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[class as u64, i as u64]));
            let raw: Vec<Vec<f64>> = (0..c).map(|_| config.component_series(class, &mut rng)).collect();
            let driver = config.component_series(class, &mut rng);
            let dw = config.mixing.driver_weight;
            let mut values = Vec::with_capacity(c * t);
            for row in 0..c {
                let weights = &mix[row * c..(row + 1) * c];
                for step in 0..t {
                    let mut acc = dw * driver[step];
                    for (w, src) in weights.iter().zip(&raw) {
                        if *w != 0.0 {
                            acc += w * src[step];
                        }
                    }
                    values.push(acc as f32);
                }
            }
            let matrix = Tensor::new(vec![c, t], values)?;
            records.push(SubjectRecord::new(format!("c{class}-s{i:04}"), class, matrix)?);
        }
    }
    let names = (0..config.n_classes).map(|k| format!("class{k}")).collect();
    let provenance = format!(
        "synthetic: {c}x{t}, {} per class, asymmetry {}, noise {}, gaussian_only {}, seed {}",
        config.subjects_per_class,
        config.asymmetry_strength,
        config.noise_scale,
        config.gaussian_only,
        config.seed
    );
    Dataset::new(records, names, provenance)
}
