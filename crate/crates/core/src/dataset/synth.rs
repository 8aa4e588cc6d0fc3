//! Frozen synthetic data-generating process.
//!
//! Monthly employment probabilities are built from a baseline level, a time
//! ramp and an arm effect `tau_d(x) / 30 + lock_in_d(t)`, where the lock-in
//! profile sums to zero over the 30 months. The expected cumulative
//! employment gain over months 1-30 is therefore exactly `tau_d(x)`. The
//! non-employed months split into unemployment and out-of-labour-force with
//! a gender-specific share. Potential outcomes for all arms share the same
//! uniform draws, so they differ only through the arm effect.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Binomial, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{
    Dataset, FeatureRole, FeatureSpec, LabourState, Outcome, SyntheticTruth, UnitRecord, HORIZON_MONTHS,
    MAX_START_DAY,
};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::{McfError, Result, N_ARMS};

/// Effect on cumulative employment over months 1-30, in months:
/// `constant + foreign·1[born abroad] + low_dutch·1[Dutch ≤ 1] + foreign_low_dutch·both`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectFunction {
    pub constant: f64,
    pub foreign: f64,
    pub low_dutch: f64,
    pub foreign_low_dutch: f64,
}

impl EffectFunction {
    pub const ZERO: Self = Self::constant(0.0);

    pub const fn constant(c: f64) -> Self {
        Self {
            constant: c,
            foreign: 0.0,
            low_dutch: 0.0,
            foreign_low_dutch: 0.0,
        }
    }

    pub fn eval(&self, foreign: bool, low_dutch: bool) -> f64 {
        let f = f64::from(u8::from(foreign));
        let l = f64::from(u8::from(low_dutch));
        self.constant + self.foreign * f + self.low_dutch * l + self.foreign_low_dutch * f * l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    /// Number of pure-noise features appended to the design.
    pub n_noise: usize,
    /// Target shares of SVT, LVT and OT; NOP takes the rest.
    pub shares: [f64; 3],
    /// Multiplier on the selection coefficients; 0 gives random assignment.
    pub selection_strength: f64,
    /// Effect functions of SVT, LVT and OT relative to NOP.
    pub effects: [EffectFunction; 3],
    /// Early-month employment dip while in a programme.
    pub lock_in: bool,
    /// Units born in country "6" are never treated.
    pub zero_propensity_stratum: bool,
    /// Give non-participants a feasible pseudo start; otherwise leave it empty.
    pub assign_pseudo_starts: bool,
    /// Share of NOP units flagged with a programme in the preceding spell
    /// (three times higher among the treated). Flagged units have a lower
    /// employment probability in every arm.
    pub contamination_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            n_noise: 4,
            shares: [0.021, 0.020, 0.018],
            selection_strength: 1.0,
            effects: [
                EffectFunction {
                    constant: 2.0,
                    foreign: 1.0,
                    low_dutch: 0.5,
                    foreign_low_dutch: 1.5,
                },
                EffectFunction {
                    constant: 0.5,
                    foreign: 0.5,
                    low_dutch: 0.5,
                    foreign_low_dutch: 1.0,
                },
                EffectFunction {
                    constant: -1.0,
                    foreign: 0.5,
                    low_dutch: 1.0,
                    foreign_low_dutch: 1.0,
                },
            ],
            lock_in: true,
            zero_propensity_stratum: false,
            assign_pseudo_starts: true,
            contamination_share: 0.0,
        }
    }
}

impl SynthConfig {
    /// All effects zero and no lock-in: every potential outcome distribution
    /// coincides across arms.
    pub fn null_effects(mut self) -> Self {
        self.effects = [EffectFunction::ZERO; 3];
        self.lock_in = false;
        self
    }

    pub fn feature_spec(&self) -> Vec<FeatureSpec> {
        use FeatureRole::Both;
        let mut spec = vec![
            FeatureSpec::ordered("age", Both),
            FeatureSpec::categorical("Woman", &["0", "1"], Both),
            FeatureSpec::categorical("city", &["0", "1"], Both),
            FeatureSpec::categorical("country", &["1", "2", "3", "4", "5", "6"], Both),
            FeatureSpec::categorical("Lang_dutch", &["0", "1", "2", "3"], Both),
            FeatureSpec::ordered("Unem_10jaar", Both),
            FeatureSpec::ordered("werk_2jaar", Both),
            FeatureSpec::ordered("educ", Both),
        ];
        for k in 1..=self.n_noise {
            spec.push(FeatureSpec::ordered(&format!("noise_{k}"), Both));
        }
        spec
    }

    fn validate(&self) -> Result<()> {
        if self.n < 40 {
            return Err(McfError::config(format!("synthetic n must be at least 40, got {}", self.n)));
        }
        if !(self.selection_strength >= 0.0 && self.selection_strength.is_finite()) {
            return Err(McfError::config("selection strength must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.contamination_share) {
            return Err(McfError::config("contamination share must lie in [0, 1]"));
        }
        let total: f64 = self.shares.iter().sum();
        if self.shares.iter().any(|s| !s.is_finite() || *s < 0.0) || total >= 1.0 {
            return Err(McfError::config("treated shares must be nonnegative and sum below 1"));
        }
        for (d, s) in self.shares.iter().enumerate() {
            if s * (self.n as f64) < 1.0 {
                return Err(McfError::config(format!(
                    "arm {} has an expected count below one unit ({} x {})",
                    d + 1,
                    s,
                    self.n
                )));
            }
        }
        if (1.0 - total) * (self.n as f64) < 1.0 {
            return Err(McfError::config("NOP has an expected count below one unit"));
        }
        Ok(())
    }
}

const FEMALE_SHARE: f64 = 0.47;
const CITY_SHARE: f64 = 0.36;
const COUNTRY_PROBS: [f64; 6] = [0.70, 0.05, 0.05, 0.06, 0.06, 0.08];
const DUTCH_NATIVE: [f64; 4] = [0.01, 0.03, 0.16, 0.80];
const DUTCH_FOREIGN: [f64; 4] = [0.25, 0.30, 0.25, 0.20];
/// Unemployed share of the non-employed months.
const UE_SHARE_MEN: f64 = 0.82;
const UE_SHARE_WOMEN: f64 = 0.72;
/// Selection coefficients of SVT, LVT, OT on standardised (age, Unem_10jaar, Lang_dutch).
const SELECTION: [[f64; 3]; 3] = [[-0.5, -0.4, 0.4], [-0.3, -0.3, 0.5], [0.2, 0.4, -0.5]];
const CONTAMINATION_DIP: f64 = 0.05;

struct Covariates {
    age: f64,
    woman: bool,
    city: bool,
    country: usize,
    dutch: usize,
    unem: f64,
    werk: f64,
    educ: f64,
    noise: Vec<f64>,
}

impl Covariates {
    fn foreign(&self) -> bool {
        self.country != 0
    }

    fn low_dutch(&self) -> bool {
        self.dutch <= 1
    }

    fn to_features(&self) -> Vec<f64> {
        let mut v = vec![
            self.age,
            f64::from(u8::from(self.woman)),
            f64::from(u8::from(self.city)),
            self.country as f64,
            self.dutch as f64,
            self.unem,
            self.werk,
            self.educ,
        ];
        v.extend_from_slice(&self.noise);
        v
    }
}

fn draw_covariates(rng: &mut Rng, n_noise: usize) -> Covariates {
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let age = (rng.random_range(21.0..55.0_f64) * 10.0).round() / 10.0;
    let woman = rng.random::<f64>() < FEMALE_SHARE;
    let city = rng.random::<f64>() < CITY_SHARE;
    let country = WeightedIndex::new(COUNTRY_PROBS).expect("weights").sample(rng);
    let dutch_probs = if country == 0 { DUTCH_NATIVE } else { DUTCH_FOREIGN };
    let dutch = WeightedIndex::new(dutch_probs).expect("weights").sample(rng);
    let unem = LogNormal::<f64>::new(2.6, 0.7)
        .expect("lognormal")
        .sample(rng)
        .round()
        .min(120.0);
    let p_work = if country == 0 { 0.5 } else { 0.35 };
    let werk = Binomial::new(24, p_work).expect("binomial").sample(rng) as f64;
    let educ = (7.0 + 3.0 * std.sample(rng)).round().clamp(1.0, 13.0);
    let noise = (0..n_noise).map(|_| std.sample(rng)).collect();
    Covariates {
        age,
        woman,
        city,
        country,
        dutch,
        unem,
        werk,
        educ,
        noise,
    }
}

fn baseline_level(c: &Covariates) -> f64 {
    (0.42 + 0.008 * (c.werk - 12.0) - 0.0015 * (c.unem - 18.0) - 0.003 * (c.age - 37.0)
        + 0.03 * (c.dutch as f64 - 1.5))
        .clamp(0.30, 0.56)
}

fn ramp(month: usize) -> f64 {
    -0.08 + 0.16 * (month as f64 - 1.0) / (HORIZON_MONTHS as f64 - 1.0)
}

/// Lock-in profile of arm `d` (1..=3) in `month`; sums to zero over the horizon.
fn lock_in(d: usize, month: usize) -> f64 {
    let (dip, months) = match d {
        1 => (0.08, 4),
        2 => (0.12, 8),
        3 => (0.12, 10),
        _ => return 0.0,
    };
    if month <= months {
        -dip
    } else {
        dip * months as f64 / (HORIZON_MONTHS - months) as f64
    }
}

fn start_model(c: &Covariates) -> f64 {
    4.4 + 0.01 * (c.age - 37.0) - 0.004 * (c.unem - 18.0)
        + 0.15 * f64::from(u8::from(c.woman))
        + 0.2 * f64::from(u8::from(c.foreign()))
}

fn draw_start(rng: &mut Rng, c: &Covariates, max_day: u32) -> Option<u32> {
    let noise = Normal::new(0.0, 0.45).expect("normal");
    for _ in 0..1000 {
        let d = (start_model(c) + noise.sample(rng)).exp();
        let day = (d + 0.5).floor().max(1.0) as u32;
        if day <= max_day {
            return Some(day);
        }
    }
    None
}

/// Multinomial-logit propensities with intercepts calibrated so that mean
/// propensities match the target shares.
fn propensities(cfg: &SynthConfig, covs: &[Covariates]) -> Result<Vec<[f64; N_ARMS]>> {
    let n = covs.len() as f64;
    let cols: [Vec<f64>; 3] = [
        covs.iter().map(|c| c.age).collect(),
        covs.iter().map(|c| c.unem).collect(),
        covs.iter().map(|c| c.dutch as f64).collect(),
    ];
    let z: Vec<[f64; 3]> = {
        let stats: Vec<(f64, f64)> = cols
            .iter()
            .map(|col| {
                let m = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
                (m, if sd > 0.0 { sd } else { 1.0 })
            })
            .collect();
        (0..covs.len())
            .map(|i| {
                let mut r = [0.0; 3];
                for k in 0..3 {
                    r[k] = (cols[k][i] - stats[k].0) / stats[k].1;
                }
                r
            })
            .collect()
    };
    let index: Vec<[f64; 3]> = z
        .iter()
        .map(|zi| {
            let mut r = [0.0; 3];
            for d in 0..3 {
                r[d] = cfg.selection_strength * (0..3).map(|k| SELECTION[d][k] * zi[k]).sum::<f64>();
            }
            r
        })
        .collect();
    let eligible: Vec<bool> = covs
        .iter()
        .map(|c| !(cfg.zero_propensity_stratum && c.country == 5))
        .collect();
    let mut alpha = [0.0; 3];
    for d in 0..3 {
        alpha[d] = (cfg.shares[d] / (1.0 - cfg.shares.iter().sum::<f64>())).ln();
    }
    let compute = |alpha: &[f64; 3]| -> Vec<[f64; N_ARMS]> {
        index
            .iter()
            .zip(&eligible)
            .map(|(ix, &ok)| {
                if !ok {
                    return [1.0, 0.0, 0.0, 0.0];
                }
                let e: Vec<f64> = (0..3).map(|d| (alpha[d] + ix[d]).exp()).collect();
                let s = 1.0 + e.iter().sum::<f64>();
                [1.0 / s, e[0] / s, e[1] / s, e[2] / s]
            })
            .collect()
    };
    for _ in 0..500 {
        let p = compute(&alpha);
        let mut worst: f64 = 0.0;
        for d in 0..3 {
            let m = p.iter().map(|r| r[d + 1]).sum::<f64>() / n;
            if m <= 0.0 {
                return Err(McfError::config("selection model leaves an arm without support"));
            }
            let step = (cfg.shares[d] / m).ln();
            worst = worst.max(step.abs());
            alpha[d] += step;
        }
        if worst < 1e-12 {
            break;
        }
    }
    let p = compute(&alpha);
    for d in 0..3 {
        let m = p.iter().map(|r| r[d + 1]).sum::<f64>() / n;
        if (m - cfg.shares[d]).abs() > 1e-6 {
            return Err(McfError::config(format!(
                "cannot reach treated share {} for arm {} under this selection model",
                cfg.shares[d],
                d + 1
            )));
        }
    }
    Ok(p)
}

/// Generates a dataset with known potential outcomes. Bit-reproducible for a
/// fixed `(config, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, "synthetic"));
    let covs: Vec<Covariates> = (0..cfg.n).map(|_| draw_covariates(&mut rng, cfg.n_noise)).collect();
    let props = propensities(cfg, &covs)?;
    let outcomes = Outcome::standard_set();
    let spell_noise: LogNormal<f64> = LogNormal::new(5.6, 0.6).expect("lognormal");
    let extra_noise: LogNormal<f64> = LogNormal::new(5.0, 0.7).expect("lognormal");

    let mut units = Vec::with_capacity(cfg.n);
    let mut potential = Vec::with_capacity(cfg.n);
    let mut expected = Vec::with_capacity(cfg.n);
    for (i, c) in covs.iter().enumerate() {
        let treatment = WeightedIndex::new(props[i])
            .map_err(|e| McfError::numeric(format!("propensities of unit {i}: {e}")))?
            .sample(&mut rng);
        let flag_p = if treatment == 0 {
            cfg.contamination_share
        } else {
            (3.0 * cfg.contamination_share).min(1.0)
        };
        let contaminated = cfg.contamination_share > 0.0 && rng.random::<f64>() < flag_p;

        let (spell, start, pseudo) = if treatment != 0 {
            let start = draw_start(&mut rng, c, MAX_START_DAY)
                .ok_or_else(|| McfError::numeric("start-day model never produced a feasible day"))?;
            let extra = extra_noise.sample(&mut rng).round() as u32;
            (start + extra, Some(start), false)
        } else {
            let spell = (spell_noise.sample(&mut rng).round() as u32).max(1);
            if cfg.assign_pseudo_starts {
                let start = draw_start(&mut rng, c, spell.min(MAX_START_DAY)).unwrap_or(1);
                (spell.max(start), Some(start), true)
            } else {
                (spell, None, false)
            }
        };

        let base = baseline_level(c);
        let q = if c.woman { UE_SHARE_WOMEN } else { UE_SHARE_MEN };
        let dip = if contaminated { CONTAMINATION_DIP } else { 0.0 };
        let mut prob = [[0.0; HORIZON_MONTHS]; N_ARMS];
        for d in 0..N_ARMS {
            let tau = if d == 0 {
                0.0
            } else {
                cfg.effects[d - 1].eval(c.foreign(), c.low_dutch())
            };
            for t in 1..=HORIZON_MONTHS {
                let mut p = base + ramp(t) - dip + tau / HORIZON_MONTHS as f64;
                if cfg.lock_in {
                    p += lock_in(d, t);
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(McfError::config(format!(
                        "employment probability {p:.3} outside [0, 1] for arm {d}, month {t}; effect functions too large"
                    )));
                }
                prob[d][t - 1] = p;
            }
        }
        let u: Vec<(f64, f64)> = (0..HORIZON_MONTHS)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let streams: Vec<Vec<LabourState>> = (0..N_ARMS)
            .map(|d| {
                u.iter()
                    .enumerate()
                    .map(|(t, &(a, b))| {
                        if a < prob[d][t] {
                            LabourState::Employed
                        } else if b < q {
                            LabourState::Unemployed
                        } else {
                            LabourState::OutOfLabourForce
                        }
                    })
                    .collect()
            })
            .collect();

        let mut pot_i = Vec::with_capacity(outcomes.len());
        let mut exp_i = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            let mut pr = [0.0; N_ARMS];
            let mut ex = [0.0; N_ARMS];
            for d in 0..N_ARMS {
                let w = o.window.first - 1..o.window.last;
                pr[d] = streams[d][w.clone()].iter().filter(|s| **s == o.state).count() as f64;
                ex[d] = prob[d][w]
                    .iter()
                    .map(|&p| match o.state {
                        LabourState::Employed => p,
                        LabourState::Unemployed => (1.0 - p) * q,
                        LabourState::OutOfLabourForce => (1.0 - p) * (1.0 - q),
                    })
                    .sum();
            }
            pot_i.push(pr);
            exp_i.push(ex);
        }
        potential.push(pot_i);
        expected.push(exp_i);

        units.push(UnitRecord {
            id: format!("u{:06}", i + 1),
            features: c.to_features(),
            treatment,
            outcomes: streams[treatment].clone(),
            spell_length_days: spell,
            start_day: start,
            is_pseudo_start: pseudo,
            prior_spell_almp: contaminated,
        });
    }
    Dataset::new(
        cfg.feature_spec(),
        units,
        Some(SyntheticTruth {
            outcomes,
            potential,
            expected,
        }),
    )
}
