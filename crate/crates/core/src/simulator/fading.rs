use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Atmospheric intensity fluctuations on a free-space arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Fading {
    #[default]
    None,
    /// Log-normal transmittance with unit mean ratio: `ln(T / T_mean)` is an
    /// Ornstein-Uhlenbeck process with standard deviation `sigma` and
    /// exponential autocorrelation time `correlation_time_s`.
    LogNormal { sigma: f64, correlation_time_s: f64 },
}

impl Fading {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Fading::None => Ok(()),
            Fading::LogNormal {
                sigma,
                correlation_time_s,
            } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    Err(format!("sigma must be >= 0, got {sigma}"))
                } else if !(correlation_time_s > 0.0 && correlation_time_s.is_finite()) {
                    Err(format!("correlation_time_s must be > 0, got {correlation_time_s}"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Running state of one arm's fading. Query times must not decrease.
#[derive(Debug, Clone)]
pub struct FadingProcess {
    fading: Fading,
    log_ratio: Option<f64>,
    last_t: f64,
}

impl FadingProcess {
    pub fn new(fading: Fading) -> Self {
        Self {
            fading,
            log_ratio: None,
            last_t: 0.0,
        }
    }

    /// `ln(T(t) / T_mean)` at time `t`.
    pub fn log_ratio<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) -> f64 {
        let Fading::LogNormal {
            sigma,
            correlation_time_s,
        } = self.fading
        else {
            return 0.0;
        };
        if sigma == 0.0 {
            return 0.0;
        }
        let mean = -0.5 * sigma * sigma;
        let z: f64 = StandardNormal.sample(rng);
        let x = match self.log_ratio {
            None => mean + sigma * z,
            Some(prev) => {
                debug_assert!(t >= self.last_t, "fading queried backwards in time");
                let rho = (-(t - self.last_t).max(0.0) / correlation_time_s).exp();
                mean + (prev - mean) * rho + sigma * (1.0 - rho * rho).sqrt() * z
            }
        };
        self.log_ratio = Some(x);
        self.last_t = t;
        x
    }
}

/// Instantaneous attenuation in dB around `att_db_mean`.
pub fn apply_fading<R: Rng + ?Sized>(att_db_mean: f64, process: &mut FadingProcess, t: f64, rng: &mut R) -> f64 {
    att_db_mean - 10.0 * process.log_ratio(t, rng) / std::f64::consts::LN_10
}
