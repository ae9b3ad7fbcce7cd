use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Survival schedule `alpha(t)`: the probability that a token is still
/// uncorrupted at time `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `alpha(t) = 1 - t`
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Endpoints `t = 0` and `t = 1` are accepted as closed limits.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self {
            NoiseSchedule::Linear => 1.0 - t,
        })
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_values() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
    }

    #[test]
    fn out_of_domain() {
        let s = NoiseSchedule::Linear;
        assert!(matches!(s.alpha(-0.01), Err(Error::Domain(_))));
        assert!(matches!(s.alpha(1.5), Err(Error::Domain(_))));
        assert!(s.alpha(f64::NAN).is_err());
    }

    #[test]
    fn monotone_on_grid() {
        let s = NoiseSchedule::Linear;
        let vals: Vec<f64> = (0..=1000).map(|i| s.alpha(i as f64 / 1000.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        assert!(vals.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
