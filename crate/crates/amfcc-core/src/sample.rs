//! Raw discrete profile observations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete measurements of one profile component: a sorted time grid and the
/// observed values at those times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSamples {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// One observation of a multivariate functional quality characteristic,
/// observed as noisy discrete values per component. Grids may differ across
/// components and observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSample {
    pub obs_id: String,
    pub components: Vec<ComponentSamples>,
}

impl DiscreteSample {
    /// Build a validated sample. Each component grid must be strictly
    /// increasing with finite values, one value per grid point.
    pub fn new(obs_id: impl Into<String>, components: Vec<ComponentSamples>) -> Result<Self> {
        let obs_id = obs_id.into();
        if components.is_empty() {
            return Err(Error::InvalidSample {
                obs_id,
                reason: "no components".into(),
            });
        }
        for (k, comp) in components.iter().enumerate() {
            if comp.times.is_empty() {
                return Err(Error::InvalidSample {
                    obs_id,
                    reason: format!("component {} has no measurements", k + 1),
                });
            }
            if comp.times.len() != comp.values.len() {
                return Err(Error::InvalidSample {
                    obs_id,
                    reason: format!(
                        "component {} has {} grid points but {} values",
                        k + 1,
                        comp.times.len(),
                        comp.values.len()
                    ),
                });
            }
            for w in comp.times.windows(2) {
                if !(w[0] < w[1]) {
                    return Err(Error::InvalidSample {
                        obs_id,
                        reason: format!(
                            "component {} grid is not strictly increasing near t = {}",
                            k + 1,
                            w[0]
                        ),
                    });
                }
            }
            if comp.times.iter().any(|t| !t.is_finite())
                || comp.values.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidSample {
                    obs_id,
                    reason: format!("component {} contains non-finite entries", k + 1),
                });
            }
        }
        Ok(Self { obs_id, components })
    }

    /// Number of profile components.
    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unsorted_grid() {
        let comp = ComponentSamples {
            times: vec![0.0, 0.5, 0.4],
            values: vec![1.0, 2.0, 3.0],
        };
        assert!(DiscreteSample::new("a", vec![comp]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        let comp = ComponentSamples {
            times: vec![0.0, 0.5],
            values: vec![1.0],
        };
        assert!(DiscreteSample::new("a", vec![comp]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let comp = ComponentSamples {
            times: vec![0.0, 0.5],
            values: vec![1.0, f64::NAN],
        };
        assert!(DiscreteSample::new("a", vec![comp]).is_err());
    }

    #[test]
    fn accepts_valid_sample() {
        let comp = ComponentSamples {
            times: vec![0.0, 0.5, 1.0],
            values: vec![1.0, 2.0, 3.0],
        };
        let s = DiscreteSample::new("obs-1", vec![comp.clone(), comp]).unwrap();
        assert_eq!(s.n_components(), 2);
    }
}
