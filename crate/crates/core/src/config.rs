//! JSON scenario files.
//!
//! ```json
//! {
//!   "classes": [{"A": 0.1, "B": 0.2, "sigma": 1.5, "Q": 0.1, "R": 5, "M": 500}],
//!   "weights": [1.0],
//!   "destinations": [-10, 10],
//!   "initial": {"kind": "gaussian", "mean": 0.3, "cov": 1.0},
//!   "horizon": 2.0,
//!   "n_steps": 2000
//! }
//! ```
//!
//! Matrices are row-major nested arrays; a bare number stands for a 1×1
//! matrix and a flat array for a column vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentClassParams, DestinationSet, InitialDistribution, Scenario, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Vector(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Vector(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
            MatrixSpec::Rows(rows) => {
                let ncols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Config(format!("{name}: ragged matrix rows")));
                }
                Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
            }
        }
    }

    fn to_vector(&self, name: &str) -> Result<DVector<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DVector::from_element(1, *v)),
            MatrixSpec::Vector(v) => Ok(DVector::from_column_slice(v)),
            MatrixSpec::Rows(_) => Err(Error::Config(format!("{name}: expected a vector"))),
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        if m.shape() == (1, 1) {
            MatrixSpec::Scalar(m[(0, 0)])
        } else {
            MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        if v.len() == 1 {
            MatrixSpec::Scalar(v[0])
        } else {
            MatrixSpec::Vector(v.iter().copied().collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "B")]
    pub b: MatrixSpec,
    pub sigma: MatrixSpec,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    #[serde(rename = "M")]
    pub m: MatrixSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialConfig {
    Gaussian { mean: MatrixSpec, cov: MatrixSpec },
    Samples { points: Vec<MatrixSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub classes: Vec<ClassConfig>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub destinations: Vec<MatrixSpec>,
    pub initial: InitialConfig,
    pub horizon: f64,
    pub n_steps: usize,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Raw class parameters, before validation.
    pub fn class_params(&self) -> Result<Vec<AgentClassParams>> {
        self.classes
            .iter()
            .enumerate()
            .map(|(s, c)| {
                let name = |f: &str| format!("classes[{s}].{f}");
                Ok(AgentClassParams {
                    a: c.a.to_matrix(&name("A"))?,
                    b: c.b.to_matrix(&name("B"))?,
                    sigma: c.sigma.to_matrix(&name("sigma"))?,
                    q: c.q.to_matrix(&name("Q"))?,
                    r: c.r.to_matrix(&name("R"))?,
                    m: c.m.to_matrix(&name("M"))?,
                })
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.classes.len().max(1) as f64; self.classes.len()])
    }

    pub fn destination_set(&self, metric: DMatrix<f64>) -> Result<DestinationSet> {
        let points = self
            .destinations
            .iter()
            .enumerate()
            .map(|(j, p)| p.to_vector(&format!("destinations[{j}]")))
            .collect::<Result<Vec<_>>>()?;
        DestinationSet::new(points, metric)
    }

    pub fn initial_distribution(&self) -> Result<InitialDistribution> {
        Ok(match &self.initial {
            InitialConfig::Gaussian { mean, cov } => InitialDistribution::Gaussian {
                mean: mean.to_vector("initial.mean")?,
                cov: cov.to_matrix("initial.cov")?,
            },
            InitialConfig::Samples { points } => InitialDistribution::Samples(
                points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.to_vector(&format!("initial.points[{i}]")))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    pub fn build(&self) -> Result<Scenario> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let classes = self.class_params()?;
        let dest = self.destination_set(classes[0].m.clone())?;
        let grid = TimeGrid::new(self.horizon, self.n_steps)?;
        Scenario::new(
            classes,
            self.weights(),
            dest,
            self.initial_distribution()?,
            grid,
        )
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        let initial = match &s.initial {
            InitialDistribution::Gaussian { mean, cov } => InitialConfig::Gaussian {
                mean: MatrixSpec::from_vector(mean),
                cov: MatrixSpec::from_matrix(cov),
            },
            InitialDistribution::Samples(pts) => InitialConfig::Samples {
                points: pts.iter().map(MatrixSpec::from_vector).collect(),
            },
        };
        Self {
            classes: s
                .population
                .classes
                .iter()
                .map(|c| {
                    let p = &c.params;
                    ClassConfig {
                        a: MatrixSpec::from_matrix(&p.a),
                        b: MatrixSpec::from_matrix(&p.b),
                        sigma: MatrixSpec::from_matrix(&p.sigma),
                        q: MatrixSpec::from_matrix(&p.q),
                        r: MatrixSpec::from_matrix(&p.r),
                        m: MatrixSpec::from_matrix(&p.m),
                    }
                })
                .collect(),
            weights: Some(s.population.weights.clone()),
            destinations: s
                .destinations
                .points()
                .iter()
                .map(MatrixSpec::from_vector)
                .collect(),
            initial,
            horizon: s.grid.horizon(),
            n_steps: s.grid.n_steps(),
        }
    }
}

/// The scalar binary-choice scenario used throughout the numerical
/// experiments: `A=0.1, B=0.2, R=5, M=500, T=2`, destinations `±10`,
/// initial law `N(0.3, 1)`, 2000 time steps.
pub fn reference_binary(q: f64, sigma: f64) -> Scenario {
    reference_binary_with(q, sigma, 500.0, 2000)
}

pub fn reference_binary_with(q: f64, sigma: f64, m: f64, n_steps: usize) -> Scenario {
    let params = AgentClassParams::scalar(0.1, 0.2, sigma, q, 5.0, m);
    let dest = DestinationSet::scalar(&[-10.0, 10.0], m).expect("distinct destinations");
    Scenario::new(
        vec![params],
        vec![1.0],
        dest,
        InitialDistribution::scalar_gaussian(0.3, 1.0),
        TimeGrid::new(2.0, n_steps).expect("valid grid"),
    )
    .expect("reference parameters are valid")
}
