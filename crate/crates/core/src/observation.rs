//! Observation models, Gaussian measurement noise and observation files.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameDefinition, Trajectory};
use crate::rng::{standard_normals, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationKind {
    FullState,
    PositionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Covariance {
    /// `σ² I`.
    Isotropic { sigma2: f64 },
    /// The same full matrix at every stage.
    Full { matrix: Vec<Vec<f64>> },
}

/// Weight matrix `W_t` of the inverse objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveWeighting {
    /// `W_t = Σ_t⁻¹`; requires a nonsingular covariance.
    #[default]
    InverseCovariance,
    /// `W_t = I`. Same minimizer as `InverseCovariance` for isotropic noise, and defined at `σ² = 0`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub kind: ObservationKind,
    /// State indices read by `h`.
    pub indices: Vec<usize>,
    pub state_dim: usize,
    pub covariance: Covariance,
    #[serde(default)]
    pub weighting: ObjectiveWeighting,
}

impl ObservationModel {
    pub fn full_state(game: &GameDefinition, sigma2: f64) -> Self {
        let n = game.dims.state_dim;
        Self {
            kind: ObservationKind::FullState,
            indices: (0..n).collect(),
            state_dim: n,
            covariance: Covariance::Isotropic { sigma2 },
            weighting: ObjectiveWeighting::default(),
        }
    }

    pub fn position_only(game: &GameDefinition, sigma2: f64) -> Self {
        let indices = game
            .state_offsets()
            .into_iter()
            .flat_map(|o| [o, o + 1])
            .collect();
        Self {
            kind: ObservationKind::PositionOnly,
            indices,
            state_dim: game.dims.state_dim,
            covariance: Covariance::Isotropic { sigma2 },
            weighting: ObjectiveWeighting::default(),
        }
    }

    pub fn with_weighting(mut self, weighting: ObjectiveWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.output_dim();
        match &self.covariance {
            Covariance::Isotropic { sigma2 } => {
                if !(*sigma2 >= 0.0 && sigma2.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "σ² must be finite and nonnegative, got {sigma2}"
                    )));
                }
                Ok(DMatrix::identity(d, d) * *sigma2)
            }
            Covariance::Full { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension(format!("covariance must be {d} x {d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                    return Err(Error::NotPositiveDefinite(
                        "covariance is not symmetric".into(),
                    ));
                }
                Ok(m)
            }
        }
    }

    /// Lower factor `L` with `L Lᵀ = Σ`; zero for `σ² = 0`.
    pub fn noise_factor(&self) -> Result<DMatrix<f64>> {
        let sigma = self.covariance_matrix()?;
        if let Covariance::Isotropic { sigma2 } = self.covariance {
            return Ok(DMatrix::identity(sigma.nrows(), sigma.nrows()) * sigma2.sqrt());
        }
        sigma
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite("covariance has no Cholesky factor".into()))
    }

    /// The objective weight `W`.
    pub fn weight_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.output_dim();
        match self.weighting {
            ObjectiveWeighting::Identity => Ok(DMatrix::identity(d, d)),
            ObjectiveWeighting::InverseCovariance => {
                let sigma = self.covariance_matrix()?;
                let chol = sigma.cholesky().ok_or_else(|| {
                    Error::NotPositiveDefinite("inverse-covariance weighting needs Σ ≻ 0".into())
                })?;
                Ok(chol.inverse())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.iter().any(|&k| k >= self.state_dim) {
            return Err(Error::Dimension(
                "observation index outside the state".into(),
            ));
        }
        self.noise_factor()?;
        self.weight_matrix()?;
        Ok(())
    }
}

/// `h(x_t)`.
pub fn expected_output(model: &ObservationModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.state_dim {
        return Err(Error::Dimension(format!(
            "state has {} entries, model expects {}",
            x.len(),
            model.state_dim
        )));
    }
    Ok(model.indices.iter().map(|&k| x[k]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    /// Row `t` observes stage `t`.
    pub y: DMatrix<f64>,
    pub model: ObservationModel,
    pub seed: u64,
    weight: DMatrix<f64>,
}

/// Sidecar metadata written next to an observation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSidecar {
    pub model: ObservationModel,
    pub seed: u64,
    /// σ² for isotropic covariances, recorded explicitly.
    pub sigma2: Option<f64>,
}

/// Noisy observations of every stage of `traj`; stage `t` draws from substream `t` of `seed`.
pub fn observe(
    traj: &Trajectory,
    model: &ObservationModel,
    seed: u64,
) -> Result<ObservationSequence> {
    let factor = model.noise_factor()?;
    let d = model.output_dim();
    let t_len = traj.horizon();
    let mut y = DMatrix::zeros(t_len, d);
    for t in 0..t_len {
        let x: Vec<f64> = traj.states.row(t).iter().copied().collect();
        let mean = DVector::from_vec(expected_output(model, &x)?);
        let w = DVector::from_vec(standard_normals(&mut substream(seed, t as u64), d));
        let sample = mean + &factor * w;
        y.row_mut(t).copy_from(&sample.transpose());
    }
    ObservationSequence::new(y, model.clone(), seed)
}

impl ObservationSequence {
    pub fn new(y: DMatrix<f64>, model: ObservationModel, seed: u64) -> Result<Self> {
        if y.ncols() != model.output_dim() {
            return Err(Error::Dimension(format!(
                "observations have {} columns, model outputs {}",
                y.ncols(),
                model.output_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        let weight = model.weight_matrix()?;
        Ok(Self {
            y,
            model,
            seed,
            weight,
        })
    }

    /// Objective weight `W` applied to each stage residual.
    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Keep only the first `count` stages.
    pub fn truncated(&self, count: usize) -> Self {
        let mut out = self.clone();
        out.y = self.y.rows(0, count.min(self.len())).into_owned();
        out
    }

    fn residual(&self, states: &DMatrix<f64>, t: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.y.ncols(),
            self.model
                .indices
                .iter()
                .enumerate()
                .map(|(k, &i)| states[(t, i)] - self.y[(t, k)]),
        )
    }

    fn check_states(&self, states: &DMatrix<f64>) -> Result<()> {
        if states.nrows() < self.len() || states.ncols() != self.model.state_dim {
            return Err(Error::Dimension(format!(
                "{} observed stages need at least that many states of width {}",
                self.len(),
                self.model.state_dim
            )));
        }
        Ok(())
    }

    /// `P = Σ_t (h(x_t) - y_t)ᵀ W (h(x_t) - y_t)`.
    pub fn objective(&self, states: &DMatrix<f64>) -> Result<f64> {
        self.check_states(states)?;
        Ok((0..self.len())
            .map(|t| {
                let r = self.residual(states, t);
                r.dot(&(&self.weight * &r))
            })
            .sum())
    }

    /// `∂P/∂x_t` for every stage (rows), zero beyond the observed stages.
    pub fn objective_gradient(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_states(states)?;
        let mut g = DMatrix::zeros(states.nrows(), states.ncols());
        for t in 0..self.len() {
            let wr = (&self.weight * self.residual(states, t)) * 2.0;
            for (k, &i) in self.model.indices.iter().enumerate() {
                g[(t, i)] += wr[k];
            }
        }
        Ok(g)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.y.ncols()).map(|k| format!("y_{k}")));
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![t.to_string()];
            rec.extend(self.y.row(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let sidecar = ObservationSidecar {
            model: self.model.clone(),
            seed: self.seed,
            sigma2: match self.model.covariance {
                Covariance::Isotropic { sigma2 } => Some(sigma2),
                Covariance::Full { .. } => None,
            },
        };
        let mut f = std::fs::File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        writeln!(f)?;
        Ok(())
    }

    /// Read a CSV and its JSON sidecar (`<name>.json` next to `<name>.csv`).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let sidecar: ObservationSidecar =
            serde_json::from_reader(std::fs::File::open(sidecar_path(path))?)?;
        Self::read_csv_with_model(path, sidecar.model, sidecar.seed)
    }

    pub fn read_csv_with_model(path: &Path, model: ObservationModel, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let d = model.output_dim();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            if rec.len() != d + 1 {
                return Err(Error::Ingestion {
                    row,
                    column: "*".into(),
                    message: format!("expected {} fields, found {}", d + 1, rec.len()),
                });
            }
            let t: usize = rec[0].trim().parse().map_err(|_| Error::Ingestion {
                row,
                column: "t".into(),
                message: format!("not a stage index: {:?}", &rec[0]),
            })?;
            if t != rows.len() {
                return Err(Error::Ingestion {
                    row,
                    column: "t".into(),
                    message: format!("expected stage {}, found {t}", rows.len()),
                });
            }
            let mut vals = Vec::with_capacity(d);
            for k in 1..=d {
                vals.push(rec[k].trim().parse::<f64>().map_err(|_| Error::Ingestion {
                    row,
                    column: format!("y_{k}"),
                    message: format!("not a number: {:?}", &rec[k]),
                })?);
            }
            rows.push(vals);
        }
        let y = DMatrix::from_fn(rows.len(), d, |t, k| rows[t][k]);
        Self::new(y, model, seed)
    }
}

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{AgentObjective, DiscountSpec, DynamicsModel, GameDimensions};

    fn game(models: Vec<DynamicsModel>) -> GameDefinition {
        let n = 4 * models.len();
        GameDefinition {
            dims: GameDimensions {
                num_agents: models.len(),
                horizon: 3,
                state_dim: n,
                control_dims: vec![2; models.len()],
                dt: 0.1,
            },
            objectives: models
                .iter()
                .map(|_| AgentObjective {
                    terms: vec![],
                    discount: DiscountSpec::new(1.0),
                })
                .collect(),
            dynamics: models,
            constraints: vec![],
            x1: vec![0.0; n],
        }
    }

    #[test]
    fn expected_output_examples() {
        let one = game(vec![DynamicsModel::double_integrator()]);
        let full = ObservationModel::full_state(&one, 0.0);
        assert_eq!(
            expected_output(&full, &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        let two = game(vec![
            DynamicsModel::double_integrator(),
            DynamicsModel::double_integrator(),
        ]);
        let pos = ObservationModel::position_only(&two, 0.0);
        assert_eq!(
            expected_output(&pos, &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 2.0, 5.0, 6.0]
        );
        let car = game(vec![DynamicsModel::bicycle(2.7)]);
        let pos = ObservationModel::position_only(&car, 0.0);
        assert_eq!(
            expected_output(&pos, &[1.0, 2.0, 3.0, 0.1]).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn scalar_objective_example() {
        // h = id, Σ = 4, x - y = 2 at one stage → 2 · (1/4) · 2 = 1
        let g = game(vec![DynamicsModel::double_integrator()]);
        let mut model = ObservationModel::full_state(&g, 4.0);
        model.indices = vec![0];
        let obs =
            ObservationSequence::new(DMatrix::from_row_slice(1, 1, &[1.0]), model, 0).unwrap();
        let states = DMatrix::from_row_slice(1, 4, &[3.0, 0.0, 0.0, 0.0]);
        assert_eq!(obs.objective(&states).unwrap(), 1.0);
    }

    #[test]
    fn singular_covariance_rejected_for_inverse_weighting() {
        let g = game(vec![DynamicsModel::double_integrator()]);
        assert!(matches!(
            ObservationModel::full_state(&g, 0.0).validate(),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(ObservationModel::full_state(&g, 0.0)
            .with_weighting(ObjectiveWeighting::Identity)
            .validate()
            .is_ok());
        let mut bad = ObservationModel::full_state(&g, 1.0);
        bad.covariance = Covariance::Full {
            matrix: vec![
                vec![1.0, 2.0, 0.0, 0.0],
                vec![2.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        };
        assert!(matches!(
            bad.noise_factor(),
            Err(Error::NotPositiveDefinite(_))
        ));
    }
}
