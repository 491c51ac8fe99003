//! Two pedestrians crossing diagonally between the corners of a crosswalk.

use serde::{Deserialize, Serialize};

use crate::game::{
    AgentObjective, ConstraintBlock, ConstraintKind, CostTerm, DiscountSpec, DynamicsModel,
    GameDefinition, GameDimensions, Param, Params,
};

/// How inter-agent collision avoidance enters the game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollisionForm {
    /// Smoothed hinge penalty in each objective.
    #[default]
    Objective,
    /// Separation inequality owned by each agent.
    Constraint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrosswalkConfig {
    pub horizon: usize,
    pub dt: f64,
    pub gamma: [f64; 2],
    pub starts: [[f64; 2]; 2],
    pub goals: [[f64; 2]; 2],
    pub w_goal: f64,
    pub w_ctrl: f64,
    pub w_coll: f64,
    pub d_min: f64,
    pub delta: f64,
    /// Symmetric bound on each acceleration component.
    pub control_limit: f64,
    /// Symmetric bound on each velocity component.
    pub velocity_limit: f64,
    pub collision: CollisionForm,
}

impl Default for CrosswalkConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: 0.1,
            gamma: [0.7, 0.8],
            starts: [[-5.0, 5.0], [5.0, 5.0]],
            goals: [[5.0, -5.0], [-5.0, -5.0]],
            w_goal: 1.0,
            w_ctrl: 0.1,
            w_coll: 100.0,
            d_min: 1.0,
            delta: 1.2,
            control_limit: 100.0,
            velocity_limit: 30.0,
            collision: CollisionForm::Objective,
        }
    }
}

/// θ layout: `[goal_x^1, goal_y^1, goal_x^2, goal_y^2]`.
pub fn build_crosswalk(config: &CrosswalkConfig) -> (GameDefinition, Params) {
    let c = config;
    let bounds = |lim: f64| [[-lim, lim], [-lim, lim]];
    let model = DynamicsModel::double_integrator()
        .with_control_bounds(bounds(c.control_limit))
        .with_velocity_bounds(bounds(c.velocity_limit));
    let mut objectives = Vec::new();
    let mut constraints = Vec::new();
    for i in 0..2 {
        let other = 1 - i;
        let mut terms = vec![
            CostTerm::goal(
                c.w_goal,
                [
                    Param::learnable(c.goals[i][0], 2 * i),
                    Param::learnable(c.goals[i][1], 2 * i + 1),
                ],
            ),
            CostTerm::control(c.w_ctrl),
        ];
        match c.collision {
            CollisionForm::Objective => {
                terms.push(CostTerm::collision(c.w_coll, other, c.d_min, c.delta))
            }
            CollisionForm::Constraint => constraints.push(ConstraintBlock::new(
                i,
                ConstraintKind::CollisionSeparation {
                    other,
                    d_min: c.d_min,
                    delta: c.delta,
                },
            )),
        }
        objectives.push(AgentObjective {
            terms,
            discount: DiscountSpec::new(c.gamma[i]),
        });
        constraints.push(ConstraintBlock::new(i, ConstraintKind::ControlBox));
        constraints.push(ConstraintBlock::new(i, ConstraintKind::VelocityBox));
    }
    let x1 = vec![
        c.starts[0][0],
        c.starts[0][1],
        0.0,
        0.0,
        c.starts[1][0],
        c.starts[1][1],
        0.0,
        0.0,
    ];
    let game = GameDefinition {
        dims: GameDimensions {
            num_agents: 2,
            horizon: c.horizon,
            state_dim: 8,
            control_dims: vec![2, 2],
            dt: c.dt,
        },
        dynamics: vec![model.clone(), model],
        objectives,
        constraints,
        x1,
    };
    let truth = game.nominal_params();
    (game, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions() {
        let (game, truth) = build_crosswalk(&CrosswalkConfig::default());
        assert_eq!(
            (game.dims.num_agents, game.dims.horizon, game.dims.dt),
            (2, 25, 0.1)
        );
        assert_eq!(truth.theta, vec![5.0, -5.0, -5.0, -5.0]);
        assert_eq!(truth.gamma, vec![0.7, 0.8]);
        game.validate().unwrap();
    }
}
