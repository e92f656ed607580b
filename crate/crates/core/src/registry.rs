//! Named example instances.

use nalgebra::DVector;

use crate::bouncing_ball::{self, BallState, BouncingBall};
use crate::error::{Error, Result};

pub const BOUNCING_BALL_ID: &str = "bouncing_ball_internal";

pub struct Example {
    pub id: &'static str,
    pub problem: BouncingBall,
    pub initial_state: DVector<f64>,
    pub seeds: fn(usize) -> Option<DVector<f64>>,
    pub demo_pre_state: BallState,
}

pub fn ids() -> &'static [&'static str] {
    &[BOUNCING_BALL_ID]
}

/// Looks up an example; `problem` may be adjusted by the caller afterwards.
pub fn lookup(id: &str) -> Result<Example> {
    match id {
        BOUNCING_BALL_ID => Ok(Example {
            id: BOUNCING_BALL_ID,
            problem: BouncingBall::default(),
            initial_state: DVector::from_column_slice(&bouncing_ball::INITIAL_STATE),
            seeds: bouncing_ball::seed,
            demo_pre_state: bouncing_ball::DEMO_PRE_STATE,
        }),
        other => Err(Error::Domain(format!(
            "unknown example '{other}' (known: {})",
            ids().join(", ")
        ))),
    }
}
