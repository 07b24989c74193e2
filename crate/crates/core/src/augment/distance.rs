use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::params::ModelParams;
use crate::tasks::Task;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `(1/N) Σ_i ‖f_i − f0_i‖²`
    Euclid,
    /// `‖mean(f) − mean(f0)‖²`
    Mmd,
}

/// Distance between two equally sized feature sets `[N, D]`.
pub fn feature_distance(tape: &mut Tape, f: Var, f0: Var, kind: DistanceKind) -> Result<Var> {
    if tape.shape(f) != tape.shape(f0) || tape.shape(f).len() != 2 {
        return Err(Error::shape(format!(
            "feature sets {:?} and {:?} are not paired",
            tape.shape(f),
            tape.shape(f0)
        )));
    }
    let n = tape.shape(f)[0] as f64;
    match kind {
        DistanceKind::Euclid => {
            let diff = tape.sub(f, f0)?;
            let sq = tape.square(diff);
            let total = tape.sum(sq);
            Ok(tape.scale(total, 1.0 / n))
        }
        DistanceKind::Mmd => {
            let diff = tape.sub(f, f0)?;
            let col = tape.sum_axis(diff, 0)?;
            let mean = tape.scale(col, 1.0 / n);
            let sq = tape.square(mean);
            Ok(tape.sum(sq))
        }
    }
}

/// Distance between two tasks of identical layout, measured on the current
/// encoder's features of all `C·K + Q` samples.
pub fn task_distance(net: &Network, params: &ModelParams, a: &Task, b: &Task, kind: DistanceKind) -> Result<f64> {
    if a.layout() != b.layout() {
        return Err(Error::shape(format!("task layouts {:?} and {:?} differ", a.layout(), b.layout())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xa = tape.constant(&a.images());
    let xb = tape.constant(&b.images());
    let fa = net.encode(&mut tape, &bound, xa)?;
    let fb = net.encode(&mut tape, &bound, xb)?;
    let d = feature_distance(&mut tape, fa, fb, kind)?;
    tape.item(d)
}
