use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::sensing::{RangeObservation, SensingAgent};
use crate::world::Room;

/// Normalized stand-in for the unknown AGV position (room centre).
pub const DUMMY: [f64; 2] = [0.5, 0.5];

/// Star graph with `L` anchor leaves pointing at one AGV node.
///
/// Anchor rows are `[x / width, y / depth, range / diagonal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StarGraph {
    pub anchor_feats: Vec<[f64; 3]>,
    pub agv_dummy: [f64; 2],
    /// Normalized `[x, y]` ground truth.
    pub label: Option<[f64; 2]>,
}

impl StarGraph {
    /// Builds a graph from raw `(x, y, range)` triplets in metres.
    pub fn from_features(feats: &[[f64; 3]], room: &Room, label: Option<Vector2<f64>>) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::Graph("a star graph needs at least one anchor".into()));
        }
        if feats.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Graph("non-finite anchor feature".into()));
        }
        let diag = room.diagonal();
        Ok(Self {
            anchor_feats: feats
                .iter()
                .map(|f| [f[0] / room.width, f[1] / room.depth, f[2] / diag])
                .collect(),
            agv_dummy: DUMMY,
            label: label.map(|p| normalize_position(&p, room)),
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchor_feats.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_anchors() + 1
    }

    /// Directed edges `(l, L)` from every anchor node to the AGV node.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let agv = self.n_anchors();
        (0..agv).map(|l| (l, agv)).collect()
    }
}

pub fn normalize_position(p: &Vector2<f64>, room: &Room) -> [f64; 2] {
    [p.x / room.width, p.y / room.depth]
}

pub fn denormalize_position(p: &[f64; 2], room: &Room) -> Vector2<f64> {
    Vector2::new(p[0] * room.width, p[1] * room.depth)
}

/// Graph over the scheduled anchors and their reported ranges.
pub fn build_star_graph(
    selected: &[(SensingAgent, RangeObservation)],
    room: &Room,
    label: Option<Vector2<f64>>,
) -> Result<StarGraph> {
    let feats = selected
        .iter()
        .map(|(agent, obs)| {
            if agent.id != obs.anchor_id {
                return Err(Error::Graph(format!(
                    "observation from anchor {} paired with anchor {}",
                    obs.anchor_id, agent.id
                )));
            }
            Ok([agent.position.x, agent.position.y, obs.range])
        })
        .collect::<Result<Vec<_>>>()?;
    StarGraph::from_features(&feats, room, label)
}
