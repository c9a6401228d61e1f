use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelGeometry, SweepVolume};
use crate::labels::{DirectionClass, PositionClass};

/// One observer's labels for every frame of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverVotes {
    pub position: Vec<PositionClass>,
    pub direction: Vec<DirectionClass>,
    /// Where this observer placed the centre, in degrees.
    pub centre_deg: f64,
    pub half_extent_deg: f64,
}

/// Labels a sweep the way an observer with a biased eye would: the centre
/// plane and the gland boundary are each displaced by one draw from
/// `N(0, sigma_obs²)` per volume, then the ground-truth rules are applied.
pub fn simulate_observer<R: Rng + ?Sized>(sweep: &SweepVolume, sigma_obs: f64, rng: &mut R) -> ObserverVotes {
    let sigma = sigma_obs.max(0.0);
    let (centre_shift, boundary_shift) = if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let truth = sweep.geometry;
    // the observer's centre band must stay inside their gland boundary
    let half_extent = (truth.half_extent_deg + boundary_shift).max(centre_shift.abs() + truth.delta_c_deg);
    let centre = truth.theta_c_deg + centre_shift;
    let seen = LabelGeometry {
        theta_c_deg: centre,
        delta_c_deg: truth.delta_c_deg,
        half_extent_deg: half_extent,
    };
    let mut position = Vec::with_capacity(sweep.len());
    let mut direction = Vec::with_capacity(sweep.len());
    for f in &sweep.frames {
        let angle = f.sweep_angle_deg;
        let off = (angle - centre).abs();
        let pos = if off <= seen.delta_c_deg {
            PositionClass::Centre
        } else if (angle - truth.theta_c_deg).abs() <= half_extent {
            PositionClass::Periphery
        } else {
            PositionClass::Outside
        };
        position.push(pos);
        direction.push(seen.direction(angle));
    }
    ObserverVotes {
        position,
        direction,
        centre_deg: centre,
        half_extent_deg: half_extent,
    }
}
