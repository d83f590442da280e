use serde::{Deserialize, Serialize};

/// Numerical tolerances shared by all modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub level_tol: f64,
    pub submersion_tol: f64,
    pub capture_radius: f64,
    pub drift_tol: f64,
    pub k_max_derivs: usize,
    pub taylor_order: usize,
    pub step_tol: f64,
    pub chord_tol: f64,
    pub max_iter: usize,
    pub k_max: usize,
    pub jet_tol: f64,
    pub axis_margin: f64,
    pub solve_tol: f64,
    pub diag_margin: f64,
    pub rank_tol: f64,
    pub ambiguity_factor: f64,
    pub dedup_eps: f64,
    pub fd_step: f64,
    pub ray_tol: f64,
    pub h_min: f64,
    pub clearance_min: f64,
    pub angle_samples: usize,
    pub max_radius_halvings: usize,
    /// Upper bound on a single flow step; Taylor error control cannot see a bump ahead of a flat region.
    pub max_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            level_tol: 1e-10,
            submersion_tol: 1e-8,
            capture_radius: 1e-2,
            drift_tol: 1e-9,
            k_max_derivs: 8,
            taylor_order: 12,
            step_tol: 1e-15,
            chord_tol: 1e-9,
            max_iter: 30,
            k_max: 6,
            jet_tol: 1e-7,
            axis_margin: 0.2,
            solve_tol: 1e-10,
            diag_margin: 1e-3,
            rank_tol: 1e-6,
            ambiguity_factor: 10.0,
            dedup_eps: 1e-4,
            fd_step: 1e-5,
            ray_tol: 1e-6,
            h_min: 0.1,
            clearance_min: 1e-3,
            angle_samples: 64,
            max_radius_halvings: 20,
            max_step: 0.5,
        }
    }
}
