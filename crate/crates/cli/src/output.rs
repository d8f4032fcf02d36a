//! Run artifacts: metrics.csv, collab.json, summary.json.

use serde::{Deserialize, Serialize};

use fedamp_core::attention::{CollabMatrix, WeightMode};
use fedamp_core::federation::{Algorithm, FederationState, RoundRecord};
use fedamp_core::metrics::export_collab_matrix;
use fedamp_core::models::Client;
use fedamp_core::Error;

/// One row per round: `round,alpha,G,grad_norm,mean_test_acc,dropped_count`.
/// Floats use shortest round-trip formatting, so identical runs produce
/// byte-identical files.
pub fn metrics_csv(history: &[RoundRecord]) -> String {
    let mut out = String::from("round,alpha,G,grad_norm,mean_test_acc,dropped_count\n");
    for record in history {
        let acc = record
            .mean_test_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            record.round,
            record.alpha,
            record.objective,
            record.grad_norm,
            acc,
            record.dropped.len()
        ));
    }
    out
}

/// Run summary; BMTA fields are absent for non-classification models, and
/// `final_g` for zero-round runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub algorithm: String,
    pub rounds: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bmta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bmta_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_g: Option<f64>,
}

pub fn summary(
    algorithm_name: &str,
    seed: u64,
    state: &FederationState,
) -> Result<Summary, Error> {
    let final_g = state.history.last().map(|r| r.objective);
    let (bmta, bmta_round) = match state.accuracy_history() {
        Some(accs) if !accs.is_empty() => {
            let (round_idx, best) = accs
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .expect("non-empty history");
            (Some(*best), Some(state.history[round_idx].round))
        }
        _ => (None, None),
    };
    Ok(Summary {
        algorithm: algorithm_name.into(),
        rounds: state.round,
        seed,
        bmta,
        bmta_round,
        final_g,
    })
}

/// The collaboration weights the final round actually used: the recorded
/// snapshot for the attentive algorithms, the size-weighted averaging rows
/// for the global baselines, identity for separate training.
pub fn final_collab_json(
    state: &FederationState,
    algorithm: &Algorithm,
    clients: &[Client],
) -> Result<String, Error> {
    let groups: Vec<usize> = clients.iter().map(|c| c.data.group_id).collect();
    let m = clients.len();
    let recorded = state.history.iter().rev().find_map(|r| r.collab.clone());
    let collab = match (recorded, algorithm) {
        (Some(c), _) => c,
        (None, Algorithm::FedAmp { .. } | Algorithm::HeurFedAmp { .. }) => {
            return Err(Error::Domain(
                "no collaboration snapshot recorded; enable record_collab".into(),
            ))
        }
        (None, Algorithm::Separate) => CollabMatrix::identity(m),
        (None, _) => {
            let total: usize = clients.iter().map(|c| c.data.train.len()).sum();
            let row: Vec<f64> = clients
                .iter()
                .map(|c| c.data.train.len() as f64 / total as f64)
                .collect();
            let mut weights = Vec::with_capacity(m * m);
            for _ in 0..m {
                weights.extend_from_slice(&row);
            }
            CollabMatrix::from_row_stochastic(m, weights, WeightMode::Clamped)?
        }
    };
    export_collab_matrix(&collab, &groups)
}
