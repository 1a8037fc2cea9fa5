//! Ownership verification with self-calibration: the watermark score is the
//! accuracy gap between the trigger pros and their matched-difficulty cons,
//! which cancels the baseline success rate an independent model reaches on
//! either set.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::to_unit_batch;
use crate::nn::argmax_rows;
use crate::serve::ServingSurface;
use crate::triggergen::TriggerSetBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Stolen,
    Independent,
}

/// Outcome of one verification, including raw counts so that a statistical
/// test can be layered on top later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub suspect: String,
    pub phi_pros: f32,
    pub phi_cons: f32,
    /// `phi_pros - phi_cons`, in [-1, 1]
    pub phi_wm: f32,
    pub threshold: f32,
    pub decision: Decision,
    pub pros_correct: usize,
    pub cons_correct: usize,
    pub n_pros: usize,
    pub n_cons: usize,
}

fn accuracy_on(surface: &mut dyn ServingSurface, ds: &LabeledDataset) -> Result<usize> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(128) {
        let x = to_unit_batch(ds, chunk);
        let p = surface.predict_proba(&x)?;
        for (j, &i) in chunk.iter().enumerate() {
            // argmax only: the verdict is invariant to any rank-preserving
            // transform of the suspect's outputs (e.g. hidden temperature)
            let row: Vec<f32> = p.row(j).to_vec();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(c, _)| c)
                .unwrap();
            if pred == ds.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Verify ownership of a suspect model through its serving surface.
/// Uses exactly `|pros| + |cons|` queries.
pub fn verify_ownership(
    suspect: &mut dyn ServingSurface,
    suspect_id: &str,
    bundle: &TriggerSetBundle,
    threshold: f32,
) -> Result<VerificationVerdict> {
    if !bundle.is_finalized() {
        return Err(Error::Contract(
            "bundle is not finalized: cons are missing".into(),
        ));
    }
    if !threshold.is_finite() {
        return Err(Error::Config("threshold must be finite".into()));
    }
    let pros_correct = accuracy_on(suspect, &bundle.pros)?;
    let cons_correct = accuracy_on(suspect, &bundle.cons)?;
    let phi_pros = pros_correct as f32 / bundle.pros.len() as f32;
    let phi_cons = cons_correct as f32 / bundle.cons.len() as f32;
    let phi_wm = phi_pros - phi_cons;
    Ok(VerificationVerdict {
        suspect: suspect_id.to_string(),
        phi_pros,
        phi_cons,
        phi_wm,
        threshold,
        decision: if phi_wm >= threshold {
            Decision::Stolen
        } else {
            Decision::Independent
        },
        pros_correct,
        cons_correct,
        n_pros: bundle.pros.len(),
        n_cons: bundle.cons.len(),
    })
}

/// Watermark score of a plain classifier (helper for attack evaluations).
pub fn phi_wm_of_model(
    model: &mut crate::model::ClassifierModel,
    bundle: &TriggerSetBundle,
) -> Result<f32> {
    if !bundle.is_finalized() {
        return Err(Error::Contract(
            "bundle is not finalized: cons are missing".into(),
        ));
    }
    let acc = |m: &mut crate::model::ClassifierModel, ds: &LabeledDataset| -> f32 {
        let all: Vec<usize> = (0..ds.len()).collect();
        let preds = argmax_rows(&m.logits(&to_unit_batch(ds, &all)));
        preds.iter().zip(&ds.labels).filter(|(p, y)| *p == *y).count() as f32 / ds.len() as f32
    };
    Ok(acc(model, &bundle.pros) - acc(model, &bundle.cons))
}

/// Smallest threshold that no clean model in the panel reaches, plus a
/// safety margin of 0.05.
pub fn calibrate_threshold(panel_scores: &[f32], margin: f32) -> Result<f32> {
    if panel_scores.len() < 5 {
        return Err(Error::Config(format!(
            "threshold calibration needs a panel of >= 5 clean models, got {}",
            panel_scores.len()
        )));
    }
    let max = panel_scores.iter().cloned().fold(f32::MIN, f32::max);
    Ok(max + margin)
}
