// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing success rate, cross-lingual editing protocols and DKN-based
//! fact checking.

mod cross_lingual;
mod edit;
mod fact_check;

pub use cross_lingual::{cross_lingual_edit_experiment, protocol_targets, CrossLingualReport, Protocol};
pub use edit::{
    editing_success_rate, irrelevant_pairing, random_control, run_trial, run_trials, success_rate, DeltaRow, EditKind,
    EditOutcome, EditTrial, ExclusionRule, SrComponent, SrFlag, SrReport, TargetKind, TrialResult,
};
pub use fact_check::{
    bank_activation, calibrate_lambda, fact_check, fact_check_baseline, fact_check_experiment, judge_activations,
    median, prf1, statement_activations, DknBank, FactCheckMethod, FactCheckReport, Judgement, Prf1, Statement,
};
