mod common;

use common::gradcheck;

#[test]
fn flow_loss_reference_prompt() {
    gradcheck::flow_loss_reference_prompt().unwrap();
}

#[test]
fn flow_loss_control_branch() {
    gradcheck::flow_loss_control_branch().unwrap();
}

#[test]
fn distillation_and_combined_losses() {
    gradcheck::distillation_and_combined_losses().unwrap();
}

#[test]
fn preference_loss_adapters_and_trunk() {
    gradcheck::preference_loss_adapters_and_trunk().unwrap();
}

#[test]
fn supervised_winner_loss() {
    gradcheck::supervised_winner_loss().unwrap();
}
