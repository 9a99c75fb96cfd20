mod common;

use common::{check_fine_gradients, check_post_gradients, tiny_vocab};

#[test]
fn tiny_vocabulary_has_twenty_ids() {
    assert_eq!(tiny_vocab().size(), 20);
}

#[test]
fn post_training_gradients_match_finite_differences() {
    let r = check_post_gradients(200);
    assert!(r.checked >= 200);
    assert!(r.max_rel <= 1e-4, "{r:?}");
}

#[test]
fn fine_tuning_gradients_match_finite_differences() {
    let r = check_fine_gradients(200);
    assert!(r.checked >= 200);
    assert!(r.max_rel <= 1e-4, "{r:?}");
}
