mod common;

use common::{check_gradient, Term};

#[test]
fn every_loss_term_matches_central_differences() {
    for term in Term::ALL {
        let r = check_gradient(term, 200, 11);
        assert_eq!(r.checked, 200, "{term:?}: {r:?}");
        assert!(r.worst < term.tolerance(), "{term:?}: {r:?}");
    }
}

#[test]
fn gradients_hold_at_a_second_point() {
    for term in [Term::Msl, Term::Total] {
        let r = check_gradient(term, 50, 12345);
        assert!(r.worst < term.tolerance(), "{term:?}: {r:?}");
    }
}
