//! The enumerated ELBO of a briefly trained model never exceeds an
//! importance-sampled estimate of the log-evidence `log p(x, y~)`.

mod common;

#[test]
fn elbo_is_below_importance_sampled_evidence() {
    let gaps = common::four_pixel_evidence_gaps(17);
    for (i, g) in gaps.iter().enumerate() {
        println!("example {i}: elbo {:.4} ± {:.1e}, evidence {:.4} ± {:.1e}, gap {:.4}", g.elbo, g.elbo_se, g.evidence, g.evidence_se, g.gap());
        assert!(g.holds(), "example {i}: ELBO exceeds evidence by more than 3 sigma: {g:?}");
    }
}
