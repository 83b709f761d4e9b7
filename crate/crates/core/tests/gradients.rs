//! Central finite differences against autograd for the full two-branch loss.

mod common;

use common::{check_gradients, tiny_arch};
use reidvae::model::Likelihood;
use reidvae::nn::Backbone;

#[test]
fn mlp_branch_gradients_match_finite_differences() {
    let arch = tiny_arch(Backbone::Mlp { hidden: vec![8] }, [1, 2, 4], Likelihood::Gaussian { std: 0.3 });
    let (worst, nonzero) = check_gradients(&arch, 220, 1);
    println!("mlp: worst relative error {worst:e}, {nonzero} non-negligible gradients");
    assert!(nonzero > 100);
}

#[test]
fn conv_branch_gradients_match_finite_differences() {
    let arch = tiny_arch(Backbone::Conv { channels: vec![2, 3], hidden: 8 }, [1, 4, 4], Likelihood::Gaussian { std: 0.3 });
    let (worst, nonzero) = check_gradients(&arch, 220, 2);
    println!("conv: worst relative error {worst:e}, {nonzero} non-negligible gradients");
    assert!(nonzero > 100);
}

#[test]
fn bernoulli_and_learned_prior_gradients_match() {
    let mut arch = tiny_arch(Backbone::Mlp { hidden: vec![6] }, [1, 2, 2], Likelihood::Bernoulli);
    arch.prior.learned_mean = true;
    arch.content_dim_per_class = 2;
    let (worst, _) = check_gradients(&arch, 200, 3);
    println!("bernoulli: worst relative error {worst:e}");
}
