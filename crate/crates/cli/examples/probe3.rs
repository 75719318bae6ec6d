use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use dmfa_core::deep::{collapse, sample_with_flat_components, DmfaNode};
use dmfa_core::model::{FactorAnalyser, MfaModel};

fn random_mfa(dim: usize, factors: usize, components: usize, rng: &mut ChaCha8Rng) -> MfaModel {
    let comps = (0..components).map(|_| {
        let loading = DMatrix::from_fn(dim, factors, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(dim, |_, _| rng.random_range(0.1..2.0));
        FactorAnalyser::new(loading, mean, noise).unwrap()
    }).collect();
    let weights: Vec<f64> = (0..components).map(|_| 1.0 + rng.random_range(0.0..0.5)).collect();
    MfaModel::with_normalized_weights(comps, &weights).unwrap()
}
fn random_tree(dims: &[usize], comps: &[usize], rng: &mut ChaCha8Rng) -> DmfaNode {
    let layer = random_mfa(dims[0], dims[1], comps[0], rng);
    if dims.len() == 2 { return DmfaNode::leaf(layer); }
    let children = (0..comps[0]).map(|_| Some(random_tree(&dims[1..], &comps[1..], rng))).collect();
    DmfaNode::new(layer, children).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let node = random_tree(&[6, 3, 2, 1], &[2, 2, 2], &mut rng);
    let collapsed = collapse(&node).unwrap();
    let n = 800_000usize;
    let (rows, flats) = sample_with_flat_components(&node, n, 777).unwrap();
    let dim = 6;
    for s in 0..collapsed.num_components() {
        let members: Vec<usize> = (0..n).filter(|&i| flats[i] == s).collect();
        let ns = members.len() as f64;
        let mut mean = DVector::zeros(dim);
        for &i in &members { mean += rows.row(i).transpose(); }
        mean /= ns;
        let mut cov = DMatrix::zeros(dim, dim);
        for &i in &members {
            let d = rows.row(i).transpose() - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= ns - 1.0;
        let fa = collapsed.component(s);
        let gamma = fa.loading() * fa.loading().transpose() + DMatrix::from_diagonal(fa.noise_diag());
        let rel = (&cov - &gamma).norm() / gamma.norm();
        // theoretical wishart noise and mean agreement in sigma units
        let tr = gamma.trace();
        let tr2 = (gamma.clone() * gamma.clone()).trace();
        let expected = ((tr * tr + tr2) / ns).sqrt() / gamma.norm();
        let mean_err = (collapsed.component(s).mean() - &mean).norm();
        let mean_se = (tr / ns).sqrt();
        // weight agreement
        let w_emp = ns / n as f64;
        let w_true = collapsed.weight(s);
        println!(
            "s={s}: n_s={} cov_rel={rel:.4} expected_noise={expected:.4} ratio={:.2} mean_err/se={:.2} w_emp={:.4} w_true={:.4}",
            members.len(), rel / expected, mean_err / mean_se, w_emp, w_true
        );
    }
}
