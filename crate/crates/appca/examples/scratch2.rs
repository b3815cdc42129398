use appca::model::{center_observations, FeatureAssignments, Hyperparameters, ModelState, ProjectionBasis};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ProjectionBasis {
    let raw = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = DMatrix::zeros(d, k);
    for j in 0..k {
        let mut col = raw.column(j).into_owned();
        for _ in 0..2 {
            for i in 0..j {
                let prev = w.column(i);
                let proj = prev.dot(&col);
                col.axpy(-proj, &prev, 1.0);
            }
        }
        col /= col.norm();
        w.column_mut(j).copy_from(&col);
    }
    ProjectionBasis::new(w, true).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 6;
    let basis = orthonormal_basis(&mut rng, d, 1);
    let z = DMatrix::from_fn(1, 5, |_, _| (rng.random::<f64>() < 0.6) as u8);
    let assignments = FeatureAssignments::new(z).unwrap();
    let hyper = Hyperparameters::new(200.0, 1.5, 0.5, 1.0).unwrap();
    let data = DMatrix::from_fn(d, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
    let obs = center_observations(&data).unwrap();
    let mut state = ModelState::new(basis, assignments, None, hyper).unwrap();
    println!("|y_1|^2 = {:.3}", obs.point(1).norm_squared());
    println!("mask of point 1: {:?}", state.assignments.point_mask(1));
    for trial in 0..20 {
        let before = state.k_plus();
        let out = appca::ibp::propose_and_accept_births(
            1,
            &mut state,
            &obs,
            appca::ibp::BirthRateConvention::AlphaOverN,
            &mut rng,
        )
        .unwrap();
        match out {
            appca::ibp::BirthOutcome::NoProposal => println!("trial {trial}: no proposal (K={before})"),
            appca::ibp::BirthOutcome::Rejected(p) => {
                println!("trial {trial}: rejected kappa={} (K={before})", p.kappa)
            }
            appca::ibp::BirthOutcome::Accepted(p) => {
                println!("trial {trial}: ACCEPTED kappa={} (K={before})", p.kappa)
            }
        }
    }
}
