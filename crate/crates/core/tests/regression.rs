use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use condshap::bridge::BridgePool;
use condshap::coalition::{binomial, coalitions_of_size, nontrivial_coalitions};
use condshap::model::{FnModel, LinearModel};
use condshap::oracle::{true_shapley_gaussian, OracleConfig};
use condshap::regression::{
    build_augmented_dataset, encode_query, fit_separate, fit_surrogate, surrogate_contribution,
    AugmentationMode, AugmentationPlan, MaskEncoding, RegressorSpec, SeparateEstimator,
    SurrogateEstimator, SurrogateVariant,
};
use condshap::sim::{gen_mvn_data, GamMoreModel, SimConfig, GAM_BETA, GAM_GAMMA};
use condshap::{
    Coalition, ContributionEstimator, Dataset, Error, PredictiveModel, Query, SharedModel,
};

const SIDECAR: &str = env!("CARGO_BIN_EXE_condshap-refsidecar");

fn normal_data(n: usize, m: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    Dataset::from_matrix(x).unwrap()
}

fn linear() -> LinearModel {
    LinearModel::new(1.0, vec![2.0, -1.0, 0.5]).unwrap()
}

/// `v(S)` for linear f with independent zero-mean features.
fn linear_v(f: &LinearModel, x: &[f64], s: Coalition) -> f64 {
    f.intercept + s.members().map(|j| f.coefs[j] * x[j]).sum::<f64>()
}

#[test]
fn augmented_ols_surrogate_tracks_analytic_values() {
    let f = linear();
    let model: SharedModel = Arc::new(f.clone());
    let train = normal_data(10_000, 3, 1);
    let queries: Vec<Query> = [[0.5, -1.0, 1.5], [-2.0, 0.3, 0.0], [1.0, 1.0, -1.0]]
        .iter()
        .enumerate()
        .map(|(i, x)| Query::new(i, x.to_vec()))
        .collect();
    // Per-size indicators sum to a constant, so that variant needs a ridge penalty.
    let ridge = RegressorSpec::RidgeBasis {
        lambda: 1e-6,
        degree: 1,
    };
    for (variant, spec) in [
        (SurrogateVariant::Augmented, RegressorSpec::Ols),
        (SurrogateVariant::AugmentedCoalition, ridge),
    ] {
        let mut est = SurrogateEstimator::new(variant, spec);
        if variant == SurrogateVariant::AugmentedCoalition {
            est.plan.mode = AugmentationMode::PerCoalitionSize;
        }
        let prepared = est
            .prepare(&train, &model)
            .unwrap_or_else(|e| panic!("{variant:?}: {e}"));
        for q in &queries {
            for c in nontrivial_coalitions(3).unwrap() {
                let got = prepared.contribute(q, c).unwrap();
                let want = linear_v(&f, &q.instance, c);
                assert!((got - want).abs() < 0.1, "{variant:?} {c}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn constant_targets_give_constant_contributions() {
    let model: SharedModel = Arc::new(FnModel::new(3, "const", |_: &[f64]| 4.25));
    let train = normal_data(200, 3, 2);
    let q = Query::new(0, vec![0.3, -0.7, 2.0]);
    let estimators: Vec<Box<dyn ContributionEstimator>> = vec![
        Box::new(SeparateEstimator::new(RegressorSpec::Ols)),
        Box::new(SeparateEstimator::new(RegressorSpec::ridge_basis())),
        Box::new(SeparateEstimator::new(RegressorSpec::Knn { k: 7 })),
        Box::new(SurrogateEstimator::new(
            SurrogateVariant::Augmented,
            RegressorSpec::Ols,
        )),
        Box::new(SurrogateEstimator::new(
            SurrogateVariant::AugmentedCoalition,
            RegressorSpec::Knn { k: 3 },
        )),
    ];
    for est in estimators {
        let p = est.prepare(&train, &model).unwrap();
        for c in nontrivial_coalitions(3).unwrap() {
            let v = p.contribute(&q, c).unwrap();
            assert!((v - 4.25).abs() < 1e-9, "{}: {c} gave {v}", est.label());
        }
    }
}

#[test]
fn separate_set_has_one_model_per_coalition() {
    let train = normal_data(100, 3, 3);
    let y = linear().predict(train.rows()).unwrap();
    let set = fit_separate(
        &RegressorSpec::Ols,
        &train,
        &y,
        &nontrivial_coalitions(3).unwrap(),
    )
    .unwrap();
    assert_eq!(set.len(), 6);
}

#[test]
fn ols_separate_held_out_loss_near_minimum() {
    let f = linear();
    let train = normal_data(10_000, 3, 4);
    let test = normal_data(10_000, 3, 5);
    let y = f.predict(train.rows()).unwrap();
    let y_test = f.predict(test.rows()).unwrap();
    let coalitions = nontrivial_coalitions(3).unwrap();
    let set = fit_separate(&RegressorSpec::Ols, &train, &y, &coalitions).unwrap();
    for c in coalitions {
        let cols: Vec<usize> = c.members().collect();
        let pred = set
            .get(c)
            .unwrap()
            .predict(&test.rows().select_columns(&cols))
            .unwrap();
        let (mut fitted, mut best) = (0.0, 0.0);
        for i in 0..test.n_rows() {
            fitted += (y_test[i] - pred[i]).powi(2);
            best += (y_test[i] - linear_v(&f, &test.row(i), c)).powi(2);
        }
        assert!(fitted <= 1.01 * best, "{c}: {fitted} vs minimum {best}");
    }
}

#[test]
fn per_size_row_counts_and_handles() {
    let m = 4;
    let train = normal_data(30, m, 6);
    let y = vec![1.0; 30];
    let plan = AugmentationPlan {
        budget: 600,
        mode: AugmentationMode::PerCoalitionSize,
        mask_encoding: MaskEncoding::ZeroPlusIndicator,
    };
    let mut handles = Vec::new();
    for s in 1..m {
        let scope = coalitions_of_size(m, s).unwrap();
        let rows = build_augmented_dataset(train.rows(), &y, &plan, &scope, 9).unwrap();
        let l = plan.rows_per_coalition(m, s).unwrap();
        assert_eq!(rows.len() as u64, binomial(m, s) * l as u64);
        assert!(rows
            .iter()
            .all(|r| r.indicators.iter().filter(|&&b| b == 0).count() == s));
        let spec = RegressorSpec::RidgeBasis {
            lambda: 1e-3,
            degree: 1,
        };
        handles.push(fit_surrogate(&spec, &rows, MaskEncoding::ZeroPlusIndicator).unwrap());
    }
    assert_eq!(handles.len(), m - 1);

    let per = AugmentationPlan {
        mode: AugmentationMode::PerCoalition,
        ..plan
    };
    let rows = build_augmented_dataset(
        train.rows(),
        &y,
        &per,
        &nontrivial_coalitions(m).unwrap(),
        9,
    )
    .unwrap();
    assert_eq!(rows.len(), 14 * per.rows_per_coalition(m, 1).unwrap());
    let q = Query::new(0, train.row(0));
    let v = surrogate_contribution(
        &handles[1],
        &q,
        Coalition::from_mask(0b0101),
        MaskEncoding::ZeroPlusIndicator,
    )
    .unwrap();
    assert!((v - 1.0).abs() < 1e-9);
    assert!(surrogate_contribution(
        &handles[1],
        &q,
        Coalition::from_mask(1),
        MaskEncoding::MissingToken
    )
    .is_err());
}

#[test]
fn augmentation_is_independent_of_scope_order() {
    let train = normal_data(40, 3, 7);
    let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let plan = AugmentationPlan {
        budget: 60,
        ..AugmentationPlan::default()
    };
    let mut scope = nontrivial_coalitions(3).unwrap();
    let a = build_augmented_dataset(train.rows(), &y, &plan, &scope, 3).unwrap();
    scope.reverse();
    let b = build_augmented_dataset(train.rows(), &y, &plan, &scope, 3).unwrap();
    let l = plan.rows_per_coalition(3, 1).unwrap();
    for (i, chunk) in a.chunks(l).enumerate() {
        assert_eq!(chunk, &b[(5 - i) * l..(6 - i) * l]);
    }
}

#[test]
fn direct_surrogate_sends_missing_tokens_to_the_bridge() {
    let row = encode_query(
        &[1.0, 2.0, 3.0],
        Coalition::from_mask(0b010),
        MaskEncoding::MissingToken,
    );
    assert_eq!(row.len(), 3);
    assert!(row[0].is_nan() && row[2].is_nan() && row[1] == 2.0);

    let pool = Arc::new(BridgePool::spawn_exact(SIDECAR, 1, Default::default()).unwrap());
    let spec = RegressorSpec::Bridge {
        backend: "knn-missing-ref".into(),
        ensemble_size: 1,
        pool,
    };
    let model: SharedModel = Arc::new(linear());
    let train = normal_data(500, 3, 8);
    let est = SurrogateEstimator::new(SurrogateVariant::Direct, spec);
    assert_eq!(est.plan.mask_encoding, MaskEncoding::MissingToken);
    let p = est.prepare(&train, &model).unwrap();
    let q = Query::new(0, vec![0.2, -0.4, 0.9]);
    for c in nontrivial_coalitions(3).unwrap() {
        assert!(p.contribute(&q, c).unwrap().is_finite());
    }
    // Knowing x1 alone moves the estimate in the direction of its coefficient.
    let hi = p
        .contribute(&Query::new(1, vec![2.0, 0.0, 0.0]), Coalition::from_mask(1))
        .unwrap();
    let lo = p
        .contribute(
            &Query::new(2, vec![-2.0, 0.0, 0.0]),
            Coalition::from_mask(1),
        )
        .unwrap();
    assert!(hi > lo + 2.0, "{hi} vs {lo}");
}

#[test]
fn direct_surrogate_rejects_in_core_regressors() {
    let model: SharedModel = Arc::new(linear());
    let train = normal_data(50, 3, 9);
    let est = SurrogateEstimator::new(SurrogateVariant::Direct, RegressorSpec::Ols);
    assert!(matches!(
        est.prepare(&train, &model).err(),
        Some(Error::Config(_))
    ));
}

#[test]
fn ridge_basis_separate_improves_with_more_data() {
    let m = GAM_BETA.len() - 1;
    let model: SharedModel =
        Arc::new(GamMoreModel::new(GAM_BETA.to_vec(), GAM_GAMMA.to_vec()).unwrap());
    let base = SimConfig {
        rho: 0.3,
        n_train: 1000,
        n_test: 5,
        seed: 12,
        ..SimConfig::default()
    };
    let data = gen_mvn_data(&base).unwrap();
    let queries = Query::from_dataset(&data.test);
    let oracle_cfg = OracleConfig {
        samples: 20_000,
        max_doublings: 0,
        ..OracleConfig::default()
    };
    let truth =
        true_shapley_gaussian(model.as_ref(), &queries, &data.distribution, &oracle_cfg).unwrap();
    let coalitions = nontrivial_coalitions(m).unwrap();
    let mae_for = |n: usize| {
        let train = data.train.slice_rows(0, n).unwrap();
        let p = SeparateEstimator::new(RegressorSpec::ridge_basis())
            .prepare(&train, &model)
            .unwrap();
        let v = p.contribute_batch(&queries, &coalitions).unwrap();
        let mut total = 0.0;
        for (row, t) in v.iter().zip(&truth) {
            for (&c, est) in coalitions.iter().zip(row) {
                total += (est - t.table.get(c).unwrap()).abs();
            }
        }
        total / (coalitions.len() * queries.len()) as f64
    };
    let (small, large) = (mae_for(100), mae_for(1000));
    assert!(large < small, "N=100: {small}, N=1000: {large}");
}

proptest! {
    #[test]
    fn indicators_mark_the_complement(
        m in 1usize..10,
        raw in any::<u32>(),
        values in proptest::collection::vec(-5.0f64..5.0, 10),
    ) {
        let mask = raw & ((1 << m) - 1);
        let c = Coalition::from_mask(mask);
        let x = &values[..m];
        let zero = encode_query(x, c, MaskEncoding::ZeroPlusIndicator);
        prop_assert_eq!(zero.len(), 2 * m);
        for j in 0..m {
            let masked = mask & (1 << j) == 0;
            prop_assert_eq!(zero[m + j], if masked { 1.0 } else { 0.0 });
            prop_assert_eq!(zero[j], if masked { 0.0 } else { x[j] });
        }
        let nan = encode_query(x, c, MaskEncoding::MissingToken);
        prop_assert_eq!(nan.len(), m);
        for j in 0..m {
            prop_assert_eq!(nan[j].is_nan(), mask & (1 << j) == 0);
        }
    }
}
