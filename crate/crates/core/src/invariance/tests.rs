use super::*;
use crate::actstore::Condition;
use crate::sae::SparseActivations;

fn pv(values: &[f64]) -> PooledVector<f64> {
    PooledVector {
        ids: (0..values.len() as u32).collect(),
        values: values.to_vec(),
        mode: PoolMode::Max,
        mask: TokenSpan::new(0, 1),
    }
}

fn enc(rows: &[&[(u32, f64)]], d_sae: usize) -> EncodedDump<f64> {
    EncodedDump {
        tokens: rows.iter().map(|r| SparseActivations::from_pairs(r.to_vec())).collect(),
        d_sae,
    }
}

#[test]
fn smape_examples() {
    assert_eq!(smape(&pv(&[0.5, 2.0]), &pv(&[0.5, 2.0])).unwrap(), 0.0);
    assert_eq!(smape(&pv(&[1.0]), &pv(&[0.0])).unwrap(), 2.0);
    let v = smape(&pv(&[2.0, 0.0]), &pv(&[1.0, 0.0])).unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
    let mut other = pv(&[1.0, 0.0]);
    other.ids = vec![0, 7];
    assert!(smape(&pv(&[1.0, 0.0]), &other).is_err());
}

#[test]
fn cosine_examples() {
    assert!((cosine(&pv(&[3.0, 4.0]), &pv(&[3.0, 4.0])).unwrap().unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), Some(0.0));
    assert_eq!(cosine(&pv(&[0.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), None);
}

#[test]
fn pooling_matches_enumeration() {
    let e = enc(&[&[(0, 1.0), (2, 0.5)], &[(0, 3.0)], &[(1, 2.0), (2, 4.0)]], 4);
    let all = TokenSpan::new(0, 3);
    let max = pool_encoded(&e, &[0, 1, 2, 3], PoolMode::Max, all).unwrap();
    assert_eq!(max.values, vec![3.0, 2.0, 4.0, 0.0]);
    let mean = pool_encoded(&e, &[0, 2], PoolMode::Mean, all).unwrap();
    assert_eq!(mean.values, vec![4.0 / 3.0, 1.5]);
    let single = pool_encoded(&e, &[0, 2], PoolMode::Max, TokenSpan::new(0, 1)).unwrap();
    assert_eq!(single.values, vec![1.0, 0.5]);
    assert!(pool_encoded(&e, &[0], PoolMode::Max, TokenSpan::new(1, 1)).is_err());
    assert!(pool_encoded(&e, &[0], PoolMode::Max, TokenSpan::new(0, 4)).is_err());
    assert!(pool_encoded(&e, &[9], PoolMode::Max, all).is_err());
}

#[test]
fn delta_examples() {
    let same = delta_medical_random((&pv(&[1.0]), &pv(&[1.0])), (&pv(&[1.0]), &pv(&[1.0]))).unwrap();
    assert_eq!((same.d_smape, same.d_cos), (0.0, Some(0.0)));
    let random_b = pv(&[1.0, 1.0]);
    let random_a = pv(&[1.0, 1.0 * (1.0 + 0.6 / 1.7)]);
    let d = delta_medical_random((&pv(&[2.0]), &pv(&[2.0])), (&random_a, &random_b)).unwrap();
    assert!(d.d_smape < 0.0);
    let undefined =
        delta_medical_random((&pv(&[0.0]), &pv(&[1.0])), (&pv(&[1.0]), &pv(&[1.0]))).unwrap();
    assert_eq!(undefined.d_cos, None);
    let mut mean = pv(&[1.0]);
    mean.mode = PoolMode::Mean;
    assert!(delta_medical_random((&mean, &mean), (&pv(&[1.0]), &pv(&[1.0]))).is_err());
}

#[test]
fn stratum_rows_track_n_cos() {
    let mut deltas = BTreeMap::new();
    let mut strata = BTreeMap::new();
    for (i, dc) in [Some(0.1), None, Some(0.3)].into_iter().enumerate() {
        let id = format!("c{i}");
        deltas.insert(
            id.clone(),
            CaseDelta {
                smape_medical: 0.0,
                smape_random: 0.2,
                d_smape: -0.2,
                cos_medical: dc,
                cos_random: dc.map(|_| 0.0),
                d_cos: dc,
            },
        );
        strata.insert(id, StratumLabel::BothRight);
    }
    let rows = stratum_table(&deltas, &strata, 200, 3).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].stratum, "all");
    assert_eq!((rows[1].n, rows[1].n_cos), (3, 2));
    assert_eq!(rows[1].d_smape.lower, -0.2);
    assert!((rows[1].d_cos.unwrap().point - 0.2).abs() < 1e-12);
    strata.clear();
    assert!(matches!(stratum_table(&deltas, &strata, 10, 0), Err(Error::Missing { .. })));
}

fn toy_dump(condition: Condition, rows: &[[f32; 2]], vignette: TokenSpan, scaffold: Option<TokenSpan>) -> ActivationDump {
    let n = rows.len();
    ActivationDump {
        case_id: "T1".into(),
        condition,
        model_id: "toy".into(),
        layer: 0,
        token_count: n,
        dim: 2,
        residuals: rows.iter().flatten().copied().collect(),
        token_ids: (0..n as u32).collect(),
        vignette_mask: vignette,
        scaffold_mask: scaffold,
        decision_index: n - 1,
        content_range: TokenSpan::new(0, n),
        content_convention: "chat_user_content".into(),
    }
}

fn identity_sae() -> SaeParams<f64> {
    SaeParams::jump_relu(
        2,
        2,
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0; 2],
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0; 2],
        vec![0.0; 2],
    )
    .unwrap()
}

#[test]
fn masks_separate_vignette_from_scaffold() {
    let sae = identity_sae();
    let vig = TokenSpan::new(0, 2);
    let nl = toy_dump(Condition::NL, &[[1.0, 2.0], [3.0, 0.5], [9.0, 9.0]], vig, Some(TokenSpan::new(2, 3)));
    let nf = toy_dump(Condition::NF, &[[1.0, 2.0], [3.0, 0.5], [0.2, 0.1]], vig, None);
    let pair = EncodedPair::new(&nl, &nf, &sae).unwrap();
    let rows = mask_decomposition(&[pair], &[0], &[1], PoolMode::Max).unwrap();
    assert_eq!(rows[0].mask, MaskKind::Vignette);
    assert_eq!((rows[0].medical, rows[0].random), (Some(0.0), Some(0.0)));
    assert!(rows[1].medical.unwrap() > 0.0);
    assert_eq!(rows[2].medical, None);

    let nl_enc = encode_dump(&nl, &sae).unwrap();
    let nf_enc = encode_dump(&nf, &sae).unwrap();
    let loc = peak_location_fraction(&[(&nl, &nl_enc), (&nf, &nf_enc)], &[0, 1], MaskKind::Vignette).unwrap();
    // NL peaks sit on the scaffold token, NF peaks inside the vignette
    assert_eq!((loc.inside, loc.total), (2, 4));
    let pooled = pool(&nl, &sae, &[0, 1], PoolMode::Max, vig).unwrap();
    assert_eq!(pooled.values, vec![3.0, 2.0]);
}

#[test]
fn never_firing_feature_is_excluded() {
    let e = enc(&[&[(0, 1.0)], &[]], 2);
    let d = toy_dump(Condition::NF, &[[0.0, 0.0], [0.0, 0.0]], TokenSpan::new(0, 1), None);
    let loc = peak_location_fraction(&[(&d, &e)], &[0, 1], MaskKind::Vignette).unwrap();
    assert_eq!((loc.inside, loc.total, loc.fraction), (1, 1, Some(1.0)));
}

#[test]
fn feature_terms_average_cases() {
    let terms = feature_smape_terms(&[pv(&[2.0, 1.0]), pv(&[1.0, 1.0])], &[pv(&[1.0, 1.0]), pv(&[1.0, 0.0])]).unwrap();
    assert!((terms[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((terms[1] - 1.0).abs() < 1e-12);
}
