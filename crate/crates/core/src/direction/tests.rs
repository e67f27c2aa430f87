use super::*;
use crate::actstore::Condition;

fn dump(condition: Condition, rows: &[Vec<f32>], ids: &[u32], vignette: TokenSpan) -> ActivationDump {
    let n = rows.len();
    ActivationDump {
        case_id: "C1".into(),
        condition,
        model_id: "toy".into(),
        layer: 7,
        token_count: n,
        dim: rows[0].len(),
        residuals: rows.iter().flatten().copied().collect(),
        token_ids: ids.to_vec(),
        vignette_mask: vignette,
        scaffold_mask: condition
            .is_multiple_choice()
            .then(|| TokenSpan::new(vignette.end, n)),
        decision_index: n - 1,
        content_range: TokenSpan::new(0, n),
        content_convention: "chat_user_content".into(),
    }
}

fn identity_sae(d: usize) -> SaeParams<f64> {
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    SaeParams::jump_relu(d, d, eye.clone(), vec![0.0; d], eye, vec![0.0; d], vec![0.0; d]).unwrap()
}

fn pair() -> (ActivationDump, ActivationDump) {
    let shared = vec![vec![1.0, 2.0, 0.5], vec![0.0, 3.0, 1.0]];
    let mut nl_rows = shared.clone();
    nl_rows.push(vec![5.0, 0.0, 2.0]);
    nl_rows.push(vec![4.0, 1.0, 0.0]);
    let nl = dump(Condition::NL, &nl_rows, &[10, 11, 90, 91], TokenSpan::new(0, 2));
    let nf = dump(Condition::NF, &shared, &[10, 11], TokenSpan::new(0, 2));
    (nl, nf)
}

#[test]
fn identical_dumps_give_zero_direction() {
    let (nl, _) = pair();
    let mut twin = nl.clone();
    twin.condition = Condition::NF;
    twin.scaffold_mask = None;
    let sae = identity_sae(3);
    for agg in Aggregation::ALL {
        let d = format_direction(std::slice::from_ref(&nl), std::slice::from_ref(&twin), agg, &sae).unwrap();
        assert!(d.delta.iter().all(|&v| v == 0.0), "{agg:?}");
        assert_eq!(d.n_cases, 1);
    }
}

#[test]
fn scaffold_offset_only_moves_full_mean() {
    let (nl, nf) = pair();
    let sae = identity_sae(3);
    let lc = format_direction(std::slice::from_ref(&nl), std::slice::from_ref(&nf), Aggregation::LengthControlledMean, &sae).unwrap();
    assert!(lc.delta.iter().all(|&v| v == 0.0));
    let full = format_direction(std::slice::from_ref(&nl), std::slice::from_ref(&nf), Aggregation::FullMean, &sae).unwrap();
    // NL mean (10, 6, 3.5)/4 minus NF mean (1, 5, 1.5)/2
    let expected = [2.5 - 0.5, 1.5 - 2.5, 0.875 - 0.75];
    for (g, e) in full.delta.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12);
    }
    let mp = format_direction(std::slice::from_ref(&nl), std::slice::from_ref(&nf), Aggregation::MaxPool, &sae).unwrap();
    assert_eq!(mp.delta, vec![4.0, 0.0, 1.0]);
}

#[test]
fn full_mean_is_antisymmetric() {
    let (nl, nf) = pair();
    let sae = identity_sae(3);
    let ab = format_direction(std::slice::from_ref(&nl), std::slice::from_ref(&nf), Aggregation::FullMean, &sae).unwrap();
    let ba = format_direction(std::slice::from_ref(&nf), std::slice::from_ref(&nl), Aggregation::FullMean, &sae).unwrap();
    for (x, y) in ab.delta.iter().zip(&ba.delta) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn unpaired_cases_error() {
    let (nl, mut nf) = pair();
    nf.case_id = "C2".into();
    let r = format_direction(&[nl], &[nf], Aggregation::FullMean, &identity_sae(3));
    assert!(matches!(r, Err(Error::Missing { .. })));
}

#[test]
fn alignment_percentiles() {
    let sae = identity_sae(2);
    let r = encoder_alignment_ranks(&[1.0, 0.0], &sae, &[0, 1]).unwrap();
    assert_eq!(r[0].percentile, 0.0);
    assert_eq!(r[1].percentile, 0.5);
    assert_eq!(r[1].rank, 2.0);
    assert!(encoder_alignment_ranks(&[0.0, 0.0], &sae, &[0]).is_err());
    assert_eq!(top_aligned(&[0.1, -3.0], &sae, 1).unwrap(), vec![1]);
}

#[test]
fn alignment_is_scale_invariant() {
    let w_enc = vec![1.0, 0.3, -2.0, 0.5, 2.0, 1.0];
    let sae = SaeParams::jump_relu(2, 3, w_enc.clone(), vec![0.0; 3], vec![0.0; 6], vec![0.0; 2], vec![0.0; 3]).unwrap();
    let base = encoder_alignment(&[0.4, -1.1], &sae).unwrap();
    let scaled = encoder_alignment(&[4.0, -11.0], &sae).unwrap();
    for (a, b) in base.iter().zip(&scaled) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut w2 = w_enc;
    w2[1] *= 7.0;
    w2[4] *= 7.0;
    let sae2 = SaeParams::jump_relu(2, 3, w2, vec![0.0; 3], vec![0.0; 6], vec![0.0; 2], vec![0.0; 3]).unwrap();
    let col = encoder_alignment(&[0.4, -1.1], &sae2).unwrap();
    assert!((col[1] - base[1]).abs() < 1e-12);
}

#[test]
fn ablation_hand_product() {
    let sae = identity_sae(3);
    let (nl, _) = pair();
    let r = ablation_deltas(&nl, &sae, &[0]).unwrap();
    assert_eq!(r.delta_norms, vec![1.0, 0.0, 5.0, 4.0]);
    assert_eq!((r.peak_delta, r.peak_token), (5.0, 2));
    assert!((r.mean_delta - 2.5).abs() < 1e-12);
    // token 3 (4, 1, 0) has the largest ratio, not the largest delta
    let expected_peak_ratio = 4.0 / (17.0f64).sqrt();
    assert!((r.peak_token_fraction - expected_peak_ratio).abs() < 1e-12);
    let none = ablation_deltas(&nl, &identity_sae(3), &[]).unwrap();
    assert!(none.delta_norms.iter().all(|&v| v == 0.0));
}

#[test]
fn steering_magnitudes() {
    assert_eq!(steering_perturbation(1012.66, 0.0, 60583.0).unwrap(), 0.0);
    let f = steering_perturbation(1012.66, 4.0, 60583.0).unwrap();
    assert!((f - 0.0669).abs() < 5e-5);
    assert_eq!(steering_perturbation(3.0, 1.0, 3.0).unwrap(), 1.0);
    assert!(steering_perturbation(1.0, 1.0, 0.0).is_err());
}

#[test]
fn vector_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let s = SteeringVector::new(vec![3.0f64, 4.0], 29);
    assert_eq!(s.norm, 5.0);
    let path = save_steering(dir.path(), "steer_L29", &s).unwrap();
    let (desc, data) = load_vector(&path).unwrap();
    assert_eq!(desc.kind, "steering_vector");
    assert_eq!(desc.dim, 2);
    assert_eq!(data, vec![3.0, 4.0]);
    std::fs::write(dir.path().join("steer_L29.fprb"), b"FPRB1{}").unwrap();
    assert!(load_vector(&path).is_err());
}
