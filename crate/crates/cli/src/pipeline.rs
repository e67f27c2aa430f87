//! Analysis stages. Each returns one or more reports; none writes outside
//! the output directory.

use std::collections::BTreeMap;
use std::path::Path;

use formatprobe::actstore::{ActivationDump, Condition};
use formatprobe::attribution::{category_attribution, decision_comparison, CategoryMap, FeatureCategory, UnembeddingFile};
use formatprobe::behavior::{
    accuracy_by_gold, cohen_kappa, gap_decompose, judge_accuracies, paired_mcnemar, rescore_five_way, score_condition,
    shuffle_analysis, stratify, triage_error_direction, Letter,
};
use formatprobe::direction::{
    ablation_deltas, encoder_alignment_ranks, format_direction, pair_by_case, save_direction, save_steering,
    steering_perturbation, top_aligned, Aggregation, SteeringVector, STEERING_ALPHAS,
};
use formatprobe::features::{identify_features, FeatureSelection, SelectionParams};
use formatprobe::harness::shuffle_records;
use formatprobe::invariance::{
    delta_medical_random, feature_smape_terms, mask_decomposition, peak_location_fraction, pool_encoded,
    resample_permutation_p, stratum_row, stratum_table, CaseDelta, EncodedPair, MaskKind,
};
use formatprobe::probes::{build_flip_labels, correctness, train_loocv, ProbeConfig, ProbeDataset};
use formatprobe::report::{
    attribution_table, five_way_table, gap_table, mask_table, num, opt_num, opt_pct, pct, probe_table, shuffle_table,
    stratum_table as render_strata, Column, Table,
};
use formatprobe::sae::SaeParams;
use formatprobe::{Error, Result, Scalar};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::Precision;
use crate::context::{by_case, mean_defined, to_value, Context, Report};

/// Stage names in bundle order.
pub const STAGES: [&str; 7] = [
    "identify-features",
    "invariance",
    "direction",
    "attribute",
    "behavior",
    "shuffle",
    "probe",
];

pub fn run_stage(ctx: &Context, stage: &str) -> Result<Vec<Report>> {
    match stage {
        "identify-features" => per_layer(ctx, |c, l| dispatch(c, l, Stage::Select)),
        "invariance" => per_layer(ctx, |c, l| dispatch(c, l, Stage::Invariance)),
        "direction" => per_layer(ctx, |c, l| dispatch(c, l, Stage::Direction)),
        "attribute" => per_layer(ctx, |c, l| dispatch(c, l, Stage::Attribute)),
        "behavior" => behavior(ctx).map(|r| vec![r]),
        "shuffle" => shuffle(ctx).map(|r| vec![r]),
        "probe" => probe(ctx).map(|r| vec![r]),
        other => Err(Error::Internal(format!("unknown stage {other}"))),
    }
}

/// Whether the config names every input `stage` needs.
pub fn stage_inputs_present(ctx: &Context, stage: &str) -> bool {
    let c = &ctx.cfg;
    let dumps = c.manifest.is_some() && !c.sae.is_empty();
    let selection = c.layers().iter().all(|l| c.selection.contains_key(l))
        || (c.contrast_medical.is_some() && c.contrast_non.is_some());
    match stage {
        "identify-features" => dumps && selection,
        "invariance" | "direction" => dumps && selection,
        "attribute" => dumps && selection && c.unembedding.is_some() && ctx.has_outcomes(),
        "behavior" => ctx.has_outcomes(),
        "shuffle" => ctx.has_outcomes() && c.predictions.is_some(),
        "probe" => c.manifest.is_some() && ctx.has_outcomes(),
        _ => false,
    }
}

fn per_layer(ctx: &Context, f: impl Fn(&Context, u32) -> Result<Report>) -> Result<Vec<Report>> {
    let layers = ctx.cfg.layers();
    if layers.is_empty() {
        return Err(Error::Invariant("config names no layers (no SAE configured)".into()));
    }
    layers.into_iter().map(|l| f(ctx, l)).collect()
}

#[derive(Clone, Copy)]
enum Stage {
    Select,
    Invariance,
    Direction,
    Attribute,
}

fn dispatch(ctx: &Context, layer: u32, stage: Stage) -> Result<Report> {
    match ctx.cfg.precision {
        Precision::F32 => layer_stage::<f32>(ctx, layer, stage),
        Precision::F64 => layer_stage::<f64>(ctx, layer, stage),
    }
}

/// NL and NF dumps of one layer plus the layer's SAE and feature selection.
struct LayerInputs<T> {
    layer: u32,
    sae: SaeParams<T>,
    nl: Vec<ActivationDump>,
    nf: Vec<ActivationDump>,
    selection: FeatureSelection,
}

impl<T: Scalar> LayerInputs<T> {
    fn load(ctx: &Context, layer: u32) -> Result<Self> {
        let sae = ctx.sae::<T>(layer)?;
        let nl = ctx.dumps(Condition::NL, layer)?;
        let nf = ctx.dumps(Condition::NF, layer)?;
        let selection = selection(ctx, layer, &sae, &nl, &nf)?;
        Ok(LayerInputs {
            layer,
            sae,
            nl,
            nf,
            selection,
        })
    }

    /// The random control, truncated to the medical subset's size.
    fn matched_random(&self) -> &[u32] {
        let n = self.selection.medical.len().min(self.selection.random_sample.len());
        &self.selection.random_sample[..n]
    }
}

fn selection<T: Scalar>(
    ctx: &Context,
    layer: u32,
    sae: &SaeParams<T>,
    nl: &[ActivationDump],
    nf: &[ActivationDump],
) -> Result<FeatureSelection> {
    if let Some(p) = ctx.cfg.selection.get(&layer) {
        let path = ctx.cfg.resolve(p);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let sel: FeatureSelection = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("selection {}: {e}", path.display())))?;
        if sel.layer != layer {
            return Err(Error::Invariant(format!(
                "selection {} is for layer {}, not {layer}",
                path.display(),
                sel.layer
            )));
        }
        sel.validate()?;
        return Ok(sel);
    }
    let med = ctx.contrast(&ctx.cfg.contrast_medical, "contrast_medical", layer)?;
    let non = ctx.contrast(&ctx.cfg.contrast_non, "contrast_non", layer)?;
    let corpus: Vec<ActivationDump> = nl.iter().chain(nf).cloned().collect();
    let params = SelectionParams {
        k: ctx.cfg.k,
        n_random: ctx.cfg.n_random,
        seed: ctx.cfg.seeds.selection,
        ..SelectionParams::default()
    };
    identify_features(&med, &non, &corpus, sae, &params)
}

fn layer_stage<T: Scalar>(ctx: &Context, layer: u32, stage: Stage) -> Result<Report> {
    let inputs = LayerInputs::<T>::load(ctx, layer)?;
    match stage {
        Stage::Select => Ok(select_report(ctx, &inputs.selection)),
        Stage::Invariance => invariance(ctx, &inputs),
        Stage::Direction => direction(ctx, &inputs),
        Stage::Attribute => attribute(ctx, &inputs),
    }
}

fn ids(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn select_report(ctx: &Context, sel: &FeatureSelection) -> Report {
    let mut t = Table::new(
        format!("Medical features, layer {}", sel.layer),
        vec![
            Column::right("feature", 7),
            Column::right("score", 8),
            Column::right("med rate", 8),
            Column::right("non rate", 8),
        ],
    );
    for s in &sel.medical_scores {
        t.push(vec![
            s.feature.to_string(),
            num(s.score, 3),
            pct(s.med_fire_rate, 0),
            pct(s.non_fire_rate, 0),
        ]);
    }
    let mut text = t.render();
    text.push_str(&format!(
        "\nmagnitude band [{}, {}]\nrandom pool {} features, restricted {}\nrandom control: {}\n",
        num(sel.band.0, 3),
        num(sel.band.1, 3),
        sel.random_pool.len(),
        sel.restricted_pool.len(),
        ids(&sel.random_sample)
    ));
    for w in &sel.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    ctx.report(
        "identify-features",
        format!("selection_L{}", sel.layer),
        json!({ "selection": to_value(sel) }),
        text,
    )
}

fn invariance<T: Scalar>(ctx: &Context, inp: &LayerInputs<T>) -> Result<Report> {
    let medical = &inp.selection.medical;
    let random = inp.matched_random();
    let mode = ctx.cfg.pool_mode;
    let b = ctx.cfg.bootstrap;
    let pairs = pair_by_case(&inp.nl, &inp.nf)?;
    let encoded: Vec<EncodedPair<'_, T>> = pairs
        .par_iter()
        .map(|&(nl, nf)| EncodedPair::new(nl, nf, &inp.sae))
        .collect::<Result<_>>()?;

    let mut deltas: BTreeMap<String, CaseDelta> = BTreeMap::new();
    for p in &encoded {
        let pool = |subset: &[u32]| -> Result<_> {
            Ok((
                pool_encoded(&p.nl_enc, subset, mode, p.nl.content_range)?,
                pool_encoded(&p.nf_enc, subset, mode, p.nf.content_range)?,
            ))
        };
        let (m_nl, m_nf) = pool(medical)?;
        let (r_nl, r_nf) = pool(random)?;
        deltas.insert(p.nl.case_id.clone(), delta_medical_random((&m_nl, &m_nf), (&r_nl, &r_nf))?);
    }

    let rows = if ctx.has_outcomes() {
        let strata = stratify(ctx.outcomes()?)?;
        stratum_table(&deltas, &strata, b, ctx.cfg.seeds.bootstrap)?
    } else {
        let all: Vec<&CaseDelta> = deltas.values().collect();
        vec![stratum_row("all", &all, b, ctx.cfg.seeds.bootstrap)?]
    };
    let masks = mask_decomposition(&encoded, medical, random, mode)?;

    // corpus-mean sMAPE terms per feature, for the resampling test
    let terms = |subset: &[u32]| -> Result<Vec<f64>> {
        let mut a = Vec::with_capacity(encoded.len());
        let mut z = Vec::with_capacity(encoded.len());
        for p in &encoded {
            a.push(pool_encoded(&p.nl_enc, subset, mode, p.nl.content_range)?);
            z.push(pool_encoded(&p.nf_enc, subset, mode, p.nf.content_range)?);
        }
        feature_smape_terms(&a, &z)
    };
    let med_terms = terms(medical)?;
    let medical_mean = med_terms.iter().sum::<f64>() / med_terms.len() as f64;
    let mut resample = serde_json::Map::new();
    let mut resample_lines = Vec::new();
    for (name, pool) in [
        ("full_pool", &inp.selection.random_pool),
        ("restricted_pool", &inp.selection.restricted_pool),
    ] {
        if pool.len() < medical.len() {
            resample.insert(name.into(), Value::Null);
            resample_lines.push(format!("{name}: n/a ({} features)", pool.len()));
            continue;
        }
        let r = resample_permutation_p(
            medical_mean,
            &terms(pool)?,
            medical.len(),
            ctx.cfg.resample_draws,
            ctx.cfg.seeds.resample,
        )?;
        resample_lines.push(format!("{name}: p = {} ({} features)", r.display(), pool.len()));
        resample.insert(name.into(), to_value(&r));
    }

    let nl_pairs: Vec<_> = encoded.iter().map(|p| (p.nl, &p.nl_enc)).collect();
    let peak_med = peak_location_fraction(&nl_pairs, medical, MaskKind::Vignette)?;
    let peak_rnd = peak_location_fraction(&nl_pairs, random, MaskKind::Vignette)?;

    let mut cases = Table::new(
        "Per-case sMAPE (NL vs NF)",
        vec![
            Column::left("case", 12),
            Column::right("medical", 8),
            Column::right("random", 8),
            Column::right("dsMAPE", 8),
            Column::right("dcos", 8),
        ],
    );
    for (case, d) in &deltas {
        cases.push(vec![
            case.clone(),
            num(d.smape_medical, 3),
            num(d.smape_random, 3),
            num(d.d_smape, 3),
            opt_num(d.d_cos, 3),
        ]);
    }
    let layer = inp.layer;
    let mut text = render_strata(&format!("Medical minus random, layer {layer}"), &rows).render();
    text.push('\n');
    text.push_str(&mask_table("Mask decomposition", &masks).render());
    text.push('\n');
    text.push_str(&format!("Resampling test, medical mean sMAPE {}\n", num(medical_mean, 3)));
    for l in &resample_lines {
        text.push_str(l);
        text.push('\n');
    }
    text.push_str(&format!(
        "\nNL peaks inside the vignette: medical {} ({}/{}), random {} ({}/{})\n\n",
        opt_pct(peak_med.fraction, 1),
        peak_med.inside,
        peak_med.total,
        opt_pct(peak_rnd.fraction, 1),
        peak_rnd.inside,
        peak_rnd.total
    ));
    text.push_str(&cases.render());
    Ok(ctx.report(
        "invariance",
        format!("invariance_L{layer}"),
        json!({
            "layer": layer,
            "pool_mode": mode,
            "medical": medical,
            "random": random,
            "strata": rows,
            "masks": masks,
            "resample": { "medical_mean": medical_mean, "tests": resample },
            "peak_location": { "medical": peak_med, "random": peak_rnd },
            "cases": deltas,
        }),
        text,
    ))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn direction<T: Scalar>(ctx: &Context, inp: &LayerInputs<T>) -> Result<Report> {
    let layer = inp.layer;
    let medical = &inp.selection.medical;
    let random = inp.matched_random();
    let vec_dir = ctx.cfg.output_dir().join("vectors").join(format!("L{layer}"));
    std::fs::create_dir_all(&vec_dir).map_err(|e| Error::Io {
        path: vec_dir.clone(),
        source: e,
    })?;

    let mut dirs = Vec::new();
    let mut agg_table = Table::new(
        format!("Format directions, layer {layer}"),
        vec![
            Column::left("aggregation", 22),
            Column::right("cases", 5),
            Column::right("norm", 9),
            Column::right("med pct", 8),
        ],
    );
    let mut agg_json = serde_json::Map::new();
    for agg in Aggregation::ALL {
        let d = format_direction(&inp.nl, &inp.nf, agg, &inp.sae)?;
        let ranks = encoder_alignment_ranks(&d.delta, &inp.sae, medical)?;
        let mean_pct = mean(ranks.iter().map(|r| r.percentile));
        let file = save_direction(&vec_dir, &format!("direction_{}", agg.as_str()), &d)?;
        agg_table.push(vec![
            agg.as_str().into(),
            d.n_cases.to_string(),
            num(d.norm().to_f64_lossy(), 4),
            pct(mean_pct, 1),
        ]);
        agg_json.insert(
            agg.as_str().into(),
            json!({
                "n_cases": d.n_cases,
                "norm": d.norm().to_f64_lossy(),
                "medical_alignment": ranks,
                "mean_medical_percentile": mean_pct,
                "descriptor": relative(&ctx.cfg.output_dir(), &file),
            }),
        );
        dirs.push(d);
    }

    let ablations = |subset: &[u32]| -> Result<Vec<_>> {
        inp.nl.iter().map(|d| ablation_deltas(d, &inp.sae, subset)).collect()
    };
    let abl_med = ablations(medical)?;
    let abl_rnd = ablations(random)?;
    let mut abl_table = Table::new(
        "Ablation magnitude on NL prompts (fraction of residual norm)",
        vec![
            Column::left("subset", 8),
            Column::right("mean", 8),
            Column::right("peak", 8),
            Column::right("mean tok", 8),
            Column::right("peak tok", 8),
        ],
    );
    let mut abl_json = serde_json::Map::new();
    for (name, reps) in [("medical", &abl_med), ("random", &abl_rnd)] {
        let m = json!({
            "mean_fraction": mean(reps.iter().map(|r| r.mean_fraction)),
            "peak_fraction": mean(reps.iter().map(|r| r.peak_fraction)),
            "mean_token_fraction": mean(reps.iter().map(|r| r.mean_token_fraction)),
            "peak_token_fraction": mean(reps.iter().map(|r| r.peak_token_fraction)),
            "cases": reps.iter().map(|r| json!({
                "case_id": r.case_id,
                "mean_fraction": r.mean_fraction,
                "peak_fraction": r.peak_fraction,
                "peak_token": r.peak_token,
            })).collect::<Vec<_>>(),
        });
        let f = |k: &str| pct(m[k].as_f64().unwrap_or(f64::NAN), 2);
        abl_table.push(vec![
            name.into(),
            f("mean_fraction"),
            f("peak_fraction"),
            f("mean_token_fraction"),
            f("peak_token_fraction"),
        ]);
        abl_json.insert(name.into(), m);
    }

    let full = dirs
        .iter()
        .find(|d| d.aggregation == Aggregation::FullMean)
        .expect("full_mean is always computed");
    let steer = SteeringVector::from_direction(full);
    let steer_file = save_steering(&vec_dir, "steering", &steer)?;
    let residual = mean(abl_med.iter().map(|r| r.mean_residual));
    let v_norm = steer.norm.to_f64_lossy();
    let mut steer_table = Table::new(
        format!("Steering magnitude (|v| = {}, mean |r| = {})", num(v_norm, 4), num(residual, 4)),
        vec![Column::right("alpha", 5), Column::right("|a v|/|r|", 10)],
    );
    let mut steer_rows = Vec::new();
    for alpha in STEERING_ALPHAS {
        let p = steering_perturbation(v_norm, alpha, residual)?;
        steer_table.push(vec![num(alpha, 1), pct(p, 2)]);
        steer_rows.push(json!({ "alpha": alpha, "perturbation": p }));
    }

    let text = [agg_table.render(), abl_table.render(), steer_table.render()].join("\n");
    Ok(ctx.report(
        "direction",
        format!("direction_L{layer}"),
        json!({
            "layer": layer,
            "medical": medical,
            "random": random,
            "aggregations": agg_json,
            "ablation": abl_json,
            "steering": {
                "norm": v_norm,
                "mean_residual_norm": residual,
                "alphas": steer_rows,
                "descriptor": relative(&ctx.cfg.output_dir(), &steer_file),
            },
        }),
        text,
    ))
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn attribute<T: Scalar>(ctx: &Context, inp: &LayerInputs<T>) -> Result<Report> {
    let layer = inp.layer;
    let medical = &inp.selection.medical;
    let unembed = UnembeddingFile::load(&ctx.cfg.require(&ctx.cfg.unembedding, "unembedding")?)?.to_unembedding::<T>()?;
    let full = format_direction(&inp.nl, &inp.nf, Aggregation::FullMean, &inp.sae)?;
    let scaffold = top_aligned(&full.delta, &inp.sae, ctx.cfg.scaffold_features)?;
    let cats = CategoryMap::build(medical, &scaffold);
    let outcomes: BTreeMap<&str, _> = ctx.outcomes()?.iter().map(|o| (o.case_id.as_str(), o)).collect();
    let nf_by_case = by_case(&inp.nf);

    let mut attributions = Vec::new();
    let mut comparisons = Vec::new();
    let mut abstained = Vec::new();
    for nl in &inp.nl {
        let o = outcomes
            .get(nl.case_id.as_str())
            .ok_or_else(|| Error::Missing {
                case_id: nl.case_id.clone(),
                what: "no outcome for NL dump".into(),
            })?;
        match o.letter(Condition::NL)? {
            Some(l) => attributions.push(category_attribution(nl, &inp.sae, &unembed, &cats, l)?),
            None => abstained.push(nl.case_id.clone()),
        }
        if let Some(nf) = nf_by_case.get(nl.case_id.as_str()) {
            comparisons.push(decision_comparison(nl, nf, &inp.sae, ctx.cfg.top_k, medical)?);
        }
    }

    let mut summary = Table::new(
        format!("Decision-token attribution, layer {layer} ({} cases)", attributions.len()),
        vec![
            Column::left("category", 10),
            Column::right("abs share", 9),
            Column::right("n", 4),
            Column::right("margin", 9),
            Column::right("n", 4),
        ],
    );
    let mut summary_json = serde_json::Map::new();
    for cat in FeatureCategory::ALL {
        let share = |f: fn(&formatprobe::attribution::CategoryShare) -> Option<f64>| {
            mean_defined(
                attributions
                    .iter()
                    .map(|a| a.categories.iter().find(|c| c.category == cat).and_then(f)),
            )
        };
        let (abs, n_abs) = share(|c| c.abs_fraction);
        let (margin, n_margin) = share(|c| c.margin_share);
        let name = format!("{cat:?}").to_lowercase();
        summary.push(vec![
            name.clone(),
            opt_pct(abs, 1),
            n_abs.to_string(),
            opt_pct(margin, 1),
            n_margin.to_string(),
        ]);
        summary_json.insert(
            name,
            json!({ "mean_abs_fraction": abs, "n_abs": n_abs, "mean_margin_share": margin, "n_margin": n_margin }),
        );
    }
    let (jaccard, _) = mean_defined(comparisons.iter().map(|c| Some(c.jaccard)));
    let mut text = summary.render();
    text.push_str(&format!(
        "\nscaffold features (top {} by full_mean alignment): {}\nmean top-{} Jaccard NL vs NF: {}\nNL abstentions skipped: {}\n\n",
        scaffold.len(),
        ids(&scaffold),
        ctx.cfg.top_k,
        opt_num(jaccard, 3),
        abstained.len()
    ));
    text.push_str(&attribution_table("Per case", &attributions).render());
    Ok(ctx.report(
        "attribute",
        format!("attribute_L{layer}"),
        json!({
            "layer": layer,
            "medical": medical,
            "scaffold": scaffold,
            "summary": summary_json,
            "mean_jaccard": jaccard,
            "abstained": abstained,
            "cases": attributions,
            "decision_comparison": comparisons,
        }),
        text,
    ))
}

fn behavior(ctx: &Context) -> Result<Report> {
    let outcomes = ctx.outcomes()?;
    let conds = ctx.conditions()?;
    let mut acc = Table::new(
        format!("Accuracy ({} cases)", outcomes.len()),
        vec![
            Column::left("condition", 9),
            Column::right("accuracy", 8),
            Column::right("under", 5),
            Column::right("over", 5),
        ],
    );
    let mut per_cond = serde_json::Map::new();
    let complete: Vec<Condition> = conds
        .iter()
        .copied()
        .filter(|c| outcomes.iter().all(|o| o.predictions.contains_key(c)))
        .collect();
    for &c in &complete {
        let a = score_condition(outcomes, c)?;
        let (under, over) = triage_error_direction(outcomes, c)?;
        acc.push(vec![c.to_string(), pct(a, 1), under.to_string(), over.to_string()]);
        let mut entry = json!({
            "accuracy": a,
            "under_triage": under,
            "over_triage": over,
            "by_gold": accuracy_by_gold(outcomes, c)?,
        });
        if !c.is_multiple_choice() {
            entry["judges"] = to_value(&judge_accuracies(outcomes, c)?);
        }
        per_cond.insert(c.to_string(), entry);
    }
    let mut text = acc.render();
    let mut body = json!({ "n_cases": outcomes.len(), "conditions": per_cond });

    let has = |c| complete.contains(&c);
    if has(Condition::NL) && has(Condition::NF) {
        let nl: Vec<bool> = outcomes.iter().map(|o| o.is_correct(Condition::NL)).collect::<Result<_>>()?;
        let nf: Vec<bool> = outcomes.iter().map(|o| o.is_correct(Condition::NF)).collect::<Result<_>>()?;
        let m = paired_mcnemar(&nl, &nf)?;
        text.push_str(&format!(
            "\nMcNemar NL vs NF: NL-only {}, NF-only {}, p = {}\n\n",
            m.b,
            m.c,
            num(m.p, 4)
        ));
        let g = gap_decompose(outcomes)?;
        text.push_str(&gap_table("Gap decomposition", &g).render());
        body["mcnemar_nl_nf"] = to_value(&m);
        body["gap"] = to_value(&g);
    }
    for &c in complete.iter().filter(|c| !c.is_multiple_choice()) {
        if outcomes.iter().any(|o| o.predictions[&c].five_way.is_empty()) {
            continue;
        }
        let r = rescore_five_way(outcomes, c)?;
        text.push('\n');
        text.push_str(&five_way_table(&format!("Five-way rescoring, {c}"), &r).render());
        body[format!("five_way_{c}")] = to_value(&r);
        let judges: Vec<String> = r.per_judge.keys().cloned().collect();
        if let [a, b, ..] = judges.as_slice() {
            let pick = |j: &str| -> Result<Vec<Letter>> {
                outcomes
                    .iter()
                    .map(|o| {
                        o.judges(c)?.get(j).copied().ok_or_else(|| Error::Missing {
                            case_id: o.case_id.clone(),
                            what: format!("judge {j} label for {c}"),
                        })
                    })
                    .collect()
            };
            let kappa = cohen_kappa(&pick(a)?, &pick(b)?, &Letter::ALL)?;
            text.push_str(&format!("Cohen kappa {a} vs {b} ({c}, 4-way): {}\n", opt_num(kappa, 3)));
            body[format!("kappa_{c}")] = json!({ "judges": [a, b], "kappa": kappa });
        }
    }
    Ok(ctx.report("behavior", "behavior".into(), body, text))
}

fn shuffle(ctx: &Context) -> Result<Report> {
    let outcomes = ctx.outcomes()?;
    let records = shuffle_records(ctx.predictions()?)?;
    let r = shuffle_analysis(&records, outcomes, ctx.cfg.bootstrap, ctx.cfg.seeds.bootstrap)?;
    let text = shuffle_table(
        &format!("Option-shuffle consistency ({} cases, {} records)", r.n_cases, r.n_records),
        &r,
    )
    .render();
    Ok(ctx.report("shuffle", "shuffle".into(), json!({ "shuffle": r }), text))
}

fn probe(ctx: &Context) -> Result<Report> {
    let outcomes = ctx.outcomes()?;
    let layers = if ctx.cfg.layers.is_empty() {
        ctx.manifest()?.layers()
    } else {
        ctx.cfg.layers.clone()
    };
    let config = ProbeConfig {
        l2: ctx.cfg.probe.l2,
        balanced: ctx.cfg.probe.balanced,
        standardize: ctx.cfg.probe.standardize,
    };
    let mut results = Vec::new();
    for t in &ctx.cfg.probe.transitions {
        let flips = build_flip_labels(&correctness(outcomes, t.source)?, &correctness(outcomes, t.target)?)?;
        for &layer in &layers {
            let dumps = ctx.dumps(t.source, layer)?;
            let ds = ProbeDataset::from_dumps(&dumps, &flips, String::from(*t))?;
            results.push(train_loocv(&ds, config, ctx.cfg.permutations, ctx.cfg.seeds.permutation)?);
        }
    }
    let text = probe_table(
        &format!("Flip probes, LOOCV ({} permutations)", ctx.cfg.permutations),
        &results,
    )
    .render();
    Ok(ctx.report("probe", "probe".into(), json!({ "probes": results }), text))
}
