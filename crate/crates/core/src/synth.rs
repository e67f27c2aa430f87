//! Deterministic synthetic corpora with known structure.
//!
//! The generated SAE has unit-norm decoder rows and a tied encoder, so a
//! residual built as `sum_f a_f W_dec[f]` encodes back to roughly `a`. Three
//! medical features carry the vignette content and stay nearly unchanged
//! between NL and NF prompts; scaffold features fire only on the appended
//! answer key; the remaining features fire sporadically with
//! format-dependent magnitudes. Everything is reproducible from the seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationDump, Condition, CorpusManifest, TokenSpan};
use crate::attribution::UnembeddingFile;
use crate::behavior::{enumerate_permutations, write_jsonl, FiveWay, GoldLabel, Letter};
use crate::error::{Error, Result};
use crate::harness::{assemble_outcomes, CaseMeta, JudgeLabel, LabelSpace, PredictionRecord};
use crate::rng::{self, StreamRng};
use crate::sae::SaeParams;

pub const SYNTH_MODEL: &str = "synthetic-lm";
pub const SYNTH_CONVENTION: &str = "chat_user_content";
pub const JUDGES: [&str; 2] = ["judge_a", "judge_b"];
const TEMPLATE_HEAD: usize = 2;
const TEMPLATE_TAIL: usize = 2;
const LETTER_TOKENS: [u32; 4] = [330, 331, 332, 333];
const VOCAB: usize = 8000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub d_model: usize,
    pub d_sae: usize,
    pub layers: Vec<u32>,
    pub vignette_len: usize,
    pub scaffold_len: usize,
    /// Free-text instruction tokens appended to NF prompts.
    pub nf_tail_len: usize,
    /// Prompts in each contrastive set.
    pub n_contrast: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 12,
            d_model: 64,
            d_sae: 96,
            layers: vec![6, 12],
            vignette_len: 10,
            scaffold_len: 6,
            nf_tail_len: 3,
            n_contrast: 10,
            seed: 7,
        }
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub saes: BTreeMap<u32, SaeParams<f32>>,
    /// NL and NF dumps of every case at every layer.
    pub dumps: Vec<ActivationDump>,
    pub contrast_medical: Vec<ActivationDump>,
    pub contrast_non: Vec<ActivationDump>,
    pub cases: Vec<CaseMeta>,
    pub predictions: Vec<PredictionRecord>,
    pub judge_labels: Vec<JudgeLabel>,
    pub unembedding: UnembeddingFile,
    /// Features built to carry medical content.
    pub medical: Vec<u32>,
    /// Features built to fire on the answer key only.
    pub scaffold: Vec<u32>,
}

/// Relative file layout written by [`SynthCorpus::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    pub manifest: PathBuf,
    pub contrast_medical: PathBuf,
    pub contrast_non: PathBuf,
    /// Layer to SAE directory.
    pub sae_dirs: BTreeMap<u32, PathBuf>,
    pub cases: PathBuf,
    pub predictions: PathBuf,
    pub judge_labels: PathBuf,
    pub outcomes: PathBuf,
    pub unembedding: PathBuf,
}

fn normal(r: &mut StreamRng) -> f32 {
    r.sample::<f32, _>(StandardNormal)
}

fn unit_rows(n: usize, d: usize, r: &mut StreamRng) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f32> = (0..d).map(|_| normal(r)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

/// Makes the rows listed in `isolated` orthonormal to each other and to
/// every other row, so they pick up no crosstalk.
fn isolate_rows(w: &mut [f32], d: usize, isolated: &[u32]) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for &f in isolated {
        let mut v: Vec<f64> = w[f as usize * d..(f as usize + 1) * d].iter().map(|&x| f64::from(x)).collect();
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    for (f, row) in w.chunks_exact_mut(d).enumerate() {
        if let Some(k) = isolated.iter().position(|&g| g as usize == f) {
            row.iter_mut().zip(&basis[k]).for_each(|(x, &y)| *x = y as f32);
            continue;
        }
        let mut v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().zip(&v).for_each(|(x, &y)| *x = (y / n) as f32);
    }
}

/// Tied JumpReLU SAE with unit decoder rows and threshold 0.5. Rows in
/// `isolated` are orthogonal to all others (needs `isolated.len() < d_model`).
pub fn tied_sae(d_model: usize, d_sae: usize, seed: u64, layer: u32, isolated: &[u32]) -> Result<SaeParams<f32>> {
    if isolated.len() >= d_model || isolated.iter().any(|&f| f as usize >= d_sae) {
        return Err(Error::invariant("isolated rows must be valid ids and fewer than d_model"));
    }
    let mut r = rng::stream(seed, "synth-sae", u64::from(layer));
    let mut w_dec = unit_rows(d_sae, d_model, &mut r);
    isolate_rows(&mut w_dec, d_model, isolated);
    let mut w_enc = vec![0.0f32; d_model * d_sae];
    for f in 0..d_sae {
        for i in 0..d_model {
            w_enc[i * d_sae + f] = w_dec[f * d_model + i];
        }
    }
    SaeParams::jump_relu(
        d_model,
        d_sae,
        w_enc,
        vec![0.0; d_sae],
        w_dec,
        vec![0.0; d_model],
        vec![0.5; d_sae],
    )
}

struct Roles {
    medical: Vec<u32>,
    scaffold: Vec<u32>,
    generic: Vec<u32>,
    /// Direction added to the decision token of flipping cases.
    flip: u32,
}

impl Roles {
    fn isolated(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.medical.iter().chain(&self.scaffold).copied().collect();
        v.push(self.flip);
        v
    }
}

fn roles(d_sae: usize) -> Roles {
    let medical = vec![3, 8, 13];
    let scaffold: Vec<u32> = (20..26).collect();
    let flip = 30;
    let generic = (0..d_sae as u32)
        .filter(|f| !medical.contains(f) && !scaffold.contains(f) && *f != flip)
        .collect();
    Roles {
        medical,
        scaffold,
        generic,
        flip,
    }
}

fn add_feature(row: &mut [f32], sae: &SaeParams<f32>, f: u32, a: f32) {
    for (x, &w) in row.iter_mut().zip(sae.decoder_row(f as usize)) {
        *x += a * w;
    }
}

/// Activation pattern of one token before format effects.
#[derive(Clone)]
struct TokenPlan {
    feats: Vec<(u32, f32)>,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_cases < 4 || self.layers.is_empty() || self.vignette_len == 0 || self.scaffold_len == 0 {
            return Err(Error::invariant("synthetic corpus needs 4+ cases, a layer and non-empty spans"));
        }
        if self.d_sae < 40 || self.d_model < 16 {
            return Err(Error::invariant("synthetic SAE needs d_sae >= 40 and d_model >= 16"));
        }
        if self.n_contrast < 2 {
            return Err(Error::invariant("synthetic contrast sets need 2+ prompts"));
        }
        Ok(())
    }
}

fn case_id(i: usize) -> String {
    format!("E{:02}", i + 1)
}

fn letter_near(gold: Letter, r: &mut StreamRng) -> Letter {
    let i = gold.index() as i32 + if r.random_bool(0.5) { 1 } else { -1 };
    Letter::from_index(i.clamp(0, 3) as usize).expect("clamped")
}

/// Builds the whole corpus.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let roles = roles(cfg.d_sae);
    let saes: BTreeMap<u32, SaeParams<f32>> = cfg
        .layers
        .iter()
        .map(|&l| Ok((l, tied_sae(cfg.d_model, cfg.d_sae, cfg.seed, l, &roles.isolated())?)))
        .collect::<Result<_>>()?;

    let mut cases = Vec::new();
    let mut predictions = Vec::new();
    let mut judge_labels = Vec::new();
    let mut nl_correct = Vec::new();
    let mut nf_correct = Vec::new();
    let perms = enumerate_permutations();
    for i in 0..cfg.n_cases {
        let id = case_id(i);
        let mut r = rng::stream(cfg.seed, "synth-behavior", i as u64);
        let primary = Letter::from_index(r.random_range(0..4)).expect("0..4");
        let gold = if primary == Letter::C && r.random_bool(0.3) {
            GoldLabel::dual(Letter::C, Letter::D)?
        } else {
            GoldLabel::single(primary)
        };
        cases.push(CaseMeta {
            case_id: id.clone(),
            gold,
            acuity: Some(["low", "mid", "high"][i % 3].into()),
        });
        let nl = if r.random_bool(0.75) { primary } else { letter_near(primary, &mut r) };
        predictions.push(PredictionRecord::new(&id, Condition::NL, &format!("{nl}."), None));
        let nf_read = if r.random_bool(0.5) { primary } else { letter_near(primary, &mut r) };
        predictions.push(PredictionRecord::new(
            &id,
            Condition::NF,
            "Based on the symptoms described, seek care at the indicated level.",
            None,
        ));
        let split = r.random_bool(0.15);
        let deferred = r.random_bool(0.15);
        for (j, judge) in JUDGES.iter().enumerate() {
            let four = if split && j == 1 { letter_near(nf_read, &mut r) } else { nf_read };
            judge_labels.push(JudgeLabel {
                case_id: id.clone(),
                condition: Condition::NF,
                judge: (*judge).into(),
                space: LabelSpace::FourWay,
                label: FiveWay::Letter(four),
                raw: None,
            });
            judge_labels.push(JudgeLabel {
                case_id: id.clone(),
                condition: Condition::NF,
                judge: (*judge).into(),
                space: LabelSpace::FiveWay,
                label: if deferred { FiveWay::Deferred } else { FiveWay::Letter(four) },
                raw: None,
            });
        }
        nl_correct.push(gold.accepts(nl));
        nf_correct.push(gold.accepts(nf_read) && !split);
        // content-following with probability 0.7, position-following otherwise
        let follows_content = r.random_bool(0.7);
        for p in &perms {
            let pick = if follows_content { p.letter_of(nl.index() as u8) } else { nl };
            predictions.push(PredictionRecord::new(&id, Condition::NL, pick.as_char().to_string().as_str(), Some(p.id)));
        }
    }
    // guarantee both flip classes for probes
    let flips: Vec<bool> = nl_correct.iter().zip(&nf_correct).map(|(a, b)| a != b).collect();
    let n_flip = flips.iter().filter(|&&f| f).count();
    if n_flip < 2 || cfg.n_cases - n_flip < 2 {
        return Err(Error::Insufficient(format!(
            "seed {} yields {n_flip} flipping cases of {}; pick another seed",
            cfg.seed, cfg.n_cases
        )));
    }

    let mut dumps = Vec::new();
    for (&layer, sae) in &saes {
        for i in 0..cfg.n_cases {
            let (nl, nf) = case_dumps(cfg, sae, &roles, layer, i, flips[i]);
            dumps.push(nl);
            dumps.push(nf);
        }
    }
    let mut contrast_medical = Vec::new();
    let mut contrast_non = Vec::new();
    for (&layer, sae) in &saes {
        for i in 0..cfg.n_contrast {
            contrast_medical.push(contrast_dump(cfg, sae, &roles, layer, i, true));
            contrast_non.push(contrast_dump(cfg, sae, &roles, layer, i, false));
        }
    }

    let mut r = rng::stream(cfg.seed, "synth-unembedding", 0);
    let mut columns = BTreeMap::new();
    let mut ids = BTreeMap::new();
    for (l, id) in Letter::ALL.into_iter().zip(LETTER_TOKENS) {
        columns.insert(l, (0..cfg.d_model).map(|_| normal(&mut r)).collect());
        ids.insert(l, id);
    }
    Ok(SynthCorpus {
        config: cfg.clone(),
        saes,
        dumps,
        contrast_medical,
        contrast_non,
        cases,
        predictions,
        judge_labels,
        unembedding: UnembeddingFile {
            vocab_size: VOCAB,
            letter_token_ids: ids,
            columns,
        },
        medical: roles.medical,
        scaffold: roles.scaffold,
    })
}

fn token_plans(cfg: &SynthConfig, roles: &Roles, r: &mut StreamRng, n: usize, medical: bool) -> Vec<TokenPlan> {
    (0..n)
        .map(|_| {
            let mut feats = Vec::new();
            if medical {
                for &f in &roles.medical {
                    if r.random_bool(0.5) {
                        feats.push((f, r.random_range(1.5..4.0)));
                    }
                }
            }
            for _ in 0..4 {
                let f = roles.generic[r.random_range(0..roles.generic.len())];
                feats.push((f, r.random_range(1.0..4.0)));
            }
            let _ = cfg;
            TokenPlan { feats }
        })
        .collect()
}

fn render(sae: &SaeParams<f32>, plans: &[TokenPlan], noise: f32, r: &mut StreamRng) -> Vec<f32> {
    let d = sae.d_model();
    let mut out = vec![0.0f32; plans.len() * d];
    for (t, p) in plans.iter().enumerate() {
        let row = &mut out[t * d..(t + 1) * d];
        for &(f, a) in &p.feats {
            add_feature(row, sae, f, a);
        }
        for x in row.iter_mut() {
            *x += noise * normal(r);
        }
    }
    out
}

fn case_dumps(
    cfg: &SynthConfig,
    sae: &SaeParams<f32>,
    roles: &Roles,
    layer: u32,
    i: usize,
    flip: bool,
) -> (ActivationDump, ActivationDump) {
    let id = case_id(i);
    let mut r = rng::stream(cfg.seed, &format!("synth-case-L{layer}"), i as u64);
    let head = token_plans(cfg, roles, &mut r, TEMPLATE_HEAD, false);
    let vignette = token_plans(cfg, roles, &mut r, cfg.vignette_len, true);
    let prefix_ids: Vec<u32> = (0..TEMPLATE_HEAD + cfg.vignette_len)
        .map(|t| if t < TEMPLATE_HEAD { 2 + t as u32 } else { r.random_range(1000..5000) })
        .collect();

    // format shifts generic magnitudes after the vignette; medical stays put
    let mut scaffold: Vec<TokenPlan> = token_plans(cfg, roles, &mut r, cfg.scaffold_len, false);
    for p in &mut scaffold {
        for &f in &roles.scaffold {
            if r.random_bool(0.6) {
                p.feats.push((f, r.random_range(2.0..4.0)));
            }
        }
    }
    let nf_tail = token_plans(cfg, roles, &mut r, cfg.nf_tail_len, false);
    let build = |cond: Condition, body: &[TokenPlan], r: &mut StreamRng| -> ActivationDump {
        let mut plans: Vec<TokenPlan> = head.iter().chain(&vignette).cloned().collect();
        // later vignette tokens see the format through attention in a real
        // model; mimic that with a small generic perturbation
        for p in plans.iter_mut().skip(TEMPLATE_HEAD) {
            for (f, a) in p.feats.iter_mut() {
                if !roles.medical.contains(f) && r.random_bool(0.3) {
                    *a *= r.random_range(0.6..1.4);
                }
            }
        }
        plans.extend(body.iter().cloned());
        let mut tail = token_plans(cfg, roles, r, TEMPLATE_TAIL, false);
        if flip {
            tail.last_mut().expect("tail").feats.push((roles.flip, 3.0));
        }
        plans.extend(tail);
        let token_count = plans.len();
        let residuals = render(sae, &plans, 0.02, r);
        let mut token_ids = prefix_ids.clone();
        let body_base = if cond == Condition::NL { 6000 } else { 7000 };
        token_ids.extend((0..body.len()).map(|t| body_base + t as u32));
        token_ids.extend([106, 107]);
        let content_end = TEMPLATE_HEAD + cfg.vignette_len + body.len();
        let vig = TokenSpan::new(TEMPLATE_HEAD, TEMPLATE_HEAD + cfg.vignette_len);
        ActivationDump {
            case_id: id.clone(),
            condition: cond,
            model_id: SYNTH_MODEL.into(),
            layer,
            token_count,
            dim: sae.d_model(),
            residuals,
            token_ids,
            vignette_mask: vig,
            scaffold_mask: (cond == Condition::NL).then(|| TokenSpan::new(vig.end, content_end)),
            decision_index: token_count - 1,
            content_range: TokenSpan::new(TEMPLATE_HEAD, content_end),
            content_convention: SYNTH_CONVENTION.into(),
        }
    };
    let nl = build(Condition::NL, &scaffold, &mut r);
    let nf = build(Condition::NF, &nf_tail, &mut r);
    (nl, nf)
}

fn contrast_dump(
    cfg: &SynthConfig,
    sae: &SaeParams<f32>,
    roles: &Roles,
    layer: u32,
    i: usize,
    medical: bool,
) -> ActivationDump {
    let tag = if medical { "synth-contrast-med" } else { "synth-contrast-non" };
    let mut r = rng::stream(cfg.seed, &format!("{tag}-L{layer}"), i as u64);
    let n = cfg.vignette_len;
    let mut plans = token_plans(cfg, roles, &mut r, n, medical);
    if medical {
        // every medical prompt carries each medical feature at least once
        for (k, &f) in roles.medical.iter().enumerate() {
            plans[k % n].feats.push((f, 2.5));
        }
    }
    let residuals = render(sae, &plans, 0.02, &mut r);
    ActivationDump {
        case_id: format!("{}{:02}", if medical { "med" } else { "non" }, i + 1),
        condition: Condition::NF,
        model_id: SYNTH_MODEL.into(),
        layer,
        token_count: n,
        dim: sae.d_model(),
        residuals,
        token_ids: (0..n as u32).map(|t| 1000 + t).collect(),
        vignette_mask: TokenSpan::new(0, n),
        scaffold_mask: None,
        decision_index: n - 1,
        content_range: TokenSpan::new(0, n),
        content_convention: SYNTH_CONVENTION.into(),
    }
}

fn write_manifest(dir: &Path, dumps: &[ActivationDump]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = CorpusManifest::new(dir);
    for d in dumps {
        m.add_dump(d)?;
    }
    m.save(&dir.join("manifest.json"))
}

impl SynthCorpus {
    /// Writes every artifact under `dir`; returned paths are relative to it.
    pub fn write(&self, dir: &Path) -> Result<SynthLayout> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&dir.join("corpus"), &self.dumps)?;
        write_manifest(&dir.join("contrast_medical"), &self.contrast_medical)?;
        write_manifest(&dir.join("contrast_non"), &self.contrast_non)?;
        let mut sae_dirs = BTreeMap::new();
        for (&layer, sae) in &self.saes {
            let rel = PathBuf::from(format!("sae/L{layer}"));
            sae.save_dir(&dir.join(&rel))?;
            sae_dirs.insert(layer, rel);
        }
        write_jsonl(&dir.join("cases.jsonl"), &self.cases)?;
        write_jsonl(&dir.join("predictions.jsonl"), &self.predictions)?;
        write_jsonl(&dir.join("judge_labels.jsonl"), &self.judge_labels)?;
        let outcomes = assemble_outcomes(&self.cases, &self.predictions, &self.judge_labels)?;
        write_jsonl(&dir.join("outcomes.jsonl"), &outcomes)?;
        let unembed = dir.join("unembedding.json");
        let text = serde_json::to_string(&self.unembedding)
            .map_err(|e| Error::Internal(format!("unembedding encode: {e}")))?;
        fs::write(&unembed, text + "\n").map_err(|e| Error::io(&unembed, e))?;
        Ok(SynthLayout {
            manifest: "corpus/manifest.json".into(),
            contrast_medical: "contrast_medical/manifest.json".into(),
            contrast_non: "contrast_non/manifest.json".into(),
            sae_dirs,
            cases: "cases.jsonl".into(),
            predictions: "predictions.jsonl".into(),
            judge_labels: "judge_labels.jsonl".into(),
            outcomes: "outcomes.jsonl".into(),
            unembedding: "unembedding.json".into(),
        })
    }
}
