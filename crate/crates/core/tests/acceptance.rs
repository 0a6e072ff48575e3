//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero only when a property-level criterion (1-4, 8, 9) fails. The
//! learning-quality criteria (5-7) are reported but never fail the run.
//!
//! Set `MEFA_ACCEPT_SKIP_E2E=1` to skip the training criteria (5-8).

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mefa::cmr::{attention_weights, loss_nitc, refine, FusionParams};
use mefa::dcc::{cue_indices, loss_ditc, percentile_ranks, sort_profile, DccParams};
use mefa::encoders::{Caption, EmbeddingBank, EncodedItem, Modality, Pos};
use mefa::evalret::{mean_average_precision, rank_gallery, rank_k_accuracy, SimilarityMatrix};
use mefa::harness::{
    generate_dataset, run_ablation, table_rows, AblationGrid, AblationResult, Catalog, SyntheticSpec, TrainConfig,
};
use mefa::imr::{
    loss_imc, loss_imr, loss_imr_batch, mine_visual_negatives, perturb, CorpusStats, ImrLossParams, Lexicon,
    NegativeItem, Tier,
};
use mefa::numerics::{check_gradient, softmax, Tape, Tensor, Var};
use mefa::Result;

const GRAD_H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const CLOSED_FORM_TOL: f64 = 1e-6;
const MASS_TOL: f64 = 1e-6;
const SHIFT_TOL: f64 = 1e-9;
const SUITE_BUDGET: Duration = Duration::from_secs(60);
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    /// Failing this criterion fails the run.
    enforced: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("{tag}  [{}] {}: {}", self.id, self.name, self.detail);
    }
}

/// Cuts a flat probe vector into shaped tape variables.
struct Slicer {
    flat: Var,
    offset: usize,
}

impl Slicer {
    fn new(t: &mut Tape<f64>, x: Var) -> Result<Self> {
        let n = t.shape(x)[0];
        Ok(Slicer {
            flat: t.reshape(x, vec![n, 1])?,
            offset: 0,
        })
    }

    fn take(&mut self, t: &mut Tape<f64>, shape: &[usize]) -> Result<Var> {
        let k: usize = shape.iter().product();
        let idx: Vec<usize> = (self.offset..self.offset + k).collect();
        self.offset += k;
        let g = t.gather_rows(self.flat, &idx)?;
        t.reshape(g, shape.to_vec())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Runs `GRAD_INSTANCES` accepted instances; `make` returns `None` for an
/// instance too close to a kink or tie.
fn grad_family<F>(rng: &mut ChaCha8Rng, mut make: F) -> (usize, f64)
where
    F: FnMut(&mut ChaCha8Rng) -> Option<(Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)>,
{
    let (mut passed, mut worst, mut accepted) = (0, 0.0f64, 0);
    while accepted < GRAD_INSTANCES {
        let Some((x, f)) = make(rng) else { continue };
        accepted += 1;
        match check_gradient(|t, v| f(t, v), &x, GRAD_H, GRAD_TOL) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                passed += usize::from(r.pass);
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    (passed, worst)
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let p = ImrLossParams::default();
    let mut families = Vec::new();

    let pi = p.clone();
    families.push((
        "separation",
        grad_family(&mut rng, move |rng| {
            let (n, k, d) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=6));
            let x = uniform(rng, n * (2 + k) * d);
            for i in 0..n {
                let row = |r: usize| &x[(i * (2 + k) + r) * d..(i * (2 + k) + r + 1) * d];
                let dp = 1.0 - cos(row(0), row(1));
                for j in 0..k {
                    let margin = pi.alpha + dp - (1.0 - cos(row(0), row(2 + j)));
                    if margin.abs() < 1e-2 {
                        return None;
                    }
                }
            }
            let pp = pi.clone();
            let f = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut s = Slicer::new(t, v)?;
                let (mut a, mut po, mut ne) = (vec![], vec![], vec![]);
                for _ in 0..n {
                    a.push(s.take(t, &[d])?);
                    po.push(s.take(t, &[d])?);
                    ne.push(s.take(t, &[k, d])?);
                }
                let batch = loss_imr_batch(t, &a, &po, &ne, &pp)?;
                let n0 = t.row(ne[0], 0)?;
                let single = loss_imr(t, a[0], po[0], n0, &pp)?;
                t.add(batch, single)
            };
            Some((Tensor::vector(x).ok()?, Box::new(f) as Box<_>))
        }),
    ));

    let pc = p.clone();
    families.push((
        "hard-negative contrast",
        grad_family(&mut rng, move |rng| {
            let (n, k, d) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(3..=6));
            let x = uniform(rng, n * (2 + k) * d);
            for i in 0..n {
                let row = |r: usize| &x[(i * (2 + k) + r) * d..(i * (2 + k) + r + 1) * d];
                let mut dn: Vec<f64> = (0..k).map(|j| 1.0 - cos(row(0), row(2 + j))).collect();
                dn.sort_by(f64::total_cmp);
                if k > 1 && dn[1] - dn[0] < 1e-2 {
                    return None;
                }
            }
            let pp = pc.clone();
            let f = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut s = Slicer::new(t, v)?;
                let (mut a, mut po, mut ne) = (vec![], vec![], vec![]);
                for _ in 0..n {
                    a.push(s.take(t, &[d])?);
                    po.push(s.take(t, &[d])?);
                    ne.push(s.take(t, &[k, d])?);
                }
                loss_imc(t, &a, &po, &ne, &pp)
            };
            Some((Tensor::vector(x).ok()?, Box::new(f) as Box<_>))
        }),
    ));

    families.push((
        "identity contrast",
        grad_family(&mut rng, |rng| {
            let (n, d) = (rng.gen_range(2..=4), rng.gen_range(2..=6));
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let tau = rng.gen_range(0.2..1.0);
            let x = uniform(rng, 2 * n * d);
            let f = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut s = Slicer::new(t, v)?;
                let gi = s.take(t, &[n, d])?;
                let gt = s.take(t, &[n, d])?;
                loss_nitc(t, gi, gt, &ids, tau)
            };
            Some((Tensor::vector(x).ok()?, Box::new(f) as Box<_>))
        }),
    ));

    families.push((
        "cue contrast",
        grad_family(&mut rng, |rng| {
            let (n, d) = (rng.gen_range(2..=4), rng.gen_range(2..=8));
            let tau = rng.gen_range(0.2..1.0);
            let x = uniform(rng, 2 * n * d);
            let f = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut s = Slicer::new(t, v)?;
                let cues = s.take(t, &[n, d])?;
                let imgs = s.take(t, &[n, d])?;
                loss_ditc(t, cues, imgs, tau)
            };
            Some((Tensor::vector(x).ok()?, Box::new(f) as Box<_>))
        }),
    ));

    families.push((
        "refinement fusion",
        grad_family(&mut rng, |rng| {
            let (n, m, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(2..=4));
            let fusion = 2 * (3 * 2 * d * d + d);
            let feats = n * d + d + m * d + d;
            let x = uniform(rng, fusion + feats);
            let probe = uniform(rng, 2 * d + n * d + m * d);
            let f = move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut s = Slicer::new(t, v)?;
                let mut fp = || -> Result<FusionParams> {
                    Ok(FusionParams {
                        w_u: s.take(t, &[2 * d, d])?,
                        w_f: s.take(t, &[2 * d, d])?,
                        b_f: s.take(t, &[d])?,
                        w_p: s.take(t, &[2 * d, d])?,
                    })
                };
                let fi = fp()?;
                let ft = fp()?;
                let vl = s.take(t, &[n, d])?;
                let vg = s.take(t, &[d])?;
                let tl = s.take(t, &[m, d])?;
                let tg = s.take(t, &[d])?;
                let r = refine(t, (vl, vg), (tl, tg), &fi, &ft)?;
                let outs = [
                    t.reshape(r.g_img, vec![1, d])?,
                    t.reshape(r.g_txt, vec![1, d])?,
                    r.image_locals_refined,
                    r.text_locals_refined,
                ];
                let all = t.concat_rows(&outs)?;
                let w = t.constant(Tensor::matrix(2 + n + m, d, probe.clone())?);
                let prod = t.mul(all, w)?;
                Ok(t.sum(prod))
            };
            Some((Tensor::vector(x).ok()?, Box::new(f) as Box<_>))
        }),
    ));

    let elapsed = start.elapsed();
    let all_pass = families.iter().all(|(_, (p, _))| *p == GRAD_INSTANCES);
    let detail = families
        .iter()
        .map(|(name, (p, w))| format!("{name} {p}/{GRAD_INSTANCES} (max rel err {w:.1e})"))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict {
        id: "1",
        name: "gradient suite",
        pass: all_pass && elapsed < SUITE_BUDGET,
        enforced: true,
        detail: format!("{detail}; {:.1}s", elapsed.as_secs_f64()),
    }
}

/// Rank of every gallery item by counting the items that beat it.
fn oracle_ranks(row: &[f32]) -> Vec<usize> {
    (0..row.len())
        .map(|i| {
            1 + (0..row.len())
                .filter(|&j| row[j] > row[i] || (row[j] == row[i] && j < i))
                .count()
        })
        .collect()
}

fn criterion_metrics() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_g = rng.gen_range(1..=20);
        let n_q = rng.gen_range(1..=6);
        let n_ids = rng.gen_range(1..=6u32);
        let gallery: Vec<u32> = (0..n_g).map(|_| rng.gen_range(0..n_ids)).collect();
        let queries: Vec<u32> = (0..n_q).map(|_| gallery[rng.gen_range(0..n_g)]).collect();
        // Coarse values force ties.
        let values: Vec<f32> = (0..n_q * n_g).map(|_| rng.gen_range(-4i32..=4) as f32 / 4.0).collect();
        let sim = SimilarityMatrix::new(values.clone(), queries.clone(), gallery.clone()).unwrap();
        let ranked = rank_gallery(&sim);

        let mut ap_sum = 0.0;
        let mut best_rank = Vec::with_capacity(n_q);
        for q in 0..n_q {
            let ranks = oracle_ranks(&values[q * n_g..(q + 1) * n_g]);
            let mut rel: Vec<usize> = (0..n_g).filter(|&g| gallery[g] == queries[q]).map(|g| ranks[g]).collect();
            rel.sort_unstable();
            let mut sum = 0.0;
            for (found, &r) in rel.iter().enumerate() {
                sum += (found + 1) as f64 / r as f64;
            }
            ap_sum += sum / rel.len() as f64;
            best_rank.push(rel[0]);
        }
        let map = 100.0 * ap_sum / n_q as f64;
        if mean_average_precision(&ranked, &queries, &gallery).unwrap() != map {
            mismatches += 1;
        }
        for k in [1, 5, 10].into_iter().filter(|&k| k <= n_g) {
            let hits = best_rank.iter().filter(|&&r| r <= k).count();
            if rank_k_accuracy(&ranked, &queries, &gallery, k).unwrap() != 100.0 * hits as f64 / n_q as f64 {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        id: "2",
        name: "metric oracle",
        pass: mismatches == 0 && elapsed < SUITE_BUDGET,
        enforced: true,
        detail: format!("1000 galleries, {mismatches} mismatches; {:.2}s", elapsed.as_secs_f64()),
    }
}

fn eval(build: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Vec<f64> {
    let mut t = Tape::new();
    let v = build(&mut t).unwrap();
    t.value(v).to_vec()
}

fn vecc(t: &mut Tape<f64>, v: &[f64]) -> Var {
    t.constant(Tensor::vector(v.to_vec()).unwrap())
}

fn matc(t: &mut Tape<f64>, rows: usize, v: &[f64]) -> Var {
    t.constant(Tensor::matrix(rows, v.len() / rows, v.to_vec()).unwrap())
}

fn criterion_closed_forms() -> Verdict {
    let ln2 = std::f64::consts::LN_2;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let p = ImrLossParams::default();
    let imr = |a: &[f64], po: &[f64], n: &[f64]| {
        eval(|t| {
            let (a, po, n) = (vecc(t, a), vecc(t, po), vecc(t, n));
            loss_imr(t, a, po, n, &p)
        })[0]
    };
    let imc = |a: &[f64], po: &[f64], n: &[f64], gamma: f64| {
        let q = ImrLossParams { gamma, ..p.clone() };
        eval(|t| {
            let (a, po, n) = (vecc(t, a), vecc(t, po), matc(t, 1, n));
            loss_imc(t, &[a], &[po], &[n], &q)
        })[0]
    };
    let nitc = |gi: &[f64], gt: &[f64], ids: &[u32]| {
        eval(|t| {
            let (gi, gt) = (matc(t, 2, gi), matc(t, 2, gt));
            loss_nitc(t, gi, gt, ids, 1.0)
        })[0]
    };
    let ditc = |cues: &[f64], imgs: &[f64]| {
        eval(|t| {
            let (c, v) = (matc(t, 2, cues), matc(t, 2, imgs));
            loss_ditc(t, c, v, 1.0)
        })[0]
    };
    let attn = |v: &[f64], n: usize, w: &[f64], m: usize| {
        eval(|t| {
            let (v, w) = (matc(t, n, v), matc(t, m, w));
            attention_weights(t, v, w)
        })
    };
    let softplus = |x: f64| (1.0 + x.exp()).ln();

    let cases: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
        ("separation, perfect", vec![imr(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0])], vec![0.0]),
        ("separation, inverted", vec![imr(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0])], vec![1.2]),
        ("separation, tied", vec![imr(&[1.0, 0.0], &[r, r], &[r, r])], vec![0.2]),
        ("contrast gamma 1", vec![imc(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0)], vec![softplus(-1.0)]),
        ("contrast symmetric", vec![imc(&[1.0, 0.0], &[r, r], &[r, r], 8.0)], vec![ln2]),
        ("contrast gamma 2", vec![imc(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 2.0)], vec![softplus(-2.0)]),
        ("identity contrast uniform", vec![nitc(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &[0, 1])], vec![ln2]),
        ("identity contrast shared", vec![nitc(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &[3, 3])], vec![ln2]),
        (
            "cue contrast correct max",
            vec![ditc(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0])],
            vec![2.0 * softplus(-1.0)],
        ),
        ("cue contrast uniform", vec![ditc(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0])], vec![2.0 * 2f64.ln()]),
        ("attention uniform", attn(&[1.0, 1.0, 2.0, 2.0], 2, &[1.0, 1.0, 3.0, 3.0], 2), vec![0.25; 4]),
        ("attention single", attn(&[0.3, -0.2], 1, &[0.7, 0.1], 1), vec![1.0]),
        (
            "attention two regions",
            attn(&[1.0, 0.0, 0.0, 1.0], 2, &[1.0, 0.0], 1),
            vec![1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0)],
        ),
        ("softmax symmetric", softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]),
        ("softmax ln2", softmax(&[ln2, 0.0], 1.0).unwrap(), vec![2.0 / 3.0, 1.0 / 3.0]),
        ("softmax large", softmax(&[1000.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]),
    ];
    // Attention with similarities (ln 2, 0) is realised by choosing regions
    // whose cosine to the single token is exactly ln 2 and 0.
    let c = ln2;
    let s = (1.0 - c * c).sqrt();
    let two_thirds = attn(&[c, s, 0.0, 1.0], 2, &[1.0, 0.0], 1);

    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut check = |name: &str, got: &[f64], want: &[f64]| {
        let err = got
            .iter()
            .zip(want)
            .map(|(g, w)| (g - w).abs())
            .fold(if got.len() == want.len() { 0.0 } else { f64::INFINITY }, f64::max);
        worst = worst.max(err);
        if !(err <= CLOSED_FORM_TOL) {
            failed.push(format!("{name} (err {err:.1e})"));
        }
    };
    for (name, got, want) in &cases {
        check(name, got, want);
    }
    check("attention ln2", &two_thirds, &[2.0 / 3.0, 1.0 / 3.0]);
    let n = cases.len() + 1;
    Verdict {
        id: "3",
        name: "closed-form values",
        pass: failed.is_empty(),
        enforced: true,
        detail: if failed.is_empty() {
            format!("{n} values within {CLOSED_FORM_TOL:.0e} (max err {worst:.1e})")
        } else {
            format!("off: {}", failed.join(", "))
        },
    }
}

fn criterion_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_mass, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (n, m, d) = (rng.gen_range(1..=8), rng.gen_range(1..=12), rng.gen_range(2..=8));
        let v = uniform(&mut rng, n * d);
        let w = uniform(&mut rng, m * d);
        let a = eval(|t| {
            let (v, w) = (matc(t, n, &v), matc(t, m, &w));
            attention_weights(t, v, w)
        });
        let total: f64 = a.iter().sum();
        let img_mass: f64 = (0..n).map(|i| a[i * m..(i + 1) * m].iter().sum::<f64>()).sum();
        worst_mass = worst_mass.max((total - 1.0).abs()).max((img_mass - 1.0).abs());

        let len = rng.gen_range(1..=12);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let shift = rng.gen_range(-50.0..50.0);
        let tau = rng.gen_range(0.05..2.0);
        let base = softmax(&x, tau).unwrap();
        let moved = softmax(&x.iter().map(|v| v + shift).collect::<Vec<_>>(), tau).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    Verdict {
        id: "4",
        name: "normalization invariants",
        pass: worst_mass <= MASS_TOL && worst_shift <= SHIFT_TOL,
        enforced: true,
        detail: format!(
            "1000 instances, attention mass err {worst_mass:.1e} (tol {MASS_TOL:.0e}), softmax shift err {worst_shift:.1e} (tol {SHIFT_TOL:.0e})"
        ),
    }
}

/// Cue selection over K in {1, 3, 5}: cues come from the relevance band,
/// never include the top token, and number min(K, band size).
fn check_cue_sweep() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut violations = 0;
    let mut fallbacks = 0;
    for k in [1, 3, 5] {
        let params = DccParams {
            k,
            ..DccParams::default()
        };
        for _ in 0..1000 {
            let m = rng.gen_range(1..=16);
            let mut profile: Vec<(usize, f64)> = (0..m).map(|j| (j, rng.gen_range(0i32..8) as f64 / 8.0)).collect();
            sort_profile(&mut profile);
            let ranks = percentile_ranks(&profile);
            let band: Vec<usize> = profile
                .iter()
                .zip(&ranks)
                .filter(|(_, &p)| params.band_lo <= p && p < params.band_hi)
                .map(|(&(j, _), _)| j)
                .collect();
            let (cues, fallback) = cue_indices(&profile, &params).unwrap();
            if fallback {
                fallbacks += 1;
                if !band.is_empty() || cues.len() != k.min(m.saturating_sub(1).max(1)) {
                    violations += 1;
                }
                continue;
            }
            let ok = cues.len() == k.min(band.len())
                && cues.iter().all(|j| band.contains(j))
                && !cues.contains(&profile[0].0);
            if !ok {
                violations += 1;
            }
        }
    }
    Verdict {
        id: "extra",
        name: "cue selection over K in {1,3,5}",
        pass: violations == 0,
        enforced: true,
        detail: format!("3000 profiles, {fallbacks} fallbacks, {violations} violations"),
    }
}

fn catalog_vocab() -> Vec<(String, Pos)> {
    let cat = Catalog::default();
    let mut v: Vec<(String, Pos)> = Vec::new();
    v.extend(cat.noun_words().map(|w| (w.to_string(), Pos::Noun)));
    v.extend(cat.adjective_words().map(|w| (w.to_string(), Pos::Adj)));
    v.extend(cat.verb_words().map(|w| (w.to_string(), Pos::Verb)));
    for w in ["a", "the"] {
        v.push((w.to_string(), Pos::Det));
    }
    v.push(("with".into(), Pos::Prep));
    v.push(("and".into(), Pos::Conj));
    v
}

fn differing(a: &Caption, b: &Caption) -> Vec<usize> {
    (0..a.tokens.len()).filter(|&i| a.tokens[i] != b.tokens[i]).collect()
}

/// Checks the contract of one perturbation; `None` means it was inapplicable.
fn perturbation_ok(
    c: &Caption,
    tier: Tier,
    out: &Caption,
    lex: &Lexicon,
    stats: &CorpusStats,
) -> bool {
    if out.pos_tags != c.pos_tags || out.tokens.len() != c.tokens.len() || out.identity_id != c.identity_id {
        return false;
    }
    let diff = differing(c, out);
    match tier {
        Tier::NounSwap => {
            diff.len() == 2
                && diff.iter().all(|&i| c.pos_tags[i] == Pos::Noun)
                && out.tokens[diff[0]] == c.tokens[diff[1]]
                && out.tokens[diff[1]] == c.tokens[diff[0]]
        }
        Tier::Substitute => {
            diff.len() == 1 && {
                let i = diff[0];
                matches!(c.pos_tags[i], Pos::Verb | Pos::Adj) && lex.words(c.pos_tags[i]).contains(&out.tokens[i])
            }
        }
        Tier::MaskFill => {
            diff.len() == 1 && {
                let i = diff[0];
                c.pos_tags[i].is_content()
                    && stats.count(c.pos_tags[i], &out.tokens[i]) > 0
                    && !stats.is_stopword(&out.tokens[i])
            }
        }
        Tier::Visual => false,
    }
}

fn criterion_perturbations() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let vocab = catalog_vocab();
    let lex = Lexicon::default();
    let captions: Vec<Caption> = (0..10_000)
        .map(|i| {
            let len = rng.gen_range(1..=20);
            let words: Vec<&(String, Pos)> = (0..len).map(|_| &vocab[rng.gen_range(0..vocab.len())]).collect();
            Caption::new(
                words.iter().map(|(w, _)| w.clone()).collect(),
                words.iter().map(|(_, p)| *p).collect(),
                i,
            )
            .unwrap()
        })
        .collect();
    let stats = CorpusStats::from_captions(&captions).with_stopwords(["black".to_string()]);
    let (mut applied, mut broken, mut nondeterministic, mut wrongly_skipped) = (0, 0, 0, 0);
    for (i, c) in captions.iter().enumerate() {
        for tier in Tier::TEXT {
            let seed = rng.gen::<u64>() ^ i as u64;
            let out = perturb(c, tier, &lex, &stats, seed);
            if out != perturb(c, tier, &lex, &stats, seed) {
                nondeterministic += 1;
            }
            match out {
                Some(o) => {
                    applied += 1;
                    if !perturbation_ok(c, tier, &o, &lex, &stats) {
                        broken += 1;
                    }
                }
                None => {
                    if tier == Tier::NounSwap {
                        let nouns: BTreeSet<&String> = c
                            .positions_of(|p| p == Pos::Noun)
                            .into_iter()
                            .map(|i| &c.tokens[i])
                            .collect();
                        if nouns.len() >= 2 {
                            wrongly_skipped += 1;
                        }
                    }
                }
            }
        }
    }

    let mut mining_violations = 0;
    for _ in 0..1000 {
        let (n, d) = (rng.gen_range(1..=20), rng.gen_range(2..=8));
        let n_ids = rng.gen_range(1..=5u32);
        let items: Vec<EncodedItem<f32>> = (0..n)
            .map(|_| {
                let g: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                EncodedItem::new(
                    Tensor::matrix(1, d, g.clone()).unwrap(),
                    Tensor::vector(g).unwrap(),
                    rng.gen_range(0..n_ids),
                )
                .unwrap()
            })
            .collect();
        let bank = EmbeddingBank::from_items(Modality::Image, d, items).unwrap();
        let anchor = bank.get(rng.gen_range(0..n)).clone();
        let k = rng.gen_range(1..=6);
        let set = mine_visual_negatives(&anchor, &bank, k).unwrap();
        let others = bank.items().iter().filter(|it| it.identity_id != anchor.identity_id).count();
        let mut last = f32::INFINITY;
        for neg in &set.negatives {
            match neg.item {
                NegativeItem::Visual {
                    index,
                    identity_id,
                    similarity,
                } => {
                    if identity_id == anchor.identity_id
                        || bank.get(index).identity_id == anchor.identity_id
                        || similarity > last
                    {
                        mining_violations += 1;
                    }
                    last = similarity;
                }
                NegativeItem::Text(_) => mining_violations += 1,
            }
        }
        if set.len() != others.min(k) {
            mining_violations += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = applied >= 10_000 && broken == 0 && nondeterministic == 0 && wrongly_skipped == 0 && mining_violations == 0;
    Verdict {
        id: "9",
        name: "perturbation contracts",
        pass,
        enforced: true,
        detail: format!(
            "{applied} perturbations applied ({broken} broken, {nondeterministic} nondeterministic, {wrongly_skipped} wrongly skipped); 1000 mining galleries, {mining_violations} violations; {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

/// Settings used for the end-to-end criteria. The default learning-rate
/// ramp leaves the toy encoders near chance within 12 epochs.
fn e2e_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        lr_start: 3e-4,
        lr_end: 3e-3,
        align_tau: 0.2,
        validate_each_epoch: false,
        ..TrainConfig::default()
    };
    cfg.lamb.weight_decay = 0.01;
    cfg
}

struct E2eRun {
    results: Vec<AblationResult>,
    full_time: Duration,
    gallery_identities: usize,
}

fn run_e2e() -> E2eRun {
    let spec = SyntheticSpec {
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let (train, test) = data.split(0.1, 11).unwrap();
    let rows = table_rows();
    let pick = |names: &[&str]| -> Vec<_> { rows.iter().filter(|r| names.contains(&r.name.as_str())).cloned().collect() };
    let grid = |rows| AblationGrid {
        base: e2e_config(),
        rows,
        mask_k: Some(3),
    };
    let start = Instant::now();
    let mut results = run_ablation(&grid(pick(&["VIII"])), &train, &test).unwrap();
    let full_time = start.elapsed();
    results.extend(run_ablation(&grid(pick(&["0", "I", "II", "III", "IV"])), &train, &test).unwrap());
    E2eRun {
        results,
        full_time,
        gallery_identities: test.identities.len(),
    }
}

fn e2e_verdicts(first: &E2eRun, second: &E2eRun) -> Vec<Verdict> {
    let get = |name: &str| first.results.iter().find(|r| r.name == name).unwrap();
    let full = get("VIII");
    let base = get("0");
    let singles: Vec<&AblationResult> = ["I", "II", "III", "IV"].iter().map(|n| get(n)).collect();

    let chance = 100.0 / first.gallery_identities as f64;
    let target = (20.0 * chance).min(100.0);
    let c5 = Verdict {
        id: "5",
        name: "synthetic end-to-end",
        pass: full.report.rank1 >= target && first.full_time < E2E_BUDGET,
        enforced: false,
        detail: format!(
            "full Rank-1 {:.2} vs target {target:.2} (20 x chance {chance:.2}, {} gallery identities); mAP {:.2}; {:.0}s",
            full.report.rank1,
            first.gallery_identities,
            full.report.map,
            first.full_time.as_secs_f64()
        ),
    };

    let singles_ok = singles.iter().all(|s| full.report.rank1 >= s.report.rank1 && s.report.rank1 >= base.report.rank1);
    let margin = full.report.rank1 - base.report.rank1;
    let c6 = Verdict {
        id: "6",
        name: "ablation ordering",
        pass: singles_ok && margin >= 1.0,
        enforced: false,
        detail: format!(
            "Rank-1 baseline {:.2}, {}, full {:.2}; full - baseline {margin:+.2}",
            base.report.rank1,
            singles
                .iter()
                .map(|s| format!("{} {:.2}", s.name, s.report.rank1))
                .collect::<Vec<_>>()
                .join(", "),
            full.report.rank1
        ),
    };

    let drop = |r: &AblationResult| r.report.rank1 - r.masked.as_ref().unwrap().rank1;
    let (db, df) = (drop(base), drop(full));
    let c7 = Verdict {
        id: "7",
        name: "masking probe",
        pass: db > df,
        enforced: false,
        detail: format!("top-3 noun masking drops baseline Rank-1 by {db:.2}, full by {df:.2}"),
    };

    let a = serde_json::to_string(&first.results).unwrap();
    let b = serde_json::to_string(&second.results).unwrap();
    let c8 = Verdict {
        id: "8",
        name: "determinism",
        pass: a == b,
        enforced: true,
        detail: format!(
            "two runs of {} rows, reports {} ({} bytes)",
            first.results.len(),
            if a == b { "byte-identical" } else { "differ" },
            a.len()
        ),
    };
    vec![c5, c6, c7, c8]
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut verdicts = Vec::new();
    for f in [
        criterion_gradients,
        criterion_metrics,
        criterion_closed_forms,
        criterion_normalization,
        check_cue_sweep,
        criterion_perturbations,
    ] {
        let v = f();
        v.print();
        verdicts.push(v);
    }
    if std::env::var("MEFA_ACCEPT_SKIP_E2E").is_ok_and(|v| v == "1") {
        println!("SKIP  [5-8] training criteria skipped by MEFA_ACCEPT_SKIP_E2E");
    } else {
        let first = run_e2e();
        let second = run_e2e();
        for v in e2e_verdicts(&first, &second) {
            v.print();
            verdicts.push(v);
        }
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation.tsv");
        if std::fs::write(&path, mefa::harness::ablation_tsv(&first.results)).is_ok() {
            println!("ablation table written to {}", path.display());
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria passed", verdicts.len());
    let enforced_failures: Vec<&str> = verdicts.iter().filter(|v| v.enforced && !v.pass).map(|v| v.id).collect();
    if !enforced_failures.is_empty() {
        eprintln!("enforced criteria failed: {}", enforced_failures.join(", "));
        std::process::exit(1);
    }
}
