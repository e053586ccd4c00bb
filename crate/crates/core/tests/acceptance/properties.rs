use lifelong_diffusion::autograd::{Graph, Tensor, Var};
use lifelong_diffusion::diffusion::{
    draw_samples, ldm_loss, sample, ArchConfig, DenoiserModel, NoisePredictor, NoisedSample,
    SamplerConfig, ScheduleConfig, TokenSequence,
};
use lifelong_diffusion::guidance::{
    clul_loss, dal_loss, evaluate_guidance, extract_mask, gaussian_kernel3, guided_sample, oaa_loss,
    refine_latent, GuidanceConfig, RegionMasks,
};
use lifelong_diffusion::memory::{
    generate_candidates, select_short_term, BankConfig, LongTermBank,
};
use lifelong_diffusion::metrics::{
    fit_extractor, image_alignment_features, text_alignment_features, tfr, AlignmentMatrix,
    ExtractorConfig, FeatureExtractor,
};
use lifelong_diffusion::params::TrainScope;
use lifelong_diffusion::trainer::{
    combined_loss, ecd_loss, tame_loss, Ablation, LossWeights, StepBatch, TeacherSnapshot,
};
use lifelong_diffusion::data::{default_templates, pretraining_corpus};
use rand::Rng;

use crate::common::{self, central, rel_err, CraftedDenoiser};
use crate::{ensure, Check};

fn random_image(rng: &mut lifelong_diffusion::seed::Rng, size: usize) -> Tensor {
    Tensor::new(vec![3, size, size], common::uniform(rng, 3 * size * size, -1.0, 1.0))
}

fn batch_of(
    rng: &mut lifelong_diffusion::seed::Rng,
    model: &DenoiserModel,
    prompt: &str,
    n: usize,
) -> Vec<NoisedSample> {
    let size = model.arch().resolution;
    let pairs: Vec<(Tensor, TokenSequence)> = (0..n)
        .map(|_| (random_image(rng, size), model.tokenize(prompt).unwrap()))
        .collect();
    draw_samples(rng, model.schedule(), &pairs)
}

fn perturbed(model: &DenoiserModel, seed: u64, scale: f64) -> DenoiserModel {
    let mut m = model.clone();
    let mut rng = common::rng(seed);
    for i in 0..m.params().len() {
        let v = m.params().value(i).clone();
        let noise = common::uniform(&mut rng, v.len(), -scale, scale);
        let data = v.data().iter().zip(noise).map(|(a, b)| a + b).collect();
        m.params_mut().set(i, Tensor::new(v.shape().to_vec(), data));
    }
    m
}

/// Scalar loss of `model` under `f`, parameters frozen.
fn loss_at(model: &DenoiserModel, f: &dyn Fn(&mut Graph, &DenoiserModel, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let p = model.bind(&mut g, &TrainScope::Frozen);
    let v = f(&mut g, model, &p);
    g.scalar_value(v)
}

/// Analytic directional derivative `grad · v` against a central difference
/// of `loss(theta + h v)`, over every parameter.
fn directional_check(
    model: &DenoiserModel,
    seed: u64,
    f: &dyn Fn(&mut Graph, &DenoiserModel, &[Var]) -> Var,
) -> Result<(f64, f64), String> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, &TrainScope::All);
    let loss = f(&mut g, model, &params);
    let grads = g.backward(loss);
    let mut rng = common::rng(seed);
    let dirs: Vec<Vec<f64>> = (0..model.params().len())
        .map(|i| common::uniform(&mut rng, model.params().value(i).len(), -1.0, 1.0))
        .collect();
    let analytic: f64 = params
        .iter()
        .zip(&dirs)
        .map(|(&p, d)| grads.get(p).data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |h: f64| {
        let mut m = model.clone();
        for (i, d) in dirs.iter().enumerate() {
            let v = m.params().value(i).clone();
            let data = v.data().iter().zip(d).map(|(a, b)| a + h * b).collect();
            m.params_mut().set_exact(i, Tensor::new(v.shape().to_vec(), data));
        }
        loss_at(&m, f)
    };
    let numeric = central(shifted, 0.0, 1e-5);
    Ok((analytic, numeric))
}

/// Criterion 1: decomposition of the objective and gradient checks.
pub fn loss_decomposition() -> Check {
    let mut base = common::tiny_model(3);
    base.register_personalized("V1").map_err(|e| e.to_string())?;
    base.register_personalized("V2").map_err(|e| e.to_string())?;
    let student = perturbed(&base, 4, 0.02);
    let teacher = TeacherSnapshot::of(&perturbed(&base, 5, 0.05));
    let mut rng = common::rng(6);
    let batch = StepBatch {
        task: batch_of(&mut rng, &student, "a photo of V2 duck", 2),
        priors: vec![
            batch_of(&mut rng, &student, "a photo of dog", 2),
            batch_of(&mut rng, &student, "a photo of duck", 2),
        ],
        rehearsal: vec![batch_of(&mut rng, &student, "a rendering of V1 dog", 2)],
    };
    let weights = LossWeights {
        lambda: 0.8,
        alpha: 0.7,
        beta_tame: 0.4,
        gamma: 2.5,
    };

    let mut worst = 0.0f64;
    let ablations = [(true, true), (true, false), (false, true), (false, false)];
    for (k, (use_tame, use_ecd)) in [(2, (true, true))].into_iter().chain(ablations.map(|a| (2, a))).chain([(1, (true, true))]) {
        let ablation = Ablation { use_tame, use_ecd };
        let mut b = batch.clone();
        if k == 1 {
            b.priors.truncate(1);
            b.rehearsal.clear();
        }
        let mut g = Graph::new();
        let p = student.bind(&mut g, &TrainScope::Frozen);
        let terms = combined_loss(&mut g, &student, &p, Some(&teacher), k, &b, &weights, ablation)
            .map_err(|e| e.to_string())?;
        let (task, tame, ecd, total) = (
            g.scalar_value(terms.task),
            g.scalar_value(terms.tame),
            g.scalar_value(terms.ecd),
            g.scalar_value(terms.total),
        );
        worst = worst.max((total - (task + tame + ecd)).abs());

        let task_alone = loss_at(&student, &|g, m, p| ldm_loss(g, m, p, &b.task).unwrap());
        ensure!(task == task_alone, "task term differs from ldm_loss");
        if k > 1 && use_tame {
            let alone = loss_at(&student, &|g, m, p| {
                tame_loss(g, m, p, k, &b.rehearsal, &b.priors, weights.alpha, weights.beta_tame).unwrap()
            });
            ensure!(tame == alone, "tame term differs from tame_loss");
        }
        if k > 1 && use_ecd {
            let alone = loss_at(&student, &|g, m, p| {
                ecd_loss(g, m, p, Some(&teacher), k, &b.rehearsal, weights.gamma).unwrap()
            });
            ensure!(ecd == alone && ecd > 0.0, "ecd term differs from ecd_loss");
        } else {
            ensure!(ecd == 0.0, "disabled ecd term is not zero");
        }
    }
    ensure!(worst < 1e-6, "combined loss misses the sum of its terms by {worst:e}");

    let mut fd_worst = 0.0f64;
    let ldm = |g: &mut Graph, m: &DenoiserModel, p: &[Var]| ldm_loss(g, m, p, &batch.task).unwrap();
    let combined = |g: &mut Graph, m: &DenoiserModel, p: &[Var]| {
        combined_loss(g, m, p, Some(&teacher), 2, &batch, &weights, Ablation::default())
            .unwrap()
            .total
    };
    for (seed, f) in [(11u64, &ldm as &dyn Fn(&mut Graph, &DenoiserModel, &[Var]) -> Var), (12, &combined)] {
        let (a, n) = directional_check(&student, seed, f)?;
        fd_worst = fd_worst.max(rel_err(a, n));
    }
    ensure!(fd_worst < 1e-4, "parameter gradient relative error {fd_worst:e}");

    let guidance_worst = guidance_gradient()?;
    Ok(format!(
        "decomposition error {worst:.1e}, parameter FD error {fd_worst:.1e}, guidance FD error {guidance_worst:.1e}"
    ))
}

/// Finite-difference check of the guidance gradient and of one refinement
/// step on the crafted denoiser, per coordinate of `z`.
fn guidance_gradient() -> Result<f64, String> {
    let model = CraftedDenoiser::new();
    let tokens = model.tokenize("a photo of V1 dog and V2 cat").map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (seed, use_caa, use_oaa) in [(1u64, true, true), (2, true, false), (3, false, true)] {
        let cfg = GuidanceConfig {
            use_caa,
            use_oaa,
            ..GuidanceConfig::default()
        };
        let mut rng = common::rng(seed);
        let z = Tensor::new(vec![1, 4, 4], common::uniform(&mut rng, 16, -1.5, 1.5));
        let eval = evaluate_guidance(&model, &z, &tokens, 500, &cfg, true).map_err(|e| e.to_string())?;
        let grad = eval.grad.ok_or("no guidance gradient")?;
        let total_at = |zz: &Tensor| {
            evaluate_guidance(&model, zz, &tokens, 500, &cfg, false)
                .map(|e| e.total(&cfg))
                .unwrap()
        };
        let step = 0.37;
        let (refined, _) = refine_latent(&model, &z, &tokens, 500, &cfg, step).map_err(|e| e.to_string())?;
        let gmax = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..16 {
            let numeric = central(
                |h| {
                    let mut zz = z.clone();
                    zz.data_mut()[i] += h;
                    total_at(&zz)
                },
                0.0,
                1e-6,
            );
            let scale = grad.data()[i].abs().max(numeric.abs()).max(1e-3 * gmax);
            worst = worst.max((grad.data()[i] - numeric).abs() / scale);
            let moved = refined.data()[i] - z.data()[i];
            let expected = -step * numeric;
            let scale = moved.abs().max(expected.abs()).max(1e-3 * step * gmax);
            worst = worst.max((moved - expected).abs() / scale);
        }
    }
    ensure!(worst < 1e-4, "guidance gradient relative error {worst:e}");
    Ok(worst)
}

fn brute_force_pick(long: &LongTermBank, feats: &[Vec<Vec<f64>>], beta: f64) -> Vec<usize> {
    let entries = long.entries();
    let mut picks = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (a, f) in feats[i].iter().enumerate() {
            let (mut diversity, mut count) = (0.0, 0usize);
            for (j, other) in entries.iter().enumerate() {
                if other.task == entry.task {
                    continue;
                }
                for g in &feats[j] {
                    let cos: f64 = f.iter().zip(g).map(|(x, y)| x * y).sum();
                    diversity += 1.0 - cos;
                    count += 1;
                }
            }
            let diversity = if count == 0 { 0.0 } else { diversity / count as f64 };
            let fidelity: f64 = f.iter().zip(&entry.feature).map(|(x, y)| x * y).sum();
            let s = diversity + beta * fidelity;
            if s > best.0 {
                best = (s, a);
            }
        }
        picks.push(best.1);
    }
    picks
}

fn tiny_extractor(model: &DenoiserModel) -> Result<FeatureExtractor, String> {
    let corpus = pretraining_corpus(200, 8, &default_templates(), 7).map_err(|e| e.to_string())?;
    let cfg = ExtractorConfig {
        hidden: 16,
        dim: 8,
        steps: 30,
        batch: 16,
        ..ExtractorConfig::default()
    };
    fit_extractor(&corpus, model.vocab(), &cfg, 8).map_err(|e| e.to_string())
}

/// Criterion 2: short-term selection against exhaustive enumeration.
pub fn memory_oracle() -> Check {
    let mut model = common::tiny_model(9);
    for t in ["V1", "V2", "V3"] {
        model.register_personalized(t).map_err(|e| e.to_string())?;
    }
    let ext = tiny_extractor(&model)?;
    let nouns = ["dog", "duck", "cat"];
    let sampler = SamplerConfig {
        steps: 4,
        guidance_scale: 3.0,
    };
    let mut rng = common::rng(10);
    let mut compared = 0;
    for instance in 0..20u64 {
        let tasks = rng.random_range(1..=3usize);
        let mut long = LongTermBank::new();
        for task in 1..=tasks {
            let n = rng.random_range(1..=3usize);
            let entries = (0..n)
                .map(|_| {
                    (
                        common::unit(&mut rng, ext.dim()),
                        format!("a photo of V{task} {}", nouns[task - 1]),
                    )
                })
                .collect();
            long.push_task(task, entries).map_err(|e| e.to_string())?;
        }
        let cfg = BankConfig {
            eta: rng.random_range(1..=8usize),
            beta_score: rng.random_range(0.0..2.0),
        };
        let seed = 100 + instance;
        let bank = select_short_term(&model, &long, &ext, &cfg, &sampler, seed).map_err(|e| e.to_string())?;
        let images = generate_candidates(&model, &long, cfg.eta, &sampler, seed).map_err(|e| e.to_string())?;
        let feats: Vec<Vec<Vec<f64>>> = images
            .iter()
            .map(|c| c.iter().map(|x| ext.encode_image(x).unwrap()).collect())
            .collect();
        let oracle = brute_force_pick(&long, &feats, cfg.beta_score);
        ensure!(bank.entries.len() == long.len(), "instance {instance}: one winner per entry expected");
        for (i, (entry, &a)) in bank.entries.iter().zip(&oracle).enumerate() {
            ensure!(
                entry.candidate == a && entry.image == images[i][a],
                "instance {instance}, entry {i}: picked {} but enumeration gives {a}",
                entry.candidate
            );
            ensure!(entry.task == long.entries()[i].task, "instance {instance}: task label mismatch");
            compared += 1;
        }
    }
    Ok(format!("20 instances, {compared} selections match enumeration"))
}

/// Criterion 3: guidance no-op equivalence and seed reproducibility.
pub fn guidance_noop() -> Check {
    let mut cases = 0;
    for (arch, sampler) in [
        (common::tiny_arch(), SamplerConfig::default()),
        (ArchConfig::default(), SamplerConfig::desk()),
    ] {
        let mut model = DenoiserModel::new(arch, ScheduleConfig::default(), 17).map_err(|e| e.to_string())?;
        model.register_personalized("V1").map_err(|e| e.to_string())?;
        model.register_personalized("V2").map_err(|e| e.to_string())?;
        let model = perturbed(&model, 18, 0.05);
        let prompt = "a photo of V1 dog and V2 cat";
        for seed in [3u64, 41] {
            let plain = sample(&model, prompt, &sampler, seed).map_err(|e| e.to_string())?;
            let again = sample(&model, prompt, &sampler, seed).map_err(|e| e.to_string())?;
            ensure!(plain == again, "sample is not reproducible");
            let other = sample(&model, prompt, &sampler, seed + 1).map_err(|e| e.to_string())?;
            ensure!(plain != other, "different seeds gave the same image");
            let noops = [
                GuidanceConfig::disabled(),
                GuidanceConfig {
                    step_size: 0.0,
                    ..GuidanceConfig::default()
                },
                GuidanceConfig {
                    iterations: 0,
                    ..GuidanceConfig::default()
                },
            ];
            for cfg in &noops {
                let (img, report) = guided_sample(&model, prompt, cfg, &sampler, seed).map_err(|e| e.to_string())?;
                ensure!(img == plain, "inactive guidance changed the sample ({cfg:?})");
                ensure!(report.rows.len() == sampler.steps, "report misses timesteps");
                cases += 1;
            }
            let on = GuidanceConfig::default();
            let (a, ra) = guided_sample(&model, prompt, &on, &sampler, seed).map_err(|e| e.to_string())?;
            let (b, rb) = guided_sample(&model, prompt, &on, &sampler, seed).map_err(|e| e.to_string())?;
            ensure!(a == b && ra == rb, "guided sampling is not reproducible");
            ensure!(a != plain, "active guidance left the sample unchanged");
            ensure!(
                ra.rows.iter().all(|r| r.clul.is_finite() && r.dal.is_finite() && r.oaa.is_finite()),
                "non-finite guidance loss in report"
            );
            cases += 1;
        }
    }
    Ok(format!("{cases} no-op and reproducibility cases bit-identical"))
}

fn column_maps(g: &mut Graph, cols: &[Vec<f64>]) -> Var {
    let n = cols[0].len();
    let s = cols.len();
    let mut data = vec![0.0; n * s];
    for (j, c) in cols.iter().enumerate() {
        for (p, v) in c.iter().enumerate() {
            data[p * s + j] = *v;
        }
    }
    g.constant(Tensor::new(vec![n, s], data))
}

fn reflect(i: isize, n: isize) -> usize {
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// Criterion 4: the analytic guidance cases.
pub fn guidance_analytic() -> Check {
    let mut checks = 0;
    let mut g = Graph::new();

    // CLUL: uniform 0.25 on a 2×2 grid, right half forbidden for concept 0.
    let halves = RegionMasks::stripes(2, 2, 2).map_err(|e| e.to_string())?;
    let one = RegionMasks {
        masks: vec![halves.masks[0].clone()],
        ..halves.clone()
    };
    let m = column_maps(&mut g, &[vec![0.25; 4]]);
    let v = clul_loss(&mut g, &[m], &[0], &one).map_err(|e| e.to_string())?;
    ensure!(g.scalar_value(v) == 0.125, "uniform CLUL case gave {}", g.scalar_value(v));
    let inside = column_maps(&mut g, &[vec![0.5, 0.0, 0.5, 0.0]]);
    let v = clul_loss(&mut g, &[inside], &[0], &one).map_err(|e| e.to_string())?;
    ensure!(g.scalar_value(v) == 0.0, "attention inside the allowed half is penalized");
    checks += 2;

    // CLUL explicit-loop oracle: 2 layers, 2 concepts on a 4×4 grid.
    let mut rng = common::rng(21);
    let regions = RegionMasks::stripes(2, 4, 4).map_err(|e| e.to_string())?;
    let layers: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..3).map(|_| common::uniform(&mut rng, 16, 0.0, 1.0)).collect())
        .collect();
    let maps: Vec<Var> = layers.iter().map(|l| column_maps(&mut g, l)).collect();
    let v = clul_loss(&mut g, &maps, &[0, 2], &regions).map_err(|e| e.to_string())?;
    let mut oracle = 0.0;
    for l in &layers {
        for (c, &i) in [0usize, 2].iter().enumerate() {
            for p in 0..16 {
                let forbidden = if c == 0 { p % 4 >= 2 } else { p % 4 < 2 };
                if forbidden {
                    oracle += l[i][p] * l[i][p];
                }
            }
        }
    }
    oracle /= 4.0;
    ensure!((g.scalar_value(v) - oracle).abs() < 1e-6, "CLUL differs from loop oracle");
    for (a, b) in regions.masks[0].iter().zip(&regions.masks[1]) {
        ensure!(a * b == 0.0 && a + b == 1.0, "2-concept region masks are not complementary");
    }
    checks += 2;

    // DAL floor and substitution.
    let kernel = gaussian_kernel3(0.5);
    let ones = column_maps(&mut g, &[vec![1.0; 9]]);
    let v = dal_loss(&mut g, &[ones], &[0], 3, 3, kernel).map_err(|e| e.to_string())?;
    ensure!(g.scalar_value(v).abs() < 1e-12, "DAL at smoothed max 1 is {}", g.scalar_value(v));
    let flat = column_maps(&mut g, &[vec![0.3; 9]]);
    let v = dal_loss(&mut g, &[flat], &[0], 3, 3, kernel).map_err(|e| e.to_string())?;
    ensure!((g.scalar_value(v) - 0.7).abs() < 1e-12, "DAL at smoothed max 0.3 is {}", g.scalar_value(v));
    checks += 2;

    // DAL convolution oracle on a 3×3 map.
    let map = common::uniform(&mut rng, 9, 0.0, 1.0);
    let m = column_maps(&mut g, std::slice::from_ref(&map));
    let v = dal_loss(&mut g, &[m], &[0], 3, 3, kernel).map_err(|e| e.to_string())?;
    let (e1, e2) = ((-2.0f64).exp(), (-4.0f64).exp());
    let norm = 1.0 + 4.0 * e1 + 4.0 * e2;
    let weight = |dy: isize, dx: isize| match dy.abs() + dx.abs() {
        0 => 1.0 / norm,
        1 => e1 / norm,
        _ => e2 / norm,
    };
    let mut smax = f64::NEG_INFINITY;
    for y in 0..3isize {
        for x in 0..3isize {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    acc += weight(dy, dx) * map[reflect(y + dy, 3) * 3 + reflect(x + dx, 3)];
                }
            }
            smax = smax.max(acc);
        }
    }
    ensure!((g.scalar_value(v) - (1.0 - smax)).abs() < 1e-6, "DAL differs from convolution oracle");
    ensure!(
        matches!(dal_loss(&mut g, &[m], &[], 3, 3, kernel), Err(lifelong_diffusion::Error::EmptyTarget)),
        "empty personalized set accepted"
    );
    checks += 2;

    // Activation masks.
    ensure!(extract_mask(&[0.6, 0.7, 0.8], 0.5) == vec![1.0; 3], "saturated mask");
    ensure!(
        extract_mask(&[0.9, 0.5, 0.1, 0.4], 0.5) == vec![1.0, 1.0, 0.0, 0.0],
        "threshold example"
    );
    let map = common::uniform(&mut rng, 16, 0.0, 1.0);
    let mx = map.iter().copied().fold(f64::MIN, f64::max);
    let oracle: Vec<f64> = map.iter().map(|&v| if v > 0.5 * mx { 1.0 } else { 0.0 }).collect();
    ensure!(extract_mask(&map, 0.5) == oracle, "mask differs from comparison oracle");
    checks += 3;

    // OAA floors: columns 0, 1 are concepts; 2, 3 the personalized tokens
    // paired with them.
    let mask = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
    let pairing = [(2, 0), (3, 1)];
    let concept_cols = [vec![0.5; 4], vec![0.5; 4]];
    let matched = column_maps(
        &mut g,
        &[concept_cols[0].clone(), concept_cols[1].clone(), vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]],
    );
    let v = oaa_loss(&mut g, &[matched], &[0, 1], &[2, 3], std::slice::from_ref(&mask), &pairing).map_err(|e| e.to_string())?;
    ensure!(g.scalar_value(v) == 0.0, "OAA floor is {}", g.scalar_value(v));
    let half = column_maps(
        &mut g,
        &[concept_cols[0].clone(), concept_cols[1].clone(), vec![1.0, 1.0, 0.3, 0.2], vec![0.0, 0.0, 1.0, 1.0]],
    );
    let v = oaa_loss(&mut g, &[half], &[0, 1], &[2, 3], std::slice::from_ref(&mask), &pairing).map_err(|e| e.to_string())?;
    let expected = (0.09 + 0.04) / 2.5 / 2.0;
    ensure!(
        (g.scalar_value(v) - expected).abs() < 1e-12,
        "OAA with one unmatched leak is {}, expected {expected}",
        g.scalar_value(v)
    );
    ensure!(
        matches!(
            oaa_loss(&mut g, &[half], &[0, 1], &[2, 3], std::slice::from_ref(&mask), &[(2, 0)]),
            Err(lifelong_diffusion::Error::Pairing(3))
        ),
        "unpaired personalized token accepted"
    );
    checks += 3;

    // OAA loop oracle: 1 layer, 2 concepts, 2 personalized, random maps.
    let cols: Vec<Vec<f64>> = (0..4).map(|_| common::uniform(&mut rng, 16, 0.01, 1.0)).collect();
    let masks: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| f64::from(rng.random_range(0..2u8))).collect()).collect();
    let m = column_maps(&mut g, &cols);
    let v = oaa_loss(&mut g, &[m], &[0, 1], &[2, 3], std::slice::from_ref(&masks), &pairing).map_err(|e| e.to_string())?;
    let mut oracle = 0.0;
    for (ci, concept) in [0usize, 1].iter().enumerate() {
        for &(j, paired) in &pairing {
            let denom: f64 = cols[j].iter().sum();
            let mut s = 0.0;
            for p in 0..16 {
                if masks[ci][p] == 1.0 {
                    let r = if paired == *concept { 1.0 - cols[j][p] } else { cols[j][p] };
                    s += r * r;
                }
            }
            oracle += s / denom;
        }
    }
    oracle /= 2.0;
    ensure!((g.scalar_value(v) - oracle).abs() < 1e-6, "OAA differs from loop oracle");
    checks += 1;

    Ok(format!("{checks} analytic guidance cases hold"))
}

/// Criterion 8: metric identities.
pub fn metric_identities() -> Check {
    let mut m = AlignmentMatrix::new();
    for (k, l, ia) in [(1, 1, 80.0), (2, 1, 80.0), (2, 2, 70.0), (3, 1, 80.0), (3, 2, 70.0), (3, 3, 60.0)] {
        m.set(k, l, ia, ia / 2.0).map_err(|e| e.to_string())?;
    }
    let zero = tfr(&m, 3).map_err(|e| e.to_string())?;
    ensure!(zero == (0.0, 0.0), "no-forgetting TFR is {zero:?}");

    let mut m = AlignmentMatrix::new();
    for (k, l, ia) in [(1, 1, 80.0), (2, 1, 79.0), (2, 2, 70.0), (3, 1, 78.0), (3, 2, 69.0), (3, 3, 65.0)] {
        m.set(k, l, ia, 0.0).map_err(|e| e.to_string())?;
    }
    let (ia, _) = tfr(&m, 3).map_err(|e| e.to_string())?;
    ensure!(ia == 1.5, "hand-computed TFR example gave {ia}");

    let mut rng = common::rng(31);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = 16;
        let q = common::orthogonal(&mut rng, d);
        let gen: Vec<Vec<f64>> = (0..5).map(|_| common::unit(&mut rng, d)).collect();
        let refs: Vec<Vec<f64>> = (0..4).map(|_| common::unit(&mut rng, d)).collect();
        let text = common::unit(&mut rng, d);
        let rot = |v: &Vec<Vec<f64>>| v.iter().map(|x| common::rotate(&q, x)).collect::<Vec<_>>();
        let ia = image_alignment_features(&gen, &refs).map_err(|e| e.to_string())?;
        let ia_r = image_alignment_features(&rot(&gen), &rot(&refs)).map_err(|e| e.to_string())?;
        let ta = text_alignment_features(&gen, &text).map_err(|e| e.to_string())?;
        let ta_r = text_alignment_features(&rot(&gen), &common::rotate(&q, &text)).map_err(|e| e.to_string())?;
        worst = worst.max((ia - ia_r).abs()).max((ta - ta_r).abs());
    }
    ensure!(worst < 1e-6, "rotation changed IA/TA by {worst:e}");
    Ok(format!("TFR identities exact, rotation drift {worst:.1e}"))
}
