use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lifelong_diffusion::diffusion::{checkpoint, draw_samples, predict_noise, NoisePredictor};
use lifelong_diffusion::experiment::{run_evaluate, run_pretrain, run_sequence, ExperimentConfig, RunLayout};
use lifelong_diffusion::memory::{load_long_term, load_short_term, save_long_term, save_short_term};
use tempfile::TempDir;

use crate::common;
use crate::{ensure, Check};

/// One tiny pretrained base shared by the training criteria.
struct TinyBase {
    dir: TempDir,
}

impl TinyBase {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn tiny_base() -> Result<&'static TinyBase, String> {
    static BASE: OnceLock<Result<TinyBase, String>> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = common::tiny_experiment(dir.path(), 3);
        run_pretrain(&cfg).map_err(|e| e.to_string())?;
        Ok(TinyBase { dir })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Every file below `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Student-teacher noise-prediction MSE over the task-2 memory samples of
/// a two-task run, 8 noise draws per entry.
fn memory_mse(base: &Path, gamma: f64, use_ecd: bool) -> Result<(f64, usize), String> {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::tiny_experiment(out.path(), 2);
    cfg.train.steps = 150;
    cfg.weights.gamma = gamma;
    cfg.train.ablation.use_ecd = use_ecd;
    run_sequence(&cfg, Some(base), false).map_err(|e| e.to_string())?;

    let layout = RunLayout::new(out.path());
    let (student, _) = checkpoint::load(&layout.checkpoint(2)).map_err(|e| e.to_string())?;
    let (teacher, _) = checkpoint::load(&layout.teacher(2)).map_err(|e| e.to_string())?;
    ensure!(student != teacher, "task 2 left the model unchanged");
    let memory = load_short_term(&layout.short_term(2)).map_err(|e| e.to_string())?;
    ensure!(!memory.is_empty(), "short-term memory is empty");
    let pairs: Vec<_> = memory
        .entries
        .iter()
        .flat_map(|e| {
            let tokens = student.tokenize(&e.prompt).unwrap();
            std::iter::repeat_n((e.image.clone(), tokens), 8)
        })
        .collect();
    let mut rng = common::rng(51);
    let samples = draw_samples(&mut rng, student.schedule(), &pairs);
    let mut mse = 0.0;
    for s in &samples {
        let zt = s.noised(student.schedule()).map_err(|e| e.to_string())?;
        let (a, _) = predict_noise(&student, &zt, &s.tokens, s.t, false).map_err(|e| e.to_string())?;
        let (b, _) = predict_noise(&teacher, &zt, &s.tokens, s.t, false).map_err(|e| e.to_string())?;
        mse += a.mse(&b);
    }
    Ok((mse / samples.len() as f64, samples.len()))
}

/// Criterion 5: with a dominant distillation weight the student stays on
/// the teacher over the memory samples.
pub fn distillation_dominance() -> Check {
    let base = tiny_base()?;
    let (mse, n) = memory_mse(base.path(), 1e4, true)?;
    let (free, _) = memory_mse(base.path(), 1.0, false)?;
    ensure!(mse < 1e-2, "student-teacher MSE {mse:.3e} on memory samples");
    ensure!(mse < free, "distillation did not reduce the drift ({mse:.3e} vs {free:.3e})");
    Ok(format!("student-teacher MSE {mse:.2e} over {n} memory samples ({free:.2e} without distillation)"))
}

/// Criterion 9: bank and checkpoint round-trips and bit-exact resume.
pub fn persistence() -> Check {
    let base = tiny_base()?;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_a = common::tiny_experiment(a.path(), 3);
    let cfg_b = ExperimentConfig {
        out: b.path().to_path_buf(),
        ..cfg_a.clone()
    };
    run_sequence(&cfg_a, Some(base.path()), false).map_err(|e| e.to_string())?;

    let la = RunLayout::new(a.path());
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let long = load_long_term(&la.long_term(3)).map_err(|e| e.to_string())?;
    let short = load_short_term(&la.short_term(3)).map_err(|e| e.to_string())?;
    ensure!(long.len() == 9 && short.len() == 6, "unexpected bank sizes {} / {}", long.len(), short.len());
    save_long_term(&long, &scratch.path().join("long")).map_err(|e| e.to_string())?;
    save_short_term(&short, &scratch.path().join("short")).map_err(|e| e.to_string())?;
    ensure!(
        load_long_term(&scratch.path().join("long")).map_err(|e| e.to_string())? == long
            && tree(&scratch.path().join("long")) == tree(&la.long_term(3)),
        "long-term bank round-trip is not exact"
    );
    ensure!(
        load_short_term(&scratch.path().join("short")).map_err(|e| e.to_string())? == short
            && tree(&scratch.path().join("short")) == tree(&la.short_term(3)),
        "short-term bank round-trip is not exact"
    );
    let (model, tag) = checkpoint::load(&la.checkpoint(3)).map_err(|e| e.to_string())?;
    checkpoint::save(&model, &scratch.path().join("ckpt"), &tag).map_err(|e| e.to_string())?;
    let (again, _) = checkpoint::load(&scratch.path().join("ckpt")).map_err(|e| e.to_string())?;
    ensure!(
        again == model && tree(&scratch.path().join("ckpt")) == tree(&la.checkpoint(3)),
        "checkpoint round-trip is not exact"
    );

    // Interrupt run B during task 3: its marker is missing and the task
    // directory holds a half-written checkpoint.
    run_sequence(&cfg_b, Some(base.path()), false).map_err(|e| e.to_string())?;
    let lb = RunLayout::new(b.path());
    fs::remove_dir_all(lb.task(3)).map_err(|e| e.to_string())?;
    fs::remove_dir_all(lb.long_term(3)).map_err(|e| e.to_string())?;
    fs::remove_dir_all(lb.short_term(3)).map_err(|e| e.to_string())?;
    fs::create_dir_all(lb.checkpoint(3)).map_err(|e| e.to_string())?;
    fs::write(lb.checkpoint(3).join("model.json"), b"{").map_err(|e| e.to_string())?;
    let summary = run_sequence(&cfg_b, Some(base.path()), true).map_err(|e| e.to_string())?;
    ensure!(summary.resumed_after == 2, "resume restarted after task {}", summary.resumed_after);
    run_evaluate(&cfg_a, Some(base.path())).map_err(|e| e.to_string())?;
    run_evaluate(&cfg_b, Some(base.path())).map_err(|e| e.to_string())?;

    let (mut ta, mut tb) = (tree(a.path()), tree(b.path()));
    ta.remove(Path::new("config.json"));
    tb.remove(Path::new("config.json"));
    let differing: Vec<_> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    ensure!(
        ta.len() == tb.len() && differing.is_empty(),
        "resumed run differs in {} of {} files (first: {:?})",
        differing.len(),
        ta.len(),
        differing.first()
    );
    Ok(format!("banks and checkpoint exact; resumed run matches all {} files", ta.len()))
}
