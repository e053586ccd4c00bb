use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use lifelong_diffusion::diffusion::checkpoint;
use lifelong_diffusion::experiment::{
    run_evaluate, run_pretrain, run_sequence, ExperimentConfig, Overrides, RunLayout,
};
use lifelong_diffusion::guidance::{guided_sample, GuidanceConfig};
use lifelong_diffusion::metrics::tfr;
use tempfile::TempDir;

use crate::common;
use crate::{ensure, Check};

const BASE_SEED: u64 = 11;
const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Method {
    Full,
    FineTune,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::FineTune => "ft",
        }
    }
}

/// The shared 16×16 base plus every sequence run finished so far.
struct Study {
    root: TempDir,
    runs: Mutex<BTreeMap<(Method, u64), f64>>,
}

fn sequence_config(out: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.concepts = vec![
        common::concept(0, "dog", 200.0),
        common::concept(1, "duck", 45.0),
        common::concept(2, "cat", 300.0),
    ];
    cfg
}

fn study() -> Result<&'static Study, String> {
    static STUDY: OnceLock<Result<Study, String>> = OnceLock::new();
    STUDY
        .get_or_init(|| {
            let root = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = sequence_config(&root.path().join("base"), BASE_SEED);
            run_pretrain(&cfg).map_err(|e| e.to_string())?;
            Ok(Study {
                root,
                runs: Mutex::new(BTreeMap::new()),
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

impl Study {
    fn base(&self) -> PathBuf {
        self.root.path().join("base")
    }

    fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.root.path().join(format!("{}-{seed}", method.label()))
    }

    /// Trains and evaluates one sequence (once) and returns its final TFR-IA.
    fn tfr_ia(&self, method: Method, seed: u64) -> Result<f64, String> {
        if let Some(v) = self.runs.lock().unwrap().get(&(method, seed)) {
            return Ok(*v);
        }
        let mut cfg = sequence_config(&self.run_dir(method, seed), seed);
        cfg.apply(&Overrides {
            no_tame: method == Method::FineTune,
            no_ecd: method == Method::FineTune,
            ..Overrides::default()
        });
        run_sequence(&cfg, Some(&self.base()), false).map_err(|e| e.to_string())?;
        let matrix = run_evaluate(&cfg, Some(&self.base())).map_err(|e| e.to_string())?;
        let (ia, _) = tfr(&matrix, 3).map_err(|e| e.to_string())?;
        self.runs.lock().unwrap().insert((method, seed), ia);
        Ok(ia)
    }
}

/// Criterion 6: the full objective forgets less than plain fine-tuning.
pub fn forgetting_direction() -> Check {
    let study = study()?;
    let mut mean = BTreeMap::new();
    let mut per_seed = Vec::new();
    for method in [Method::Full, Method::FineTune] {
        let values: Vec<f64> = SEEDS
            .iter()
            .map(|&s| study.tfr_ia(method, s))
            .collect::<Result<_, _>>()?;
        per_seed.push(format!(
            "{} [{}]",
            method.label(),
            values.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(", ")
        ));
        mean.insert(method, values.iter().sum::<f64>() / values.len() as f64);
    }
    let (full, ft) = (mean[&Method::Full], mean[&Method::FineTune]);
    let detail = format!("mean TFR-IA full {full:.2}, FT {ft:.2}; per seed {}", per_seed.join(", "));
    ensure!(ft > 0.0, "fine-tuning shows no forgetting, so the relative gap is undefined; {detail}");
    let gap = (ft - full) / ft;
    ensure!(
        full < ft && gap >= 0.2,
        "relative gap {:.1}% (need >= 20% in favour of full); {detail}",
        100.0 * gap
    );
    Ok(format!("relative gap {:.1}%; {detail}", 100.0 * gap))
}

/// Criterion 7: CAA raises the weakest personalized token's attention.
pub fn neglect_mitigation() -> Check {
    let study = study()?;
    study.tfr_ia(Method::Full, 1)?;
    let layout = RunLayout::new(study.run_dir(Method::Full, 1));
    let (model, _) = checkpoint::load(&layout.checkpoint(3)).map_err(|e| e.to_string())?;
    let sampler = sequence_config(Path::new("."), 1).eval.sampler;
    let on = GuidanceConfig {
        use_caa: true,
        use_oaa: false,
        ..GuidanceConfig::default()
    };
    let off = GuidanceConfig::disabled();
    let prompts = [
        "a photo of V1 dog and V2 duck",
        "a photo of V1 dog and V3 cat",
        "a photo of V2 duck and V3 cat",
    ];
    let mut wins = 0;
    let mut lines = Vec::new();
    for case in 0..10u64 {
        let prompt = prompts[case as usize % prompts.len()];
        let seed = 700 + case;
        let (_, r_on) = guided_sample(&model, prompt, &on, &sampler, seed).map_err(|e| e.to_string())?;
        let (_, r_off) = guided_sample(&model, prompt, &off, &sampler, seed).map_err(|e| e.to_string())?;
        let a = r_on.mean_min_token_max().ok_or("empty report")?;
        let b = r_off.mean_min_token_max().ok_or("empty report")?;
        if a > b {
            wins += 1;
        }
        lines.push(format!("{a:.3}/{b:.3}"));
    }
    let detail = format!("{wins}/10 cases higher with CAA (on/off: {})", lines.join(" "));
    ensure!(wins >= 8, "{detail}");
    Ok(detail)
}
