use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use drivelab::analysis::{advantage_distribution, composite_score, pass_at_k};
use drivelab::gen::GeneratorConfig;
use drivelab::io::{generate_dataset, load_vocab, save_vocab, DatasetManifest};
use drivelab::policy::{ModelConfig, PolicyParams};
use drivelab::reward::RewardConfig;
use drivelab::rollout::{closed_loop_eval, sample_group, AgentMode, Episode};
use drivelab::tokenizer::VocabSet;
use drivelab::trainer::{run_finetune, run_pretrain, shape_rewards, AdvantageMode, EpochLog, Stage, TrainConfig};

/// Everything a run needs; every field may be omitted from the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    generator: GeneratorConfig,
    vocab_size: usize,
    vocab_seed: u64,
    model: ModelConfig,
    model_seed: u64,
    pretrain: TrainConfig,
    finetune: TrainConfig,
    reward: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            vocab_size: 64,
            vocab_seed: 0,
            model: ModelConfig::default(),
            model_seed: 0,
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(AdvantageMode::VdGrpo),
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Parser)]
#[command(name = "drivelab", version, about = "Closed-loop token planner: data, training and evaluation")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for every artifact.
    #[arg(long, global = true, env = "DRIVELAB_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval scenario files plus a manifest.
    GenData(GenArgs),
    /// Build per-category motion token vocabularies from the training split.
    BuildVocab(VocabArgs),
    /// Imitation pretraining.
    Pretrain(PretrainArgs),
    /// Group-relative RL fine-tuning against the frozen pretrained world model.
    Finetune(FinetuneArgs),
    /// Greedy closed-loop evaluation; prints a score table and writes CSV.
    Eval(EvalArgs),
    /// pass@k curve from sampled rollouts.
    PassAtK(PassArgs),
    /// |A| distributions for safe vs unsafe groups under both shaping rules.
    AnalyzeAdvantages(AdvArgs),
    /// Write one sampled rollout group as JSON.
    DumpRollouts(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_scenarios: Option<usize>,
    #[arg(long)]
    num_eval: Option<usize>,
    #[arg(long)]
    speeding_rate: Option<f64>,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Grpo,
    VdGrpo,
}

impl ModeArg {
    fn mode(self) -> AdvantageMode {
        match self {
            ModeArg::Grpo => AdvantageMode::Grpo,
            ModeArg::VdGrpo => AdvantageMode::VdGrpo,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModeArg::Grpo => "grpo",
            ModeArg::VdGrpo => "vd-grpo",
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    scenarios_per_epoch: Option<usize>,
    #[command(flatten)]
    train: TrainArgs,
    /// Policy to fine-tune and world/reference model; defaults to the pretrained checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Replay,
    Reactive,
}

#[derive(Args)]
struct ModelArgs {
    /// Ego policy checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// World model checkpoint; defaults to the pretrained checkpoint.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "reactive")]
    mode: EvalMode,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PassArgs {
    #[arg(long, default_value_t = 16)]
    k_max: usize,
    /// Minimum speed score for a successful rollout.
    #[arg(long, default_value_t = 0.8)]
    speed_threshold: f64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct AdvArgs {
    /// Scenarios to sample groups on (from the start of the split).
    #[arg(long, default_value_t = 200)]
    num_groups: usize,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    group_size: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }
    fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }
    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    ensure_parent(p)?;
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn load_params(p: &Path) -> Result<PolicyParams<f64>> {
    PolicyParams::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn episodes(layout: &Layout, split: &str, params: &PolicyParams<f64>) -> Result<Vec<Episode<f64>>> {
    let root = layout.data();
    let manifest = DatasetManifest::load(&root).with_context(|| format!("loading manifest under {}", root.display()))?;
    let vocabs: VocabSet<f64> = load_vocab(&layout.vocab()).context("loading vocabulary (run build-vocab first)")?;
    manifest
        .load_split(&root, split)?
        .into_iter()
        .map(|s| Episode::new(s, &vocabs, params).map_err(Into::into))
        .collect()
}

/// Streams epoch logs to a JSON-lines file.
fn log_writer(path: &Path) -> Result<impl FnMut(&EpochLog, &PolicyParams<f64>) -> drivelab::Result<()>> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(move |l: &EpochLog, _: &PolicyParams<f64>| {
        log::info!("{}", l.to_json_line());
        writeln!(f, "{}", l.to_json_line())?;
        Ok(())
    })
}

fn models(layout: &Layout, m: &ModelArgs) -> Result<(PolicyParams<f64>, PolicyParams<f64>)> {
    let ego = load_params(&m.checkpoint)?;
    let world = load_params(m.world.as_ref().unwrap_or(&layout.checkpoint("pretrained")))?;
    Ok((ego, world))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let layout = Layout { root: cli.out };
    match cli.command {
        Command::GenData(a) => {
            let g = &mut cfg.generator;
            if let Some(v) = a.seed {
                g.seed = v;
            }
            if let Some(v) = a.num_scenarios {
                g.num_scenarios = v;
            }
            if let Some(v) = a.num_eval {
                g.num_eval = v;
            }
            if let Some(v) = a.speeding_rate {
                g.speeding_injection_rate = v;
            }
            let m = generate_dataset(g, &layout.data())?;
            let flagged = m.splits.values().flatten().filter(|e| e.has_injected_speeding).count();
            println!(
                "wrote {} train and {} eval scenarios to {} ({flagged} with injected speeding)",
                m.split("train")?.len(),
                m.split("eval")?.len(),
                layout.data().display()
            );
        }
        Command::BuildVocab(a) => {
            let k = a.k.unwrap_or(cfg.vocab_size);
            let seed = a.seed.unwrap_or(cfg.vocab_seed);
            let root = layout.data();
            let manifest = DatasetManifest::load(&root)?;
            manifest.verify(&root)?;
            let train = manifest.load_split::<f64>(&root, "train")?;
            let v = VocabSet::build(train.iter().flat_map(|s| s.agents.iter()), manifest.generator.dt, k, seed)?;
            ensure_parent(&layout.vocab())?;
            save_vocab(&v, &layout.vocab())?;
            for c in drivelab::scene::Category::ALL {
                let voc = v.get(c);
                println!("{:<10} {:>4} tokens, eps {:.3} m", c.name(), voc.len(), voc.eps);
            }
        }
        Command::Pretrain(a) => {
            cfg.pretrain.stage = Stage::Pretrain;
            a.train.apply(&mut cfg.pretrain);
            let mut params = match &a.init {
                Some(p) => load_params(p)?,
                None => PolicyParams::init(cfg.model.clone(), cfg.model_seed)?,
            };
            let eps = episodes(&layout, "train", &params)?;
            let logs = run_pretrain(&mut params, &eps, &cfg.pretrain, log_writer(&layout.log("pretrain"))?)?;
            let out = layout.checkpoint("pretrained");
            ensure_parent(&out)?;
            params.save(&out)?;
            match logs.last() {
                Some(l) => println!("pretrained {} epochs, final loss {:.4}; saved {}", logs.len(), l.loss, out.display()),
                None => println!("no epochs run; saved {}", out.display()),
            }
        }
        Command::Finetune(a) => {
            let t = &mut cfg.finetune;
            t.stage = Stage::Finetune;
            t.advantage_mode = a.mode.mode();
            if let Some(v) = a.c {
                t.c = v;
            }
            if let Some(v) = a.beta {
                t.beta = v;
            }
            if let Some(v) = a.group_size {
                t.group_size = v;
            }
            if let Some(v) = a.scenarios_per_epoch {
                t.scenarios_per_epoch = Some(v);
            }
            a.train.apply(t);
            let world = load_params(a.init.as_ref().unwrap_or(&layout.checkpoint("pretrained")))?;
            let mut params = world.clone();
            let eps = episodes(&layout, "train", &params)?;
            let name = a.mode.name();
            let logs = run_finetune(&mut params, &world, &eps, &cfg.finetune, &cfg.reward, log_writer(&layout.log(name))?)?;
            let out = layout.checkpoint(name);
            ensure_parent(&out)?;
            params.save(&out)?;
            if let Some(l) = logs.last() {
                println!(
                    "fine-tuned ({name}) {} epochs, final unsafe-group ratio {:.4}; saved {}",
                    logs.len(),
                    l.unsafe_group_ratio.unwrap_or(0.0),
                    out.display()
                );
            }
        }
        Command::Eval(a) => {
            let (ego, world) = models(&layout, &a.model)?;
            let eps = episodes(&layout, &a.model.split, &ego)?;
            let mode = match a.mode {
                EvalMode::Replay => AgentMode::Replay,
                EvalMode::Reactive => AgentMode::Reactive,
            };
            let rollouts = closed_loop_eval(&ego, &world, &eps, mode, a.model.seed, &cfg.reward)?;
            let b: Vec<_> = rollouts.into_iter().map(|r| r.reward).collect();
            let score = composite_score(&b, &cfg.reward)?;
            let mut csv = String::from("scenario,safety_gate,soft_mean,score,comfort,speed,progress,mean_ttc\n");
            for ((ep, s), r) in eps.iter().zip(&score.per_scenario).zip(&b) {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    ep.scenario.id,
                    u8::from(s.safety_gate),
                    s.soft_mean,
                    s.score,
                    r.comfort(),
                    r.speed(),
                    r.progress(),
                    r.mean_ttc()
                ));
            }
            let stem = a.model.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let path = layout.report(&format!("eval_{stem}_{}.csv", a.model.split));
            write_file(&path, &csv)?;
            let n = b.len() as f64;
            let mean = |f: &dyn Fn(&drivelab::RewardBreakdown) -> f64| b.iter().map(f).sum::<f64>() / n;
            println!("{:<12} {:>10}", "metric", "value");
            println!("{:<12} {:>10.2}", "composite", score.aggregate);
            println!("{:<12} {:>10}", "gate_passed", score.per_scenario.iter().filter(|s| s.safety_gate).count());
            println!("{:<12} {:>10}", "scenarios", b.len());
            println!("{:<12} {:>10.4}", "comfort", mean(&|r| r.comfort()));
            println!("{:<12} {:>10.4}", "ttc", mean(&|r| r.mean_ttc()));
            println!("{:<12} {:>10.4}", "speed", mean(&|r| r.speed()));
            println!("{:<12} {:>10.4}", "progress", mean(&|r| r.progress()));
            println!("wrote {}", path.display());
        }
        Command::PassAtK(a) => {
            let (ego, world) = models(&layout, &a.model)?;
            let eps = episodes(&layout, &a.model.split, &ego)?;
            let p = pass_at_k(&ego, &world, &eps, a.k_max, a.model.seed, a.speed_threshold, &cfg.reward)?;
            let stem = a.model.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let path = layout.report(&format!("pass_at_k_{stem}.csv"));
            write_file(&path, &p.to_csv())?;
            print!("{}", p.to_csv());
            println!("wrote {}", path.display());
        }
        Command::AnalyzeAdvantages(a) => {
            let (ego, world) = models(&layout, &a.model)?;
            let eps = episodes(&layout, &a.model.split, &ego)?;
            let g = a.group_size.unwrap_or(cfg.finetune.group_size);
            let c = a.c.unwrap_or(cfg.finetune.c);
            let n = a.num_groups.min(eps.len());
            let groups = eps[..n]
                .iter()
                .enumerate()
                .map(|(i, ep)| sample_group(&ego, &world, ep, g, a.model.seed, i, &cfg.reward))
                .collect::<drivelab::Result<Vec<_>>>()?;
            let labels: Vec<bool> = groups.iter().map(|g| g.is_unsafe()).collect();
            let mut summary = serde_json::Map::new();
            for mode in [ModeArg::Grpo, ModeArg::VdGrpo] {
                let tc = TrainConfig {
                    advantage_mode: mode.mode(),
                    c,
                    ..cfg.finetune.clone()
                };
                let adv = groups
                    .iter()
                    .map(|g| shape_rewards(&g.rewards(), &tc))
                    .collect::<drivelab::Result<Vec<_>>>()?;
                let d = advantage_distribution(&adv, &labels)?;
                write_file(&layout.report(&format!("advantages_{}.csv", mode.name())), &d.to_csv())?;
                let max = |s: &Option<drivelab::analysis::AbsAdvantageSummary>| s.as_ref().map(|x| x.max);
                println!(
                    "{:<8} safe max|A| {:>10} unsafe max|A| {:>10}",
                    mode.name(),
                    max(&d.safe).map_or("-".into(), |v| format!("{v:.4}")),
                    max(&d.unsafe_).map_or("-".into(), |v| format!("{v:.4}"))
                );
                summary.insert(mode.name().into(), serde_json::to_value(&d)?);
            }
            println!("{} of {n} groups unsafe", labels.iter().filter(|&&u| u).count());
            write_file(&layout.report("advantages.json"), &serde_json::to_string_pretty(&summary)?)?;
        }
        Command::DumpRollouts(a) => {
            let (ego, world) = models(&layout, &a.model)?;
            let eps = episodes(&layout, &a.model.split, &ego)?;
            let Some(ep) = eps.get(a.index) else {
                bail!("split {} has {} scenarios; index {} is out of range", a.model.split, eps.len(), a.index);
            };
            let g = a.group_size.unwrap_or(cfg.finetune.group_size);
            let group = sample_group(&ego, &world, ep, g, a.model.seed, a.index, &cfg.reward)?;
            let path = layout.report(&format!("rollouts_{}.json", ep.scenario.id));
            write_file(&path, &serde_json::to_string_pretty(&group)?)?;
            println!("wrote {} rollouts to {}", group.rollouts.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
