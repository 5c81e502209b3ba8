#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adapters"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic language spec. All splits of one language share
/// `prototype_seed` and `tag`.
pub fn synth_spec(vocab: usize, d_in: usize, n: usize, seed: u64, tag: &str, prototype_seed: u64) -> String {
    format!(
        "vocab_size = {vocab}\nd_in = {d_in}\nframes_per_token = [2, 4]\nnoise_sigma = 0.1\n\
         utterance_len = [3, 6]\nnum_utterances = {n}\nseed = {seed}\nlanguage_tag = \"{tag}\"\n\
         prototype_seed = {prototype_seed}\n"
    )
}

pub fn model_section(layers: usize, d: usize, heads: usize, ffn: usize, vocab: usize) -> String {
    format!(
        "[model]\nnum_layers = {layers}\nd_model = {d}\nnum_heads = {heads}\nd_ffn = {ffn}\n\
         vocab_size = {vocab}\nd_in = {d}\nmax_seq_len = 64\n"
    )
}

pub const BI: &str = "{ kind = \"bi_stage\", warmup_frac = 0.1 }";
pub const TRI: &str = "{ kind = \"tri_stage\", warmup_frac = 0.1, hold_frac = 0.4, final_scale = 0.05 }";

pub struct Run<'a> {
    pub mode: &'a str,
    pub n: Option<usize>,
    pub freeze: usize,
    pub base: Option<&'a Path>,
    pub schedule: &'a str,
    pub peak_lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for Run<'_> {
    fn default() -> Self {
        Run {
            mode: "full_finetune",
            n: None,
            freeze: 0,
            base: None,
            schedule: BI,
            peak_lr: 3e-3,
            steps: 20,
            seed: 1,
        }
    }
}

/// A complete experiment config: `model` and optional `[adapter]` text
/// followed by the transfer and train sections of `run`.
pub fn experiment(model: &str, adapter: Option<&str>, run: &Run, extra: &str) -> String {
    let mut t = String::from(model);
    if let Some(a) = adapter {
        t += &format!("\n[adapter]\n{a}\n");
    }
    t += &format!("\n[transfer]\nmode = \"{}\"\nfreeze_transformer_steps = {}\n", run.mode, run.freeze);
    if let Some(n) = run.n {
        t += &format!("n = {n}\n");
    }
    if let Some(b) = run.base {
        t += &format!("base_checkpoint = {:?}\n", b.to_str().unwrap());
    }
    t += &format!(
        "\n[train]\nschedule = {}\npeak_lr = {:e}\ntotal_steps = {}\nbatch_size = 8\nseed = {}\ngrad_clip = 5.0\n",
        run.schedule, run.peak_lr, run.steps, run.seed
    );
    t += extra;
    t
}
