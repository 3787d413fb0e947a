#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tcan::data::Sample;
use tcan::model::{cross_attention_block, self_attention_block, InputWidths, Modality, ModelConfig, Tcan};
use tcan::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(&[rows, cols], randn(rng, rows * cols)).unwrap()
}

pub fn small_config(d: usize, seq_len: usize, depth: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        seq_len,
        depth,
        heads,
        ..Default::default()
    }
}

pub const WIDTHS: InputWidths = InputWidths {
    text: 6,
    visual: 4,
    acoustic: 5,
};

/// Random sample with the given sequence lengths.
pub fn random_sample(rng: &mut ChaCha8Rng, widths: InputWidths, lens: [usize; 3], id: &str) -> Sample {
    let label = rng.random_range(-3.0f32..=3.0);
    Sample::new(
        id,
        rand_tensor(rng, lens[0], widths.text),
        rand_tensor(rng, lens[1], widths.visual),
        rand_tensor(rng, lens[2], widths.acoustic),
        label,
    )
    .unwrap()
}

/// Brute-force metric definitions, written independently of the library.
pub mod oracle {
    pub fn mae(p: &[f32], y: &[f32]) -> f64 {
        let mut total = 0.0f64;
        for i in 0..p.len() {
            total += (p[i] as f64 - y[i] as f64).abs();
        }
        total / p.len() as f64
    }

    pub fn corr(p: &[f32], y: &[f32]) -> f64 {
        let n = p.len() as f64;
        let (mut sp, mut sy, mut spp, mut syy, mut spy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
        for i in 0..p.len() {
            let (a, b) = (p[i] as f64, y[i] as f64);
            sp += a;
            sy += b;
            spp += a * a;
            syy += b * b;
            spy += a * b;
        }
        let cov = spy - sp * sy / n;
        let vp = spp - sp * sp / n;
        let vy = syy - sy * sy / n;
        if vp <= 0.0 || vy <= 0.0 {
            return 0.0;
        }
        cov / (vp * vy).sqrt()
    }

    fn class7(v: f32) -> i64 {
        (v as f64).clamp(-3.0, 3.0).round() as i64
    }

    pub fn acc7(p: &[f32], y: &[f32]) -> f64 {
        let hits = (0..p.len()).filter(|&i| class7(p[i]) == class7(y[i])).count();
        hits as f64 / p.len() as f64
    }

    fn f1_pr(tp: usize, fp: usize, fneg: usize) -> f64 {
        if tp + fp + fneg == 0 {
            return 1.0;
        }
        if tp == 0 {
            return 0.0;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fneg) as f64;
        2.0 * precision * recall / (precision + recall)
    }

    /// Binary accuracy, positive-class F1 and support-weighted F1 over
    /// non-zero labels.
    pub fn acc2_f1(p: &[f32], y: &[f32]) -> (f64, f64, f64) {
        let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..p.len() {
            if y[i] == 0.0 {
                continue;
            }
            match (p[i] > 0.0, y[i] > 0.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let n = (tp + fp + tn + fneg) as f64;
        let pos = f1_pr(tp, fp, fneg);
        let neg = f1_pr(tn, fneg, fp);
        let weighted = (pos * (tp + fneg) as f64 + neg * (tn + fp) as f64) / n;
        ((tp + tn) as f64 / n, pos, weighted)
    }
}

/// Random prediction and label arrays that hit the metric edge cases: exact
/// zero labels, half-integer bin boundaries and out-of-range scores.
pub fn metric_arrays(rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    let n = rng.random_range(2..200);
    let draw = |rng: &mut ChaCha8Rng| match rng.random_range(0..10) {
        0 => 0.0,
        1 => rng.random_range(-4i32..=4) as f32 + 0.5,
        _ => rng.random_range(-3.6f32..3.6),
    };
    let mut p: Vec<f32> = (0..n).map(|_| draw(rng)).collect();
    let mut y: Vec<f32> = (0..n).map(|_| draw(rng).clamp(-3.0, 3.0)).collect();
    if y.iter().all(|&v| v == 0.0) {
        y[0] = 1.0;
    }
    if p.iter().all(|&v| v == p[0]) {
        p[0] += 1.0;
    }
    (p, y)
}

/// Largest deviation between the library metrics and the oracles over
/// `trials` random arrays.
pub fn max_metric_deviation(trials: usize, seed: u64) -> f64 {
    use tcan::metrics::{evaluate, F1Mode};
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (p, y) = metric_arrays(&mut rng);
        let binary = evaluate(&p, &y, F1Mode::Binary).unwrap();
        let weighted = evaluate(&p, &y, F1Mode::Weighted).unwrap();
        let (acc2, f1, wf1) = oracle::acc2_f1(&p, &y);
        for (got, want) in [
            (binary.mae, oracle::mae(&p, &y)),
            (binary.corr, oracle::corr(&p, &y)),
            (binary.acc7, oracle::acc7(&p, &y)),
            (binary.acc2, acc2),
            (binary.f1, f1),
            (weighted.f1, wf1),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

/// Recomputes a gate-less forward from the public blocks, with the cross
/// stream taking the attention output unchanged.
pub fn pass_through_forward(model: &Tcan, tape: &mut Tape, sample: &Sample) -> Var {
    let store = model.params();
    let residual = model.config().attention_residual;
    let center = model.config().center_modality;
    let proj = |tape: &mut Tape, m: Modality| model.project_unimodal(tape, m, sample.features(m), &sample.id).unwrap();
    let projected: Vec<(Modality, Var)> = Modality::ALL.iter().map(|&m| (m, proj(tape, m))).collect();
    let feat = |m: Modality| projected.iter().find(|p| p.0 == m).unwrap().1;
    let mut streams = Vec::new();
    for b in model.branches() {
        let (mut cross, mut text) = (feat(b.partner), feat(center));
        for layer in &b.layers {
            assert!(layer.gate.is_none());
            let tn = layer.ln_text.forward(tape, store, text).unwrap();
            let cn = layer.ln_cross.forward(tape, store, cross).unwrap();
            let sa = self_attention_block(tape, store, &layer.self_attn, tn, residual).unwrap();
            let next_text = layer.ffn_text.forward(tape, store, sa.output).unwrap();
            let ca = cross_attention_block(tape, store, &layer.cross_attn, cn, tn, residual).unwrap();
            cross = layer.ffn_cross.forward(tape, store, ca.output).unwrap();
            text = next_text;
        }
        streams.push(cross);
        streams.push(text);
    }
    model.fuse_and_predict(tape, &streams).unwrap()
}
