//! Runtime verification suites: finite-difference gradient checks, window
//! mechanics oracles (including brute-force shifted-window attention), and
//! metric hand-oracles. The CLI exposes them; the acceptance tests assert
//! on the same checks.

use crate::decoder::{ResidualBlock, SegmentationModel, TemporalCollapseHead, UpBlock};
use crate::error::{Error, Result};
use crate::metrics::{weighted_average, ConfusionMatrix};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::swin::{
    attention_mask, region_labels, relative_position_index, window_partition, window_reverse,
    Mode, ModelConfig, PatchMerging, SwinBlock, WindowAttention, WindowSpec,
};
use crate::tensor::{ops, Tape, Tensor, TensorId};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }

    fn bound(name: &str, value: f64, limit: f64) -> Self {
        Check::new(name, value < limit, format!("{value:.3e} (limit {limit:.0e})"))
    }
}

/// Run a named suite: `gradcheck`, `windows`, `metrics`, or `all`.
pub fn run_suite(suite: &str) -> Result<Vec<Check>> {
    match suite {
        "gradcheck" => Ok(gradcheck_suite()),
        "windows" => Ok(windows_suite()),
        "metrics" => Ok(metrics_suite()),
        "all" => {
            let mut all = gradcheck_suite();
            all.extend(windows_suite());
            all.extend(metrics_suite());
            Ok(all)
        }
        other => Err(Error::Config(format!(
            "unknown suite `{other}` (expected gradcheck, windows, metrics, or all)"
        ))),
    }
}

pub mod fd {
    //! Central finite-difference gradient harness.
    //!
    //! The oracle rebuilds the forward pass from scratch for every probe, so
    //! it exercises only the forward path while checking the reverse one.

    use super::*;

    /// Relative error of the analytic gradient against central differences:
    /// max over elements of |analytic - fd| / (|analytic| + 1e-8).
    pub fn max_rel_err(
        params: &[Tensor<f64>],
        build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
        h: f64,
    ) -> Result<f64> {
        let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> =
                probe.iter().map(|p| tape.constant(p.clone())).collect();
            let loss = build(&mut tape, &ids)?;
            Ok(tape.scalar_value(loss))
        };

        // analytic gradients
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> =
            ids.iter().map(|&id| tape.grad(id).expect("leaf gradient").to_vec()).collect();

        let mut worst = 0.0f64;
        let mut probe = params.to_vec();
        for (pi, param) in params.iter().enumerate() {
            for e in 0..param.numel() {
                let orig = param.data()[e];
                probe[pi].data_mut()[e] = orig + h;
                let up = eval(&probe)?;
                probe[pi].data_mut()[e] = orig - h;
                let down = eval(&probe)?;
                probe[pi].data_mut()[e] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[pi][e];
                let rel = (a - fd).abs() / (a.abs() + 1e-8);
                if rel > worst {
                    worst = rel;
                }
            }
        }
        Ok(worst)
    }
}

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const SEEDS: [u64; 3] = [1, 2, 3];

fn rand_t(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, rng)
}

/// Loss probe: a fixed random weighting of the output keeps every partial
/// derivative generic (no symmetric cancellation).
fn probe_loss(
    tape: &mut Tape<f64>,
    out: TensorId,
    rng_seed: u64,
) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let mut rng = SplitMix64::new(rng_seed);
    let probe = tape.constant(Tensor::rand_uniform(&shape, &mut rng));
    let weighted = ops::mul(tape, out, probe)?;
    ops::sum_all(tape, weighted)
}

fn fd_check(
    name: &str,
    checks: &mut Vec<Check>,
    params_for_seed: impl Fn(u64) -> Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[TensorId], u64) -> Result<TensorId>,
) {
    let mut worst = 0.0f64;
    let mut failure = None;
    for seed in SEEDS {
        let params = params_for_seed(seed);
        let build_seeded =
            |tape: &mut Tape<f64>, ids: &[TensorId]| build(tape, ids, seed);
        match fd::max_rel_err(&params, &build_seeded, FD_H) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    checks.push(match failure {
        Some(msg) => Check::new(name, false, msg),
        None => Check::bound(name, worst, FD_TOL),
    });
}

/// Finite-difference checks for every differentiable op and composite block
/// at 64-bit precision, plus the 32-bit end-to-end model check.
pub fn gradcheck_suite() -> Vec<Check> {
    let mut checks = Vec::new();

    fd_check(
        "gradcheck/matmul",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed);
            vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[4, 5], &mut rng)]
        },
        |tape, ids, seed| {
            let c = ops::matmul(tape, ids[0], ids[1])?;
            probe_loss(tape, c, seed ^ 0xABCD)
        },
    );

    fd_check(
        "gradcheck/matmul_nt",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 7 + 1);
            vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[2, 5, 4], &mut rng)]
        },
        |tape, ids, seed| {
            let c = ops::matmul_nt(tape, ids[0], ids[1])?;
            probe_loss(tape, c, seed ^ 0xBCDE)
        },
    );

    fd_check(
        "gradcheck/softmax_last",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 11 + 2);
            vec![rand_t(&[3, 5], &mut rng)]
        },
        |tape, ids, seed| {
            let y = ops::softmax_last(tape, ids[0])?;
            probe_loss(tape, y, seed ^ 0xCDEF)
        },
    );

    fd_check(
        "gradcheck/layer_norm",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 13 + 3);
            vec![rand_t(&[4, 6], &mut rng), rand_t(&[6], &mut rng), rand_t(&[6], &mut rng)]
        },
        |tape, ids, seed| {
            let y = ops::layer_norm(tape, ids[0], ids[1], ids[2], 1e-5)?;
            probe_loss(tape, y, seed ^ 0xDEF0)
        },
    );

    fd_check(
        "gradcheck/instance_norm",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 17 + 4);
            vec![rand_t(&[2, 3, 2, 2, 2], &mut rng), rand_t(&[3], &mut rng), rand_t(&[3], &mut rng)]
        },
        |tape, ids, seed| {
            let y = ops::instance_norm(tape, ids[0], ids[1], ids[2], 1e-5)?;
            probe_loss(tape, y, seed ^ 0xEF01)
        },
    );

    fd_check(
        "gradcheck/gelu",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 19 + 5);
            vec![rand_t(&[6], &mut rng)]
        },
        |tape, ids, seed| {
            let y = ops::gelu(tape, ids[0])?;
            probe_loss(tape, y, seed ^ 0xF012)
        },
    );

    fd_check(
        "gradcheck/leaky_relu",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 23 + 6);
            // keep probes away from the kink at zero
            let mut t = rand_t(&[6], &mut rng);
            for v in t.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            vec![t]
        },
        |tape, ids, seed| {
            let y = ops::leaky_relu(tape, ids[0], 0.01)?;
            probe_loss(tape, y, seed ^ 0x0123)
        },
    );

    fd_check(
        "gradcheck/conv3d",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 29 + 7);
            vec![
                rand_t(&[2, 2, 3, 4, 4], &mut rng),
                rand_t(&[3, 2, 3, 3, 3], &mut rng),
                rand_t(&[3], &mut rng),
            ]
        },
        |tape, ids, seed| {
            let y = ops::conv3d(tape, ids[0], ids[1], ids[2], [1, 1, 1], [1, 1, 1])?;
            probe_loss(tape, y, seed ^ 0x1234)
        },
    );

    fd_check(
        "gradcheck/conv3d_strided",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 31 + 8);
            vec![
                rand_t(&[1, 2, 4, 4, 4], &mut rng),
                rand_t(&[3, 2, 2, 2, 2], &mut rng),
                rand_t(&[3], &mut rng),
            ]
        },
        |tape, ids, seed| {
            let y = ops::conv3d(tape, ids[0], ids[1], ids[2], [2, 2, 2], [0, 0, 0])?;
            probe_loss(tape, y, seed ^ 0x2345)
        },
    );

    fd_check(
        "gradcheck/conv3d_transpose",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 37 + 9);
            vec![rand_t(&[1, 3, 2, 2, 2], &mut rng), rand_t(&[3, 2, 2, 2, 2], &mut rng)]
        },
        |tape, ids, seed| {
            let y = ops::conv3d_transpose(tape, ids[0], ids[1], [2, 2, 2])?;
            probe_loss(tape, y, seed ^ 0x3456)
        },
    );

    fd_check(
        "gradcheck/cross_entropy",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 41 + 10);
            vec![rand_t(&[2, 4, 2, 3], &mut rng)]
        },
        |tape, ids, _| {
            let labels = [0u8, 3, 255, 1, 2, 0, 255, 3, 1, 2, 0, 1];
            ops::cross_entropy(tape, ids[0], &labels, 255)
        },
    );

    fd_check(
        "gradcheck/composite_chain",
        &mut checks,
        |seed| {
            let mut rng = SplitMix64::new(seed * 43 + 11);
            vec![rand_t(&[4, 3], &mut rng), rand_t(&[3, 4], &mut rng)]
        },
        |tape, ids, _| {
            // matmul -> gelu -> softmax -> cross_entropy
            let z = ops::matmul(tape, ids[0], ids[1])?;
            let a = ops::gelu(tape, z)?;
            let s = ops::softmax_last(tape, a)?;
            let logits = ops::reshape(tape, s, &[1, 4, 2, 2])?;
            ops::cross_entropy(tape, logits, &[0, 2, 1, 3], 255)
        },
    );

    fd_check(
        "gradcheck/window_attention",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 47 + 12);
            let w = WindowSpec::new([2, 2, 2]);
            WindowAttention::new(&mut store, &mut rng, "a", 4, 2, w, 0.0, 0.0).unwrap();
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[2, 8, 4], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 47 + 12);
            let w = WindowSpec::new([2, 2, 2]);
            let attn =
                WindowAttention::new(&mut store, &mut rng, "a", 4, 2, w, 0.0, 0.0).unwrap();
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 1].to_vec());
            let tokens = ids[ids.len() - 1];
            let mask: Tensor<f64> = attention_mask([2, 2, 4], &w)?;
            let out = attn.forward(tape, &staged, tokens, Some(&mask), &mut Mode::Eval)?;
            probe_loss(tape, out, seed ^ 0x4567)
        },
    );

    fd_check(
        "gradcheck/swin_block",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 53 + 13);
            let w = WindowSpec::new([2, 2, 2]);
            SwinBlock::new(&mut store, &mut rng, "b", 4, 2, w, 2, true, 0.0, 0.0).unwrap();
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[1, 2, 4, 4, 4], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 53 + 13);
            let w = WindowSpec::new([2, 2, 2]);
            let block =
                SwinBlock::new(&mut store, &mut rng, "b", 4, 2, w, 2, true, 0.0, 0.0).unwrap();
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 1].to_vec());
            let out = block.forward(tape, &staged, ids[ids.len() - 1], &mut Mode::Eval)?;
            probe_loss(tape, out, seed ^ 0x5678)
        },
    );

    fd_check(
        "gradcheck/patch_merging",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 59 + 14);
            PatchMerging::new(&mut store, &mut rng, "m", 3);
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[1, 2, 2, 4, 3], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 59 + 14);
            let merge = PatchMerging::new(&mut store, &mut rng, "m", 3);
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 1].to_vec());
            let out = merge.forward(tape, &staged, ids[ids.len() - 1])?;
            probe_loss(tape, out, seed ^ 0x6789)
        },
    );

    fd_check(
        "gradcheck/residual_block",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 61 + 15);
            ResidualBlock::new(&mut store, &mut rng, "rb", 2, 3);
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[1, 2, 2, 3, 3], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 61 + 15);
            let block = ResidualBlock::new(&mut store, &mut rng, "rb", 2, 3);
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 1].to_vec());
            let out = block.forward(tape, &staged, ids[ids.len() - 1])?;
            probe_loss(tape, out, seed ^ 0x789A)
        },
    );

    fd_check(
        "gradcheck/up_concat",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 67 + 16);
            UpBlock::new(&mut store, &mut rng, "up", 4, 2, 2);
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[1, 4, 2, 2, 2], &mut rng));
            params.push(rand_t(&[1, 2, 4, 4, 4], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 67 + 16);
            let up = UpBlock::new(&mut store, &mut rng, "up", 4, 2, 2);
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 2].to_vec());
            let out = up.forward(tape, &staged, ids[ids.len() - 2], ids[ids.len() - 1])?;
            probe_loss(tape, out, seed ^ 0x89AB)
        },
    );

    fd_check(
        "gradcheck/temporal_head",
        &mut checks,
        |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 71 + 17);
            TemporalCollapseHead::new(&mut store, &mut rng, "h", 2, 4, 3);
            let mut params: Vec<Tensor<f64>> =
                store.iter().map(|(_, t)| t.clone()).collect();
            params.push(rand_t(&[1, 2, 4, 3, 3], &mut rng));
            params
        },
        |tape, ids, seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SplitMix64::new(seed * 71 + 17);
            let head = TemporalCollapseHead::new(&mut store, &mut rng, "h", 2, 4, 3);
            let staged = crate::params::Staged::from_ids(ids[..ids.len() - 1].to_vec());
            let out = head.forward(tape, &staged, ids[ids.len() - 1])?;
            probe_loss(tape, out, seed ^ 0x9ABC)
        },
    );

    checks.push(e2e_gradcheck_f32());
    checks
}

/// End-to-end gradient check of the full model at 32-bit storage on sampled
/// parameters chosen among the larger-magnitude analytic gradients (single
/// precision puts a noise floor under the finite differences of near-zero
/// partials).
pub fn e2e_gradcheck_f32() -> Check {
    const NAME: &str = "gradcheck/model_e2e_f32";
    const TOL: f64 = 1e-3;
    const SAMPLES: usize = 20;
    let cfg = ModelConfig {
        in_channels: 2,
        num_classes: 3,
        time_steps: 16,
        height: 16,
        width: 16,
        embed_dim: 4,
        num_heads: [2, 2, 2],
        window: [2, 2, 2],
        ..ModelConfig::munich_like()
    };
    let run = || -> Result<f64> {
        let mut model = SegmentationModel::<f32>::new(&cfg, 77)?;
        let mut rng = SplitMix64::new(101);
        let x = Tensor::<f32>::rand_uniform(&[1, 2, 16, 16, 16], &mut rng);
        let labels: Vec<u8> = (0..256).map(|_| rng.below(3) as u8).collect();

        let loss_of = |model: &SegmentationModel<f32>| -> Result<f64> {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false);
            let xi = tape.constant(x.clone());
            let logits = model.forward(&mut tape, &staged, xi, &mut Mode::Eval)?;
            let loss = ops::cross_entropy(&mut tape, logits, &labels, 255)?;
            Ok(tape.scalar_value(loss) as f64)
        };

        // analytic gradients for every parameter
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true);
        let xi = tape.constant(x.clone());
        let logits = model.forward(&mut tape, &staged, xi, &mut Mode::Eval)?;
        let loss = ops::cross_entropy(&mut tape, logits, &labels, 255)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = staged
            .ids()
            .iter()
            .map(|&id| tape.grad(id).expect("leaf grad").to_vec())
            .collect();

        // rank elements by |gradient| and sample the top band
        let mut ranked: Vec<(usize, usize, f32)> = Vec::new();
        for (pi, g) in grads.iter().enumerate() {
            for (e, &v) in g.iter().enumerate() {
                ranked.push((pi, e, v.abs()));
            }
        }
        ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite grads"));
        let band = ranked.len().min(400).max(SAMPLES);
        let mut pick_rng = SplitMix64::new(2024);
        let mut picked = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while picked.len() < SAMPLES {
            let i = pick_rng.below(band as u64) as usize;
            if seen.insert(i) {
                picked.push(ranked[i]);
            }
        }

        let h = 5e-3f32;
        let mut worst = 0.0f64;
        for &(pi, e, _) in &picked {
            let id = crate::params::ParamId(pi);
            let orig = model.params().value(id).data()[e];
            model.params_mut().value_mut(id).data_mut()[e] = orig + h;
            let up = loss_of(&model)?;
            model.params_mut().value_mut(id).data_mut()[e] = orig - h;
            let down = loss_of(&model)?;
            model.params_mut().value_mut(id).data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let a = grads[pi][e] as f64;
            let rel = (a - fd).abs() / (a.abs() + 1e-8);
            worst = worst.max(rel);
        }
        Ok(worst)
    };
    match run() {
        Ok(worst) => Check::bound(NAME, worst, TOL),
        Err(e) => Check::new(NAME, false, e.to_string()),
    }
}

/// Dense attention restricted to the neighborhoods the shifted-window region
/// labeling implies, computed with plain loops straight from the projection
/// weights.
#[allow(clippy::too_many_arguments)]
fn naive_neighborhood_attention(
    x: &Tensor<f64>, // [1, D, H, W, C]
    w: &WindowSpec,
    heads: usize,
    weights: &NaiveWeights,
    rel_idx: &[usize],
) -> Vec<f64> {
    let s = x.shape();
    let (d_, h_, w_, c) = (s[1], s[2], s[3], s[4]);
    let vol = d_ * h_ * w_;
    let t = w.tokens();
    let head_dim = c / heads;
    let shift = w.shift();
    let labels = region_labels([d_, h_, w_], w);
    let [wd, wh, ww] = w.window;
    let counts = [d_ / wd, h_ / wh, w_ / ww];

    // shifted-frame coordinate, window id, in-window token index, region
    let place = |pd: usize, ph: usize, pw: usize| -> (usize, usize, usize) {
        let sd = (pd + d_ - shift[0]) % d_;
        let sh = (ph + h_ - shift[1]) % h_;
        let sw = (pw + w_ - shift[2]) % w_;
        let win = ((sd / wd) * counts[1] + sh / wh) * counts[2] + sw / ww;
        let tok = ((sd % wd) * wh + sh % wh) * ww + sw % ww;
        let region = labels[(sd * h_ + sh) * w_ + sw];
        (win, tok, region)
    };

    let project = |row: &[f64], wmat: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = bias.to_vec();
        for (i, &xi) in row.iter().enumerate() {
            for o in 0..c {
                out[o] += xi * wmat[i * c + o];
            }
        }
        out
    };

    let token_row = |pd: usize, ph: usize, pw: usize| -> &[f64] {
        let off = ((pd * h_ + ph) * w_ + pw) * c;
        &x.data()[off..off + c]
    };

    let mut out = vec![0.0f64; vol * c];
    let coords: Vec<(usize, usize, usize)> = (0..d_)
        .flat_map(|pd| (0..h_).flat_map(move |ph| (0..w_).map(move |pw| (pd, ph, pw))))
        .collect();
    for &(pd, ph, pw) in &coords {
        let (win_i, tok_i, region_i) = place(pd, ph, pw);
        let q = project(token_row(pd, ph, pw), &weights.q_w, &weights.q_b);
        // gather this voxel's neighborhood
        let mut neigh = Vec::new();
        for &(qd, qh, qw) in &coords {
            let (win_j, tok_j, region_j) = place(qd, qh, qw);
            if win_j == win_i && region_j == region_i {
                neigh.push((qd, qh, qw, tok_j));
            }
        }
        let mut merged = vec![0.0f64; c];
        for hd in 0..heads {
            let q_h = &q[hd * head_dim..(hd + 1) * head_dim];
            let mut scores = Vec::with_capacity(neigh.len());
            for &(qd, qh, qw, tok_j) in &neigh {
                let k = project(token_row(qd, qh, qw), &weights.k_w, &weights.k_b);
                let k_h = &k[hd * head_dim..(hd + 1) * head_dim];
                let dot: f64 = q_h.iter().zip(k_h.iter()).map(|(a, b)| a * b).sum();
                let bias_idx = rel_idx[tok_i * t + tok_j];
                scores.push(
                    dot / (head_dim as f64).sqrt() + weights.bias_table[bias_idx * heads + hd],
                );
            }
            let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - hi).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&(qd, qh, qw, _), &e) in neigh.iter().zip(exps.iter()) {
                let v = project(token_row(qd, qh, qw), &weights.v_w, &weights.v_b);
                for dd in 0..head_dim {
                    merged[hd * head_dim + dd] += e / z * v[hd * head_dim + dd];
                }
            }
        }
        // output projection
        let off = ((pd * h_ + ph) * w_ + pw) * c;
        for o in 0..c {
            let mut acc = weights.proj_b[o];
            for i in 0..c {
                acc += merged[i] * weights.proj_w[i * c + o];
            }
            out[off + o] = acc;
        }
    }
    out
}

struct NaiveWeights {
    q_w: Vec<f64>,
    q_b: Vec<f64>,
    k_w: Vec<f64>,
    k_b: Vec<f64>,
    v_w: Vec<f64>,
    v_b: Vec<f64>,
    proj_w: Vec<f64>,
    proj_b: Vec<f64>,
    bias_table: Vec<f64>,
}

impl NaiveWeights {
    fn from_store(store: &ParamStore<f64>, prefix: &str) -> Self {
        let get = |suffix: &str| -> Vec<f64> {
            store
                .value(store.lookup(&format!("{prefix}.{suffix}")).expect("attention param"))
                .data()
                .to_vec()
        };
        NaiveWeights {
            q_w: get("q.weight"),
            q_b: get("q.bias"),
            k_w: get("k.weight"),
            k_b: get("k.bias"),
            v_w: get("v.weight"),
            v_b: get("v.bias"),
            proj_w: get("proj.weight"),
            proj_b: get("proj.bias"),
            bias_table: get("bias_table"),
        }
    }
}

/// Max abs difference between the masked shifted-window pipeline and the
/// brute-force neighborhood attention on a `(4, 6, 6)` volume, window
/// `(2, 3, 3)`.
pub fn swmsa_equivalence_max_diff() -> Result<f64> {
    let w = WindowSpec::new([2, 3, 3]);
    let dims = [4usize, 6, 6];
    let (c, heads) = (6usize, 2usize);
    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(271);
    let attn = WindowAttention::new(&mut store, &mut rng, "sw", c, heads, w, 0.0, 0.0)?;
    let x = Tensor::<f64>::rand_uniform(&[1, dims[0], dims[1], dims[2], c], &mut rng);

    // pipeline: shift, partition, masked attention, reverse, unshift
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape, false);
    let xi = tape.constant(x.clone());
    let shifted = ops::cyclic_shift(&mut tape, xi, w.shift(), 1)?;
    let wins = window_partition(&mut tape, shifted, &w)?;
    let nw = tape.shape(wins)[0];
    let tokens = ops::reshape(&mut tape, wins, &[nw, w.tokens(), c])?;
    let mask: Tensor<f64> = attention_mask(dims, &w)?;
    let att = attn.forward(&mut tape, &staged, tokens, Some(&mask), &mut Mode::Eval)?;
    let att = ops::reshape(&mut tape, att, &[nw, 2, 3, 3, c])?;
    let vol = window_reverse(&mut tape, att, &w, [1, dims[0], dims[1], dims[2]])?;
    let unshifted = ops::cyclic_shift(&mut tape, vol, w.shift(), -1)?;
    let pipeline = tape.data(unshifted);

    // brute force from the same weights
    let weights = NaiveWeights::from_store(&store, "sw");
    let (rel_idx, _) = relative_position_index(&w);
    let naive = naive_neighborhood_attention(&x, &w, heads, &weights, &rel_idx);

    Ok(pipeline
        .iter()
        .zip(naive.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Window mechanics oracles.
pub fn windows_suite() -> Vec<Check> {
    let mut checks = Vec::new();

    // partition/reverse roundtrip over 50 random dividing configurations
    let mut rng = SplitMix64::new(4096);
    let mut all_exact = true;
    let mut detail = String::from("50 random configurations round-trip bit-exactly");
    for i in 0..50 {
        let win = [
            1 + rng.below(3) as usize,
            1 + rng.below(3) as usize,
            1 + rng.below(3) as usize,
        ];
        let dims = [
            win[0] * (1 + rng.below(3) as usize),
            win[1] * (1 + rng.below(3) as usize),
            win[2] * (1 + rng.below(3) as usize),
        ];
        let b = 1 + rng.below(2) as usize;
        let ch = 1 + rng.below(5) as usize;
        let spec = WindowSpec::new(win);
        let x = Tensor::<f64>::rand_uniform(&[b, dims[0], dims[1], dims[2], ch], &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let ok = window_partition(&mut tape, xi, &spec)
            .and_then(|wins| window_reverse(&mut tape, wins, &spec, [b, dims[0], dims[1], dims[2]]))
            .map(|back| tape.data(back) == x.data())
            .unwrap_or(false);
        if !ok {
            all_exact = false;
            detail = format!("configuration {i} (win {win:?}, dims {dims:?}) failed");
            break;
        }
    }
    checks.push(Check::new("windows/partition_reverse_roundtrip", all_exact, detail));

    // zero-shift mask is identically zero
    let w1 = WindowSpec::new([1, 1, 1]);
    let zero_ok = attention_mask::<f64>([2, 2, 2], &w1)
        .map(|m| m.data().iter().all(|&v| v == 0.0))
        .unwrap_or(false);
    checks.push(Check::new(
        "windows/zero_shift_mask",
        zero_ok,
        "mask with shift (0,0,0) is identically zero".into(),
    ));

    // masked softmax rows renormalize over unmasked entries
    let w = WindowSpec::new([2, 3, 3]);
    let mask_ok = (|| -> Result<bool> {
        let mask: Tensor<f64> = attention_mask([4, 6, 6], &w)?;
        let t = w.tokens();
        let mut rng = SplitMix64::new(5);
        let mut tape = Tape::new();
        let scores = tape.constant(Tensor::rand_uniform(mask.shape(), &mut rng));
        let masked = ops::add_const(&mut tape, scores, &mask)?;
        let soft = ops::softmax_last(&mut tape, masked)?;
        for (row_i, row) in tape.data(soft).chunks_exact(t).enumerate() {
            let mrow = &mask.data()[row_i * t..(row_i + 1) * t];
            let sum: f64 = row
                .iter()
                .zip(mrow.iter())
                .filter(|&(_, &m)| m == 0.0)
                .map(|(v, _)| v)
                .sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Ok(false);
            }
        }
        Ok(true)
    })()
    .unwrap_or(false);
    checks.push(Check::new(
        "windows/masked_softmax_rows",
        mask_ok,
        "softmax over unmasked entries sums to 1 within 1e-6".into(),
    ));

    // relative position properties
    let (idx, len) = relative_position_index(&WindowSpec::new([2, 3, 3]));
    let t = 18;
    let diag_const = (0..t).all(|i| idx[i * t + i] == idx[0]);
    let (idx2, _) = relative_position_index(&WindowSpec::new([2, 2, 2]));
    let antisym = (0..8).all(|i| (0..8).all(|j| i == j || idx2[i * 8 + j] != idx2[j * 8 + i]));
    checks.push(Check::new(
        "windows/relative_position_index",
        len == 75 && diag_const && antisym,
        format!("table length {len}, diagonal constant {diag_const}, antisymmetric {antisym}"),
    ));

    // shifted-window equivalence oracle
    match swmsa_equivalence_max_diff() {
        Ok(diff) => checks.push(Check::bound("windows/swmsa_equivalence", diff, 1e-5)),
        Err(e) => checks.push(Check::new("windows/swmsa_equivalence", false, e.to_string())),
    }

    checks
}

/// Metric hand-oracles and random-matrix properties.
pub fn metrics_suite() -> Vec<Check> {
    let mut checks = Vec::new();

    let mut cm = ConfusionMatrix::new(2);
    cm.add(0, 0, 40);
    cm.add(0, 1, 10);
    cm.add(1, 0, 20);
    cm.add(1, 1, 30);
    let oa_ok = cm.overall_accuracy().map(|v| (v - 0.70).abs() < 1e-12).unwrap_or(false);
    let kappa_ok = cm.cohen_kappa().map(|v| (v - 0.40).abs() < 1e-12).unwrap_or(false);
    checks.push(Check::new(
        "metrics/hand_oracle",
        oa_ok && kappa_ok,
        "OA([[40,10],[20,30]]) = 0.70 and kappa = 0.40 to 1e-12".into(),
    ));

    let mut rng = SplitMix64::new(777);
    let mut ok = true;
    let mut detail = String::from("kappa <= OA and weighted recall == OA over 1000 random matrices");
    let mut checked = 0;
    while checked < 1000 {
        let k = 2 + rng.below(6) as usize;
        let mut m = ConfusionMatrix::new(k);
        for a in 0..k {
            for p in 0..k {
                m.add(a, p, rng.below(40));
            }
        }
        if m.total() == 0 {
            continue;
        }
        let oa = m.overall_accuracy().expect("non-empty");
        if let Ok(kappa) = m.cohen_kappa() {
            if kappa > oa + 1e-12 {
                ok = false;
                detail = format!("kappa {kappa} exceeds OA {oa}");
                break;
            }
        }
        let per = m.per_class().expect("non-empty");
        let (_, wr, _) = weighted_average(&per).expect("support > 0");
        if (wr - oa).abs() > 1e-12 {
            ok = false;
            detail = format!("weighted recall {wr} != OA {oa}");
            break;
        }
        checked += 1;
    }
    checks.push(Check::new("metrics/random_matrix_properties", ok, detail));

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_suite_is_green() {
        for check in gradcheck_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn windows_suite_is_green() {
        for check in windows_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn metrics_suite_is_green() {
        for check in metrics_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("everything").is_err());
        assert_eq!(run_suite("all").unwrap().len(), gradcheck_suite().len() + windows_suite().len() + metrics_suite().len());
    }
}
