//! Gradient and invariant checks for the numeric core, exposed through the
//! `gradcheck` command and reused by the acceptance suite.
//!
//! Everything here runs in double precision with fixed seeds. Each check
//! reports its maximum observed error against its tolerance; the suite
//! passes only if every check does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{
    encode_sentence, grl_apply, head_logits, li_forward, li_forward_smooth, EncoderVars,
    SummaryMode,
};
use crate::tape::{grad_check_multi, relative_error, AutodiffError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "{} {:<42} max_rel_err={:>10.3e}  tol={:.0e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Fault-injection hook: run the reversal sign-law check against a
    /// deliberately sign-flipped reversal node. The check must then fail.
    pub corrupt_grl_sign: bool,
}

const FD_EPS: f64 = 1e-5;

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

/// Runs the full suite in a stable order.
pub fn run_all(options: &VerifyOptions) -> Vec<CheckOutcome> {
    vec![
        check_matmul(),
        check_elementwise(),
        check_softmax_xent(),
        check_structural_ops(),
        check_encoder_composite(),
        check_li_surrogate_analytic(),
        check_li_composite_smooth(),
        check_grl_sign_law(options.corrupt_grl_sign),
        check_discriminator_composite(),
        check_decomposition_law(),
        check_li_gate_laws(),
        check_self_exclusion(),
    ]
}

pub fn all_pass(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.pass)
}

fn check_matmul() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let a = rand_tensor(&[3, 4], 1.0, &mut rng);
    let b = rand_tensor(&[4, 2], 1.0, &mut rng);
    let err = grad_check_multi(
        |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let squashed = tape.sigmoid_k(prod, 1.3);
            Ok(tape.sum(squashed))
        },
        &[a, b],
        FD_EPS,
    )
    .expect("matmul check");
    CheckOutcome::new("matmul gradient", err, 1e-6)
}

fn check_elementwise() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = rand_tensor(&[3, 3], 1.0, &mut rng);
    let y = rand_tensor(&[3, 3], 1.0, &mut rng);
    let err = grad_check_multi(
        |tape, vars| {
            let sum = tape.add(vars[0], vars[1])?;
            let prod = tape.mul(sum, vars[1])?;
            let scaled = tape.scale(prod, 0.7);
            let squashed = tape.sigmoid_k(scaled, 10.0);
            Ok(tape.sum(squashed))
        },
        &[x, y],
        FD_EPS,
    )
    .expect("elementwise check");
    CheckOutcome::new("elementwise add/mul/scale/sigmoid gradient", err, 1e-6)
}

fn check_softmax_xent() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let logits = rand_tensor(&[5, 7], 2.0, &mut rng);
    let gold = vec![0usize, 3, 6, 2, 5];
    let err = grad_check_multi(
        move |tape, vars| Ok(tape.softmax_cross_entropy(vars[0], &gold)?.0),
        &[logits],
        FD_EPS,
    )
    .expect("softmax check");
    CheckOutcome::new("softmax cross-entropy gradient", err, 1e-6)
}

fn check_structural_ops() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let m = rand_tensor(&[4, 4], 1.0, &mut rng);
    let bias = rand_tensor(&[4], 1.0, &mut rng);
    let table = rand_tensor(&[5, 4], 1.0, &mut rng);
    let err = grad_check_multi(
        |tape, vars| {
            let gathered = tape.gather_rows(vars[2], &[0, 2, 4, 2])?;
            let shifted = tape.shift_rows(gathered, -1);
            let mixed = tape.matmul(shifted, tape.transpose(vars[0]))?;
            let biased = tape.add_row_bias(mixed, vars[1])?;
            let gated = tape.zero_diag(biased)?;
            let pooled = tape.mean_rows(gated);
            let first = tape.select_row(gated, 0)?;
            let joined = tape.add(pooled, first)?;
            let squashed = tape.sigmoid_k(joined, 2.0);
            Ok(tape.sum(squashed))
        },
        &[m, bias, table],
        FD_EPS,
    )
    .expect("structural check");
    CheckOutcome::new("structural op gradients", err, 1e-6)
}

/// Encoder parameters for the composite checks; about 100 parameters.
fn small_encoder(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, usize) {
    let dim = 3;
    let vocab = 4;
    let mut params = vec![rand_tensor(&[vocab, dim], 0.5, rng)];
    for _ in 0..3 {
        params.push(rand_tensor(&[dim, dim], 0.5, rng));
    }
    (params, dim)
}

fn encoder_from_vars(vars: &[Var]) -> EncoderVars {
    EncoderVars {
        embedding: vars[0],
        mixers: vars[1..4].to_vec(),
    }
}

fn check_encoder_composite() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (params, _) = small_encoder(&mut rng);
    let ids = vec![0usize, 2, 3, 1, 2];
    let err = grad_check_multi(
        move |tape, vars| {
            let encoder = encoder_from_vars(vars);
            let (h, pooled) = encode_sentence(tape, &ids, &encoder, 1, SummaryMode::MeanPool)?;
            let hs = tape.sigmoid_k(h, 1.5);
            let ps = tape.sigmoid_k(pooled, 1.5);
            tape.add(tape.sum(hs), tape.sum(ps))
        },
        &params,
        FD_EPS,
    )
    .expect("encoder check");
    CheckOutcome::new("encoder composite gradient", err, 1e-4)
}

/// Hand-derived gradient of the smoothed gate on small cases, written as
/// scalar loops with no shared code with the layer implementation.
fn check_li_surrogate_analytic() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = 2;
        let d = 2;
        let k = 10.0;
        let x = rand_tensor(&[n, d], 1.5, &mut rng);
        let w = rand_tensor(&[d, d], 1.5, &mut rng);
        let b = rand_tensor(&[d], 1.5, &mut rng);
        let upstream = rand_tensor(&[n, d], 1.0, &mut rng);

        // Tape gradient through the production layer.
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let uv = tape.leaf(upstream.clone());
        let out = li_forward(&tape, xv, wv, bv, k).expect("li forward");
        let weighted = tape.mul(out, uv).expect("weights");
        let loss = tape.sum(weighted);
        tape.backward(loss).expect("backward");
        let gx = tape.grad(xv).unwrap();
        let gw = tape.grad(wv).unwrap();
        let gb = tape.grad(bv).unwrap();

        // Analytic gradient of sum(U ⊙ (X ⊙ σ_k(pre))) by scalar chain rule,
        // pre[i][j] = b[j] + Σ_{m≠j} x[i][m] w[j][m].
        let sig = |t: f64| 1.0 / (1.0 + (-k * t).exp());
        let mut ax = Tensor::<f64>::zeros(&[n, d]);
        let mut aw = Tensor::<f64>::zeros(&[d, d]);
        let mut ab = Tensor::<f64>::zeros(&[d]);
        for i in 0..n {
            for j in 0..d {
                let mut pre = b.data()[j];
                for m in 0..d {
                    if m != j {
                        pre += x.get2(i, m) * w.get2(j, m);
                    }
                }
                let s = sig(pre);
                let sp = k * s * (1.0 - s);
                let u = upstream.get2(i, j);
                // Direct term for x[i][j].
                ax.set2(i, j, ax.get2(i, j) + u * s);
                for m in 0..d {
                    if m != j {
                        // Through the gate's pre-activation.
                        ax.set2(i, m, ax.get2(i, m) + u * x.get2(i, j) * sp * w.get2(j, m));
                        aw.set2(j, m, aw.get2(j, m) + u * x.get2(i, j) * sp * x.get2(i, m));
                    }
                }
                ab.data_mut()[j] += u * x.get2(i, j) * sp;
            }
        }

        for (tape_grad, analytic) in [(&gx, &ax), (&gw, &aw)] {
            for (a, b) in tape_grad.data().iter().zip(analytic.data()) {
                worst = worst.max(relative_error(*a, *b));
            }
        }
        for (a, b) in gb.data().iter().zip(ab.data()) {
            worst = worst.max(relative_error(*a, *b));
        }
    }
    CheckOutcome::new("lateral inhibition surrogate backward", worst, 1e-10)
}

/// Finite differences through encoder -> smooth-gate inhibition -> head.
/// The smooth gate shares its backward rule with the hard-gated layer, so
/// this validates the production backward against a differentiable forward.
fn check_li_composite_smooth() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (mut params, dim) = small_encoder(&mut rng);
    params.push(rand_tensor(&[dim, dim], 0.8, &mut rng)); // li w
    params.push(rand_tensor(&[dim], 0.8, &mut rng)); // li b
    params.push(rand_tensor(&[4, dim], 0.8, &mut rng)); // head w
    params.push(rand_tensor(&[4], 0.8, &mut rng)); // head b
    let ids = vec![1usize, 0, 3, 2];
    let gold = vec![0usize, 1, 2, 3];
    let err = grad_check_multi(
        move |tape, vars| {
            let encoder = encoder_from_vars(vars);
            let (h, _) = encode_sentence(tape, &ids, &encoder, 1, SummaryMode::MeanPool)?;
            let gated = li_forward_smooth(tape, h, vars[4], vars[5], 10.0)?;
            let logits = head_logits(tape, gated, vars[6], vars[7])?;
            Ok(tape.softmax_cross_entropy(logits, &gold)?.0)
        },
        &params,
        FD_EPS,
    )
    .expect("li composite check");
    CheckOutcome::new("inhibition composite gradient (smooth gate)", err, 1e-4)
}

/// Discriminator head used by the reversal checks: hidden layer + logits on
/// the pooled summary, returning the language cross-entropy.
fn discriminator_loss(
    tape: &Tape<f64>,
    vars: &[Var],
    ids: &[usize],
    lambda: f64,
    reversed: bool,
    flip_sign: bool,
) -> Result<Var, AutodiffError> {
    let encoder = encoder_from_vars(vars);
    let (_, pooled) = encode_sentence(tape, ids, &encoder, 1, SummaryMode::MeanPool)?;
    let fed = if !reversed {
        pooled
    } else if flip_sign {
        // Deliberately wrong reversal used by the fault-injection hook.
        tape.custom_node(
            &[pooled],
            |vals| Ok(vals[0].clone()),
            move |g, _| Ok(vec![g.scale(lambda)]),
        )?
    } else {
        grl_apply(tape, pooled, lambda)?
    };
    let hidden = tape.add_row_bias(tape.matmul(fed, tape.transpose(vars[4]))?, vars[5])?;
    let act = tape.sigmoid_k(hidden, 1.0);
    let logits = tape.add_row_bias(tape.matmul(act, tape.transpose(vars[6]))?, vars[7])?;
    Ok(tape.softmax_cross_entropy(logits, &[1])?.0)
}

fn discriminator_params(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (mut params, dim) = small_encoder(rng);
    params.push(rand_tensor(&[dim, dim], 0.8, rng)); // hidden w
    params.push(rand_tensor(&[dim], 0.8, rng)); // hidden b
    params.push(rand_tensor(&[3, dim], 0.8, rng)); // out w
    params.push(rand_tensor(&[3], 0.8, rng)); // out b
    params
}

fn grads_of(
    params: &[Tensor<f64>],
    ids: &[usize],
    lambda: f64,
    reversed: bool,
    flip_sign: bool,
) -> Vec<Tensor<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = discriminator_loss(&tape, &vars, ids, lambda, reversed, flip_sign).expect("loss");
    tape.backward(loss).expect("backward");
    vars.iter().map(|&v| tape.grad(v).unwrap()).collect()
}

/// Encoder gradients through the discriminator path must equal `-lambda`
/// times the identity-layer gradients, elementwise, for each lambda.
fn check_grl_sign_law(flip_sign: bool) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let params = discriminator_params(&mut rng);
    let ids = vec![0usize, 3, 1];
    let identity = grads_of(&params, &ids, 0.0, false, false);
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.01, 1.0] {
        let reversed = grads_of(&params, &ids, lambda, true, flip_sign);
        // The first four tensors are the encoder parameters.
        for p in 0..4 {
            for (got, id_grad) in reversed[p].data().iter().zip(identity[p].data()) {
                let expect = -lambda * *id_grad;
                worst = worst.max(relative_error(*got, expect));
            }
        }
        // Discriminator parameters sit above the reversal and are untouched.
        for p in 4..params.len() {
            for (got, id_grad) in reversed[p].data().iter().zip(identity[p].data()) {
                worst = worst.max(relative_error(*got, *id_grad));
            }
        }
    }
    CheckOutcome::new("gradient reversal sign law", worst, 1e-12)
}

/// Finite differences through encoder -> reversal -> discriminator. The
/// forward value is reversal-free, so the tape must match +FD above the
/// reversal and -lambda * FD below it.
fn check_discriminator_composite() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let params = discriminator_params(&mut rng);
    let ids = vec![2usize, 0, 3, 1];
    let lambda = 1.0;

    let tape_grads = grads_of(&params, &ids, lambda, true, false);

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = discriminator_loss(&tape, &vars, &ids, lambda, true, false).expect("loss");
        tape.value(loss).item()
    };

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        let scale = if p < 4 { -lambda } else { 1.0 };
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + FD_EPS;
            let plus = eval(&work);
            work[p].data_mut()[i] = orig - FD_EPS;
            let minus = eval(&work);
            work[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(tape_grads[p].data()[i], scale * fd));
        }
    }
    CheckOutcome::new("discriminator composite gradient (reversed)", worst, 1e-4)
}

/// With both losses on one tape, the encoder gradient must decompose into
/// the task gradient minus lambda times the identity-path language gradient.
fn check_decomposition_law() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let (mut params, dim) = small_encoder(&mut rng);
    params.push(rand_tensor(&[4, dim], 0.8, &mut rng)); // head w
    params.push(rand_tensor(&[4], 0.8, &mut rng)); // head b
    params.push(rand_tensor(&[dim, dim], 0.8, &mut rng)); // ld hidden w
    params.push(rand_tensor(&[dim], 0.8, &mut rng)); // ld hidden b
    params.push(rand_tensor(&[3, dim], 0.8, &mut rng)); // ld out w
    params.push(rand_tensor(&[3], 0.8, &mut rng)); // ld out b
    let ids = vec![1usize, 3, 0];
    let gold = vec![2usize, 0, 1];
    let lambda = 0.01;

    let run = |mode: u8| -> Vec<Tensor<f64>> {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let encoder = encoder_from_vars(&vars);
        let (h, pooled) = encode_sentence(&tape, &ids, &encoder, 1, SummaryMode::MeanPool)
            .expect("encode");
        let task = {
            let logits = head_logits(&tape, h, vars[4], vars[5]).expect("head");
            tape.softmax_cross_entropy(logits, &gold).expect("xent").0
        };
        let lang = {
            let fed = match mode {
                0 => grl_apply(&tape, pooled, lambda).expect("grl"),
                _ => pooled,
            };
            let hidden = tape
                .add_row_bias(tape.matmul(fed, tape.transpose(vars[6])).expect("mm"), vars[7])
                .expect("bias");
            let act = tape.sigmoid_k(hidden, 1.0);
            let logits = tape
                .add_row_bias(tape.matmul(act, tape.transpose(vars[8])).expect("mm"), vars[9])
                .expect("bias");
            tape.softmax_cross_entropy(logits, &[1]).expect("xent").0
        };
        let loss = match mode {
            0 => tape.add(task, lang).expect("total"), // joint, reversed
            1 => task,                                  // task only
            _ => lang,                                  // language only, identity
        };
        tape.backward(loss).expect("backward");
        vars.iter().map(|&v| tape.grad(v).unwrap()).collect()
    };

    let joint = run(0);
    let task_only = run(1);
    let lang_only = run(2);

    let mut worst: f64 = 0.0;
    for p in 0..4 {
        for ((j, t), l) in joint[p]
            .data()
            .iter()
            .zip(task_only[p].data())
            .zip(lang_only[p].data())
        {
            let expect = *t - lambda * *l;
            worst = worst.max(relative_error(*j, expect));
        }
    }
    CheckOutcome::new("adversarial decomposition law", worst, 1e-12)
}

/// All-open gates must reproduce the input bit-exactly; all-closed must
/// produce exact zeros.
fn check_li_gate_laws() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let x = rand_tensor(&[5, 4], 2.0, &mut rng);
    let open = crate::layers::LateralInhibitionLayer {
        w: Tensor::zeros(&[4, 4]),
        b: Tensor::full(&[4], 1.0),
        k: 10.0,
    };
    let closed = crate::layers::LateralInhibitionLayer {
        w: Tensor::zeros(&[4, 4]),
        b: Tensor::full(&[4], -1.0),
        k: 10.0,
    };
    let mut worst: f64 = 0.0;
    let through_open = crate::layers::li_eval(&x, &open).expect("open");
    for (a, b) in through_open.data().iter().zip(x.data()) {
        if a != b {
            worst = worst.max(1.0);
        }
    }
    let through_closed = crate::layers::li_eval(&x, &closed).expect("closed");
    for &v in through_closed.data() {
        if v != 0.0 {
            worst = worst.max(1.0);
        }
    }
    CheckOutcome::new("inhibition gate identity/annihilation", worst, 0.0)
}

/// Perturbing coordinate j of a row never changes that row's j-th gate
/// pre-activation: the zeroed diagonal removes self-influence. 1,000 trials.
fn check_self_exclusion() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..4);
        let d = rng.gen_range(2..6);
        let x = rand_tensor(&[n, d], 2.0, &mut rng);
        let w = rand_tensor(&[d, d], 2.0, &mut rng);
        let b = rand_tensor(&[d], 2.0, &mut rng);
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..d);
        let mut x2 = x.clone();
        x2.set2(i, j, x2.get2(i, j) + rng.gen_range(-5.0..5.0));

        let z = w.transpose().zero_diag().expect("square");
        let pre1 = x.matmul(&z).expect("mm").add_row_bias(&b).expect("bias");
        let pre2 = x2.matmul(&z).expect("mm").add_row_bias(&b).expect("bias");
        let diff = (pre1.get2(i, j) - pre2.get2(i, j)).abs();
        worst = worst.max(diff);
    }
    CheckOutcome::new("self-exclusion of the zeroed diagonal", worst, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let outcomes = run_all(&VerifyOptions::default());
        for o in &outcomes {
            assert!(o.pass, "{}", o.render());
        }
    }

    #[test]
    fn corrupted_reversal_is_caught_by_name() {
        let outcomes = run_all(&VerifyOptions {
            corrupt_grl_sign: true,
        });
        let failing: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.pass).collect();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].name, "gradient reversal sign law");
    }
}
