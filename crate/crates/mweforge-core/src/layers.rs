//! Neural components: the lateral-inhibition gate, gradient reversal,
//! linear token heads, a language discriminator, and a small trainable
//! encoder standing in for a pretrained one.
//!
//! Lateral inhibition gates each input coordinate on a thresholded linear
//! function of its *other* coordinates (the diagonal is zeroed, so a
//! coordinate never gates itself):
//!
//! ```text
//! F(X) = X ⊙ Θ(X · ZeroDiag(Wᵀ) + B)
//! ```
//!
//! Θ is the hard step (1 for x > 0, else 0). The backward pass
//! differentiates the fully smoothed gate instead — Θ replaced by the scaled
//! logistic σ_k everywhere, including the product-rule term through the
//! gate's dependence on X — which is the surrogate-gradient scheme the rest
//! of the crate verifies against analytic formulas.

use rand::Rng;

use crate::tape::{AutodiffError, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

/// Gate layer parameters: square gate weights, per-coordinate bias, and the
/// surrogate sharpness `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralInhibitionLayer<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub k: S,
}

impl<S: Scalar> LateralInhibitionLayer<S> {
    /// Weights uniform in (-0.1, 0.1); bias +0.5 so gates start mostly open.
    pub fn init(dim: usize, k: S, rng: &mut impl Rng) -> Self {
        Self {
            w: rand_tensor(&[dim, dim], 0.1, rng),
            b: Tensor::full(&[dim], S::from_f64_lit(0.5)),
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// Token classification head: logits = E Wᵀ + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinearHead<S> {
    /// Zero initialisation: every class starts equally likely.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[classes, dim]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }
}

/// Identity forward; backward multiplies the upstream gradient by `-lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal<S> {
    pub lambda: S,
}

/// How the per-sentence summary vector is pooled from the encoded tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryMode {
    FirstPosition,
    MeanPool,
}

impl SummaryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FirstPosition => "first-position",
            Self::MeanPool => "mean-pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first-position" => Some(Self::FirstPosition),
            "mean-pool" => Some(Self::MeanPool),
            _ => None,
        }
    }
}

/// Trainable token encoder: an embedding table mixed over a fixed context
/// window. Output token i is `sum_o emb(token_{i+o}) · M_oᵀ` for offsets
/// `o` in `[-radius, radius]`, with zero vectors past sentence boundaries,
/// plus a pooled sentence summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder<S> {
    pub embedding: Tensor<S>,
    /// One mixing matrix per window offset, ordered -radius..=radius.
    pub mixers: Vec<Tensor<S>>,
    pub radius: usize,
    pub summary: SummaryMode,
}

impl<S: Scalar> ToyEncoder<S> {
    pub fn init(
        vocab: usize,
        dim: usize,
        radius: usize,
        summary: SummaryMode,
        rng: &mut impl Rng,
    ) -> Self {
        let mut mixers = Vec::with_capacity(2 * radius + 1);
        for offset in -(radius as isize)..=(radius as isize) {
            let mut m = rand_tensor(&[dim, dim], 0.05, rng);
            if offset == 0 {
                m.add_assign(&Tensor::identity(dim));
            }
            mixers.push(m);
        }
        Self {
            embedding: rand_tensor(&[vocab, dim], 0.1, rng),
            mixers,
            radius,
            summary,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }
}

/// Sentence-level language classifier fed by the (gradient-reversed) summary
/// vector: one hidden layer with a logistic activation, then L logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageDiscriminator<S> {
    pub hidden_w: Tensor<S>,
    pub hidden_b: Tensor<S>,
    pub out_w: Tensor<S>,
    pub out_b: Tensor<S>,
}

impl<S: Scalar> LanguageDiscriminator<S> {
    pub fn init(dim: usize, languages: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden_w: rand_tensor(&[dim, dim], 0.1, rng),
            hidden_b: Tensor::zeros(&[dim]),
            out_w: Tensor::zeros(&[languages, dim]),
            out_b: Tensor::zeros(&[languages]),
        }
    }

    pub fn languages(&self) -> usize {
        self.out_b.len()
    }
}

fn rand_tensor<S: Scalar>(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_lit(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Step function, elementwise: 1 where x > 0, 0 where x <= 0.
pub fn heaviside<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.heaviside()
}

fn li_pre_activation<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let z = w.transpose().zero_diag()?;
    x.matmul(&z)?.add_row_bias(b)
}

/// Gradient of the smoothed gate function X ⊙ σ_k(X ZeroDiag(Wᵀ) + B) with
/// respect to X, W, and B, given the upstream gradient.
fn li_backward<S: Scalar>(
    upstream: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    k: S,
) -> Result<Vec<Tensor<S>>, AutodiffError> {
    let z = w.transpose().zero_diag()?;
    let pre = x.matmul(&z)?.add_row_bias(b)?;
    let s = pre.sigmoid_k(k);
    let sp = s.map(|y| k * y * (S::one() - y));
    let t = upstream.mul(x)?.mul(&sp)?;
    let dx = upstream.mul(&s)?.add(&t.matmul(&z.transpose())?)?;
    let dw = t.transpose().matmul(x)?.zero_diag()?;
    let db = t.column_sums();
    Ok(vec![dx, dw, db])
}

/// Lateral inhibition on the tape: hard-gated forward, smoothed backward.
///
/// `x` is `n×d` (rows are token vectors), `w` is `d×d`, `b` has length `d`.
pub fn li_forward<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    w: Var,
    b: Var,
    k: S,
) -> Result<Var, AutodiffError> {
    tape.custom_node(
        &[x, w, b],
        |vals| {
            let pre = li_pre_activation(&vals[0], &vals[1], &vals[2])?;
            Ok(vals[0].mul(&pre.heaviside())?)
        },
        move |g, vals| li_backward(g, &vals[0], &vals[1], &vals[2], k),
    )
}

/// Fully smoothed variant (σ_k gate in the forward pass too). Its forward is
/// differentiable and its analytic gradient is exactly the backward rule of
/// [`li_forward`], so finite-difference checks of composed models go through
/// this entry point.
pub fn li_forward_smooth<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    w: Var,
    b: Var,
    k: S,
) -> Result<Var, AutodiffError> {
    tape.custom_node(
        &[x, w, b],
        |vals| {
            let pre = li_pre_activation(&vals[0], &vals[1], &vals[2])?;
            Ok(vals[0].mul(&pre.sigmoid_k(k))?)
        },
        move |g, vals| li_backward(g, &vals[0], &vals[1], &vals[2], k),
    )
}

/// Hard-gated forward pass as a pure tensor function (inference path).
pub fn li_eval<S: Scalar>(
    x: &Tensor<S>,
    layer: &LateralInhibitionLayer<S>,
) -> Result<Tensor<S>, TensorError> {
    let pre = li_pre_activation(x, &layer.w, &layer.b)?;
    x.mul(&pre.heaviside())
}

/// Gradient reversal: forward identity, backward `-lambda * g`.
///
/// `lambda` is a non-negative scale; 0 silences the path entirely.
pub fn grl_apply<S: Scalar>(tape: &Tape<S>, x: Var, lambda: S) -> Result<Var, AutodiffError> {
    debug_assert!(lambda >= S::zero(), "reversal scale must be non-negative");
    tape.custom_node(
        &[x],
        |vals| Ok(vals[0].clone()),
        move |g, _vals| Ok(vec![g.scale(-lambda)]),
    )
}

/// Token logits on the tape: `(LI(E) or E) Wᵀ + b`.
pub fn head_logits<S: Scalar>(
    tape: &Tape<S>,
    e: Var,
    head_w: Var,
    head_b: Var,
) -> Result<Var, AutodiffError> {
    let wt = tape.transpose(head_w);
    let prod = tape.matmul(e, wt)?;
    tape.add_row_bias(prod, head_b)
}

/// Class probabilities per token row: softmax((LI(E) or E) Wᵀ + b).
pub fn classify_tokens<S: Scalar>(
    e: &Tensor<S>,
    head: &LinearHead<S>,
    li: Option<&LateralInhibitionLayer<S>>,
) -> Result<Tensor<S>, TensorError> {
    let h = match li {
        Some(layer) => li_eval(e, layer)?,
        None => e.clone(),
    };
    let logits = h.matmul(&head.w.transpose())?.add_row_bias(&head.b)?;
    Ok(logits.softmax_rows())
}

/// Encoder parameters staged onto a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub embedding: Var,
    pub mixers: Vec<Var>,
}

/// Window-mixed token embeddings plus the pooled sentence summary, both as
/// tape nodes. `ids` must be non-empty and within the vocabulary.
pub fn encode_sentence<S: Scalar>(
    tape: &Tape<S>,
    ids: &[usize],
    vars: &EncoderVars,
    radius: usize,
    summary: SummaryMode,
) -> Result<(Var, Var), AutodiffError> {
    assert!(!ids.is_empty(), "cannot encode an empty sentence");
    let e0 = tape.gather_rows(vars.embedding, ids)?;
    let mut acc: Option<Var> = None;
    for (i, offset) in (-(radius as isize)..=(radius as isize)).enumerate() {
        let shifted = if offset == 0 {
            e0
        } else {
            tape.shift_rows(e0, offset)
        };
        let term = tape.matmul(shifted, tape.transpose(vars.mixers[i]))?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    let h = acc.expect("window has at least the zero offset");
    let pooled = match summary {
        SummaryMode::FirstPosition => tape.select_row(h, 0)?,
        SummaryMode::MeanPool => tape.mean_rows(h),
    };
    Ok((h, pooled))
}

/// Pure inference wrapper around [`encode_sentence`].
pub fn encode_sentence_eval<S: Scalar>(
    encoder: &ToyEncoder<S>,
    ids: &[usize],
) -> Result<(Tensor<S>, Tensor<S>), AutodiffError> {
    let tape = Tape::new();
    let vars = EncoderVars {
        embedding: tape.leaf(encoder.embedding.clone()),
        mixers: encoder.mixers.iter().map(|m| tape.leaf(m.clone())).collect(),
    };
    let (h, pooled) = encode_sentence(&tape, ids, &vars, encoder.radius, encoder.summary)?;
    Ok((tape.value(h), tape.value(pooled)))
}

/// Discriminator parameters staged onto a tape.
#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Language logits on the tape: the summary passes through gradient reversal
/// before the discriminator, so only gradients below this point are flipped.
pub fn discriminate_language_logits<S: Scalar>(
    tape: &Tape<S>,
    summary: Var,
    vars: &DiscriminatorVars,
    lambda: S,
) -> Result<Var, AutodiffError> {
    let reversed = grl_apply(tape, summary, lambda)?;
    let pre = tape.add_row_bias(
        tape.matmul(reversed, tape.transpose(vars.hidden_w))?,
        vars.hidden_b,
    )?;
    let act = tape.sigmoid_k(pre, S::one());
    head_logits_inner(tape, act, vars.out_w, vars.out_b)
}

fn head_logits_inner<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var, AutodiffError> {
    let prod = tape.matmul(x, tape.transpose(w))?;
    tape.add_row_bias(prod, b)
}

/// Language probabilities for a summary vector (row matrix `1×d`).
pub fn discriminate_language<S: Scalar>(
    summary: &Tensor<S>,
    ld: &LanguageDiscriminator<S>,
    lambda: S,
) -> Result<Tensor<S>, AutodiffError> {
    let tape = Tape::new();
    let vars = DiscriminatorVars {
        hidden_w: tape.leaf(ld.hidden_w.clone()),
        hidden_b: tape.leaf(ld.hidden_b.clone()),
        out_w: tape.leaf(ld.out_w.clone()),
        out_b: tape.leaf(ld.out_b.clone()),
    };
    let s = tape.leaf(summary.clone());
    let logits = discriminate_language_logits(&tape, s, &vars, lambda)?;
    Ok(tape.value(logits).softmax_rows())
}

/// The full model: encoder, gate layer, token head, and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub encoder: ToyEncoder<S>,
    pub li: LateralInhibitionLayer<S>,
    pub head: LinearHead<S>,
    pub discriminator: LanguageDiscriminator<S>,
}

/// Model hyperparameters that are not training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub radius: usize,
    pub summary: SummaryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            radius: 1,
            summary: SummaryMode::MeanPool,
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn init(
        vocab: usize,
        labels: usize,
        languages: usize,
        config: &ModelConfig,
        k: S,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.embed_dim;
        Self {
            encoder: ToyEncoder::init(vocab, d, config.radius, config.summary, rng),
            li: LateralInhibitionLayer::init(d, k, rng),
            head: LinearHead::zeros(labels, d),
            discriminator: LanguageDiscriminator::init(d, languages, rng),
        }
    }

    /// Canonical (name, tensor) listing; the parameter order Adam state and
    /// checkpoints rely on.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> =
            vec![("encoder.embedding".to_string(), &self.encoder.embedding)];
        for (i, m) in self.encoder.mixers.iter().enumerate() {
            out.push((format!("encoder.mixer.{i}"), m));
        }
        out.push(("li.w".to_string(), &self.li.w));
        out.push(("li.b".to_string(), &self.li.b));
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out.push(("ld.hidden_w".to_string(), &self.discriminator.hidden_w));
        out.push(("ld.hidden_b".to_string(), &self.discriminator.hidden_b));
        out.push(("ld.out_w".to_string(), &self.discriminator.out_w));
        out.push(("ld.out_b".to_string(), &self.discriminator.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.encoder.embedding];
        out.extend(self.encoder.mixers.iter_mut());
        out.push(&mut self.li.w);
        out.push(&mut self.li.b);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out.push(&mut self.discriminator.hidden_w);
        out.push(&mut self.discriminator.hidden_b);
        out.push(&mut self.discriminator.out_w);
        out.push(&mut self.discriminator.out_b);
        out
    }

    /// Registers every parameter as a leaf on `tape`, in canonical order.
    pub fn stage(&self, tape: &Tape<S>) -> StagedModel<S> {
        let embedding = tape.leaf(self.encoder.embedding.clone());
        let mixers: Vec<Var> = self
            .encoder
            .mixers
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect();
        let li_w = tape.leaf(self.li.w.clone());
        let li_b = tape.leaf(self.li.b.clone());
        let head_w = tape.leaf(self.head.w.clone());
        let head_b = tape.leaf(self.head.b.clone());
        let hidden_w = tape.leaf(self.discriminator.hidden_w.clone());
        let hidden_b = tape.leaf(self.discriminator.hidden_b.clone());
        let out_w = tape.leaf(self.discriminator.out_w.clone());
        let out_b = tape.leaf(self.discriminator.out_b.clone());

        let mut all = vec![embedding];
        all.extend(mixers.iter().copied());
        all.extend([li_w, li_b, head_w, head_b, hidden_w, hidden_b, out_w, out_b]);

        StagedModel {
            encoder: EncoderVars { embedding, mixers },
            li_w,
            li_b,
            head_w,
            head_b,
            discriminator: DiscriminatorVars {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            },
            all,
            radius: self.encoder.radius,
            summary: self.encoder.summary,
            k: self.li.k,
        }
    }
}

/// Tape handles for every model parameter plus the forward hyperparameters.
#[derive(Debug, Clone)]
pub struct StagedModel<S> {
    pub encoder: EncoderVars,
    pub li_w: Var,
    pub li_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub discriminator: DiscriminatorVars,
    /// All parameter vars in canonical order.
    pub all: Vec<Var>,
    pub radius: usize,
    pub summary: SummaryMode,
    pub k: S,
}

impl<S: Scalar> StagedModel<S> {
    /// Token logits for one sentence, with lateral inhibition if requested.
    pub fn sentence_logits(
        &self,
        tape: &Tape<S>,
        ids: &[usize],
        li_enabled: bool,
    ) -> Result<(Var, Var), AutodiffError> {
        let (h, pooled) = encode_sentence(tape, ids, &self.encoder, self.radius, self.summary)?;
        let features = if li_enabled {
            li_forward(tape, h, self.li_w, self.li_b, self.k)?
        } else {
            h
        };
        let logits = head_logits(tape, features, self.head_w, self.head_b)?;
        Ok((logits, pooled))
    }

    /// Language logits for a pooled summary.
    pub fn language_logits(
        &self,
        tape: &Tape<S>,
        pooled: Var,
        lambda: S,
    ) -> Result<Var, AutodiffError> {
        discriminate_language_logits(tape, pooled, &self.discriminator, lambda)
    }
}
