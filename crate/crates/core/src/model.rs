//! Dual-stream fusion classifier with an optional paraphrase-augmentation
//! branch on the text side.
//!
//! Raw branch:        logits = ReLU(concat(i W_I, q W_Q) W_F) W_CLS
//! Augmented branch:  q is replaced by
//!                    Q_aug = ReLU((q W_O + sum_i p_i W_P) W_out) + q
//! before the same projection/fusion/classification pipeline.
//!
//! Embeddings are row vectors; a projection from dimension `a` to `b` is an
//! `a x b` matrix applied on the right. Projections carry no bias terms.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::rng::{stream_rng, uniform_sym, DOMAIN_INIT};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::{NumError, Tensor};

/// Model dimensions. `d_k` is derived as `d_text / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_img: usize,
    pub d_text: usize,
    pub d_k: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(d: usize, d_img: usize, d_text: usize, num_classes: usize) -> Result<Self, NumError> {
        if d == 0 || d_img == 0 || d_text == 0 || num_classes == 0 {
            return Err(NumError::Contract("model dims must be positive".into()));
        }
        if d_text % 2 != 0 {
            return Err(NumError::Contract(format!(
                "d_text must be even (d_k = d_text / 2), got {d_text}"
            )));
        }
        Ok(ModelDims {
            d,
            d_img,
            d_text,
            d_k: d_text / 2,
            num_classes,
        })
    }

    /// Stock hidden sizes: d = 512, d_img = 768, d_text = 1024.
    pub fn with_defaults(num_classes: usize) -> Result<Self, NumError> {
        Self::new(512, 768, 1024, num_classes)
    }
}

pub const PARAM_NAMES: [&str; 7] = ["W_I", "W_Q", "W_F", "W_CLS", "W_P", "W_O", "W_out"];

/// The seven learnable projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub w_i: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_cls: Tensor<T>,
    pub w_p: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: &ModelDims) -> Self {
        ModelParams {
            w_i: Tensor::zeros(dims.d_img, dims.d),
            w_q: Tensor::zeros(dims.d_text, dims.d),
            w_f: Tensor::zeros(2 * dims.d, dims.d),
            w_cls: Tensor::zeros(dims.d, dims.num_classes),
            w_p: Tensor::zeros(dims.d_text, dims.d_k),
            w_o: Tensor::zeros(dims.d_text, dims.d_k),
            w_out: Tensor::zeros(dims.d_k, dims.d_text),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor<T>); 7] {
        [
            ("W_I", &self.w_i),
            ("W_Q", &self.w_q),
            ("W_F", &self.w_f),
            ("W_CLS", &self.w_cls),
            ("W_P", &self.w_p),
            ("W_O", &self.w_o),
            ("W_out", &self.w_out),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 7] {
        [
            ("W_I", &mut self.w_i),
            ("W_Q", &mut self.w_q),
            ("W_F", &mut self.w_f),
            ("W_CLS", &mut self.w_cls),
            ("W_P", &mut self.w_p),
            ("W_O", &mut self.w_o),
            ("W_out", &mut self.w_out),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn check_shapes(&self, dims: &ModelDims) -> Result<(), NumError> {
        let expected = [
            ("W_I", (dims.d_img, dims.d)),
            ("W_Q", (dims.d_text, dims.d)),
            ("W_F", (2 * dims.d, dims.d)),
            ("W_CLS", (dims.d, dims.num_classes)),
            ("W_P", (dims.d_text, dims.d_k)),
            ("W_O", (dims.d_text, dims.d_k)),
            ("W_out", (dims.d_k, dims.d_text)),
        ];
        for ((name, want), (_, tensor)) in expected.iter().zip(self.named()) {
            if tensor.shape() != *want {
                return Err(NumError::Contract(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_all_finite())
    }
}

fn xavier_uniform<T: Scalar>(rng: &mut impl RngCore, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of_f64(uniform_sym(rng, bound)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Deterministic uniform initialization in
/// `(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out)))`.
pub fn init_params<T: Scalar>(dims: &ModelDims, seed: u64) -> ModelParams<T> {
    let mut rng = stream_rng(seed, DOMAIN_INIT, 0);
    // Fixed draw order; changing it would silently reseed everything.
    ModelParams {
        w_i: xavier_uniform(&mut rng, dims.d_img, dims.d),
        w_q: xavier_uniform(&mut rng, dims.d_text, dims.d),
        w_f: xavier_uniform(&mut rng, 2 * dims.d, dims.d),
        w_cls: xavier_uniform(&mut rng, dims.d, dims.num_classes),
        w_p: xavier_uniform(&mut rng, dims.d_text, dims.d_k),
        w_o: xavier_uniform(&mut rng, dims.d_text, dims.d_k),
        w_out: xavier_uniform(&mut rng, dims.d_k, dims.d_text),
    }
}

/// Which text branch a forward pass uses. `Augmented` carries the sampled
/// paraphrase vectors (at least one).
#[derive(Debug, Clone)]
pub enum ForwardMode<'a> {
    Raw,
    Augmented(Vec<&'a [f32]>),
}

/// Tape handles for the registered parameter matrices.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w_i: VarId,
    pub w_q: VarId,
    pub w_f: VarId,
    pub w_cls: VarId,
    pub w_p: VarId,
    pub w_o: VarId,
    pub w_out: VarId,
}

/// Snapshot the parameters onto a tape. Trainable leaves retain gradients.
pub fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> ParamVars {
    ParamVars {
        w_i: tape.leaf(params.w_i.clone(), trainable),
        w_q: tape.leaf(params.w_q.clone(), trainable),
        w_f: tape.leaf(params.w_f.clone(), trainable),
        w_cls: tape.leaf(params.w_cls.clone(), trainable),
        w_p: tape.leaf(params.w_p.clone(), trainable),
        w_o: tape.leaf(params.w_o.clone(), trainable),
        w_out: tape.leaf(params.w_out.clone(), trainable),
    }
}

impl ParamVars {
    pub fn named(&self) -> [(&'static str, VarId); 7] {
        [
            ("W_I", self.w_i),
            ("W_Q", self.w_q),
            ("W_F", self.w_f),
            ("W_CLS", self.w_cls),
            ("W_P", self.w_p),
            ("W_O", self.w_o),
            ("W_out", self.w_out),
        ]
    }
}

/// Project image and (final) question embeddings into the shared hidden
/// space: `I_embed = img W_I`, `Q_embed = q W_Q`. Rows are samples.
pub fn project_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    images: VarId,
    questions_final: VarId,
) -> Result<(VarId, VarId), NumError> {
    let i_embed = tape.matmul(images, vars.w_i)?;
    let q_embed = tape.matmul(questions_final, vars.w_q)?;
    Ok((i_embed, q_embed))
}

/// Joint representation: `F_embed = concat(I_embed, Q_embed) W_F`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    i_embed: VarId,
    q_embed: VarId,
) -> Result<VarId, NumError> {
    let joint = tape.concat_cols(i_embed, q_embed)?;
    tape.matmul(joint, vars.w_f)
}

/// Classifier head: `logits = ReLU(F_embed) W_CLS`.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    f_embed: VarId,
) -> Result<VarId, NumError> {
    let activated = tape.relu(f_embed)?;
    tape.matmul(activated, vars.w_cls)
}

/// Paraphrase mixing with a skip connection. `e_o` holds one row per sample
/// (`a x d_text`); `paraphrases` holds the sampled vectors for all samples,
/// grouped per sample (`(a * n) x d_text`, sample-major).
///
/// Per sample: `E = e_o W_O + sum_i p_i W_P`; output `ReLU(E W_out) + e_o`.
/// With `W_out = 0` the output equals `e_o` exactly (skip-connection floor).
pub fn augment_question<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    e_o: VarId,
    paraphrases: VarId,
    n: usize,
) -> Result<VarId, NumError> {
    if n == 0 {
        return Err(NumError::Contract(
            "augmented forward requires n >= 1 paraphrases; use the raw branch for n = 0".into(),
        ));
    }
    let samples = tape.value(e_o).rows();
    if tape.value(paraphrases).rows() != samples * n {
        return Err(NumError::ShapeMismatch {
            op: "augment_question",
            lhs: tape.value(e_o).shape(),
            rhs: tape.value(paraphrases).shape(),
        });
    }
    let transformed = tape.matmul(paraphrases, vars.w_p)?;
    let pooled = tape.sum_row_groups(transformed, n)?;
    let original = tape.matmul(e_o, vars.w_o)?;
    let mixed = tape.add(original, pooled)?;
    let projected = tape.matmul(mixed, vars.w_out)?;
    let activated = tape.relu(projected)?;
    tape.add(activated, e_o)
}

/// Shared trunk after the question side is resolved: projection, fusion,
/// classification. `images` and `questions_final` must have matching rows.
pub fn forward_rows<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    images: VarId,
    questions_final: VarId,
) -> Result<VarId, NumError> {
    let (i_embed, q_embed) = project_inputs(tape, vars, images, questions_final)?;
    let f_embed = fuse(tape, vars, i_embed, q_embed)?;
    classify(tape, vars, f_embed)
}

/// Single-sample forward pass: returns `1 x C` logits. The raw branch never
/// touches the paraphrase pool.
pub fn forward<T: Scalar>(
    record: &SampleRecord,
    mode: &ForwardMode<'_>,
    params: &ModelParams<T>,
    dims: &ModelDims,
) -> Result<Tensor<T>, NumError> {
    params.check_shapes(dims)?;
    let mut tape: Tape<T> = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let logits = forward_on_tape(&mut tape, &vars, record, mode, dims)?;
    Ok(tape.value(logits).clone())
}

/// Forward pass for one record on an existing tape (used by training).
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    record: &SampleRecord,
    mode: &ForwardMode<'_>,
    dims: &ModelDims,
) -> Result<VarId, NumError> {
    if record.image_embed.len() != dims.d_img {
        return Err(NumError::BadDataLength {
            rows: 1,
            cols: dims.d_img,
            got: record.image_embed.len(),
        });
    }
    if record.question_embed.len() != dims.d_text {
        return Err(NumError::BadDataLength {
            rows: 1,
            cols: dims.d_text,
            got: record.question_embed.len(),
        });
    }
    let images = tape.leaf(
        Tensor::from_f32_rows([record.image_embed.as_slice()], dims.d_img)?,
        false,
    );
    let question = tape.leaf(
        Tensor::from_f32_rows([record.question_embed.as_slice()], dims.d_text)?,
        false,
    );
    let questions_final = match mode {
        ForwardMode::Raw => question,
        ForwardMode::Augmented(paraphrases) => {
            let n = paraphrases.len();
            if n == 0 {
                return Err(NumError::Contract(
                    "augmented forward requires n >= 1 paraphrases; use the raw branch for n = 0"
                        .into(),
                ));
            }
            let stacked = tape.leaf(
                Tensor::from_f32_rows(paraphrases.iter().copied(), dims.d_text)?,
                false,
            );
            augment_question(tape, vars, question, stacked, n)?
        }
    };
    forward_rows(tape, vars, images, questions_final)
}

/// Raw-branch logits for a batch of records (`len x C`), no gradients. This
/// is the only forward path evaluation code uses: paraphrase pools are never
/// read.
pub fn logits_raw_batch<T: Scalar>(
    params: &ModelParams<T>,
    dims: &ModelDims,
    records: &[&SampleRecord],
) -> Result<Tensor<T>, NumError> {
    let mut tape: Tape<T> = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let images = tape.leaf(
        Tensor::from_f32_rows(records.iter().map(|r| r.image_embed.as_slice()), dims.d_img)?,
        false,
    );
    let questions = tape.leaf(
        Tensor::from_f32_rows(records.iter().map(|r| r.question_embed.as_slice()), dims.d_text)?,
        false,
    );
    let logits = forward_rows(&mut tape, &vars, images, questions)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::rng::{stream_rng, uniform_sym};
    use crate::tape::grad_check;
    use approx::assert_relative_eq;

    fn test_dims() -> ModelDims {
        ModelDims::new(10, 12, 16, 5).unwrap()
    }

    fn rand_row(cols: usize, seed: u64) -> Vec<f32> {
        let mut rng = stream_rng(seed, 7, 0);
        (0..cols).map(|_| uniform_sym(&mut rng, 1.0) as f32).collect()
    }

    fn test_record(dims: &ModelDims, seed: u64) -> SampleRecord {
        SampleRecord {
            id: format!("r{seed}"),
            image_embed: rand_row(dims.d_img, seed),
            question_embed: rand_row(dims.d_text, seed + 1),
            paraphrase_pool: (0..6).map(|i| rand_row(dims.d_text, seed + 2 + i)).collect(),
            answer_id: 1,
            answer_text: "the answer is 1".into(),
        }
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::new(8, 8, 15, 3).is_err()); // odd d_text
        assert!(ModelDims::new(0, 8, 16, 3).is_err());
        let dims = ModelDims::with_defaults(42).unwrap();
        assert_eq!(dims.d_k, 512);
        assert_eq!(2 * dims.d_k, dims.d_text);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = test_dims();
        let a: ModelParams<f64> = init_params(&dims, 9);
        let b: ModelParams<f64> = init_params(&dims, 9);
        assert_eq!(a, b);
        let c: ModelParams<f64> = init_params(&dims, 10);
        assert_ne!(a, c);

        let bound = (6.0 / (dims.d + dims.num_classes) as f64).sqrt();
        for &x in a.w_cls.data() {
            assert!(x.abs() <= bound, "{x} exceeds {bound}");
        }
    }

    #[test]
    fn init_entry_mean_is_near_zero() {
        let dims = ModelDims::new(64, 48, 96, 7).unwrap();
        let params: ModelParams<f64> = init_params(&dims, 4);
        for (name, t) in params.named() {
            let (rows, cols) = t.shape();
            let n = t.len() as f64;
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            // Uniform(-b, b) has sd b/sqrt(3); the empirical mean should sit
            // within 3 standard errors of zero.
            let mean = t.data().iter().sum::<f64>() / n;
            let tol = 3.0 * bound / (3.0f64).sqrt() / n.sqrt();
            assert!(mean.abs() < tol, "{name}: mean {mean}, tol {tol}");
        }
    }

    #[test]
    fn project_inputs_zero_and_identity() {
        // W_Q = 0 kills the question embedding.
        let dims = test_dims();
        let mut params: ModelParams<f64> = init_params(&dims, 1);
        params.w_q = Tensor::zeros(dims.d_text, dims.d);
        let record = test_record(&dims, 20);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let img = tape.leaf(Tensor::from_f32_rows([record.image_embed.as_slice()], dims.d_img).unwrap(), false);
        let q = tape.leaf(Tensor::from_f32_rows([record.question_embed.as_slice()], dims.d_text).unwrap(), false);
        let (_, q_embed) = project_inputs(&mut tape, &vars, img, q).unwrap();
        assert_eq!(tape.value(q_embed), &Tensor::zeros(1, dims.d));

        // d_text == d and W_Q = I passes the input through.
        let dims = ModelDims::new(8, 6, 8, 3).unwrap();
        let mut params: ModelParams<f64> = init_params(&dims, 2);
        let mut eye = Tensor::zeros(8, 8);
        for i in 0..8 {
            eye.set(i, i, 1.0);
        }
        params.w_q = eye;
        let q_row = rand_row(8, 33);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let img = tape.leaf(Tensor::<f64>::zeros(1, 6), false);
        let q = tape.leaf(Tensor::from_f32_rows([q_row.as_slice()], 8).unwrap(), false);
        let (_, q_embed) = project_inputs(&mut tape, &vars, img, q).unwrap();
        let expected: Vec<f64> = q_row.iter().map(|&x| x as f64).collect();
        assert_eq!(tape.value(q_embed).data(), expected.as_slice());
    }

    #[test]
    fn project_matches_independent_matmul() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 3);
        let record = test_record(&dims, 30);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let img = tape.leaf(Tensor::from_f32_rows([record.image_embed.as_slice()], dims.d_img).unwrap(), false);
        let q = tape.leaf(Tensor::from_f32_rows([record.question_embed.as_slice()], dims.d_text).unwrap(), false);
        let (i_embed, _) = project_inputs(&mut tape, &vars, img, q).unwrap();

        // Hand-rolled product.
        let mut expected = vec![0.0f64; dims.d];
        for (j, e) in expected.iter_mut().enumerate() {
            for k in 0..dims.d_img {
                *e += record.image_embed[k] as f64 * params.w_i.get(k, j);
            }
        }
        for (got, want) in tape.value(i_embed).data().iter().zip(&expected) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn fuse_zero_inputs_and_block_identity() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 4);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let zero = tape.leaf(Tensor::zeros(1, dims.d), false);
        let f = fuse(&mut tape, &vars, zero, zero).unwrap();
        assert_eq!(tape.value(f), &Tensor::zeros(1, dims.d));

        // W_F = [I; 0] selects the image half.
        let mut params: ModelParams<f64> = init_params(&dims, 5);
        let mut block = Tensor::zeros(2 * dims.d, dims.d);
        for i in 0..dims.d {
            block.set(i, i, 1.0);
        }
        params.w_f = block;
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let i_embed = tape.leaf(Tensor::from_row(&[1.0, -2.0, 3.0, 0.5, 1.5, -0.25, 2.0, 0.0, 4.0, -1.0]), false);
        let q_embed = tape.leaf(Tensor::from_row(&rand_row(dims.d, 50).iter().map(|&x| x as f64).collect::<Vec<_>>()), false);
        let f = fuse(&mut tape, &vars, i_embed, q_embed).unwrap();
        assert_eq!(tape.value(f), tape.value(i_embed));
    }

    #[test]
    fn classify_relu_annihilation_and_zero_head() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 6);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let negative = tape.leaf(Tensor::from_row(&vec![-1.0; dims.d]), false);
        let logits = classify(&mut tape, &vars, negative).unwrap();
        assert_eq!(tape.value(logits), &Tensor::zeros(1, dims.num_classes));

        let mut params: ModelParams<f64> = init_params(&dims, 7);
        params.w_cls = Tensor::zeros(dims.d, dims.num_classes);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let x = tape.leaf(Tensor::from_row(&vec![0.7; dims.d]), false);
        let logits = classify(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(logits), &Tensor::zeros(1, dims.num_classes));
    }

    #[test]
    fn augment_zero_weights_is_pure_skip() {
        let dims = test_dims();
        let mut params: ModelParams<f64> = init_params(&dims, 8);
        params.w_p = Tensor::zeros(dims.d_text, dims.d_k);
        params.w_o = Tensor::zeros(dims.d_text, dims.d_k);
        params.w_out = Tensor::zeros(dims.d_k, dims.d_text);
        let record = test_record(&dims, 60);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let e_o = tape.leaf(Tensor::from_f32_rows([record.question_embed.as_slice()], dims.d_text).unwrap(), false);
        let paras = tape.leaf(
            Tensor::from_f32_rows(record.paraphrase_pool[..2].iter().map(|p| p.as_slice()), dims.d_text).unwrap(),
            false,
        );
        let q_aug = augment_question(&mut tape, &vars, e_o, paras, 2).unwrap();
        assert_eq!(tape.value(q_aug), tape.value(e_o));
    }

    #[test]
    fn augment_identical_paraphrases_scale_linearly() {
        // p_i == e_o and W_P == W_O makes the mixed embedding (1+n) e_o W_O.
        let dims = test_dims();
        let mut params: ModelParams<f64> = init_params(&dims, 9);
        params.w_p = params.w_o.clone();
        let q = rand_row(dims.d_text, 70);
        let n = 3usize;
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let e_o = tape.leaf(Tensor::from_f32_rows([q.as_slice()], dims.d_text).unwrap(), false);
        let paras = tape.leaf(
            Tensor::from_f32_rows(std::iter::repeat(q.as_slice()).take(n), dims.d_text).unwrap(),
            false,
        );
        let transformed = tape.matmul(paras, vars.w_p).unwrap();
        let pooled = tape.sum_row_groups(transformed, n).unwrap();
        let original = tape.matmul(e_o, vars.w_o).unwrap();
        let mixed = tape.add(original, pooled).unwrap();
        let expected = tape.value(original).scale((1 + n) as f64);
        for (got, want) in tape.value(mixed).data().iter().zip(expected.data()) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn augment_matches_equation_by_equation_oracle() {
        // Independent evaluation: transform each paraphrase separately, add
        // the transformed original, apply the output projection, ReLU, skip.
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 10);
        let record = test_record(&dims, 80);
        let paraphrases: Vec<&[f32]> =
            record.paraphrase_pool[..2].iter().map(|p| p.as_slice()).collect();

        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, false);
        let e_o = tape.leaf(Tensor::from_f32_rows([record.question_embed.as_slice()], dims.d_text).unwrap(), false);
        let paras = tape.leaf(Tensor::from_f32_rows(paraphrases.iter().copied(), dims.d_text).unwrap(), false);
        let got = augment_question(&mut tape, &vars, e_o, paras, 2).unwrap();

        let vecmat = |v: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            let (rows, cols) = w.shape();
            assert_eq!(v.len(), rows);
            let mut out = vec![0.0; cols];
            for (j, o) in out.iter_mut().enumerate() {
                for (k, &x) in v.iter().enumerate() {
                    *o += x * w.get(k, j);
                }
            }
            out
        };
        let e_o64: Vec<f64> = record.question_embed.iter().map(|&x| x as f64).collect();
        let e_p: Vec<Vec<f64>> = paraphrases
            .iter()
            .map(|p| vecmat(&p.iter().map(|&x| x as f64).collect::<Vec<_>>(), &params.w_p))
            .collect();
        let e_o_t = vecmat(&e_o64, &params.w_o);
        let mut mixed = e_o_t;
        for ep in &e_p {
            for (m, &x) in mixed.iter_mut().zip(ep) {
                *m += x;
            }
        }
        let projected = vecmat(&mixed, &params.w_out);
        let expected: Vec<f64> = projected
            .iter()
            .zip(&e_o64)
            .map(|(&h, &skip)| h.max(0.0) + skip)
            .collect();

        for (g, w) in tape.value(got).data().iter().zip(&expected) {
            assert_relative_eq!(g, w, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn augment_rejects_zero_paraphrases() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 11);
        let record = test_record(&dims, 90);
        let err = forward(
            &record,
            &ForwardMode::Augmented(vec![]),
            &params,
            &dims,
        )
        .unwrap_err();
        assert!(matches!(err, NumError::Contract(_)));
    }

    #[test]
    fn forward_zero_augment_weights_equals_raw() {
        let dims = test_dims();
        let mut params: ModelParams<f64> = init_params(&dims, 12);
        params.w_out = Tensor::zeros(dims.d_k, dims.d_text);
        let record = test_record(&dims, 100);
        let raw = forward(&record, &ForwardMode::Raw, &params, &dims).unwrap();
        let paraphrases: Vec<&[f32]> =
            record.paraphrase_pool[..2].iter().map(|p| p.as_slice()).collect();
        let aug = forward(&record, &ForwardMode::Augmented(paraphrases), &params, &dims).unwrap();
        assert_eq!(raw, aug);
    }

    #[test]
    fn raw_forward_never_reads_paraphrase_pool() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 13);
        let mut record = test_record(&dims, 110);
        let clean = forward(&record, &ForwardMode::Raw, &params, &dims).unwrap();
        // Poison the pool; a raw forward touching it would go non-finite.
        for p in &mut record.paraphrase_pool {
            for x in p {
                *x = f32::NAN;
            }
        }
        let poisoned = forward(&record, &ForwardMode::Raw, &params, &dims).unwrap();
        assert_eq!(clean, poisoned);
        assert!(poisoned.is_all_finite());
    }

    #[test]
    fn raw_logits_are_invariant_under_pool_permutation() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 14);
        let mut record = test_record(&dims, 120);
        let base = forward(&record, &ForwardMode::Raw, &params, &dims).unwrap();
        record.paraphrase_pool.reverse();
        let permuted = forward(&record, &ForwardMode::Raw, &params, &dims).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn augmented_logits_invariant_under_paraphrase_order() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 15);
        let record = test_record(&dims, 130);
        let sel: Vec<&[f32]> = record.paraphrase_pool[..3].iter().map(|p| p.as_slice()).collect();
        let base = forward(&record, &ForwardMode::Augmented(sel.clone()), &params, &dims).unwrap();
        let mut rev = sel;
        rev.reverse();
        let permuted = forward(&record, &ForwardMode::Augmented(rev), &params, &dims).unwrap();
        for (a, b) in base.data().iter().zip(permuted.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn every_parameter_gets_nonzero_gradient_in_augmented_mode() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 16);
        let record = test_record(&dims, 140);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &params, true);
        let paraphrases: Vec<&[f32]> =
            record.paraphrase_pool[..2].iter().map(|p| p.as_slice()).collect();
        let logits = forward_on_tape(
            &mut tape,
            &vars,
            &record,
            &ForwardMode::Augmented(paraphrases),
            &dims,
        )
        .unwrap();
        let loss = tape
            .softmax_cross_entropy(logits, record.answer_id as usize)
            .unwrap();
        tape.backward(loss).unwrap();
        for (name, id) in vars.named() {
            let grad = tape.grad(id).unwrap();
            assert!(
                grad.data().iter().any(|&g| g != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    /// Full-model gradient check for one parameter matrix, away from kinks.
    fn model_grad_check(
        dims: &ModelDims,
        params: &ModelParams<f64>,
        record: &SampleRecord,
        n_paraphrases: usize,
        which: usize,
    ) -> f64 {
        let x = params.named()[which].1.clone();
        let f = |tape: &mut Tape<f64>, xid: VarId| {
            let mut vars = register_params(tape, params, false);
            match which {
                0 => vars.w_i = xid,
                1 => vars.w_q = xid,
                2 => vars.w_f = xid,
                3 => vars.w_cls = xid,
                4 => vars.w_p = xid,
                5 => vars.w_o = xid,
                _ => vars.w_out = xid,
            }
            let mode = if n_paraphrases == 0 {
                ForwardMode::Raw
            } else {
                ForwardMode::Augmented(
                    record.paraphrase_pool[..n_paraphrases]
                        .iter()
                        .map(|p| p.as_slice())
                        .collect(),
                )
            };
            let logits = forward_on_tape(tape, &vars, record, &mode, dims)?;
            tape.softmax_cross_entropy(logits, record.answer_id as usize)
        };
        grad_check(&f, &x, 1e-5).unwrap()
    }

    #[test]
    fn full_model_gradients_pass_finite_difference_check() {
        let dims = test_dims();
        let params: ModelParams<f64> = init_params(&dims, 17);
        for sample_seed in [200u64, 201, 202] {
            let record = test_record(&dims, sample_seed);
            for which in 0..7 {
                // Raw branch only reaches the first four matrices.
                if which < 4 {
                    let err = model_grad_check(&dims, &params, &record, 0, which);
                    assert!(err < 1e-3, "raw {}: err {err}", PARAM_NAMES[which]);
                }
                let err = model_grad_check(&dims, &params, &record, 2, which);
                assert!(err < 1e-3, "aug {}: err {err}", PARAM_NAMES[which]);
            }
        }
    }

    #[test]
    fn evaluation_batch_matches_per_sample_forward() {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 10,
            d_img: 12,
            d_text: 16,
            pool_size: 4,
            sigma_p: 0.05,
            separation: 1.0,
            sigma_q: 0.2,
            rho: 0.5,
        };
        let gen = generate_synthetic(&spec, 21).unwrap();
        let dims = ModelDims::new(10, 12, 16, 3).unwrap();
        let params: ModelParams<f64> = init_params(&dims, 18);
        let refs: Vec<&SampleRecord> = gen.dev.iter().collect();
        let batch = logits_raw_batch(&params, &dims, &refs).unwrap();
        for (i, r) in refs.iter().enumerate() {
            let single = forward(r, &ForwardMode::Raw, &params, &dims).unwrap();
            assert_eq!(batch.row(i), single.data());
        }
    }
}
