//! Central finite-difference checks of tape gradients in double precision.

use super::{AttentionMask, Rng, Tape, Tensor, Var};

/// Tolerance on the norm-wise relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Projects an op output onto a fixed random direction so every input
/// coordinate gets a non-trivial gradient.
pub fn project(tape: &mut Tape<'_, f64>, out: Var, rng: &mut Rng) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random(&shape, rng));
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod).expect("sum of a tensor")
}

pub type Build<'a> = dyn Fn(&mut Tape<'_, f64>, &[Var], &mut Rng) -> Var + 'a;

/// Worst norm-wise relative error between analytic and central-difference
/// gradients over all inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone(), true)).collect();
        let mut rng = Rng::new(seed);
        let out = build(&mut tape, &vars, &mut rng);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone(), true)).collect();
    let mut rng = Rng::new(seed);
    let out = build(&mut tape, &vars, &mut rng);
    tape.backward(out).expect("scalar output");

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |xs: &[f64]| xs.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Worst error over `trials` random instances of the given input shapes.
pub fn worst_over_trials(shapes: &[&[usize]], build: &Build<'_>, trials: u64) -> f64 {
    (0..trials)
        .map(|trial| {
            let mut rng = Rng::new(1000 + trial);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            gradcheck(&inputs, build, 77 + trial)
        })
        .fold(0.0, f64::max)
}

pub fn check_op(shapes: &[&[usize]], build: &Build<'_>) {
    let err = worst_over_trials(shapes, build, 10);
    assert!(err < TOLERANCE, "relative error {err}");
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub trials: u64,
    pub worst: f64,
}

/// Every differentiable tape primitive, each on `trials` random instances.
pub fn primitive_suite(trials: u64) -> Vec<PrimitiveCheck> {
    type Case = (&'static str, Vec<&'static [usize]>, Box<Build<'static>>);
    let unary = |f: fn(&mut Tape<'_, f64>, Var) -> Var| -> Box<Build<'static>> {
        Box::new(move |t, v, r| {
            let y = f(t, v[0]);
            project(t, y, r)
        })
    };
    let cases: Vec<Case> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|t, v, r| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, r)
        })),
        ("matmul_nt", vec![&[3, 4], &[5, 4]], Box::new(|t, v, r| {
            let y = t.matmul_nt(v[0], v[1]).unwrap();
            project(t, y, r)
        })),
        ("add", vec![&[3, 4], &[4]], Box::new(|t, v, r| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, r)
        })),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|t, v, r| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, r)
        })),
        ("scale", vec![&[3, 4]], unary(|t, x| t.scale(x, -0.7).unwrap())),
        ("gelu", vec![&[4, 5]], unary(|t, x| t.gelu(x).unwrap())),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], Box::new(|t, v, r| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, y, r)
        })),
        ("embedding", vec![&[5, 3]], unary(|t, x| t.embedding(x, &[4, 0, 4, 2]).unwrap())),
        ("softmax_rows", vec![&[4, 5]], unary(|t, x| t.softmax_rows(x).unwrap())),
        ("apply_mask+softmax", vec![&[5, 5]], unary(|t, x| {
            let y = t.apply_mask(x, AttentionMask::Prefix(2)).unwrap();
            t.softmax_rows(y).unwrap()
        })),
        ("log_softmax_rows", vec![&[3, 5]], unary(|t, x| t.log_softmax_rows(x).unwrap())),
        ("transpose", vec![&[3, 4]], unary(|t, x| t.transpose(x).unwrap())),
        ("reshape", vec![&[3, 4]], unary(|t, x| t.reshape(x, &[2, 6]).unwrap())),
        ("sum", vec![&[3, 4]], Box::new(|t, v, _| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y).unwrap()
        })),
        ("mean", vec![&[3, 4]], Box::new(|t, v, _| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y).unwrap()
        })),
        ("mean_rows", vec![&[3, 4]], unary(|t, x| t.mean_rows(x).unwrap())),
        ("cross_entropy", vec![&[4, 6]], Box::new(|t, v, _| t.cross_entropy(v[0], &[1, 5, 0, 1]).unwrap())),
        ("slice_cols", vec![&[3, 6]], unary(|t, x| t.slice_cols(x, 1, 3).unwrap())),
        ("concat_cols", vec![&[3, 2], &[3, 4]], Box::new(|t, v, r| {
            let y = t.concat_cols(&[v[1], v[0]]).unwrap();
            project(t, y, r)
        })),
        ("concat_rows", vec![&[2, 3], &[4, 3]], Box::new(|t, v, r| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            project(t, y, r)
        })),
        ("gather_rows", vec![&[4, 3]], unary(|t, x| t.gather_rows(x, &[3, 0, 0, 2]).unwrap())),
    ];
    cases
        .into_iter()
        .map(|(op, shapes, build)| PrimitiveCheck { op, trials, worst: worst_over_trials(&shapes, build.as_ref(), trials) })
        .collect()
}
