//! Finite-difference cases for every differentiable operation, grouped
//! by family. Each family draws its inputs and small models from `seed`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheck, DEFAULT_STEP};
use crate::detector::{clf_loss_from_logits_on, reg_loss_on, DetectorModel};
use crate::error::{ModelError, Result};
use crate::frame::{kl_gaussian_on, CvaeDims, CvaeModel};
use crate::nn::{Bound, ParamSet};
use crate::segment::{fuse_on, SegmentDims, SegmentModel};
use crate::synth::ActionInterval;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// One checked expression.
#[derive(Debug)]
pub struct Case {
    pub name: String,
    pub result: Result<GradCheck>,
}

impl Case {
    /// Worst relative error, or infinity if the expression failed.
    pub fn max_rel_err(&self) -> f64 {
        self.result.as_ref().map_or(f64::INFINITY, |r| r.max_rel_err)
    }
}

pub type Family = fn(u64) -> Vec<Case>;

pub const FAMILIES: [(&str, Family); 10] = [
    ("matmul", matmul),
    ("conv1d", conv1d),
    ("elementwise", elementwise_and_shape_ops),
    ("encode_decode", encode_and_decode),
    ("kl_gaussian", kl_gaussian),
    ("cvae_loss", cvae_loss),
    ("attention_enhance", attention_forward_and_enhance),
    ("clf_loss", clf_loss),
    ("reg_loss", reg_loss),
    ("fuse", fuse),
];

/// Every case of every family for one seed.
pub fn run_all(seed: u64) -> Vec<Case> {
    FAMILIES.iter().flat_map(|(_, f)| f(seed)).collect()
}

fn case<F>(cases: &mut Vec<Case>, name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    cases.push(Case {
        name: name.to_string(),
        result: check(inputs, DEFAULT_STEP, f),
    });
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

/// Model parameters followed by extra inputs, as one input list.
fn with_params(params: &ParamSet, extra: &[Tensor]) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| p.value.clone())
        .chain(extra.iter().cloned())
        .collect()
}

fn split(params: &ParamSet, vars: &[Var]) -> (Bound, Vec<Var>) {
    let n = params.len();
    (Bound::from_vars(vars[..n].to_vec()), vars[n..].to_vec())
}

fn sum_of<F, E>(f: F) -> impl Fn(&mut Tape, &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: Into<ModelError>,
{
    move |tape, v| {
        let out = f(tape, v).map_err(Into::into)?;
        // a fixed random-looking projection so every output element matters
        let n = tape.value(out).numel();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w).unwrap());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod)?)
    }
}

fn matmul(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    case(&mut cases, "matmul", &[a, b], sum_of(|t, v| t.matmul(v[0], v[1])));
    cases
}

fn conv1d(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[7, 3], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 2], -1.0, 1.0);
    for (stride, pad) in [
        (1, Padding::Same),
        (2, Padding::Same),
        (1, Padding::Valid),
        (2, Padding::Valid),
    ] {
        case(
            &mut cases,
            &format!("conv1d stride {stride} {pad:?}"),
            &[x.clone(), k.clone()],
            sum_of(move |t, v| t.conv1d(v[0], v[1], stride, pad)),
        );
    }
    cases
}

fn elementwise_and_shape_ops(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    type Op = fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>;
    let unary: [(&str, Op, f64, f64); 12] = [
        ("neg", |t, v| t.neg(v[0]), -2.0, 2.0),
        ("scale", |t, v| t.scale(v[0], -1.7), -2.0, 2.0),
        ("shift", |t, v| t.shift(v[0], 0.3), -2.0, 2.0),
        ("one_minus", |t, v| t.one_minus(v[0]), -2.0, 2.0),
        ("exp", |t, v| t.exp(v[0]), -2.0, 2.0),
        ("expm1", |t, v| t.expm1(v[0]), -2.0, 2.0),
        ("log", |t, v| t.log(v[0]), 0.2, 3.0),
        ("sigmoid", |t, v| t.sigmoid(v[0]), -3.0, 3.0),
        ("relu", |t, v| t.relu(v[0]), -2.0, 2.0),
        ("square", |t, v| t.square(v[0]), -2.0, 2.0),
        ("softplus", |t, v| t.softplus(v[0]), -3.0, 3.0),
        ("smooth_l1", |t, v| t.smooth_l1(v[0]), -3.0, 3.0),
    ];
    let binary: [(&str, Op); 4] = [
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[0], v[1])),
        ("mul", |t, v| t.mul(v[0], v[1])),
        ("div", |t, v| t.div(v[0], v[1])),
    ];
    let shaped: [(&str, Op); 7] = [
        ("log_softmax", |t, v| t.log_softmax(v[0])),
        ("transpose", |t, v| t.transpose(v[0])),
        ("reshape", |t, v| t.reshape(v[0], &[4, 3])),
        ("gather_rows", |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        ("broadcast_to", |t, v| {
            let row = t.gather_rows(v[0], &[1])?;
            t.broadcast_to(row, &[5, 4])
        }),
        ("mean", |t, v| t.mean(v[0])),
        ("index", |t, v| t.index(v[0], 5)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, op, lo, hi) in unary {
        let mut x = rand_tensor(&mut rng, &[3, 4], lo, hi);
        if name == "relu" || name == "smooth_l1" {
            // keep samples away from the kinks
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.05 || (v.abs() - 1.0).abs() < 0.05 {
                    *v += 0.2;
                }
            });
        }
        case(&mut cases, name, &[x], sum_of(op));
    }
    for (name, op) in binary {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        case(&mut cases, name, &[a, b], sum_of(op));
    }
    let row = rand_tensor(&mut rng, &[4], -2.0, 2.0);
    let m = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    case(
        &mut cases,
        "broadcast add",
        &[m.clone(), row],
        sum_of(|t, v| t.add(v[0], v[1])),
    );
    for (name, op) in shaped {
        case(&mut cases, name, std::slice::from_ref(&m), sum_of(op));
    }
    let other = rand_tensor(&mut rng, &[3, 2], -2.0, 2.0);
    case(
        &mut cases,
        "concat_cols",
        &[m.clone(), other],
        sum_of(|t, v| t.concat_cols(v[0], v[1])),
    );
    cases
}

fn small_cvae(seed: u64) -> CvaeModel {
    let dims = CvaeDims {
        d: 4,
        d_r: 3,
        h_enc: 5,
        h_dec: 5,
        d_z: 2,
    };
    CvaeModel::new(dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_segment(seed: u64) -> SegmentModel {
    let dims = SegmentDims {
        d: 4,
        h_att: 3,
        att_kernel: 3,
    };
    SegmentModel::new(dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

const T: usize = 8;

fn inputs(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let f = rand_tensor(rng, &[T, 4], -2.0, 2.0);
    let lam = rand_tensor(rng, &[T, 1], 0.1, 0.9);
    let eps = rand_tensor(rng, &[T, 2], -1.5, 1.5);
    (f, lam, eps)
}

fn encode_and_decode(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let m = small_cvae(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let (f, lam, eps) = inputs(&mut rng);
    let all = with_params(&m.params, &[f.clone(), lam.clone()]);
    case(
        &mut cases,
        "encode",
        &all,
        sum_of(|t, v| {
            let (b, x) = split(&m.params, v);
            Ok::<_, ModelError>(m.encode_on(t, &b, x[0], x[1], &eps)?.z)
        }),
    );
    let z = rand_tensor(&mut rng, &[T, 2], -1.5, 1.5);
    let all = with_params(&m.params, &[z, lam]);
    case(
        &mut cases,
        "decode",
        &all,
        sum_of(|t, v| {
            let (b, x) = split(&m.params, v);
            m.decode_on(t, &b, x[0], x[1])
        }),
    );
    cases
}

fn kl_gaussian(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[T, 3], -1.5, 1.5)).collect();
    case(&mut cases, "kl_gaussian", &ins, |t, v| {
        kl_gaussian_on(t, v[0], v[1], v[2], v[3])
    });
    cases
}

fn cvae_loss(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let m = small_cvae(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let (f, lam, eps) = inputs(&mut rng);
    for beta in [0.0, 0.5] {
        let all = with_params(&m.params, &[f.clone(), lam.clone()]);
        case(&mut cases, &format!("cvae_loss beta {beta}"), &all, |t, v| {
            let (b, x) = split(&m.params, v);
            Ok(m.cvae_loss_on(t, &b, x[0], x[1], &eps, beta)?.total)
        });
    }
    cases
}

fn attention_forward_and_enhance(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let m = small_segment(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
    let (f, lam, _) = inputs(&mut rng);
    let all = with_params(&m.params, std::slice::from_ref(&f));
    case(
        &mut cases,
        "attention_forward",
        &all,
        sum_of(|t, v| {
            let (b, x) = split(&m.params, v);
            m.attention_on(t, &b, x[0])
        }),
    );
    let all = with_params(&m.params, &[f, lam]);
    case(
        &mut cases,
        "enhance",
        &all,
        sum_of(|t, v| {
            let (b, x) = split(&m.params, v);
            m.enhance_on(t, &b, x[0], x[1])
        }),
    );
    cases
}

fn clf_loss(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = DetectorModel::new(4, 3, &mut rng);
    let f_ai = rand_tensor(&mut rng, &[1, 4], -2.0, 2.0);
    let f_nai = rand_tensor(&mut rng, &[1, 4], -2.0, 2.0);
    let all = with_params(&det.params, &[f_ai, f_nai]);
    let c = 1 + seed as usize % 3;
    case(&mut cases, "clf_loss", &all, |t, v| {
        let (b, x) = split(&det.params, v);
        det.clf_loss_on(t, &b, x[0], Some(x[1]), c)
    });
    let logits = rand_tensor(&mut rng, &[1, 4], -3.0, 3.0);
    case(&mut cases, "clf_loss ai only", &[logits], |t, v| {
        clf_loss_from_logits_on(t, v[0], None, c, 3)
    });
    cases
}

fn reg_loss(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let intervals = [
        ActionInterval {
            start: 1,
            end: 4,
            class_id: 1,
        },
        ActionInterval {
            start: 5,
            end: 7,
            class_id: 2,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = DetectorModel::new(4, 2, &mut rng);
    let feats = rand_tensor(&mut rng, &[T, 4], -2.0, 2.0);
    let lam: Vec<f64> = (0..T).map(|_| rng.random_range(0.05..0.95)).collect();
    for background in [false, true] {
        let all = with_params(&det.params, std::slice::from_ref(&feats));
        case(&mut cases, &format!("reg_loss bg {background}"), &all, |t, v| {
            let (b, x) = split(&det.params, v);
            let offsets = det.offsets_on(t, &b, x[0])?;
            reg_loss_on(t, offsets, &lam, &intervals, background)
        });
    }
    cases
}

fn fuse(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let frame = small_cvae(seed);
    let seg = small_segment(seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
    let (f, _, eps) = inputs(&mut rng);
    // gradients reach the segment model through λ only
    let all = with_params(&seg.params, &[f]);
    case(&mut cases, "fuse", &all, |t, v| {
        let (b, x) = split(&seg.params, v);
        let frame_b = frame.params.bind(t, false);
        let lam = seg.attention_on(t, &b, x[0])?;
        fuse_on(t, &frame, &frame_b, x[0], lam, &eps)
    });
    cases
}
