//! Segment-level attention: the λ head, the two-level enhancement pyramid,
//! λ-weighted pooling and the coupling loss against a frozen frame model.

use log::warn;
use rand::Rng;

use crate::error::{ModelError, Result};
use crate::frame::CvaeModel;
use crate::nn::{Bound, Conv1d, Linear, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pooling denominators at or below this are treated as degenerate.
pub const POOL_EPS: f64 = 1e-6;

/// Per-frame attention values, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    lam: Vec<f64>,
}

impl AttentionMap {
    pub fn new(lam: Vec<f64>) -> Result<Self> {
        if let Some((frame, &value)) = lam
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ModelError::AttentionRange { frame, value });
        }
        Ok(Self { lam })
    }

    pub fn constant(t: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; t])
    }

    pub fn values(&self) -> &[f64] {
        &self.lam
    }

    pub fn len(&self) -> usize {
        self.lam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lam.is_empty()
    }

    pub fn inverted(&self) -> Self {
        Self {
            lam: self.lam.iter().map(|l| 1.0 - l).collect(),
        }
    }

    /// `[T × 1]` column for the tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::column(&self.lam)
    }
}

/// Checks that a λ column on the tape stays inside `[0, 1]`.
pub(crate) fn check_attention(tape: &Tape, lam: Var) -> Result<()> {
    AttentionMap::new(tape.value(lam).data().to_vec()).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentDims {
    pub d: usize,
    /// Hidden channels of the attention head.
    pub h_att: usize,
    /// Kernel size of both attention-head convolutions.
    pub att_kernel: usize,
}

impl SegmentDims {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            h_att: 16,
            att_kernel: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentModel {
    pub dims: SegmentDims,
    pub params: ParamSet,
    pub att_conv1: Conv1d,
    pub att_conv2: Conv1d,
    pub theta_seg: Linear,
    pub enhance_conv: Conv1d,
    pub pyr_conv: Conv1d,
}

/// Tape handles produced by one segment forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegmentVars {
    /// `[T × 1]`.
    pub lam: Var,
    /// `[T × D]`.
    pub enhanced: Var,
}

impl SegmentModel {
    pub fn new(dims: SegmentDims, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let SegmentDims { d, h_att, att_kernel } = dims;
        let att_conv1 = Conv1d::new(&mut params, "segment.att_head.0", d, h_att, att_kernel, 1, rng);
        let att_conv2 = Conv1d::new(&mut params, "segment.att_head.1", h_att, 1, att_kernel, 1, rng);
        let theta_seg = Linear::new(&mut params, "segment.theta_seg", d, d, rng);
        let enhance_conv = Conv1d::new(&mut params, "segment.enhance_conv", d + 1, d, 3, 1, rng);
        let pyr_conv = Conv1d::new(&mut params, "segment.pyr_conv", d, d, 3, 2, rng);
        Self {
            dims,
            params,
            att_conv1,
            att_conv2,
            theta_seg,
            enhance_conv,
            pyr_conv,
        }
    }

    /// λ = sigmoid(conv(relu(conv(f)))), one value per frame.
    pub fn attention_on(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let h = self.att_conv1.forward(tape, bound, f)?;
        let h = tape.relu(h)?;
        let logits = self.att_conv2.forward(tape, bound, h)?;
        Ok(tape.sigmoid(logits)?)
    }

    /// Enhanced features: the average of the full-rate level and the
    /// half-rate level upsampled back to `T` by nearest neighbour.
    pub fn enhance_on(&self, tape: &mut Tape, bound: &Bound, f: Var, lam: Var) -> Result<Var> {
        let t = tape.shape(f)[0];
        if t < 4 {
            return Err(ModelError::Pyramid(t));
        }
        let proj = self.theta_seg.forward(tape, bound, f)?;
        let cat = tape.concat_cols(proj, lam)?;
        let level1 = self.enhance_conv.forward(tape, bound, cat)?;
        let level1 = tape.relu(level1)?;
        let level2 = self.pyr_conv.forward(tape, bound, level1)?;
        let level2 = tape.relu(level2)?;
        let up: Vec<usize> = (0..t).map(|i| i / self.pyr_conv.stride).collect();
        let level2 = tape.gather_rows(level2, &up)?;
        let sum = tape.add(level1, level2)?;
        Ok(tape.scale(sum, 0.5)?)
    }

    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<SegmentVars> {
        let lam = self.attention_on(tape, bound, f)?;
        let enhanced = self.enhance_on(tape, bound, f, lam)?;
        Ok(SegmentVars { lam, enhanced })
    }

    pub fn attention_forward(&self, f: &Tensor) -> Result<AttentionMap> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let lam = self.attention_on(&mut tape, &bound, fv)?;
        AttentionMap::new(tape.value(lam).data().to_vec())
    }

    pub fn enhance(&self, f: &Tensor, lam: &AttentionMap) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let lv = tape.constant(lam.to_tensor());
        let out = self.enhance_on(&mut tape, &bound, fv, lv)?;
        Ok(tape.value(out).clone())
    }

    /// Runs the attention head and the pyramid; returns `(λ, F′)`.
    pub fn forward(&self, f: &Tensor) -> Result<(AttentionMap, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let out = self.forward_on(&mut tape, &bound, fv)?;
        Ok((
            AttentionMap::new(tape.value(out.lam).data().to_vec())?,
            tape.value(out.enhanced).clone(),
        ))
    }
}

/// `Σ w_t f_t / Σ w_t` on the tape, as a `[1 × D]` row.
pub fn pool_on(tape: &mut Tape, f: Var, w: Var, which: &'static str) -> Result<Var> {
    let sum: f64 = tape.value(w).data().iter().sum();
    if sum <= POOL_EPS {
        return Err(ModelError::PoolingDegenerate { which, sum });
    }
    let wt = tape.transpose(w)?;
    let num = tape.matmul(wt, f)?;
    let den = tape.sum(w)?;
    Ok(tape.div(num, den)?)
}

/// Like [`pool_on`], but falls back to the unweighted frame mean when the
/// weights are degenerate.
pub fn pool_or_mean_on(tape: &mut Tape, f: Var, w: Var, which: &'static str) -> Result<Var> {
    match pool_on(tape, f, w, which) {
        Err(ModelError::PoolingDegenerate { sum, .. }) => {
            warn!("{which} pooling weights sum to {sum:e}; using unweighted mean");
            let t = tape.shape(f)[0];
            let ones = tape.constant(Tensor::full(&[1, t], 1.0 / t as f64));
            Ok(tape.matmul(ones, f)?)
        }
        other => other,
    }
}

/// Action-instance and non-action pooled features `(f_ai, f_nai)` using λ
/// and `1 − λ` as weights.
pub fn attention_pool(f: &Tensor, lam: &AttentionMap) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let lv = tape.constant(lam.to_tensor());
    let inv = tape.one_minus(lv)?;
    let ai = pool_on(&mut tape, fv, lv, "action")?;
    let nai = pool_on(&mut tape, fv, inv, "non-action")?;
    let flat = |t: &Tensor| t.clone().reshaped(vec![t.numel()]);
    Ok((flat(tape.value(ai))?, flat(tape.value(nai))?))
}

/// Reconstruction coupling against a frozen frame model: `Z` from the frame
/// encoder and `X_R` from its decoder, both conditioned on the segment λ.
/// Returns `Σ_t ‖f_t − X_R,t‖² / T`. Gradients reach only what `lam` depends
/// on when `frame_bound` was bound as frozen.
pub fn fuse_on(
    tape: &mut Tape,
    frame: &CvaeModel,
    frame_bound: &Bound,
    f: Var,
    lam: Var,
    eps: &Tensor,
) -> Result<Var> {
    let latent = frame.encode_on(tape, frame_bound, f, lam, eps)?;
    let recon = frame.decode_on(tape, frame_bound, latent.z, lam)?;
    crate::frame::squared_error_on(tape, f, recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::CvaeDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let u = Uniform::new(-2.0, 2.0).unwrap();
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = u.sample(rng));
        t
    }

    fn zero_params(ps: &mut ParamSet) {
        ps.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
    }

    #[test]
    fn attention_map_rejects_out_of_range() {
        assert_eq!(
            AttentionMap::new(vec![0.2, 1.5]),
            Err(ModelError::AttentionRange { frame: 1, value: 1.5 })
        );
    }

    #[test]
    fn zero_weights_give_half_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = SegmentModel::new(SegmentDims::new(4), &mut rng);
        zero_params(&mut m.params);
        let f = random_tensor(&mut rng, &[10, 4]);
        let lam = m.attention_forward(&f).unwrap();
        assert!(lam.values().iter().all(|&l| l == 0.5));
    }

    #[test]
    fn kernel_one_head_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = SegmentDims {
            att_kernel: 1,
            ..SegmentDims::new(3)
        };
        let m = SegmentModel::new(dims, &mut rng);
        let f = random_tensor(&mut rng, &[6, 3]);
        let perm = [3, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.row(i).to_vec()).collect();
        let fp = Tensor::from_rows(&rows).unwrap();
        let lam = m.attention_forward(&f).unwrap();
        let lam_p = m.attention_forward(&fp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(lam_p.values()[k], lam.values()[i]);
        }
    }

    #[test]
    fn zero_level_two_gives_half_of_level_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let mut m = SegmentModel::new(SegmentDims::new(d), &mut rng);
        // identity projection, centre-tap identity convolution, zero pyramid
        for p in m.params.iter_mut() {
            if p.name.starts_with("segment.theta_seg")
                || p.name.starts_with("segment.enhance_conv")
                || p.name.starts_with("segment.pyr_conv")
            {
                p.value.data_mut().fill(0.0);
            }
        }
        for i in 0..d {
            m.params.get_mut(m.theta_seg.weight).data_mut()[i * d + i] = 1.0;
            // kernel layout [k × (d+1) × d], centre tap k=1
            m.params.get_mut(m.enhance_conv.kernel).data_mut()[(d + 1 + i) * d + i] = 1.0;
        }
        let f = random_tensor(&mut rng, &[8, d]).map(f64::abs);
        let lam = AttentionMap::constant(8, 0.3).unwrap();
        let out = m.enhance(&f, &lam).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, 0.5 * x);
        }
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SegmentModel::new(SegmentDims::new(4), &mut rng);
        let f = Tensor::full(&[16, 4], 0.7);
        let lam = AttentionMap::constant(16, 0.4).unwrap();
        let out = m.enhance(&f, &lam).unwrap();
        // level 1 is constant on frames 1..15; level 2 (stride 2, upsampled)
        // on frames 2..14
        for t in 3..13 {
            for c in 0..4 {
                assert!((out.at(t, c) - out.at(2, c)).abs() < 1e-12);
            }
        }
        assert_eq!(out.shape(), &[16, 4]);
    }

    #[test]
    fn short_sequences_rejected_by_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SegmentModel::new(SegmentDims::new(2), &mut rng);
        let f = Tensor::zeros(&[3, 2]);
        let lam = AttentionMap::constant(3, 0.5).unwrap();
        assert_eq!(m.enhance(&f, &lam), Err(ModelError::Pyramid(3)));
    }

    #[test]
    fn enhance_keeps_length_for_odd_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SegmentModel::new(SegmentDims::new(2), &mut rng);
        for t in 4..12 {
            let f = random_tensor(&mut rng, &[t, 2]);
            let (_, out) = m.forward(&f).unwrap();
            assert_eq!(out.shape(), &[t, 2]);
        }
    }

    #[test]
    fn pool_hand_example() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let lam = AttentionMap::new(vec![0.5, 0.25, 0.25]).unwrap();
        let (ai, nai) = attention_pool(&f, &lam).unwrap();
        assert_eq!(ai.data(), &[0.75, 0.5]);
        // weights 0.5, 0.75, 0.75 over a total of 2
        assert_eq!(nai.data(), &[0.625, 0.75]);
    }

    #[test]
    fn pool_uniform_and_selector() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let ones = AttentionMap::constant(2, 1.0).unwrap();
        assert!(matches!(
            attention_pool(&f, &ones),
            Err(ModelError::PoolingDegenerate { which: "non-action", .. })
        ));
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let w = tape.constant(ones.to_tensor());
        let ai = pool_on(&mut tape, fv, w, "action").unwrap();
        assert_eq!(tape.value(ai).data(), &[2.0, 4.0]);

        let onehot = AttentionMap::new(vec![0.0, 1.0]).unwrap();
        let w = tape.constant(onehot.to_tensor());
        let ai = pool_on(&mut tape, fv, w, "action").unwrap();
        assert_eq!(tape.value(ai).data(), f.row(1));
    }

    #[test]
    fn degenerate_pool_falls_back_to_mean() {
        let f = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let w = tape.constant(Tensor::column(&[0.0, 0.0]));
        let p = pool_or_mean_on(&mut tape, fv, w, "action").unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
    }

    #[test]
    fn fuse_leaves_frozen_frame_model_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seg = SegmentModel::new(SegmentDims::new(4), &mut rng);
        let frame = CvaeModel::new(CvaeDims::new(4), &mut rng);
        let f = random_tensor(&mut rng, &[12, 4]);
        let eps = random_tensor(&mut rng, &[12, frame.dims.d_z]);
        let mut tape = Tape::new();
        let sb = seg.params.bind(&mut tape, true);
        let fb = frame.params.bind(&mut tape, false);
        let fv = tape.constant(f);
        let lam = seg.attention_on(&mut tape, &sb, fv).unwrap();
        let loss = fuse_on(&mut tape, &frame, &fb, fv, lam, &eps).unwrap();
        assert!(tape.value(loss).item() >= 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(fb.grads(&tape, &g).iter().flatten().all(|&v| v == 0.0));
        let seg_grads = sb.grads(&tape, &g);
        assert!(seg_grads[0].iter().any(|&v| v != 0.0));
    }
}
