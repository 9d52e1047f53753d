//! Attention refinement of memory-gathered features, and the final
//! fuse-and-classify step.
//!
//! Queries come from the image feature, keys/values from the per-pixel
//! memory rows; the resulting `hw×hw` relation map re-mixes the gathered
//! class representations per pixel before they are concatenated with the
//! context-head output for classification.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Conv1x1Vars};
use crate::pipeline::ProbabilityMap;
use crate::rng::stream;
use crate::tensor::Tensor;

/// Query/key/value projections to `C/2` and the output projection back to `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub g_q: Conv1x1, // C→C/2
    pub g_k: Conv1x1, // C→C/2
    pub g_v: Conv1x1, // C→C/2
    pub g_o: Conv1x1, // C/2→C
}

impl ProjectionSet {
    /// `embed_dim` must be even so query/key dot products are defined.
    pub fn init(seed: u64, label: &str, embed_dim: usize) -> Result<ProjectionSet> {
        if embed_dim == 0 || embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "attention embed dim must be even and positive, got {embed_dim}"
            )));
        }
        let half = embed_dim / 2;
        let mut rng = stream(seed, label);
        Ok(ProjectionSet {
            g_q: Conv1x1::init(&mut rng, embed_dim, half),
            g_k: Conv1x1::init(&mut rng, embed_dim, half),
            g_v: Conv1x1::init(&mut rng, embed_dim, half),
            g_o: Conv1x1::init(&mut rng, half, embed_dim),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.g_q.weight.shape()[1]
    }

    pub fn lift<'t>(
        &self,
        tape: &'t Tape,
        trainable: bool,
        leaves: &mut Vec<Var<'t>>,
    ) -> ProjectionVars<'t> {
        ProjectionVars {
            g_q: self.g_q.lift(tape, trainable, leaves),
            g_k: self.g_k.lift(tape, trainable, leaves),
            g_v: self.g_v.lift(tape, trainable, leaves),
            g_o: self.g_o.lift(tape, trainable, leaves),
        }
    }

    pub fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in [
            ("g_q", &self.g_q),
            ("g_k", &self.g_k),
            ("g_v", &self.g_v),
            ("g_o", &self.g_o),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &layer.weight));
            out.push((format!("{prefix}.{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in [
            ("g_q", &mut self.g_q),
            ("g_k", &mut self.g_k),
            ("g_v", &mut self.g_v),
            ("g_o", &mut self.g_o),
        ] {
            out.push((format!("{prefix}.{name}.weight"), &mut layer.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut layer.bias));
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct ProjectionVars<'t> {
    pub g_q: Conv1x1Vars<'t>,
    pub g_k: Conv1x1Vars<'t>,
    pub g_v: Conv1x1Vars<'t>,
    pub g_o: Conv1x1Vars<'t>,
}

/// Row-stochastic `hw×hw` relation map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    o: Tensor,
}

impl AttentionMap {
    pub fn new(o: Tensor) -> Result<AttentionMap> {
        if o.rank() != 2 || o.shape()[0] != o.shape()[1] {
            return Err(Error::shape(format!(
                "attention map must be square, got {:?}",
                o.shape()
            )));
        }
        let n = o.shape()[1];
        for i in 0..o.shape()[0] {
            let row = &o.data()[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Input(format!(
                    "attention map row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(AttentionMap { o })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.o
    }
}

/// Scaled dot-product relations between the image feature and the gathered
/// memory rows: `softmax(g_q(r)·g_k(c'_bi)ᵀ / sqrt(C/2))`.
pub fn relations_vars<'t>(
    proj: &ProjectionVars<'t>,
    r: Var<'t>,
    c_bi_prime: Var<'t>,
) -> Result<Var<'t>> {
    let rs = r.shape();
    let cs = c_bi_prime.shape();
    if rs != cs {
        return Err(Error::shape(format!(
            "relations: feature {rs:?} vs gathered {cs:?}"
        )));
    }
    let q = proj.g_q.forward(r)?.chw_to_pixel_rows()?;
    let k = proj.g_k.forward(c_bi_prime)?.chw_to_pixel_rows()?;
    let half = q.shape()[1] as f64;
    q.matmul_transpose(k)?
        .scale(1.0 / half.sqrt())
        .softmax_rows()
}

/// Refinement: per pixel, mix the value-projected gathered rows by the
/// relation weights, then project back to `C` channels.
pub fn refine_vars<'t>(
    proj: &ProjectionVars<'t>,
    o: Var<'t>,
    c_bi_prime: Var<'t>,
) -> Result<Var<'t>> {
    let shape = c_bi_prime.shape();
    let (h, w) = (shape[1], shape[2]);
    let v = proj.g_v.forward(c_bi_prime)?.chw_to_pixel_rows()?;
    let mixed = o.matmul(v)?;
    proj.g_o.forward(mixed.pixel_rows_to_chw(h, w)?)
}

/// Classifier logits over the concatenated context and refined features,
/// upsampled to the output resolution and softmaxed per pixel.
pub fn classify_vars<'t>(
    classifier: &Conv1x1Vars<'t>,
    c_wi: Var<'t>,
    c_bi: Var<'t>,
    out_h: usize,
    out_w: usize,
) -> Result<Var<'t>> {
    let logits = classifier.forward(c_wi.concat_channels(c_bi)?)?;
    logits.bilinear_resize(out_h, out_w)?.softmax_channels()
}

fn with_proj_vars<R>(
    proj: &ProjectionSet,
    f: impl for<'t> FnOnce(&'t Tape, &ProjectionVars<'t>) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let vars = proj.lift(&tape, false, &mut leaves);
    f(&tape, &vars)
}

/// Plain forward of [`relations_vars`].
pub fn relations(r: &Tensor, c_bi_prime: &Tensor, proj: &ProjectionSet) -> Result<AttentionMap> {
    with_proj_vars(proj, |tape, vars| {
        let o = relations_vars(
            vars,
            tape.constant(r.clone()),
            tape.constant(c_bi_prime.clone()),
        )?;
        AttentionMap::new(o.value())
    })
}

/// Plain forward of [`refine_vars`].
pub fn refine(o: &AttentionMap, c_bi_prime: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    with_proj_vars(proj, |tape, vars| {
        let refined = refine_vars(
            vars,
            tape.constant(o.tensor().clone()),
            tape.constant(c_bi_prime.clone()),
        )?;
        Ok(refined.value())
    })
}

/// Plain forward of [`classify_vars`] wrapped as a probability map.
pub fn fuse_and_classify(
    c_wi: &Tensor,
    c_bi: &Tensor,
    classifier: &Conv1x1,
    out_h: usize,
    out_w: usize,
) -> Result<ProbabilityMap> {
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let cls = classifier.lift(&tape, false, &mut leaves);
    let probs = classify_vars(
        &cls,
        tape.constant(c_wi.clone()),
        tape.constant(c_bi.clone()),
        out_h,
        out_w,
    )?;
    ProbabilityMap::new(probs.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_feat(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn odd_dim_is_config_error() {
        assert!(matches!(
            ProjectionSet::init(0, "attn", 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_pixel_relations_are_trivial() {
        let proj = ProjectionSet::init(1, "attn", 4).unwrap();
        let mut rng = crate::rng::stream(2, "attn-single");
        let r = rand_feat(4, 1, 1, &mut rng);
        let o = relations(&r, &r, &proj).unwrap();
        assert_eq!(o.tensor().shape(), &[1, 1]);
        assert!((o.tensor().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relation_rows_are_distributions() {
        let proj = ProjectionSet::init(3, "attn", 8).unwrap();
        let mut rng = crate::rng::stream(4, "attn-rows");
        let r = rand_feat(8, 3, 4, &mut rng);
        let g = rand_feat(8, 3, 4, &mut rng);
        let o = relations(&r, &g, &proj).unwrap();
        for i in 0..12 {
            let sum: f64 = o.tensor().row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn c2_scaling_divisor_is_one() {
        // C=2 → key dim 1 → divisor sqrt(1): softmax of the raw logits
        let proj = ProjectionSet::init(5, "attn", 2).unwrap();
        let mut rng = crate::rng::stream(6, "attn-c2");
        let r = rand_feat(2, 2, 2, &mut rng);
        let g = rand_feat(2, 2, 2, &mut rng);
        let o = relations(&r, &g, &proj).unwrap();
        let q = proj.g_q.forward(&r).unwrap().chw_to_pixel_rows().unwrap();
        let k = proj.g_k.forward(&g).unwrap().chw_to_pixel_rows().unwrap();
        let want = q.matmul_transpose(&k).unwrap().softmax_rows().unwrap();
        assert!(o.tensor().max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn identity_attention_reduces_to_projection_chain() {
        let proj = ProjectionSet::init(7, "attn", 4).unwrap();
        let mut rng = crate::rng::stream(8, "attn-id");
        let g = rand_feat(4, 2, 2, &mut rng);
        let o = AttentionMap::new(Tensor::eye(4)).unwrap();
        let refined = refine(&o, &g, &proj).unwrap();
        let want = proj.g_o.forward(&proj.g_v.forward(&g).unwrap()).unwrap();
        assert!(refined.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn uniform_attention_makes_all_pixels_equal() {
        let proj = ProjectionSet::init(9, "attn", 4).unwrap();
        let mut rng = crate::rng::stream(10, "attn-uniform");
        let g = rand_feat(4, 2, 3, &mut rng);
        let o = AttentionMap::new(Tensor::full(&[6, 6], 1.0 / 6.0)).unwrap();
        let refined = refine(&o, &g, &proj).unwrap();
        for c in 0..4 {
            let plane = &refined.data()[c * 6..(c + 1) * 6];
            for &v in plane {
                assert!((v - plane[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refine_matches_loop_oracle() {
        let proj = ProjectionSet::init(11, "attn", 6).unwrap();
        let mut rng = crate::rng::stream(12, "attn-oracle");
        let r = rand_feat(6, 3, 3, &mut rng);
        let g = rand_feat(6, 3, 3, &mut rng);
        let o = relations(&r, &g, &proj).unwrap();
        let refined = refine(&o, &g, &proj).unwrap();

        // oracle: explicit Σⱼ O[i,j]·g_v(g)[j,*] then g_o
        let v = proj.g_v.forward(&g).unwrap().chw_to_pixel_rows().unwrap();
        let hw = 9;
        let mut mixed = Tensor::zeros(&[hw, 3]);
        for i in 0..hw {
            for j in 0..hw {
                let wij = o.tensor().at2(i, j);
                for ch in 0..3 {
                    let cur = mixed.at2(i, ch);
                    mixed.set2(i, ch, cur + wij * v.at2(j, ch));
                }
            }
        }
        let want = proj
            .g_o
            .forward(&mixed.pixel_rows_to_chw(3, 3).unwrap())
            .unwrap();
        assert!(refined.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        // permuting pixels of both inputs permutes the refined output
        let proj = ProjectionSet::init(13, "attn", 4).unwrap();
        let mut rng = crate::rng::stream(14, "attn-perm");
        let r = rand_feat(4, 1, 4, &mut rng);
        let g = rand_feat(4, 1, 4, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let mut out = Tensor::zeros(&[4, 1, 4]);
            for c in 0..4 {
                for (dst, &src) in perm.iter().enumerate() {
                    out.set3(c, 0, dst, t.at3(c, 0, src));
                }
            }
            out
        };
        let o = relations(&r, &g, &proj).unwrap();
        let refined = refine(&o, &g, &proj).unwrap();
        let op = relations(&permute(&r), &permute(&g), &proj).unwrap();
        let refined_p = refine(&op, &permute(&g), &proj).unwrap();
        assert!(permute(&refined).max_abs_diff(&refined_p).unwrap() <= 1e-9);
    }

    #[test]
    fn classify_probabilities_are_normalized_and_shift_invariant() {
        let mut rng = crate::rng::stream(15, "cls");
        let c_wi = rand_feat(4, 2, 2, &mut rng);
        let c_bi = rand_feat(4, 2, 2, &mut rng);
        let mut cls_rng = crate::rng::stream(16, "cls-init");
        let cls = Conv1x1::init(&mut cls_rng, 8, 3);
        let probs = fuse_and_classify(&c_wi, &c_bi, &cls, 8, 8).unwrap();
        probs.validate().unwrap();

        // zero weights → uniform 1/K
        let zero = Conv1x1 {
            weight: Tensor::zeros(&[3, 8]),
            bias: Tensor::zeros(&[3]),
        };
        let uniform = fuse_and_classify(&c_wi, &c_bi, &zero, 4, 4).unwrap();
        assert!(uniform
            .tensor()
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));

        // adding a constant to every class logit leaves the argmax unchanged
        let mut shifted = cls.clone();
        for v in shifted.bias.data_mut() {
            *v += 3.21;
        }
        let probs2 = fuse_and_classify(&c_wi, &c_bi, &shifted, 8, 8).unwrap();
        assert_eq!(
            crate::pipeline::argmax_mask(&probs).labels(),
            crate::pipeline::argmax_mask(&probs2).labels()
        );
    }
}
