//! Contextual interpersonal reasoning over the adapter's visual states.
//!
//! Person features are pooled from the `[L^v, d]` patch-token grid by an
//! ROI operator, mixed across persons by self-attention (set semantics,
//! no positions), refined per pair by a decoder that cross-attends onto
//! the full grid, and finally blended with the frozen global token
//! through an elementwise sigmoid gate.
//!
//! Grid layout: token row `r * gw + c` is the patch at grid row `r`,
//! column `c`; normalized box coordinates map x to columns and y to rows.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::PersonBox;
use crate::error::{Error, Result};
use crate::nn::{DecoderBlock, Init, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Per-sample-point weights of the clamp-extended linear interpolant on a
/// length-`g` cell row (cell centers at `k + 0.5`).
fn point_weights_1d(t: f64, g: usize) -> [(usize, f64); 2] {
    if g == 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    let u = (t - 0.5).clamp(0.0, (g - 1) as f64);
    let j0 = (u.floor() as usize).min(g - 2);
    let frac = u - j0 as f64;
    [(j0, 1.0 - frac), (j0 + 1, frac)]
}

/// Exact integral over `[a, b]` of each cell's interpolation basis.
///
/// The interpolant is piecewise linear with breakpoints at the cell
/// centers, so integrating piecewise with a midpoint evaluation is exact.
fn integral_weights_1d(a: f64, b: f64, g: usize) -> Vec<f64> {
    let mut cuts = vec![a, b];
    for k in 0..g {
        let c = k as f64 + 0.5;
        if c > a && c < b {
            cuts.push(c);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut weights = vec![0.0; g];
    for win in cuts.windows(2) {
        let (p, q) = (win[0], win[1]);
        let len = q - p;
        if len <= 0.0 {
            continue;
        }
        for (idx, w) in point_weights_1d((p + q) / 2.0, g) {
            weights[idx] += w * len;
        }
    }
    weights
}

/// Pooling weights of the ROI operator: a `[gh, gw]` stencil summing to 1.
///
/// The box is split into a 3x3 sub-grid of equal bins; each bin takes the
/// exact average of the bilinear surface over its area, and the bins are
/// mean-pooled. Equal-area bins make this the exact average over the
/// whole box, so a whole-image box reproduces the grid mean identically.
/// Boxes smaller than one grid cell fall back to a single bilinear
/// sample at the box center.
pub fn roi_weights(bbox: &PersonBox, gh: usize, gw: usize) -> Result<Array2<f64>> {
    if gh == 0 || gw == 0 {
        return Err(Error::Precondition("empty grid".into()));
    }
    PersonBox::new(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;

    let (x0, x1) = (bbox.x0 * gw as f64, bbox.x1 * gw as f64);
    let (y0, y1) = (bbox.y0 * gh as f64, bbox.y1 * gh as f64);
    let mut weights = Array2::zeros((gh, gw));

    let area_cells = (x1 - x0) * (y1 - y0);
    if area_cells < 1.0 {
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        for (r, wy) in point_weights_1d(cy, gh) {
            for (c, wx) in point_weights_1d(cx, gw) {
                weights[(r, c)] += wy * wx;
            }
        }
        return Ok(weights);
    }

    let bins = 3usize;
    let (bw, bh) = ((x1 - x0) / bins as f64, (y1 - y0) / bins as f64);
    for p in 0..bins {
        let ya = y0 + p as f64 * bh;
        let wy = integral_weights_1d(ya, ya + bh, gh);
        for q in 0..bins {
            let xa = x0 + q as f64 * bw;
            let wx = integral_weights_1d(xa, xa + bw, gw);
            for (r, &vy) in wy.iter().enumerate() {
                if vy == 0.0 {
                    continue;
                }
                for (c, &vx) in wx.iter().enumerate() {
                    weights[(r, c)] += vy * vx / (bw * bh);
                }
            }
        }
    }
    weights /= (bins * bins) as f64;
    Ok(weights)
}

/// Cross-attention maps retained by one pair forward: per decoder layer,
/// per head, a `[2, L^v]` row-stochastic matrix.
#[derive(Debug, Clone, Default)]
pub struct AttnTrace<F: Scalar> {
    pub layers: Vec<Vec<Array2<F>>>,
}

/// Attention-map export written next to evaluation outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionExport {
    pub image_id: String,
    pub pair: (usize, usize),
    pub grid: (usize, usize),
    /// `layers[l][h]` is the `[2, L^v]` map of head `h` in decoder layer `l`.
    pub layers: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionExport {
    pub fn from_trace<F: Scalar>(
        image_id: &str,
        pair: (usize, usize),
        grid: (usize, usize),
        trace: &AttnTrace<F>,
    ) -> Result<Self> {
        if trace.layers.is_empty() {
            return Err(Error::Precondition(
                "no retained attention maps; run a forward pass with retention enabled".into(),
            ));
        }
        let layers = trace
            .layers
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|m| {
                        m.rows()
                            .into_iter()
                            .map(|row| row.iter().map(|x| x.to_f64c()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(AttentionExport {
            image_id: image_id.to_string(),
            pair,
            grid,
            layers,
        })
    }
}

/// The reasoning stage: interpersonal blocks, pair decoder, projections,
/// and the global-context gate.
pub struct CirNet {
    pub dim: usize,
    pub heads: usize,
    pub n_inter: usize,
    pub n_ctx: usize,
    grid: (usize, usize),
    inter_blocks: Vec<TransformerBlock>,
    ctx_blocks: Vec<DecoderBlock>,
    pair_proj: Linear,
    cls_proj: Linear,
    gate_w_pair: ParamId,
    gate_w_clip: ParamId,
    gate_bias: ParamId,
}

impl CirNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        dim: usize,
        joint_dim: usize,
        grid: (usize, usize),
        n_inter: usize,
        n_ctx: usize,
        heads: usize,
    ) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "reasoning dim {dim} must be a positive multiple of {heads} heads"
            )));
        }
        let inter_blocks = (0..n_inter)
            .map(|l| TransformerBlock::new(store, init, &format!("cir.inter.{l}"), dim, heads))
            .collect();
        let ctx_blocks = (0..n_ctx)
            .map(|l| DecoderBlock::new(store, init, &format!("cir.ctx.{l}"), dim, heads))
            .collect();
        let pair_proj = Linear::new(store, init, "cir.pair_proj", 2 * dim, dim);
        let cls_proj = Linear::new(store, init, "cir.cls_proj", joint_dim, dim);
        let std = (1.0 / dim as f64).sqrt();
        let gate_w_pair = store.add("cir.gate.w_pair", init.normal_matrix(dim, dim, std));
        let gate_w_clip = store.add("cir.gate.w_clip", init.normal_matrix(dim, dim, std));
        let gate_bias = store.add("cir.gate.bias", Array2::zeros((1, dim)));
        Ok(CirNet {
            dim,
            heads,
            n_inter,
            n_ctx,
            grid,
            inter_blocks,
            ctx_blocks,
            pair_proj,
            cls_proj,
            gate_w_pair,
            gate_w_clip,
            gate_bias,
        })
    }

    /// Pools one person's feature from the token grid: a fixed linear
    /// stencil, so gradients flow to the grid only.
    pub fn extract_person<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        v_sn: Var,
        bbox: &PersonBox,
    ) -> Result<Var> {
        let (gh, gw) = self.grid;
        let weights = roi_weights(bbox, gh, gw)?;
        let flat: Vec<F> = weights.iter().map(|&w| F::from_f64c(w)).collect();
        let stencil = Array2::from_shape_vec((1, gh * gw), flat).expect("stencil shape");
        Ok(tape.fixed_linear(stencil, v_sn))
    }

    /// Self-attention over the person set; `n_inter == 0` is the identity.
    pub fn interpersonal<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        persons: Var,
    ) -> Var {
        let mut state = persons;
        for block in &self.inter_blocks {
            state = block.forward(tape, store, state);
        }
        state
    }

    /// Pair decoding: the ordered pair forms a 2-token query sequence,
    /// cross-attends onto the grid, and is concatenated and projected
    /// back to `[1, d]`. Retains attention maps when given a trace.
    pub fn contextual_decode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        person_i: Var,
        person_j: Var,
        v_sn: Var,
        mut trace: Option<&mut AttnTrace<F>>,
    ) -> Var {
        let mut queries = tape.concat_rows(&[person_i, person_j]);
        for block in &self.ctx_blocks {
            let mut head_maps = trace.as_ref().map(|_| Vec::with_capacity(self.heads));
            queries = block.forward(tape, store, queries, v_sn, head_maps.as_mut());
            if let (Some(t), Some(maps)) = (trace.as_deref_mut(), head_maps) {
                t.layers.push(maps);
            }
        }
        let first = tape.row(queries, 0);
        let second = tape.row(queries, 1);
        let joined = tape.concat_cols(&[first, second]);
        self.pair_proj.forward(tape, store, joined)
    }

    /// Elementwise-gated blend of the pair feature with the projected
    /// frozen global token.
    pub fn global_fuse<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        pair: Var,
        cls: &Array1<F>,
    ) -> Var {
        let cls_row =
            tape.leaf(Array2::from_shape_vec((1, cls.len()), cls.to_vec()).expect("cls row"));
        let global = self.cls_proj.forward(tape, store, cls_row);
        let w_pair = store.bind(tape, self.gate_w_pair);
        let w_clip = store.bind(tape, self.gate_w_clip);
        let bias = store.bind(tape, self.gate_bias);
        let from_pair = tape.matmul(pair, w_pair);
        let from_clip = tape.matmul(global, w_clip);
        let summed = tape.add(from_pair, from_clip);
        let logits = tape.add_rowvec(summed, bias);
        let z = tape.sigmoid(logits);
        let keep = tape.mul(z, pair);
        let z_inv = tape.one_minus(z);
        let mix = tape.mul(z_inv, global);
        tape.add(keep, mix)
    }

    /// Full pair feature: ROI pooling of every person, interpersonal
    /// mixing, pair decoding, global fusion.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_feature<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        v_sn: Var,
        boxes: &[PersonBox],
        i: usize,
        j: usize,
        cls: &Array1<F>,
        trace: Option<&mut AttnTrace<F>>,
    ) -> Result<Var> {
        if i == j {
            return Err(Error::Precondition(format!(
                "pair indices must differ, got ({i}, {j})"
            )));
        }
        if i >= boxes.len() || j >= boxes.len() {
            return Err(Error::Precondition(format!(
                "pair ({i}, {j}) out of range for {} persons",
                boxes.len()
            )));
        }
        let persons: Vec<Var> = boxes
            .iter()
            .map(|b| self.extract_person(tape, v_sn, b))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&persons);
        let mixed = self.interpersonal(tape, store, stacked);
        let pi = tape.row(mixed, i);
        let pj = tape.row(mixed, j);
        let pair = self.contextual_decode(tape, store, pi, pj, v_sn, trace);
        Ok(self.global_fuse(tape, store, pair, cls))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> PersonBox {
        PersonBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Value of the clamp-extended bilinear surface at a point, written
    /// independently of the weight-stencil code path.
    fn interp_at(field: &Array2<f64>, x: f64, y: f64) -> f64 {
        let (gh, gw) = field.dim();
        let mut value = 0.0;
        for (r, wy) in point_weights_1d(y, gh) {
            for (c, wx) in point_weights_1d(x, gw) {
                value += wy * wx * field[(r, c)];
            }
        }
        value
    }

    /// Brute-force oracle: enumerate every breakpoint-bounded rectangle
    /// inside the box and integrate the bilinear surface piece by piece
    /// (a midpoint evaluation per piece is exact for bilinear patches).
    fn oracle_box_average(field: &Array2<f64>, bbox: &PersonBox) -> f64 {
        let (gh, gw) = field.dim();
        let (x0, x1) = (bbox.x0 * gw as f64, bbox.x1 * gw as f64);
        let (y0, y1) = (bbox.y0 * gh as f64, bbox.y1 * gh as f64);
        let cuts = |a: f64, b: f64, g: usize| {
            let mut v = vec![a, b];
            for k in 0..g {
                let c = k as f64 + 0.5;
                if c > a && c < b {
                    v.push(c);
                }
            }
            v.sort_by(f64::total_cmp);
            v
        };
        let xs = cuts(x0, x1, gw);
        let ys = cuts(y0, y1, gh);
        let mut total = 0.0;
        for wy in ys.windows(2) {
            for wx in xs.windows(2) {
                let area = (wx[1] - wx[0]) * (wy[1] - wy[0]);
                if area > 0.0 {
                    total += interp_at(field, (wx[0] + wx[1]) / 2.0, (wy[0] + wy[1]) / 2.0) * area;
                }
            }
        }
        total / ((x1 - x0) * (y1 - y0))
    }

    fn apply_stencil(field: &Array2<f64>, w: &Array2<f64>) -> f64 {
        field.iter().zip(w.iter()).map(|(f, w)| f * w).sum()
    }

    #[test]
    fn whole_image_box_equals_grid_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = Array2::from_shape_fn((14, 14), |_| rng.gen_range(-2.0..2.0));
        let w = roi_weights(&boxed(0.0, 0.0, 1.0, 1.0), 14, 14).unwrap();
        let pooled = apply_stencil(&field, &w);
        let mean = field.sum() / field.len() as f64;
        assert!((pooled - mean).abs() < 1e-12, "{pooled} vs {mean}");
    }

    #[test]
    fn single_cell_box_on_constant_field() {
        let field = Array2::from_elem((4, 4), 3.25);
        // Exactly the cell (1,2): x in [2/4, 3/4], y in [1/4, 2/4].
        let w = roi_weights(&boxed(0.5, 0.25, 0.75, 0.5), 4, 4).unwrap();
        assert!((apply_stencil(&field, &w) - 3.25).abs() < 1e-12);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_box_on_linear_ramp_hits_centroid_value() {
        // Interior box on an 8x8 ramp: the average of a linear field over
        // a box is its value at the box centroid.
        let (gh, gw) = (8, 8);
        let (a, b, k) = (0.7, -0.3, 0.1);
        let field = Array2::from_shape_fn((gh, gw), |(r, c)| {
            a * (c as f64 + 0.5) + b * (r as f64 + 0.5) + k
        });
        let bbox = boxed(0.25, 0.25, 0.75, 0.75);
        let w = roi_weights(&bbox, gh, gw).unwrap();
        let expected = a * 4.0 + b * 4.0 + k; // centroid at grid coords (4, 4)
        assert!((apply_stencil(&field, &w) - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..60 {
            let gh = rng.gen_range(2..10);
            let gw = rng.gen_range(2..10);
            let field = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(-1.0..1.0));
            let x0 = rng.gen_range(0.0..0.7);
            let y0 = rng.gen_range(0.0..0.7);
            let bbox = boxed(
                x0,
                y0,
                rng.gen_range(x0 + 0.05..1.0),
                rng.gen_range(y0 + 0.05..1.0),
            );
            let w = roi_weights(&bbox, gh, gw).unwrap();
            let ours = apply_stencil(&field, &w);
            let area = (bbox.x1 - bbox.x0) * gw as f64 * (bbox.y1 - bbox.y0) * gh as f64;
            let expected = if area < 1.0 {
                interp_at(
                    &field,
                    (bbox.x0 + bbox.x1) / 2.0 * gw as f64,
                    (bbox.y0 + bbox.y1) / 2.0 * gh as f64,
                )
            } else {
                oracle_box_average(&field, &bbox)
            };
            assert!(
                (ours - expected).abs() < 1e-9,
                "case {case}: {ours} vs {expected}"
            );
        }
    }

    #[test]
    fn degenerate_box_falls_back_to_center_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
        // Far smaller than one cell.
        let bbox = boxed(0.31, 0.42, 0.33, 0.44);
        let w = roi_weights(&bbox, 6, 6).unwrap();
        let expected = interp_at(&field, 0.32 * 6.0, 0.43 * 6.0);
        assert!((apply_stencil(&field, &w) - expected).abs() < 1e-12);
    }

    fn build_cir(n_inter: usize, n_ctx: usize) -> (ParamStore<f64>, CirNet) {
        let mut store = ParamStore::new();
        let mut init = Init::from_seed(21);
        let net = CirNet::new(&mut store, &mut init, 16, 8, (4, 4), n_inter, n_ctx, 8).unwrap();
        (store, net)
    }

    fn random_grid(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((l, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn interpersonal_permutation_equivariance() {
        let (store, net) = build_cir(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let persons = random_grid(&mut rng, 5, 16);
        let perm = [3usize, 0, 4, 1, 2];

        let mut tape = Tape::new();
        let p = tape.leaf(persons.clone());
        let out = net.interpersonal(&mut tape, &store, p);
        let base = tape.value(out).clone();

        let mut permuted = persons.clone();
        for (to, &from) in perm.iter().enumerate() {
            permuted.row_mut(to).assign(&persons.row(from));
        }
        let mut tape = Tape::new();
        let p = tape.leaf(permuted);
        let out = net.interpersonal(&mut tape, &store, p);
        let out_perm = tape.value(out).clone();

        for (to, &from) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!(
                    (out_perm[(to, c)] - base[(from, c)]).abs() < 1e-6,
                    "row {to} col {c}"
                );
            }
        }
    }

    #[test]
    fn zero_interpersonal_layers_is_identity() {
        let (store, net) = build_cir(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let persons = random_grid(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let p = tape.leaf(persons.clone());
        let out = net.interpersonal(&mut tape, &store, p);
        assert_eq!(tape.value(out), &persons);
    }

    #[test]
    fn single_person_attention_is_deterministic() {
        let (store, net) = build_cir(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let persons = random_grid(&mut rng, 1, 16);
        let run = || {
            let mut tape = Tape::new();
            let p = tape.leaf(persons.clone());
            let out = net.interpersonal(&mut tape, &store, p);
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_decoder_layers_reduce_to_pair_projection() {
        let (store, net) = build_cir(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pi_val = random_grid(&mut rng, 1, 16);
        let pj_val = random_grid(&mut rng, 1, 16);
        let grid = random_grid(&mut rng, 16, 16);

        let mut tape = Tape::new();
        let pi = tape.leaf(pi_val.clone());
        let pj = tape.leaf(pj_val.clone());
        let mem = tape.leaf(grid);
        let out = net.contextual_decode(&mut tape, &store, pi, pj, mem, None);
        let got = tape.value(out).clone();

        // Independent route: concat then the pair projection by hand.
        let mut tape = Tape::new();
        let cat = ndarray::concatenate(ndarray::Axis(1), &[pi_val.view(), pj_val.view()]).unwrap();
        let c = tape.leaf(cat);
        let proj = net.pair_proj.forward(&mut tape, &store, c);
        assert_eq!(tape.value(proj), &got);
    }

    #[test]
    fn pair_order_matters() {
        let (store, net) = build_cir(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = random_grid(&mut rng, 16, 16);
        let cls = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let boxes = [boxed(0.0, 0.0, 0.45, 0.9), boxed(0.5, 0.1, 0.95, 0.95)];
        let run = |i: usize, j: usize| {
            let mut tape = Tape::new();
            let v = tape.leaf(grid.clone());
            let u = net
                .pair_feature(&mut tape, &store, v, &boxes, i, j, &cls, None)
                .unwrap();
            tape.value(u).clone()
        };
        assert_ne!(run(0, 1), run(1, 0));
    }

    #[test]
    fn constant_value_field_ignores_attention_weights() {
        // With every grid token equal, attention weights cannot matter:
        // any convex combination returns the same token.
        let mut store = ParamStore::new();
        let mut init = Init::from_seed(31);
        let mha = crate::nn::MultiHeadAttention::new(&mut store, &mut init, "x", 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let constant_row = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let mem = Array2::from_shape_fn((9, 16), |(_, c)| constant_row[c]);
        let q1 = random_grid(&mut rng, 2, 16);
        let q2 = random_grid(&mut rng, 2, 16);

        let run = |q: &Array2<f64>| {
            let mut tape = Tape::new();
            let qv = tape.leaf(q.clone());
            let mv = tape.leaf(mem.clone());
            let out = mha.forward(&mut tape, &store, qv, mv, None);
            tape.value(out).clone()
        };
        let a = run(&q1);
        let b = run(&q2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn global_fuse_limits() {
        let (mut store, net) = build_cir(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = random_grid(&mut rng, 1, 16);
        let cls = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));

        // Zero gate weights and bias: z = 0.5 elementwise, U = (pair + g) / 2.
        store.value_mut(net.gate_w_pair).fill(0.0);
        store.value_mut(net.gate_w_clip).fill(0.0);
        store.value_mut(net.gate_bias).fill(0.0);
        let mut tape = Tape::new();
        let p = tape.leaf(pair.clone());
        let fused = net.global_fuse(&mut tape, &store, p, &cls);
        let cls_row = Array2::from_shape_vec((1, 8), cls.to_vec()).unwrap();
        let mut t2 = Tape::new();
        let c = t2.leaf(cls_row);
        let g = net.cls_proj.forward(&mut t2, &store, c);
        let g_val = t2.value(g).clone();
        let expected = (&pair + &g_val) * 0.5;
        for (a, b) in tape.value(fused).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Large positive bias saturates toward the pair feature.
        store.value_mut(net.gate_bias).fill(200.0);
        let mut tape = Tape::new();
        let p = tape.leaf(pair.clone());
        let fused = net.global_fuse(&mut tape, &store, p, &cls);
        for (a, b) in tape.value(fused).iter().zip(pair.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn global_fuse_of_equal_vectors_is_identity() {
        let (mut store, net) = build_cir(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Make the projected global token equal the pair feature by
        // planting: cls_proj(cls) == pair when cls_proj is identity-ish.
        // Simpler: compute g = cls_proj(cls), then pass pair = g.
        let cls = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let cls_row = Array2::from_shape_vec((1, 8), cls.to_vec()).unwrap();
        let mut t = Tape::new();
        let c = t.leaf(cls_row);
        let g = net.cls_proj.forward(&mut t, &store, c);
        let g_val = t.value(g).clone();

        // Randomize the gate so z is nontrivial.
        let mut init = Init::from_seed(99);
        *store.value_mut(net.gate_bias) = init.normal_matrix(1, 16, 1.0);

        let mut tape = Tape::new();
        let p = tape.leaf(g_val.clone());
        let fused = net.global_fuse(&mut tape, &store, p, &cls);
        for (a, b) in tape.value(fused).iter().zip(g_val.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transitivity_dependence_on_third_person() {
        // Perturb a third person's feature row and watch U(0, 1): with
        // interpersonal mixing the pair depends on it; without, the pair
        // is built from rows 0 and 1 alone and the output is bitwise
        // unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = random_grid(&mut rng, 16, 16);
        let cls = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let persons = random_grid(&mut rng, 3, 16);
        let mut perturbed = persons.clone();
        perturbed[(2, 0)] += 0.5;

        let run = |n_inter: usize, people: &Array2<f64>| {
            let (store, net) = build_cir(n_inter, 1);
            let mut tape = Tape::new();
            let v = tape.leaf(grid.clone());
            let p = tape.leaf(people.clone());
            let mixed = net.interpersonal(&mut tape, &store, p);
            let pi = tape.row(mixed, 0);
            let pj = tape.row(mixed, 1);
            let pair = net.contextual_decode(&mut tape, &store, pi, pj, v, None);
            let u = net.global_fuse(&mut tape, &store, pair, &cls);
            tape.value(u).clone()
        };

        let with_inter_base = run(1, &persons);
        let with_inter_pert = run(1, &perturbed);
        assert_ne!(
            with_inter_base, with_inter_pert,
            "third person must influence the pair"
        );

        let no_inter_base = run(0, &persons);
        let no_inter_pert = run(0, &perturbed);
        assert_eq!(
            no_inter_base, no_inter_pert,
            "no interpersonal mixing, no influence"
        );
    }

    #[test]
    fn attention_export_shape_and_normalization() {
        let (store, net) = build_cir(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let grid = random_grid(&mut rng, 16, 16);
        let cls = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let boxes = [boxed(0.0, 0.0, 0.4, 0.9), boxed(0.5, 0.0, 0.9, 0.9)];

        let mut trace = AttnTrace::default();
        let mut tape = Tape::new();
        let v = tape.leaf(grid);
        let _ = net
            .pair_feature(&mut tape, &store, v, &boxes, 0, 1, &cls, Some(&mut trace))
            .unwrap();
        assert_eq!(trace.layers.len(), 1);
        assert_eq!(trace.layers[0].len(), 8);

        let export = AttentionExport::from_trace("img0", (0, 1), (4, 4), &trace).unwrap();
        assert_eq!(export.layers.len(), 1);
        for head in &export.layers[0] {
            assert_eq!(head.len(), 2);
            for row in head {
                assert_eq!(row.len(), 16);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }

        let empty: AttnTrace<f64> = AttnTrace::default();
        assert!(AttentionExport::from_trace("img0", (0, 1), (4, 4), &empty).is_err());
    }

    #[test]
    fn pair_feature_rejects_bad_indices() {
        let (store, net) = build_cir(0, 0);
        let grid = Array2::zeros((16, 16));
        let cls = Array1::zeros(8);
        let boxes = [boxed(0.0, 0.0, 0.5, 0.5), boxed(0.5, 0.5, 1.0, 1.0)];
        let mut tape = Tape::new();
        let v = tape.leaf(grid.clone());
        assert!(net
            .pair_feature(&mut tape, &store, v, &boxes, 0, 0, &cls, None)
            .is_err());
        let mut tape = Tape::new();
        let v = tape.leaf(grid);
        assert!(net
            .pair_feature(&mut tape, &store, v, &boxes, 0, 5, &cls, None)
            .is_err());
    }
}
