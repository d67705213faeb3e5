//! Central-finite-difference oracle for analytic gradients.

use crate::error::Result;

use super::tape::{NodeId, Tape};
use super::ParamSet;

/// Per-parameter-block relative errors between analytic and numeric
/// gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `(param name, max relative error over the block)`.
    pub blocks: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Relative error with an absolute floor so near-zero gradients do not
/// blow the ratio up on finite-difference noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares the analytic gradient of `build`'s scalar output against
/// central finite differences with step `eps`, parameter by parameter.
///
/// `build` must construct the same graph for any parameter values; it
/// is re-run twice per scalar parameter with that entry displaced by
/// +/- eps. Only parameters the graph actually registers are checked,
/// so a zero-parameter graph yields an empty report.
pub fn check_gradients<F>(build: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport::default();
    for (name, grad) in analytic.iter() {
        let mut block_err = 0.0f64;
        for i in 0..grad.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).expect("param registered but missing").data_mut()[i] += eps;
            let fp = eval(&plus)?;

            let mut minus = params.clone();
            minus.get_mut(name).expect("param registered but missing").data_mut()[i] -= eps;
            let fm = eval(&minus)?;

            let numeric = (fp - fm) / (2.0 * eps);
            block_err = block_err.max(rel_err(grad.data()[i], numeric));
        }
        report.blocks.push((name.clone(), block_err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::IouCell;
    use crate::tensor::Tensor;
    use crate::geometry::BBox;
    use rand::Rng;

    #[test]
    fn quadratic_graph_is_tight() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]));
        let report = check_gradients(
            |tape, p| {
                let ids = tape.param_set(p)?;
                let x = ids["x"];
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "report {:?}", report.blocks);
    }

    #[test]
    fn zero_parameter_graph_yields_empty_report() {
        let params = ParamSet::new();
        let report = check_gradients(
            |tape, _| {
                let x = tape.input(Tensor::scalar(2.0))?;
                tape.mul(x, x)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.is_empty());
    }

    /// Randomized finite-difference sweep over every primitive, 100
    /// trials each mixing shapes and values.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = crate::rng::stream(99, "gradcheck", 0);
        for trial in 0..100 {
            let h = rng.gen_range(2usize..4);
            let w = rng.gen_range(2usize..4);
            let cin = rng.gen_range(1usize..3);
            let cout = rng.gen_range(1usize..3);
            let kind = trial % 8;

            let mut params = ParamSet::new();
            let randv = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
            };
            match kind {
                0 | 1 => {
                    // conv2d stride 1 / stride 2, 3x3, pad 1.
                    params.insert("x", Tensor::from_vec(&[h, w, cin], randv(&mut rng, h * w * cin)));
                    params.insert("w", Tensor::from_vec(&[3, 3, cin, cout], randv(&mut rng, 9 * cin * cout)));
                    params.insert("b", Tensor::from_vec(&[cout], randv(&mut rng, cout)));
                }
                2 => {
                    // affine
                    params.insert("x", Tensor::from_vec(&[4], randv(&mut rng, 4)));
                    params.insert("w", Tensor::from_vec(&[3, 4], randv(&mut rng, 12)));
                    params.insert("b", Tensor::from_vec(&[3], randv(&mut rng, 3)));
                }
                7 => {
                    // iou loss consumes a raw [h,w,5] regression map.
                    params.insert("x", Tensor::from_vec(&[h, w, 5], randv(&mut rng, h * w * 5)));
                }
                _ => {
                    params.insert("x", Tensor::from_vec(&[h, w, cin], randv(&mut rng, h * w * cin)));
                }
            }

            // Loss targets/weights for the fused reductions.
            let n = h * w * cin;
            let targets = Tensor::from_vec(
                &[h, w, cin],
                (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            );
            let weights = Tensor::filled(&[h, w, cin], 1.0 / n as f64);
            let cell = IouCell {
                cy: rng.gen_range(0..h),
                cx: rng.gen_range(0..w),
                target: BBox::new(2.0, 3.0, 14.0, 11.0),
            };

            let report = check_gradients(
                |tape, p| {
                    let ids = tape.param_set(p)?;
                    let x = ids["x"];
                    match kind {
                        0 => {
                            let c = tape.conv2d(x, ids["w"], ids["b"], 1, 1)?;
                            tape.sum(c)
                        }
                        1 => {
                            let c = tape.conv2d(x, ids["w"], ids["b"], 2, 1)?;
                            let s = tape.sigmoid(c)?;
                            tape.sum(s)
                        }
                        2 => {
                            let a = tape.affine(x, ids["w"], ids["b"])?;
                            let s = tape.sigmoid(a)?;
                            tape.sum(s)
                        }
                        3 => {
                            let l = tape.leaky_relu(x, 0.1)?;
                            let g = tape.global_avg_pool(l)?;
                            tape.sum(g)
                        }
                        4 => {
                            let m = tape.max_channel(x)?;
                            tape.sum(m)
                        }
                        5 => {
                            let s = tape.sigmoid(x)?;
                            tape.bce_loss(s, targets.clone(), weights.clone())
                        }
                        6 => {
                            let s = tape.sigmoid(x)?;
                            tape.focal_loss(s, targets.clone(), weights.clone(), 0.25, 1.5)
                        }
                        _ => tape.iou_loss(x, vec![cell.clone()], 8, 96.0, 96.0),
                    }
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err() <= 1e-4,
                "trial {trial} kind {kind}: {:?}",
                report.blocks
            );
        }
    }

    /// backward(a + b) must equal backward(a) + backward(b). With the
    /// two losses sharing only parameter leaves, the sums involved are
    /// identical and the equality is exact.
    #[test]
    fn backward_linearity_is_exact_at_leaves() {
        let mut rng = crate::rng::stream(17, "linearity", 0);
        for _ in 0..50 {
            let mut params = ParamSet::new();
            params.insert(
                "p",
                Tensor::from_vec(&[6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            );

            let build_a = |tape: &mut Tape, p: NodeId| -> Result<NodeId> {
                let s = tape.sigmoid(p)?;
                tape.sum(s)
            };
            let build_b = |tape: &mut Tape, p: NodeId| -> Result<NodeId> {
                let m = tape.mul(p, p)?;
                let l = tape.leaky_relu(m, 0.1)?;
                tape.sum(l)
            };

            // Combined graph.
            let mut tape = Tape::new();
            let p = tape.param("p", params.get("p").unwrap().clone()).unwrap();
            let la = build_a(&mut tape, p).unwrap();
            let lb = build_b(&mut tape, p).unwrap();
            let total = tape.add(la, lb).unwrap();
            let g_sum = tape.backward(total).unwrap();

            // Separate graphs.
            let mut ta = Tape::new();
            let pa = ta.param("p", params.get("p").unwrap().clone()).unwrap();
            let la = build_a(&mut ta, pa).unwrap();
            let ga = ta.backward(la).unwrap();

            let mut tb = Tape::new();
            let pb = tb.param("p", params.get("p").unwrap().clone()).unwrap();
            let lb = build_b(&mut tb, pb).unwrap();
            let gb = tb.backward(lb).unwrap();

            for i in 0..6 {
                let lhs = g_sum.get("p").unwrap().data()[i];
                let rhs = ga.get("p").unwrap().data()[i] + gb.get("p").unwrap().data()[i];
                assert_eq!(lhs.to_bits(), rhs.to_bits(), "entry {i}");
            }
        }
    }
}
