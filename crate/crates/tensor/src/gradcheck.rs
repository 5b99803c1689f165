//! Central finite-difference gradient checking (f64 only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors: gradients smaller than this are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error observed.
    pub max_rel_err: f64,
    /// (parameter index, element index) where it occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, perturbing every element of every
/// tensor in `params`.
pub fn check<F>(params: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).map(|t| t.data().to_vec());
        for ei in 0..p.len() {
            let mut data = p.data().to_vec();
            data[ei] = p.data()[ei] + h;
            work[pi] = Tensor::new(p.shape().to_vec(), data.clone())?;
            let up = eval(&work)?;
            data[ei] = p.data()[ei] - h;
            work[pi] = Tensor::new(p.shape().to_vec(), data)?;
            let down = eval(&work)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[ei]);
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
        work[pi] = p.clone();
    }
    Ok(report)
}

/// Deterministic values in [-1, 1) (SplitMix64), so the suite needs no RNG
/// dependency.
fn values(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), values(seed, n)).expect("suite shape")
}

/// Positive inputs in [0.5, 1.5).
fn positive(seed: u64, shape: &[usize]) -> Tensor<f64> {
    input(seed, shape).map(|v| v * 0.5 + 1.0)
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, turning any output into a
/// scalar whose gradient exercises every element.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = input(seed ^ 0xabcd, g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Finite-difference check of every differentiable graph operation on
/// small fixed inputs. Returns one report per operation.
pub fn op_suite(h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use std::sync::Arc;

    use crate::attention::SparseMask;
    use crate::rotary::RotaryTable;
    use crate::graph::BLOCKED;

    let bias_data: Vec<f64> = (0..12)
        .map(|i| if i % 4 == 3 && i != 3 { BLOCKED } else { 0.0 })
        .collect();
    let bias = Tensor::new([3, 4], bias_data.clone()).expect("bias");
    let mask = Arc::new(SparseMask::from_bias(&bias_data, 3, 4));
    let angles = values(77, 3 * 2);
    let table = Arc::new(RotaryTable::<f64>::from_angles(3, 2, &angles));

    let cases: Vec<Case> = vec![
        ("matmul", vec![input(1, &[3, 4]), input(2, &[4, 2])], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y, 1u64) })),
        ("add", vec![input(3, &[2, 3]), input(4, &[2, 3])], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted(g, y, 2u64) })),
        ("sub", vec![input(5, &[2, 3]), input(6, &[2, 3])], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted(g, y, 3u64) })),
        ("mul", vec![input(7, &[2, 3]), input(8, &[2, 3])], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y, 4u64) })),
        ("div", vec![input(9, &[2, 3]), positive(10, &[2, 3])], Box::new(|g, v| { let y = g.div(v[0], v[1])?; weighted(g, y, 5u64) })),
        ("add_row", vec![input(11, &[3, 4]), input(12, &[4])], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; weighted(g, y, 6u64) })),
        ("mul_row", vec![input(13, &[3, 4]), input(14, &[4])], Box::new(|g, v| { let y = g.mul_row(v[0], v[1])?; weighted(g, y, 7u64) })),
        ("linear", vec![input(15, &[3, 4]), input(16, &[4, 2]), input(17, &[2])], Box::new(|g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; weighted(g, y, 8u64) })),
        ("scale", vec![input(18, &[2, 3])], Box::new(|g, v| { let y = g.scale(v[0], -1.7)?; weighted(g, y, 9u64) })),
        ("add_scalar", vec![input(19, &[2, 3])], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.3)?; let y = g.mul(y, y)?; weighted(g, y, 10u64) })),
        ("silu", vec![input(20, &[2, 3])], Box::new(|g, v| { let y = g.silu(v[0])?; weighted(g, y, 11u64) })),
        ("abs", vec![input(21, &[2, 3])], Box::new(|g, v| { let y = g.abs(v[0])?; weighted(g, y, 12u64) })),
        ("powf", vec![positive(22, &[2, 3])], Box::new(|g, v| { let y = g.powf(v[0], 1.5)?; weighted(g, y, 13u64) })),
        ("ln", vec![positive(23, &[2, 3])], Box::new(|g, v| { let y = g.ln(v[0])?; weighted(g, y, 14u64) })),
        ("sqrt", vec![positive(24, &[2, 3])], Box::new(|g, v| { let y = g.sqrt(v[0])?; weighted(g, y, 15u64) })),
        ("clamp", vec![input(25, &[2, 3])], Box::new(|g, v| { let y = g.clamp(v[0], -0.55, 0.55)?; weighted(g, y, 16u64) })),
        ("layer_norm", vec![input(26, &[3, 5])], Box::new(|g, v| { let y = g.layer_norm(v[0], 1e-6)?; weighted(g, y, 17u64) })),
        ("layer_norm_affine", vec![input(27, &[3, 5]), input(28, &[5]), input(29, &[5])], Box::new(|g, v| { let y = g.layer_norm_affine(v[0], v[1], v[2], 1e-6)?; weighted(g, y, 18u64) })),
        ("sum", vec![input(30, &[2, 3])], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.sum(y) })),
        ("mean", vec![input(31, &[2, 3])], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.mean(y) })),
        ("sum_last", vec![input(32, &[3, 4])], Box::new(|g, v| { let y = g.sum_last(v[0])?; weighted(g, y, 19u64) })),
        ("concat_rows", vec![input(33, &[2, 3]), input(34, &[1, 3])], Box::new(|g, v| { let y = g.concat_rows(&[v[0], v[1]])?; weighted(g, y, 20u64) })),
        ("slice_rows", vec![input(35, &[4, 3])], Box::new(|g, v| { let y = g.slice_rows(v[0], 1, 3)?; weighted(g, y, 21u64) })),
        ("slice_cols", vec![input(36, &[3, 5])], Box::new(|g, v| { let y = g.slice_cols(v[0], 1, 4)?; weighted(g, y, 22u64) })),
        ("reshape", vec![input(37, &[2, 6])], Box::new(|g, v| { let y = g.reshape(v[0], &[4, 3])?; weighted(g, y, 23u64) })),
        ("transpose", vec![input(38, &[2, 3])], Box::new(|g, v| { let y = g.transpose(v[0])?; weighted(g, y, 24u64) })),
        ("gather_rows", vec![input(39, &[3, 2])], Box::new(|g, v| { let y = g.gather_rows(v[0], Arc::new(vec![2, 0, 2, 1]))?; weighted(g, y, 25u64) })),
        ("softmax_masked", vec![input(40, &[3, 4])], Box::new(move |g, v| { let y = g.softmax_masked(v[0], &bias)?; weighted(g, y, 26u64) })),
        ("rotary", vec![input(41, &[3, 8])], Box::new(move |g, v| { let y = g.rotary(v[0], table.clone())?; weighted(g, y, 27u64) })),
        ("attention", vec![input(42, &[3, 4]), input(43, &[4, 4]), input(44, &[4, 4])], Box::new(move |g, v| { let y = g.attention(v[0], v[1], v[2], mask.clone(), 2)?; weighted(g, y, 28u64) })),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| Ok((name, check(&params, h, f)?)))
        .collect()
}
