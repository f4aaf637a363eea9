//! The two learned blocks the refiner uses: 3-layer MLPs and multi-head
//! scaled-dot-product cross-attention, plus seeded initialization.
//!
//! Parameters live as plain [`Tensor`]s grouped in small structs; each
//! struct knows how to bind itself onto a [`Tape`] (as trainable params or
//! frozen constants) and how to enumerate its tensors in a canonical
//! order for optimizers and archives. Weights are stored input×output so
//! activations are row vectors multiplied on the left.

use rand::Rng;

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform Kaiming-style fan-in initialization: U(−√(6/fan_in), √(6/fan_in)).
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// in×out.
    pub w: Tensor,
    /// 1×out.
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            w: kaiming_uniform(rng, fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

/// linear → ReLU → linear → ReLU → linear, hidden width = the embedding
/// dim unless constructed otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3Params {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

impl Mlp3Params {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Mlp3Params {
            l1: LinearParams::init(rng, input, hidden),
            l2: LinearParams::init(rng, hidden, hidden),
            l3: LinearParams::init(rng, hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.l3.w.cols()
    }

    /// Chain check: in → hidden → hidden → out.
    pub fn validate(&self) -> Result<()> {
        let ok = self.l1.w.cols() == self.l2.w.rows()
            && self.l2.w.cols() == self.l3.w.rows()
            && self.l1.b.cols() == self.l1.w.cols()
            && self.l2.b.cols() == self.l2.w.cols()
            && self.l3.b.cols() == self.l3.w.cols();
        if ok {
            Ok(())
        } else {
            Err(Error::shape("mlp3 layer shapes do not chain"))
        }
    }
}

#[derive(Clone, Copy)]
pub struct Mlp3Vars {
    pub l1: LinearVars,
    pub l2: LinearVars,
    pub l3: LinearVars,
}

fn bind_linear(tape: &mut Tape, p: &LinearParams, trainable: bool) -> LinearVars {
    let bind = |tape: &mut Tape, t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    LinearVars {
        w: bind(tape, &p.w),
        b: bind(tape, &p.b),
    }
}

impl Mlp3Params {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Mlp3Vars {
        Mlp3Vars {
            l1: bind_linear(tape, &self.l1, trainable),
            l2: bind_linear(tape, &self.l2, trainable),
            l3: bind_linear(tape, &self.l3, trainable),
        }
    }
}

fn linear(tape: &mut Tape, p: LinearVars, x: Var) -> Var {
    let xw = tape.matmul(x, p.w, false);
    tape.add_row(xw, p.b)
}

/// Runs the 3-layer MLP on an n×in batch, producing n×out.
pub fn mlp3(tape: &mut Tape, p: &Mlp3Vars, x: Var) -> Var {
    assert_eq!(
        x.cols(),
        p.l1.w.rows(),
        "mlp3 input width {} does not match first layer {}",
        x.cols(),
        p.l1.w.rows()
    );
    let h1 = linear(tape, p.l1, x);
    let h1 = tape.relu(h1);
    let h2 = linear(tape, p.l2, h1);
    let h2 = tape.relu(h2);
    linear(tape, p.l3, h2)
}

/// Learnable gain/shift for layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::from_vec(1, dim, vec![1.0; dim]),
            beta: Tensor::zeros(1, dim),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerNormVars {
        if trainable {
            LayerNormVars {
                gamma: tape.param(self.gamma.clone()),
                beta: tape.param(self.beta.clone()),
            }
        } else {
            LayerNormVars {
                gamma: tape.constant(self.gamma.clone()),
                beta: tape.constant(self.beta.clone()),
            }
        }
    }
}

pub fn layer_norm(tape: &mut Tape, p: LayerNormVars, x: Var) -> Var {
    tape.layer_norm(x, p.gamma, p.beta)
}

/// Multi-head cross-attention parameters: query/key/value/output
/// projections over dim D split into H heads, with the layer norm applied
/// on the residual output.
#[derive(Clone, Debug, PartialEq)]
pub struct MhcaParams {
    pub heads: usize,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln: LayerNormParams,
}

impl MhcaParams {
    pub fn init(rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {dim} must divide evenly into {heads} heads"
            )));
        }
        Ok(MhcaParams {
            heads,
            wq: LinearParams::init(rng, dim, dim),
            wk: LinearParams::init(rng, dim, dim),
            wv: LinearParams::init(rng, dim, dim),
            wo: LinearParams::init(rng, dim, dim),
            ln: LayerNormParams::init(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.w.rows()
    }
}

#[derive(Clone, Copy)]
pub struct MhcaVars {
    pub heads: usize,
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub ln: LayerNormVars,
}

impl MhcaParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MhcaVars {
        MhcaVars {
            heads: self.heads,
            wq: bind_linear(tape, &self.wq, trainable),
            wk: bind_linear(tape, &self.wk, trainable),
            wv: bind_linear(tape, &self.wv, trainable),
            wo: bind_linear(tape, &self.wo, trainable),
            ln: self.ln.bind(tape, trainable),
        }
    }
}

/// Scaled dot-product cross-attention for a single 1×D query against n×D
/// keys/values.
///
/// With `residual_norm` the block computes layer_norm(attention + query),
/// the stabilized form; without it the raw attention output is returned,
/// matching the bare equations. An empty key set contributes nothing and
/// the query passes through (normalized under the flag).
pub fn mhca(
    tape: &mut Tape,
    p: &MhcaVars,
    query: Var,
    keys: Var,
    values: Var,
    residual_norm: bool,
) -> Var {
    let d = query.cols();
    assert_eq!(query.rows(), 1, "mhca expects a single query row");
    debug_assert_eq!(d % p.heads, 0);
    let n = keys.rows();
    if n == 0 {
        return if residual_norm {
            layer_norm(tape, p.ln, query)
        } else {
            query
        };
    }
    assert_eq!(keys.cols(), d, "key width mismatch");
    assert_eq!(values.rows(), n, "key/value count mismatch");
    assert_eq!(values.cols(), d, "value width mismatch");

    let q = linear(tape, p.wq, query);
    let k = linear(tape, p.wk, keys);
    let v = linear(tape, p.wv, values);

    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul(qh, kh, true);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        head_outputs.push(tape.matmul(weights, vh, false));
    }
    let merged = tape.concat(&head_outputs, Axis::Cols);
    let attn = linear(tape, p.wo, merged);

    if residual_norm {
        let res = tape.add(attn, query);
        layer_norm(tape, p.ln, res)
    } else {
        attn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    fn identity(dim: usize) -> Tensor {
        let mut t = Tensor::zeros(dim, dim);
        for i in 0..dim {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn zero_weight_mlp_outputs_its_final_bias() {
        let mut p = Mlp3Params {
            l1: LinearParams::zeros(3, 4),
            l2: LinearParams::zeros(4, 4),
            l3: LinearParams::zeros(4, 2),
        };
        p.l3.b = Tensor::from_vec(1, 2, vec![0.7, -1.2]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0]));
        let y = mlp3(&mut tape, &vars, x);
        let v = tape.value(y);
        for r in 0..2 {
            assert_eq!(v.get(r, 0), 0.7);
            assert_eq!(v.get(r, 1), -1.2);
        }
    }

    #[test]
    fn identity_mlp_is_transparent_on_nonnegative_input() {
        let p = Mlp3Params {
            l1: LinearParams {
                w: identity(3),
                b: Tensor::zeros(1, 3),
            },
            l2: LinearParams {
                w: identity(3),
                b: Tensor::zeros(1, 3),
            },
            l3: LinearParams {
                w: identity(3),
                b: Tensor::zeros(1, 3),
            },
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(1, 3, vec![0.0, 2.5, 7.0]));
        let y = mlp3(&mut tape, &vars, x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.5, 7.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Mlp3Params::init(&mut rng, 5, 6, 3);
        let x = rand_tensor(&mut rng, 2, 5);
        let leaves = vec![
            p.l1.w.clone(),
            p.l1.b.clone(),
            p.l2.w.clone(),
            p.l2.b.clone(),
            p.l3.w.clone(),
            p.l3.b.clone(),
            x,
        ];
        let err = max_rel_err(
            &|tape, vars| {
                let mv = Mlp3Vars {
                    l1: LinearVars { w: vars[0], b: vars[1] },
                    l2: LinearVars { w: vars[2], b: vars[3] },
                    l3: LinearVars { w: vars[4], b: vars[5] },
                };
                let y = mlp3(tape, &mv, vars[6]);
                let h = tape.huber(y, 1.0);
                tape.mean(h)
            },
            &leaves,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn mhca_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MhcaParams::init(&mut rng, 10, 3).is_err());
        assert!(MhcaParams::init(&mut rng, 8, 0).is_err());
    }

    #[test]
    fn single_key_with_identity_projections_returns_the_value_row() {
        let dim = 4;
        let p = MhcaParams {
            heads: 2,
            wq: LinearParams { w: identity(dim), b: Tensor::zeros(1, dim) },
            wk: LinearParams { w: identity(dim), b: Tensor::zeros(1, dim) },
            wv: LinearParams { w: identity(dim), b: Tensor::zeros(1, dim) },
            wo: LinearParams { w: identity(dim), b: Tensor::zeros(1, dim) },
            ln: LayerNormParams::init(dim),
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let q = tape.constant(Tensor::from_vec(1, 4, vec![0.2, -0.4, 1.0, 2.0]));
        let keys = tape.constant(Tensor::from_vec(1, 4, vec![5.0, 1.0, -2.0, 0.0]));
        let values = tape.constant(Tensor::from_vec(1, 4, vec![9.0, 8.0, 7.0, 6.0]));
        let out = mhca(&mut tape, &vars, q, keys, values, false);
        assert_eq!(tape.value(out).data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn empty_key_set_passes_query_through_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MhcaParams::init(&mut rng, 8, 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let qt = rand_tensor(&mut rng, 1, 8);
        let q = tape.constant(qt.clone());
        let empty = tape.constant(Tensor::zeros(0, 8));
        let out = mhca(&mut tape, &vars, q, empty, empty, true);
        let expect = layer_norm(&mut tape, vars.ln, q);
        assert_eq!(tape.value(out).data(), tape.value(expect).data());

        let raw = mhca(&mut tape, &vars, q, empty, empty, false);
        assert_eq!(tape.value(raw).data(), qt.data());
    }

    #[test]
    fn mhca_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dim = 6;
        let p = MhcaParams::init(&mut rng, dim, 2).unwrap();
        let leaves = vec![
            p.wq.w.clone(),
            p.wq.b.clone(),
            p.wk.w.clone(),
            p.wk.b.clone(),
            p.wv.w.clone(),
            p.wv.b.clone(),
            p.wo.w.clone(),
            p.wo.b.clone(),
            p.ln.gamma.clone(),
            p.ln.beta.clone(),
            rand_tensor(&mut rng, 1, dim),
            rand_tensor(&mut rng, 3, dim),
        ];
        let err = max_rel_err(
            &|tape, vars| {
                let mv = MhcaVars {
                    heads: 2,
                    wq: LinearVars { w: vars[0], b: vars[1] },
                    wk: LinearVars { w: vars[2], b: vars[3] },
                    wv: LinearVars { w: vars[4], b: vars[5] },
                    wo: LinearVars { w: vars[6], b: vars[7] },
                    ln: LayerNormVars { gamma: vars[8], beta: vars[9] },
                };
                let out = mhca(tape, &mv, vars[10], vars[11], vars[11], true);
                let h = tape.huber(out, 1.0);
                tape.mean(h)
            },
            &leaves,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn mhca_is_invariant_to_joint_key_value_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dim = 8;
        let p = MhcaParams::init(&mut rng, dim, 4).unwrap();
        let q_t = rand_tensor(&mut rng, 1, dim);
        let kv_t = rand_tensor(&mut rng, 4, dim);
        let perm = [2usize, 0, 3, 1];
        let kv_perm = Tensor::from_rows(
            &perm.iter().map(|r| kv_t.row(*r).to_vec()).collect::<Vec<_>>(),
        );

        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let q = tape.constant(q_t.clone());
            let k = tape.constant(kv.clone());
            let out = mhca(&mut tape, &vars, q, k, k, true);
            tape.value(out).data().to_vec()
        };
        let a = run(&kv_t);
        let b = run(&kv_perm);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = kaiming_uniform(&mut rng, 24, 16);
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // Not degenerate: values spread over the interval.
        let spread = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > bound);
    }
}
