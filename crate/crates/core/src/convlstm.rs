//! Convolutional LSTM unrolled along the depth axis.
//!
//! Gate pre-activations come from one convolution over the channel
//! concatenation `[x_t, h_{t-1}]`:
//!
//! ```text
//! i, f, o = sigmoid(conv)   g = tanh(conv)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! The kernel is stored as one `[4F, C_in + F, k, k]` tensor (gate blocks in
//! i, f, o, g order) with a `[4F]` bias. Evaluation splits it into the input
//! part, applied to every depth slice in one batched convolution, and the
//! recurrent part, applied step by step.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

/// Hidden and cell maps of one layer at one depth step, each `[F, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Zero hidden and cell maps.
pub fn init_state(filters: usize, height: usize, width: usize) -> RecurrentState {
    RecurrentState {
        h: Tensor::zeros(&[filters, height, width]),
        c: Tensor::zeros(&[filters, height, width]),
    }
}

/// Standalone cell parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    /// `[4F, C_in + F, k, k]`
    pub weight: Tensor,
    /// `[4F]`
    pub bias: Tensor,
}

impl ConvLstmParams {
    pub fn zeros(in_channels: usize, filters: usize, kernel: usize) -> Self {
        ConvLstmParams {
            weight: Tensor::zeros(&[4 * filters, in_channels + filters, kernel, kernel]),
            bias: Tensor::zeros(&[4 * filters]),
        }
    }

    pub fn random(in_channels: usize, filters: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let layer = ConvLstm::new(&mut store, "cell", in_channels, filters, kernel, rng);
        ConvLstmParams {
            weight: store.get(layer.weight).clone(),
            bias: store.get(layer.bias).clone(),
        }
    }

    pub fn filters(&self) -> usize {
        self.bias.numel() / 4
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] - self.filters()
    }
}

/// Graph-side recurrent state; both maps are `[1, F, H, W]`.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub h: Var,
    pub c: Var,
}

impl GraphState {
    pub fn zeros(g: &Graph, filters: usize, height: usize, width: usize) -> Self {
        GraphState {
            h: g.constant(Tensor::zeros(&[1, filters, height, width])),
            c: g.constant(Tensor::zeros(&[1, filters, height, width])),
        }
    }

    pub fn from_values(g: &Graph, state: &RecurrentState) -> Result<Self> {
        let lift = |t: &Tensor| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        };
        Ok(GraphState {
            h: g.leaf(lift(&state.h)?),
            c: g.leaf(lift(&state.c)?),
        })
    }

    pub fn to_values(&self) -> Result<RecurrentState> {
        let drop_batch = |v: &Var| v.value().clone().reshape(&v.shape()[1..]);
        Ok(RecurrentState {
            h: drop_batch(&self.h)?,
            c: drop_batch(&self.c)?,
        })
    }
}

/// Weight and bias handles of a cell inside a graph.
pub struct CellVars<'a> {
    pub weight: &'a Var,
    pub bias: &'a Var,
}

struct SplitKernel {
    input: Var,
    recurrent: Var,
    filters: usize,
    kernel: usize,
}

fn split_kernel(g: &Graph, cell: &CellVars, in_channels: usize) -> Result<SplitKernel> {
    let shape = cell.weight.shape();
    let filters = cell.bias.shape()[0] / 4;
    if shape.len() != 4 || shape[0] != 4 * filters || shape[1] != in_channels + filters {
        return Err(Error::shape(
            format!("[{}, {}, k, k]", 4 * filters, in_channels + filters),
            shape,
        ));
    }
    Ok(SplitKernel {
        input: g.slice(cell.weight, 0, in_channels)?,
        recurrent: g.slice(cell.weight, in_channels, filters)?,
        filters,
        kernel: shape[2],
    })
}

fn finish_step(g: &Graph, k: &SplitKernel, x_gates: &Var, state: &GraphState) -> Result<GraphState> {
    let (_, f, h, w) = state.h.value().dims4();
    if f != k.filters || state.c.shape() != state.h.shape() || x_gates.shape()[2..] != [h, w] {
        return Err(Error::shape(
            format!("state [1, {}, {h}, {w}]", k.filters),
            format!("h {:?} c {:?}", state.h.shape(), state.c.shape()),
        ));
    }
    let rec = g.conv2d(&state.h, &k.recurrent, None, ConvSpec::same(k.kernel))?;
    let gates = g.add(x_gates, &rec)?;
    let hc = g.lstm_cell(&gates, &state.c)?;
    Ok(GraphState {
        h: g.slice(&hc, 0, f)?,
        c: g.slice(&hc, f, f)?,
    })
}

/// One recurrence step on `x: [1, C_in, H, W]`.
pub fn step_graph(g: &Graph, cell: &CellVars, x: &Var, state: &GraphState) -> Result<GraphState> {
    let k = split_kernel(g, cell, x.shape()[1])?;
    let xg = g.conv2d(x, &k.input, Some(cell.bias), ConvSpec::same(k.kernel))?;
    finish_step(g, &k, &xg, state)
}

/// Runs the cell over `seq: [D, C_in, H, W]` in increasing depth order and
/// returns the stacked hidden maps `[D, F, H, W]` and the final state.
pub fn unroll_graph(g: &Graph, cell: &CellVars, seq: &Var, init: GraphState) -> Result<(Var, GraphState)> {
    let depth = seq.shape()[0];
    if depth == 0 {
        return Err(Error::InvalidInput("empty depth sequence".into()));
    }
    let k = split_kernel(g, cell, seq.shape()[1])?;
    let x_gates = g.conv2d(seq, &k.input, Some(cell.bias), ConvSpec::same(k.kernel))?;
    let mut state = init;
    let mut hs = Vec::with_capacity(depth);
    for t in 0..depth {
        let xg = g.select(&x_gates, t)?;
        state = finish_step(g, &k, &xg, &state)?;
        hs.push(state.h.clone());
    }
    Ok((g.stack(&hs)?, state))
}

/// One cell update on values: `x_t: [C_in, H, W]`.
pub fn cell_step(x_t: &Tensor, state: &RecurrentState, params: &ConvLstmParams) -> Result<RecurrentState> {
    let g = Graph::inference();
    let cell_w = g.constant(params.weight.clone());
    let cell_b = g.constant(params.bias.clone());
    let cell = CellVars {
        weight: &cell_w,
        bias: &cell_b,
    };
    let mut shape = vec![1];
    shape.extend_from_slice(x_t.shape());
    let x = g.constant(x_t.clone().reshape(&shape)?);
    step_graph(&g, &cell, &x, &GraphState::from_values(&g, state)?)?.to_values()
}

/// Unrolls the cell over `sequence: [C_in, D, H, W]`; returns the hidden
/// maps `[F, D, H, W]` and the final state.
pub fn unroll(
    sequence: &Tensor,
    params: &ConvLstmParams,
    init: &RecurrentState,
) -> Result<(Tensor, RecurrentState)> {
    let g = Graph::inference();
    let cell_w = g.constant(params.weight.clone());
    let cell_b = g.constant(params.bias.clone());
    let cell = CellVars {
        weight: &cell_w,
        bias: &cell_b,
    };
    let seq = g.constant(swap01(sequence));
    let (hs, last) = unroll_graph(&g, &cell, &seq, GraphState::from_values(&g, init)?)?;
    Ok((swap01(hs.value()), last.to_values()?))
}

/// Exchanges the first two axes of a rank-4 tensor.
pub fn swap01(t: &Tensor) -> Tensor {
    let (a, b, h, w) = t.dims4();
    let plane = h * w;
    let mut out = Vec::with_capacity(t.numel());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&t.data()[(i * b + j) * plane..][..plane]);
        }
    }
    Tensor::new(vec![b, a, h, w], out).expect("same element count")
}

/// A cell whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLstm {
    /// Uniform fan-in initialization, forget-gate bias 1.0.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels + filters) * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[4 * filters, in_channels + filters, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[4 * filters], fan_in, rng);
        store.get_mut(bias).data_mut()[filters..2 * filters].fill(1.0);
        ConvLstm {
            in_channels,
            filters,
            kernel,
            weight,
            bias,
        }
    }

    pub fn param_count(in_channels: usize, filters: usize, kernel: usize) -> usize {
        4 * filters * (in_channels + filters) * kernel * kernel + 4 * filters
    }

    pub fn unroll(&self, g: &Graph, p: &Bound, seq: &Var, init: GraphState) -> Result<(Var, GraphState)> {
        let cell = CellVars {
            weight: p.var(self.weight),
            bias: p.var(self.bias),
        };
        unroll_graph(g, &cell, seq, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let params = ConvLstmParams::zeros(3, 2, 3);
        let out = cell_step(&Tensor::zeros(&[3, 4, 4]), &init_state(2, 4, 4), &params).unwrap();
        assert_eq!(out, init_state(2, 4, 4));
    }

    #[test]
    fn init_state_is_zero_and_idempotent() {
        let s = init_state(2, 4, 4);
        assert_eq!(s.h.shape(), &[2, 4, 4]);
        assert!(s.h.data().iter().chain(s.c.data()).all(|&v| v == 0.0));
        assert_eq!(s, init_state(2, 4, 4));
    }

    #[test]
    fn single_pixel_reduces_to_scalar_lstm() {
        // With a 1x1 map and "same" padding only the kernel centre tap sees data.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ConvLstmParams::random(1, 1, 3, &mut rng);
        let tap = |gate: usize, ch: usize| params.weight.data()[((gate * 2 + ch) * 3 + 1) * 3 + 1];
        let (x, h0, c0) = (0.7, -0.3, 0.4);
        let pre = |gate: usize| tap(gate, 0) * x + tap(gate, 1) * h0 + params.bias.data()[gate];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (i, f, o, g) = (sig(pre(0)), sig(pre(1)), sig(pre(2)), pre(3).tanh());
        let c = f * c0 + i * g;
        let h = o * c.tanh();

        let state = RecurrentState {
            h: Tensor::full(&[1, 1, 1], h0),
            c: Tensor::full(&[1, 1, 1], c0),
        };
        let out = cell_step(&Tensor::full(&[1, 1, 1], x), &state, &params).unwrap();
        assert!((out.c.item() - c).abs() < 1e-14);
        assert!((out.h.item() - h).abs() < 1e-14);
    }

    #[test]
    fn hidden_is_tanh_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ConvLstmParams::random(2, 3, 3, &mut rng);
        let x = random(&[2, 5, 5], &mut rng).map(|v| v * 1e3);
        let out = cell_step(&x, &init_state(3, 5, 5), &params).unwrap();
        assert!(out.h.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut params = ConvLstmParams::zeros(1, 2, 3);
        // input gate bias -inf, forget gate bias +inf
        params.bias.data_mut()[0..2].fill(f64::NEG_INFINITY);
        params.bias.data_mut()[2..4].fill(f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = RecurrentState {
            h: random(&[2, 3, 3], &mut rng),
            c: random(&[2, 3, 3], &mut rng),
        };
        let out = cell_step(&random(&[1, 3, 3], &mut rng), &state, &params).unwrap();
        assert_eq!(out.c, state.c);
    }

    #[test]
    fn unroll_of_one_step_equals_cell_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ConvLstmParams::random(2, 3, 3, &mut rng);
        let x = random(&[2, 1, 4, 4], &mut rng);
        let init = RecurrentState {
            h: random(&[3, 4, 4], &mut rng),
            c: random(&[3, 4, 4], &mut rng),
        };
        let (hs, last) = unroll(&x, &params, &init).unwrap();
        let single = cell_step(&x.clone().reshape(&[2, 4, 4]).unwrap(), &init, &params).unwrap();
        assert_eq!(last, single);
        assert_eq!(hs.data(), single.h.data());
    }

    #[test]
    fn unroll_splits_at_any_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ConvLstmParams::random(2, 2, 3, &mut rng);
        let (c, d, h, w) = (2, 5, 3, 4);
        let seq = random(&[c, d, h, w], &mut rng);
        let init = init_state(2, h, w);
        let (full, full_last) = unroll(&seq, &params, &init).unwrap();
        for a in 1..d {
            let slab = |range: std::ops::Range<usize>| {
                let t = swap01(&seq);
                let plane = c * h * w;
                let data = t.data()[range.start * plane..range.end * plane].to_vec();
                swap01(&Tensor::new(vec![range.len(), c, h, w], data).unwrap())
            };
            let (first, mid) = unroll(&slab(0..a), &params, &init).unwrap();
            let (second, last) = unroll(&slab(a..d), &params, &mid).unwrap();
            assert_eq!(last, full_last);
            let joined = swap01(&full);
            let plane = 2 * h * w;
            assert_eq!(&joined.data()[..a * plane], swap01(&first).data());
            assert_eq!(&joined.data()[a * plane..], swap01(&second).data());
        }
    }

    #[test]
    fn shifted_inputs_shift_outputs_away_from_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = ConvLstmParams::random(2, 2, 3, &mut rng);
        let (h, w) = (9, 10);
        let x = random(&[2, h, w], &mut rng);
        let state = RecurrentState {
            h: random(&[2, h, w], &mut rng),
            c: random(&[2, h, w], &mut rng),
        };
        let roll = |t: &Tensor, dy: usize, dx: usize| {
            let ch = t.shape()[0];
            let mut out = Tensor::zeros(t.shape());
            for c in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out.data_mut()[(c * h + (y + dy) % h) * w + (x + dx) % w] = t.data()[(c * h + y) * w + x];
                    }
                }
            }
            out
        };
        let (dy, dx) = (2, 3);
        let base = cell_step(&x, &state, &params).unwrap();
        let shifted_state = RecurrentState {
            h: roll(&state.h, dy, dx),
            c: roll(&state.c, dy, dx),
        };
        let moved = cell_step(&roll(&x, dy, dx), &shifted_state, &params).unwrap();
        let expected = roll(&base.h, dy, dx);
        // positions whose 3x3 neighbourhood did not cross the border or the wrap seam
        for c in 0..2 {
            for y in dy + 1..h - 1 {
                for x in dx + 1..w - 1 {
                    let i = (c * h + y) * w + x;
                    assert!((moved.h.data()[i] - expected.data()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_count_formula() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ConvLstm::new(&mut store, "l", 5, 7, 3, &mut rng);
        assert_eq!(store.num_scalars(), ConvLstm::param_count(5, 7, 3));
        assert_eq!(ConvLstm::param_count(5, 7, 3), 4 * 7 * 12 * 9 + 28);
    }
}
