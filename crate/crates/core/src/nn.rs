//! Fixed-architecture feed-forward networks.
//!
//! Parameters live in one flat `Vec<f64>` per network so that the optimizer,
//! gradient clipping and checkpointing all operate on plain slices. Within the
//! flat vector each dense layer stores its weight matrix row-major
//! (`[outputs][inputs]`) followed by its bias; a policy appends its
//! state-independent `log_std` vector at the end.
//!
//! The policy carries a mode-scoped dropout layer after one hidden layer.
//! In [`NetMode::Rollout`] the Roll-Drop mask is drawn and applied (dropped
//! units are zeroed, survivors are *not* rescaled, so a pass in which no unit
//! fires is bitwise identical to an update-mode pass). In [`NetMode::Update`]
//! Roll-Drop is off; conventional inverted dropout may be enabled there for
//! the train-time ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Lower clamp on the policy's action standard deviation.
pub const SIGMA_MIN: f64 = 0.2;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetMode {
    /// Trajectory collection: Roll-Drop masks may fire.
    Rollout,
    /// Gradient computation: Roll-Drop is off.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            other => Err(Error::Corrupt(format!("unknown activation code {other}"))),
        }
    }
}

/// Units zeroed during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedUnits {
    /// 1-based hidden layer index the mask was applied after.
    pub layer: usize,
    pub units: Vec<usize>,
}

/// A logged Roll-Drop firing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEvent {
    pub iteration: u64,
    pub env_id: u32,
    pub step: u64,
    pub layer: usize,
    pub units: Vec<usize>,
}

pub const DROP_EVENT_CSV_HEADER: &str = "iteration,env_id,step,layer,unit";

/// Write drop events as CSV, one row per zeroed unit.
pub fn write_drop_events_csv<W: std::io::Write>(out: W, events: &[DropEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DROP_EVENT_CSV_HEADER.split(','))?;
    for e in events {
        for u in &e.units {
            w.write_record([
                e.iteration.to_string(),
                e.env_id.to_string(),
                e.step.to_string(),
                e.layer.to_string(),
                u.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<drop events>", e))?;
    Ok(())
}

/// Draw a dropout mask: `true` means the unit is dropped.
///
/// Consumes exactly `width` words from `rng` whatever `p` is, so that runs
/// differing only in `p` keep their dropout streams aligned.
pub fn draw_drop_mask(p: f64, width: usize, rng: &mut RngStream) -> Result<Vec<bool>> {
    check_probability("dropout probability", p)?;
    Ok((0..width).map(|_| rng.uniform() < p).collect())
}

pub(crate) fn check_probability(path: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(path, format!("{p} is outside [0, 1)")));
    }
    Ok(())
}

/// Odd Taylor coefficients of tanh from x^3 to x^23.
const TANH_TAYLOR: [f64; 11] = [
    -0.3333333333333333,
    0.13333333333333333,
    -0.05396825396825397,
    0.021869488536155203,
    -0.008863235529902197,
    0.003592128036572481,
    -0.0014558343870513183,
    0.000590027440945586,
    -0.00023912911424355248,
    9.691537956929451e-05,
    -3.927832388331683e-05,
];

/// Hyperbolic tangent within 4 ulp of `f64::tanh`, about twice as fast.
/// A series below 0.25 avoids the cancellation in `1 - 2 / (e^2x + 1)`.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let y = if a < 0.25 {
        let s = a * a;
        let mut p = TANH_TAYLOR[10];
        for c in TANH_TAYLOR[..10].iter().rev() {
            p = p * s + c;
        }
        a + a * s * p
    } else {
        1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
    };
    y.copysign(x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activations cached by a forward pass, consumed by `backward`.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    sizes: Vec<usize>,
    /// Input to each layer (after activation and masking of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Post-activation, pre-mask output of each hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Hidden layer index (0-based) and per-unit multiplier of the applied mask.
    mask: Option<(usize, Vec<f64>)>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// A multilayer perceptron: tanh (or identity) hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl Mlp {
    /// Zero-initialised network.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::contract(format!(
                "layer sizes must list at least input and output, all positive; got {sizes:?}"
            )));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
        })
    }

    /// Uniform fan-in scaled initialisation; output layer shrunk by `output_gain`.
    pub fn init(
        sizes: &[usize],
        activation: Activation,
        output_gain: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let layers = net.num_layers();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let mut bound = (3.0 / fan_in as f64).sqrt();
            if l + 1 == layers {
                bound *= output_gain;
            }
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.uniform_range(-bound, bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_hidden(&self) -> usize {
        self.sizes.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Weight (row-major, `[out][in]`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.layer_offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (
            &self.params[off..off + i * o],
            &self.params[off + i * o..off + i * o + o],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layer_offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.params[off..off + i * o + o].split_at_mut(i * o);
        (w, rest)
    }

    /// Forward pass. `mask` multiplies the post-activation output of hidden
    /// layer `mask.0` (0-based) unit-wise.
    pub fn forward_tape(
        &self,
        x: &[f64],
        mask: Option<(usize, Vec<f64>)>,
        tape: &mut Tape,
    ) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if let Some((l, m)) = &mask {
            if *l >= self.num_hidden() || m.len() != self.sizes[l + 1] {
                return Err(Error::contract("dropout mask does not match a hidden layer"));
            }
        }
        let layers = self.num_layers();
        tape.sizes.clone_from(&self.sizes);
        tape.inputs.resize(layers, Vec::new());
        tape.hidden.resize(self.num_hidden(), Vec::new());
        tape.inputs[0].clear();
        tape.inputs[0].extend_from_slice(x);
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let n_in = self.sizes[l];
            let mut z: Vec<f64> = b.to_vec();
            {
                let input = &tape.inputs[l];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += dot(&w[j * n_in..(j + 1) * n_in], input);
                }
            }
            if l + 1 == layers {
                tape.output = z;
            } else {
                if self.activation == Activation::Tanh {
                    for v in &mut z {
                        *v = tanh(*v);
                    }
                }
                let mut next = z.clone();
                if let Some((ml, m)) = &mask {
                    if *ml == l {
                        for (v, s) in next.iter_mut().zip(m) {
                            *v *= s;
                        }
                    }
                }
                tape.hidden[l] = z;
                tape.inputs[l + 1] = next;
            }
        }
        tape.mask = mask;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(x, None, &mut tape)?;
        Ok(tape.output)
    }

    /// Accumulate d(loss)/d(params) into `grads` given d(loss)/d(output).
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) -> Result<()> {
        if tape.sizes != self.sizes || tape.inputs.len() != self.num_layers() {
            return Err(Error::contract(
                "backward called without a cached forward pass of this network",
            ));
        }
        if grad_out.len() != self.output_dim() || grads.len() < self.params.len() {
            return Err(Error::contract("gradient buffers do not conform"));
        }
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let off = self.layer_offset(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &tape.inputs[l];
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = delta[j];
                    if dj != 0.0 {
                        axpy(dj, input, &mut gw[j * n_in..(j + 1) * n_in]);
                    }
                    gb[j] += dj;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj != 0.0 {
                    axpy(dj, &w[j * n_in..(j + 1) * n_in], &mut prev);
                }
            }
            // back through mask and activation of hidden layer l - 1
            let h = l - 1;
            if let Some((ml, m)) = &tape.mask {
                if *ml == h {
                    for (p, s) in prev.iter_mut().zip(m) {
                        *p *= s;
                    }
                }
            }
            if self.activation == Activation::Tanh {
                for (p, y) in prev.iter_mut().zip(&tape.hidden[h]) {
                    *p *= 1.0 - y * y;
                }
            }
            delta = prev;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batched passes over row-major `[rows][features]` matrices.

/// `c = beta * c + a * b` for `a: m x k`, `b: k x n`, `c: m x n`, each given
/// by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2));
    assert!(b.0.len() >= span(k, n, b.1, b.2));
    assert!(c.0.len() >= span(m, n, c.1, c.2));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every addressed element in bounds and
    // `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Activations of a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchTape {
    rows: usize,
    sizes: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    /// Hidden layer index and `rows x width` multipliers.
    mask: Option<(usize, Vec<f64>)>,
    output: Vec<f64>,
}

impl BatchTape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `rows x output_dim` outputs.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    /// Forward pass over `rows` inputs stacked in `x`. `mask` holds one row
    /// of unit multipliers per input for hidden layer `mask.0`.
    pub fn forward_batch(
        &self,
        x: &[f64],
        rows: usize,
        mask: Option<(usize, Vec<f64>)>,
        tape: &mut BatchTape,
    ) -> Result<()> {
        if x.len() != rows * self.input_dim() {
            return Err(Error::contract("batch input does not match rows x input_dim"));
        }
        if let Some((l, m)) = &mask {
            if *l >= self.num_hidden() || m.len() != rows * self.sizes[l + 1] {
                return Err(Error::contract("dropout mask does not match a hidden layer"));
            }
        }
        let layers = self.num_layers();
        tape.rows = rows;
        tape.sizes.clone_from(&self.sizes);
        tape.inputs.resize(layers, Vec::new());
        tape.hidden.resize(self.num_hidden(), Vec::new());
        tape.inputs[0].clear();
        tape.inputs[0].extend_from_slice(x);
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut z = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                z.extend_from_slice(b);
            }
            gemm(
                rows,
                n_in,
                n_out,
                (&tape.inputs[l], n_in, 1),
                (w, 1, n_in),
                1.0,
                (&mut z, n_out, 1),
            );
            if l + 1 == layers {
                tape.output = z;
            } else {
                if self.activation == Activation::Tanh {
                    z.iter_mut().for_each(|v| *v = tanh(*v));
                }
                let mut next = z.clone();
                if let Some((ml, m)) = &mask {
                    if *ml == l {
                        next.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                    }
                }
                tape.hidden[l] = z;
                tape.inputs[l + 1] = next;
            }
        }
        tape.mask = mask;
        Ok(())
    }

    /// Accumulate parameter gradients summed over the batch rows given the
    /// `rows x output_dim` output gradients.
    pub fn backward_batch(&self, tape: &BatchTape, grad_out: &[f64], grads: &mut [f64]) -> Result<()> {
        if tape.sizes != self.sizes || tape.inputs.len() != self.num_layers() {
            return Err(Error::contract(
                "backward called without a cached forward pass of this network",
            ));
        }
        let rows = tape.rows;
        if grad_out.len() != rows * self.output_dim() || grads.len() < self.params.len() {
            return Err(Error::contract("gradient buffers do not conform"));
        }
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let off = self.layer_offset(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                gemm(
                    n_out,
                    rows,
                    n_in,
                    (&delta, 1, n_out),
                    (&tape.inputs[l], n_in, 1),
                    1.0,
                    (gw, n_in, 1),
                );
                for r in 0..rows {
                    for (g, d) in gb.iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]) {
                        *g += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; rows * n_in];
            gemm(rows, n_out, n_in, (&delta, n_out, 1), (w, n_in, 1), 0.0, (&mut prev, n_in, 1));
            let h = l - 1;
            if let Some((ml, m)) = &tape.mask {
                if *ml == h {
                    prev.iter_mut().zip(m).for_each(|(p, s)| *p *= s);
                }
            }
            if self.activation == Activation::Tanh {
                prev.iter_mut()
                    .zip(&tape.hidden[h])
                    .for_each(|(p, y)| *p *= 1.0 - y * y);
            }
            delta = prev;
        }
        Ok(())
    }
}

/// Dropout placement and probabilities of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// 1-based hidden layer after which the mask applies.
    pub position: usize,
    /// Roll-Drop probability (rollout mode only, no rescaling).
    pub rolldrop_p: f64,
    /// Conventional dropout probability (update mode only, inverted scaling).
    pub train_p: f64,
}

/// Gaussian policy: MLP mean plus a learned, state-independent log std.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    trunk: Mlp,
    log_std: Vec<f64>,
    dropout: DropoutSpec,
}

impl PolicyNet {
    pub fn new(trunk: Mlp, log_std: Vec<f64>, dropout: DropoutSpec) -> Result<Self> {
        if log_std.len() != trunk.output_dim() {
            return Err(Error::contract("log_std length must equal the action dimension"));
        }
        if dropout.position == 0 || dropout.position > trunk.num_hidden() {
            return Err(Error::config(
                "policy.rolldrop_position",
                format!(
                    "{} does not index one of the {} hidden layers",
                    dropout.position,
                    trunk.num_hidden()
                ),
            ));
        }
        check_probability("policy.rolldrop_p", dropout.rolldrop_p)?;
        check_probability("ppo.train_dropout_p", dropout.train_p)?;
        Ok(Self {
            trunk,
            log_std,
            dropout,
        })
    }

    /// Fresh policy with `sizes = [obs, hidden.., act]` and `sigma0` initial std.
    pub fn init(
        sizes: &[usize],
        activation: Activation,
        sigma0: f64,
        dropout: DropoutSpec,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let trunk = Mlp::init(sizes, activation, 0.01, rng)?;
        let act = trunk.output_dim();
        Self::new(trunk, vec![sigma0.ln(); act], dropout)
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn dropout(&self) -> DropoutSpec {
        self.dropout
    }

    pub fn set_rolldrop_p(&mut self, p: f64) -> Result<()> {
        check_probability("policy.rolldrop_p", p)?;
        self.dropout.rolldrop_p = p;
        Ok(())
    }

    pub fn set_train_dropout_p(&mut self, p: f64) -> Result<()> {
        check_probability("ppo.train_dropout_p", p)?;
        self.dropout.train_p = p;
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    /// Width of the layer the dropout mask applies to.
    pub fn drop_width(&self) -> usize {
        self.trunk.sizes()[self.dropout.position]
    }

    /// Number of parameters including `log_std`.
    pub fn num_params(&self) -> usize {
        self.trunk.params().len() + self.log_std.len()
    }

    /// Flattened parameters (trunk then `log_std`).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.trunk.params().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract("flat parameter vector has the wrong length"));
        }
        let n = self.trunk.params().len();
        self.trunk.params_mut().copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
        Ok(())
    }

    /// Clamp `log_std` so every std is at least [`SIGMA_MIN`].
    pub fn clamp_sigma(&mut self) {
        let floor = SIGMA_MIN.ln();
        for l in &mut self.log_std {
            if *l < floor {
                *l = floor;
            }
        }
    }

    /// Draw the mask for `mode`, returning the per-unit multiplier and the
    /// dropped unit indices. Rollout mode always consumes `drop_width` words.
    fn mode_mask(
        &self,
        mode: NetMode,
        rng: &mut RngStream,
        forced: &[usize],
    ) -> Result<(Option<(usize, Vec<f64>)>, Option<DroppedUnits>)> {
        let width = self.drop_width();
        let hidden = self.dropout.position - 1;
        let (mut bits, scale) = match mode {
            NetMode::Rollout => (draw_drop_mask(self.dropout.rolldrop_p, width, rng)?, 1.0),
            NetMode::Update if self.dropout.train_p > 0.0 => (
                draw_drop_mask(self.dropout.train_p, width, rng)?,
                1.0 / (1.0 - self.dropout.train_p),
            ),
            NetMode::Update => (vec![false; width], 1.0),
        };
        for &u in forced {
            if u >= width {
                return Err(Error::contract(format!("forced drop unit {u} >= width {width}")));
            }
            bits[u] = true;
        }
        let units: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if units.is_empty() && scale == 1.0 {
            return Ok((None, None));
        }
        let m = bits
            .iter()
            .map(|&b| if b { 0.0 } else { scale })
            .collect();
        let dropped = (!units.is_empty()).then(|| DroppedUnits {
            layer: self.dropout.position,
            units,
        });
        Ok((Some((hidden, m)), dropped))
    }

    /// Mean action. In rollout mode the Roll-Drop mask is drawn from `rng`
    /// (the dedicated dropout stream); update mode is deterministic unless
    /// train-time dropout is enabled.
    pub fn forward(
        &self,
        obs: &[f64],
        mode: NetMode,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Option<DroppedUnits>)> {
        let mut tape = Tape::default();
        let dropped = self.forward_tape(obs, mode, rng, &[], &mut tape)?;
        Ok((tape.output, dropped))
    }

    /// As [`PolicyNet::forward`], caching activations in `tape` and
    /// additionally dropping the `forced` units.
    pub fn forward_tape(
        &self,
        obs: &[f64],
        mode: NetMode,
        rng: &mut RngStream,
        forced: &[usize],
        tape: &mut Tape,
    ) -> Result<Option<DroppedUnits>> {
        let (mask, dropped) = self.mode_mask(mode, rng, forced)?;
        self.trunk.forward_tape(obs, mask, tape)?;
        Ok(dropped)
    }

    /// Batched forward over `rows` observations; masks are drawn row by row
    /// in order, exactly as `rows` calls of [`PolicyNet::forward_tape`] would.
    pub fn forward_batch(
        &self,
        obs: &[f64],
        rows: usize,
        mode: NetMode,
        rng: &mut RngStream,
        tape: &mut BatchTape,
    ) -> Result<()> {
        let width = self.drop_width();
        let mut stacked: Option<(usize, Vec<f64>)> = None;
        for r in 0..rows {
            if let (Some((h, m)), _) = self.mode_mask(mode, rng, &[])? {
                let (_, all) = stacked.get_or_insert_with(|| (h, vec![1.0; rows * width]));
                all[r * width..(r + 1) * width].copy_from_slice(&m);
            }
        }
        self.trunk.forward_batch(obs, rows, stacked, tape)
    }

    /// Batched backward: `grad_mean` is `rows x act_dim`, `grad_log_std`
    /// already summed over rows.
    pub fn backward_batch(
        &self,
        tape: &BatchTape,
        grad_mean: &[f64],
        grad_log_std: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.num_params() || grad_log_std.len() != self.log_std.len() {
            return Err(Error::contract("gradient buffers do not conform"));
        }
        let n = self.trunk.params().len();
        self.trunk.backward_batch(tape, grad_mean, &mut grads[..n])?;
        for (g, d) in grads[n..].iter_mut().zip(grad_log_std) {
            *g += d;
        }
        Ok(())
    }

    /// Unperturbed mean action, no dropout of any kind.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.trunk.forward(obs)
    }

    /// Accumulate gradients: `grad_mean` w.r.t. the mean output flows through
    /// the trunk, `grad_log_std` is added to the trailing `log_std` block.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_mean: &[f64],
        grad_log_std: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.num_params() || grad_log_std.len() != self.log_std.len() {
            return Err(Error::contract("gradient buffers do not conform"));
        }
        let n = self.trunk.params().len();
        self.trunk.backward(tape, grad_mean, &mut grads[..n])?;
        for (g, d) in grads[n..].iter_mut().zip(grad_log_std) {
            *g += d;
        }
        Ok(())
    }
}

/// Action sampled around `mean` with std `exp(log_std)` and its log density.
pub fn sample_action(
    mean: &[f64],
    log_std: &[f64],
    rng: &mut RngStream,
) -> Result<(Vec<f64>, f64)> {
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.standard_normal()).collect();
    action_from_noise(mean, log_std, &z)
}

/// `mean + exp(log_std) * z` and its log density.
pub fn action_from_noise(mean: &[f64], log_std: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
    if mean.len() != log_std.len() || mean.len() != z.len() {
        return Err(Error::contract("mean, log_std and noise must have equal length"));
    }
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .zip(z)
        .map(|((m, l), z)| m + l.exp() * z)
        .collect();
    let lp = gaussian_log_prob(mean, log_std, &action)?;
    Ok((action, lp))
}

/// Diagonal Gaussian log density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> Result<f64> {
    if mean.len() != log_std.len() || mean.len() != action.len() {
        return Err(Error::contract("mean, log_std and action must have equal length"));
    }
    Ok(mean
        .iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let z = (a - m) * (-l).exp();
            -0.5 * z * z - l - 0.5 * LOG_2PI
        })
        .sum())
}

/// Gradients of the log density w.r.t. mean and log std.
pub fn gaussian_log_prob_grads(
    mean: &[f64],
    log_std: &[f64],
    action: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gm = Vec::with_capacity(mean.len());
    let mut gs = Vec::with_capacity(mean.len());
    for ((m, l), a) in mean.iter().zip(log_std).zip(action) {
        let inv_var = (-2.0 * l).exp();
        let d = a - m;
        gm.push(d * inv_var);
        gs.push(d * d * inv_var - 1.0);
    }
    (gm, gs)
}

/// Differential entropy of the diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| l + 0.5 * (LOG_2PI + 1.0)).sum()
}

/// Critic: MLP with scalar output and no dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    trunk: Mlp,
}

impl ValueNet {
    pub fn new(trunk: Mlp) -> Result<Self> {
        if trunk.output_dim() != 1 {
            return Err(Error::contract("value network must have exactly one output"));
        }
        Ok(Self { trunk })
    }

    pub fn init(sizes: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        Self::new(Mlp::init(sizes, activation, 1.0, rng)?)
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn num_params(&self) -> usize {
        self.trunk.params().len()
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.trunk.forward(obs)?[0])
    }

    pub fn forward_tape(&self, obs: &[f64], tape: &mut Tape) -> Result<f64> {
        self.trunk.forward_tape(obs, None, tape)?;
        Ok(tape.output[0])
    }

    pub fn backward(&self, tape: &Tape, grad_value: f64, grads: &mut [f64]) -> Result<()> {
        self.trunk.backward(tape, &[grad_value], grads)
    }

    /// Values of `rows` stacked observations.
    pub fn forward_batch(&self, obs: &[f64], rows: usize, tape: &mut BatchTape) -> Result<()> {
        self.trunk.forward_batch(obs, rows, None, tape)
    }

    pub fn backward_batch(&self, tape: &BatchTape, grad_values: &[f64], grads: &mut [f64]) -> Result<()> {
        self.trunk.backward_batch(tape, grad_values, grads)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   magic      8 bytes  "RLDRPNET"
//   version    u32
//   kind       u8       0 = policy, 1 = value
//   activation u8
//   n_sizes    u32, then n_sizes x u32
//   position   u32
//   rolldrop_p f64
//   train_p    f64
//   n_params   u64, then n_params x f64 (layer weights row-major, biases,
//                                        then log_std for a policy)
//
// All integers and floats little-endian.

const NET_MAGIC: &[u8; 8] = b"RLDRPNET";
pub const NET_FORMAT_VERSION: u32 = 1;

/// A deserialised checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Policy(PolicyNet),
    Value(ValueNet),
}

fn write_header(
    out: &mut Vec<u8>,
    kind: u8,
    trunk: &Mlp,
    dropout: Option<DropoutSpec>,
) {
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&NET_FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.push(trunk.activation().code());
    out.extend_from_slice(&(trunk.sizes().len() as u32).to_le_bytes());
    for &s in trunk.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    let d = dropout.unwrap_or(DropoutSpec {
        position: 0,
        rolldrop_p: 0.0,
        train_p: 0.0,
    });
    out.extend_from_slice(&(d.position as u32).to_le_bytes());
    out.extend_from_slice(&d.rolldrop_p.to_le_bytes());
    out.extend_from_slice(&d.train_p.to_le_bytes());
}

fn write_params(out: &mut Vec<u8>, params: &[f64]) {
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

pub fn serialize_policy(net: &PolicyNet) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, 0, &net.trunk, Some(net.dropout));
    write_params(&mut out, &net.flat_params());
    out
}

pub fn serialize_value(net: &ValueNet) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, 1, &net.trunk, None);
    write_params(&mut out, net.trunk.params());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated payload: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_net(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != NET_MAGIC {
        return Err(Error::Corrupt("not a network checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != NET_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: NET_FORMAT_VERSION,
        });
    }
    let kind = r.u8()?;
    let activation = Activation::from_code(r.u8()?)?;
    let n_sizes = r.u32()? as usize;
    if n_sizes > 64 {
        return Err(Error::Corrupt(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| r.u32().map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let dropout = DropoutSpec {
        position: r.u32()? as usize,
        rolldrop_p: r.f64()?,
        train_p: r.f64()?,
    };
    let n_params = r.u64()? as usize;
    let mut trunk = Mlp::zeros(&sizes, activation).map_err(|e| Error::Corrupt(e.to_string()))?;
    let extra = if kind == 0 { trunk.output_dim() } else { 0 };
    if n_params != trunk.params().len() + extra {
        return Err(Error::Corrupt(format!(
            "parameter count {n_params} does not match layer sizes {sizes:?}"
        )));
    }
    let params = (0..n_params)
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after parameters".into()));
    }
    let n = trunk.params().len();
    trunk.params_mut().copy_from_slice(&params[..n]);
    match kind {
        0 => Ok(Checkpoint::Policy(PolicyNet::new(
            trunk,
            params[n..].to_vec(),
            dropout,
        )?)),
        1 => Ok(Checkpoint::Value(ValueNet::new(trunk)?)),
        k => Err(Error::Corrupt(format!("unknown network kind {k}"))),
    }
}

pub fn save_policy(path: &std::path::Path, net: &PolicyNet) -> Result<()> {
    std::fs::write(path, serialize_policy(net)).map_err(|e| Error::io(path, e))
}

pub fn save_value(path: &std::path::Path, net: &ValueNet) -> Result<()> {
    std::fs::write(path, serialize_value(net)).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &std::path::Path) -> Result<PolicyNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match deserialize_net(&bytes)? {
        Checkpoint::Policy(p) => Ok(p),
        Checkpoint::Value(_) => Err(Error::Corrupt(format!(
            "{} holds a value network, expected a policy",
            path.display()
        ))),
    }
}

pub fn load_value(path: &std::path::Path) -> Result<ValueNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match deserialize_net(&bytes)? {
        Checkpoint::Value(v) => Ok(v),
        Checkpoint::Policy(_) => Err(Error::Corrupt(format!(
            "{} holds a policy, expected a value network",
            path.display()
        ))),
    }
}
