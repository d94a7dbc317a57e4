//! Batched execution of per-sample derivative networks.
//!
//! Every sample in a batch owns a full parameter vector for the derivative
//! network. The three execution modes produce bit-identical outputs and
//! gradients; they differ only in how parameters reach the compute kernels:
//!
//! - `NonVectorized` rebuilds per-sample weight vectors every call, sample by
//!   sample, the way one would construct a fresh network per sample.
//! - `CopyBased` gathers each parameter segment into a freshly allocated
//!   per-segment block every call.
//! - `ReferenceBased` refreshes one persistent buffer in place and reads
//!   weights through precomputed segment offsets; after the first call it
//!   performs no allocation for weights or activations.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use crate::tensor::{Array, CustomOp, Tape, TensorError, Var};

/// Architecture of the decoded derivative network: `depth` linear layers of
/// `width` hidden units mapping state to state derivative, with layer
/// normalization before each hidden activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivNetSpec {
    pub state_dim: usize,
    pub depth: usize,
    pub width: usize,
}

impl DerivNetSpec {
    pub fn new(state_dim: usize, depth: usize, width: usize) -> Self {
        assert!(depth >= 2, "derivative net needs at least two layers");
        Self {
            state_dim,
            depth,
            width,
        }
    }
}

/// One contiguous span of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Input dimension for weight matrices, 1 for vectors.
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerSegs {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
    in_dim: usize,
    out_dim: usize,
    hidden: bool,
}

/// Deterministic segment map over `[0, m)`: per layer weight, bias, then
/// norm scale and shift for hidden layers.
#[derive(Debug, Clone)]
pub struct Layout {
    spec: DerivNetSpec,
    segments: Vec<Segment>,
    layers: Vec<LayerSegs>,
    m: usize,
}

pub fn build_layout(spec: &DerivNetSpec) -> Layout {
    let mut segments = Vec::new();
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut push = |segments: &mut Vec<Segment>, name: String, rows: usize, cols: usize| {
        let len = rows * cols;
        let seg = Segment {
            name,
            offset,
            len,
            rows,
            cols,
        };
        offset += len;
        segments.push(seg);
        segments.len() - 1
    };
    for l in 0..spec.depth {
        let in_dim = if l == 0 { spec.state_dim } else { spec.width };
        let out_dim = if l == spec.depth - 1 {
            spec.state_dim
        } else {
            spec.width
        };
        let hidden = l != spec.depth - 1;
        let w = push(&mut segments, format!("l{l}.w"), in_dim, out_dim);
        let b = push(&mut segments, format!("l{l}.b"), 1, out_dim);
        let (ln_g, ln_b) = if hidden {
            (
                push(&mut segments, format!("l{l}.ln.g"), 1, out_dim),
                push(&mut segments, format!("l{l}.ln.b"), 1, out_dim),
            )
        } else {
            (usize::MAX, usize::MAX)
        };
        layers.push(LayerSegs {
            w,
            b,
            ln_g,
            ln_b,
            in_dim,
            out_dim,
            hidden,
        });
    }
    Layout {
        spec: *spec,
        segments,
        layers,
        m: offset,
    }
}

impl Layout {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spec(&self) -> &DerivNetSpec {
        &self.spec
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
}

const LN_EPS: f64 = 1e-5;

// ---- shared kernels ------------------------------------------------------
//
// Every mode funnels through these functions, so outputs and gradients are
// bit-identical by construction: the accumulation order never depends on
// where the weights are stored. On x86-64 the same loops are additionally
// compiled for AVX2 and picked at runtime; Rust performs no float
// contraction, so both code paths produce identical bits.

macro_rules! simd_dispatch {
    ($(fn $name:ident($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block)*) => {
        $(
            #[inline(always)]
            fn $name($($arg: $ty),*) $(-> $ret)? {
                #[cfg(target_arch = "x86_64")]
                {
                    #[target_feature(enable = "avx2")]
                    unsafe fn avx2($($arg: $ty),*) $(-> $ret)? $body
                    if std::arch::is_x86_feature_detected!("avx2") {
                        return unsafe { avx2($($arg),*) };
                    }
                }
                $body
            }
        )*
    };
}

simd_dispatch! {

fn linear_forward(h: &[f64], w: &[f64], b: &[f64], z: &mut [f64]) {
    z.copy_from_slice(b);
    let out = z.len();
    for (k, &hk) in h.iter().enumerate() {
        let row = &w[k * out..(k + 1) * out];
        for (zj, &wkj) in z.iter_mut().zip(row) {
            *zj += hk * wkj;
        }
    }
}

fn ln_relu_forward(z: &[f64], g: &[f64], s: &[f64], h: &mut [f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..z.len() {
        let xhat = (z[j] - mu) * inv;
        let a = g[j] * xhat + s[j];
        // Keep NaN flowing so divergence stays visible downstream.
        h[j] = if a > 0.0 || a.is_nan() { a } else { 0.0 };
    }
    (mu, var)
}

}

simd_dispatch! {

fn ln_relu_backward(
    z: &[f64],
    mu: f64,
    var: f64,
    g: &[f64],
    s: &[f64],
    dh: &[f64],
    dz: &mut [f64],
    dg: &mut [f64],
    ds: &mut [f64],
) {
    // Adjoint of `ln_relu_forward`: incoming adjoint in `dh`, adjoint w.r.t.
    // the pre-norm activations written to `dz`.
    let n = z.len();
    let nf = n as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let mut sum_dxh = 0.0;
    let mut sum_dxh_xh = 0.0;
    for j in 0..n {
        let xhat = (z[j] - mu) * inv;
        let active = g[j] * xhat + s[j] > 0.0;
        let da = if active { dh[j] } else { 0.0 };
        dg[j] += da * xhat;
        ds[j] += da;
        let dxh = da * g[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xhat;
        dz[j] = dxh;
    }
    for j in 0..n {
        let xhat = (z[j] - mu) * inv;
        dz[j] = inv * (dz[j] - sum_dxh / nf - xhat * sum_dxh_xh / nf);
    }
}

fn linear_backward(
    h: &[f64],
    w: &[f64],
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dh: Option<&mut [f64]>,
) {
    // Adjoint of `linear_forward` w.r.t. parameters and, optionally, input.
    let out = dz.len();
    for (k, &hk) in h.iter().enumerate() {
        let row = &mut dw[k * out..(k + 1) * out];
        for (r, &dzj) in row.iter_mut().zip(dz) {
            *r += hk * dzj;
        }
    }
    for (dbj, &dzj) in db.iter_mut().zip(dz) {
        *dbj += dzj;
    }
    if let Some(dh) = dh {
        for (k, dhk) in dh.iter_mut().enumerate() {
            let row = &w[k * out..(k + 1) * out];
            let mut acc = 0.0;
            for (&wkj, &dzj) in row.iter().zip(dz) {
                acc += wkj * dzj;
            }
            *dhk = acc;
        }
    }
}

}

// ---- execution modes -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    NonVectorized,
    CopyBased,
    ReferenceBased,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [
        ExecMode::NonVectorized,
        ExecMode::CopyBased,
        ExecMode::ReferenceBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::NonVectorized => "non_vectorized",
            ExecMode::CopyBased => "copy_based",
            ExecMode::ReferenceBased => "reference_based",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the kernels read each sample's parameter segments from.
enum WeightsView<'a> {
    /// The persistent injection buffer; sample `i`'s segment at `i*m + offset`.
    Buffer(&'a [f64]),
    /// Per-segment blocks handed in as op inputs; sample `i` at `i*len`.
    InputBlocks(&'a [&'a Array]),
    /// Freshly gathered per-sample vectors: `per[i][segment]`.
    Gathered(&'a [Vec<Vec<f64>>]),
}

impl<'a> WeightsView<'a> {
    fn seg(&self, layout: &Layout, sample: usize, seg_index: usize) -> &'a [f64] {
        let seg = &layout.segments[seg_index];
        match self {
            WeightsView::Buffer(buf) => {
                let base = sample * layout.m + seg.offset;
                &buf[base..base + seg.len]
            }
            WeightsView::InputBlocks(blocks) => {
                &blocks[seg_index].data()[sample * seg.len..(sample + 1) * seg.len]
            }
            WeightsView::Gathered(per) => &per[sample][seg_index],
        }
    }
}

/// Where per-sample parameter gradients accumulate.
enum GradStore {
    /// Dense accumulation straight into the outgoing adjoint buffer.
    Direct(Vec<f64>),
    /// One block per segment, returned as the segment inputs' adjoints.
    Blocks(Vec<Vec<f64>>),
    /// Per-sample vectors, scattered into a dense dF at the end.
    PerSample(Vec<Vec<Vec<f64>>>),
}

impl GradStore {
    /// Mutable slices for two segments of one sample, `ia < ib` in layout order.
    fn pair_mut(
        &mut self,
        layout: &Layout,
        sample: usize,
        ia: usize,
        ib: usize,
    ) -> (&mut [f64], &mut [f64]) {
        debug_assert!(ia < ib);
        let (sa, sb) = (&layout.segments[ia], &layout.segments[ib]);
        match self {
            GradStore::Direct(buf) => {
                let base = sample * layout.m;
                let (left, right) = buf.split_at_mut(base + sb.offset);
                (
                    &mut left[base + sa.offset..base + sa.offset + sa.len],
                    &mut right[..sb.len],
                )
            }
            GradStore::Blocks(blocks) => {
                let (left, right) = blocks.split_at_mut(ib);
                (
                    &mut left[ia][sample * sa.len..(sample + 1) * sa.len],
                    &mut right[0][sample * sb.len..(sample + 1) * sb.len],
                )
            }
            GradStore::PerSample(per) => {
                let (left, right) = per[sample].split_at_mut(ib);
                (&mut left[ia][..], &mut right[0][..])
            }
        }
    }
}

#[derive(Default)]
struct Saved {
    /// Post-activation inputs to layer `l+1`, per hidden layer: `B*T*width`.
    hidden: Vec<Vec<f64>>,
    /// Pre-norm linear outputs per hidden layer: `B*T*width`.
    z: Vec<Vec<f64>>,
    /// Row statistics per hidden layer: `B*T` each.
    mu: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
    cols: usize,
}

/// One tape node's worth of derivative-network execution.
///
/// Input conventions by mode:
/// - `ReferenceBased`: `[F (B,m), X]`, weights served from the persistent
///   injection buffer refreshed in place each call.
/// - `CopyBased`: `[seg_0 (B,len_0), .., seg_{M-1}, X]`, the segment blocks
///   materialized as slice nodes by the caller each call.
/// - `NonVectorized`: `[F (1,m), X (1,..)]`, a freshly constructed
///   single-sample network.
pub struct HyperExec {
    layout: Layout,
    mode: ExecMode,
    batch: usize,
    buffer: Vec<f64>,
    gathered: Vec<Vec<Vec<f64>>>,
    saved: Saved,
    calls: u64,
}

impl HyperExec {
    pub fn new(layout: Layout, mode: ExecMode, batch: usize) -> Self {
        let persistent = matches!(mode, ExecMode::ReferenceBased);
        let cap = if persistent { batch * layout.m() } else { 0 };
        Self {
            layout,
            mode,
            batch,
            buffer: vec![0.0; cap],
            gathered: Vec::new(),
            saved: Saved::default(),
            calls: 0,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Identity probe for the injection buffer.
    pub fn buffer_ptr(&self) -> *const f64 {
        self.buffer.as_ptr()
    }

    pub fn buffer_capacity(&self) -> usize {
        self.buffer.capacity()
    }

    fn n_weight_inputs(&self) -> usize {
        match self.mode {
            ExecMode::CopyBased => self.layout.segments.len(),
            _ => 1,
        }
    }

    fn check_x(&self, inputs: &[&Array]) -> Result<(usize, usize), TensorError> {
        let x = inputs[self.n_weight_inputs()];
        let (b, cols) = x_dims(x, self.layout.spec.state_dim)?;
        if b != self.batch {
            return Err(TensorError::Invalid {
                op: "apply_batched",
                msg: format!("state batch {b} differs from configured {}", self.batch),
            });
        }
        Ok((b, cols))
    }

    fn prepare_weights(&mut self, inputs: &[&Array]) -> Result<(), TensorError> {
        let m = self.layout.m;
        match self.mode {
            ExecMode::ReferenceBased => {
                let f = inputs[0];
                if f.shape() != [self.batch, m] {
                    return Err(TensorError::Invalid {
                        op: "apply_batched",
                        msg: format!(
                            "function vectors {:?} do not match layout m={m} batch={}",
                            f.shape(),
                            self.batch
                        ),
                    });
                }
                // In-place refresh of the fixed storage; contents are fully
                // overwritten every call.
                self.buffer.copy_from_slice(f.data());
            }
            ExecMode::CopyBased => {
                for (seg, block) in self.layout.segments.iter().zip(inputs) {
                    if block.len() != self.batch * seg.len {
                        return Err(TensorError::Invalid {
                            op: "apply_batched",
                            msg: format!(
                                "segment block `{}` has {} values, expected {}",
                                seg.name,
                                block.len(),
                                self.batch * seg.len
                            ),
                        });
                    }
                }
            }
            ExecMode::NonVectorized => {
                let f = inputs[0];
                if f.shape() != [self.batch, m] {
                    return Err(TensorError::Invalid {
                        op: "apply_batched",
                        msg: format!(
                            "function vectors {:?} do not match layout m={m} batch={}",
                            f.shape(),
                            self.batch
                        ),
                    });
                }
                // Sample-by-sample network construction: each sample gets its
                // own freshly allocated parameter vectors.
                let mut per_sample = Vec::with_capacity(self.batch);
                for i in 0..self.batch {
                    let layout = build_layout(&self.layout.spec);
                    let mut segs = Vec::with_capacity(layout.segments.len());
                    for seg in &layout.segments {
                        let base = i * m + seg.offset;
                        segs.push(f.data()[base..base + seg.len].to_vec());
                    }
                    per_sample.push(segs);
                }
                self.gathered = per_sample;
            }
        }
        Ok(())
    }

    fn prepare_saved(&mut self, cols: usize) {
        let spec = self.layout.spec;
        let hidden_layers = spec.depth - 1;
        let rows = self.batch * cols;
        let reuse = matches!(self.mode, ExecMode::ReferenceBased);
        if !reuse {
            self.saved = Saved::default();
        }
        // Forward fully overwrites every slot it later reads, so the buffers
        // only need sizing, not zeroing.
        let fit = |v: &mut Vec<Vec<f64>>, n: usize, len: usize| {
            v.resize_with(n, Vec::new);
            for buf in v.iter_mut() {
                if buf.len() != len {
                    buf.resize(len, 0.0);
                }
            }
        };
        fit(&mut self.saved.hidden, hidden_layers, rows * spec.width);
        fit(&mut self.saved.z, hidden_layers, rows * spec.width);
        fit(&mut self.saved.mu, hidden_layers, rows);
        fit(&mut self.saved.var, hidden_layers, rows);
        self.saved.cols = cols;
    }

}

fn x_dims(x: &Array, d: usize) -> Result<(usize, usize), TensorError> {
    match x.shape() {
        [b, dd] if *dd == d => Ok((*b, 1)),
        [b, t, dd] if *dd == d => Ok((*b, *t)),
        other => Err(TensorError::Invalid {
            op: "apply_batched",
            msg: format!("state input shape {other:?} incompatible with d={d}"),
        }),
    }
}

impl CustomOp for HyperExec {
    fn name(&self) -> &'static str {
        "deriv_net_batched"
    }

    fn forward(&mut self, inputs: &[&Array]) -> Result<Array, TensorError> {
        let (_, cols) = self.check_x(inputs)?;
        self.prepare_weights(inputs)?;
        self.prepare_saved(cols);
        self.calls += 1;

        let spec = self.layout.spec;
        let d = spec.state_dim;
        let w = spec.width;
        let x = inputs[self.n_weight_inputs()];
        let mut out = Array::zeros(x.shape());
        let Self {
            layout,
            mode,
            batch,
            buffer,
            gathered,
            saved,
            ..
        } = self;
        let batch = *batch;
        let weights = match mode {
            ExecMode::ReferenceBased => WeightsView::Buffer(buffer),
            ExecMode::CopyBased => WeightsView::InputBlocks(&inputs[..layout.segments.len()]),
            ExecMode::NonVectorized => WeightsView::Gathered(gathered),
        };
        for i in 0..batch {
            for (l, layer) in layout.layers.iter().enumerate() {
                let wseg = weights.seg(layout, i, layer.w);
                let bseg = weights.seg(layout, i, layer.b);
                if layer.hidden {
                    let g = weights.seg(layout, i, layer.ln_g);
                    let s = weights.seg(layout, i, layer.ln_b);
                    // The linear output and activation land straight in the
                    // saved stores; they double as forward scratch.
                    let (before, rest) = saved.hidden.split_at_mut(l);
                    let z_l = &mut saved.z[l];
                    let h_l = &mut rest[0];
                    for t in 0..cols {
                        let row = i * cols + t;
                        let h_prev: &[f64] = if l == 0 {
                            &x.data()[row * d..(row + 1) * d]
                        } else {
                            &before[l - 1][row * w..row * w + layer.in_dim]
                        };
                        let z_row = &mut z_l[row * w..row * w + layer.out_dim];
                        linear_forward(h_prev, wseg, bseg, z_row);
                        let h_row = &mut h_l[row * w..row * w + layer.out_dim];
                        let (mu, var) = ln_relu_forward(z_row, g, s, h_row);
                        saved.mu[l][row] = mu;
                        saved.var[l][row] = var;
                    }
                } else {
                    for t in 0..cols {
                        let row = i * cols + t;
                        let h_prev: &[f64] = if l == 0 {
                            &x.data()[row * d..(row + 1) * d]
                        } else {
                            &saved.hidden[l - 1][row * w..row * w + layer.in_dim]
                        };
                        let out_row = &mut out.data_mut()[row * d..(row + 1) * d];
                        linear_forward(h_prev, wseg, bseg, out_row);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, inputs: &[&Array], adjoint: &Array, needs: &[bool]) -> Vec<Option<Array>> {
        let spec = self.layout.spec;
        let d = spec.state_dim;
        let w = spec.width;
        let cols = self.saved.cols;
        let n_weight_inputs = self.n_weight_inputs();
        let x = inputs[n_weight_inputs];
        let wrt_x = needs[n_weight_inputs];
        let mut dx = wrt_x.then(|| Array::zeros(x.shape()));

        let mut store = match self.mode {
            // Dense accumulation straight into the adjoint that leaves the op.
            ExecMode::ReferenceBased => GradStore::Direct(vec![0.0; self.batch * self.layout.m]),
            ExecMode::CopyBased => GradStore::Blocks(
                self.layout
                    .segments
                    .iter()
                    .map(|seg| vec![0.0; self.batch * seg.len])
                    .collect(),
            ),
            ExecMode::NonVectorized => GradStore::PerSample(
                (0..self.batch)
                    .map(|_| {
                        self.layout
                            .segments
                            .iter()
                            .map(|seg| vec![0.0; seg.len])
                            .collect()
                    })
                    .collect(),
            ),
        };

        let Self {
            layout,
            mode,
            batch,
            buffer,
            gathered,
            saved,
            ..
        } = self;
        let batch = *batch;
        let weights = match mode {
            ExecMode::ReferenceBased => WeightsView::Buffer(buffer),
            ExecMode::CopyBased => WeightsView::InputBlocks(&inputs[..layout.segments.len()]),
            ExecMode::NonVectorized => WeightsView::Gathered(gathered),
        };
        let m = layout.m;
        // Adjoint planes for one sample: dz against the current layer's
        // output per column, dh against its input.
        let plane = w.max(d);
        let mut dz = vec![0.0; cols * plane];
        let mut dh = vec![0.0; cols * plane];
        for i in 0..batch {
            for t in 0..cols {
                let row = i * cols + t;
                dz[t * plane..t * plane + d]
                    .copy_from_slice(&adjoint.data()[row * d..(row + 1) * d]);
            }
            for (l, layer) in layout.layers.iter().enumerate().rev() {
                let want_dh = l > 0 || wrt_x;
                let wseg = weights.seg(layout, i, layer.w);
                {
                    let (dwseg, dbseg) = store.pair_mut(layout, i, layer.w, layer.b);
                    for t in 0..cols {
                        let row = i * cols + t;
                        let h_in: &[f64] = if l == 0 {
                            &x.data()[row * d..(row + 1) * d]
                        } else {
                            &saved.hidden[l - 1][row * w..row * w + layer.in_dim]
                        };
                        linear_backward(
                            h_in,
                            wseg,
                            &dz[t * plane..t * plane + layer.out_dim],
                            dwseg,
                            dbseg,
                            want_dh.then(|| &mut dh[t * plane..t * plane + layer.in_dim]),
                        );
                    }
                }
                if l == 0 {
                    if let Some(dxa) = dx.as_mut() {
                        for t in 0..cols {
                            let row = i * cols + t;
                            dxa.data_mut()[row * d..(row + 1) * d]
                                .copy_from_slice(&dh[t * plane..t * plane + d]);
                        }
                    }
                } else {
                    // dh holds the adjoint of hidden layer l-1's output;
                    // push it through that layer's LN + ReLU.
                    let prev = &layout.layers[l - 1];
                    let g = weights.seg(layout, i, prev.ln_g);
                    let s = weights.seg(layout, i, prev.ln_b);
                    let (dgseg, dsseg) = store.pair_mut(layout, i, prev.ln_g, prev.ln_b);
                    for t in 0..cols {
                        let row = i * cols + t;
                        let z_row = &saved.z[l - 1][row * w..row * w + prev.out_dim];
                        let mu = saved.mu[l - 1][row];
                        let var = saved.var[l - 1][row];
                        ln_relu_backward(
                            z_row,
                            mu,
                            var,
                            g,
                            s,
                            &dh[t * plane..t * plane + prev.out_dim],
                            &mut dz[t * plane..t * plane + prev.out_dim],
                            dgseg,
                            dsseg,
                        );
                    }
                }
            }
        }

        // Hand the parameter adjoints back in each mode's input shape.
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(inputs.len());
        match store {
            GradStore::Direct(buf) => {
                grads.push(needs[0].then(|| Array::from_vec(&[batch, m], buf)));
            }
            GradStore::Blocks(blocks) => {
                for (seg, block) in layout.segments.iter().zip(blocks) {
                    grads.push(Some(Array::from_vec(&[batch, seg.len], block)));
                }
            }
            GradStore::PerSample(per) => {
                let mut df = Array::zeros(&[batch, m]);
                for (i, segs) in per.iter().enumerate() {
                    for (seg, grad) in layout.segments.iter().zip(segs) {
                        let base = i * m + seg.offset;
                        df.data_mut()[base..base + seg.len].copy_from_slice(grad);
                    }
                }
                grads.push(needs[0].then_some(df));
            }
        }
        grads.push(dx.filter(|_| wrt_x));
        grads
    }
}

/// One call site for batched derivative-network execution. Reference mode
/// keeps a persistent executor; the other modes rebuild their execution
/// state on every call, mirroring how stateless implementations behave.
pub struct ApplySite {
    layout: Layout,
    mode: ExecMode,
    batch: usize,
    exec: Option<Rc<RefCell<HyperExec>>>,
}

impl ApplySite {
    pub fn new(layout: Layout, mode: ExecMode, batch: usize) -> Self {
        let exec = matches!(mode, ExecMode::ReferenceBased)
            .then(|| Rc::new(RefCell::new(HyperExec::new(layout.clone(), mode, batch))));
        Self {
            layout,
            mode,
            batch,
            exec,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The persistent executor, present in reference mode only.
    pub fn exec(&self) -> Option<&Rc<RefCell<HyperExec>>> {
        self.exec.as_ref()
    }

    /// Applies per-sample derivative networks to per-sample states.
    /// `x` may be `(B, d)` or `(B, T, d)`; the output matches `x`.
    pub fn apply(&self, tape: &mut Tape, f: Var, x: Var) -> Result<Var, TensorError> {
        match self.mode {
            ExecMode::ReferenceBased => {
                let exec = self.exec.as_ref().expect("reference executor");
                tape.custom(exec.clone(), &[f, x])
            }
            ExecMode::CopyBased => {
                // Re-derive the parameter map and materialize every segment
                // as its own graph node, every call.
                let layout = build_layout(&self.layout.spec);
                let mut inputs = Vec::with_capacity(layout.segments.len() + 1);
                for seg in layout.segments() {
                    inputs.push(tape.slice(f, 1, seg.offset, seg.offset + seg.len)?);
                }
                inputs.push(x);
                let exec = Rc::new(RefCell::new(HyperExec::new(layout, self.mode, self.batch)));
                tape.custom(exec, &inputs)
            }
            ExecMode::NonVectorized => {
                // One freshly constructed network and one graph region per
                // sample, evaluated sequentially.
                let mut outs = Vec::with_capacity(self.batch);
                for i in 0..self.batch {
                    let fi = tape.slice(f, 0, i, i + 1)?;
                    let xi = tape.slice(x, 0, i, i + 1)?;
                    let exec = Rc::new(RefCell::new(HyperExec::new(
                        build_layout(&self.layout.spec),
                        self.mode,
                        1,
                    )));
                    outs.push(tape.custom(exec, &[fi, xi])?);
                }
                tape.concat(&outs, 0)
            }
        }
    }
}

/// Convenience wrapper matching the library's call style.
pub fn apply_batched(
    tape: &mut Tape,
    site: &ApplySite,
    f: Var,
    x: Var,
) -> Result<Var, TensorError> {
    site.apply(tape, f, x)
}

/// Plain single-network forward for inference-time integration.
pub struct DerivNetFn {
    layout: Layout,
    params: Vec<f64>,
}

impl DerivNetFn {
    pub fn new(layout: Layout, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), layout.m());
        Self { layout, params }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let spec = self.layout.spec;
        let w = spec.width.max(spec.state_dim);
        let mut a = vec![0.0; w];
        let mut b = vec![0.0; w];
        let mut cur: &mut [f64] = &mut a;
        let mut next: &mut [f64] = &mut b;
        let mut cur_len = spec.state_dim;
        cur[..cur_len].copy_from_slice(x);
        for layer in &self.layout.layers {
            let seg = |idx: usize| {
                let s = &self.layout.segments[idx];
                &self.params[s.offset..s.offset + s.len]
            };
            if layer.hidden {
                let mut z = vec![0.0; layer.out_dim];
                linear_forward(&cur[..cur_len], seg(layer.w), seg(layer.b), &mut z);
                let _ = ln_relu_forward(&z, seg(layer.ln_g), seg(layer.ln_b), &mut next[..layer.out_dim]);
                std::mem::swap(&mut cur, &mut next);
                cur_len = layer.out_dim;
            } else {
                linear_forward(&cur[..cur_len], seg(layer.w), seg(layer.b), out);
            }
        }
    }
}

// ---- benchmark ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub modes: Vec<ExecMode>,
    pub iterations: usize,
    pub batch: usize,
    /// State columns evaluated per sample each iteration.
    pub cols: usize,
    pub spec: DerivNetSpec,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: ExecMode::ALL.to_vec(),
            iterations: 200,
            batch: 32,
            cols: 1,
            spec: DerivNetSpec::new(2, 4, 16),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeTiming {
    pub mode: ExecMode,
    pub first_step_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub speedup_vs_non_vectorized: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub timings: Vec<ModeTiming>,
    pub iterations: usize,
    pub batch: usize,
    pub cols: usize,
    pub m: usize,
    pub cores: usize,
    pub arch: &'static str,
    pub debug_assertions: bool,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "derivative-network execution bench: {} iterations, batch {}, {} column(s), m={}",
            self.iterations, self.batch, self.cols, self.m
        )?;
        writeln!(
            f,
            "host: {} cores, arch {}, debug_assertions={}",
            self.cores, self.arch, self.debug_assertions
        )?;
        writeln!(
            f,
            "{:<18} {:>16} {:>22} {:>9}",
            "implementation", "first step (s)", "avg time +- std (s)", "speedup"
        )?;
        for t in &self.timings {
            let speedup = t
                .speedup_vs_non_vectorized
                .map(|s| format!("{s:.1}x"))
                .unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<18} {:>16.6} {:>13.6} +- {:.6} {:>9}",
                t.mode.name(),
                t.first_step_s,
                t.mean_s,
                t.std_s,
                speedup
            )?;
        }
        Ok(())
    }
}

impl BenchReport {
    /// Machine-readable rendering: one `key=value` record block per mode.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "iterations={}\nbatch={}\ncols={}\nm={}\ncores={}\narch={}\ndebug_assertions={}\n",
            self.iterations, self.batch, self.cols, self.m, self.cores, self.arch, self.debug_assertions
        ));
        for t in &self.timings {
            out.push_str(&format!(
                "mode={} first_step_s={:.9} avg_s={:.9} std_s={:.9} speedup={}\n",
                t.mode.name(),
                t.first_step_s,
                t.mean_s,
                t.std_s,
                t.speedup_vs_non_vectorized
                    .map(|s| format!("{s:.3}"))
                    .unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }

    pub fn timing(&self, mode: ExecMode) -> Option<&ModeTiming> {
        self.timings.iter().find(|t| t.mode == mode)
    }
}

/// Times forward+backward training iterations of `apply_batched` per mode.
/// The first step is reported separately; mean and std cover the rest.
pub fn bench(config: &BenchConfig) -> BenchReport {
    use crate::rng::Stream;
    assert!(config.iterations >= 10, "bench needs at least 10 iterations");

    let layout = build_layout(&config.spec);
    let m = layout.m();
    let mut rng = Stream::seed_from_u64(config.seed);
    let f_base: Vec<f64> = (0..config.batch * m).map(|_| 0.2 * rng.normal()).collect();
    let x_base: Vec<f64> = (0..config.batch * config.cols * config.spec.state_dim)
        .map(|_| rng.normal())
        .collect();

    let mut timings = Vec::new();
    let mut non_vec_mean = None;
    for &mode in &config.modes {
        let site = ApplySite::new(build_layout(&config.spec), mode, config.batch);
        let mut step_times = Vec::with_capacity(config.iterations);
        let mut f_values = f_base.clone();
        for iter in 0..config.iterations {
            // Perturb one entry so no mode can cache the previous injection.
            let idx = iter % f_values.len();
            f_values[idx] += 1e-9;
            let f_arr = Array::from_vec(&[config.batch, m], f_values.clone());
            let x_arr = Array::from_vec(
                &[config.batch, config.cols, config.spec.state_dim],
                x_base.clone(),
            );
            let start = Instant::now();
            let mut tape = Tape::new();
            tape.set_finite_check(false);
            let f_var = tape.leaf(f_arr);
            let x_var = tape.constant(x_arr);
            let out = apply_batched(&mut tape, &site, f_var, x_var).expect("bench forward");
            let loss = tape.sum(out).expect("bench loss");
            let grads = tape.backward(loss).expect("bench backward");
            debug_assert!(grads.get(f_var).is_some());
            step_times.push(start.elapsed().as_secs_f64());
        }
        let first_step_s = step_times[0];
        let rest = &step_times[1..];
        let mean_s = rest.iter().sum::<f64>() / rest.len() as f64;
        let std_s = (rest.iter().map(|t| (t - mean_s) * (t - mean_s)).sum::<f64>()
            / rest.len() as f64)
            .sqrt();
        if mode == ExecMode::NonVectorized {
            non_vec_mean = Some(mean_s);
        }
        timings.push(ModeTiming {
            mode,
            first_step_s,
            mean_s,
            std_s,
            speedup_vs_non_vectorized: None,
        });
    }
    if let Some(base) = non_vec_mean {
        for t in &mut timings {
            t.speedup_vs_non_vectorized = Some(base / t.mean_s);
        }
    }
    BenchReport {
        timings,
        iterations: config.iterations,
        batch: config.batch,
        cols: config.cols,
        m,
        cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        arch: std::env::consts::ARCH,
        debug_assertions: cfg!(debug_assertions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn layout_parameter_count_matches_hand_sum() {
        // Weights 2*16 + 16*16 + 16*16 + 16*2, biases 16+16+16+2, and three
        // pairs of norm parameters of 16 each.
        let layout = build_layout(&DerivNetSpec::new(2, 4, 16));
        assert_eq!(layout.m(), 722);
    }

    #[test]
    fn layout_segments_are_contiguous_and_exhaustive() {
        let layout = build_layout(&DerivNetSpec::new(3, 5, 32));
        let mut expected_offset = 0;
        for seg in layout.segments() {
            assert_eq!(seg.offset, expected_offset);
            assert!(seg.len > 0);
            expected_offset += seg.len;
        }
        assert_eq!(expected_offset, layout.m());
    }

    #[test]
    fn layout_is_deterministic() {
        let a = build_layout(&DerivNetSpec::new(2, 4, 16));
        let b = build_layout(&DerivNetSpec::new(2, 4, 16));
        assert_eq!(a.segments(), b.segments());
    }

    fn random_case(
        seed: u64,
        batch: usize,
        cols: usize,
        spec: DerivNetSpec,
    ) -> (Array, Array) {
        let layout = build_layout(&spec);
        let mut rng = Stream::seed_from_u64(seed);
        let f: Vec<f64> = (0..batch * layout.m()).map(|_| 0.3 * rng.normal()).collect();
        let x: Vec<f64> = (0..batch * cols * spec.state_dim)
            .map(|_| rng.normal())
            .collect();
        (
            Array::from_vec(&[batch, layout.m()], f),
            Array::from_vec(&[batch, cols, spec.state_dim], x),
        )
    }

    fn run_mode(mode: ExecMode, f: &Array, x: &Array, spec: DerivNetSpec) -> (Vec<f64>, Vec<f64>) {
        let batch = f.shape()[0];
        let site = ApplySite::new(build_layout(&spec), mode, batch);
        let mut tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let xv = tape.constant(x.clone());
        let out = apply_batched(&mut tape, &site, fv, xv).unwrap();
        // A non-uniform weighting makes gradient mismatches visible.
        let weights: Vec<f64> = (0..tape.value(out).len())
            .map(|i| 1.0 + (i % 7) as f64 * 0.25)
            .collect();
        let wshape = tape.value(out).shape().to_vec();
        let wvar = tape.constant(Array::from_vec(&wshape, weights));
        let prod = tape.mul(out, wvar).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(out).data().to_vec(),
            grads.get(fv).unwrap().data().to_vec(),
        )
    }

    #[test]
    fn all_modes_agree_bitwise_on_outputs_and_gradients() {
        let spec = DerivNetSpec::new(2, 4, 16);
        for seed in 0..20 {
            let (f, x) = random_case(seed, 5, 3, spec);
            let (out_ref, grad_ref) = run_mode(ExecMode::ReferenceBased, &f, &x, spec);
            for mode in [ExecMode::CopyBased, ExecMode::NonVectorized] {
                let (out, grad) = run_mode(mode, &f, &x, spec);
                assert_eq!(out.len(), out_ref.len());
                for (a, b) in out.iter().zip(&out_ref) {
                    assert_eq!(a.to_bits(), b.to_bits(), "output mismatch in {mode}");
                }
                for (a, b) in grad.iter().zip(&grad_ref) {
                    assert_eq!(a.to_bits(), b.to_bits(), "gradient mismatch in {mode}");
                }
            }
        }
    }

    #[test]
    fn single_sample_matches_plain_network() {
        let spec = DerivNetSpec::new(3, 4, 8);
        let (f, x) = random_case(42, 1, 1, spec);
        let (out, _) = run_mode(ExecMode::ReferenceBased, &f, &x, spec);
        let net = DerivNetFn::new(build_layout(&spec), f.data().to_vec());
        let mut expect = vec![0.0; 3];
        net.eval(&x.data()[..3], &mut expect);
        for (a, b) in out.iter().zip(&expect) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let spec = DerivNetSpec::new(2, 4, 16);
        let (f, x) = random_case(7, 6, 2, spec);
        let (out, _) = run_mode(ExecMode::ReferenceBased, &f, &x, spec);
        // Swap two samples and verify outputs swap with them.
        let m = build_layout(&spec).m();
        let mut f2 = f.data().to_vec();
        f2.swap_with_slice_ranges(0, m, 2 * m);
        let mut x2 = x.data().to_vec();
        x2.swap_with_slice_ranges(0, 4, 8);
        let f2 = Array::from_vec(&[6, m], f2);
        let x2 = Array::from_vec(&[6, 2, 2], x2);
        let (out2, _) = run_mode(ExecMode::ReferenceBased, &f2, &x2, spec);
        assert_eq!(&out[0..4], &out2[8..12]);
        assert_eq!(&out[8..12], &out2[0..4]);
        assert_eq!(&out[4..8], &out2[4..8]);
    }

    #[test]
    fn gradient_wrt_function_vectors_matches_finite_differences() {
        use crate::tensor::grad_check;
        let spec = DerivNetSpec::new(2, 3, 4);
        let (f, x) = random_case(11, 2, 2, spec);
        for mode in ExecMode::ALL {
            let report = grad_check(
                |tape, vars| {
                    let site = ApplySite::new(build_layout(&spec), mode, 2);
                    let xv = tape.constant(x.clone());
                    let out = apply_batched(tape, &site, vars[0], xv)?;
                    let sq = tape.mul(out, out)?;
                    tape.sum(sq)
                },
                &[f.clone()],
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(report.pass, "{mode}: max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn buffer_identity_is_stable_across_iterations() {
        let spec = DerivNetSpec::new(2, 4, 16);
        let site = ApplySite::new(build_layout(&spec), ExecMode::ReferenceBased, 4);
        let exec = site.exec().unwrap().clone();
        let ptr = exec.borrow().buffer_ptr();
        let cap = exec.borrow().buffer_capacity();
        for seed in 0..120 {
            let (f, x) = random_case(seed, 4, 1, spec);
            let mut tape = Tape::new();
            let fv = tape.leaf(f);
            let xv = tape.constant(x);
            let out = apply_batched(&mut tape, &site, fv, xv).unwrap();
            let loss = tape.sum(out).unwrap();
            tape.backward(loss).unwrap();
        }
        assert_eq!(exec.borrow().buffer_ptr(), ptr);
        assert_eq!(exec.borrow().buffer_capacity(), cap);
        assert_eq!(exec.borrow().calls(), 120);
    }

    #[test]
    fn width_mismatch_is_a_layout_error() {
        let spec = DerivNetSpec::new(2, 4, 16);
        let site = ApplySite::new(build_layout(&spec), ExecMode::ReferenceBased, 2);
        let mut tape = Tape::new();
        let f = tape.leaf(Array::zeros(&[2, 10]));
        let x = tape.constant(Array::zeros(&[2, 2]));
        assert!(apply_batched(&mut tape, &site, f, x).is_err());
    }

    trait SwapRanges {
        fn swap_with_slice_ranges(&mut self, a: usize, len: usize, b: usize);
    }
    impl SwapRanges for Vec<f64> {
        fn swap_with_slice_ranges(&mut self, a: usize, len: usize, b: usize) {
            for i in 0..len {
                self.swap(a + i, b + i);
            }
        }
    }
}
