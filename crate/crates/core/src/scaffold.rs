//! Gated scaffolds around a core, the layer stack and its classification head.
//!
//! Every scaffold maps width `q` to width `q`:
//!
//! ```text
//! out = (core(upper) ⊙ σ(W_g·lower)) W_outᵀ + b_out
//! ```
//!
//! where `upper`/`lower` depend on the kind:
//! MLP: `upper = W_pre u + b_pre`, `lower = u`;
//! H3: `upper = u + shift_s(u)`, `lower = W_low u + b_low`;
//! Mamba: `upper = conv(W_pre u + b_pre)`, `lower = silu(W_low u + b_low)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::exec::ExecOptions;
use crate::learn::tape::{sigmoid, Unary};
use crate::learn::{ParamGroup, ParamStore, Tape, Var};
use crate::models::{core_tape_forward, CoreConfig, CoreModel};
use crate::rng::{self, Rng};
use crate::system::Sequence;

pub const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaffoldKind {
    #[default]
    Mlp,
    H3,
    Mamba,
}

impl ScaffoldKind {
    pub const ALL: [ScaffoldKind; 3] = [ScaffoldKind::Mlp, ScaffoldKind::H3, ScaffoldKind::Mamba];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateNonlinearity {
    #[default]
    Sigmoid,
    Softmax,
    Silu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Mean,
    Last,
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = v.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

fn activate(v: ArrayView1<'_, f64>, nl: GateNonlinearity) -> Array1<f64> {
    match nl {
        GateNonlinearity::Sigmoid => v.mapv(sigmoid),
        GateNonlinearity::Silu => v.mapv(silu),
        GateNonlinearity::Softmax => softmax(v),
    }
}

/// `x1 ⊙ σ(W x2)`.
pub fn gate(x1: ArrayView1<'_, f64>, x2: ArrayView1<'_, f64>, w: ArrayView2<'_, f64>, nl: GateNonlinearity) -> Result<Array1<f64>> {
    let p = x1.len();
    if x2.len() != p || w.dim() != (p, p) {
        return Err(SsmError::shape("gate", format!("{p}, {p}, {p}x{p}"), format!("{}, {}, {:?}", p, x2.len(), w.dim())));
    }
    Ok(&x1 * &activate(w.dot(&x2).view(), nl))
}

/// `y(k) = u(k − s)`, zero-filled.
pub fn time_shift(u: &Sequence, s: usize) -> Sequence {
    let (t, q) = (u.len(), u.channels());
    let mut y = Array2::zeros((t, q));
    if s < t {
        y.slice_mut(s![s.., ..]).assign(&u.data().slice(s![..t - s, ..]));
    }
    Sequence::new(y).expect("shift keeps finite values")
}

/// Per-channel causal FIR, `y(k, c) = Σ_w kernels[c, w]·u(k − w, c)`.
pub fn causal_conv1d(u: &Sequence, kernels: ArrayView2<'_, f64>) -> Result<Sequence> {
    let (q, width) = kernels.dim();
    if q != u.channels() || width == 0 {
        return Err(SsmError::shape("causal_conv1d kernels", format!("{}x(≥1)", u.channels()), format!("{q}x{width}")));
    }
    let ud = u.data();
    let y = Array2::from_shape_fn((u.len(), q), |(k, c)| {
        (0..width.min(k + 1)).map(|w| kernels[[c, w]] * ud[[k - w, c]]).sum()
    });
    Sequence::new(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaffoldConfig {
    pub kind: ScaffoldKind,
    pub gate: GateNonlinearity,
    /// Mamba causal-conv width.
    pub conv_width: usize,
    /// H3 time shift.
    pub shift: usize,
    /// Skip the gate: `σ ≡ 1`.
    pub gate_open: bool,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        ScaffoldConfig {
            kind: ScaffoldKind::Mlp,
            gate: GateNonlinearity::Sigmoid,
            conv_width: 4,
            shift: 1,
            gate_open: false,
        }
    }
}

impl ScaffoldConfig {
    pub fn new(kind: ScaffoldKind) -> Self {
        ScaffoldConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScaffoldKind::Mamba && self.conv_width == 0 {
            return Err(SsmError::InvalidArgument("conv_width must be ≥ 1".into()));
        }
        Ok(())
    }

    fn uses_pre(&self) -> bool {
        self.kind != ScaffoldKind::H3
    }

    fn uses_low(&self) -> bool {
        self.kind != ScaffoldKind::Mlp
    }
}

/// Scaffold weights. Matrices act on row vectors as `x Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaffold {
    pub cfg: ScaffoldConfig,
    pub w_pre: Array2<f64>,
    pub b_pre: Array1<f64>,
    pub w_low: Array2<f64>,
    pub b_low: Array1<f64>,
    /// `q × conv_width`, lag-major per channel.
    pub conv: Array2<f64>,
    pub w_gate: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

fn normal_matrix(r: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(r);
        z * std
    })
}

impl Scaffold {
    pub fn init(cfg: &ScaffoldConfig, q: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::substream(seed, "scaffold");
        let std = 1.0 / (q as f64).sqrt();
        let w = cfg.conv_width.max(1);
        Ok(Scaffold {
            cfg: cfg.clone(),
            w_pre: normal_matrix(&mut r, q, q, std),
            b_pre: Array1::zeros(q),
            w_low: normal_matrix(&mut r, q, q, std),
            b_low: Array1::zeros(q),
            conv: normal_matrix(&mut r, q, w, 1.0 / (w as f64).sqrt()),
            w_gate: normal_matrix(&mut r, q, q, std),
            w_out: normal_matrix(&mut r, q, q, std),
            b_out: Array1::zeros(q),
        })
    }

    /// Identity projections, a unit-impulse conv and an open gate: the
    /// scaffold reduces to the bare core (plus the H3 shift term).
    pub fn identity(cfg: &ScaffoldConfig, q: usize) -> Self {
        let mut conv = Array2::zeros((q, cfg.conv_width.max(1)));
        conv.column_mut(0).fill(1.0);
        Scaffold {
            cfg: ScaffoldConfig { gate_open: true, ..cfg.clone() },
            w_pre: Array2::eye(q),
            b_pre: Array1::zeros(q),
            w_low: Array2::eye(q),
            b_low: Array1::zeros(q),
            conv,
            w_gate: Array2::zeros((q, q)),
            w_out: Array2::eye(q),
            b_out: Array1::zeros(q),
        }
    }

    pub fn q(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let k = |n: &str| format!("{prefix}.{n}");
        let row = |v: &Array1<f64>| v.clone().insert_axis(Axis(0));
        let g = ParamGroup::Default;
        if self.cfg.uses_pre() {
            store.add(k("w_pre"), self.w_pre.clone(), g)?;
            store.add(k("b_pre"), row(&self.b_pre), g)?;
        }
        if self.cfg.uses_low() {
            store.add(k("w_low"), self.w_low.clone(), g)?;
            store.add(k("b_low"), row(&self.b_low), g)?;
        }
        if self.cfg.kind == ScaffoldKind::Mamba {
            store.add(k("conv"), self.conv.clone(), g)?;
        }
        if !self.cfg.gate_open {
            store.add(k("w_gate"), self.w_gate.clone(), g)?;
        }
        store.add(k("w_out"), self.w_out.clone(), g)?;
        store.add(k("b_out"), row(&self.b_out), g)
    }

    pub fn from_store(cfg: &ScaffoldConfig, q: usize, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut s = Scaffold::identity(cfg, q);
        s.cfg = cfg.clone();
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).map(|v| v.to_owned());
        let row = |n: &str| get(n).map(|v| v.row(0).to_owned());
        if cfg.uses_pre() {
            s.w_pre = get("w_pre")?;
            s.b_pre = row("b_pre")?;
        }
        if cfg.uses_low() {
            s.w_low = get("w_low")?;
            s.b_low = row("b_low")?;
        }
        if cfg.kind == ScaffoldKind::Mamba {
            s.conv = get("conv")?;
        }
        if !cfg.gate_open {
            s.w_gate = get("w_gate")?;
        }
        s.w_out = get("w_out")?;
        s.b_out = row("b_out")?;
        Ok(s)
    }
}

fn affine(u: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    u.dot(&w.t()) + b
}

/// Direct scaffold forward of one sequence around `core`.
pub fn scaffold_forward(
    sc: &Scaffold,
    core: impl Fn(&Sequence) -> Result<Sequence>,
    u: &Sequence,
) -> Result<Sequence> {
    if u.channels() != sc.q() {
        return Err(SsmError::shape("scaffold input", sc.q(), u.channels()));
    }
    let ud = u.data();
    let (upper, lower) = match sc.cfg.kind {
        ScaffoldKind::Mlp => (Sequence::new(affine(ud, &sc.w_pre, &sc.b_pre))?, ud.to_owned()),
        ScaffoldKind::H3 => {
            let up = &ud + &time_shift(u, sc.cfg.shift).data();
            (Sequence::new(up)?, affine(ud, &sc.w_low, &sc.b_low))
        }
        ScaffoldKind::Mamba => {
            let pre = Sequence::new(affine(ud, &sc.w_pre, &sc.b_pre))?;
            (causal_conv1d(&pre, sc.conv.view())?, affine(ud, &sc.w_low, &sc.b_low).mapv(silu))
        }
    };
    let y = core(&upper)?;
    if y.channels() != sc.q() || y.len() != u.len() {
        return Err(SsmError::shape("core output", format!("{}x{}", u.len(), sc.q()), format!("{}x{}", y.len(), y.channels())));
    }
    let mut g = y.into_data();
    if !sc.cfg.gate_open {
        let pre = lower.dot(&sc.w_gate.t());
        for (mut row, z) in g.rows_mut().into_iter().zip(pre.rows()) {
            row *= &activate(z, sc.cfg.gate);
        }
    }
    Sequence::new(affine(g.view(), &sc.w_out, &sc.b_out))
}

/// Tape counterpart of [`scaffold_forward`] on a `B·T × q` batch.
pub fn scaffold_tape_forward(
    cfg: &ScaffoldConfig,
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    u: Var,
    seq_len: usize,
    core: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let p = |tape: &mut Tape, n: &str| tape.param(store, &format!("{prefix}.{n}"));
    let aff = |tape: &mut Tape, x: Var, w: &str, b: &str| -> Result<Var> {
        let (w, b) = (p(tape, w)?, p(tape, b)?);
        let xw = tape.matmul_bt(x, w);
        Ok(tape.add(xw, b))
    };
    let (upper, lower) = match cfg.kind {
        ScaffoldKind::Mlp => (aff(tape, u, "w_pre", "b_pre")?, u),
        ScaffoldKind::H3 => {
            let sh = tape.shift(u, cfg.shift, seq_len);
            let up = tape.add(u, sh);
            (up, aff(tape, u, "w_low", "b_low")?)
        }
        ScaffoldKind::Mamba => {
            let pre = aff(tape, u, "w_pre", "b_pre")?;
            let k = tape.param(store, &format!("{prefix}.conv"))?;
            let kt = tape.transpose(k);
            let up = tape.causal_conv(pre, kt, seq_len);
            let lo = aff(tape, u, "w_low", "b_low")?;
            (up, tape.silu(lo))
        }
    };
    let y = core(tape, upper)?;
    let g = if cfg.gate_open {
        y
    } else {
        let wg = tape.param(store, &format!("{prefix}.w_gate"))?;
        let z = tape.matmul_bt(lower, wg);
        let s = match cfg.gate {
            GateNonlinearity::Sigmoid => tape.sigmoid(z),
            GateNonlinearity::Silu => tape.silu(z),
            GateNonlinearity::Softmax => tape.softmax_rows(z),
        };
        tape.mul(y, s)
    };
    let (wo, bo) = (
        tape.param(store, &format!("{prefix}.w_out"))?,
        tape.param(store, &format!("{prefix}.b_out"))?,
    );
    let o = tape.matmul_bt(g, wo);
    Ok(tape.add(o, bo))
}

/// Shape and options of a full classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub core: CoreConfig,
    pub layers: usize,
    pub scaffold: ScaffoldConfig,
    pub norm: bool,
    pub pool: Pool,
    pub vocab: usize,
    pub n_classes: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            core: CoreConfig::default(),
            layers: 1,
            scaffold: ScaffoldConfig::default(),
            norm: true,
            pool: Pool::Mean,
            vocab: 18,
            n_classes: 10,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        self.core.validate()?;
        self.scaffold.validate()?;
        if self.layers == 0 {
            return Err(SsmError::InvalidArgument("a stack needs at least one layer".into()));
        }
        if self.vocab == 0 || self.n_classes == 0 {
            return Err(SsmError::InvalidArgument("vocab and n_classes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.core.q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub norm_gain: Array1<f64>,
    pub scaffold: Scaffold,
    pub core: CoreModel,
}

/// `embed → L × (norm → scaffold(core) → residual) → pool → linear head`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub cfg: StackConfig,
    /// `V × q`
    pub embed: Array2<f64>,
    pub layers: Vec<Layer>,
    /// `n_classes × q`
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

fn rms_norm(x: ArrayView2<'_, f64>, gain: &Array1<f64>) -> Array2<f64> {
    let q = x.ncols() as f64;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / q + RMS_EPS).sqrt();
        row.zip_mut_with(gain, |v, g| *v *= r * g);
    }
    out
}

impl LayerStack {
    pub fn init(cfg: &StackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let q = cfg.q();
        let mut r = rng::substream(seed, "stack");
        let layers = (0..cfg.layers)
            .map(|i| {
                let ls = rng::derive_index(seed, i as u64);
                Ok(Layer {
                    norm_gain: Array1::ones(q),
                    scaffold: Scaffold::init(&cfg.scaffold, q, ls)?,
                    core: CoreModel::init(&cfg.core, rng::derive_seed(ls, "core"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerStack {
            cfg: cfg.clone(),
            embed: normal_matrix(&mut r, cfg.vocab, q, 1.0),
            layers,
            head_w: normal_matrix(&mut r, cfg.n_classes, q, 1.0 / (q as f64).sqrt()),
            head_b: Array1::zeros(cfg.n_classes),
        })
    }

    pub fn register(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        store.add("embed", self.embed.clone(), ParamGroup::Default)?;
        for (i, l) in self.layers.iter().enumerate() {
            if self.cfg.norm {
                store.add(format!("layer{i}.norm"), l.norm_gain.clone().insert_axis(Axis(0)), ParamGroup::Default)?;
            }
            l.scaffold.register(&mut store, &format!("layer{i}.scaffold"))?;
            l.core.register(&mut store, &format!("layer{i}.core"))?;
        }
        store.add("head.w", self.head_w.clone(), ParamGroup::Default)?;
        store.add("head.b", self.head_b.clone().insert_axis(Axis(0)), ParamGroup::Default)?;
        Ok(store)
    }

    pub fn from_store(cfg: &StackConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let q = cfg.q();
        let layers = (0..cfg.layers)
            .map(|i| {
                Ok(Layer {
                    norm_gain: if cfg.norm {
                        store.get(&format!("layer{i}.norm"))?.row(0).to_owned()
                    } else {
                        Array1::ones(q)
                    },
                    scaffold: Scaffold::from_store(&cfg.scaffold, q, store, &format!("layer{i}.scaffold"))?,
                    core: CoreModel::from_store(&cfg.core, store, &format!("layer{i}.core"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerStack {
            cfg: cfg.clone(),
            embed: store.get("embed")?.to_owned(),
            layers,
            head_w: store.get("head.w")?.to_owned(),
            head_b: store.get("head.b")?.row(0).to_owned(),
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        check_tokens(tokens, self.cfg.vocab)
    }

    /// Per-step features after the last layer.
    pub fn features(&self, tokens: &[usize], opts: ExecOptions) -> Result<Sequence> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(SsmError::InvalidArgument("empty token sequence".into()));
        }
        let mode = self.cfg.core.mode();
        let mut x = self.embed.select(Axis(0), tokens);
        for l in &self.layers {
            let h = if self.cfg.norm { rms_norm(x.view(), &l.norm_gain) } else { x.clone() };
            let out = scaffold_forward(&l.scaffold, |v| l.core.forward(v, mode, opts), &Sequence::new(h)?)?;
            x += &out.data();
        }
        Sequence::new(x)
    }

    /// Class logits for one token sequence.
    pub fn forward(&self, tokens: &[usize], opts: ExecOptions) -> Result<Array1<f64>> {
        let x = self.features(tokens, opts)?;
        let pooled = match self.cfg.pool {
            Pool::Mean => x.data().mean_axis(Axis(0)).expect("non-empty"),
            Pool::Last => x.step(x.len() - 1).to_owned(),
        };
        Ok(self.head_w.dot(&pooled) + &self.head_b)
    }
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(SsmError::OutOfVocabulary { token, vocab }),
        None => Ok(()),
    }
}

/// Logits (`B × n_classes`) for a padded batch of `B` sequences of `seq_len`
/// tokens, pooled over the first `lengths[b]` steps of each.
pub fn stack_tape_forward(
    cfg: &StackConfig,
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    seq_len: usize,
    lengths: &[usize],
) -> Result<Var> {
    check_tokens(tokens, cfg.vocab)?;
    if seq_len == 0 || tokens.len() != seq_len * lengths.len() {
        return Err(SsmError::shape("stack batch", seq_len * lengths.len(), tokens.len()));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > seq_len) {
        return Err(SsmError::InvalidArgument(format!("sequence length {l} outside 1..={seq_len}")));
    }
    let q = cfg.q();
    let emb = tape.param(store, "embed")?;
    let mut x = tape.gather(emb, tokens);
    for i in 0..cfg.layers {
        let h = if cfg.norm {
            let sq = tape.square(x);
            let ms = tape.sum_cols(sq);
            let ms = tape.scale(ms, 1.0 / q as f64);
            let ms = tape.add_scalar(ms, RMS_EPS);
            let r = tape.unary(ms, Unary::Rsqrt);
            let xn = tape.mul(x, r);
            let g = tape.param(store, &format!("layer{i}.norm"))?;
            tape.mul(xn, g)
        } else {
            x
        };
        let core_prefix = format!("layer{i}.core");
        let out = scaffold_tape_forward(&cfg.scaffold, tape, store, &format!("layer{i}.scaffold"), h, seq_len, |t, v| {
            core_tape_forward(&cfg.core, t, store, &core_prefix, v, seq_len)
        })?;
        x = tape.add(x, out);
    }
    let pooled = match cfg.pool {
        Pool::Mean => tape.mean_pool(x, seq_len, lengths),
        Pool::Last => tape.last_pool(x, seq_len, lengths),
    };
    let (w, b) = (tape.param(store, "head.w")?, tape.param(store, "head.b")?);
    let z = tape.matmul_bt(pooled, w);
    Ok(tape.add(z, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::testutil::{max_rel_diff, random_input};
    use crate::exec::ExecMode;
    use crate::learn::finite_diff_check;
    use crate::models::ModelKind;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_examples() {
        let x1 = array![2.0, 4.0];
        let z = Array2::zeros((2, 2));
        let g = gate(x1.view(), array![7.0, -3.0].view(), z.view(), GateNonlinearity::Sigmoid).unwrap();
        assert_eq!(g, array![1.0, 2.0]);
        let g = gate(x1.view(), array![7.0, -3.0].view(), z.view(), GateNonlinearity::Softmax).unwrap();
        assert_eq!(g, array![1.0, 2.0]);
        let x4 = array![1.0, -2.0, 3.0, 8.0];
        let g = gate(x4.view(), Array1::ones(4).view(), Array2::zeros((4, 4)).view(), GateNonlinearity::Softmax).unwrap();
        assert_eq!(g, &x4 / 4.0);
        assert!(gate(x1.view(), x4.view(), z.view(), GateNonlinearity::Sigmoid).is_err());
    }

    #[test]
    fn shift_examples() {
        let u = Sequence::scalar(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(time_shift(&u, 0), u);
        assert_eq!(time_shift(&u, 1).column(0).to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(time_shift(&u, 5).max_abs(), 0.0);
    }

    proptest! {
        #[test]
        fn shifts_compose(s1 in 0usize..6, s2 in 0usize..6, seed in 0u64..100) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u = random_input(&mut r, 10, 2);
            prop_assert_eq!(time_shift(&time_shift(&u, s1), s2), time_shift(&u, s1 + s2));
        }
    }

    #[test]
    fn conv_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let u = random_input(&mut r, 12, 3);
        assert_eq!(causal_conv1d(&u, Array2::ones((3, 1)).view()).unwrap(), u);
        let delay = Array2::from_shape_fn((3, 2), |(_, w)| w as f64);
        assert_eq!(causal_conv1d(&u, delay.view()).unwrap(), time_shift(&u, 1));
        let k = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0));
        let y = causal_conv1d(&u, k.view()).unwrap();
        for t in 0..12 {
            for c in 0..3 {
                let mut acc = 0.0;
                for w in 0..4 {
                    if t >= w {
                        acc += k[[c, w]] * u.data()[[t - w, c]];
                    }
                }
                assert!((y.data()[[t, c]] - acc).abs() <= 1e-12);
            }
        }
    }

    fn core_for(kind: ModelKind, q: usize) -> (CoreConfig, CoreModel) {
        let cfg = CoreConfig::new(kind, 4, q);
        let m = CoreModel::init(&cfg, 1).unwrap();
        (cfg, m)
    }

    #[test]
    fn mlp_with_zero_gate_halves_core() {
        let (cfg, core) = core_for(ModelKind::S4d, 3);
        let mut sc = Scaffold::identity(&ScaffoldConfig::new(ScaffoldKind::Mlp), 3);
        sc.cfg.gate_open = false;
        let mut r = ChaCha8Rng::seed_from_u64(1);
        sc.w_pre = Array2::from_shape_fn((3, 3), |_| r.gen_range(-1.0..1.0));
        let u = random_input(&mut r, 20, 3);
        let f = |v: &Sequence| core.forward(v, cfg.mode(), ExecOptions::default());
        let y = scaffold_forward(&sc, f, &u).unwrap();
        let pre = Sequence::new(u.data().dot(&sc.w_pre.t())).unwrap();
        let expect = f(&pre).unwrap().scaled(0.5);
        assert!(max_rel_diff(&y, &expect) < 1e-14);
    }

    #[test]
    fn open_identity_scaffolds_reduce_to_core() {
        let (cfg, core) = core_for(ModelKind::Lru, 2);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let u = random_input(&mut r, 16, 2);
        let f = |v: &Sequence| core.forward(v, cfg.mode(), ExecOptions::default());
        for kind in [ScaffoldKind::Mlp, ScaffoldKind::Mamba] {
            let sc = Scaffold::identity(&ScaffoldConfig::new(kind), 2);
            assert!(max_rel_diff(&scaffold_forward(&sc, f, &u).unwrap(), &f(&u).unwrap()) < 1e-14);
        }
        let sc = Scaffold::identity(&ScaffoldConfig { shift: 0, ..ScaffoldConfig::new(ScaffoldKind::H3) }, 2);
        let doubled = f(&u.scaled(2.0)).unwrap();
        assert!(max_rel_diff(&scaffold_forward(&sc, f, &u).unwrap(), &doubled) < 1e-14);
    }

    #[test]
    fn mamba_identity_equals_gated_core() {
        let (cfg, core) = core_for(ModelKind::S5, 2);
        let mut sc = Scaffold::identity(&ScaffoldConfig::new(ScaffoldKind::Mamba), 2);
        sc.cfg.gate_open = false;
        sc.w_gate = Array2::eye(2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let u = random_input(&mut r, 16, 2);
        let f = |v: &Sequence| core.forward(v, cfg.mode(), ExecOptions::default());
        let y = f(&u).unwrap().into_data() * u.data().mapv(|x| sigmoid(silu(x)));
        let got = scaffold_forward(&sc, f, &u).unwrap();
        assert!(max_rel_diff(&got, &Sequence::new(y).unwrap()) < 1e-14);
    }

    fn stack_cfg(kind: ModelKind, sk: ScaffoldKind) -> StackConfig {
        let q = 4;
        let mut core = CoreConfig::new(kind, 4, q);
        core.delta_range = (1e-2, 2e-1);
        StackConfig {
            core,
            layers: 2,
            scaffold: ScaffoldConfig::new(sk),
            norm: true,
            pool: Pool::Mean,
            vocab: 6,
            n_classes: 3,
        }
    }

    fn batch(r: &mut ChaCha8Rng, b: usize, t: usize, vocab: usize) -> (Vec<usize>, Vec<usize>) {
        let tokens = (0..b * t).map(|_| r.gen_range(0..vocab)).collect();
        let lengths = (0..b).map(|i| if i == 0 { t } else { r.gen_range(1..=t) }).collect();
        (tokens, lengths)
    }

    #[test]
    fn tape_stack_matches_direct_stack() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for kind in ModelKind::ALL {
            for sk in ScaffoldKind::ALL {
                let mut cfg = stack_cfg(kind, sk);
                cfg.pool = if sk == ScaffoldKind::H3 { Pool::Last } else { Pool::Mean };
                let stack = LayerStack::init(&cfg, 9).unwrap();
                let store = stack.register().unwrap();
                let back = LayerStack::from_store(&cfg, &store).unwrap();
                let (tokens, lengths) = batch(&mut r, 3, 10, cfg.vocab);
                let mut tape = Tape::new();
                let logits = stack_tape_forward(&cfg, &mut tape, &store, &tokens, 10, &lengths).unwrap();
                for b in 0..3 {
                    let direct = back.forward(&tokens[b * 10..b * 10 + lengths[b]], ExecOptions::default()).unwrap();
                    for c in 0..3 {
                        let t = tape.value(logits)[[b, c]];
                        assert!((t - direct[c]).abs() < 1e-9 * (1.0 + direct[c].abs()), "{kind}/{sk:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for kind in ModelKind::ALL {
            for sk in ScaffoldKind::ALL {
                let mut cfg = stack_cfg(kind, sk);
                cfg.layers = 1;
                let stack = LayerStack::init(&cfg, 3).unwrap();
                let mut store = stack.register().unwrap();
                let (tokens, lengths) = batch(&mut r, 2, 8, cfg.vocab);
                let labels = [0usize, 2];
                let loss = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
                    let z = stack_tape_forward(&cfg, tape, st, &tokens, 8, &lengths)?;
                    tape.cross_entropy(z, &labels)
                };
                let mut tape = Tape::new();
                let l = loss(&store, &mut tape).unwrap();
                let g = tape.backward(l).unwrap();
                store.zero_grads();
                tape.accumulate_into(&g, &mut store);
                let check = finite_diff_check(
                    |st| {
                        let mut t = Tape::new();
                        let l = loss(st, &mut t)?;
                        Ok(t.scalar(l))
                    },
                    &store,
                    1e-5,
                    None,
                )
                .unwrap();
                assert!(check.max_rel_error <= 1e-4, "{kind}/{sk:?}: {check:?}");
            }
        }
    }

    #[test]
    fn causality_probe() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for kind in ModelKind::ALL {
            for sk in ScaffoldKind::ALL {
                let cfg = stack_cfg(kind, sk);
                let stack = LayerStack::init(&cfg, 1).unwrap();
                let tokens: Vec<usize> = (0..12).map(|_| r.gen_range(0..cfg.vocab)).collect();
                let base = stack.features(&tokens, ExecOptions::default()).unwrap();
                let mut alt = tokens.clone();
                for t in alt.iter_mut().skip(7) {
                    *t = (*t + 1) % cfg.vocab;
                }
                let pert = stack.features(&alt, ExecOptions::default()).unwrap();
                let head = |s: &Sequence| s.data().slice(s![..7, ..]).to_owned();
                let diff = (&head(&base) - &head(&pert)).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
                assert!(diff <= 1e-12 * (1.0 + base.max_abs()), "{kind}/{sk:?}: {diff}");
                assert_ne!(base.step(11), pert.step(11));
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let cfg = stack_cfg(ModelKind::S4d, ScaffoldKind::Mlp);
        let mut stack = LayerStack::init(&cfg, 0).unwrap();
        stack.head_w.fill(0.0);
        let z = stack.forward(&[1, 2, 3], ExecOptions::default()).unwrap();
        assert!(z.iter().all(|&v| v == z[0]));
    }

    #[test]
    fn permuted_head_permutes_logits() {
        let cfg = stack_cfg(ModelKind::S6, ScaffoldKind::Mamba);
        let stack = LayerStack::init(&cfg, 0).unwrap();
        let z = stack.forward(&[0, 5, 2, 2], ExecOptions::default()).unwrap();
        let mut perm = stack.clone();
        let order = [2, 0, 1];
        perm.head_w = stack.head_w.select(Axis(0), &order);
        perm.head_b = stack.head_b.select(Axis(0), &order);
        let zp = perm.forward(&[0, 5, 2, 2], ExecOptions::default()).unwrap();
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(zp[i], z[o]);
        }
    }

    #[test]
    fn single_layer_matches_hand_composition() {
        let mut cfg = stack_cfg(ModelKind::S4d, ScaffoldKind::Mlp);
        cfg.layers = 1;
        cfg.norm = false;
        cfg.vocab = 2;
        cfg.n_classes = 4;
        let mut stack = LayerStack::init(&cfg, 2).unwrap();
        stack.head_w = Array2::eye(4);
        let tokens = [1, 0, 0, 1, 1];
        let x = stack.embed.select(Axis(0), &tokens);
        let l = &stack.layers[0];
        let f = |v: &Sequence| l.core.forward(v, ExecMode::Conv, ExecOptions::default());
        let out = scaffold_forward(&l.scaffold, f, &Sequence::new(x.clone()).unwrap()).unwrap();
        let pooled = (x + &out.data()).mean_axis(Axis(0)).unwrap();
        let z = stack.forward(&tokens, ExecOptions::default()).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(z[c], pooled[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_vocabulary() {
        let cfg = stack_cfg(ModelKind::Lru, ScaffoldKind::H3);
        let stack = LayerStack::init(&cfg, 0).unwrap();
        assert_eq!(
            stack.forward(&[0, 6], ExecOptions::default()).unwrap_err(),
            SsmError::OutOfVocabulary { token: 6, vocab: 6 }
        );
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = stack_cfg(ModelKind::S5, ScaffoldKind::Mamba);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<StackConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<StackConfig>(r#"{"layerz": 2}"#).is_err());
        let partial: StackConfig = serde_json::from_str(r#"{"layers": 3, "core": {"kind": "lru", "p": 8, "q": 2}}"#).unwrap();
        assert_eq!(partial.layers, 3);
        assert_eq!(partial.core.kind, ModelKind::Lru);
    }
}
