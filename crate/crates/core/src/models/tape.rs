//! Differentiable forwards of every core over a parameter store.
//!
//! Conjugate-paired cores keep only one member of each pair; their real
//! outputs are `2·Re(·)` sums over the stored half.

use ndarray::Array2;

use super::lti::key;
use super::{CoreConfig, Discretization, ModelKind};
use crate::error::{Result, SsmError};
use crate::exec::ExecMode;
use crate::learn::{ParamStore, Tape, Unary, Var};

struct Ctx<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    prefix: &'a str,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, &key(self.prefix, name))
    }

    /// `[re | im]` from two stored halves.
    fn complex(&mut self, re: &str, im: &str) -> Result<Var> {
        let (r, i) = (self.p(re)?, self.p(im)?);
        Ok(self.tape.concat_cols(&[r, i]))
    }

    /// `−exp(re_log) + i·im`.
    fn eigen(&mut self, re_log: &str, im: &str) -> Result<Var> {
        let l = self.p(re_log)?;
        let e = self.tape.exp(l);
        let re = self.tape.neg(e);
        let i = self.p(im)?;
        Ok(self.tape.concat_cols(&[re, i]))
    }

    /// Complex constant `1 + 0i` of width `w` (one row).
    fn one(&mut self, w: usize) -> Var {
        let mut v = Array2::zeros((1, 2 * w));
        v.slice_mut(ndarray::s![.., ..w]).fill(1.0);
        self.tape.constant(v)
    }

    /// `drive = u · B̄ᵀ` with `B̄ᵀ` a `q × 2n` complex tensor.
    fn project_in(&mut self, u: Var, bt: Var) -> Var {
        let re = self.tape.creal(bt);
        let im = self.tape.cimag(bt);
        let dr = self.tape.matmul(u, re);
        let di = self.tape.matmul(u, im);
        self.tape.concat_cols(&[dr, di])
    }

    /// `Re(x · Cᵀ)` with `C` stored as `q × n` halves.
    fn project_out(&mut self, x: Var) -> Result<Var> {
        let (cr, ci) = (self.p("c_re")?, self.p("c_im")?);
        let xr = self.tape.creal(x);
        let xi = self.tape.cimag(x);
        let a = self.tape.matmul_bt(xr, cr);
        let b = self.tape.matmul_bt(xi, ci);
        Ok(self.tape.sub(a, b))
    }

    fn feedthrough(&mut self, y: Var, u: Var) -> Result<Var> {
        let d = self.p("d")?;
        let du = self.tape.mul(u, d);
        Ok(self.tape.add(y, du))
    }
}

/// Output of the core named by `cfg` under `prefix`, for a `B·T × q` input.
pub fn core_tape_forward(
    cfg: &CoreConfig,
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    u: Var,
    seq_len: usize,
) -> Result<Var> {
    let (rows, q) = tape.shape(u);
    if q != cfg.q || seq_len == 0 || rows % seq_len != 0 {
        return Err(SsmError::shape("core_tape_forward input", format!("k·{seq_len}x{}", cfg.q), format!("{rows}x{q}")));
    }
    let mode = cfg.mode();
    let mut cx = Ctx { tape, store, prefix };
    match cfg.kind {
        ModelKind::S4d => s4d(&mut cx, cfg, u, seq_len, mode),
        ModelKind::S4 => {
            if mode == ExecMode::Scan {
                return Err(SsmError::InvalidArgument("S4's transition is not diagonal; use conv".into()));
            }
            s4(&mut cx, cfg, u, seq_len)
        }
        ModelKind::S5 | ModelKind::Lru => {
            if mode == ExecMode::Conv {
                return Err(SsmError::InvalidArgument(format!("the {} training path runs on the scan engine", cfg.kind)));
            }
            if cfg.kind == ModelKind::S5 {
                s5(&mut cx, cfg, u, seq_len)
            } else {
                lru(&mut cx, u, seq_len)
            }
        }
        ModelKind::S6 => {
            if mode == ExecMode::Conv {
                return Err(SsmError::NotTimeInvariant);
            }
            s6(&mut cx, cfg, u, seq_len)
        }
        ModelKind::RgLru => {
            if mode == ExecMode::Conv {
                return Err(SsmError::NotTimeInvariant);
            }
            rglru(&mut cx, cfg, u, seq_len)
        }
    }
}

fn s4d(cx: &mut Ctx<'_>, cfg: &CoreConfig, u: Var, seq_len: usize, mode: ExecMode) -> Result<Var> {
    let h = cfg.p / 2;
    let w = cfg.q * h;
    let lam = cx.eigen("lambda_re_log", "lambda_im")?;
    let ld = cx.p("log_delta")?;
    let delta = cx.tape.exp(ld);
    let z = cx.tape.mul(lam, delta);
    let abar = cx.tape.cexp(z);
    let one = cx.one(w);
    let am1 = cx.tape.sub(abar, one);
    let g = cx.tape.cdiv(am1, lam);
    let b = cx.complex("b_re", "b_im")?;
    let bbar = cx.tape.cmul(g, b);
    let c = cx.complex("c_re", "c_im")?;
    let y = if mode == ExecMode::Conv {
        let cb = cx.tape.cmul(c, bbar);
        let pw = cx.tape.cpowers(abar, seq_len);
        let terms = cx.tape.cmul(pw, cb);
        let re = cx.tape.creal(terms);
        let k = cx.tape.group_sum_cols(re, h);
        let k = cx.tape.scale(k, 2.0);
        cx.tape.fft_conv(u, k, seq_len)
    } else {
        let ru = cx.tape.repeat_each(u, h);
        let (br, bi) = (cx.tape.creal(bbar), cx.tape.cimag(bbar));
        let dr = cx.tape.mul(ru, br);
        let di = cx.tape.mul(ru, bi);
        let drive = cx.tape.concat_cols(&[dr, di]);
        let x = cx.tape.complex_scan(abar, drive, seq_len)?;
        let cxv = cx.tape.cmul(c, x);
        let re = cx.tape.creal(cxv);
        let s = cx.tape.group_sum_cols(re, h);
        cx.tape.scale(s, 2.0)
    };
    cx.feedthrough(y, u)
}

/// Conjugate mirror `[re, re | im, −im]` of a stored `q × h` complex pair.
fn mirror(cx: &mut Ctx<'_>, re: Var, im: Var) -> Var {
    let nim = cx.tape.neg(im);
    cx.tape.concat_cols(&[re, re, im, nim])
}

fn mirrored(cx: &mut Ctx<'_>, re: &str, im: &str) -> Result<Var> {
    let (r, i) = (cx.p(re)?, cx.p(im)?);
    Ok(mirror(cx, r, i))
}

/// Bilinear S4 with the rank-one update applied through Sherman–Morrison.
/// The kernel is unrolled on the tape, one `Ā` application per step.
fn s4(cx: &mut Ctx<'_>, cfg: &CoreConfig, u: Var, seq_len: usize) -> Result<Var> {
    let n = cfg.p;
    let lre_log = cx.p("lambda_re_log")?;
    let e = cx.tape.exp(lre_log);
    let lre = cx.tape.neg(e);
    let lim = cx.p("lambda_im")?;
    let lam = mirror(cx, lre, lim);
    let r = mirrored(cx, "r_re", "r_im")?;
    let s = mirrored(cx, "s_re", "s_im")?;
    let b = mirrored(cx, "b_re", "b_im")?;
    let c = mirrored(cx, "c_re", "c_im")?;
    let ld = cx.p("log_delta")?;
    let delta = cx.tape.exp(ld);
    let half = cx.tape.scale(delta, 0.5);

    let one = cx.one(n);
    let one1 = cx.one(1);
    let zero = cx.tape.scale(half, 0.0);
    let halfc = cx.tape.concat_cols(&[half, zero]);
    let hl = cx.tape.mul(lam, half);
    let e1 = cx.tape.add(one, hl);
    let m = cx.tape.sub(one, hl);
    let dinv = cx.tape.cdiv(one, m);
    let dinv_r = cx.tape.cmul(dinv, r);
    let cs = cx.tape.cconj(s);
    // Σₙ over the full state, giving one complex scalar per channel.
    let crow = |cx: &mut Ctx<'_>, x: Var| cx.tape.group_sum_cols(x, n);
    let sdr = cx.tape.cmul(cs, dinv_r);
    let sdr = crow(cx, sdr);
    let hs = cx.tape.mul(sdr, half);
    let den = cx.tape.sub(one1, hs);
    let coef = cx.tape.cdiv(halfc, den);
    let cdr = cx.tape.cmul(coef, dinv_r);
    let minv = |cx: &mut Ctx<'_>, w: Var| {
        let dw = cx.tape.cmul(dinv, w);
        let sdw = cx.tape.cmul(cs, dw);
        let proj = crow(cx, sdw);
        let corr = cx.tape.cmul(cdr, proj);
        cx.tape.add(dw, corr)
    };
    let abar = |cx: &mut Ctx<'_>, v: Var| {
        let ev = cx.tape.cmul(e1, v);
        let sv = cx.tape.cmul(cs, v);
        let sv = crow(cx, sv);
        let rsv = cx.tape.cmul(r, sv);
        let rsv = cx.tape.mul(rsv, half);
        let w = cx.tape.add(ev, rsv);
        minv(cx, w)
    };
    let db = cx.tape.mul(b, delta);
    let mut v = minv(cx, db);
    let mut cols = Vec::with_capacity(seq_len);
    for j in 0..seq_len {
        let cv = cx.tape.cmul(c, v);
        let kj = crow(cx, cv);
        cols.push(cx.tape.creal(kj));
        if j + 1 < seq_len {
            v = abar(cx, v);
        }
    }
    let k = cx.tape.concat_cols(&cols);
    let k = cx.tape.transpose(k);
    let y = cx.tape.fft_conv(u, k, seq_len);
    cx.feedthrough(y, u)
}

fn s5(cx: &mut Ctx<'_>, cfg: &CoreConfig, u: Var, seq_len: usize) -> Result<Var> {
    let h = cfg.p / 2;
    let lam = cx.eigen("lambda_re_log", "lambda_im")?;
    let ld = cx.p("log_delta")?;
    let delta = cx.tape.exp(ld);
    let z = cx.tape.mul(lam, delta);
    let one = cx.one(h);
    let (abar, g) = match cfg.discretization {
        Discretization::Zoh => {
            let abar = cx.tape.cexp(z);
            let am1 = cx.tape.sub(abar, one);
            (abar, cx.tape.cdiv(am1, lam))
        }
        Discretization::Bilinear => {
            let hz = cx.tape.scale(z, 0.5);
            let num = cx.tape.add(one, hz);
            let den = cx.tape.sub(one, hz);
            let abar = cx.tape.cdiv(num, den);
            let inv = cx.tape.cdiv(one, den);
            (abar, cx.tape.mul(inv, delta))
        }
    };
    let bt = cx.complex("b_re", "b_im")?;
    let bbar_t = cx.tape.cmul(g, bt);
    let drive = cx.project_in(u, bbar_t);
    let x = cx.tape.complex_scan(abar, drive, seq_len)?;
    let y = cx.project_out(x)?;
    let y = cx.tape.scale(y, 2.0);
    cx.feedthrough(y, u)
}

fn lru(cx: &mut Ctx<'_>, u: Var, seq_len: usize) -> Result<Var> {
    let nu = cx.p("nu_log")?;
    let en = cx.tape.exp(nu);
    let re = cx.tape.neg(en);
    let theta = cx.p("theta")?;
    let z = cx.tape.concat_cols(&[re, theta]);
    let abar = cx.tape.cexp(z);
    let gl = cx.p("gamma_log")?;
    let gamma = cx.tape.exp(gl);
    let gamma = cx.tape.tile_cols(gamma, 2);
    let gt = cx.complex("b_re", "b_im")?;
    let bbar_t = cx.tape.mul(gt, gamma);
    let drive = cx.project_in(u, bbar_t);
    let x = cx.tape.complex_scan(abar, drive, seq_len)?;
    let y = cx.project_out(x)?;
    cx.feedthrough(y, u)
}

fn s6(cx: &mut Ctx<'_>, cfg: &CoreConfig, u: Var, seq_len: usize) -> Result<Var> {
    let (n, q) = (cfg.p, cfg.q);
    let al = cx.p("a_log")?;
    let ea = cx.tape.exp(al);
    let lam = cx.tape.neg(ea);
    let wd = cx.p("w_delta")?;
    let bd = cx.p("b_delta")?;
    let pre = cx.tape.matmul_bt(u, wd);
    let pre = cx.tape.add(pre, bd);
    let delta = cx.tape.softplus(pre);
    let dl = cx.tape.mul(delta, lam);
    let abar = cx.tape.exp(dl);
    let em1 = cx.tape.unary(dl, Unary::Expm1);
    let coef = cx.tape.div(em1, lam);
    let wb = cx.p("w_b")?;
    let bu = cx.tape.matmul_bt(u, wb);
    let bbar = cx.tape.mul(coef, bu);
    let a = cx.tape.tile_cols(abar, q);
    let bt = cx.tape.tile_cols(bbar, q);
    let ur = cx.tape.repeat_each(u, n);
    let drive = cx.tape.mul(bt, ur);
    let x = cx.tape.scan(a, drive, seq_len)?;
    let wc = cx.p("w_c")?;
    let cu = cx.tape.matmul_bt(u, wc);
    let ct = cx.tape.tile_cols(cu, q);
    let cxs = cx.tape.mul(ct, x);
    let y = cx.tape.group_sum_cols(cxs, n);
    cx.feedthrough(y, u)
}

fn rglru(cx: &mut Ctx<'_>, cfg: &CoreConfig, u: Var, seq_len: usize) -> Result<Var> {
    let wa = cx.p("w_a")?;
    let wd = cx.p("w_delta")?;
    let wb = cx.p("w_b")?;
    let rp = cx.tape.matmul_bt(u, wd);
    let r = cx.tape.sigmoid(rp);
    let ip = cx.tape.matmul_bt(u, wb);
    let i = cx.tape.sigmoid(ip);
    let sp = cx.tape.softplus(wa);
    let rate = cx.tape.scale(sp, -cfg.rglru_c);
    let loga = cx.tape.mul(rate, r);
    let abar = cx.tape.exp(loga);
    let l2 = cx.tape.scale(loga, 2.0);
    let em1 = cx.tape.unary(l2, Unary::Expm1);
    let one_minus = cx.tape.neg(em1);
    let root = cx.tape.unary(one_minus, Unary::Sqrt);
    let bbar = cx.tape.mul(root, i);
    let drive = cx.tape.mul(bbar, u);
    cx.tape.scan(abar, drive, seq_len)
}
