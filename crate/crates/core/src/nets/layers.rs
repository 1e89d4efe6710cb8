//! Layer primitives over a flat parameter vector. Every layer owns an offset
//! into the vector; forward passes are pure and backward passes accumulate
//! into a gradient vector of the same length.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::symmetry::FeatureLayout;

/// Hands out contiguous parameter ranges.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    pub len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

/// Fully connected layer, row-major `n_out × n_in` weights then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    off: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, n_in: usize, n_out: usize) -> Self {
        let off = alloc.take(n_in * n_out + n_out);
        Self { n_in, n_out, off }
    }

    pub fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn b_off(&self) -> usize {
        self.off + self.n_in * self.n_out
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, gain: f64) {
        let sd = gain / (self.n_in.max(1) as f64).sqrt();
        for w in &mut p[self.off..self.b_off()] {
            *w = gauss(rng, sd);
        }
        p[self.b_off()..self.b_off() + self.n_out].fill(0.0);
    }

    pub fn bias_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.b_off()..self.b_off() + self.n_out]
    }

    pub fn weights_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.b_off()]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        let w = &p[self.off..self.b_off()];
        let b = &p[self.b_off()..self.b_off() + self.n_out];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            *yo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        let (w_off, b_off) = (self.off, self.b_off());
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[b_off + o] += d;
            let row = &mut g[w_off + o * self.n_in..w_off + (o + 1) * self.n_in];
            for (gi, xi) in row.iter_mut().zip(x) {
                *gi += d * xi;
            }
        }
        if let Some(dx) = dx {
            let w = &p[w_off..b_off];
            dx.fill(0.0);
            for (o, &d) in dy.iter().enumerate() {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += d * wi;
                }
            }
        }
    }
}

/// Linear map commuting with the SO(2) action: each pair→pair block is
/// a·I₂ + b·J, each scalar→scalar entry is free, cross-type blocks are zero,
/// and only scalar outputs carry a bias.
///
/// Parameter order: pair blocks `[out][in][a, b]`, scalar weights
/// `[out][in]`, scalar biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivLinear {
    in_pairs: Vec<(usize, usize)>,
    in_sca: Vec<usize>,
    out_pairs: Vec<(usize, usize)>,
    out_sca: Vec<usize>,
    dim_in: usize,
    dim_out: usize,
    off: usize,
}

impl EquivLinear {
    pub fn new(alloc: &mut ParamAlloc, layout_in: &FeatureLayout, layout_out: &FeatureLayout) -> Self {
        let mut l = Self {
            in_pairs: layout_in.pairs().collect(),
            in_sca: layout_in.scalars().collect(),
            out_pairs: layout_out.pairs().collect(),
            out_sca: layout_out.scalars().collect(),
            dim_in: layout_in.dim(),
            dim_out: layout_out.dim(),
            off: 0,
        };
        l.off = alloc.take(l.n_params());
        l
    }

    pub fn n_params(&self) -> usize {
        2 * self.out_pairs.len() * self.in_pairs.len() + self.out_sca.len() * (self.in_sca.len() + 1)
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn sca_off(&self) -> usize {
        self.off + 2 * self.out_pairs.len() * self.in_pairs.len()
    }

    fn bias_off(&self) -> usize {
        self.sca_off() + self.out_sca.len() * self.in_sca.len()
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, gain: f64) {
        let sd_pair = gain / (2.0 * self.in_pairs.len().max(1) as f64).sqrt();
        let sd_sca = gain / (self.in_sca.len().max(1) as f64).sqrt();
        for w in &mut p[self.off..self.sca_off()] {
            *w = gauss(rng, sd_pair);
        }
        for w in &mut p[self.sca_off()..self.bias_off()] {
            *w = gauss(rng, sd_sca);
        }
        p[self.bias_off()..self.bias_off() + self.out_sca.len()].fill(0.0);
    }

    /// Biases of the scalar outputs, in output-scalar order.
    pub fn bias_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.bias_off()..self.bias_off() + self.out_sca.len()]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim_in);
        let np_in = self.in_pairs.len();
        let pw = &p[self.off..self.sca_off()];
        for (o, &(ox, oy)) in self.out_pairs.iter().enumerate() {
            let (mut yx, mut yy) = (0.0, 0.0);
            for (i, &(ix, iy)) in self.in_pairs.iter().enumerate() {
                let k = 2 * (o * np_in + i);
                let (a, b) = (pw[k], pw[k + 1]);
                yx += a * x[ix] - b * x[iy];
                yy += b * x[ix] + a * x[iy];
            }
            y[ox] = yx;
            y[oy] = yy;
        }
        let ns_in = self.in_sca.len();
        let sw = &p[self.sca_off()..self.bias_off()];
        let bias = &p[self.bias_off()..];
        for (o, &oi) in self.out_sca.iter().enumerate() {
            let row = &sw[o * ns_in..(o + 1) * ns_in];
            y[oi] = bias[o] + row.iter().zip(&self.in_sca).map(|(w, &i)| w * x[i]).sum::<f64>();
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], mut dx: Option<&mut [f64]>) {
        if let Some(dx) = dx.as_deref_mut() {
            dx.fill(0.0);
        }
        let np_in = self.in_pairs.len();
        for (o, &(ox, oy)) in self.out_pairs.iter().enumerate() {
            let (dyx, dyy) = (dy[ox], dy[oy]);
            for (i, &(ix, iy)) in self.in_pairs.iter().enumerate() {
                let k = self.off + 2 * (o * np_in + i);
                g[k] += dyx * x[ix] + dyy * x[iy];
                g[k + 1] += dyy * x[ix] - dyx * x[iy];
                if let Some(dx) = dx.as_deref_mut() {
                    let (a, b) = (p[k], p[k + 1]);
                    dx[ix] += a * dyx + b * dyy;
                    dx[iy] += a * dyy - b * dyx;
                }
            }
        }
        let ns_in = self.in_sca.len();
        let (so, bo) = (self.sca_off(), self.bias_off());
        for (o, &oi) in self.out_sca.iter().enumerate() {
            let d = dy[oi];
            g[bo + o] += d;
            for (j, &ij) in self.in_sca.iter().enumerate() {
                g[so + o * ns_in + j] += d * x[ij];
                if let Some(dx) = dx.as_deref_mut() {
                    dx[ij] += d * p[so + o * ns_in + j];
                }
            }
        }
    }

    /// Dense weight matrix (without bias).
    pub fn materialize(&self, p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim_out, self.dim_in);
        let np_in = self.in_pairs.len();
        for (o, &(ox, oy)) in self.out_pairs.iter().enumerate() {
            for (i, &(ix, iy)) in self.in_pairs.iter().enumerate() {
                let k = self.off + 2 * (o * np_in + i);
                let (a, b) = (p[k], p[k + 1]);
                m[(ox, ix)] = a;
                m[(ox, iy)] = -b;
                m[(oy, ix)] = b;
                m[(oy, iy)] = a;
            }
        }
        let ns_in = self.in_sca.len();
        for (o, &oi) in self.out_sca.iter().enumerate() {
            for (j, &ij) in self.in_sca.iter().enumerate() {
                m[(oi, ij)] = p[self.sca_off() + o * ns_in + j];
            }
        }
        m
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated nonlinearity over `canonical(pairs, scalars + pairs)` features:
/// the trailing `pairs` scalars gate the vector pairs, the leading scalars go
/// through ELU. Each pair additionally emits the invariant sqrt(1 + ‖v‖²) − 1
/// in its gate's slot, which is how vector information reaches scalar
/// channels (vector→scalar linear maps are zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub pairs: usize,
    pub scalars: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("gated layout needs {expected} features ({pairs} pairs, {scalars} scalars, {pairs} gates), got {got}")]
pub struct MissingGate {
    pub pairs: usize,
    pub scalars: usize,
    pub expected: usize,
    pub got: usize,
}

impl Gate {
    pub fn dim(&self) -> usize {
        3 * self.pairs + self.scalars
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::canonical(self.pairs, self.scalars + self.pairs)
    }

    pub fn check(&self, x: &[f64]) -> Result<(), MissingGate> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(MissingGate { pairs: self.pairs, scalars: self.scalars, expected: self.dim(), got: x.len() })
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        let (p, s) = (self.pairs, self.scalars);
        let gates = 2 * p + s;
        for k in 0..p {
            let (vx, vy) = (x[2 * k], x[2 * k + 1]);
            let sg = sigmoid(x[gates + k]);
            y[2 * k] = vx * sg;
            y[2 * k + 1] = vy * sg;
            y[gates + k] = (1.0 + vx * vx + vy * vy).sqrt() - 1.0;
        }
        for i in 2 * p..gates {
            y[i] = elu(x[i]);
        }
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let (p, s) = (self.pairs, self.scalars);
        let gates = 2 * p + s;
        for k in 0..p {
            let (vx, vy) = (x[2 * k], x[2 * k + 1]);
            let g = x[gates + k];
            let sg = sigmoid(g);
            let (dvx, dvy, dn) = (dy[2 * k], dy[2 * k + 1], dy[gates + k]);
            let r = (1.0 + vx * vx + vy * vy).sqrt();
            dx[2 * k] = dvx * sg + dn * vx / r;
            dx[2 * k + 1] = dvy * sg + dn * vy / r;
            dx[gates + k] = (dvx * vx + dvy * vy) * sg * (1.0 - sg);
        }
        for i in 2 * p..gates {
            dx[i] = dy[i] * elu_grad(x[i]);
        }
    }
}

/// Feature-wise affine modulation y = x ⊙ γ(c) + β(c) with a two-layer tanh
/// conditioner on the command.
#[derive(Debug, Clone, PartialEq)]
pub struct Film {
    pub l1: Dense,
    pub l2: Dense,
    pub n_features: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilmTrace {
    pub h: Vec<f64>,
    pub gb: Vec<f64>,
}

impl Film {
    pub fn new(alloc: &mut ParamAlloc, n_cond: usize, hidden: usize, n_features: usize) -> Self {
        Self { l1: Dense::new(alloc, n_cond, hidden), l2: Dense::new(alloc, hidden, 2 * n_features), n_features }
    }

    pub fn n_params(&self) -> usize {
        self.l1.n_params() + self.l2.n_params()
    }

    /// Identity modulation: γ = 1, β = 0 for every command.
    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.l1.init(p, rng, 1.0);
        self.l2.weights_mut(p).fill(0.0);
        let b = self.l2.bias_mut(p);
        b[..self.n_features].fill(1.0);
        b[self.n_features..].fill(0.0);
    }

    /// Returns (γ, β) for a command.
    pub fn modulation(&self, p: &[f64], cond: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut t = FilmTrace::default();
        self.conditioner(p, cond, &mut t);
        let n = self.n_features;
        (t.gb[..n].to_vec(), t.gb[n..].to_vec())
    }

    fn conditioner(&self, p: &[f64], cond: &[f64], t: &mut FilmTrace) {
        t.h.resize(self.l1.n_out, 0.0);
        self.l1.forward(p, cond, &mut t.h);
        for h in &mut t.h {
            *h = h.tanh();
        }
        t.gb.resize(self.l2.n_out, 0.0);
        self.l2.forward(p, &t.h, &mut t.gb);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], cond: &[f64], y: &mut [f64], t: &mut FilmTrace) {
        self.conditioner(p, cond, t);
        let n = self.n_features;
        for i in 0..n {
            y[i] = x[i] * t.gb[i] + t.gb[n + i];
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], cond: &[f64], t: &FilmTrace, dy: &[f64], g: &mut [f64]) {
        let n = self.n_features;
        let mut dgb = vec![0.0; 2 * n];
        for i in 0..n {
            dgb[i] = dy[i] * x[i];
            dgb[n + i] = dy[i];
        }
        let mut dh = vec![0.0; self.l1.n_out];
        self.l2.backward(p, &t.h, &dgb, g, Some(&mut dh));
        for (d, h) in dh.iter_mut().zip(&t.h) {
            *d *= 1.0 - h * h;
        }
        self.l1.backward(p, cond, &dh, g, None);
    }
}
