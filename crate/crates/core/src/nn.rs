//! Layers shared by the detector, speaker and listener heads.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_glorot(&format!("{name}.w"), in_dim, out_dim, rng),
            b: store.add_zeros(&format!("{name}.b"), &[1, out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Gated recurrent cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    wx: Linear,
    wh: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.x"), in_dim, 3 * hidden, rng),
            wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    /// `x: B×in`, `h: B×hidden` → next hidden state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let gx = self.wx.forward(g, store, x)?;
        let gh = self.wh.forward(g, store, h)?;
        let xr = g.slice_cols(gx, 0, hs)?;
        let xz = g.slice_cols(gx, hs, 2 * hs)?;
        let xn = g.slice_cols(gx, 2 * hs, 3 * hs)?;
        let hr = g.slice_cols(gh, 0, hs)?;
        let hz = g.slice_cols(gh, hs, 2 * hs)?;
        let hn = g.slice_cols(gh, 2 * hs, 3 * hs)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n);
        let zc = g.one_minus(z);
        let a = g.mul(zc, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        }
    }

    /// `query: Q×W` attends over `memory: M×W`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, memory: Var) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, store, cat)
    }
}

/// Row count of a node as a plain number.
pub fn rows(g: &Graph, v: Var) -> usize {
    g.value(v).rows()
}
