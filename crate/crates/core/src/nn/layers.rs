//! Fixed-topology layers with hand-written backward passes.
//!
//! Weights are stored input-major (`[in, out]`), so the contribution of one
//! input coordinate is a contiguous row. One-hot and embedding inputs only
//! touch the rows they select.

use rand::Rng;

use super::ops::{axpy, dot, sigmoid, Activation};
use super::tensor::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    OneHot(usize),
    Embed { table: ParamId, dim: usize },
}

impl Slot {
    pub fn width(&self) -> usize {
        match *self {
            Slot::OneHot(w) => w,
            Slot::Embed { dim, .. } => dim,
        }
    }
}

/// Input of a layer: a dense prefix followed by index-addressed slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayout {
    dense: usize,
    slots: Vec<Slot>,
    offsets: Vec<usize>,
    width: usize,
}

impl InputLayout {
    pub fn new(dense: usize, slots: Vec<Slot>) -> Self {
        let mut offsets = Vec::with_capacity(slots.len());
        let mut off = dense;
        for s in &slots {
            offsets.push(off);
            off += s.width();
        }
        InputLayout {
            dense,
            slots,
            offsets,
            width: off,
        }
    }

    pub fn dense(width: usize) -> Self {
        Self::new(width, Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dense_width(&self) -> usize {
        self.dense
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Number of input coordinates that can be non-zero at once.
    fn active_fan_in(&self) -> usize {
        self.dense
            + self
                .slots
                .iter()
                .map(|s| match s {
                    Slot::OneHot(_) => 1,
                    Slot::Embed { dim, .. } => *dim,
                })
                .sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Input<'a, S> {
    pub dense: &'a [S],
    pub sparse: &'a [u32],
}

impl<'a, S> Input<'a, S> {
    pub fn dense(dense: &'a [S]) -> Self {
        Input { dense, sparse: &[] }
    }

    pub fn new(dense: &'a [S], sparse: &'a [u32]) -> Self {
        Input { dense, sparse }
    }
}

pub(crate) fn uniform_tensor<S: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map `y = W x + b` over an [`InputLayout`].
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    layout: InputLayout,
    out: usize,
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        layout: InputLayout,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (layout.active_fan_in().max(1) as f64).sqrt();
        let w = store.add(
            &format!("{name}.weight"),
            uniform_tensor(rng, &[layout.width(), out], bound),
        )?;
        let b = store.add(&format!("{name}.bias"), uniform_tensor(rng, &[out], bound))?;
        Ok(Linear {
            name: name.to_string(),
            layout,
            out,
            w,
            b,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out
    }

    pub fn layout(&self) -> &InputLayout {
        &self.layout
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    fn check<S: Real>(&self, ps: &ParamStore<S>, x: &Input<S>) -> Result<()> {
        if x.dense.len() != self.layout.dense {
            return Err(Error::dim(
                format!("{}.weight", self.name),
                self.layout.dense,
                x.dense.len(),
            ));
        }
        if x.sparse.len() != self.layout.slots.len() {
            return Err(Error::dim(
                format!("{}.weight", self.name),
                self.layout.slots.len(),
                x.sparse.len(),
            ));
        }
        for (slot, &idx) in self.layout.slots.iter().zip(x.sparse) {
            let limit = match *slot {
                Slot::OneHot(w) => w,
                Slot::Embed { table, dim } => ps.get(table).len() / dim,
            };
            if idx as usize >= limit {
                return Err(Error::Range {
                    value: idx as usize,
                    limit,
                });
            }
        }
        Ok(())
    }

    pub fn forward<S: Real>(&self, ps: &ParamStore<S>, x: Input<S>) -> Result<Vec<S>> {
        self.check(ps, &x)?;
        let out = self.out;
        let w = ps.data(self.w);
        let mut y = ps.data(self.b).to_vec();
        for (i, &xi) in x.dense.iter().enumerate() {
            if xi != S::zero() {
                axpy(xi, &w[i * out..(i + 1) * out], &mut y);
            }
        }
        for ((slot, &idx), &off) in self
            .layout
            .slots
            .iter()
            .zip(x.sparse)
            .zip(&self.layout.offsets)
        {
            match *slot {
                Slot::OneHot(_) => {
                    let r = off + idx as usize;
                    for (yi, &wi) in y.iter_mut().zip(&w[r * out..(r + 1) * out]) {
                        *yi += wi;
                    }
                }
                Slot::Embed { table, dim } => {
                    let e = &ps.data(table)[idx as usize * dim..(idx as usize + 1) * dim];
                    for (k, &ek) in e.iter().enumerate() {
                        let r = off + k;
                        axpy(ek, &w[r * out..(r + 1) * out], &mut y);
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream `dy` and, when `dx` is
    /// given, adds the dense-input gradient into it.
    pub fn backward<S: Real>(
        &self,
        ps: &ParamStore<S>,
        x: Input<S>,
        dy: &[S],
        grads: &mut Gradients<S>,
        dx: Option<&mut [S]>,
    ) {
        let out = self.out;
        let w = ps.data(self.w);
        {
            let gb = grads.get_mut(self.b);
            for (g, &d) in gb.iter_mut().zip(dy) {
                *g += d;
            }
        }
        {
            let gw = grads.get_mut(self.w);
            for (i, &xi) in x.dense.iter().enumerate() {
                if xi != S::zero() {
                    axpy(xi, dy, &mut gw[i * out..(i + 1) * out]);
                }
            }
        }
        if let Some(dx) = dx {
            for (i, d) in dx.iter_mut().enumerate().take(self.layout.dense) {
                *d += dot(&w[i * out..(i + 1) * out], dy);
            }
        }
        for ((slot, &idx), &off) in self
            .layout
            .slots
            .iter()
            .zip(x.sparse)
            .zip(&self.layout.offsets)
        {
            match *slot {
                Slot::OneHot(_) => {
                    let r = off + idx as usize;
                    let gw = grads.get_mut(self.w);
                    for (g, &d) in gw[r * out..(r + 1) * out].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                Slot::Embed { table, dim } => {
                    let base = idx as usize * dim;
                    let e = &ps.data(table)[base..base + dim];
                    {
                        let gw = grads.get_mut(self.w);
                        for (k, &ek) in e.iter().enumerate() {
                            let r = off + k;
                            axpy(ek, dy, &mut gw[r * out..(r + 1) * out]);
                        }
                    }
                    let ge = grads.get_mut(table);
                    for k in 0..dim {
                        let r = off + k;
                        ge[base + k] += dot(&w[r * out..(r + 1) * out], dy);
                    }
                }
            }
        }
    }
}

/// Two-layer fully-connected network `act2(W2 act1(W1 x + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act1: Activation,
    pub act2: Activation,
}

#[derive(Clone, Debug, Default)]
pub struct MlpCache<S> {
    pub hidden: Vec<S>,
    pub out: Vec<S>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        layout: InputLayout,
        hidden: usize,
        out: usize,
        act1: Activation,
        act2: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let l1 = Linear::new(store, &format!("{name}.0"), layout, hidden, rng)?;
        let l2 = Linear::new(
            store,
            &format!("{name}.1"),
            InputLayout::dense(hidden),
            out,
            rng,
        )?;
        Ok(Mlp { l1, l2, act1, act2 })
    }

    pub fn out_width(&self) -> usize {
        self.l2.out_width()
    }

    pub fn forward<S: Real>(&self, ps: &ParamStore<S>, x: Input<S>) -> Result<MlpCache<S>> {
        let mut hidden = self.l1.forward(ps, x)?;
        for h in &mut hidden {
            *h = self.act1.apply(*h);
        }
        let mut out = self.l2.forward(ps, Input::dense(&hidden))?;
        for o in &mut out {
            *o = self.act2.apply(*o);
        }
        Ok(MlpCache { hidden, out })
    }

    pub fn backward<S: Real>(
        &self,
        ps: &ParamStore<S>,
        x: Input<S>,
        cache: &MlpCache<S>,
        dout: &[S],
        grads: &mut Gradients<S>,
        dx: Option<&mut [S]>,
    ) {
        let dpre2: Vec<S> = dout
            .iter()
            .zip(&cache.out)
            .map(|(&d, &y)| d * self.act2.grad_from_output(y))
            .collect();
        let mut dh = vec![S::zero(); cache.hidden.len()];
        self.l2.backward(
            ps,
            Input::dense(&cache.hidden),
            &dpre2,
            grads,
            Some(&mut dh),
        );
        for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
            *d *= self.act1.grad_from_output(h);
        }
        if dh.iter().all(|d| d.is_zero()) {
            return;
        }
        self.l1.backward(ps, x, &dh, grads, dx);
    }
}

/// GRU cell:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `c = tanh(Wc x + Uc (r ⊙ h) + bc)`, `h' = (1 − z) ⊙ h + z ⊙ c`.
#[derive(Clone, Debug)]
pub struct Gru {
    name: String,
    hidden: usize,
    /// Input projection for all three gates, output order `[z, r, c]`.
    wx: Linear,
    /// Recurrent weights `[H, 2H]` for `[z, r]`.
    uzr: ParamId,
    /// Recurrent weights `[H, H]` for the candidate.
    uc: ParamId,
}

#[derive(Clone, Debug, Default)]
pub struct GruCache<S> {
    pub h_prev: Vec<S>,
    pub z: Vec<S>,
    pub r: Vec<S>,
    pub rh: Vec<S>,
    pub c: Vec<S>,
    pub h: Vec<S>,
}

impl Gru {
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        layout: InputLayout,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wx = Linear::new(store, &format!("{name}.input"), layout, 3 * hidden, rng)?;
        let bound = 1.0 / (hidden as f64).sqrt();
        let uzr = store.add(
            &format!("{name}.recurrent_zr"),
            uniform_tensor(rng, &[hidden, 2 * hidden], bound),
        )?;
        let uc = store.add(
            &format!("{name}.recurrent_c"),
            uniform_tensor(rng, &[hidden, hidden], bound),
        )?;
        Ok(Gru {
            name: name.to_string(),
            hidden,
            wx,
            uzr,
            uc,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_layout(&self) -> &InputLayout {
        self.wx.layout()
    }

    pub fn step<S: Real>(
        &self,
        ps: &ParamStore<S>,
        h_prev: &[S],
        x: Input<S>,
    ) -> Result<GruCache<S>> {
        let hd = self.hidden;
        if h_prev.len() != hd {
            return Err(Error::dim(
                format!("{}.recurrent_zr", self.name),
                hd,
                h_prev.len(),
            ));
        }
        let gx = self.wx.forward(ps, x)?;
        let uzr = ps.data(self.uzr);
        let uc = ps.data(self.uc);
        let mut gzr = gx[..2 * hd].to_vec();
        for (i, &hi) in h_prev.iter().enumerate() {
            if hi != S::zero() {
                axpy(hi, &uzr[i * 2 * hd..(i + 1) * 2 * hd], &mut gzr);
            }
        }
        let z: Vec<S> = gzr[..hd].iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<S> = gzr[hd..].iter().map(|&v| sigmoid(v)).collect();
        let rh: Vec<S> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
        let mut gc = gx[2 * hd..].to_vec();
        for (i, &v) in rh.iter().enumerate() {
            if v != S::zero() {
                axpy(v, &uc[i * hd..(i + 1) * hd], &mut gc);
            }
        }
        let c: Vec<S> = gc.iter().map(|&v| v.tanh()).collect();
        let h: Vec<S> = (0..hd)
            .map(|i| (S::one() - z[i]) * h_prev[i] + z[i] * c[i])
            .collect();
        Ok(GruCache {
            h_prev: h_prev.to_vec(),
            z,
            r,
            rh,
            c,
            h,
        })
    }

    /// Backward through one step. Adds into `dh_prev` and `dx_dense`.
    pub fn backward<S: Real>(
        &self,
        ps: &ParamStore<S>,
        x: Input<S>,
        cache: &GruCache<S>,
        dh: &[S],
        grads: &mut Gradients<S>,
        dh_prev: &mut [S],
        dx_dense: Option<&mut [S]>,
    ) {
        let hd = self.hidden;
        let one = S::one();
        let mut dgx = vec![S::zero(); 3 * hd];
        for i in 0..hd {
            dh_prev[i] += dh[i] * (one - cache.z[i]);
            let dz = dh[i] * (cache.c[i] - cache.h_prev[i]);
            dgx[i] = dz * cache.z[i] * (one - cache.z[i]);
            let dc = dh[i] * cache.z[i];
            dgx[2 * hd + i] = dc * (one - cache.c[i] * cache.c[i]);
        }
        let uc = ps.data(self.uc);
        let uzr = ps.data(self.uzr);
        let dpre_c = dgx[2 * hd..].to_vec();
        {
            let g = grads.get_mut(self.uc);
            for (i, &v) in cache.rh.iter().enumerate() {
                if v != S::zero() {
                    axpy(v, &dpre_c, &mut g[i * hd..(i + 1) * hd]);
                }
            }
        }
        for i in 0..hd {
            let drh = dot(&uc[i * hd..(i + 1) * hd], &dpre_c);
            let dr = drh * cache.h_prev[i];
            dh_prev[i] += drh * cache.r[i];
            dgx[hd + i] = dr * cache.r[i] * (one - cache.r[i]);
        }
        let dzr = dgx[..2 * hd].to_vec();
        {
            let g = grads.get_mut(self.uzr);
            for (i, &v) in cache.h_prev.iter().enumerate() {
                if v != S::zero() {
                    axpy(v, &dzr, &mut g[i * 2 * hd..(i + 1) * 2 * hd]);
                }
            }
        }
        for (i, d) in dh_prev.iter_mut().enumerate() {
            *d += dot(&uzr[i * 2 * hd..(i + 1) * 2 * hd], &dzr);
        }
        self.wx.backward(ps, x, &dgx, grads, dx_dense);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all<S: Real>(ps: &mut ParamStore<S>) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            ps.data_mut(id).iter_mut().for_each(|x| *x = S::zero());
        }
    }

    fn set_identity(ps: &mut ParamStore<f64>, id: ParamId, n: usize) {
        let d = ps.data_mut(id);
        d.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let mlp = Mlp::new(
            &mut ps,
            "f",
            InputLayout::dense(3),
            4,
            2,
            Activation::Relu,
            Activation::Linear,
            &mut rng,
        )
        .unwrap();
        zero_all(&mut ps);
        let c = mlp.forward(&ps, Input::dense(&[1.0, -7.0, 2.0])).unwrap();
        assert_eq!(c.out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_relu_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let mlp = Mlp::new(
            &mut ps,
            "f",
            InputLayout::dense(2),
            2,
            2,
            Activation::Relu,
            Activation::Relu,
            &mut rng,
        )
        .unwrap();
        zero_all(&mut ps);
        set_identity(&mut ps, mlp.l1.weight(), 2);
        set_identity(&mut ps, mlp.l2.weight(), 2);
        let c = mlp.forward(&ps, Input::dense(&[-1.0, 2.0])).unwrap();
        assert_eq!(c.out, vec![0.0, 2.0]);
    }

    #[test]
    fn mlp_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::<f64>::new();
        let mlp = Mlp::new(
            &mut ps,
            "f",
            InputLayout::dense(3),
            4,
            2,
            Activation::Tanh,
            Activation::Linear,
            &mut rng,
        )
        .unwrap();
        let x = [0.3, -1.1, 0.8];
        let w1 = ps.get(mlp.l1.weight()).clone();
        let b1 = ps.get(mlp.l1.bias()).clone();
        let w2 = ps.get(mlp.l2.weight()).clone();
        let b2 = ps.get(mlp.l2.bias()).clone();
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut s = b1.data()[j];
            for i in 0..3 {
                s += w1.data()[i * 4 + j] * x[i];
            }
            h[j] = s.tanh();
        }
        let mut y = [0.0; 2];
        for j in 0..2 {
            let mut s = b2.data()[j];
            for i in 0..4 {
                s += w2.data()[i * 2 + j] * h[i];
            }
            y[j] = s;
        }
        let c = mlp.forward(&ps, Input::dense(&x)).unwrap();
        for j in 0..2 {
            assert!((c.out[j] - y[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_errors_name_the_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f32>::new();
        let lin = Linear::new(&mut ps, "enc.fc", InputLayout::dense(3), 2, &mut rng).unwrap();
        match lin.forward(&ps, Input::dense(&[1.0, 2.0])) {
            Err(Error::Dimension {
                param,
                expected,
                got,
            }) => {
                assert_eq!(param, "enc.fc.weight");
                assert_eq!((expected, got), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let lin = Linear::new(
            &mut ps,
            "oh",
            InputLayout::new(0, vec![Slot::OneHot(5)]),
            2,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            lin.forward(&ps, Input::new(&[], &[5])),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn one_hot_slot_equals_dense_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let sparse = Linear::new(
            &mut ps,
            "s",
            InputLayout::new(2, vec![Slot::OneHot(4), Slot::OneHot(3)]),
            5,
            &mut rng,
        )
        .unwrap();
        let dense = Linear {
            name: "d".into(),
            layout: InputLayout::dense(9),
            out: 5,
            w: sparse.w,
            b: sparse.b,
        };
        let a = sparse
            .forward(&ps, Input::new(&[0.5, -2.0], &[2, 1]))
            .unwrap();
        let mut x = vec![0.0; 9];
        x[0] = 0.5;
        x[1] = -2.0;
        x[2 + 2] = 1.0;
        x[6 + 1] = 1.0;
        let b = dense.forward(&ps, Input::dense(&x)).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gru_halves_previous_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let gru = Gru::new(&mut ps, "g", InputLayout::dense(3), 4, &mut rng).unwrap();
        zero_all(&mut ps);
        let h = [1.0, -2.0, 0.5, 4.0];
        let c = gru.step(&ps, &h, Input::dense(&[0.3, 0.2, -0.1])).unwrap();
        for (a, b) in c.h.iter().zip(&h) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
        let c = gru.step(&ps, &[0.0; 4], Input::dense(&[0.0; 3])).unwrap();
        assert!(c.h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gru_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::<f64>::new();
        let (nx, nh) = (3, 4);
        let gru = Gru::new(&mut ps, "g", InputLayout::dense(nx), nh, &mut rng).unwrap();
        let wx = ps.get(gru.wx.weight()).data().to_vec();
        let bx = ps.get(gru.wx.bias()).data().to_vec();
        let uzr = ps.get(gru.uzr).data().to_vec();
        let uc = ps.get(gru.uc).data().to_vec();
        let x = [0.4, -0.9, 1.3];
        let h = [0.2, -0.5, 0.7, 0.1];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = [0.0; 4];
        let mut r = [0.0; 4];
        for j in 0..nh {
            let mut az = bx[j];
            let mut ar = bx[nh + j];
            for i in 0..nx {
                az += wx[i * 3 * nh + j] * x[i];
                ar += wx[i * 3 * nh + nh + j] * x[i];
            }
            for i in 0..nh {
                az += uzr[i * 2 * nh + j] * h[i];
                ar += uzr[i * 2 * nh + nh + j] * h[i];
            }
            z[j] = sig(az);
            r[j] = sig(ar);
        }
        let mut expect = [0.0; 4];
        for j in 0..nh {
            let mut ac = bx[2 * nh + j];
            for i in 0..nx {
                ac += wx[i * 3 * nh + 2 * nh + j] * x[i];
            }
            for i in 0..nh {
                ac += uc[i * nh + j] * r[i] * h[i];
            }
            expect[j] = (1.0 - z[j]) * h[j] + z[j] * ac.tanh();
        }
        let c = gru.step(&ps, &h, Input::dense(&x)).unwrap();
        for j in 0..nh {
            assert!((c.h[j] - expect[j]).abs() < 1e-6);
        }
    }
}
