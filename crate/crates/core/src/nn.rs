//! Parameter storage, tape binding, basic layers and the optimizer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
}

/// Named, grouped learnable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::input(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Distinct group names in first-registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Binds a parameter store onto a tape. Each parameter becomes a leaf the
/// first time it is used.
pub struct Ctx<'t, T> {
    pub tape: &'t Tape<T>,
    params: Option<&'t ParamStore<T>>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    track: bool,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// `track` decides whether parameters receive gradients.
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>, track: bool) -> Self {
        Self {
            tape,
            params: Some(params),
            bound: RefCell::new(vec![None; params.len()]),
            track,
        }
    }

    /// Use existing tape variables as the parameters, in registration order.
    pub fn from_vars(tape: &'t Tape<T>, vars: &[Var<'t, T>]) -> Self {
        Self {
            tape,
            params: None,
            bound: RefCell::new(vars.iter().map(|&v| Some(v)).collect()),
            track: true,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        let params = self.params;
        *bound[id.0].get_or_insert_with(|| {
            let store = params.expect("parameter bound from variables");
            self.tape.leaf(store.get(id).clone(), self.track)
        })
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'t, T> {
        self.tape.constant(Tensor::zeros(shape))
    }

    /// Gradient per parameter after a backward pass; unused parameters get
    /// zeros.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        let store = self.params.expect("grads needs a parameter store");
        store
            .iter()
            .zip(bound.iter())
            .map(|(p, v)| v.and_then(|v| v.grad()).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

/// Weight initialisation helpers. All draws go through the caller's RNG so
/// that model construction is reproducible.
pub struct Init<'a, R> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::randn(self.rng, shape, std)
    }
}

/// Token-wise affine map `[N, in] → [N, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        group: &str,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self::with_values(store, group, name, init.normal(&[din, dout], std), Tensor::zeros(&[dout]))
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, group: &str, name: &str, din: usize, dout: usize) -> Self {
        Self::with_values(store, group, name, Tensor::zeros(&[din, dout]), Tensor::zeros(&[dout]))
    }

    pub fn with_values<T: Scalar>(store: &mut ParamStore<T>, group: &str, name: &str, w: Tensor<T>, b: Tensor<T>) -> Self {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        Self {
            w: store.add(group, &format!("{name}.w"), w),
            b: store.add(group, &format!("{name}.b"), b),
            din,
            dout,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(ctx.p(self.w))?.add_along(ctx.p(self.b), -1)
    }
}

/// Square-kernel convolution with bias on `[C, H, W]` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = init.normal(&[cout, cin, k, k], std);
        Self {
            w: store.add(group, &format!("{name}.w"), w),
            b: store.add(group, &format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(ctx.p(self.w), Some(ctx.p(self.b)), self.stride, self.pad)
    }
}

/// Residual two-layer perceptron applied token-wise.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        group: &str,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, init, group, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, init, group, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.up.forward(ctx, x)?.gelu()?;
        x.add(self.down.forward(ctx, h)?)
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i].real();
                let mi = self.beta1 * md[i].real() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vd[i].real() + (1.0 - self.beta2) * gi * gi;
                md[i] = T::c(mi);
                vd[i] = T::c(vi);
                let upd = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                pd[i] = T::c(pd[i].real() - upd);
            }
        }
    }
}
