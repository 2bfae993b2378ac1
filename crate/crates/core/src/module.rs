//! Named parameter traversal and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wm_tensor::Tensor;

/// A container of named parameter tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Module`] from a list of tensor fields and child modules.
macro_rules! module {
    ($ty:ty { $($leaf:ident),* $(,)? } $( children { $($child:ident),* $(,)? } )?) => {
        impl $crate::module::Module for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &wm_tensor::Tensor)) {
                $( f(&$crate::module::join(prefix, stringify!($leaf)), &self.$leaf); )*
                $($( self.$child.visit(&$crate::module::join(prefix, stringify!($child)), f); )*)?
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut wm_tensor::Tensor)) {
                $( f(&$crate::module::join(prefix, stringify!($leaf)), &mut self.$leaf); )*
                $($( self.$child.visit_mut(&$crate::module::join(prefix, stringify!($child)), f); )*)?
            }
        }
    };
}
pub(crate) use module;

/// Seeded parameter factory.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Gaussian with standard deviation `1 / sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let v = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::param(v, shape).expect("shape matches")
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(vec![value; n], shape).expect("shape matches")
    }
}
