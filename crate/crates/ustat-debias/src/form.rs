//! Multilinear forms on the carrier space.
//!
//! A `KLinearForm` is an arity-`k` real-valued map on elements. Derivative
//! forms of the functionals in this crate are symmetric and multilinear by
//! construction; the type itself admits arbitrary kernels so that the
//! enumeration oracles can also exercise kernels that deliberately violate
//! those properties.

use std::sync::Arc;

use crate::element::{Element, ElementSignature};
use crate::error::{Error, Result};

type EvalFn = dyn Fn(&[&Element]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct KLinearForm {
    arity: usize,
    symmetric: bool,
    signature: ElementSignature,
    eval: Arc<EvalFn>,
}

impl KLinearForm {
    pub fn new(
        arity: usize,
        symmetric: bool,
        signature: ElementSignature,
        eval: impl Fn(&[&Element]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(arity >= 1, "forms have arity at least 1");
        Self { arity, symmetric, signature, eval: Arc::new(eval) }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn signature(&self) -> ElementSignature {
        self.signature
    }

    /// Evaluate on `k` argument slots after checking arity and signatures.
    pub fn evaluate(&self, args: &[&Element]) -> Result<f64> {
        if args.len() != self.arity {
            return Err(Error::DimensionMismatch { expected: self.arity, got: args.len() });
        }
        for arg in args {
            let sig = arg.signature();
            if sig.kind != self.signature.kind {
                return Err(Error::KindMismatch {
                    left: self.signature.kind.name(),
                    right: sig.kind.name(),
                });
            }
            if sig.dim != self.signature.dim {
                return Err(Error::DimensionMismatch { expected: self.signature.dim, got: sig.dim });
            }
        }
        Ok((self.eval)(args))
    }

    /// Evaluation skipping per-argument checks; used by enumeration loops
    /// that validated the batch up front.
    pub(crate) fn evaluate_unchecked(&self, args: &[&Element]) -> f64 {
        (self.eval)(args)
    }

    /// Fix the first `count` slots to a constant element, producing a form of
    /// arity `k - count`. Symmetry of the original form makes the slot choice
    /// immaterial. When `count == k` the result has arity 0 in spirit; this
    /// returns an error instead, callers handle the fully-applied case.
    pub fn fix_front(&self, fixed: &Element, count: usize) -> Result<KLinearForm> {
        if count >= self.arity {
            return Err(Error::DimensionMismatch { expected: self.arity - 1, got: count });
        }
        let sig = fixed.signature();
        if sig != self.signature {
            return Err(Error::KindMismatch {
                left: self.signature.kind.name(),
                right: sig.kind.name(),
            });
        }
        let inner = self.eval.clone();
        let pinned = fixed.clone();
        let arity = self.arity;
        Ok(KLinearForm::new(
            self.arity - count,
            self.symmetric,
            self.signature,
            move |rest: &[&Element]| {
                let mut slots: Vec<&Element> = Vec::with_capacity(arity);
                for _ in 0..count {
                    slots.push(&pinned);
                }
                slots.extend_from_slice(rest);
                (inner)(&slots)
            },
        ))
    }

    /// The trace form on matrix elements (arity 1).
    pub fn trace(dim: usize) -> KLinearForm {
        KLinearForm::new(1, true, ElementSignature::dense(dim), |args| {
            args[0].as_matrix().expect("checked dense").trace()
        })
    }

    /// The order-`k` product kernel on scalar (1x1) elements:
    /// `(h_1, .., h_k) -> h_1 * .. * h_k`.
    pub fn scalar_product(k: usize) -> KLinearForm {
        KLinearForm::new(k, true, ElementSignature::dense(1), |args| {
            args.iter().map(|a| a.as_scalar().expect("checked scalar")).product()
        })
    }
}

impl std::fmt::Debug for KLinearForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KLinearForm")
            .field("arity", &self.arity)
            .field("symmetric", &self.symmetric)
            .field("signature", &self.signature)
            .finish()
    }
}
